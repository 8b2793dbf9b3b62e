"""Fine-grained audio-visual fusion at desk scale."""
