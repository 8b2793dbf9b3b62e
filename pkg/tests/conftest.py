import numpy as np
import pytest

from favor.decoder import DecoderConfig
from favor.encoders import SymbolicTrack
from favor.model import EncoderConfig, FavorModel
from favor.qformer import QFormerConfig
from favor.sync import WindowingConfig
from favor.tasks import SyntheticTask
from favor.vocab import Vocabulary

# PASS/FAIL lines from the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []

TINY_TOKENS = ["<pad>", "<end>", "yes", "no", "A", "B", "what", "after", "options",
               "s0", "s1", "s2", "s3", "s4", "s5", "s6"]


def tiny_model(seed=0, blocks=1, heads=1, d_llm=8, lora_rank=0, **toggles) -> FavorModel:
    """d_A = d_V = 16, d_q = 32, N = 4, k = 3, vocab 16."""
    q = QFormerConfig(d_audio=16, d_visual=16, d_model=32, heads=heads, blocks=blocks, n_queries=4,
                      d_llm=d_llm, ffn_mult=1, max_slots=8, **toggles)
    d = DecoderConfig(vocab_size=16, d_model=d_llm, heads=1, blocks=1, ffn_mult=1, max_context=32)
    enc = EncoderConfig(16, 16, audio_rate_hz=4.0, fps=2.0, vectors_per_frame=2)
    return FavorModel(q, d, WindowingConfig(3, 4), enc, Vocabulary(TINY_TOKENS), seed=seed, lora_rank=lora_rank)


def tiny_task(task_id="tiny", audio=(0, 1, 2, 3, 0, 1, 2), visual=(1, 0, 3, 2, 1, 0, 3)) -> SyntheticTask:
    """Seven 0.5 s slots of audio and video, i.e. T = 7 and windows of 3, 3 and 1 slots."""
    a = SymbolicTrack.from_sequence(list(audio), 0.5, 4) if audio else None
    v = SymbolicTrack.from_sequence(list(visual), 0.5, 4) if visual else None
    return SyntheticTask(task_id, "temporal_qa", a, v, ["what", "after", "s1", "options", "s2", "s3"], ["s2", "s5"])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
