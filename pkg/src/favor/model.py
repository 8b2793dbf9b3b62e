"""End-to-end model: frozen encoders -> synchronisation -> causal Q-Former -> decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .decoder import DecoderConfig, ToyDecoder, apply_adapters
from .encoders import encode_audio_synthetic, encode_visual_synthetic
from .losses import LossBreakdown, diversity_loss, objective, total_loss
from .qformer import CausalQFormer, QFormerConfig
from .sync import SyncedSequence, WindowingConfig, synchronize
from .tasks import SyntheticTask
from .tensor import Tensor
from .vocab import Vocabulary


@dataclass(frozen=True)
class EncoderConfig:
    d_audio: int = 32
    d_visual: int = 32
    audio_rate_hz: float = 50.0
    fps: float = 2.0
    vectors_per_frame: int = 4
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Prepared:
    """A task turned into model inputs: windows plus prompt and target ids."""

    task: SyntheticTask
    windows: list[np.ndarray]
    prompt: np.ndarray
    target: np.ndarray

    @property
    def signature(self) -> tuple[int, int, int]:
        return len(self.windows), len(self.prompt), len(self.target)


class FavorModel:
    def __init__(
        self,
        qformer: QFormerConfig,
        decoder: DecoderConfig,
        windowing: WindowingConfig,
        encoder: EncoderConfig | None = None,
        vocab: Vocabulary | None = None,
        seed: int = 0,
        lora_rank: int = 0,
    ):
        self.encoder = encoder or EncoderConfig(d_audio=qformer.d_audio, d_visual=qformer.d_visual)
        if (self.encoder.d_audio, self.encoder.d_visual) != (qformer.d_audio, qformer.d_visual):
            raise ValueError("encoder dims must match the Q-Former input dims")
        if windowing.n_queries != qformer.n_queries:
            raise ValueError("windowing.n_queries must equal qformer.n_queries")
        if qformer.d_llm != decoder.d_model:
            raise ValueError("Q-Former output width must equal the decoder width")
        self.vocab = vocab or Vocabulary()
        if decoder.vocab_size != len(self.vocab):
            raise ValueError("decoder vocab_size does not match the vocabulary")
        self.windowing = windowing
        self.seed = seed
        self.lora_rank = lora_rank
        self.qformer = CausalQFormer(qformer, seed)
        base = ToyDecoder(decoder, seed)
        self.decoder = apply_adapters(base, lora_rank, seed) if lora_rank else base

    @property
    def config(self) -> QFormerConfig:
        return self.qformer.config

    def config_dict(self) -> dict:
        return {
            "qformer": self.qformer.config.to_dict(),
            "decoder": self.decoder.config.to_dict(),
            "windowing": {"k": self.windowing.k, "n_queries": self.windowing.n_queries},
            "encoder": self.encoder.to_dict(),
            "vocab": self.vocab.tokens,
            "seed": self.seed,
            "lora_rank": self.lora_rank,
        }

    @classmethod
    def from_config_dict(cls, d: dict) -> "FavorModel":
        return cls(
            QFormerConfig(**d["qformer"]),
            DecoderConfig(**d["decoder"]),
            WindowingConfig(**d["windowing"]),
            EncoderConfig(**d["encoder"]),
            Vocabulary(d["vocab"]),
            d["seed"],
            d["lora_rank"],
        )

    # -- parameters ------------------------------------------------------
    def parameter_groups(self) -> dict[str, dict[str, Tensor]]:
        """Parameters by checkpoint section; frozen tensors are included."""
        q = {k: v for k, v in self.qformer.params.items() if k != "queries"}
        return {
            "queries": {"queries": self.qformer.params["queries"]},
            "qformer": q,
            "decoder": self.decoder.params,
            "adapters": self.decoder.adapters,
        }

    def trainable_parameters(self) -> dict[str, Tensor]:
        out = {}
        for group, params in self.parameter_groups().items():
            for name, p in params.items():
                if p.requires_grad:
                    out[f"{group}/{name}"] = p
        return out

    def zero_grad(self) -> None:
        for params in self.parameter_groups().values():
            for p in params.values():
                p.grad = None

    # -- inputs ------------------------------------------------------------
    def synced(self, task: SyntheticTask, fps: float | None = None) -> list[SyncedSequence]:
        e = self.encoder
        fps = e.fps if fps is None else fps
        audio = visual = None
        if task.audio_track is not None:
            audio = encode_audio_synthetic(task.audio_track, e.d_audio, e.seed, e.audio_rate_hz)
        if task.visual_track is not None:
            visual = encode_visual_synthetic(task.visual_track, e.d_visual, fps, e.vectors_per_frame, e.seed)
        dims = dict(d_audio=e.d_audio, d_visual=e.d_visual, slot_duration_s=1.0 / fps)
        if self.config.use_synchronization or audio is None or visual is None:
            return [synchronize(audio, visual, **dims)]
        # unsynchronised: each stream is windowed and encoded on its own
        return [synchronize(audio, None, **dims), synchronize(None, visual, **dims)]

    def prepare(self, task: SyntheticTask, fps: float | None = None) -> Prepared:
        windows: list[np.ndarray] = []
        for s in self.synced(task, fps):
            windows.extend(self.qformer.split_windows(s, self.windowing))
        prompt = np.array(self.vocab.encode(task.prompt), dtype=np.int64)
        target = np.array(self.vocab.encode(task.reference) + [self.vocab.end_id], dtype=np.int64)
        return Prepared(task, windows, prompt, target)

    # -- forward -------------------------------------------------------------
    def encode(self, batch: list[Prepared]) -> tuple[Tensor, Tensor]:
        """Q-Former states (total_windows, N, d_model) and decoder prefix (B, W*N, d_llm)."""
        counts = {len(b.windows) for b in batch}
        if len(counts) != 1:
            raise ValueError("all samples in a batch need the same number of windows")
        windows = [w for b in batch for w in b.windows]
        states = self.qformer.encode_windows(windows)
        proj = self.qformer.project(states)
        n, d = proj.shape[1], proj.shape[2]
        prefix = proj.reshape(len(batch), counts.pop() * n, d)
        return states, prefix

    def loss(self, batch: list[Prepared], lam: float) -> tuple[Tensor, LossBreakdown]:
        """Mean over samples of token-averaged CE plus ``lam`` times the per-sample diversity sum."""
        states, prefix = self.encode(batch)
        prompt = np.stack([b.prompt for b in batch])
        target = np.stack([b.target for b in batch])
        logits = self.decoder.forward(prefix, prompt, target)
        ce = T.cross_entropy(logits, target)
        div = diversity_loss(states) * (1.0 / len(batch))
        return objective(ce, div, lam), total_loss(ce.item(), div.item(), lam)

    def generate(self, batch: list[Prepared], max_len: int = 24) -> list[list[str]]:
        """Greedy answers for samples sharing prompt length and window count."""
        with T.no_grad():
            _, prefix = self.encode(batch)
            prompt = np.stack([b.prompt for b in batch])
            ids = self.decoder.generate(prefix, prompt, max_len, self.vocab.end_id)
        return [self.vocab.decode(row) for row in ids]

    def query_states(self, prepared: Prepared) -> np.ndarray:
        """Pre-projection query states (W, N, d_model) for one sample."""
        with T.no_grad():
            return self.qformer.encode_windows(prepared.windows).data
