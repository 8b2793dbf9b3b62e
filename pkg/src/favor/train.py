"""Adam optimisation, the training loop, and resumable checkpoints."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass
from typing import Callable, TextIO

import numpy as np

from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .losses import LossBreakdown
from .model import FavorModel, Prepared
from .tensor import Tensor

log = logging.getLogger(__name__)

SECTIONS = ("queries", "qformer", "decoder", "adapters", "optimizer", "step", "config")


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-3
    steps: int = 800
    batch_size: int = 16
    seed: int = 0
    lam: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup: int = 50
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.lr <= 0 or self.steps < 0 or self.batch_size < 1:
            raise ValueError("lr and batch_size must be positive, steps non-negative")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def learning_rate(self) -> float:
        c = self.cfg
        if c.warmup and self.t <= c.warmup:
            return c.lr * self.t / c.warmup
        return c.lr

    def step(self, scale: float = 1.0) -> None:
        """One update from the current ``.grad`` buffers, each multiplied by ``scale``."""
        c = self.cfg
        self.t += 1
        lr = self.learning_rate()
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            m = self.m[k]
            v = self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([float(self.t)])}
        for k in self.params:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state_tensors(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"][0])
        for k in self.params:
            try:
                self.m[k] = state[f"m/{k}"].copy()
                self.v[k] = state[f"v/{k}"].copy()
            except KeyError:
                raise CheckpointError(f"no moments stored for {k}", "optimizer") from None


@dataclass
class StepResult:
    step: int
    loss: LossBreakdown
    grad_norm: float

    def log_line(self) -> str:
        return f"{self.step} {self.loss.ce:.6f} {self.loss.diversity:.6f} {self.loss.total:.6f} {self.grad_norm:.6f}"


def train_step(model: FavorModel, batch: list[Prepared], opt: Adam, cfg: TrainConfig) -> tuple[LossBreakdown, float]:
    """Forward, backward and one clipped Adam update of the trainable parameters."""
    if not batch:
        raise ValueError("empty batch")
    model.zero_grad()
    total, parts = model.loss(batch, cfg.lam)
    if not np.isfinite(parts.total):
        raise TrainingDivergedError(f"non-finite loss: {parts}")
    total.backward()
    sq = sum(float((p.grad**2).sum()) for p in opt.params.values() if p.grad is not None)
    norm = float(np.sqrt(sq))
    if not np.isfinite(norm):
        raise TrainingDivergedError(f"non-finite gradient norm at loss {parts}")
    scale = 1.0
    if cfg.grad_clip and norm > cfg.grad_clip:
        scale = cfg.grad_clip / norm
    opt.step(scale)
    return parts, norm


class BatchSampler:
    """Draws same-shape batches; the batch at step s depends only on (seed, s)."""

    def __init__(self, data: list[Prepared], batch_size: int, seed: int):
        if not data:
            raise ValueError("no training data")
        buckets: dict[tuple, list[int]] = {}
        for i, p in enumerate(data):
            buckets.setdefault(p.signature, []).append(i)
        self.keys = sorted(buckets)
        self.buckets = [np.array(buckets[k]) for k in self.keys]
        sizes = np.array([len(b) for b in self.buckets], dtype=float)
        self.weights = sizes / sizes.sum()
        self.data = data
        self.batch_size = batch_size
        self.seed = seed

    def batch(self, step: int) -> list[Prepared]:
        rng = np.random.default_rng([self.seed, step, 17])
        bucket = self.buckets[rng.choice(len(self.buckets), p=self.weights)]
        take = rng.choice(bucket, size=min(self.batch_size, len(bucket)), replace=False)
        return [self.data[i] for i in take]


def fit(
    model: FavorModel,
    data: list[Prepared],
    cfg: TrainConfig,
    opt: Adam | None = None,
    start_step: int = 0,
    stop_step: int | None = None,
    log_file: TextIO | None = None,
    callback: Callable[[StepResult], None] | None = None,
) -> tuple[Adam, list[StepResult]]:
    """Train from ``start_step`` up to ``stop_step`` (default ``cfg.steps``)."""
    opt = opt or Adam(model.trainable_parameters(), cfg)
    sampler = BatchSampler(data, cfg.batch_size, cfg.seed)
    history = []
    stop = cfg.steps if stop_step is None else stop_step
    t0 = time.perf_counter()
    for step in range(start_step, stop):
        parts, norm = train_step(model, sampler.batch(step), opt, cfg)
        res = StepResult(step + 1, parts, norm)
        history.append(res)
        if log_file is not None:
            log_file.write(res.log_line() + "\n")
        if callback is not None:
            callback(res)
        if (step + 1) % 100 == 0:
            log.info("step %d ce=%.4f div=%.3f (%.1fs)", step + 1, parts.ce, parts.diversity, time.perf_counter() - t0)
    return opt, history


def save_checkpoint(path, model: FavorModel, opt: Adam, step: int, train_cfg: TrainConfig | None = None) -> None:
    groups = model.parameter_groups()
    sections: dict = {name: {k: p.data for k, p in params.items()} for name, params in groups.items()}
    sections["optimizer"] = opt.state_tensors()
    sections["step"] = {"step": np.array([float(step)])}
    meta = {"model": model.config_dict(), "train": None if train_cfg is None else train_cfg.to_dict()}
    sections["config"] = json.dumps(meta, sort_keys=True).encode()
    write_checkpoint(path, sections)


def load_checkpoint(path) -> tuple[FavorModel, Adam, int, TrainConfig]:
    """Rebuild model, optimiser and step counter from a checkpoint file."""
    sections = read_checkpoint(path, required=SECTIONS)
    meta = json.loads(sections["config"].decode())
    model = FavorModel.from_config_dict(meta["model"])
    cfg = TrainConfig(**meta["train"]) if meta.get("train") else TrainConfig()
    for name, params in model.parameter_groups().items():
        stored = sections[name]
        for k, p in params.items():
            if k not in stored:
                raise CheckpointError(f"tensor {k!r} missing", name)
            if stored[k].shape != p.data.shape:
                raise CheckpointError(f"tensor {k!r} has shape {stored[k].shape}, expected {p.data.shape}", name)
            p.data = stored[k].copy()
    opt = Adam(model.trainable_parameters(), cfg)
    opt.load_state_tensors(sections["optimizer"])
    step = int(sections["step"]["step"][0])
    return model, opt, step, cfg
