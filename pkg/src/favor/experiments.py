"""Training/evaluation recipes, ablations, sweeps and similarity exports."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .decoder import DecoderConfig
from .losses import mean_offdiag_similarity
from .metrics import TASK_SCORING, EvalRecord, WerResult, score_answer, wer
from .model import EncoderConfig, FavorModel, Prepared
from .qformer import QFormerConfig, WindowOutputs
from .sync import WindowingConfig
from .tasks import SyntheticTask, make_split
from .train import TrainConfig, fit
from .vocab import Vocabulary

log = logging.getLogger(__name__)

ABLATIONS = {
    "full": {},
    "no_causal_encoder": {"use_causal_attention": False},
    "no_sliding_window": {"use_sliding_window": False},
    "no_synchronization": {"use_synchronization": False},
}


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    n_train: int = 2000
    n_test: int = 200
    data_seed: int = 0
    k: int = 10
    n_queries: int = 8
    qformer: QFormerConfig = field(default_factory=QFormerConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task_kwargs: tuple = ()
    max_answer_len: int = 4
    lora_rank: int = 0

    def with_toggles(self, **toggles) -> "ExperimentConfig":
        return replace(self, qformer=replace(self.qformer, **toggles))

    def with_train(self, **kw) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, **kw))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def preset(kind: str) -> ExperimentConfig:
    """Default desk-scale recipe for one task kind."""
    vocab = len(Vocabulary())
    dec = DecoderConfig(vocab_size=vocab)
    if kind == "toy_asr":
        # one query per slot: enough for a full transcript with sliding windows, too few for one global window
        return ExperimentConfig(
            kind,
            n_train=3000,
            k=4,
            n_queries=4,
            decoder=replace(dec, max_context=48),
            train=TrainConfig(steps=1200, lr=2e-3),
            task_kwargs=(("duration_range", (2.0, 4.0)), ("symbol_period_s", 0.5)),
            max_answer_len=12,
        )
    if kind == "temporal_qa":
        # one-frame scenes so each slot's causal context holds the previous scene;
        # 16k samples, because 2k are memorised long before the rule is learned
        return ExperimentConfig(
            kind,
            n_train=16000,
            qformer=QFormerConfig(d_model=32),
            decoder=replace(dec, d_model=32, max_context=32),
            train=TrainConfig(steps=12000, lr=1e-3),
            task_kwargs=(("num_symbols", 8), ("num_scenes", 4), ("total_frames", 4), ("max_scene_frames", 1)),
        )
    if kind == "isqa":
        # 8000 of the ~9.2k distinct samples; smaller sets are memorised before the pairing is learned
        return ExperimentConfig(
            kind,
            n_train=8000,
            qformer=QFormerConfig(d_model=32),
            decoder=replace(dec, d_model=32),
            train=TrainConfig(steps=3000, lr=1e-3),
        )
    if kind == "avm":
        return ExperimentConfig(kind, n_train=2000, train=TrainConfig(steps=800))
    raise ValueError(f"unknown task kind {kind!r}")


def build_model(cfg: ExperimentConfig, seed: int) -> FavorModel:
    q = replace(cfg.qformer, n_queries=cfg.n_queries, d_llm=cfg.decoder.d_model)
    return FavorModel(
        q,
        cfg.decoder,
        WindowingConfig(cfg.k, cfg.n_queries),
        cfg.encoder,
        Vocabulary(),
        seed=seed,
        lora_rank=cfg.lora_rank,
    )


def load_data(cfg: ExperimentConfig) -> tuple[list[SyntheticTask], list[SyntheticTask]]:
    return make_split(cfg.kind, cfg.data_seed, cfg.n_train, cfg.n_test, **dict(cfg.task_kwargs))


def _groups(prepared: list[Prepared], size: int):
    by_sig: dict[tuple, list[Prepared]] = {}
    for p in prepared:
        by_sig.setdefault((len(p.windows), len(p.prompt)), []).append(p)
    for key in sorted(by_sig):
        items = by_sig[key]
        for i in range(0, len(items), size):
            yield items[i : i + size]


@dataclass
class EvalSummary:
    kind: str
    records: list[EvalRecord]
    accuracy: float | None = None
    wer: WerResult | None = None
    offdiag_similarity: float | None = None

    def metrics(self) -> dict:
        out = {"n": len(self.records)}
        if self.accuracy is not None:
            out["accuracy"] = self.accuracy
        if self.wer is not None:
            out.update(
                wer=self.wer.wer,
                substitutions=self.wer.substitutions,
                deletions=self.wer.deletions,
                insertions=self.wer.insertions,
            )
        if self.offdiag_similarity is not None:
            out["offdiag_similarity"] = self.offdiag_similarity
        return out


def evaluate(
    model: FavorModel,
    tasks: list[SyntheticTask],
    max_answer_len: int = 4,
    fps: float | None = None,
    batch_size: int = 64,
) -> EvalSummary:
    """Greedy-decode every task and score it with its kind's rule."""
    prepared = [model.prepare(t, fps) for t in tasks]
    records: list[EvalRecord] = []
    states = []
    for group in _groups(prepared, batch_size):
        hyps = model.generate(group, max_answer_len)
        for p, hyp in zip(group, hyps):
            records.append(EvalRecord(p.task.task_id, p.task.kind, hyp, list(p.task.reference), prompt=p.task.prompt))
        for p in group:
            states.append(model.query_states(p))
    records.sort(key=lambda r: r.task_id)
    kinds = {t.kind for t in tasks}
    if len(kinds) != 1:
        raise ValueError("evaluate() expects tasks of a single kind")
    kind = kinds.pop()
    summary = EvalSummary(kind, records)
    rule = TASK_SCORING[kind]
    if rule == "wer":
        total = WerResult(0, 0, 0, 0)
        for r in records:
            w = wer(r.reference, r.hypothesis)
            r.score = w.wer
            total = total + w
        summary.wer = total
    else:
        for r in records:
            r.score = score_answer(r, rule)
        summary.accuracy = float(np.mean([r.score for r in records]))
    summary.offdiag_similarity = float(np.mean([mean_offdiag_similarity(s) for s in states]))
    return summary


@dataclass
class RunResult:
    cfg: ExperimentConfig
    seed: int
    model: FavorModel
    summary: EvalSummary
    train_seconds: float
    final_ce: float


def run_experiment(cfg: ExperimentConfig, seed: int = 0, data=None, log_file=None) -> RunResult:
    """Train one model from scratch on ``cfg.kind`` and evaluate it on held-out data."""
    train_tasks, test_tasks = data if data is not None else load_data(cfg)
    model = build_model(cfg, seed)
    prepared = [model.prepare(t) for t in train_tasks]
    t0 = time.perf_counter()
    _, history = fit(model, prepared, replace(cfg.train, seed=seed), log_file=log_file)
    elapsed = time.perf_counter() - t0
    summary = evaluate(model, test_tasks, cfg.max_answer_len)
    final = float(np.mean([h.loss.ce for h in history[-20:]])) if history else float("nan")
    log.info("%s seed=%d %s (%.1fs)", cfg.kind, seed, summary.metrics(), elapsed)
    return RunResult(cfg, seed, model, summary, elapsed, final)


def fps_sweep(model: FavorModel, tasks, fps_values, max_answer_len: int = 4) -> list[dict]:
    """Evaluate a trained model with visual frames re-sampled at other rates."""
    rows = []
    for fps in fps_values:
        s = evaluate(model, tasks, max_answer_len, fps=fps)
        rows.append({"fps": fps, **s.metrics()})
    return rows


def run_ablation(
    kind: str,
    variants=("full", "no_causal_encoder", "no_sliding_window", "no_synchronization"),
    seeds=(0,),
    base: ExperimentConfig | None = None,
    window_pairs=(),
    fps_values=(),
) -> list[dict]:
    """Train each ablation variant per seed; optionally sweep (k, N) pairs and inference FPS.

    ``window_pairs`` should keep N/k constant so the total number of output
    queries is unchanged across the sweep.
    """
    base = base or preset(kind)
    data = load_data(base)
    rows = []
    for variant in variants:
        cfg = base.with_toggles(**ABLATIONS[variant])
        for seed in seeds:
            res = run_experiment(cfg, seed, data)
            rows.append({"task": kind, "variant": variant, "seed": seed, "k": cfg.k, "n_queries": cfg.n_queries,
                         **res.summary.metrics(), "train_seconds": round(res.train_seconds, 2)})
            if variant == "full" and fps_values:
                for r in fps_sweep(res.model, data[1], fps_values, base.max_answer_len):
                    rows.append({"task": kind, "variant": "full_fps_sweep", "seed": seed, "k": cfg.k,
                                 "n_queries": cfg.n_queries, **r})
    for k, n in window_pairs:
        cfg = replace(base, k=k, n_queries=n)
        for seed in seeds:
            res = run_experiment(cfg, seed, data)
            rows.append({"task": kind, "variant": "window_sweep", "seed": seed, "k": k, "n_queries": n,
                         **res.summary.metrics(), "train_seconds": round(res.train_seconds, 2)})
    return rows


def sweep_lambda(kind: str, lambdas=(0.0, 0.01, 0.05, 0.2, 1.0), seeds=(0,), base=None) -> list[dict]:
    base = base or preset(kind)
    data = load_data(base)
    rows = []
    for lam in lambdas:
        for seed in seeds:
            res = run_experiment(base.with_train(lam=lam), seed, data)
            rows.append({"task": kind, "lambda": lam, "seed": seed, **res.summary.metrics()})
    return rows


def write_table(rows: list[dict], path=None) -> str:
    """Comma-separated table with the union of row keys as header."""
    keys: list[str] = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: r.get(k, "") for k in keys})
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def similarity_matrix(outputs: WindowOutputs | np.ndarray) -> np.ndarray:
    """(W*N) x (W*N) cosine similarities across every output query of a sequence."""
    if isinstance(outputs, WindowOutputs):
        arr = outputs.states.data
    else:
        arr = np.asarray(getattr(outputs, "data", outputs))
    flat = arr.reshape(-1, arr.shape[-1])
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("zero-norm query vector")
    xn = flat / norms
    sims = xn @ xn.T
    sims = 0.5 * (sims + sims.T)
    np.fill_diagonal(sims, 1.0)
    return sims


def export_similarity_matrix(outputs, path) -> np.ndarray:
    sims = similarity_matrix(outputs)
    np.savetxt(path, sims, delimiter=",", fmt="%.17g")
    return sims


@dataclass(frozen=True)
class DirectionCheck:
    name: str
    passed: bool
    detail: str


def _by_seed(rows, key, value, metric):
    return {r["seed"]: r[metric] for r in rows if r.get(key) == value and metric in r}


def _majority(name, pairs, better, describe) -> DirectionCheck:
    """``pairs`` maps seed -> (reference, variant); ``better`` says whether the seed agrees."""
    wins = [s for s, (a, b) in sorted(pairs.items()) if better(a, b)]
    ok = bool(pairs) and len(wins) * 2 > len(pairs)
    detail = "; ".join(f"seed {s}: {describe(a, b)}" for s, (a, b) in sorted(pairs.items()))
    return DirectionCheck(name, ok, f"{len(wins)}/{len(pairs)} seeds agree ({detail})")


# variant that should hurt, the metric it hurts, and how
ABLATION_EXPECTATIONS = {
    "temporal_qa": ("no_causal_encoder", "accuracy", "drop", 0.05),
    "toy_asr": ("no_sliding_window", "deletions", "rise", 0.0),
    "isqa": ("no_synchronization", "accuracy", "drop", 0.0),
}


def check_ablation(kind: str, rows: list[dict]) -> DirectionCheck:
    """Majority-over-seeds check that the task's key ablation moves its metric the expected way."""
    if kind not in ABLATION_EXPECTATIONS:
        raise ValueError(f"no directional expectation registered for {kind!r}")
    variant, metric, direction, margin = ABLATION_EXPECTATIONS[kind]
    full = _by_seed(rows, "variant", "full", metric)
    ablated = _by_seed(rows, "variant", variant, metric)
    pairs = {s: (full[s], ablated[s]) for s in full if s in ablated}
    if direction == "drop":
        better = lambda a, b: a - b >= margin if margin else a > b  # noqa: E731
    else:
        better = lambda a, b: b > a  # noqa: E731
    return _majority(f"{kind}: {variant} {direction}s {metric}", pairs, better, lambda a, b: f"full {a:.4g} vs {b:.4g}")


def check_lambda(rows: list[dict], low=0.0, mid=0.05, high=1.0) -> list[DirectionCheck]:
    """Diversity lowers query similarity at ``mid`` vs ``low``; ``high`` costs accuracy vs ``mid``."""
    sim_low = _by_seed(rows, "lambda", low, "offdiag_similarity")
    sim_mid = _by_seed(rows, "lambda", mid, "offdiag_similarity")
    pairs = {s: (sim_low[s], sim_mid[s]) for s in sim_low if s in sim_mid}
    sim = _majority(f"lambda {mid} lowers similarity vs {low}", pairs, lambda a, b: b < a,
                    lambda a, b: f"{a:.4f} -> {b:.4f}")
    acc_mid = _by_seed(rows, "lambda", mid, "accuracy")
    acc_high = _by_seed(rows, "lambda", high, "accuracy")
    pairs = {s: (acc_mid[s], acc_high[s]) for s in acc_mid if s in acc_high}
    acc = _majority(f"lambda {high} lowers accuracy vs {mid}", pairs, lambda a, b: b < a,
                    lambda a, b: f"{a:.3f} -> {b:.3f}")
    return [sim, acc]
