"""End-to-end acceptance suite.

Each test prints one ``PASS``/``FAIL`` line; the lines are repeated in the
terminal summary. Training runs are shared between tests through a cache, so
the full suite trains each (task, variant, seed, lambda) combination once.

Run alone with ``pytest tests/test_acceptance.py -v`` or as a script,
``python tests/test_acceptance.py``, which exits non-zero if any check fails.
"""

from __future__ import annotations

import itertools
import math
import sys
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))
from conftest import ACCEPTANCE_LINES  # noqa: E402

from favor import tensor as T  # noqa: E402
from favor.decoder import DecoderConfig  # noqa: E402
from favor.encoders import SymbolicTrack  # noqa: E402
from favor.experiments import (  # noqa: E402
    ABLATIONS,
    check_ablation,
    check_lambda,
    load_data,
    preset,
    run_experiment,
)
from favor.losses import diversity_loss, total_loss  # noqa: E402
from favor.metrics import EvalRecord, score_answer, wer  # noqa: E402
from favor.model import EncoderConfig, FavorModel  # noqa: E402
from favor.qformer import CausalQFormer, QFormerConfig  # noqa: E402
from favor.sync import SyncedSequence, WindowingConfig  # noqa: E402
from favor.tasks import SyntheticTask  # noqa: E402
from favor.train import TrainConfig, fit, load_checkpoint, save_checkpoint  # noqa: E402
from favor.vocab import Vocabulary  # noqa: E402

SEEDS = (0, 1, 2)
LAMBDA_TASK = "temporal_qa"
TRIALS = 1000


def report(name: str, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


# -- shared training runs ------------------------------------------------------


@lru_cache(maxsize=None)
def _data(kind: str):
    return load_data(preset(kind))


@lru_cache(maxsize=None)
def run(kind: str, variant: str = "full", seed: int = 0, lam: float | None = None) -> dict:
    cfg = preset(kind).with_toggles(**ABLATIONS[variant])
    if lam is not None:
        cfg = cfg.with_train(lam=lam)
    t0 = time.perf_counter()
    data = _data(kind)
    prep = time.perf_counter() - t0
    res = run_experiment(cfg, seed, data)
    wall = time.perf_counter() - t0
    return {"task": kind, "variant": variant, "seed": seed, "lambda": cfg.train.lam,
            "wall_seconds": wall, "data_seconds": prep, **res.summary.metrics()}


# -- gradient fidelity ---------------------------------------------------------

TINY_TOKENS = ["<pad>", "<end>", "yes", "no", "A", "B", "what", "after", "options",
               "s0", "s1", "s2", "s3", "s4", "s5", "s6"]


def _gradcheck_model() -> tuple[FavorModel, object]:
    """d_A = d_V = 16, d_q = 32, N = 4, k = 3, T = 7, vocab 16."""
    q = QFormerConfig(d_audio=16, d_visual=16, d_model=32, heads=2, blocks=1, n_queries=4, d_llm=16,
                      ffn_mult=1, max_slots=3)
    d = DecoderConfig(vocab_size=16, d_model=16, heads=2, blocks=1, ffn_mult=2, max_context=20)
    enc = EncoderConfig(16, 16, audio_rate_hz=4.0, fps=2.0, vectors_per_frame=2)
    model = FavorModel(q, d, WindowingConfig(3, 4), enc, Vocabulary(TINY_TOKENS), seed=0)
    audio = SymbolicTrack.from_sequence([0, 1, 2, 3, 0, 1, 2], 0.5, 4)
    video = SymbolicTrack.from_sequence([1, 0, 3, 2, 1, 0, 3], 0.5, 4)
    task = SyntheticTask("g", "temporal_qa", audio, video, ["what", "after", "s1", "options", "s2", "s3"], ["s2", "s5"])
    return model, model.prepare(task)


def test_gradient_fidelity():
    model, sample = _gradcheck_model()
    lam, eps = 0.05, 1e-3
    assert len(sample.windows) == 3 and sum(len(w) for w in sample.windows) == 7

    def f():
        with T.no_grad():
            return model.loss([sample], lam)[0].item()

    t0 = time.perf_counter()
    model.zero_grad()
    loss, _ = model.loss([sample], lam)
    loss.backward()
    params = model.trainable_parameters()
    checked, bad = 0, []
    for name, p in params.items():
        fd = T.finite_diff_grad(f, [p], eps)[0].reshape(-1)
        g = p.grad.reshape(-1)
        for i in np.flatnonzero(np.abs(g) > 1e-6):
            checked += 1
            rel = abs(g[i] - fd[i]) / abs(g[i])
            if rel >= 1e-4:
                bad.append((name, int(i), rel))
    elapsed = time.perf_counter() - t0

    # diagnostic: re-measure the failing coordinates with a smaller step
    worst_small = 0.0
    for name, i, _ in bad:
        flat = params[name].data.reshape(-1)
        orig, h = flat[i], 1e-5
        flat[i] = orig + h
        hi = f()
        flat[i] = orig - h
        lo = f()
        flat[i] = orig
        g = params[name].grad.reshape(-1)[i]
        worst_small = max(worst_small, abs(g - (hi - lo) / (2 * h)) / abs(g))
    worst = max((r for _, _, r in bad), default=0.0)
    passed = not bad and elapsed < 120
    detail = (f"{checked} coordinates with |g|>1e-6, {len(bad)} above rel 1e-4 at eps=1e-3 (worst {worst:.2e}); "
              f"{elapsed:.0f}s")
    if bad:
        detail += f"; the same coordinates at eps=1e-5 agree to rel {worst_small:.1e}"
    report("gradient fidelity", passed, detail)
    assert passed, detail


# -- causality -----------------------------------------------------------------


def test_causality():
    rng = np.random.default_rng(2024)
    cfg = QFormerConfig(d_audio=6, d_visual=6, d_model=16, heads=2, blocks=1, n_queries=3, d_llm=8,
                        ffn_mult=1, max_slots=12)
    model = CausalQFormer(cfg, seed=1)
    worst_within, worst_cross, moved = 0.0, 0.0, 0
    with T.no_grad():
        for _ in range(TRIALS):
            tw, v = int(rng.integers(2, 9)), int(rng.integers(1, 4))
            x = rng.standard_normal((tw, v, 12))
            t = int(rng.integers(0, tw - 1))
            y = x.copy()
            y[int(rng.integers(t + 1, tw))] += rng.standard_normal((v, 12))
            a, b = model.causal_attend(x).data[0], model.causal_attend(y).data[0]
            worst_within = max(worst_within, float(np.abs(a[: t + 1] - b[: t + 1]).max()))

            k = int(rng.integers(1, 5))
            total = int(rng.integers(k + 1, 3 * k + 2))
            x = rng.standard_normal((total, v, 12))
            w = int(rng.integers(0, math.ceil(total / k)))
            y = x.copy()
            y[int(rng.integers(w * k, min(total, (w + 1) * k)))] += rng.standard_normal((v, 12))
            wc = WindowingConfig(k, 3)
            oa = model.encode_sequence(SyncedSequence(x, 0.5, True, True, 6, 6), wc).states.data
            ob = model.encode_sequence(SyncedSequence(y, 0.5, True, True, 6, 6), wc).states.data
            others = [i for i in range(len(oa)) if i != w]
            if others:
                worst_cross = max(worst_cross, float(np.abs(oa[others] - ob[others]).max()))
            moved += bool(np.abs(oa[w] - ob[w]).max() > 0)
    passed = worst_within < 1e-12 and worst_cross < 1e-12 and moved == TRIALS
    detail = (f"{TRIALS} trials each: max future->past influence {worst_within:.1e}, "
              f"max cross-window influence {worst_cross:.1e}, perturbed window changed in {moved}/{TRIALS}")
    report("causality", passed, detail)
    assert passed, detail


# -- windowing law ---------------------------------------------------------------


def test_windowing_law():
    rng = np.random.default_rng(7)
    models: dict[int, CausalQFormer] = {}
    bad = []
    for _ in range(TRIALS):
        t, k, n = int(rng.integers(1, 41)), int(rng.integers(1, 13)), int(rng.integers(1, 9))
        if n not in models:
            cfg = QFormerConfig(d_audio=3, d_visual=2, d_model=8, heads=1, blocks=1, n_queries=n, d_llm=4,
                                ffn_mult=1, max_slots=12)
            models[n] = CausalQFormer(cfg, seed=n)
        slots = rng.standard_normal((t, 1, 5))
        synced = SyncedSequence(slots, 0.5, True, True, 3, 2)
        wc = WindowingConfig(k, n)
        parts = models[n].split_windows(synced, wc)
        with T.no_grad():
            out = models[n].encode_sequence(synced, wc)
        w = math.ceil(t / k)
        ok = (len(parts) == w == wc.num_windows(t) and out.flat().shape[0] == w * n
              and np.array_equal(np.concatenate(parts), slots) and all(len(p) <= k for p in parts))
        if not ok:
            bad.append((t, k, n))
    passed = not bad
    report("windowing law", passed, f"{TRIALS} random (T, k, N): {len(bad)} violations" + (f" e.g. {bad[:3]}" if bad else ""))
    assert passed


# -- diversity closed forms ------------------------------------------------------


def test_diversity_closed_forms():
    identical = np.tile(np.array([0.6, 0.0, 0.8]), (2, 4, 1))
    orth = np.stack([np.eye(4) * 2.0, np.eye(4)[::-1] * 0.5])
    v_same = diversity_loss(identical).item()
    v_orth = diversity_loss(orth).item()
    v_one = diversity_loss(orth[:1]).item()
    model, sample = _gradcheck_model()
    loss, parts = model.loss([sample], 0.0)
    ok = (v_same == 2 * 16.0 and v_orth == 2 * 4.0 and v_one == 4.0 and loss.item() == parts.ce
          and parts.total == parts.ce and total_loss(1.0, 4.0, 0.05).total == 1.2)
    detail = (f"identical W=2,N=4 -> {v_same!r} (expect 32.0); orthogonal W=2 -> {v_orth!r} (8.0), W=1 -> {v_one!r} (4.0); "
              f"lambda=0 total {loss.item()!r} vs CE {parts.ce!r}")
    report("diversity closed forms", ok, detail)
    assert ok, detail


# -- end-to-end learning -----------------------------------------------------------


def test_end_to_end_learning():
    qa = run("temporal_qa")
    asr = run("toy_asr")
    minutes = (qa["wall_seconds"] + asr["wall_seconds"]) / 60
    passed = qa["accuracy"] >= 0.90 and asr["wer"] <= 0.10 and minutes <= 15
    detail = (f"temporal_qa accuracy {qa['accuracy']:.3f} (>= 0.90), toy_asr WER {asr['wer']:.4f} (<= 0.10), "
              f"{minutes:.1f} min for both incl. data and eval (<= 15)")
    report("end-to-end synthetic learning", passed, detail)
    assert passed, detail


# -- ablation directions -------------------------------------------------------------


def test_ablation_directions():
    checks = []
    for kind, variant in (("temporal_qa", "no_causal_encoder"), ("toy_asr", "no_sliding_window"),
                          ("isqa", "no_synchronization")):
        rows = [run(kind, v, s) for v in ("full", variant) for s in SEEDS]
        checks.append(check_ablation(kind, rows))
    passed = all(c.passed for c in checks)
    detail = " | ".join(f"{'ok' if c.passed else 'NOT MET'} {c.name}: {c.detail}" for c in checks)
    report("ablation directions", passed, detail)
    assert passed, detail


# -- diversity effect --------------------------------------------------------------------


def test_diversity_effect():
    rows = [run(LAMBDA_TASK, "full", s, lam) for lam in (0.0, 0.05, 1.0) for s in SEEDS]
    sim, acc = check_lambda(rows, 0.0, 0.05, 1.0)
    passed = sim.passed and acc.passed
    detail = f"{LAMBDA_TASK}: {sim.name}: {sim.detail} | {acc.name}: {acc.detail}"
    report("diversity effect", passed, detail)
    assert passed, detail


# -- metric correctness ------------------------------------------------------------------


def _dp_distances(ref: tuple, hyps: np.ndarray) -> np.ndarray:
    """Levenshtein distance from ``ref`` to every row of ``hyps`` (equal lengths), vectorised over rows."""
    m = hyps.shape[1]
    prev = np.tile(np.arange(m + 1), (len(hyps), 1))
    for i, r in enumerate(ref, 1):
        cur = np.empty_like(prev)
        cur[:, 0] = i
        for j in range(1, m + 1):
            cur[:, j] = np.minimum(np.minimum(prev[:, j] + 1, cur[:, j - 1] + 1),
                                   prev[:, j - 1] + (hyps[:, j - 1] != r))
        prev = cur
    return prev[:, m]


def test_metric_correctness():
    alphabet = 3
    by_len = {n: np.array(list(itertools.product(range(alphabet), repeat=n)), dtype=np.int64).reshape(alphabet**n, n)
              for n in range(7)}
    pairs = mismatches = 0
    for n_ref in range(1, 7):
        for ref in map(tuple, by_len[n_ref]):
            ref_words = [str(x) for x in ref]
            for n_hyp in range(7):
                hyps = by_len[n_hyp]
                oracle = _dp_distances(ref, hyps) if n_hyp else np.full(1, n_ref)
                for h, d in zip(hyps, oracle):
                    r = wer(ref_words, [str(x) for x in h])
                    pairs += 1
                    if r.errors != d or r.wer != d / n_ref or n_ref - r.deletions != n_hyp - r.insertions:
                        mismatches += 1

    def rec(hyp, ref):
        return EvalRecord("x", "k", hyp.split(), ref)

    rules = [
        score_answer(rec("yes it does", ["yes"]), "open") == 1.0,
        score_answer(rec("yes and no", ["yes"]), "open") == 0.0,
        score_answer(rec("x then z", [["x"], ["y"], ["z"]]), "ocr") == 2 / 3,
        score_answer(rec("B", ["B"]), "multiple_choice") == 1.0,
        score_answer(rec("the answer is B", ["B"]), "multiple_choice") == 0.0,
    ]
    passed = mismatches == 0 and all(rules)
    detail = (f"WER vs DP oracle on all {pairs} pairs over a {alphabet}-symbol alphabet with lengths <= 6: "
              f"{mismatches} mismatches; scoring rule examples {sum(rules)}/{len(rules)}")
    report("metric correctness", passed, detail)
    assert passed, detail


# -- reproducibility -----------------------------------------------------------------------


def _snapshot(model):
    return {f"{g}/{k}": p.data.copy() for g, ps in model.parameter_groups().items() for k, p in ps.items()}


def test_reproducibility(tmp_path):
    from favor.experiments import build_model

    cfg = preset("temporal_qa")
    train_tasks = _data("temporal_qa")[0][:64]
    tcfg = TrainConfig(lr=2e-3, steps=30, batch_size=8, seed=3, warmup=5)

    def fresh():
        m = build_model(cfg, 3)
        return m, [m.prepare(t) for t in train_tasks]

    a, da = fresh()
    _, hist_a = fit(a, da, tcfg)
    b, db = fresh()
    _, hist_b = fit(b, db, tcfg)
    snap_a, snap_b = _snapshot(a), _snapshot(b)
    deterministic = (all(np.array_equal(snap_a[k], snap_b[k]) for k in snap_a)
                     and [h.log_line() for h in hist_a] == [h.log_line() for h in hist_b])

    c, dc = fresh()
    opt, _ = fit(c, dc, tcfg, stop_step=20)
    save_checkpoint(tmp_path / "s20.ckpt", c, opt, 20, tcfg)
    r, ropt, step, rcfg = load_checkpoint(tmp_path / "s20.ckpt")
    save_checkpoint(tmp_path / "again.ckpt", r, ropt, step, rcfg)
    same_bytes = (tmp_path / "s20.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()
    fit(r, [r.prepare(t) for t in train_tasks], rcfg, opt=ropt, start_step=step)
    snap_r = _snapshot(r)
    resumed = all(np.array_equal(snap_a[k], snap_r[k]) for k in snap_a)
    passed = deterministic and same_bytes and resumed
    detail = (f"two same-seed runs bit-identical: {deterministic}; save-load-save identical bytes: {same_bytes}; "
              f"resume at step 20 equals uninterrupted run at step 30: {resumed}")
    report("reproducibility", passed, detail)
    assert passed, detail


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
