"""Command-line entry point: ``favor <subcommand> ...``.

Exit status is 0 on success, 1 when a requested check fails (an eval
threshold, an ablation direction, a lambda-sweep trend) and 2 on bad input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import kernels
from .checkpoint import MAGIC, CheckpointError, read_checkpoint
from .encoders import FeatureFileError, load_features
from .experiments import (
    ABLATIONS,
    ExperimentConfig,
    build_model,
    check_ablation,
    check_lambda,
    evaluate,
    export_similarity_matrix,
    load_data,
    preset,
    run_ablation,
    sweep_lambda,
    write_table,
)
from .tasks import KINDS, generate, load_tasks, save_tasks
from .tensor import TensorFormatError, read_tensor
from .train import Adam, TrainConfig, fit, load_checkpoint, save_checkpoint

log = logging.getLogger("favor")

TOGGLES = {
    "no_causal_attention": "use_causal_attention",
    "no_sliding_window": "use_sliding_window",
    "no_synchronization": "use_synchronization",
}


class CheckFailed(Exception):
    pass


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    for f in fields(TrainConfig):
        g.add_argument(_flag(f.name), type=type(f.default), default=None, help=f"default: preset ({f.default})")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=KINDS, required=True)
    g = p.add_argument_group("windowing")
    g.add_argument("--k", type=int, default=None, help="slots per window")
    g.add_argument("--n-queries", type=int, default=None, help="output queries per window")
    g = p.add_argument_group("model")
    for flag in TOGGLES:
        g.add_argument(_flag(flag), action="store_true")
    g.add_argument("--lora-rank", type=int, default=None)
    g.add_argument("--n-train", type=int, default=None)
    g.add_argument("--n-test", type=int, default=None)
    g.add_argument("--data-seed", type=int, default=None)


def _experiment(args) -> ExperimentConfig:
    cfg = preset(args.task)
    over = {k: getattr(args, k) for k in ("k", "n_queries", "lora_rank", "n_train", "n_test", "data_seed")}
    cfg = replace(cfg, **{k: v for k, v in over.items() if v is not None})
    toggles = {field: False for flag, field in TOGGLES.items() if getattr(args, flag, False)}
    if toggles:
        cfg = cfg.with_toggles(**toggles)
    train = {f.name: getattr(args, f.name, None) for f in fields(TrainConfig)}
    train = {k: v for k, v in train.items() if v is not None}
    return cfg.with_train(**train) if train else cfg


def _tasks(args, cfg: ExperimentConfig | None, split: int):
    if getattr(args, "data", None):
        return load_tasks(args.data)
    if cfg is None:
        raise SystemExit("error: --data is required here")
    return load_data(cfg)[split]


def cmd_make_data(args) -> int:
    # same generator settings as the task preset, so the data fits the preset model
    tasks = generate(args.task, args.seed, args.count, **dict(preset(args.task).task_kwargs))
    save_tasks(tasks, args.out)
    print(f"wrote {len(tasks)} {args.task} tasks to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _experiment(args)
    if args.resume:
        model, opt, start, tcfg = load_checkpoint(args.resume)
        over = {f.name: getattr(args, f.name) for f in fields(TrainConfig) if getattr(args, f.name) is not None}
        tcfg = opt.cfg = replace(tcfg, **over)
    else:
        model = build_model(cfg, cfg.train.seed)
        tcfg = cfg.train
        opt, start = Adam(model.trainable_parameters(), tcfg), 0
    tasks = _tasks(args, cfg, 0)
    if any(t.kind != args.task for t in tasks):
        raise SystemExit(f"error: training data must all be {args.task} tasks")
    prepared = [model.prepare(t) for t in tasks]
    if args.vocab_out:
        model.vocab.save(args.vocab_out)

    def snapshot(res):
        if args.save_every and res.step % args.save_every == 0 and res.step < tcfg.steps:
            save_checkpoint(args.out, model, opt, res.step, tcfg)

    log_fh = open(args.log, "a" if args.resume else "w") if args.log else None
    try:
        _, history = fit(model, prepared, tcfg, opt, start_step=start, log_file=log_fh, callback=snapshot)
    finally:
        if log_fh:
            log_fh.close()
    save_checkpoint(args.out, model, opt, max(start, tcfg.steps), tcfg)
    if history:
        print(f"trained steps {start + 1}..{tcfg.steps}; last: {history[-1].log_line()}")
    print(f"checkpoint written to {args.out}")
    return 0


def _load_model(path):
    model, _, step, _ = load_checkpoint(path)
    return model, step


def _eval_tasks(args, model):
    if args.data:
        return load_tasks(args.data)
    if not args.task:
        raise SystemExit("error: give --data or --task")
    return load_data(preset(args.task))[1]


def _max_len(args, tasks) -> int:
    if args.max_len is not None:
        return args.max_len
    return preset(tasks[0].kind).max_answer_len if tasks else 1


def cmd_eval(args) -> int:
    model, step = _load_model(args.checkpoint)
    tasks = _eval_tasks(args, model)
    summary = evaluate(model, tasks, _max_len(args, tasks), fps=args.fps)
    metrics = summary.metrics()
    print(json.dumps({"kind": summary.kind, "step": step, **metrics}, sort_keys=True))
    if args.report:
        rows = [
            {"task_id": r.task_id, "kind": r.kind, "hypothesis": " ".join(r.hypothesis),
             "reference": " ".join(map(str, r.reference)), "score": r.score}
            for r in summary.records
        ]
        write_table(rows, args.report)
    failures = []
    if args.min_accuracy is not None and (summary.accuracy is None or summary.accuracy < args.min_accuracy):
        failures.append(f"accuracy {summary.accuracy} < {args.min_accuracy}")
    if args.max_wer is not None and (summary.wer is None or summary.wer.wer > args.max_wer):
        failures.append(f"WER {None if summary.wer is None else summary.wer.wer} > {args.max_wer}")
    if failures:
        raise CheckFailed("; ".join(failures))
    return 0


def cmd_generate(args) -> int:
    model, _ = _load_model(args.checkpoint)
    tasks = load_tasks(args.data)
    prepared = [model.prepare(t) for t in tasks]
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for p in prepared:
            answer = model.generate([p], _max_len(args, tasks))[0]
            out.write(json.dumps({"task_id": p.task.task_id, "answer": answer}) + "\n")
    finally:
        if args.out:
            out.close()
    return 0


def _seeds(text: str) -> tuple[int, ...]:
    return tuple(int(s) for s in text.split(","))


def cmd_ablate(args) -> int:
    base = _experiment(args)
    pairs = tuple(tuple(int(x) for x in p.split(":")) for p in args.window_pairs.split(",")) if args.window_pairs else ()
    fps = tuple(float(x) for x in args.fps.split(",")) if args.fps else ()
    rows = run_ablation(args.task, tuple(args.variants.split(",")), _seeds(args.seeds), base, pairs, fps)
    text = write_table(rows, args.report)
    print(text, end="")
    if args.check:
        res = check_ablation(args.task, rows)
        print(f"{'PASS' if res.passed else 'FAIL'} {res.name}: {res.detail}")
        if not res.passed:
            raise CheckFailed(res.name)
    return 0


def cmd_sweep_lambda(args) -> int:
    base = _experiment(args)
    lambdas = tuple(float(x) for x in args.lambdas.split(","))
    rows = sweep_lambda(args.task, lambdas, _seeds(args.seeds), base)
    print(write_table(rows, args.report), end="")
    if args.check:
        results = check_lambda(rows)
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
        failed = [r.name for r in results if not r.passed]
        if failed:
            raise CheckFailed("; ".join(failed))
    return 0


def cmd_inspect_sim(args) -> int:
    model, _ = _load_model(args.checkpoint)
    tasks = _eval_tasks(args, model)
    if not 0 <= args.index < len(tasks):
        raise SystemExit(f"error: --index must be in [0, {len(tasks)})")
    states = model.query_states(model.prepare(tasks[args.index]))
    sims = export_similarity_matrix(states, args.out)
    off = sims[~np.eye(len(sims), dtype=bool)]
    print(f"{tasks[args.index].task_id}: {len(sims)}x{len(sims)} matrix to {args.out}; "
          f"mean off-diagonal {off.mean() if off.size else float('nan'):.4f}")
    return 0


def cmd_inspect(args) -> int:
    """Describe a checkpoint, feature file or bare tensor dump."""
    path = Path(args.path)
    head = path.read_bytes()[:64]
    if head.startswith(MAGIC):
        for name, content in read_checkpoint(path).items():
            if isinstance(content, bytes):
                print(f"[{name}] {len(content)} bytes of JSON")
                continue
            print(f"[{name}] {len(content)} tensors")
            for k, arr in content.items():
                print(f"  {k} {list(arr.shape)}")
        return 0
    if head.startswith(b"modality="):
        modality = head.split(b"=", 1)[1].split()[0].decode()
        seq = load_features(path, modality)
        print(f"{seq.modality} features: {seq.frames} frames x {seq.vectors_per_frame} x {seq.dim} "
              f"at {seq.frame_rate_hz} Hz, {seq.duration_s} s")
        return 0
    with open(path, "rb") as fh:
        arr = read_tensor(fh)
    print(f"tensor {list(arr.shape)} min {arr.min():.6g} max {arr.max():.6g} mean {arr.mean():.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="favor", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="write a synthetic task set as JSONL")
    p.add_argument("--task", choices=KINDS, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--data", help="JSONL training tasks (default: the preset's generated split)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="per-step log: step ce diversity total grad_norm")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--save-every", type=int, default=0)
    p.add_argument("--vocab-out", help="write the vocabulary file here")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval", cmd_eval, "score a checkpoint on held-out tasks"),
        ("generate", cmd_generate, "greedy answers for each task as JSONL"),
        ("inspect-sim", cmd_inspect_sim, "export the query cosine-similarity matrix for one task"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=name == "generate")
        p.add_argument("--max-len", type=int, default=None, help="answer length cap (default: the task preset's)")
        if name != "generate":
            p.add_argument("--task", choices=KINDS, help="use the preset's test split instead of --data")
        if name == "eval":
            p.add_argument("--fps", type=float, default=None, help="re-sample video at this rate")
            p.add_argument("--report", help="per-record CSV")
            p.add_argument("--min-accuracy", type=float)
            p.add_argument("--max-wer", type=float)
        elif name == "generate":
            p.add_argument("--out")
        else:
            p.add_argument("--index", type=int, default=0)
            p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="train ablation variants and report metrics")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--variants", default=",".join(ABLATIONS))
    p.add_argument("--seeds", default="0")
    p.add_argument("--window-pairs", default="", help="k:N pairs, e.g. 5:4,10:8")
    p.add_argument("--fps", default="", help="inference FPS sweep for the full model, e.g. 0.5,1,2")
    p.add_argument("--report", help="CSV output")
    p.add_argument("--check", action="store_true", help="fail unless the expected direction holds")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-lambda", help="train across diversity-loss weights")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--lambdas", default="0,0.01,0.05,0.2,1.0")
    p.add_argument("--seeds", default="0")
    p.add_argument("--report", help="CSV output")
    p.add_argument("--check", action="store_true")
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("inspect", help="describe a checkpoint, feature file or tensor dump")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    log.info("kernel backend: %s", kernels.BACKEND)
    try:
        return args.func(args)
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, FeatureFileError, TensorFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
