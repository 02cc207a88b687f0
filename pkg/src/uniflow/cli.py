"""Command-line entry point: ``uniflow {train,generate,eval,sweep,ablate,gradcheck}``.

Exit codes: 0 success, 1 gradient check failure, 2 usage or configuration
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import gradcheck
from .checkpoint import FormatError, IncompatibleCheckpoint, load_checkpoint, read_ufad, save_checkpoint, write_ufad
from .config import RunConfig, load_config
from .evaluate import (
    ABLATION_MODES,
    ABLATION_SAMPLING,
    EVAL_SAMPLES,
    EVAL_SEED,
    default_guidance,
    evaluate_all,
    cfg_sweep,
    ablation_run,
    fmt,
    write_ablation_csv,
    write_eval_csv,
    write_sweep_csv,
)
from .flowmatch import DEFAULT_STEPS, DEFAULT_SWAY, GenerationRequest, NumericalError, integrate
from .tasks import ConfigError, DurationError, TaskRegistry, COPY_VOCAB, N_EVENTS
from .tensor import ContractError, NonFiniteError, ParameterError, ShapeError
from .train import CsvLog, train

EXIT_OK, EXIT_GRADCHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

INPUT_HELP = (
    "conditioning input: 'sym:3,1,7' (ta_copy symbols 0-15), 'evt:2,5' (nta_events tokens 0-7) "
    "or 'file:PATH' (ta_denoise noisy latent, a UFAD file or a CSV of frames)"
)

log = logging.getLogger("uniflow")


class UsageError(ValueError):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _names(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def read_latent_file(path) -> np.ndarray:
    """[T, latent_dim] frames from a UFAD file (first tensor) or a CSV with a header row."""
    p = Path(path)
    if not p.exists():
        raise UsageError(f"input file not found: {p}")
    if p.suffix.lower() == ".csv":
        with open(p, newline="") as f:
            rows = list(csv.reader(f))
        try:
            data = np.array([[float(x) for x in r if x != ""] for r in rows[1:]], dtype=np.float64)
        except ValueError as exc:
            raise UsageError(f"{p}: {exc}") from None
        # a leading frame-index column is dropped
        if rows and rows[0] and rows[0][0] == "frame":
            data = data[:, 1:]
        return data
    tensors, _ = read_ufad(p)
    if not tensors:
        raise UsageError(f"{p}: no tensors")
    return np.asarray(next(iter(tensors.values())), dtype=np.float64)


def parse_input(spec: str, task_id: str, latent_dim: int) -> np.ndarray:
    kind, sep, body = spec.partition(":")
    if not sep:
        raise UsageError(f"input must look like sym:..., evt:... or file:..., got {spec!r}")
    expected = {"ta_copy": "sym", "nta_events": "evt", "ta_denoise": "file"}[task_id]
    if kind != expected:
        raise UsageError(f"task {task_id} takes '{expected}:' input, got {kind!r}")
    if kind == "file":
        frames = read_latent_file(body)
        if frames.ndim != 2 or frames.shape[1] != latent_dim or frames.shape[0] < 1:
            raise UsageError(f"latent file must hold [T, {latent_dim}] frames, got {frames.shape}")
        return frames
    try:
        toks = np.array([int(x) for x in body.split(",")], dtype=np.int64)
    except ValueError:
        raise UsageError(f"bad token list {body!r}") from None
    vocab = COPY_VOCAB if kind == "sym" else N_EVENTS
    if toks.size == 0 or toks.min() < 0 or toks.max() >= vocab:
        raise UsageError(f"tokens must lie in [0, {vocab}), got {body!r}")
    if kind == "evt" and len(set(toks.tolist())) != toks.size:
        raise UsageError("event tokens must be distinct")
    return toks


def write_frames_csv(frames: np.ndarray, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame"] + [f"d{i}" for i in range(frames.shape[1])])
        for i, row in enumerate(frames):
            w.writerow([i] + [repr(float(x)) for x in row])


# ---------------------------------------------------------------------------
# commands


def _run_config(path) -> RunConfig:
    return load_config(path) if path else RunConfig()


def cmd_train(args) -> int:
    cfg = _run_config(args.config)
    tc = cfg.train
    if args.seed is not None:
        tc.seed = args.seed
    if args.steps is not None:
        tc.steps = args.steps
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    registry = cfg.registry()
    logger = CsvLog(out / "train_log.csv")
    try:
        t0 = time.time()
        ckpt = train(tc, cfg.model, registry, out_dir=out, on_step=logger)
    finally:
        logger.close()
    save_checkpoint(ckpt, out / "checkpoint.ufad")
    print(f"trained {tc.steps} steps in {time.time() - t0:.1f}s -> {out / 'checkpoint.ufad'}")
    inf = cfg.inference
    reports = evaluate_all(ckpt, registry=registry, n_samples=inf.n_samples, steps=inf.steps, sway=inf.sway,
                           seed=inf.seed, guidance_scale=inf.guidance_scale)
    write_eval_csv(reports, out / "eval.csv")
    _print_reports(reports)
    return EXIT_OK


def _print_reports(reports) -> None:
    for r in reports:
        print(f"{r.task:<11} w={fmt(r.w):<4} " + " ".join(f"{k}={fmt(v)}" for k, v in r.metrics.items()))


def cmd_generate(args) -> int:
    registry = TaskRegistry()
    task = registry.get(args.task)
    ckpt = load_checkpoint(args.ckpt)
    units = parse_input(args.input, args.task, ckpt.config.latent_dim)
    w = default_guidance(args.task) if args.cfg is None else args.cfg
    print(f"# task={args.task} steps={args.steps} cfg={fmt(w)} sway={fmt(args.sway)} seed={args.seed} "
          f"instruction={args.instruction}")
    req = GenerationRequest(args.task, units, args.instruction, args.steps, w, args.sway, args.seed)
    frames = integrate(req, ckpt.to_params(), ckpt.config, task)
    out = Path(args.out)
    meta = {"kind": "latent", "task": args.task, "steps": args.steps, "cfg": w, "sway": args.sway,
            "seed": args.seed, "instruction": args.instruction, "input": args.input}
    write_ufad(out, {"latent": frames}, meta)
    write_frames_csv(frames.astype(np.float32), out.with_suffix(".csv"))
    print(f"wrote {frames.shape[0]} frames -> {out}, {out.with_suffix('.csv')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    tasks = args.tasks or TaskRegistry().task_ids
    reports = evaluate_all(ckpt, tasks, n_samples=args.n_samples, steps=args.steps, sway=args.sway,
                           seed=args.seed, guidance_scale=args.cfg)
    write_eval_csv(reports, args.out)
    _print_reports(reports)
    return EXIT_OK


def cmd_sweep(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    tasks = args.tasks or TaskRegistry().task_ids
    rows = []
    for t in tasks:
        TaskRegistry().get(t)
        rows += cfg_sweep(ckpt, t, args.scales, args.steps_list, args.n_samples, args.seed)
    write_sweep_csv(rows, args.out)
    for task, w, steps, metric, value in rows:
        print(f"{task:<11} w={fmt(w):<4} steps={steps:<3} {metric}={fmt(value)}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _run_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.steps is not None:
        cfg.train.steps = args.steps
    for m in args.modes:
        if m not in ABLATION_MODES:
            raise UsageError(f"unknown fusion mode {m!r}; choose from {ABLATION_MODES}")
    rows = ablation_run(cfg.train, cfg.model, args.modes, args.sampling, args.n_samples)
    write_ablation_csv(rows, args.out)
    for r in rows:
        print(f"{r['arm']:<22} copy_mse={fmt(r['ta_copy_mse'])} denoise_snr={fmt(r['ta_denoise_snr_db'])} "
              f"events_f1={fmt(r['nta_events_f1'])}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    t0 = time.time()
    ops = args.ops
    if ops:
        unknown = set(ops) - set(gradcheck.PRIMITIVE_CASES) - {"backbone"}
        if unknown:
            raise UsageError(f"unknown ops {sorted(unknown)}")
    results = gradcheck.run_suite(
        seeds=tuple(range(args.seeds)),
        backbone=not ops or "backbone" in ops,
        only=[o for o in ops if o != "backbone"] if ops else None,
        report=lambda name, err: print(f"{name:<16} {err:.3e}  {'ok' if err < gradcheck.TOLERANCE else 'FAIL'}",
                                       flush=True),
    )
    bad = gradcheck.failures(results)
    print(f"{len(results)} checks in {time.time() - t0:.1f}s; tolerance {gradcheck.TOLERANCE:g}")
    if bad:
        print("FAILED: " + ", ".join(bad))
        return EXIT_GRADCHECK
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uniflow", description="Desk-scale unified flow-matching audio latent model.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train and evaluate from a YAML config")
    t.add_argument("--config", help="YAML run config (sections model/train/tasks/inference)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int, help="override train.steps")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="sample one latent sequence", description=INPUT_HELP)
    g.add_argument("--ckpt", required=True)
    g.add_argument("--task", required=True)
    g.add_argument("--input", required=True, help=INPUT_HELP)
    g.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    g.add_argument("--cfg", type=float, default=None, help="guidance scale (default 5.0; 1.0 for ta_denoise)")
    g.add_argument("--sway", type=float, default=DEFAULT_SWAY)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--instruction", type=int, default=0)
    g.add_argument("--out", required=True, help="output .ufad path; a .csv dump is written alongside")
    g.set_defaults(func=cmd_generate)

    def eval_opts(sp):
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--tasks", type=_names, default=None, help="comma-separated task ids (default: all)")
        sp.add_argument("--n-samples", type=int, default=EVAL_SAMPLES)
        sp.add_argument("--seed", type=int, default=EVAL_SEED)
        sp.add_argument("--out", required=True, help="CSV path")

    e = sub.add_parser("eval", help="evaluate a checkpoint on every task")
    eval_opts(e)
    e.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    e.add_argument("--cfg", type=float, default=None)
    e.add_argument("--sway", type=float, default=DEFAULT_SWAY)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="guidance-scale and step-count sweep")
    eval_opts(s)
    s.add_argument("--scales", type=_floats, default=[1.0, 2.0, 3.0, 5.0, 7.0])
    s.add_argument("--steps-list", type=_ints, default=[], help="step counts to sweep at the default scale")
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("ablate", help="train and evaluate the fusion-mode and sampling arms")
    a.add_argument("--config")
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int)
    a.add_argument("--steps", type=int)
    a.add_argument("--modes", type=_names, default=list(ABLATION_MODES))
    a.add_argument("--sampling", type=_names, default=list(ABLATION_SAMPLING))
    a.add_argument("--n-samples", type=int, default=EVAL_SAMPLES)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference check of every primitive and a 2-block backbone")
    c.add_argument("--seeds", type=int, default=len(gradcheck.SEEDS))
    c.add_argument("--ops", type=_names, default=None, help="restrict to these ops ('backbone' included)")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, ParameterError, DurationError, FormatError, IncompatibleCheckpoint,
            ShapeError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
