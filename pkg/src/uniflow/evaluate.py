"""Generation-based evaluation, guidance/steps sweeps and the ablation harness."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .flowmatch import DEFAULT_CFG, DEFAULT_STEPS, DEFAULT_SWAY, generate_batch, predicted_durations
from .model import ModelConfig, UnitInput, content_batch
from .tasks import TaskRegistry, detect_events, detection_f1, generate, oracle_target, ConfigError
from .train import TrainConfig, train

# no guidance for the enhancement-style task
TASK_DEFAULT_CFG = {"ta_denoise": 1.0}
PRIMARY_METRIC = {"ta_copy": "frame_mse", "ta_denoise": "snr_out_db", "nta_events": "f1"}
EVAL_SEED = 1234
EVAL_SAMPLES = 64

EVAL_COLUMNS = (
    "task", "w", "steps", "sway", "n_samples", "frame_mse", "frame_mse_pred",
    "snr_in_db", "snr_out_db", "f1", "duration_mae",
)


def default_guidance(task_id: str) -> float:
    return TASK_DEFAULT_CFG.get(task_id, DEFAULT_CFG)


@dataclass
class EvalReport:
    task: str
    w: float
    steps: int
    sway: float
    n_samples: int
    metrics: dict[str, float] = field(default_factory=dict)

    def row(self) -> list[str]:
        out = [self.task, fmt(self.w), str(self.steps), fmt(self.sway), str(self.n_samples)]
        return out + [fmt(self.metrics[c]) if c in self.metrics else "" for c in EVAL_COLUMNS[5:]]


def fmt(x: float) -> str:
    return f"{x:.6g}"


def snr_db(clean: np.ndarray, estimate: np.ndarray) -> float:
    err = np.sum((estimate - clean) ** 2)
    return float(10 * np.log10(np.sum(clean**2) / max(err, 1e-300)))


def eval_samples(task_id: str, n: int, latent_dim: int, seed: int = EVAL_SEED):
    """Held-out samples (instruction fixed to 0) and their starting noise."""
    data_seq, noise_seq = np.random.SeedSequence([seed, 1]).spawn(2)
    rng = np.random.default_rng(data_seq)
    samples = [generate(task_id, rng, latent_dim, instruction_id=0) for _ in range(n)]
    nrng = np.random.default_rng(noise_seq)
    noise = [nrng.standard_normal(s.target.shape) for s in samples]
    return samples, noise


def evaluate(
    checkpoint: Checkpoint,
    task_id: str,
    n_samples: int = EVAL_SAMPLES,
    steps: int = DEFAULT_STEPS,
    guidance_scale: float | None = None,
    sway: float = DEFAULT_SWAY,
    seed: int = EVAL_SEED,
    registry: TaskRegistry | None = None,
) -> EvalReport:
    registry = registry or TaskRegistry()
    task = registry.get(task_id)
    cfg = checkpoint.config
    params = checkpoint.to_params()
    w = default_guidance(task_id) if guidance_scale is None else guidance_scale
    samples, noise = eval_samples(task_id, n_samples, cfg.latent_dim, seed)
    items = [UnitInput(task, s.units, s.instruction_id) for s in samples]
    report = EvalReport(task_id, w, steps, sway, n_samples)
    m = report.metrics

    with T.no_grad():
        content = content_batch(params, cfg, items)
    _, pred_frames = predicted_durations(content)
    log_ds = content.log_ds.data

    if task.is_ta:
        gen = generate_batch(params, cfg, items, noise, [s.d_s_true for s in samples],
                             [s.n_frames for s in samples], steps, w, sway)
        m["frame_mse"] = float(np.mean([np.mean((g - s.target) ** 2) for g, s in zip(gen, samples)]))
        raw = [np.maximum(1, np.rint(np.exp(log_ds[i, : len(s.units)]))) for i, s in enumerate(samples)]
        m["duration_mae"] = float(np.mean(np.concatenate([np.abs(r - s.d_s_true) for r, s in zip(raw, samples)])))
        if task_id == "ta_copy":
            pred_ds = [r.astype(np.int64) for r in raw]
            nrng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
            z1 = [nrng.standard_normal((int(d.sum()), cfg.latent_dim)) for d in pred_ds]
            gen_p = generate_batch(params, cfg, items, z1, pred_ds, [int(d.sum()) for d in pred_ds], steps, w, sway)
            targets = [oracle_target("ta_copy", s.units, d, cfg.latent_dim) for s, d in zip(samples, pred_ds)]
            m["frame_mse_pred"] = float(np.mean([np.mean((g - t) ** 2) for g, t in zip(gen_p, targets)]))
        if task_id == "ta_denoise":
            m["snr_in_db"] = float(np.mean([snr_db(s.target, s.units) for s in samples]))
            m["snr_out_db"] = float(np.mean([snr_db(s.target, g) for s, g in zip(samples, gen)]))
    else:
        gen = generate_batch(params, cfg, items, noise, [None] * len(samples),
                             [s.n_frames for s in samples], steps, w, sway)
        m["frame_mse"] = float(np.mean([np.mean((g - s.target) ** 2) for g, s in zip(gen, samples)]))
        m["f1"] = detection_f1([detect_events(g) for g in gen], [oracle_target(task_id, s) for s in samples])
        m["duration_mae"] = float(np.mean([abs(p - s.n_frames) for p, s in zip(pred_frames, samples)]))
    return report


def evaluate_all(checkpoint: Checkpoint, task_ids: Sequence[str] = ("ta_copy", "ta_denoise", "nta_events"), **kw):
    return [evaluate(checkpoint, t, **kw) for t in task_ids]


def write_eval_csv(reports: Sequence[EvalReport], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(EVAL_COLUMNS)
        for r in reports:
            w.writerow(r.row())


# ---------------------------------------------------------------------------
# sweeps

SWEEP_COLUMNS = ("task", "w", "steps", "metric", "value")


def cfg_sweep(
    checkpoint: Checkpoint,
    task_id: str,
    scales: Sequence[float],
    steps_list: Sequence[int] = (),
    n_samples: int = EVAL_SAMPLES,
    seed: int = EVAL_SEED,
) -> list[tuple]:
    """One factor at a time: scales at the default step count, then step counts at the default scale."""
    metric = PRIMARY_METRIC[task_id]
    rows = []
    for w in scales:
        r = evaluate(checkpoint, task_id, n_samples, DEFAULT_STEPS, w, seed=seed)
        rows.append((task_id, w, DEFAULT_STEPS, metric, r.metrics[metric]))
    for s in steps_list:
        r = evaluate(checkpoint, task_id, n_samples, s, None, seed=seed)
        rows.append((task_id, r.w, s, metric, r.metrics[metric]))
    return rows


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SWEEP_COLUMNS)
        for task, scale, steps, metric, value in rows:
            w.writerow([task, fmt(scale), steps, metric, fmt(value)])


# ---------------------------------------------------------------------------
# ablations

ABLATION_MODES = ("dual", "cross_attn", "double", "input")
ABLATION_SAMPLING = ("balanced", "unbalanced")
ABLATION_COLUMNS = ("arm", "fusion_mode", "sampling", "ta_copy_mse", "ta_denoise_snr_in_db", "ta_denoise_snr_db",
                    "nta_events_f1", "ta_copy_duration_mae")


def ablation_arms(base: TrainConfig, modes=ABLATION_MODES, sampling=ABLATION_SAMPLING) -> list[tuple[str, TrainConfig]]:
    """Base arm plus one arm per varied factor value; each differs from base in one field."""
    base_sampling = "balanced" if base.balanced else "unbalanced"
    arms = [(f"{base.fusion_mode}/{base_sampling}", base)]
    for mode in modes:
        if mode != base.fusion_mode:
            arms.append((f"{mode}/{base_sampling}", dataclasses.replace(base, fusion_mode=mode)))
    for s in sampling:
        if s not in ABLATION_SAMPLING:
            raise ConfigError(f"unknown sampling {s!r}")
        if s != base_sampling:
            arms.append((f"{base.fusion_mode}/{s}", dataclasses.replace(base, balanced=(s == "balanced"))))
    for _, cfg in arms:
        diff = [f.name for f in dataclasses.fields(base) if getattr(cfg, f.name) != getattr(base, f.name)]
        assert len(diff) <= 1, diff
    return arms


def arm_metrics(checkpoint: Checkpoint, n_samples: int = EVAL_SAMPLES, seed: int = EVAL_SEED) -> dict[str, float]:
    copy = evaluate(checkpoint, "ta_copy", n_samples, seed=seed)
    den = evaluate(checkpoint, "ta_denoise", n_samples, seed=seed)
    nta = evaluate(checkpoint, "nta_events", n_samples, seed=seed)
    return {
        "ta_copy_mse": copy.metrics["frame_mse"],
        "ta_denoise_snr_db": den.metrics["snr_out_db"],
        "ta_denoise_snr_in_db": den.metrics["snr_in_db"],
        "nta_events_f1": nta.metrics["f1"],
        "ta_copy_duration_mae": copy.metrics["duration_mae"],
    }


def ablation_run(
    base: TrainConfig,
    model_cfg: ModelConfig,
    modes=ABLATION_MODES,
    sampling=ABLATION_SAMPLING,
    n_samples: int = EVAL_SAMPLES,
    trained: dict[str, Checkpoint] | None = None,
) -> list[dict]:
    """Train and evaluate every arm; ``trained`` may supply already-trained arms by name."""
    rows = []
    for name, cfg in ablation_arms(base, modes, sampling):
        ckpt = (trained or {}).get(name) or train(cfg, model_cfg)
        row = {"arm": name, "fusion_mode": cfg.fusion_mode, "sampling": "balanced" if cfg.balanced else "unbalanced"}
        row.update(arm_metrics(ckpt, n_samples))
        rows.append(row)
    return rows


def write_ablation_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], str) else fmt(r[c]) for c in ABLATION_COLUMNS])
