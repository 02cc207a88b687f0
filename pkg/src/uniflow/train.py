"""Multi-task flow-matching training loop with AdamW and warmup."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .flowmatch import MASK_RATIO, NumericalError, mask_condition
from .model import ModelConfig, Params, UnitInput, content_batch, flat_view, init_params, streams_batch, velocity
from .tasks import TaskRegistry, balanced_sampler, ConfigError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 16
    learning_rate: float = 3e-4
    warmup_steps: int = 100
    mask_ratio: float = MASK_RATIO
    seed: int = 0
    balanced: bool = True
    fusion_mode: str = "dual"
    checkpoint_every: int = 0
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.warmup_steps < 0:
            raise ConfigError("steps/batch_size/warmup_steps out of range")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError("mask_ratio must lie in [0, 1]")
        self.betas = tuple(self.betas)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup over ``warmup_steps`` (1-based step), then constant."""
    if step < cfg.warmup_steps:
        return cfg.learning_rate * step / cfg.warmup_steps
    return cfg.learning_rate


class AdamW:
    """Adam with decoupled weight decay on one flat parameter vector."""

    def __init__(self, n: int, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay

    def step(self, theta: np.ndarray, grad: np.ndarray, lr: float) -> None:
        self.t += 1
        self.m *= self.b1
        self.m += (1 - self.b1) * grad
        self.v *= self.b2
        self.v += (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        theta -= lr * (mhat / (np.sqrt(vhat) + self.eps) + self.wd * theta)


@dataclass
class StepLog:
    step: int
    total: float
    fm: float
    clip: float
    seq: float
    masked_fraction: float
    lr: float


def batch_loss(params: Params, cfg: ModelConfig, samples, null: np.ndarray, taus: np.ndarray, noise) -> dict:
    """Mean over samples of L_FM + L_dur-clip + L_dur-seq, plus the components."""
    b = len(samples)
    items = [UnitInput(s.task, s.units, s.instruction_id) for s in samples]
    content = content_batch(params, cfg, items)
    n_frames = [s.n_frames for s in samples]
    streams = streams_batch(params, cfg, content, [s.d_s_true for s in samples], n_frames, list(null))
    t_max, dl = max(n_frames), cfg.latent_dim
    z_tau = np.zeros((b, t_max, dl))
    target = np.zeros((b, t_max, dl))
    weight = np.zeros((b, t_max, 1))
    for i, s in enumerate(samples):
        n = n_frames[i]
        z_tau[i, :n] = (1 - taus[i]) * s.target + taus[i] * noise[i]
        target[i, :n] = noise[i] - s.target
        weight[i, :n] = 1.0 / (n * dl * b)
    v = velocity(params, cfg, T.Tensor(z_tau), taus, streams)
    diff = T.sub(v, target)
    l_fm = T.sum_(T.mul(T.mul(diff, diff), weight))

    dc = T.sub(content.d_c, np.array([s.d_c_true for s in samples], dtype=np.float64))
    l_clip = T.scale(T.sum_(T.mul(dc, dc)), 1.0 / b)

    n_max = content.log_ds.shape[1]
    log_true = np.zeros((b, n_max))
    seq_w = np.zeros((b, n_max))
    for i, s in enumerate(samples):
        if s.task.is_ta:
            n = len(s.units)
            log_true[i, :n] = np.log(s.d_s_true)
            seq_w[i, :n] = 1.0 / (n * b)
    ds = T.sub(content.log_ds, log_true)
    l_seq = T.sum_(T.mul(T.mul(ds, ds), seq_w))
    total = T.add(T.add(l_fm, l_clip), l_seq)
    return {"total": total, "fm": l_fm, "clip": l_clip, "seq": l_seq}


class _Task:
    """Sample plus its TaskSpec, so the loss code never looks up registries."""

    __slots__ = ("task", "units", "instruction_id", "target", "n_frames", "d_s_true", "d_c_true", "task_id")

    def __init__(self, sample, task):
        self.task = task
        self.task_id = sample.task_id
        self.units = sample.units
        self.instruction_id = sample.instruction_id
        self.target = sample.target
        self.n_frames = sample.n_frames
        self.d_s_true = sample.d_s_true
        self.d_c_true = sample.d_c_true


def train(
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    registry: TaskRegistry | None = None,
    out_dir: str | Path | None = None,
    on_step: Callable[[StepLog], None] | None = None,
    monitor: Callable[[int, Params], None] | None = None,
) -> Checkpoint:
    """Train from a seeded initialization; returns the final (f32) checkpoint.

    ``monitor(step, params)`` sees the live float64 parameters after each update.
    """
    registry = registry or TaskRegistry()
    if model_cfg.fusion_mode != train_cfg.fusion_mode:
        model_cfg = ModelConfig(**{**model_cfg.to_dict(), "fusion_mode": train_cfg.fusion_mode})
    data_seq, noise_seq, init_seq = np.random.SeedSequence(train_cfg.seed).spawn(3)
    data_rng = np.random.default_rng(data_seq)
    noise_rng = np.random.default_rng(noise_seq)
    params = init_params(model_cfg, seed=int(init_seq.generate_state(1)[0]))
    theta = flat_view(params)
    opt = AdamW(theta.size, train_cfg.betas, train_cfg.eps, train_cfg.weight_decay)
    stream = balanced_sampler(registry, data_rng, train_cfg.balanced, model_cfg.latent_dim)
    out_dir = Path(out_dir) if out_dir else None
    names = list(params)

    def rng_state():
        return {"data": data_rng.bit_generator.state, "noise": noise_rng.bit_generator.state}

    for step in range(1, train_cfg.steps + 1):
        samples = [next(stream) for _ in range(train_cfg.batch_size)]
        samples = [_Task(s, registry.get(s.task_id)) for s in samples]
        b = len(samples)
        null = mask_condition(b, train_cfg.mask_ratio, noise_rng)
        taus = noise_rng.random(b)
        noise = [noise_rng.standard_normal(s.target.shape) for s in samples]

        for p in params.values():
            p.grad = None
        losses = batch_loss(params, model_cfg, samples, null, taus, noise)
        total = losses["total"].item()
        if not np.isfinite(total):
            by_task = {}
            for s in samples:
                by_task[s.task_id] = by_task.get(s.task_id, 0) + 1
            raise NumericalError(
                f"non-finite loss at step {step}: "
                + ", ".join(f"{k}={losses[k].item():.6g}" for k in ("fm", "clip", "seq"))
                + f"; batch tasks {by_task}"
            )
        T.backward(losses["total"])
        grad = np.concatenate(
            [np.zeros(params[n].data.size) if params[n].grad is None else params[n].grad.ravel() for n in names]
        )
        norm = float(np.sqrt(grad @ grad))
        if train_cfg.grad_clip and norm > train_cfg.grad_clip:
            grad *= train_cfg.grad_clip / norm
        lr = lr_at(step, train_cfg)
        opt.step(theta, grad, lr)

        entry = StepLog(step, total, losses["fm"].item(), losses["clip"].item(), losses["seq"].item(),
                        float(null.mean()), lr)
        if on_step:
            on_step(entry)
        if monitor:
            monitor(step, params)
        if step % 100 == 0:
            log.info("step %d total %.4f fm %.4f clip %.3f seq %.4f", step, entry.total, entry.fm, entry.clip, entry.seq)
        if out_dir and train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
            save_checkpoint(Checkpoint.from_params(model_cfg, params, step, rng_state()), out_dir / f"step_{step:06d}.ufad")

    return Checkpoint.from_params(model_cfg, params, train_cfg.steps, rng_state())


LOG_COLUMNS = ("step", "total", "fm", "clip", "seq", "masked_fraction", "lr")


class CsvLog:
    """Training log writer; floats with 6 significant digits."""

    def __init__(self, path):
        self.f = open(path, "w", newline="")
        self.w = csv.writer(self.f)
        self.w.writerow(LOG_COLUMNS)

    def __call__(self, e: StepLog) -> None:
        self.w.writerow([e.step] + [f"{getattr(e, c):.6g}" for c in LOG_COLUMNS[1:]])

    def close(self) -> None:
        self.f.close()
