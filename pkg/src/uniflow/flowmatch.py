"""Flow-matching path, losses, guidance and the Euler sampler.

Convention: tau = 0 is data, tau = 1 is Gaussian noise. Sampling starts from
noise and integrates tau downward, ``z <- z - (tau_i - tau_{i-1}) * v``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .model import ContentBatch, ModelConfig, Params, UnitInput, content_batch, streams_batch, velocity
from .tasks import TaskSpec, DurationError
from .tensor import ParameterError, ShapeError, Tensor

DEFAULT_STEPS = 25
DEFAULT_CFG = 5.0
DEFAULT_SWAY = -1.0
MASK_RATIO = 0.2
SWAY_MAX = 1.0 / (math.pi / 2 - 1)


class NumericalError(FloatingPointError):
    pass


def interpolate(z0, z1, tau: float):
    """(1 - tau) z0 + tau z1; works on Tensors or arrays."""
    if not 0.0 <= tau <= 1.0:
        raise ParameterError(f"tau must lie in [0, 1], got {tau}")
    if isinstance(z0, Tensor) or isinstance(z1, Tensor):
        z0, z1 = T.as_tensor(z0), T.as_tensor(z1)
        if z0.shape != z1.shape:
            raise ShapeError(f"interpolate: {z0.shape} vs {z1.shape}")
        return T.add(T.scale(z0, 1.0 - tau), T.scale(z1, tau))
    z0, z1 = np.asarray(z0, dtype=np.float64), np.asarray(z1, dtype=np.float64)
    if z0.shape != z1.shape:
        raise ShapeError(f"interpolate: {z0.shape} vs {z1.shape}")
    return (1.0 - tau) * z0 + tau * z1


def fm_loss(v_pred, z0, z1) -> Tensor:
    """Mean squared error between v_pred and the target velocity z1 - z0."""
    v_pred = T.as_tensor(v_pred)
    target = np.asarray(z1, dtype=np.float64) - np.asarray(z0, dtype=np.float64)
    if v_pred.shape != target.shape:
        raise ShapeError(f"fm_loss: {v_pred.shape} vs {target.shape}")
    diff = T.sub(v_pred, target)
    return T.mean(T.mul(diff, diff))


def duration_losses(d_c_hat, d_c_true, log_d_s_hat, d_s_true, task: TaskSpec) -> tuple[Tensor, Tensor]:
    """(clip loss in frames, per-unit loss in log-frames); the latter is 0 for NTA."""
    d_c_hat = T.as_tensor(d_c_hat)
    dc = T.sub(d_c_hat, float(d_c_true))
    l_clip = T.mul(dc, dc)
    if not task.is_ta:
        return l_clip, Tensor(0.0)
    d_s_true = np.asarray(d_s_true, dtype=np.float64)
    if np.any(d_s_true <= 0):
        raise DurationError("ground-truth durations must be positive for a log-domain loss")
    ds = T.sub(log_d_s_hat, np.log(d_s_true))
    return l_clip, T.mean(T.mul(ds, ds))


def total_loss(fm, l_clip, l_seq) -> Tensor:
    return T.add(T.add(fm, l_clip), l_seq)


def mask_condition(n: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Per-sample null-condition flags, independent Bernoulli(ratio)."""
    if not 0.0 <= ratio <= 1.0:
        raise ParameterError(f"mask ratio must lie in [0, 1], got {ratio}")
    return rng.random(n) < ratio


def cfg_velocity(v_cond, v_uncond, w: float):
    if w < 0:
        raise ParameterError(f"guidance scale must be >= 0, got {w}")
    v_cond, v_uncond = np.asarray(v_cond, dtype=np.float64), np.asarray(v_uncond, dtype=np.float64)
    if v_cond.shape != v_uncond.shape:
        raise ShapeError(f"cfg_velocity: {v_cond.shape} vs {v_uncond.shape}")
    if w == 1.0:
        return v_cond.copy()
    if w == 0.0:
        return v_uncond.copy()
    return v_uncond + w * (v_cond - v_uncond)


def sway_schedule(u, s: float) -> np.ndarray:
    """tau(u) = u + s (cos(pi u / 2) - 1 + u); increasing for -1 <= s <= 1/(pi/2 - 1)."""
    if not -1.0 <= s <= SWAY_MAX:
        raise ParameterError(f"sway strength {s} outside [-1, {SWAY_MAX:.4f}]")
    u = np.asarray(u, dtype=np.float64)
    tau = u + s * (np.cos(np.pi * u / 2) - 1.0 + u)
    # pin the endpoints against rounding in cos(pi/2)
    tau = np.where(u == 0.0, 0.0, np.where(u == 1.0, 1.0, tau))
    return tau


def time_grid(steps: int, sway: float) -> np.ndarray:
    if steps < 1:
        raise ParameterError("steps must be >= 1")
    return sway_schedule(np.linspace(0.0, 1.0, steps + 1), sway)


def euler_sample(field: Callable[[np.ndarray, float], np.ndarray], z1: np.ndarray, tau_grid: np.ndarray) -> np.ndarray:
    """Integrate dz/dtau = field(z, tau) from tau_grid[-1] down to tau_grid[0]."""
    z = np.array(z1, dtype=np.float64)
    for i in range(len(tau_grid) - 1, 0, -1):
        dt = tau_grid[i] - tau_grid[i - 1]
        z = z - dt * field(z, float(tau_grid[i]))
        if not np.all(np.isfinite(z)):
            raise NumericalError(f"non-finite state at integration step {len(tau_grid) - 1 - i}")
    return z


@dataclass
class GenerationRequest:
    task_id: str
    units: np.ndarray
    instruction_id: int = 0
    steps: int = DEFAULT_STEPS
    guidance_scale: float = DEFAULT_CFG
    sway: float = DEFAULT_SWAY
    seed: int = 0
    length_override: int | None = None
    durations: np.ndarray | None = None  # TA ground-truth d_s; predicted when None

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterError("steps must be >= 1")
        if self.guidance_scale < 0:
            raise ParameterError("guidance scale must be >= 0")


def predicted_durations(content: ContentBatch) -> tuple[list[np.ndarray | None], list[int]]:
    """Rounded per-unit frame counts (TA, >= 1) and frame totals from the predictors."""
    ds, nf = [], []
    log_ds, d_c = content.log_ds.data, content.d_c.data
    for i, it in enumerate(content.items):
        if it.task.is_ta:
            if it.task.frames_per_unit is not None:
                d = np.full(it.n_units, it.task.frames_per_unit, dtype=np.int64)
            else:
                d = np.maximum(1, np.rint(np.exp(log_ds[i, : it.n_units]))).astype(np.int64)
            ds.append(d)
            nf.append(int(d.sum()))
        else:
            ds.append(None)
            nf.append(max(1, int(np.rint(d_c[i]))))
    return ds, nf


def generate_batch(
    params: Params,
    cfg: ModelConfig,
    items: Sequence[UnitInput],
    z1: Sequence[np.ndarray],
    durations: Sequence[np.ndarray | None],
    n_frames: Sequence[int],
    steps: int = DEFAULT_STEPS,
    guidance_scale: float = DEFAULT_CFG,
    sway: float = DEFAULT_SWAY,
) -> list[np.ndarray]:
    """Guided Euler sampling for several requests at once.

    Conditional and unconditional branches share one padded forward pass
    per step; when the guidance scale is 1 only the conditional branch runs.
    """
    items = list(items)
    b = len(items)
    guided = guidance_scale != 1.0
    with T.no_grad():
        content = content_batch(params, cfg, items * 2 if guided else items)
        nulls = [False] * b + ([True] * b if guided else [])
        streams = streams_batch(params, cfg, content, list(durations) * (2 if guided else 1),
                                list(n_frames) * (2 if guided else 1), nulls)
        t_max = max(n_frames)
        z = np.zeros((b, t_max, cfg.latent_dim))
        for i, zi in enumerate(z1):
            z[i, : n_frames[i]] = zi

        def field(state: np.ndarray, tau: float) -> np.ndarray:
            zz = np.concatenate([state, state]) if guided else state
            taus = np.full(zz.shape[0], tau)
            v = velocity(params, cfg, Tensor(zz), taus, streams).data
            if not guided:
                return v
            return cfg_velocity(v[:b], v[b:], guidance_scale)

        z = euler_sample(field, z, time_grid(steps, sway))
    return [z[i, : n_frames[i]] for i in range(b)]


def integrate(request: GenerationRequest, params: Params, cfg: ModelConfig, task: TaskSpec) -> np.ndarray:
    """Sample z0 for one request; z1 is drawn from N(0, I) with ``request.seed``."""
    item = UnitInput(task, np.asarray(request.units), request.instruction_id)
    if request.durations is not None and task.is_ta:
        ds = np.asarray(request.durations, dtype=np.int64)
        nf = int(ds.sum())
    else:
        with T.no_grad():
            content = content_batch(params, cfg, [item])
        (ds,), (nf,) = predicted_durations(content)
    if request.length_override is not None:
        nf = int(request.length_override)
        if task.is_ta and ds is not None and int(ds.sum()) != nf:
            raise DurationError(f"length_override {nf} disagrees with durations summing to {int(ds.sum())}")
    rng = np.random.default_rng(request.seed)
    z1 = rng.standard_normal((nf, cfg.latent_dim))
    (out,) = generate_batch(params, cfg, [item], [z1], [ds], [nf], request.steps, request.guidance_scale, request.sway)
    return out
