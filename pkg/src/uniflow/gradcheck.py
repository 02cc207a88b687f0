"""Finite-difference checks for every primitive and a small backbone."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .model import ModelConfig, backbone_velocity, duration_adapt, encode_content, fuse_instruction, init_params
from .tasks import DESK_TASKS
from .tensor import Tensor

TOLERANCE = 1e-4
STEP = 1e-5
SEEDS = (0, 1, 2, 3, 4)

Case = tuple[Callable[[], Tensor], list[Tensor], float]


def _p(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _proj(out: Tensor, rng) -> Tensor:
    """Random linear functional of ``out``: keeps every gradient entry O(1)."""
    r = rng.standard_normal(out.shape)
    return T.sum_(T.mul(out, r))


def _unary(op):
    def build(rng) -> Case:
        x = _p(rng, 3, 5)
        r = rng.standard_normal((3, 5))
        return (lambda: T.sum_(T.mul(op(x), r))), [x], 1.0

    return build


def _matmul(rng) -> Case:
    a, b = _p(rng, 3, 4), _p(rng, 4, 2)
    c, d = _p(rng, 2, 3, 4), _p(rng, 2, 4, 5)
    r1, r2 = rng.standard_normal((3, 2)), rng.standard_normal((2, 3, 5))
    w = _p(rng, 4, 2)
    r3 = rng.standard_normal((2, 3, 2))
    f = lambda: T.add(T.add(T.sum_(T.mul(T.matmul(a, b), r1)), T.sum_(T.mul(T.matmul(c, d), r2))),
                      T.sum_(T.mul(T.matmul(c, w), r3)))
    return f, [a, b, c, d, w], 1.0


def _binary(op):
    def build(rng) -> Case:
        a, b = _p(rng, 3, 4), _p(rng, 4)
        r = rng.standard_normal((3, 4))
        return (lambda: T.sum_(T.mul(op(a, b), r))), [a, b], 1.0

    return build


def _sum(rng) -> Case:
    x = _p(rng, 3, 4, 2)
    r = rng.standard_normal((3, 2))
    return (lambda: T.add(T.sum_(T.mul(T.sum_(x, axis=1), r)), T.sum_(x))), [x], 1.0


def _mean(rng) -> Case:
    x = _p(rng, 3, 4, 2)
    r = rng.standard_normal((4, 2))
    return (lambda: T.add(T.sum_(T.mul(T.mean(x, axis=0), r)), T.mean(x))), [x], 1.0


def _transpose(rng) -> Case:
    x = _p(rng, 2, 3, 4)
    r1, r2 = rng.standard_normal((2, 4, 3)), rng.standard_normal((3, 2, 4))
    return (lambda: T.add(T.sum_(T.mul(T.transpose(x), r1)), T.sum_(T.mul(T.transpose(x, 0, 1), r2)))), [x], 1.0


def _reshape(rng) -> Case:
    x = _p(rng, 2, 6)
    r = rng.standard_normal((3, 4))
    return (lambda: T.sum_(T.mul(T.reshape(x, (3, 4)), r))), [x], 1.0


def _concat(rng) -> Case:
    a, b = _p(rng, 2, 3), _p(rng, 2, 2)
    c = _p(rng, 1, 3)
    r1, r2 = rng.standard_normal((2, 5)), rng.standard_normal((3, 3))
    return (lambda: T.add(T.sum_(T.mul(T.concat([a, b]), r1)), T.sum_(T.mul(T.concat([a, c], axis=0), r2)))), [a, b, c], 1.0


def _slice(rng) -> Case:
    x = _p(rng, 4, 5)
    r = rng.standard_normal((2, 3))
    return (lambda: T.sum_(T.mul(x[1:3, ::2], r))), [x], 1.0


def _layer_norm(rng) -> Case:
    x = _p(rng, 3, 8)
    r = rng.standard_normal((3, 8))
    return (lambda: T.sum_(T.mul(T.layer_norm(x), r))), [x], 1.0


def _softmax(rng) -> Case:
    x = _p(rng, 3, 4)
    r = rng.standard_normal((3, 4))
    return (lambda: T.sum_(T.mul(T.softmax_lastdim(x), r))), [x], 1.0


def _lookup(rng) -> Case:
    table = _p(rng, 5, 3)
    idx = np.array([[0, 2, 2], [4, 0, 1]])
    r = rng.standard_normal((2, 3, 3))
    return (lambda: T.sum_(T.mul(T.lookup(table, idx), r))), [table], 1.0


def _scaled_gradient(rng) -> Case:
    x = _p(rng, 3, 4)
    r = rng.standard_normal((3, 4))
    lam = 0.1
    return (lambda: T.sum_(T.mul(T.scaled_gradient(x, lam), r))), [x], lam


def _stop_gradient(rng) -> Case:
    x = _p(rng, 3, 4)
    r = rng.standard_normal((3, 4))
    return (lambda: T.sum_(T.mul(T.stop_gradient(x), r))), [x], 0.0


PRIMITIVE_CASES: dict[str, Callable[[np.random.Generator], Case]] = {
    "matmul": _matmul,
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "scale": _unary(lambda x: T.scale(x, -1.7)),
    "sum": _sum,
    "mean": _mean,
    "transpose": _transpose,
    "reshape": _reshape,
    "concat": _concat,
    "slice": _slice,
    "softmax": _softmax,
    "layer_norm": _layer_norm,
    "gelu": _unary(T.gelu),
    "tanh": _unary(T.tanh),
    "sin": _unary(T.sin),
    "cos": _unary(T.cos),
    "exp": _unary(T.exp),
    "lookup": _lookup,
    "scaled_gradient": _scaled_gradient,
    "stop_gradient": _stop_gradient,
}
assert set(PRIMITIVE_CASES) == set(T.PRIMITIVES)

BACKBONE_CFG = ModelConfig(depth=2, embed_size=8, num_heads=2, ffn_mult=2, latent_dim=3)


def perturbed_params(cfg: ModelConfig, seed: int):
    """Random init with open AdaLN gates so every branch carries gradient."""
    rng = np.random.default_rng(seed + 100)
    params = init_params(cfg, seed)
    for name, p in params.items():
        if name.endswith("adaln.w2") or name.endswith("adaln.b2") or name == "out.w" or name.endswith(".bo"):
            p.data[...] = 0.5 * rng.standard_normal(p.shape)
    return params


def backbone_case(seed: int, cfg: ModelConfig = BACKBONE_CFG, task_index: int = 0) -> Case:
    """Velocity of a 2-block dual-fusion backbone; inputs are all backbone parameters."""
    rng = np.random.default_rng(seed)
    params = perturbed_params(cfg, seed)
    task = DESK_TASKS[task_index]
    if task.task_id == "ta_denoise":
        units = rng.standard_normal((6, cfg.latent_dim))
        d_s = np.ones(6, dtype=int)
    else:
        units = np.array([1, 3, 2])
        d_s = np.array([2, 1, 3]) if task.is_ta else np.ones(3, dtype=int)
    with T.no_grad():
        c_i = fuse_instruction(encode_content(task, units, params, cfg), task, 2, params)
    c_i = Tensor(c_i.data)
    c_i_t = duration_adapt(c_i, d_s)
    n = 6
    z = rng.standard_normal((n, cfg.latent_dim))
    r = rng.standard_normal((n, cfg.latent_dim))
    tau = float(rng.random())
    inputs = [p for name, p in params.items() if name.startswith(("blocks.", "in.", "out.", "dummy."))]
    f = lambda: T.sum_(T.mul(backbone_velocity(z, tau, c_i, c_i_t, task, params, cfg), r))
    return f, inputs, 1.0


def run_suite(
    seeds=SEEDS,
    h: float = STEP,
    backbone: bool = True,
    report: Callable[[str, float], None] | None = None,
    only: list[str] | None = None,
):
    """Max relative error per primitive (and 'backbone') over all seeds.

    The backbone oracle runs in extended precision: with ~2.7k parameters some
    true gradient entries fall near 1e-7, where float64 central differences
    carry relative noise above the tolerance.
    """
    results: dict[str, float] = {}
    for name, build in PRIMITIVE_CASES.items():
        if only is not None and name not in only:
            continue
        worst = 0.0
        for s in seeds:
            f, inputs, scale = build(np.random.default_rng(s))
            worst = max(worst, T.grad_check(f, inputs, h, scale))
        results[name] = worst
        if report:
            report(name, worst)
    if backbone:
        worst = 0.0
        for s in seeds:
            # rotate through the desk tasks so both TA and NTA routing are covered
            f, inputs, scale = backbone_case(s, task_index=s % len(DESK_TASKS))
            worst = max(worst, T.grad_check(f, inputs, h, scale, extended=True))
        results["backbone"] = worst
        if report:
            report("backbone", worst)
    return results


def failures(results: dict[str, float], tol: float = TOLERANCE) -> list[str]:
    return [k for k, v in results.items() if not v < tol]
