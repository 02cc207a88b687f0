"""Least-squares probe of a trained velocity field.

For each task and noise level tau, regress the predicted velocity on the
noise draw and the clean target (v ~ a*eps + b*x). A perfect conditional
model gives a = 1, b = -1 with zero residual; the residual variance is the
part of the target velocity the network cannot express.

    python3 scripts/velocity_probe.py runs/desk/checkpoint.ufad
"""

import argparse

import numpy as np

from uniflow import tensor as T
from uniflow.checkpoint import load_checkpoint
from uniflow.model import UnitInput, content_batch, streams_batch, velocity
from uniflow.tasks import TaskRegistry, generate


def probe(ckpt, task_id, tau, n=32, seed=0):
    reg = TaskRegistry()
    task = reg.get(task_id)
    params, cfg = ckpt.to_params(), ckpt.config
    rng = np.random.default_rng(seed)
    samples = [generate(task_id, rng, cfg.latent_dim, instruction_id=0) for _ in range(n)]
    eps = [rng.standard_normal(s.target.shape) for s in samples]
    with T.no_grad():
        content = content_batch(params, cfg, [UnitInput(task, s.units, 0) for s in samples])
        streams = streams_batch(params, cfg, content, [s.d_s_true for s in samples],
                                [s.n_frames for s in samples], [False] * n)
        t_max = max(s.n_frames for s in samples)
        z = np.zeros((n, t_max, cfg.latent_dim))
        for i, s in enumerate(samples):
            z[i, : s.n_frames] = (1 - tau) * s.target + tau * eps[i]
        v = velocity(params, cfg, T.Tensor(z), np.full(n, tau), streams).data
    pred = np.concatenate([v[i, : s.n_frames].ravel() for i, s in enumerate(samples)])
    design = np.stack([np.concatenate([e.ravel() for e in eps]),
                       np.concatenate([s.target.ravel() for s in samples])], axis=1)
    coef, *_ = np.linalg.lstsq(design, pred, rcond=None)
    resid = pred - design @ coef
    return coef, float(resid.var())


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("checkpoint")
    ap.add_argument("--taus", default="0.2,0.5,0.95")
    args = ap.parse_args()
    ckpt = load_checkpoint(args.checkpoint)
    for task_id in TaskRegistry().task_ids:
        for tau in (float(t) for t in args.taus.split(",")):
            (a, b), rv = probe(ckpt, task_id, tau)
            print(f"{task_id:<11} tau={tau:<5} eps-coef {a:+.3f}  x-coef {b:+.3f}  residual var {rv:.4f}")


if __name__ == "__main__":
    main()
