import numpy as np
import pytest

from uniflow import tensor as T
from uniflow import train as TR
from uniflow.checkpoint import load_checkpoint
from uniflow.flowmatch import NumericalError
from uniflow.model import ModelConfig, init_params
from uniflow.tasks import TaskRegistry, balanced_sampler
from uniflow.train import AdamW, CsvLog, TrainConfig, batch_loss, lr_at, train

TINY = ModelConfig(depth=1, embed_size=16, num_heads=2, ffn_mult=2)


def test_warmup_is_linear_then_constant():
    cfg = TrainConfig(learning_rate=3e-4, warmup_steps=100)
    for t in (0, 1, 37, 99):
        assert lr_at(t, cfg) == 3e-4 * t / 100
    assert lr_at(100, cfg) == lr_at(2999, cfg) == 3e-4
    assert lr_at(5, TrainConfig(warmup_steps=0)) == 3e-4


def test_adamw_single_step_on_quadratic():
    # loss = 0.5 * a * x^2, grad = a x; first bias-corrected step is sign(g)
    a, x0, lr, wd = 3.0, np.array([2.0]), 0.1, 0.01
    opt = AdamW(1, (0.9, 0.999), 1e-8, wd)
    x = x0.copy()
    g = a * x0
    opt.step(x, g, lr)
    m = 0.1 * g / (1 - 0.9)
    v = 0.001 * g * g / (1 - 0.999)
    expect = x0 - lr * (m / (np.sqrt(v) + 1e-8) + wd * x0)
    assert abs(x[0] - expect[0]) < 1e-10


def test_config_validation():
    with pytest.raises(TR.ConfigError):
        TrainConfig(steps=-1)
    with pytest.raises(TR.ConfigError):
        TrainConfig(mask_ratio=1.5)


def test_zero_steps_returns_initialization():
    ck = train(TrainConfig(steps=0, seed=4), TINY)
    seed = int(np.random.SeedSequence(4).spawn(3)[2].generate_state(1)[0])
    init = init_params(TINY, seed)
    for n, p in init.items():
        assert np.array_equal(ck.params[n], p.data.astype(np.float32))


def test_masked_fraction_near_ratio():
    fracs = []
    train(TrainConfig(steps=150, batch_size=16, seed=1), TINY, on_step=lambda e: fracs.append(e.masked_fraction))
    assert 0.18 <= np.mean(fracs) <= 0.22


def test_fixed_batch_loss_decreases_over_first_50_steps():
    reg = TaskRegistry()
    cfg = ModelConfig()
    rng = np.random.default_rng(77)
    samples = [TR._Task(s, reg.get(s.task_id)) for s, _ in zip(balanced_sampler(reg, rng), range(16))]
    null = np.zeros(16, bool)
    taus = rng.random(16)
    noise = [rng.standard_normal(s.target.shape) for s in samples]
    losses = []

    def probe(step, params):
        with T.no_grad():
            losses.append(batch_loss(params, cfg, samples, null, taus, noise)["total"].item())

    train(TrainConfig(steps=50, seed=0), cfg, monitor=probe)
    smooth = np.convolve(losses, np.ones(5) / 5, mode="valid")
    assert np.mean(np.diff(smooth) < 0) >= 0.9
    assert smooth[-1] < smooth[0]


def test_identical_seeds_identical_checkpoints(tmp_path):
    a = train(TrainConfig(steps=5, batch_size=4, seed=9), TINY)
    b = train(TrainConfig(steps=5, batch_size=4, seed=9), TINY)
    c = train(TrainConfig(steps=5, batch_size=4, seed=10), TINY)
    assert all(np.array_equal(a.params[n], b.params[n]) for n in a.params)
    assert not all(np.array_equal(a.params[n], c.params[n]) for n in a.params)


def test_periodic_checkpoints_written(tmp_path):
    train(TrainConfig(steps=4, batch_size=2, checkpoint_every=2), TINY, out_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["step_000002.ufad", "step_000004.ufad"]
    assert load_checkpoint(tmp_path / "step_000004.ufad").step == 4


def test_non_finite_loss_aborts_with_breakdown(monkeypatch):
    real = TR.batch_loss

    def poisoned(*args):
        out = real(*args)
        out["total"] = T.add(out["total"], np.nan)
        return out

    monkeypatch.setattr(TR, "batch_loss", poisoned)
    with T.check_finite(False), pytest.raises(NumericalError, match=r"step 1: .*batch tasks"):
        train(TrainConfig(steps=2, batch_size=4), TINY)


def test_csv_log_columns(tmp_path):
    path = tmp_path / "log.csv"
    log = CsvLog(path)
    train(TrainConfig(steps=3, batch_size=2), TINY, on_step=log)
    log.close()
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(TR.LOG_COLUMNS) and len(lines) == 4
