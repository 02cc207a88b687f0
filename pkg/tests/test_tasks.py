import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from uniflow import tasks as TK
from uniflow.tasks import (
    DESK_TASKS,
    PRODUCTION_TASKS,
    TaskRegistry,
    TaskSpec,
    balanced_sampler,
    detect_events,
    detection_f1,
    event_scores,
    gen_nta_events,
    gen_ta_copy,
    gen_ta_denoise,
    oracle_target,
    task_cycle,
)

seeds = st.integers(0, 2**32 - 1)


def test_task_spec_validation():
    with pytest.raises(TK.ConfigError):
        TaskSpec("x", "NTA", frames_per_unit=2)
    with pytest.raises(TK.ConfigError):
        TaskSpec("x", "TA", sampling_weight=0)
    with pytest.raises(TK.ConfigError):
        TaskSpec("x", "sideways")
    with pytest.raises(TK.ConfigError):
        TaskRegistry().get("tts")


def test_copy_single_symbol_frame_is_pattern():
    p = TK.tables(8).copy_patterns
    out = oracle_target("ta_copy", [5], [1])
    assert np.array_equal(out[0], p[5] * (1.0 + 0.1 * np.sin(0.0)))
    assert np.array_equal(out[0], p[5])


def test_copy_patterns_are_distinct_unit_vectors():
    p = TK.tables(8).copy_patterns
    assert np.allclose(np.linalg.norm(p, axis=1), 1.0)
    cos = p @ p.T
    np.fill_diagonal(cos, 0.0)
    assert np.abs(cos).max() < 0.9


@given(seeds)
def test_copy_sample_invariants(seed):
    s = gen_ta_copy(np.random.default_rng(seed))
    assert 3 <= len(s.units) <= 8
    assert s.units.min() >= 0 and s.units.max() < 16
    assert s.d_s_true.min() >= 1 and s.d_s_true.max() <= 4
    assert s.d_s_true.sum() == s.n_frames == s.d_c_true
    assert np.array_equal(oracle_target("ta_copy", s.units, s.d_s_true), s.target)
    assert 0 <= s.instruction_id < 10


@given(seeds)
def test_denoise_sample_invariants(seed):
    s = gen_ta_denoise(np.random.default_rng(seed))
    assert 16 <= s.n_frames <= 48
    assert s.units.shape == s.target.shape
    assert np.array_equal(s.d_s_true, np.ones(s.n_frames, dtype=int))
    assert s.d_c_true == s.n_frames


def test_denoise_sigma_zero_hook():
    s = gen_ta_denoise(np.random.default_rng(0), sigma=0.0)
    assert np.array_equal(s.units, s.target)
    assert oracle_target("ta_denoise", s) is s.target


def test_denoise_noise_std():
    rng = np.random.default_rng(123)
    resid = []
    while sum(r.shape[0] for r in resid) < 10_000:
        s = gen_ta_denoise(rng)
        resid.append(s.units - s.target)
    r = np.concatenate(resid)[:10_000]
    assert 0.49 <= r.std() <= 0.51


@given(seeds)
def test_events_sample_invariants(seed):
    s = gen_nta_events(np.random.default_rng(seed))
    assert 24 <= s.n_frames <= 48
    assert 1 <= len(s.events) <= 3 and len(set(s.events)) == len(s.events)
    assert s.d_s_true is None and s.d_c_true == s.n_frames
    spans = sorted(s.event_starts)
    assert all(b - a >= TK.EVENT_LEN for a, b in zip(spans, spans[1:]))
    assert max(spans) + TK.EVENT_LEN <= s.n_frames
    assert oracle_target("nta_events", s) == frozenset(s.events)


def test_single_event_signature_present():
    rng = np.random.default_rng(1)
    s = gen_nta_events(rng, n_events=1, n_frames=24)
    e, t0 = s.events[0], s.event_starts[0]
    sig = TK.tables(8).event_signatures[e]
    assert np.abs(s.target[t0 : t0 + 4] - sig).max() < 0.3
    outside = np.delete(s.target, np.arange(t0, t0 + 4), axis=0)
    assert np.abs(outside).max() < 0.3


def test_event_positions_uniform():
    rng = np.random.default_rng(99)
    z = []
    for _ in range(10_000):
        s = gen_nta_events(rng, n_events=1)
        z.append(s.event_starts[0] - (s.n_frames - 4) / 2)
    # per-sample expectation is (T-4)/2; the mean offset must be 0 within 3 SE
    z = np.asarray(z)
    assert abs(z.mean()) < 3 * z.std(ddof=1) / np.sqrt(z.size)


def test_detector_perfect_on_clean_targets():
    rng = np.random.default_rng(2024)
    samples = [gen_nta_events(rng) for _ in range(1000)]
    pred = [detect_events(s.target) for s in samples]
    assert detection_f1(pred, [frozenset(s.events) for s in samples]) == 1.0


def test_detector_silent_on_background():
    frames = 0.05 * np.random.default_rng(3).standard_normal((40, 8))
    assert event_scores(frames).shape == (8,)
    assert detect_events(np.zeros((40, 8))) == frozenset()


def test_f1_arithmetic():
    assert detection_f1([frozenset({1, 2})], [frozenset({2, 3})]) == pytest.approx(0.5)
    assert detection_f1([frozenset()], [frozenset({1})]) == 0.0


def test_oracle_contract_errors():
    with pytest.raises(TK.ContractError):
        oracle_target("nta_events", [1, 2], durations=[1, 1])
    with pytest.raises(TK.DurationError):
        oracle_target("ta_copy", [1], [0])
    with pytest.raises(TK.ConfigError):
        oracle_target("t2m", [1])


def test_cycle_round_robin_and_weights():
    uniform = TaskRegistry().with_weights({"nta_events": 1})
    assert task_cycle(uniform) == ["ta_copy", "ta_denoise", "nta_events"]
    assert task_cycle(TaskRegistry()) == ["ta_copy", "ta_denoise", "nta_events", "nta_events"]
    assert task_cycle(TaskRegistry(), balanced=False) == ["ta_copy", "ta_denoise", "nta_events"]


def test_desk_sampler_nta_fraction_exact():
    stream = balanced_sampler(TaskRegistry(), np.random.default_rng(0))
    draws = [s.task_id for s in itertools.islice(stream, 4000)]
    assert sum(d == "nta_events" for d in draws) / 4000 == 0.5


def test_production_weights_nta_fraction():
    reg = TaskRegistry(PRODUCTION_TASKS)
    cyc = task_cycle(reg)
    assert len(cyc) == 10
    nta = {t.task_id for t in PRODUCTION_TASKS if not t.is_ta}
    assert sum(c in nta for c in cyc) / len(cyc) == 0.5


@given(st.lists(st.integers(1, 5), min_size=1, max_size=5), st.integers(1, 4))
def test_sampler_frequencies_are_exact_per_period(weights, periods):
    specs = tuple(TaskSpec(f"t{i}", "TA", sampling_weight=w) for i, w in enumerate(weights))
    cyc = task_cycle(TaskRegistry(specs))
    assert len(cyc) == sum(weights)
    drawn = [c for _, c in zip(range(periods * len(cyc)), itertools.cycle(cyc))]
    for i, w in enumerate(weights):
        assert drawn.count(f"t{i}") == periods * w


def test_generators_reproducible():
    a = [s.target for s in itertools.islice(balanced_sampler(TaskRegistry(), np.random.default_rng(5)), 12)]
    b = [s.target for s in itertools.islice(balanced_sampler(TaskRegistry(), np.random.default_rng(5)), 12)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_registry_rejects_unknown_weight():
    with pytest.raises(TK.ConfigError):
        TaskRegistry().with_weights({"tts": 2})
    assert [t.task_id for t in DESK_TASKS] == TaskRegistry().task_ids
