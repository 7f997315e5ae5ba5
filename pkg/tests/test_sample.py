"""Generation: integrator convergence against closed forms, warm-start laws,
condition-window legality, and rollout/interpolation bookkeeping."""

import math

import numpy as np
import pytest

from flowvid.flow import PathParams
from flowvid.model import ModelConfig, Tensor, init_params, param_shapes
from flowvid.rngutil import substream
from flowvid.sample import (IntegrationDivergedError, ModeMismatchError,
                            Rollout, SampleConfig, _condition_window,
                            integrate_field, interpolate, predict_next_frame,
                            rollout, warm_start_init)

TINY = ModelConfig(latent_height=4, latent_width=4, latent_channels=1,
                   token_dim=16, depth=3, heads=2, skip_pairs=1,
                   max_distance=16)


def _rand_params(cfg, seed=0, scale=0.05):
    rng = np.random.default_rng(seed)
    return {name: Tensor(rng.standard_normal(shape).astype(np.float32) * scale,
                         requires_grad=True, name=name)
            for name, shape in param_shapes(cfg).items()}


# ---------------------------------------------------------------------------
# integrator convergence


def test_euler_closed_form_compound_growth():
    """Euler on dx/dt = x from x(0)=1 gives exactly (1 + 1/N)^N."""
    x = integrate_field(np.array([1.0]), lambda t, x: x, 0.0, 1.0, 10, "euler")
    assert np.isclose(x[0], 2.5937424601, rtol=1e-12)
    x = integrate_field(np.array([1.0]), lambda t, x: x, 0.0, 1.0, 100, "euler")
    assert np.isclose(x[0], (1 + 0.01) ** 100, rtol=1e-12)


def test_euler_first_order_convergence():
    errs = []
    ns = [8, 16, 32, 64, 128]
    for n in ns:
        x = integrate_field(np.array([1.0]), lambda t, x: x, 0.0, 1.0, n,
                            "euler")
        errs.append(abs(x[0] - math.e))
    slope = np.polyfit(np.log(ns), np.log(errs), 1)[0]
    assert abs(slope + 1.0) < 0.2, f"euler slope {slope:.2f}"


def test_midpoint_second_order_convergence():
    errs = []
    ns = [4, 8, 16, 32, 64]
    for n in ns:
        x = integrate_field(np.array([1.0]), lambda t, x: x, 0.0, 1.0, n,
                            "midpoint")
        errs.append(abs(x[0] - math.e))
    slope = np.polyfit(np.log(ns), np.log(errs), 1)[0]
    assert abs(slope + 2.0) < 0.3, f"midpoint slope {slope:.2f}"


def test_midpoint_time_dependent_field():
    # dx/dt = 2t -> x(1) = x(0) + 1, exactly reproduced by midpoint
    x = integrate_field(np.zeros(1), lambda t, x: np.array([2 * t]),
                        0.0, 1.0, 7, "midpoint")
    assert np.isclose(x[0], 1.0, atol=1e-12)


def test_integration_divergence_detected():
    with pytest.raises(IntegrationDivergedError):
        integrate_field(np.array([1.0]), lambda t, x: x * np.inf,
                        0.0, 1.0, 4, "euler")


# ---------------------------------------------------------------------------
# warm start


def test_steps_per_frame_formula():
    for s in (0.0, 0.2, 0.4, 0.6, 0.8):
        for n in (1, 7, 32, 100):
            cfg = SampleConfig(n_steps=n, warm_start_s=s)
            assert cfg.steps_per_frame == math.ceil(n * (1 - s))


def test_evals_per_step():
    assert SampleConfig(solver="euler").evals_per_step == 1
    assert SampleConfig(solver="midpoint").evals_per_step == 2


def test_sample_config_validation():
    with pytest.raises(ValueError):
        SampleConfig(n_steps=0)
    with pytest.raises(ValueError):
        SampleConfig(warm_start_s=1.0)
    with pytest.raises(ValueError):
        SampleConfig(context_limit=1)
    with pytest.raises(ValueError):
        SampleConfig(solver="rk4")


def test_warm_start_zero_is_pure_noise():
    """s=0 must reduce to a standard-normal draw, bit-identical to consuming
    the same rng directly."""
    p = PathParams()
    prev = np.full((1, 4, 4), 0.5)
    a = warm_start_init(prev, 0.0, p, substream(3, "x"))
    b = substream(3, "x").standard_normal(prev.shape)
    assert np.array_equal(a, b.astype(a.dtype))


def test_warm_start_concentrates_near_previous_frame():
    p = PathParams()
    rng = np.random.default_rng(4)
    prev = np.full((1, 32, 32), 0.8)
    hi = warm_start_init(prev, 0.9, p, rng)
    lo = warm_start_init(prev, 0.1, p, rng)
    assert abs(hi.mean() - 0.9 * 0.8) < 0.02
    assert np.abs(hi - 0.9 * prev).std() < np.abs(lo - 0.1 * prev).std()
    with pytest.raises(ValueError):
        warm_start_init(prev, 1.0, p, rng)


# ---------------------------------------------------------------------------
# condition window


def test_condition_window_unlimited():
    assert _condition_window(3, None) == (1, 1)
    assert _condition_window(10, None) == (1, 8)


def test_condition_window_limited():
    # limit k restricts to the k most recent frames; k=2 pins frame T-2
    assert _condition_window(10, 2) == (8, 8)
    assert _condition_window(10, 4) == (6, 8)
    assert _condition_window(3, 8) == (1, 1)  # never below frame 1


# ---------------------------------------------------------------------------
# rollout bookkeeping


def test_rollout_counts_and_condition_legality():
    params = _rand_params(TINY, seed=5)
    rng = np.random.default_rng(6)
    context = [rng.uniform(size=TINY.latent_shape).astype(np.float32)
               for _ in range(2)]
    scfg = SampleConfig(n_steps=8, seed=0)
    ro = rollout(context, 4, params, TINY, scfg)
    assert len(ro.frames) == 4
    assert ro.network_evals == 4 * 8  # euler: one eval per step
    for i, conds in enumerate(ro.per_frame_conditions):
        t_index = 3 + i
        assert len(conds) == 8
        assert all(1 <= c <= t_index - 2 for c in conds)
    # frame 3 can only condition on frame 1
    assert set(ro.per_frame_conditions[0]) == {1}


def test_rollout_midpoint_doubles_evals():
    params = _rand_params(TINY, seed=7)
    context = [np.zeros(TINY.latent_shape, dtype=np.float32)] * 2
    scfg = SampleConfig(n_steps=6, seed=0, solver="midpoint")
    ro = rollout(context, 2, params, TINY, scfg)
    assert ro.network_evals == 2 * 6 * 2


def test_rollout_warm_start_reduces_evals():
    params = _rand_params(TINY, seed=8)
    context = [np.zeros(TINY.latent_shape, dtype=np.float32)] * 2
    evals = []
    for s in (0.0, 0.2, 0.4, 0.6, 0.8):
        scfg = SampleConfig(n_steps=10, warm_start_s=s, seed=0)
        evals.append(rollout(context, 2, params, TINY, scfg).network_evals)
    assert evals == sorted(evals, reverse=True)
    assert all(a > b for a, b in zip(evals, evals[1:]))  # strictly decreasing


def test_rollout_context_limit_respected():
    params = _rand_params(TINY, seed=9)
    context = [np.zeros(TINY.latent_shape, dtype=np.float32)] * 2
    scfg = SampleConfig(n_steps=4, seed=0, context_limit=2)
    ro = rollout(context, 5, params, TINY, scfg)
    for i, conds in enumerate(ro.per_frame_conditions):
        t_index = 3 + i
        assert set(conds) == {t_index - 2}  # degenerate fixed conditioning


def test_rollout_determinism_and_validation():
    params = _rand_params(TINY, seed=10)
    rng = np.random.default_rng(11)
    context = [rng.uniform(size=TINY.latent_shape).astype(np.float32)
               for _ in range(2)]
    scfg = SampleConfig(n_steps=5, seed=42)
    a = rollout(context, 3, params, TINY, scfg)
    b = rollout(context, 3, params, TINY, scfg)
    for fa, fb in zip(a.frames, b.frames):
        assert np.array_equal(fa, fb)
    with pytest.raises(ValueError):
        rollout(context[:1], 3, params, TINY, scfg)
    with pytest.raises(ValueError):
        rollout(context, -1, params, TINY, scfg)


def test_predict_next_frame_needs_history():
    params = _rand_params(TINY, seed=12)
    with pytest.raises(ValueError):
        predict_next_frame([np.zeros(TINY.latent_shape)], params, TINY,
                           SampleConfig(), PathParams(),
                           np.random.default_rng(0))


# ---------------------------------------------------------------------------
# interpolation


INTERP = ModelConfig(latent_height=4, latent_width=4, latent_channels=1,
                     token_dim=16, depth=3, heads=2, skip_pairs=1,
                     max_distance=16, use_reference=False, condition_slots=2)


def test_interpolate_requires_matching_config():
    params = _rand_params(TINY, seed=13)
    f = np.zeros(TINY.latent_shape, dtype=np.float32)
    with pytest.raises(ModeMismatchError):
        interpolate(f, f, 2, params, TINY, SampleConfig(n_steps=4))


def test_interpolate_bookkeeping():
    params = _rand_params(INTERP, seed=14)
    rng = np.random.default_rng(15)
    src = rng.uniform(size=INTERP.latent_shape).astype(np.float32)
    tgt = rng.uniform(size=INTERP.latent_shape).astype(np.float32)
    scfg = SampleConfig(n_steps=6, seed=0)
    ro = interpolate(src, tgt, 3, params, INTERP, scfg)
    assert len(ro.frames) == 3
    assert ro.network_evals == 3 * 6
    target_index = 5
    for i, conds in enumerate(ro.per_frame_conditions):
        slot = 2 + i
        past = conds[0::2]
        future = conds[1::2]
        assert all(1 <= c <= slot - 1 for c in past)
        assert all(c == target_index for c in future)
    ro0 = interpolate(src, tgt, 0, params, INTERP, scfg)
    assert ro0.frames == []
