"""Mask and noise schedule invariants, checked against first principles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from margrid.schedules import MaskSchedule, NoiseSchedule, cosine_step_counts


@settings(max_examples=80, deadline=None)
@given(st.integers(min_value=1, max_value=96), st.integers(min_value=1, max_value=96))
def test_cosine_counts_partition_property(n, k):
    if k > n:
        with pytest.raises(ValueError):
            cosine_step_counts(n, k)
        return
    counts = cosine_step_counts(n, k)
    assert len(counts) == k
    assert counts.sum() == n
    assert counts.min() >= 1


def test_cosine_counts_back_loaded():
    # cos starts flat, so early steps reveal few tokens and late steps many
    counts = cosine_step_counts(64, 8)
    assert counts[0] < counts[-1]
    masked_after = 64 - np.cumsum(counts)
    want = [round(64 * np.cos(np.pi / 2 * k / 8)) for k in range(1, 8)]
    assert np.allclose(masked_after[:-1], want, atol=1.0)


def test_mask_schedule_partitions_grid():
    rng = np.random.default_rng(0)
    sched = MaskSchedule.build(64, 8, rng)
    seen = np.concatenate(sched.steps)
    assert sorted(seen) == list(range(64))
    assert sched.k_steps == 8
    for k in range(1, 9):
        known = sched.known_before(k)
        cand = sched.candidates(k)
        assert known.sum() == sum(len(s) for s in sched.steps[: k - 1])
        assert np.array_equal(cand, np.flatnonzero(~known))
        # the accepted set is always a subset of the candidates
        assert np.all(np.isin(sched.steps[k - 1], cand))
    assert not sched.known_before(1).any()


def test_mask_schedule_rejects_bad_partitions():
    with pytest.raises(ValueError):
        MaskSchedule(n=4, steps=(np.array([0, 1]), np.array([1, 2])))
    with pytest.raises(ValueError):
        MaskSchedule(n=4, steps=(np.array([0, 1, 2]),))
    with pytest.raises(ValueError):
        MaskSchedule(n=2, steps=(np.array([0, 1]), np.array([], dtype=np.int64)))
    with pytest.raises(ValueError):
        MaskSchedule(n=2, steps=())


def test_mask_schedule_step_bounds():
    sched = MaskSchedule.build(16, 4, np.random.default_rng(1))
    with pytest.raises(ValueError):
        sched.known_before(0)
    with pytest.raises(ValueError):
        sched.known_before(5)


def _dense_reference(t_steps, beta_start=1e-4, beta_end=0.02, dense=1000):
    """Recompute the subsampled schedule directly from the dense chain."""
    betas_d = np.linspace(beta_start, beta_end, dense)
    bar_d = np.cumprod(1.0 - betas_d)
    picks = np.linspace(0, dense - 1, t_steps).round().astype(int)
    return bar_d[picks]


def test_noise_schedule_matches_dense_alpha_bar():
    ns = NoiseSchedule.linear(10)
    want = _dense_reference(10)
    assert np.allclose(ns.alpha_bar, want, rtol=0.0, atol=1e-12)
    assert np.array_equal(ns.alpha_bar_prev[1:], ns.alpha_bar[:-1])
    assert ns.alpha_bar_prev[0] == 1.0


def test_noise_schedule_posterior_identities():
    """DDPM posterior coefficients from the standard closed forms."""
    ns = NoiseSchedule.linear(10)
    alphas = 1.0 - ns.betas
    bar, prev = ns.alpha_bar, ns.alpha_bar_prev
    assert np.allclose(alphas * prev, bar, atol=1e-15)
    want_var = ns.betas * (1.0 - prev) / (1.0 - bar)
    want_c0 = np.sqrt(prev) * ns.betas / (1.0 - bar)
    want_ct = np.sqrt(alphas) * (1.0 - prev) / (1.0 - bar)
    assert np.allclose(ns.posterior_variance, want_var, atol=1e-15)
    assert np.allclose(ns.coef_x0, want_c0, atol=1e-15)
    assert np.allclose(ns.coef_xt, want_ct, atol=1e-15)
    assert (ns.coef_x0 > 0).all() and (ns.coef_xt[1:] > 0).all()
    # at t=1 the posterior collapses onto x0 exactly
    assert ns.coef_x0[0] == pytest.approx(1.0, abs=1e-12)
    assert ns.coef_xt[0] == pytest.approx(0.0, abs=1e-12)


def test_noise_schedule_variance_monotonicity():
    ns = NoiseSchedule.linear(10)
    assert ns.posterior_variance[0] == 0.0
    assert (ns.posterior_variance[1:] > 0).all()
    assert (np.diff(ns.alpha_bar) < 0).all()
    assert ns.t_steps == 10
    assert ns.sigma2(2) == ns.posterior_variance[1]


def test_noise_schedule_alpha_bar_range():
    ns = NoiseSchedule.linear(10)
    # terminal cumulative noise close to the dense chain's endpoint
    dense_end = _dense_reference(10)[-1]
    assert abs(ns.alpha_bar[-1] - dense_end) < 1e-12
    assert 0.0 < ns.alpha_bar[-1] < 5e-2
