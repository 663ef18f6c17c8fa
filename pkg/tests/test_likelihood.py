"""Step likelihoods against scipy's Gaussian density, plus ratio and KL
surrogate properties. The randomized-oracle and integration checks here are
the backing for the likelihood acceptance gate."""

import numpy as np
import pytest
from scipy import integrate, stats

from margrid import tensor as T
from margrid.likelihood import (StepPosterior, importance_ratio,
                                kl_penalty_per_token, kl_surrogate,
                                posterior_from_eps, step_logprob)
from margrid.schedules import NoiseSchedule
from margrid.tensor import DomainError, ShapeError


def _oracle_logpdf(x_prev, mu, sigma2):
    """Sum of independent 1-D normal log densities over the channel axis."""
    return stats.norm.logpdf(x_prev, loc=mu, scale=np.sqrt(sigma2)).sum(axis=-1)


def test_step_logprob_matches_scipy_oracle_1000_cases():
    # transitions are drawn at the sampler's own scale, x = mu + sqrt(s2)*z,
    # so log densities stay O(10) and 1e-12 absolute agreement is meaningful
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        d = int(rng.integers(1, 9))
        mu = rng.standard_normal((n, d)) * rng.uniform(0.1, 3.0)
        sigma2 = float(rng.uniform(1e-4, 5.0))
        x = mu + rng.standard_normal((n, d)) * np.sqrt(sigma2) * rng.uniform(0.0, 3.0)
        got = step_logprob(x, StepPosterior(mu=T.constant(mu), sigma2=sigma2, t=2)).numpy()
        want = _oracle_logpdf(x, mu, sigma2)
        worst = max(worst, float(np.max(np.abs(got - want))))
    assert worst < 1e-12, f"worst abs deviation {worst}"


def test_step_logprob_integrates_to_one_1d():
    mu, sigma2 = 0.37, 0.85
    post = None

    def density(x):
        p = StepPosterior(mu=T.constant(np.array([[mu]])), sigma2=sigma2, t=2)
        return float(np.exp(step_logprob(np.array([[x]]), p).numpy()[0]))

    total, err = integrate.quad(density, mu - 12 * np.sqrt(sigma2), mu + 12 * np.sqrt(sigma2))
    assert abs(total - 1.0) < 1e-4


def test_step_logprob_stacked_timesteps():
    """A 1-D t array broadcasts per-slab schedule constants."""
    sched = NoiseSchedule.linear(10)
    rng = np.random.default_rng(12)
    ts = np.array([2, 5, 9])
    x_t = rng.standard_normal((3, 4, 8))
    eps = rng.standard_normal((3, 4, 8))
    post = posterior_from_eps(x_t, T.constant(eps), ts, sched)
    sig = np.sqrt(sched.posterior_variance[ts - 1]).reshape(3, 1, 1)
    x_prev = post.mu.numpy() + rng.standard_normal((3, 4, 8)) * sig
    got = step_logprob(x_prev, post).numpy()
    for i, t in enumerate(ts):
        single = posterior_from_eps(x_t[i], T.constant(eps[i]), int(t), sched)
        row = step_logprob(x_prev[i], single).numpy()
        assert np.array_equal(got[i], row)
        want = _oracle_logpdf(x_prev[i], single.mu.numpy(), sched.sigma2(int(t)))
        assert np.max(np.abs(row - want)) < 1e-12


def test_posterior_mean_formula_and_clamp():
    sched = NoiseSchedule.linear(10)
    rng = np.random.default_rng(13)
    x_t = rng.standard_normal((5, 8))
    eps = rng.standard_normal((5, 8))
    t = 6
    post = posterior_from_eps(x_t, T.constant(eps), t, sched, x0_clamp=4.0)
    a_bar = sched.alpha_bar[t - 1]
    x0 = (x_t - np.sqrt(1.0 - a_bar) * eps) / np.sqrt(a_bar)
    x0 = np.clip(x0, -4.0, 4.0)
    want = sched.coef_x0[t - 1] * x0 + sched.coef_xt[t - 1] * x_t
    assert np.allclose(post.mu.numpy(), want, atol=1e-14)
    # a tiny clamp must actually bind
    tight = posterior_from_eps(x_t, T.constant(eps), t, sched, x0_clamp=0.01)
    x0_t = np.clip((x_t - np.sqrt(1.0 - a_bar) * eps) / np.sqrt(a_bar), -0.01, 0.01)
    want_t = sched.coef_x0[t - 1] * x0_t + sched.coef_xt[t - 1] * x_t
    assert np.allclose(tight.mu.numpy(), want_t, atol=1e-14)


def test_posterior_rejects_out_of_range_steps():
    sched = NoiseSchedule.linear(10)
    x = np.zeros((2, 8))
    for t in (0, 11, -3):
        with pytest.raises(DomainError):
            posterior_from_eps(x, T.constant(x), t, sched)
    with pytest.raises(ShapeError):
        posterior_from_eps(x, T.constant(x), np.zeros((2, 2), dtype=int) + 2, sched)


def test_step_logprob_guards():
    mu = T.constant(np.zeros((3, 4)))
    with pytest.raises(DomainError):
        step_logprob(np.zeros((3, 4)), StepPosterior(mu=mu, sigma2=0.0, t=1))
    with pytest.raises(ShapeError):
        step_logprob(np.zeros((3, 5)), StepPosterior(mu=mu, sigma2=1.0, t=2))


def test_importance_ratio_identity_and_clamp():
    rng = np.random.default_rng(14)
    lp = rng.standard_normal((4, 7))
    ratio, hits = importance_ratio(T.constant(lp), lp.copy())
    assert np.array_equal(ratio.numpy(), np.ones((4, 7)))
    assert hits == 0
    # exponent beyond the clamp saturates and is counted
    big = lp + 50.0
    ratio, hits = importance_ratio(T.constant(big), lp, clamp=20.0)
    assert np.allclose(ratio.numpy(), np.exp(20.0))
    assert hits == 28
    with pytest.raises(ShapeError):
        importance_ratio(T.constant(lp), lp[:2])


def test_importance_ratio_matches_exp_of_difference():
    rng = np.random.default_rng(15)
    a = rng.standard_normal(50)
    b = rng.standard_normal(50)
    ratio, hits = importance_ratio(T.constant(a), b)
    assert np.allclose(ratio.numpy(), np.exp(a - b), rtol=0.0, atol=1e-15)
    assert hits == 0


def test_kl_penalty_zero_iff_equal_and_nonnegative():
    rng = np.random.default_rng(16)
    mu = rng.standard_normal((6, 8))
    z = kl_penalty_per_token(T.constant(mu), mu.copy()).numpy()
    assert np.array_equal(z, np.zeros(6))
    for _ in range(50):
        other = mu + rng.standard_normal((6, 8)) * rng.uniform(1e-6, 2.0)
        v = kl_penalty_per_token(T.constant(mu), other).numpy()
        assert (v > 0).all()
    d = rng.standard_normal((6, 8))
    want = np.mean(np.exp(d) - d - 1.0, axis=-1)
    got = kl_penalty_per_token(T.constant(mu), mu + d).numpy()
    assert np.allclose(got, want, atol=1e-12)


def test_kl_surrogate_aggregates_steps():
    rng = np.random.default_rng(17)
    mus = [T.constant(rng.standard_normal((3, 8))) for _ in range(4)]
    refs = [m.numpy().copy() for m in mus]
    assert kl_surrogate(mus, refs).item() == 0.0
    refs2 = [r + 0.1 for r in refs]
    v = kl_surrogate(mus, refs2).item()
    per = np.mean([np.mean(np.exp(0.1) - 0.1 - 1.0) for _ in refs2])
    assert v == pytest.approx(per, rel=1e-12)
    with pytest.raises(ShapeError):
        kl_surrogate(mus, refs[:2])
    with pytest.raises(ShapeError):
        kl_surrogate([], [])


def test_logprob_gradient_flows_to_mu():
    rng = np.random.default_rng(18)
    mu = T.parameter(rng.standard_normal((3, 4)))
    x = rng.standard_normal((3, 4))
    post = StepPosterior(mu=mu, sigma2=0.7, t=3)
    lp = step_logprob(x, post)
    T.backward(T.tsum(lp))
    want = (x - mu.data) / 0.7
    assert np.allclose(mu.grad, want, atol=1e-12)
    T.clear_tape()
