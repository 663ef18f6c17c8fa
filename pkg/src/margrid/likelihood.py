"""Per-step Gaussian likelihood of the denoising process.

The reverse process factorizes over diffusion steps; each step is an
isotropic Gaussian whose mean comes from the noise prediction network and
whose variance is a schedule constant. The policy-gradient machinery needs
three pieces: per-token log densities of stored transitions, importance
ratios between two parameter snapshots, and a cheap non-negative surrogate
for the KL divergence against a frozen reference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import DomainError, ShapeError, Tensor
from .schedules import NoiseSchedule

LOG_TWO_PI = float(np.log(2.0 * np.pi))


@dataclass
class StepPosterior:
    """Isotropic Gaussian p(x_{t-1} | x_t) for one or more denoising steps.

    ``mu`` may carry gradient; ``sigma2`` is a schedule constant (a scalar,
    or an array pre-shaped to broadcast against per-token quantities when
    several timesteps are stacked along the leading axis). Step t=1 has
    zero variance (deterministic) and therefore no density; callers must
    not build a posterior for likelihood purposes at t=1.
    """

    mu: Tensor
    sigma2: float | np.ndarray
    t: int | np.ndarray


def posterior_from_eps(x_t, eps_hat: Tensor, t, schedule: NoiseSchedule,
                       x0_clamp: float = 4.0) -> StepPosterior:
    """Convert a noise prediction into the denoising posterior.

    ``t`` is a scalar step, or a 1-D array of steps when ``x_t`` stacks one
    slab per timestep along axis 0. The implied clean-sample estimate is
    clamped elementwise to [-x0_clamp, x0_clamp] before entering the
    posterior mean; latents are standardized so this bounds error
    amplification at high-noise steps.
    """
    x_t = x_t if isinstance(x_t, Tensor) else T.constant(x_t)
    ts = np.asarray(t)
    if np.any(ts < 1) or np.any(ts > schedule.t_steps):
        raise DomainError(f"step {t} outside schedule range 1..{schedule.t_steps}")
    if ts.ndim == 0:
        a_bar = schedule.alpha_bar[ts - 1]
        c_x0 = schedule.coef_x0[ts - 1]
        c_xt = schedule.coef_xt[ts - 1]
        sigma2 = schedule.sigma2(int(ts))
    elif ts.ndim == 1:
        # one slab per timestep along axis 0 of x_t
        coef_shape = ts.shape + (1,) * (x_t.ndim - 1)
        a_bar = schedule.alpha_bar[ts - 1].reshape(coef_shape)
        c_x0 = schedule.coef_x0[ts - 1].reshape(coef_shape)
        c_xt = schedule.coef_xt[ts - 1].reshape(coef_shape)
        sigma2 = schedule.posterior_variance[ts - 1].reshape(ts.shape + (1,) * (x_t.ndim - 2))
    else:
        raise ShapeError(f"t must be a scalar or 1-D array, got shape {ts.shape}")
    x0_hat = T.mul(T.sub(x_t, T.mul(eps_hat, np.sqrt(1.0 - a_bar))), 1.0 / np.sqrt(a_bar))
    x0_hat = T.clip(x0_hat, -x0_clamp, x0_clamp)
    mu = T.add(T.mul(x0_hat, c_x0), T.mul(x_t, c_xt))
    return StepPosterior(mu=mu, sigma2=sigma2, t=t)


def step_logprob(x_prev, posterior: StepPosterior) -> Tensor:
    """Log density of an observed transition under the step posterior.

    Returns one value per token: with D channels,
    -0.5 * (||x_prev - mu||^2 / sigma2 + D * log(2 pi sigma2)),
    which is the sum of D independent one-dimensional Gaussian log
    densities. Differentiable in ``mu``.
    """
    if np.any(np.asarray(posterior.sigma2) <= 0.0):
        raise DomainError(f"non-positive step variance at t={posterior.t}")
    x_prev = x_prev if isinstance(x_prev, Tensor) else T.constant(x_prev)
    if x_prev.shape != posterior.mu.shape:
        raise ShapeError(f"transition shape {x_prev.shape} != mean shape {posterior.mu.shape}")
    d = x_prev.shape[-1]
    sq = T.tsum(T.square(T.sub(x_prev, posterior.mu)), axis=-1)
    log_norm = d * (LOG_TWO_PI + np.log(posterior.sigma2))
    return T.mul(T.add(T.mul(sq, 1.0 / posterior.sigma2), log_norm), -0.5)


def importance_ratio(logp_new: Tensor, logp_old, clamp: float = 20.0) -> tuple[Tensor, int]:
    """exp(logp_new - logp_old) with the exponent clamped to [-clamp, clamp].

    ``logp_new`` and ``logp_old`` must already be aggregated over whatever
    step set the caller uses (a single step or a sum over selected steps).
    Returns the ratio tensor and the number of entries that hit the clamp.
    """
    logp_old = logp_old if isinstance(logp_old, Tensor) else T.constant(logp_old)
    if logp_new.shape != logp_old.shape:
        raise ShapeError(f"log-prob tables disagree: {logp_new.shape} vs {logp_old.shape}")
    delta = T.sub(logp_new, logp_old)
    hits = int(np.count_nonzero(np.abs(delta.data) > clamp))
    return T.exp(T.clip(delta, -clamp, clamp)), hits


def kl_penalty_per_token(mu_theta: Tensor, mu_ref) -> Tensor:
    """Non-negative divergence surrogate per token.

    Elementwise over channels: exp(d) - d - 1 with d = mu_ref - mu_theta,
    then averaged over the channel axis. Zero exactly when the means agree.
    """
    mu_ref = mu_ref if isinstance(mu_ref, Tensor) else T.constant(mu_ref)
    if mu_theta.shape != mu_ref.shape:
        raise ShapeError(f"mean tables disagree: {mu_theta.shape} vs {mu_ref.shape}")
    d = T.sub(mu_ref, mu_theta)
    return T.tmean(T.sub(T.sub(T.exp(d), d), 1.0), axis=-1)


def kl_surrogate(mus_theta: Sequence[Tensor], mus_ref: Sequence) -> Tensor:
    """Average the per-token surrogate over a set of steps and all tokens.

    Accepts one mean table per selected step; returns a scalar that is
    non-negative and zero exactly when the tables coincide.
    """
    if len(mus_theta) != len(mus_ref) or len(mus_theta) == 0:
        raise ShapeError("mean table lists must be non-empty and of equal length")
    total = None
    for mt, mr in zip(mus_theta, mus_ref):
        term = T.tmean(kl_penalty_per_token(mt, mr))
        total = term if total is None else T.add(total, term)
    return T.mul(total, 1.0 / len(mus_theta))
