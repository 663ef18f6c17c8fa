"""Mask ordering and diffusion noise schedules.

Both schedules are small, immutable lookup structures. The mask schedule
fixes which grid positions are revealed at each autoregressive step; the
noise schedule fixes the per-step Gaussian corruption used by the
diffusion head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def cosine_step_counts(n: int, k_steps: int) -> np.ndarray:
    """Number of tokens revealed at each of ``k_steps`` AR steps.

    Follows the cosine masking curve: the count of still-masked tokens
    after step k is approximately n*cos(pi/2 * k/K). Counts are adjusted
    so every step reveals at least one token and the total is exactly n.
    """
    if not (1 <= k_steps <= n):
        raise ValueError(f"need 1 <= k_steps <= n, got k_steps={k_steps}, n={n}")
    masked = [n]
    for k in range(1, k_steps + 1):
        target = int(round(n * np.cos(np.pi / 2.0 * k / k_steps)))
        # keep the sequence strictly decreasing so each step is nonempty
        target = min(target, masked[-1] - 1)
        target = max(target, k_steps - k)
        masked.append(target)
    masked[-1] = 0
    counts = -np.diff(np.asarray(masked, dtype=np.int64))
    assert counts.sum() == n and counts.min() >= 1
    return counts


@dataclass(frozen=True)
class MaskSchedule:
    """Disjoint index sets, one per AR step, covering the whole grid.

    ``steps[k-1]`` holds the sorted grid positions revealed at step k.
    """

    n: int
    steps: tuple[np.ndarray, ...]

    def __post_init__(self):
        seen = np.concatenate(self.steps) if self.steps else np.array([], dtype=np.int64)
        if len(self.steps) == 0 or any(len(s) == 0 for s in self.steps):
            raise ValueError("every mask step must reveal at least one token")
        if len(np.unique(seen)) != self.n or len(seen) != self.n:
            raise ValueError("mask steps must partition the grid exactly")

    @property
    def k_steps(self) -> int:
        return len(self.steps)

    def known_before(self, k: int) -> np.ndarray:
        """Boolean mask of positions already revealed when step k begins."""
        self._check_step(k)
        mask = np.zeros(self.n, dtype=bool)
        for s in self.steps[: k - 1]:
            mask[s] = True
        return mask

    def candidates(self, k: int) -> np.ndarray:
        """Sorted positions still unknown when step k begins.

        These are the positions the model predicts at step k; the subset
        ``steps[k-1]`` is the one actually accepted into the grid.
        """
        return np.flatnonzero(~self.known_before(k))

    def _check_step(self, k: int):
        if not (1 <= k <= self.k_steps):
            raise ValueError(f"step {k} outside 1..{self.k_steps}")

    @classmethod
    def build(cls, n: int, k_steps: int, rng: np.random.Generator) -> "MaskSchedule":
        """Random permutation split by the cosine count curve."""
        counts = cosine_step_counts(n, k_steps)
        perm = rng.permutation(n)
        steps = []
        offset = 0
        for c in counts:
            steps.append(np.sort(perm[offset : offset + c]).astype(np.int64))
            offset += c
        return cls(n=n, steps=tuple(steps))


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step constants for the Gaussian corruption process.

    Arrays are indexed by t-1 for t in 1..T. ``posterior_variance`` is the
    variance of x_{t-1} given (x_t, x_0); it is exactly zero at t=1, which
    makes the last denoising step deterministic.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray
    posterior_variance: np.ndarray
    coef_x0: np.ndarray
    coef_xt: np.ndarray

    @property
    def t_steps(self) -> int:
        return len(self.betas)

    def sigma2(self, t: int) -> float:
        return float(self.posterior_variance[t - 1])

    @classmethod
    def linear(cls, t_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02,
               base_steps: int = 1000) -> "NoiseSchedule":
        """Few-step schedule subsampled from a dense linear reference.

        Naively scaling the dense (beta_start, beta_end) endpoints by
        base_steps/t_steps overshoots beta past 1 for small t_steps, so the
        few-step constants are instead derived by striding through the
        cumulative noise of the dense schedule: alpha_bar is sampled at
        t_steps evenly spaced points and effective betas recovered from the
        ratios. This keeps every beta in (0, 1) while matching the total
        corruption of the dense schedule.
        """
        if t_steps < 2:
            raise ValueError(f"need at least 2 diffusion steps, got {t_steps}")
        dense = np.linspace(beta_start, beta_end, base_steps)
        dense_bar = np.cumprod(1.0 - dense)
        picks = np.round(np.linspace(0, base_steps - 1, t_steps)).astype(np.int64)
        alpha_bar = dense_bar[picks]
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        alphas = alpha_bar / prev
        betas = 1.0 - alphas
        posterior_variance = betas * (1.0 - prev) / (1.0 - alpha_bar)
        coef_x0 = np.sqrt(prev) * betas / (1.0 - alpha_bar)
        coef_xt = np.sqrt(alphas) * (1.0 - prev) / (1.0 - alpha_bar)
        return cls(
            betas=betas,
            alphas=alphas,
            alpha_bar=alpha_bar,
            alpha_bar_prev=prev,
            posterior_variance=posterior_variance,
            coef_x0=coef_x0,
            coef_xt=coef_xt,
        )
