"""Masked autoregressive grid generator with a small diffusion head.

A transformer backbone reads the partially revealed token grid plus a class
condition and emits one conditioning vector per grid position. A per-token
MLP head then denoises the positions scheduled for the current step. The
backbone deliberately never sees the values of unrevealed tokens: their
embeddings are replaced by a learned mask vector and they are excluded from
attention keys, so conditioning is exactly invariant to unknown content.

At each AR step the model predicts every still-unknown position; the mask
schedule accepts a subset into the grid and the rest remain candidates for
later steps. Keeping the rejected predictions around is what lets the
post-training losses compare predictions of the same token across steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import AttentionBlock, LayerNorm, Linear
from .likelihood import posterior_from_eps, step_logprob
from .rng import stream, stream_name
from .rollout import RolloutRecord, StepRollout
from .schedules import MaskSchedule, NoiseSchedule
from .tensor import DomainError, ShapeError, Tensor

ATTN_NEG = -1e30


class SequencingError(Exception):
    """AR steps were driven out of order."""


@dataclass
class LatentGrid:
    """Token grid state: values plus a revealed/unrevealed flag per position."""

    tokens: np.ndarray  # (n, d) float64
    known: np.ndarray   # (n,) bool

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.known.shape != (self.tokens.shape[0],):
            raise ShapeError(
                f"grid needs tokens (n, d) and known (n,), got {self.tokens.shape} / {self.known.shape}"
            )

    @classmethod
    def empty(cls, n: int, channels: int) -> "LatentGrid":
        return cls(tokens=np.zeros((n, channels)), known=np.zeros(n, dtype=bool))

    def copy(self) -> "LatentGrid":
        return LatentGrid(tokens=self.tokens.copy(), known=self.known.copy())

    @property
    def n(self) -> int:
        return self.tokens.shape[0]


@dataclass(frozen=True)
class ModelSpec:
    grid_h: int = 8
    grid_w: int = 8
    channels: int = 8
    k_steps: int = 8
    t_steps: int = 10
    width: int = 64
    blocks: int = 2
    heads: int = 4
    head_hidden: int = 128
    temb_dim: int = 16
    num_classes: int = 16
    x0_clamp: float = 4.0

    @property
    def n(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def cond_dim(self) -> int:
        return self.width

    def to_dict(self) -> dict:
        return {
            "grid_h": self.grid_h, "grid_w": self.grid_w, "channels": self.channels,
            "k_steps": self.k_steps, "t_steps": self.t_steps, "width": self.width,
            "blocks": self.blocks, "heads": self.heads, "head_hidden": self.head_hidden,
            "temb_dim": self.temb_dim, "num_classes": self.num_classes,
            "x0_clamp": self.x0_clamp,
        }


def sinusoidal_embedding(t_steps: int, dim: int) -> np.ndarray:
    """Fixed timestep features for t = 0..t_steps (row 0 unused)."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = np.arange(t_steps + 1)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)[:, :dim]


class DiffusionHead:
    """Three-layer MLP noise predictor conditioned on (x_t, t, z)."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        d, hidden = spec.channels, spec.head_hidden
        n_in = d + spec.temb_dim + spec.cond_dim
        self.temb = sinusoidal_embedding(spec.t_steps, spec.temb_dim)
        self.fc1 = Linear(n_in, hidden, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self.fc3 = Linear(hidden, d, rng)

    def __call__(self, x_t, t, z) -> Tensor:
        """Noise prediction; ``t`` is a scalar step or an array of steps
        aligned with the leading axes of ``x_t``."""
        x_t = x_t if isinstance(x_t, Tensor) else T.constant(x_t)
        z = z if isinstance(z, Tensor) else T.constant(z)
        dim = self.temb.shape[1]
        t_arr = np.asarray(t)
        te = self.temb[t_arr]
        if t_arr.ndim:
            te = te.reshape(t_arr.shape + (1,) * (x_t.ndim - 1 - t_arr.ndim) + (dim,))
        te = np.broadcast_to(te, x_t.shape[:-1] + (dim,))
        h = T.concat([x_t, T.constant(te.copy()), z], axis=-1)
        # tanh over gelu: erf costs ~10x more per element on CPU and the
        # head runs on every diffusion step of every rollout
        h = T.tanh(self.fc1(h))
        h = T.tanh(self.fc2(h))
        return self.fc3(h)

    def params(self, prefix: str = "head") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.fc1.params(f"{prefix}.fc1"))
        out.update(self.fc2.params(f"{prefix}.fc2"))
        out.update(self.fc3.params(f"{prefix}.fc3"))
        return out


class MARModel:
    """Backbone plus head plus noise schedule, with the sampling loops."""

    def __init__(self, spec: ModelSpec, init_rng: np.random.Generator | int = 0):
        rng = init_rng if isinstance(init_rng, np.random.Generator) else stream(init_rng, "init")
        self.spec = spec
        self.noise = NoiseSchedule.linear(spec.t_steps)
        w, n = spec.width, spec.n
        self.token_in = Linear(spec.channels, w, rng)
        self.mask_embed = T.parameter(rng.normal(0.0, 0.02, size=w))
        self.pos_embed = T.parameter(rng.normal(0.0, 0.02, size=(n + 1, w)))
        # one extra class row serves as the null condition (dropout / guidance)
        self.class_embed = T.parameter(rng.normal(0.0, 0.02, size=(spec.num_classes + 1, w)))
        self.blocks = [AttentionBlock(w, spec.heads, rng) for _ in range(spec.blocks)]
        self.ln_f = LayerNorm(w)
        self.out_proj = Linear(w, spec.cond_dim, rng)
        self.head = DiffusionHead(spec, rng)

    @property
    def null_class(self) -> int:
        return self.spec.num_classes

    # -- parameters ---------------------------------------------------------

    def ar_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.token_in.params("ar.token_in"))
        out["ar.mask_embed"] = self.mask_embed
        out["ar.pos_embed"] = self.pos_embed
        out["ar.class_embed"] = self.class_embed
        for i, blk in enumerate(self.blocks):
            out.update(blk.params(f"ar.block{i}"))
        out.update(self.ln_f.params("ar.ln_f"))
        out.update(self.out_proj.params("ar.out_proj"))
        return out

    def head_params(self) -> dict[str, Tensor]:
        return self.head.params("head")

    def params(self) -> dict[str, Tensor]:
        out = self.ar_params()
        out.update(self.head_params())
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params().items()}

    def load_state(self, arrays: dict[str, np.ndarray]):
        params = self.params()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint missing parameters: {sorted(missing)[:4]}...")
        for name, p in params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()

    def set_trainable(self, ar: bool = True, head: bool = True):
        for p in self.ar_params().values():
            p.requires_grad = ar
        for p in self.head_params().values():
            p.requires_grad = head

    # -- conditioning -------------------------------------------------------

    def conditioning(self, tokens, known: np.ndarray, class_ids) -> Tensor:
        """Per-position conditioning vectors for a batch of grids.

        ``tokens`` is (B, n, d), ``known`` a (B, n) bool mask, ``class_ids``
        (B,) ints (the value ``num_classes`` selects the null condition).
        Unknown positions contribute a learned mask embedding instead of
        their values and are excluded from attention keys, so the output is
        exactly invariant to unknown token content.
        """
        tokens = tokens if isinstance(tokens, Tensor) else T.constant(tokens)
        batch, n, _ = tokens.shape
        if known.shape != (batch, n):
            raise ShapeError(f"known mask shape {known.shape} != {(batch, n)}")
        ids = np.asarray(class_ids, dtype=np.int64)
        if ids.min() < 0 or ids.max() > self.spec.num_classes:
            raise DomainError(f"class id outside 0..{self.spec.num_classes}")

        km = T.constant(known[:, :, None].astype(np.float64))
        emb = self.token_in(tokens)
        mix = T.add(T.mul(emb, km), T.mul(T.reshape(self.mask_embed, (1, 1, -1)),
                                          T.sub(1.0, km)))
        cls = T.reshape(T.take_rows(self.class_embed, ids), (batch, 1, self.spec.width))
        seq = T.concat([cls, mix], axis=1)
        seq = T.add(seq, self.pos_embed)

        # keys: the condition slot, every known position, and self
        allowed = np.zeros((batch, 1, 1, n + 1), dtype=bool)
        allowed[:, 0, 0, 0] = True
        allowed[:, 0, 0, 1:] = known
        allowed = np.broadcast_to(allowed, (batch, 1, n + 1, n + 1)).copy()
        diag = np.arange(n + 1)
        allowed[:, 0, diag, diag] = True
        mask = T.constant(np.where(allowed, 0.0, ATTN_NEG))

        for blk in self.blocks:
            seq = blk(seq, mask)
        out = self.out_proj(self.ln_f(seq))
        return T.take_rows(out, np.arange(1, n + 1), axis=1)

    def ar_forward(self, grid: LatentGrid, class_id: int, k: int,
                   schedule: MaskSchedule) -> Tensor:
        """Conditioning vectors for the positions predicted at step k.

        The grid must contain exactly the tokens of steps 1..k-1; the
        returned rows cover every still-unknown position (the step's
        accepted subset is ``schedule.steps[k-1]``).
        """
        expect = schedule.known_before(k)
        if not np.array_equal(grid.known, expect):
            raise SequencingError(
                f"grid state inconsistent with step {k}: expected {int(expect.sum())} known, "
                f"found {int(grid.known.sum())} (or a different index set)"
            )
        cand = schedule.candidates(k)
        z = self.conditioning(grid.tokens[None], grid.known[None], [class_id])
        return T.take_rows(T.reshape(z, (grid.n, self.spec.cond_dim)), cand)

    # -- diffusion ----------------------------------------------------------

    def diffuse_sample(self, z: np.ndarray, rng: np.random.Generator,
                       cfg_scale: float = 1.0, z_uncond: np.ndarray | None = None
                       ) -> tuple[np.ndarray, np.ndarray]:
        """Ancestral denoising for one set of tokens.

        Returns (x_0, states) where states[t] = x_t for t = 0..T. The final
        step is deterministic (zero posterior variance). ``cfg_scale`` != 1
        mixes conditional and null-condition noise predictions and requires
        ``z_uncond``.
        """
        if cfg_scale != 1.0 and z_uncond is None:
            raise DomainError("guided sampling needs the null-condition vectors")
        t_steps = self.spec.t_steps
        m, d = z.shape[0], self.spec.channels
        with T.no_grad():
            x = rng.standard_normal((m, d))
            states = np.empty((t_steps + 1, m, d))
            states[t_steps] = x
            for t in range(t_steps, 0, -1):
                eps = self.head(x, t, z).numpy()
                if cfg_scale != 1.0:
                    eps_u = self.head(x, t, z_uncond).numpy()
                    eps = eps_u + cfg_scale * (eps - eps_u)
                post = posterior_from_eps(x, T.constant(eps), t, self.noise,
                                          x0_clamp=self.spec.x0_clamp)
                x = post.mu.numpy()
                if t > 1:
                    x = x + np.sqrt(post.sigma2) * rng.standard_normal((m, d))
                states[t - 1] = x
        return states[0].copy(), states

    def _diffuse_extras(self, z: np.ndarray, rngs: list[np.random.Generator],
                        cfg_scale: float = 1.0, z_uncond: np.ndarray | None = None
                        ) -> np.ndarray:
        """Several independent denoising trajectories from shared conditioning.

        Each trajectory draws its noise from its own generator in the same
        order as ``diffuse_sample``; only the network evaluations are
        batched. Returns states of shape (len(rngs), T+1, m, d).
        """
        e = len(rngs)
        t_steps = self.spec.t_steps
        m, d = z.shape[0], self.spec.channels
        with T.no_grad():
            x = np.stack([r.standard_normal((m, d)) for r in rngs])
            states = np.empty((e, t_steps + 1, m, d))
            states[:, t_steps] = x
            z_b = np.broadcast_to(z, (e,) + z.shape)
            z_ub = None if z_uncond is None else np.broadcast_to(z_uncond, (e,) + z.shape)
            for t in range(t_steps, 0, -1):
                eps = self.head(x, t, z_b).numpy()
                if cfg_scale != 1.0:
                    eps_u = self.head(x, t, z_ub).numpy()
                    eps = eps_u + cfg_scale * (eps - eps_u)
                post = posterior_from_eps(x, T.constant(eps), t, self.noise,
                                          x0_clamp=self.spec.x0_clamp)
                x = post.mu.numpy()
                if t > 1:
                    noise = np.stack([r.standard_normal((m, d)) for r in rngs])
                    x = x + np.sqrt(post.sigma2) * noise
                states[:, t - 1] = x
        return states

    def step_terms(self, x_t: np.ndarray, x_prev: np.ndarray, ts: np.ndarray, z
                   ) -> tuple[Tensor, Tensor]:
        """Likelihood terms for the stored transitions of one AR step.

        ``x_t`` and ``x_prev`` are (Q, S, m, d): Q selected timesteps
        (matching ``ts``) by S trajectories by m tokens. ``z`` is the
        (m, cond) conditioning, tiled across the leading axes inside.
        Returns per-token log densities (Q, S, m) and the canonical
        trajectory's posterior means (Q, m, d), differentiable through
        ``z``. The rollout-time and training-time densities both go through
        here with identically built stacks, which is what makes the
        importance ratio exactly 1 at unchanged parameters.
        """
        q, s, m, d = x_t.shape
        ts = np.asarray(ts, dtype=np.int64)
        if ts.shape != (q,):
            raise ShapeError(f"need one timestep per slab: {ts.shape} vs Q={q}")
        z = z if isinstance(z, Tensor) else T.constant(z)
        z_b = T.broadcast_to(T.reshape(z, (1, 1, m, self.spec.cond_dim)),
                             (q, s, m, self.spec.cond_dim))
        eps = self.head(x_t, ts, z_b)
        post = posterior_from_eps(x_t, eps, ts, self.noise, x0_clamp=self.spec.x0_clamp)
        logp = step_logprob(x_prev, post)
        mu_canon = T.reshape(T.take_rows(post.mu, np.array([0]), axis=1), (q, m, d))
        return logp, mu_canon

    # -- sampling loop ------------------------------------------------------

    def generate(self, class_id: int, schedule: MaskSchedule, s_trajectories: int,
                 root_seed: int, member: int = 0, cfg_scale: float = 1.0,
                 resample_post_hoc: bool = True) -> RolloutRecord:
        """Run the full AR chain and record every intermediate.

        One canonical trajectory per step drives the grid; the additional
        ``s_trajectories - 1`` trajectories reuse the stored conditioning.
        With ``resample_post_hoc`` they are drawn after the chain finishes
        (the recorded conditioning is identical either way, so the flag only
        changes the stream consumption order of fresh noise).
        """
        if s_trajectories < 1:
            raise DomainError(f"need at least one trajectory, got {s_trajectories}")
        spec = self.spec
        grid = LatentGrid.empty(spec.n, spec.channels)
        steps: list[StepRollout] = []
        z_uncond_needed = cfg_scale != 1.0

        for k in range(1, schedule.k_steps + 1):
            cand = schedule.candidates(k)
            with T.no_grad():
                z = self.ar_forward(grid, class_id, k, schedule).numpy().copy()
                z_u = None
                if z_uncond_needed:
                    zu_all = self.conditioning(grid.tokens[None], grid.known[None],
                                               [self.null_class])
                    z_u = T.take_rows(T.reshape(zu_all, (spec.n, spec.cond_dim)),
                                      cand).numpy().copy()
            x0, states = self.diffuse_sample(
                z, stream(root_seed, "member", member, "k", k, "s", 1),
                cfg_scale=cfg_scale, z_uncond=z_u)
            trajs = np.empty((s_trajectories, spec.t_steps + 1, len(cand), spec.channels))
            trajs[0] = states
            if not resample_post_hoc and s_trajectories > 1:
                rngs = [stream(root_seed, "member", member, "k", k, "s", s)
                        for s in range(2, s_trajectories + 1)]
                trajs[1:] = self._diffuse_extras(z, rngs, cfg_scale=cfg_scale, z_uncond=z_u)
            accepted = schedule.steps[k - 1]
            pos = np.searchsorted(cand, accepted)
            grid.tokens[accepted] = x0[pos]
            grid.known[accepted] = True
            steps.append(StepRollout(candidates=cand, accepted=accepted, z=z,
                                     z_uncond=z_u, states=trajs))

        if resample_post_hoc and s_trajectories > 1:
            for k, step in enumerate(steps, start=1):
                rngs = [stream(root_seed, "member", member, "k", k, "s", s)
                        for s in range(2, s_trajectories + 1)]
                step.states[1:] = self._diffuse_extras(
                    step.z, rngs, cfg_scale=cfg_scale, z_uncond=step.z_uncond)

        return RolloutRecord(
            class_id=class_id,
            member=member,
            schedule=schedule,
            steps=steps,
            final_tokens=grid.tokens.copy(),
            rng_tag=stream_name(root_seed, "member", member),
        )

    # -- pretraining loss ---------------------------------------------------

    def pretrain_loss(self, tokens: np.ndarray, known: np.ndarray,
                      class_ids: np.ndarray, rng: np.random.Generator,
                      cond_dropout: float = 0.1) -> Tensor:
        """Denoising loss over the unrevealed positions of a batch of grids.

        Per masked token: draw t uniformly, corrupt the clean value with the
        schedule, and score the squared error of the noise prediction summed
        over channels. The mean over masked tokens is returned. Each sample
        independently swaps its class for the null condition with
        probability ``cond_dropout``.
        """
        batch, n, d = tokens.shape
        if not np.any(~known):
            raise DomainError("batch has no masked positions to predict")
        ids = np.asarray(class_ids, dtype=np.int64).copy()
        if cond_dropout > 0.0:
            drop = rng.random(batch) < cond_dropout
            ids[drop] = self.null_class

        z = self.conditioning(tokens, known, ids)
        flat_idx = np.flatnonzero(~known.reshape(-1))
        z_m = T.take_rows(T.reshape(z, (batch * n, self.spec.cond_dim)), flat_idx)
        x0 = tokens.reshape(batch * n, d)[flat_idx]

        t_draw = rng.integers(1, self.spec.t_steps + 1, size=len(flat_idx))
        eps = rng.standard_normal((len(flat_idx), d))
        a_bar = self.noise.alpha_bar[t_draw - 1][:, None]
        x_t = np.sqrt(a_bar) * x0 + np.sqrt(1.0 - a_bar) * eps

        eps_hat = self.head(x_t, t_draw, z_m)
        return T.tmean(T.tsum(T.square(T.sub(T.constant(eps), eps_hat)), axis=-1))
