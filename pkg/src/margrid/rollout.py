"""Group rollouts, rewards, advantages, and step subsampling.

A rollout group draws several full generations for one class under the
same policy snapshot, scores each final grid with a deterministic reward,
and normalizes rewards within the group. Records keep every intermediate
the training losses need: per-step conditioning, all diffusion trajectories,
the step/timestep selection, and the behavior policy's log densities for
the selected pairs (stored at rollout time, so later parameter updates
cannot contaminate them).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import load_arrays, save_arrays
from .rng import stream
from .schedules import MaskSchedule
from .tensor import DomainError, Tensor

ADV_STD_GUARD = 1e-8

DUMP_VERSION = 1


@dataclass
class StepRollout:
    """Everything recorded at one AR step.

    ``candidates`` are the positions predicted at this step (all positions
    still unknown when it began); ``accepted`` is the subset written into
    the grid. ``states[s, t]`` is x_t of trajectory s over the candidate
    tokens, t = 0..T; trajectory 0 is the canonical one that drove the grid.
    """

    candidates: np.ndarray
    accepted: np.ndarray
    z: np.ndarray
    z_uncond: np.ndarray | None
    states: np.ndarray


@dataclass(frozen=True)
class StepSelection:
    """Sorted AR steps and diffusion timesteps chosen for one update."""

    mask_steps: tuple[int, ...]
    t_steps: tuple[int, ...]


@dataclass
class RolloutRecord:
    class_id: int
    member: int
    schedule: MaskSchedule
    steps: list[StepRollout]
    final_tokens: np.ndarray
    rng_tag: str = ""
    reward: float | None = None
    advantage: float | None = None
    selection: StepSelection | None = None
    # per-token log densities under the rollout policy, shape (Q, S, C)
    # with axes exactly matching training_stacks()
    logp_old: np.ndarray | None = None

    @property
    def s_trajectories(self) -> int:
        return self.steps[0].states.shape[0]

    def step(self, m: int) -> StepRollout:
        return self.steps[m - 1]

    def canonical_x0(self, m: int) -> np.ndarray:
        """Final denoised prediction of the canonical trajectory at step m."""
        return self.steps[m - 1].states[0, 0]

    def state_before(self, m: int) -> tuple[np.ndarray, np.ndarray]:
        """Reconstruct (tokens, known) as they were when step m began.

        Accepted tokens are never overwritten, so rows of the final grid
        belonging to earlier steps are exactly the values present at step m;
        unknown positions were zero during the rollout.
        """
        known = self.schedule.known_before(m)
        tokens = np.where(known[:, None], self.final_tokens, 0.0)
        return tokens, known

    def candidate_counts(self) -> np.ndarray:
        assert self.selection is not None
        return np.array([len(self.step(m).candidates)
                         for m in self.selection.mask_steps])

    def training_stacks(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(x_t, x_prev, ts) stacks covering the whole selection.

        The x stacks are (Q, S, C, d): Q selected timesteps (aligned with
        ``ts``) by S trajectories by the selected steps' candidate tokens
        concatenated in selection order. Rollout-time density filling and
        training-time evaluation must both build their inputs through this
        one helper so the two see identical arrays.
        """
        assert self.selection is not None
        ts = np.asarray(self.selection.t_steps, dtype=np.int64)
        xs, xps = [], []
        for m in self.selection.mask_steps:
            st = self.step(m).states
            xs.append(np.stack([st[:, t] for t in ts]))
            xps.append(np.stack([st[:, t - 1] for t in ts]))
        return np.concatenate(xs, axis=2), np.concatenate(xps, axis=2), ts


def select_steps(k_total: int, t_total: int, n_mask: int, n_t: int,
                 rng: np.random.Generator) -> StepSelection:
    """Uniform subsets of AR steps {1..K} and diffusion steps {2..T}.

    Timestep 1 is excluded: its transition is deterministic and carries no
    density. Sampling is without replacement; outputs are sorted.
    """
    if not (1 <= n_mask <= k_total):
        raise DomainError(f"cannot select {n_mask} of {k_total} AR steps")
    if not (1 <= n_t <= t_total - 1):
        raise DomainError(f"cannot select {n_t} of {t_total - 1} diffusion steps")
    mask_steps = np.sort(rng.choice(np.arange(1, k_total + 1), size=n_mask, replace=False))
    t_steps = np.sort(rng.choice(np.arange(2, t_total + 1), size=n_t, replace=False))
    return StepSelection(mask_steps=tuple(int(m) for m in mask_steps),
                         t_steps=tuple(int(t) for t in t_steps))


@dataclass
class RewardModel:
    """Deterministic scalar score in [0, 1] for a finished grid.

    ``pattern`` measures closeness to the class template through a Gaussian
    kernel; ``count`` compares the number of channel-0 activations against
    a per-class target; ``composite`` mixes the two convexly.
    """

    templates: np.ndarray
    kind: str = "pattern"
    sigma2: float = 2.0
    count_threshold: float = 0.0
    count_targets: np.ndarray | None = None
    mix: float = 0.5

    def __post_init__(self):
        if self.kind not in ("pattern", "count", "composite"):
            raise ValueError(f"unknown reward kind {self.kind!r}")
        if self.sigma2 <= 0.0:
            raise ValueError("pattern kernel scale must be positive")
        if not (0.0 <= self.mix <= 1.0):
            raise ValueError("composite mix must lie in [0, 1]")
        if self.count_targets is None:
            n_classes, n, _ = self.templates.shape
            targets = np.round(n * (np.arange(n_classes) + 1) / (n_classes + 1))
            self.count_targets = targets.astype(np.int64)

    def pattern(self, tokens: np.ndarray, class_id: int) -> float:
        n = tokens.shape[0]
        diff = tokens - self.templates[class_id]
        return float(np.exp(-np.sum(diff * diff) / (n * self.sigma2)))

    def count(self, tokens: np.ndarray, class_id: int) -> float:
        n = tokens.shape[0]
        active = int(np.count_nonzero(tokens[:, 0] > self.count_threshold))
        return 1.0 - abs(active - int(self.count_targets[class_id])) / n

    def __call__(self, tokens: np.ndarray, class_id: int) -> float:
        if self.kind == "pattern":
            r = self.pattern(tokens, class_id)
        elif self.kind == "count":
            r = self.count(tokens, class_id)
        else:
            r = self.mix * self.pattern(tokens, class_id) \
                + (1.0 - self.mix) * self.count(tokens, class_id)
        if not (0.0 <= r <= 1.0) or not np.isfinite(r):
            raise DomainError(f"reward {r} outside [0, 1]")
        return r


def group_advantages(rewards: np.ndarray) -> np.ndarray:
    """Within-group normalization: (R - mean) / (population std + guard).

    A zero-variance group yields exactly zero advantages through the guard.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim != 1 or len(rewards) < 2:
        raise DomainError(f"need a flat group of at least 2 rewards, got shape {rewards.shape}")
    mean = rewards.mean()
    std = rewards.std()
    return (rewards - mean) / (std + ADV_STD_GUARD)


def recompute_conditioning(record: RolloutRecord, m: int, model) -> Tensor:
    """Conditioning for step m's candidate tokens under the model's current
    parameters, differentiable into the backbone.

    Reconstructs the grid state the rollout saw at step m; with unchanged
    parameters this reproduces the stored conditioning bit for bit.
    """
    tokens, known = record.state_before(m)
    cand = record.schedule.candidates(m)
    z = model.conditioning(tokens[None], known[None], [record.class_id])
    return T.take_rows(T.reshape(z, (record.schedule.n, model.spec.cond_dim)), cand)


def conditioning_stacks(record: RolloutRecord, model) -> Tensor:
    """Conditioning rows for every selected step's candidates in one batched
    backbone pass, concatenated along the token axis in selection order.

    Differentiable into the backbone. The training objectives and the
    rollout-time density fill must both obtain conditioning through this
    helper (or its batched form) so importance ratios compare identical
    arrays at unchanged parameters.
    """
    flat, rows = conditioning_flat([record], model)
    return T.take_rows(flat, rows[0])


def conditioning_flat(records: list[RolloutRecord], model) -> tuple[Tensor, list[np.ndarray]]:
    """One backbone pass covering several records' selections.

    Returns the flat (batch * n, cond) conditioning rows plus, per record,
    the indices of its candidates in selection order. The backbone treats
    grids as independent batch entries (row-wise dense layers and norms,
    per-grid attention), so each record's rows come out identical to its
    own single-record pass regardless of what else shares the batch.
    """
    slabs: list[tuple[RolloutRecord, int]] = []
    for rec in records:
        assert rec.selection is not None
        slabs.extend((rec, m) for m in rec.selection.mask_steps)
    states = [rec.state_before(m) for rec, m in slabs]
    tokens = np.stack([s[0] for s in states])
    known = np.stack([s[1] for s in states])
    z = model.conditioning(tokens, known, [rec.class_id for rec, _ in slabs])
    n = model.spec.n
    flat = T.reshape(z, (len(slabs) * n, model.spec.cond_dim))
    rows = []
    base = 0
    for rec in records:
        rows.append(np.concatenate([(base + i) * n + rec.schedule.candidates(m)
                                    for i, m in enumerate(rec.selection.mask_steps)]))
        base += len(rec.selection.mask_steps)
    return flat, rows


def fill_logp_old(record: RolloutRecord, model) -> None:
    """Store per-token log densities of the stored transitions under the
    rollout policy, covering the whole selection."""
    assert record.selection is not None
    with T.no_grad():
        x_t, x_prev, ts = record.training_stacks()
        z = conditioning_stacks(record, model)
        logp, _ = model.step_terms(x_t, x_prev, ts, z)
        record.logp_old = logp.numpy().copy()


def rollout_group(model, class_id: int, *, group_size: int, s_trajectories: int,
                  n_mask_sel: int, n_t_sel: int, reward_model: RewardModel,
                  rollout_seed: int, cfg_scale: float = 1.0,
                  resample_post_hoc: bool = True,
                  fill_old: bool = True) -> list[RolloutRecord]:
    """Roll out a full group for one class and finish the records.

    Every member gets its own mask permutation, its own named noise
    streams, and its own step selection. Rewards are computed on the
    canonical final grid only; advantages are group-normalized.

    ``fill_old=False`` defers the density fill to the first objective
    evaluation (bitwise identical when no update happens in between, which
    is the training loop's situation; the pass here would be redundant).
    """
    if group_size < 2:
        raise DomainError(f"group size must be at least 2, got {group_size}")
    spec = model.spec
    records: list[RolloutRecord] = []
    for i in range(group_size):
        schedule = MaskSchedule.build(spec.n, spec.k_steps,
                                      stream(rollout_seed, "member", i, "mask"))
        rec = model.generate(class_id, schedule, s_trajectories, rollout_seed,
                             member=i, cfg_scale=cfg_scale,
                             resample_post_hoc=resample_post_hoc)
        rec.selection = select_steps(spec.k_steps, spec.t_steps, n_mask_sel, n_t_sel,
                                     stream(rollout_seed, "member", i, "sel"))
        if fill_old:
            fill_logp_old(rec, model)
        records.append(rec)

    rewards = np.array([reward_model(rec.final_tokens, class_id) for rec in records])
    advantages = group_advantages(rewards)
    for rec, r, a in zip(records, rewards, advantages):
        rec.reward = float(r)
        rec.advantage = float(a)
    return records


# ---------------------------------------------------------------------------
# debug dumps (also the fixture format for offline objective checks)


def dump_group(records: list[RolloutRecord], path) -> None:
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {"dump_version": DUMP_VERSION, "records": []}
    for i, rec in enumerate(records):
        info = {
            "class_id": rec.class_id, "member": rec.member, "rng_tag": rec.rng_tag,
            "reward": rec.reward, "advantage": rec.advantage,
            "mask_steps": list(rec.selection.mask_steps) if rec.selection else None,
            "t_steps": list(rec.selection.t_steps) if rec.selection else None,
            "schedule": [s.tolist() for s in rec.schedule.steps],
            "has_z_uncond": any(st.z_uncond is not None for st in rec.steps),
        }
        meta["records"].append(info)
        arrays[f"r{i}.final"] = rec.final_tokens
        for k, st in enumerate(rec.steps, start=1):
            arrays[f"r{i}.k{k}.z"] = st.z
            arrays[f"r{i}.k{k}.states"] = st.states
            if st.z_uncond is not None:
                arrays[f"r{i}.k{k}.z_uncond"] = st.z_uncond
        if rec.logp_old is not None:
            arrays[f"r{i}.logp_old"] = rec.logp_old
    save_arrays(path, arrays, meta=meta)


def load_group(path) -> list[RolloutRecord]:
    arrays, meta, _ = load_arrays(path)
    if meta.get("dump_version") != DUMP_VERSION:
        raise IOError(f"unsupported rollout dump version in {path}")
    records = []
    for i, info in enumerate(meta["records"]):
        sched_steps = tuple(np.asarray(s, dtype=np.int64) for s in info["schedule"])
        schedule = MaskSchedule(n=sum(len(s) for s in sched_steps), steps=sched_steps)
        steps = []
        for k in range(1, schedule.k_steps + 1):
            cand = schedule.candidates(k)
            steps.append(StepRollout(
                candidates=cand,
                accepted=schedule.steps[k - 1],
                z=arrays[f"r{i}.k{k}.z"],
                z_uncond=arrays.get(f"r{i}.k{k}.z_uncond"),
                states=arrays[f"r{i}.k{k}.states"],
            ))
        selection = None
        if info["mask_steps"] is not None:
            selection = StepSelection(mask_steps=tuple(info["mask_steps"]),
                                      t_steps=tuple(info["t_steps"]))
        rec = RolloutRecord(
            class_id=int(info["class_id"]), member=int(info["member"]),
            schedule=schedule, steps=steps, final_tokens=arrays[f"r{i}.final"],
            rng_tag=info["rng_tag"], reward=info["reward"], advantage=info["advantage"],
            selection=selection, logp_old=arrays.get(f"r{i}.logp_old"),
        )
        records.append(rec)
    return records
