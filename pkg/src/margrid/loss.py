"""Group-relative policy objective over recorded rollouts.

The update treats each diffusion transition of each predicted token as an
action. For a selected (AR step, diffusion timestep) pair the per-token
clipped surrogate is built from the likelihood ratio between the current
parameters and the rollout snapshot; per-token weights come from two masks
computed on rollout data only:

  * an uncertainty mask marking the top fraction of tokens by disagreement
    across diffusion trajectories; masked tokens average the surrogate over
    all trajectories, the rest use the canonical trajectory alone;
  * a consistency gate keeping tokens whose prediction moved closer (in
    cosine) to the final grid relative to the previous AR step.

A divergence penalty against a frozen reference policy is applied to every
token regardless of the masks. The returned scalar is the objective to
maximize.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .likelihood import importance_ratio, kl_penalty_per_token
from .rollout import RolloutRecord, conditioning_flat
from .tensor import DomainError, Tensor


@dataclass(frozen=True)
class ObjectiveKnobs:
    beta: float = 0.01
    clip_eps: float = 1e-4
    k_percent: float = 30.0
    tau: float = 0.0
    ratio_clamp: float = 20.0
    ratio_dim_normalize: bool = True
    use_consistency: bool = True


def step_loss(ratio: Tensor, advantage: float | np.ndarray, clip_eps: float) -> Tensor:
    """Clipped surrogate per element: min(r*A, clip(r, 1-eps, 1+eps)*A).

    ``advantage`` may be a scalar or anything broadcastable against the
    ratio, e.g. one advantage per token.
    """
    if clip_eps <= 0.0:
        raise DomainError(f"clip range must be positive, got {clip_eps}")
    unclipped = T.mul(ratio, advantage)
    clipped = T.mul(T.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps), advantage)
    return T.minimum(unclipped, clipped)


@dataclass
class UncertaintyMap:
    u: np.ndarray
    mask: np.ndarray


def top_fraction_count(n_tokens: int, k_percent: float) -> int:
    """ceil(k_percent * n / 100) with protection against float fuzz."""
    if not (0.0 <= k_percent <= 100.0):
        raise DomainError(f"k_percent must lie in [0, 100], got {k_percent}")
    return min(n_tokens, math.ceil(k_percent * n_tokens / 100.0 - 1e-9))


def uncertainty_map(x0_trajs: np.ndarray, k_percent: float) -> UncertaintyMap:
    """Per-token disagreement across trajectories and its top-k% mask.

    ``x0_trajs`` stacks the final denoised predictions, shape (S, m, d).
    u is the population std across trajectories averaged over channels.
    Ties are broken by ascending token index. With a single trajectory the
    map is identically zero and the mask empty (with a warning).
    """
    s, m, _ = x0_trajs.shape
    if s == 1:
        warnings.warn("uncertainty map needs at least 2 trajectories; returning empty mask")
        return UncertaintyMap(u=np.zeros(m), mask=np.zeros(m, dtype=bool))
    u = x0_trajs.std(axis=0).mean(axis=-1)
    count = top_fraction_count(m, k_percent)
    order = np.lexsort((np.arange(m), -u))
    mask = np.zeros(m, dtype=bool)
    mask[order[:count]] = True
    return UncertaintyMap(u=u, mask=mask)


def token_cosines(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, int]:
    """Rowwise cosine similarity; zero-norm rows score 0 and are counted."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    degenerate = (na == 0.0) | (nb == 0.0)
    denom = np.where(degenerate, 1.0, na * nb)
    sims = np.where(degenerate, 0.0, np.sum(a * b, axis=-1) / denom)
    return sims, int(np.count_nonzero(degenerate))


def consistency_masks(record: RolloutRecord, tau: float
                      ) -> tuple[dict[int, np.ndarray], int]:
    """Per-step gates: keep tokens whose cosine to the final grid improved.

    sim(m) compares the canonical prediction of each candidate token at
    step m with the same token of the final grid; the gate at step m is
    sim(m) - sim(m-1) > tau (strict), with sim(0) defined as 0. Candidate
    sets shrink over steps, so every token at step m also has a similarity
    at step m-1. Returns the gates and the number of zero-norm guards hit.
    """
    sims: dict[int, np.ndarray] = {}
    guards = 0
    for m in range(1, record.schedule.k_steps + 1):
        cand = record.step(m).candidates
        s, g = token_cosines(record.canonical_x0(m), record.final_tokens[cand])
        sims[m] = s
        guards += g
    gates: dict[int, np.ndarray] = {}
    for m in range(1, record.schedule.k_steps + 1):
        cand = record.step(m).candidates
        if m == 1:
            prev = np.zeros(len(cand))
        else:
            prev_cand = record.step(m - 1).candidates
            prev = sims[m - 1][np.searchsorted(prev_cand, cand)]
        gates[m] = (sims[m] - prev) > tau
    return gates, guards


# ---------------------------------------------------------------------------
# objective assembly


def _new_stats(with_masks: bool) -> dict:
    stats = {
        "ratio_clamp_hits": 0, "ratio_dev_sum": 0.0, "ratio_dev_max": 0.0,
        "kl_sum": 0.0, "kl_elements": 0, "surrogate_clip_count": 0,
        "n_elements": 0, "per_record": [],
    }
    if with_masks:
        stats.update({"masked_fraction": 0.0, "kappa_fraction": 0.0,
                      "zero_norm_guards": 0, "empty_kappa_steps": 0})
    return stats


def _track_ratio(stats: dict, ratio: Tensor, kl_tok: Tensor, hits: int,
                 clip_eps: float):
    dev = np.abs(ratio.data - 1.0)
    stats["ratio_clamp_hits"] += hits
    stats["ratio_dev_sum"] += float(dev.sum())
    stats["ratio_dev_max"] = max(stats["ratio_dev_max"], float(dev.max()))
    stats["surrogate_clip_count"] += int((dev > clip_eps).sum())
    stats["n_elements"] += ratio.size
    stats["kl_sum"] += float(kl_tok.data.sum())
    stats["kl_elements"] += kl_tok.size


def _finish_stats(stats: dict, n_mask_entries: int = 0) -> dict:
    n_el = stats.pop("n_elements")
    stats["ratio_dev_mean"] = stats.pop("ratio_dev_sum") / n_el if n_el else 0.0
    stats["surrogate_clip_fraction"] = \
        stats.pop("surrogate_clip_count") / n_el if n_el else 0.0
    kl_n = stats.pop("kl_elements")
    stats["kl_mean"] = stats.pop("kl_sum") / kl_n if kl_n else 0.0
    if n_mask_entries:
        stats["masked_fraction"] /= n_mask_entries
        stats["kappa_fraction"] /= n_mask_entries
    return stats


def _combine_chunks(chunk_sums: list[Tensor], n_records: int) -> Tensor:
    total = chunk_sums[0]
    for s in chunk_sums[1:]:
        total = T.add(total, s)
    return T.mul(total, 1.0 / n_records)


def _record_guard(rec: RolloutRecord):
    if rec.selection is None or rec.advantage is None:
        raise DomainError("record is missing selection or advantage")


# records per stacked likelihood pass. Bigger runs save call overhead but
# push the head's temporaries past cache, which costs more than it saves.
_CHUNK_MAX = 4


def _chunk_records(records: list[RolloutRecord],
                   max_size: int = _CHUNK_MAX) -> list[list[int]]:
    # consecutive runs sharing selected timesteps, capped at max_size
    chunks: list[list[int]] = []
    for i, rec in enumerate(records):
        if (chunks and len(chunks[-1]) < max_size
                and records[chunks[-1][0]].selection.t_steps == rec.selection.t_steps):
            chunks[-1].append(i)
        else:
            chunks.append([i])
    return chunks


def _per_record_stats(stats: dict, per_token: np.ndarray, w: np.ndarray,
                      counts: list[int]):
    off = 0
    for c in counts:
        stats["per_record"].append(
            float((per_token[:, off:off + c] * w[off:off + c]).sum()))
        off += c


def _chunk_pass(chunk: list[RolloutRecord], model, ref_model, z: Tensor,
                z_ref: Tensor, canonical_only: bool
                ) -> tuple[Tensor, Tensor, np.ndarray]:
    """One stacked likelihood evaluation covering a run of records.

    The records (which share selected timesteps) are concatenated along the
    token axis; ``z``/``z_ref`` hold their conditioning rows under the
    current and reference models in the same order. Returns
    (logp, kl_tok, logp_old). ``canonical_only`` restricts the trajectory
    axis to the canonical one (the baseline objective's view). Records
    without stored densities get them filled here; no update has happened
    since their rollout, so they are bitwise the ones just computed.
    """
    parts = [rec.training_stacks() for rec in chunk]
    ts = parts[0][2]
    x_t = np.concatenate([p[0] for p in parts], axis=2)
    x_prev = np.concatenate([p[1] for p in parts], axis=2)
    if canonical_only:
        x_t, x_prev = x_t[:, 0:1], x_prev[:, 0:1]
    logp, mu_c = model.step_terms(x_t, x_prev, ts, z)
    with T.no_grad():
        _, mu_ref = ref_model.step_terms(x_t[:, 0:1], x_prev[:, 0:1], ts, z_ref)
    kl_tok = kl_penalty_per_token(mu_c, mu_ref.numpy())
    olds = []
    off = 0
    for rec in chunk:
        c = int(rec.candidate_counts().sum())
        old = rec.logp_old
        if old is None:
            old = logp.data[:, :, off:off + c].copy()
            rec.logp_old = old
        elif canonical_only and old.shape[1] > 1:
            old = old[:, 0:1]
        olds.append(old)
        off += c
    return logp, kl_tok, np.concatenate(olds, axis=2)


def assemble_objective(model, ref_model, records: list[RolloutRecord],
                       knobs: ObjectiveKnobs) -> tuple[Tensor, dict]:
    """Full per-token objective over a batch of finished rollout records.

    Averages per-token terms over each step's candidate tokens, uniformly
    over the selected (step, timestep) grid, and over records. Gradients
    flow through the current model's conditioning and noise predictions;
    the reference model and all rollout data are constants. Records sharing
    selected timesteps are evaluated in a single stacked call.
    """
    if not records:
        raise DomainError("no rollout records to assemble")
    for rec in records:
        _record_guard(rec)
    stats = _new_stats(with_masks=True)
    n_mask_entries = 0
    flat, rows = conditioning_flat(records, model)
    with T.no_grad():
        flat_ref, _ = conditioning_flat(records, ref_model)

    chunk_sums = []
    for idx in _chunk_records(records):
        chunk = [records[i] for i in idx]
        chunk_rows = np.concatenate([rows[i] for i in idx])
        z = T.take_rows(flat, chunk_rows)
        with T.no_grad():
            z_ref = T.take_rows(flat_ref, chunk_rows)

        masks, kappas, advs, weights, counts = [], [], [], [], []
        for rec in chunk:
            sel = rec.selection
            if knobs.use_consistency:
                gates, guards = consistency_masks(rec, knobs.tau)
                stats["zero_norm_guards"] += guards
            else:
                gates = {m: np.ones(len(rec.step(m).candidates), dtype=bool)
                         for m in sel.mask_steps}
            for m in sel.mask_steps:
                umap = uncertainty_map(rec.step(m).states[:, 0], knobs.k_percent)
                kappa = gates[m]
                if not kappa.any():
                    stats["empty_kappa_steps"] += 1
                stats["masked_fraction"] += float(umap.mask.mean())
                stats["kappa_fraction"] += float(kappa.mean())
                n_mask_entries += 1
                masks.append(umap.mask)
                kappas.append(kappa)
            cnt = rec.candidate_counts()
            counts.append(int(cnt.sum()))
            advs.append(np.full(counts[-1], rec.advantage))
            # weighted token sum == per-step candidate means, uniformly
            # over the record's (step, timestep) grid
            weights.append(np.repeat(1.0 / cnt, cnt)
                           / (len(sel.mask_steps) * len(sel.t_steps)))
        m_mask = T.constant(np.concatenate(masks).astype(np.float64))
        k_mask = T.constant(np.concatenate(kappas).astype(np.float64))
        adv = np.concatenate(advs)
        w = T.constant(np.concatenate(weights))

        d = chunk[0].final_tokens.shape[1]
        scale = (1.0 / d) if knobs.ratio_dim_normalize else 1.0
        logp, kl_tok, old = _chunk_pass(chunk, model, ref_model, z, z_ref,
                                        canonical_only=False)
        ratio, hits = importance_ratio(T.mul(logp, scale), old * scale,
                                       clamp=knobs.ratio_clamp)
        losses = step_loss(ratio, adv, knobs.clip_eps)            # (Q, S, C)
        q, _, c_total = losses.shape
        mean_s = T.tmean(losses, axis=1)                          # (Q, C)
        canon = T.reshape(T.take_rows(losses, np.array([0]), axis=1), (q, c_total))
        mix = T.add(T.mul(m_mask, mean_s), T.mul(T.sub(1.0, m_mask), canon))
        per_token = T.sub(T.mul(k_mask, mix), T.mul(kl_tok, knobs.beta))
        chunk_sums.append(T.tsum(T.mul(per_token, w)))
        _track_ratio(stats, ratio, kl_tok, hits, knobs.clip_eps)
        _per_record_stats(stats, per_token.data, w.data, counts)

    objective = _combine_chunks(chunk_sums, len(records))
    return objective, _finish_stats(stats, n_mask_entries)


def baseline_objective(model, ref_model, records: list[RolloutRecord],
                       knobs: ObjectiveKnobs) -> tuple[Tensor, dict]:
    """Plain subsampled clipped-surrogate objective, canonical trajectory only.

    No uncertainty averaging and no consistency gating; otherwise the same
    selection, ratio construction, divergence penalty, and averaging as the
    full objective. With one recorded trajectory, zero top-k fraction, and
    the gate disabled, ``assemble_objective`` reduces to this exactly.
    """
    if not records:
        raise DomainError("no rollout records to assemble")
    for rec in records:
        _record_guard(rec)
    stats = _new_stats(with_masks=False)
    flat, rows = conditioning_flat(records, model)
    with T.no_grad():
        flat_ref, _ = conditioning_flat(records, ref_model)

    chunk_sums = []
    for idx in _chunk_records(records):
        chunk = [records[i] for i in idx]
        chunk_rows = np.concatenate([rows[i] for i in idx])
        z = T.take_rows(flat, chunk_rows)
        with T.no_grad():
            z_ref = T.take_rows(flat_ref, chunk_rows)

        advs, weights, counts = [], [], []
        for rec in chunk:
            sel = rec.selection
            cnt = rec.candidate_counts()
            counts.append(int(cnt.sum()))
            advs.append(np.full(counts[-1], rec.advantage))
            weights.append(np.repeat(1.0 / cnt, cnt)
                           / (len(sel.mask_steps) * len(sel.t_steps)))
        adv = np.concatenate(advs)
        w = T.constant(np.concatenate(weights))

        d = chunk[0].final_tokens.shape[1]
        scale = (1.0 / d) if knobs.ratio_dim_normalize else 1.0
        logp, kl_tok, old = _chunk_pass(chunk, model, ref_model, z, z_ref,
                                        canonical_only=True)
        ratio, hits = importance_ratio(T.mul(logp, scale), old * scale,
                                       clamp=knobs.ratio_clamp)
        losses = step_loss(ratio, adv, knobs.clip_eps)            # (Q, 1, C)
        q, _, c_total = losses.shape
        canon = T.reshape(T.take_rows(losses, np.array([0]), axis=1), (q, c_total))
        per_token = T.sub(canon, T.mul(kl_tok, knobs.beta))
        chunk_sums.append(T.tsum(T.mul(per_token, w)))
        _track_ratio(stats, ratio, kl_tok, hits, knobs.clip_eps)
        _per_record_stats(stats, per_token.data, w.data, counts)

    objective = _combine_chunks(chunk_sums, len(records))
    return objective, _finish_stats(stats)


# ---------------------------------------------------------------------------
# gradient bookkeeping


def flat_grad(params: dict[str, Tensor], prefix: str | None = None) -> np.ndarray:
    """Concatenate gradients in sorted name order; absent grads read as zero."""
    pieces = []
    for name in sorted(params):
        if prefix is not None and not name.startswith(prefix):
            continue
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        pieces.append(np.asarray(g, dtype=np.float64).reshape(-1))
    if not pieces:
        return np.zeros(0)
    return np.concatenate(pieces)


def grad_norm(params: dict[str, Tensor], prefix: str | None = None) -> float:
    return float(np.linalg.norm(flat_grad(params, prefix)))


def grad_variance(samples: list[np.ndarray]) -> float:
    """Mean over components of the population variance across repeats.

    For two samples g and -g this equals mean(g^2), i.e. ||g||^2 / dim.
    """
    if len(samples) < 2:
        raise DomainError("variance needs at least 2 gradient samples")
    stacked = np.stack(samples, axis=0)
    return float(stacked.var(axis=0).mean())
