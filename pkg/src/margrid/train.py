"""Training loops: denoising pretraining, policy post-training, evaluation,
ablations, and the gradient variance probe.

Both loops share the same conventions: every source of randomness is a
named stream derived from the run seed, metrics go to a deterministic
JSONL stream (timings to a sidecar), and checkpoints are written through
the atomic container writer. A non-finite loss aborts the run, leaves the
last good checkpoint in place, and writes a diagnostic file.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
import warnings

import numpy as np

from . import tensor as T
from .checkpoint import load_arrays, save_arrays
from .config import TrainConfig
from .data import build_templates, load_templates, sample_grid
from .loss import (ObjectiveKnobs, assemble_objective, baseline_objective,
                   flat_grad, grad_norm, grad_variance)
from .metrics import MetricsWriter
from .model import MARModel, ModelSpec
from .optim import Adam, clip_grad_norm
from .rng import derive_seed, stream
from .rollout import RewardModel, dump_group, rollout_group
from .schedules import MaskSchedule
from .tensor import NumericError


class TrainingAborted(NumericError):
    """Raised when a run hits a non-finite loss and stops."""


def build_model(cfg: TrainConfig, seed: int | None = None) -> MARModel:
    root = cfg.seed if seed is None else seed
    return MARModel(cfg.model_spec(), stream(root, "init"))


def get_templates(cfg: TrainConfig) -> np.ndarray:
    spec = cfg.model_spec()
    if (cfg.num_classes, spec.n, cfg.channels) == (16, 64, 8):
        return load_templates()
    return build_templates(cfg.num_classes, cfg.grid_h, cfg.grid_w, cfg.channels)


def build_reward(cfg: TrainConfig, templates: np.ndarray) -> RewardModel:
    return RewardModel(templates=templates, kind=cfg.reward_kind,
                       sigma2=cfg.reward_sigma2, count_threshold=cfg.count_threshold,
                       mix=cfg.composite_mix)


def save_model(model: MARModel, path: str, fingerprint: str = "", extra: dict | None = None):
    meta = {"model_spec": model.spec.to_dict(),
            "noise_betas": model.noise.betas.tolist()}
    meta.update(extra or {})
    save_arrays(path, model.state(), meta=meta, fingerprint=fingerprint)


def load_model(path: str) -> tuple[MARModel, dict, str]:
    arrays, meta, fingerprint = load_arrays(path)
    spec = ModelSpec(**meta["model_spec"])
    model = MARModel(spec, stream(0, "init"))
    model.load_state(arrays)
    return model, meta, fingerprint


def _abort(out_dir: str, phase: str, iteration: int, message: str):
    try:
        with open(os.path.join(out_dir, "abort.json"), "w", encoding="utf-8") as fh:
            json.dump({"phase": phase, "iteration": iteration, "message": message}, fh)
            fh.write("\n")
    except OSError:
        pass
    raise TrainingAborted(f"{phase} iteration {iteration}: {message}")


# ---------------------------------------------------------------------------
# pretraining


def _pretrain_batch(cfg: TrainConfig, templates: np.ndarray, rng: np.random.Generator):
    spec = cfg.model_spec()
    tokens = np.empty((cfg.pretrain_batch, spec.n, cfg.channels))
    known = np.zeros((cfg.pretrain_batch, spec.n), dtype=bool)
    ids = rng.integers(0, cfg.num_classes, size=cfg.pretrain_batch)
    for b in range(cfg.pretrain_batch):
        tokens[b] = sample_grid(templates, int(ids[b]), rng, cfg.data_noise)
        k = int(rng.integers(1, cfg.k_steps + 1))
        sched = MaskSchedule.build(spec.n, cfg.k_steps, rng)
        known[b] = sched.known_before(k)
    return tokens, known, ids


def pretrain_eval_loss(model: MARModel, cfg: TrainConfig, templates: np.ndarray,
                       batches: int = 4) -> float:
    """Denoising loss on held-out draws; fully restreamed, so deterministic
    for a given set of parameters."""
    total = 0.0
    for b in range(batches):
        rng = stream(cfg.seed, "pretrain", "heldout", b)
        tokens, known, ids = _pretrain_batch(cfg, templates, rng)
        with T.no_grad():
            loss = model.pretrain_loss(tokens, known, ids, rng, cond_dropout=0.0)
        total += loss.item()
    return total / batches


def pretrain(cfg: TrainConfig, out_dir: str, quiet: bool = False) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    templates = get_templates(cfg)
    model = build_model(cfg)
    opt = Adam(model.params(), cfg.lr_pretrain)
    data_rng = stream(cfg.seed, "pretrain", "data")
    ckpt_path = os.path.join(out_dir, "model.ckpt")
    fingerprint = cfg.fingerprint()

    first_heldout = pretrain_eval_loss(model, cfg, templates)
    summary = {"heldout_before": first_heldout}
    with MetricsWriter(os.path.join(out_dir, "pretrain_metrics.jsonl"),
                       os.path.join(out_dir, "pretrain_timings.jsonl")) as writer:
        for step in range(1, cfg.pretrain_steps + 1):
            t0 = time.perf_counter()
            tokens, known, ids = _pretrain_batch(cfg, templates, data_rng)
            try:
                loss = model.pretrain_loss(tokens, known, ids, data_rng,
                                           cond_dropout=cfg.cond_dropout)
                loss_value = loss.item()
                if not np.isfinite(loss_value):
                    _abort(out_dir, "pretrain", step, f"non-finite loss {loss_value}")
                T.backward(loss)
            except NumericError as exc:
                _abort(out_dir, "pretrain", step, str(exc))
            gnorm = clip_grad_norm(model.params(), cfg.grad_clip)
            opt.step()
            opt.zero_grad()
            T.clear_tape()

            record = {"iteration": step, "loss": loss_value, "grad_norm": gnorm}
            if step % cfg.eval_every == 0 or step == cfg.pretrain_steps:
                record["heldout_loss"] = pretrain_eval_loss(model, cfg, templates)
            writer.write(record, wall_time_s=time.perf_counter() - t0)
            if step % cfg.ckpt_every == 0 or step == cfg.pretrain_steps:
                save_model(model, ckpt_path, fingerprint, {"phase": "pretrain", "step": step})
            if not quiet and (step % 200 == 0 or step == 1):
                print(f"[pretrain] step {step} loss {loss_value:.4f}")

    summary["heldout_after"] = pretrain_eval_loss(model, cfg, templates)
    summary["checkpoint"] = ckpt_path
    if not quiet:
        print(f"[pretrain] held-out loss {first_heldout:.4f} -> {summary['heldout_after']:.4f}")
    return summary


# ---------------------------------------------------------------------------
# evaluation


def eval_policy(model: MARModel, cfg: TrainConfig, reward_model: RewardModel,
                eval_tag: str = "eval", samples_per_class: int | None = None) -> dict:
    """Reward statistics on fresh named streams, plus a diversity proxy.

    Deterministic for a given (parameters, seed, tag): every sample draws
    from its own stream keyed by class and replica index.
    """
    spec = model.spec
    n_per = samples_per_class or cfg.eval_samples
    rewards = []
    per_class = []
    diversity = []
    for c in range(cfg.num_classes):
        finals = []
        class_rewards = []
        for j in range(n_per):
            sched = MaskSchedule.build(
                spec.n, spec.k_steps, stream(cfg.seed, eval_tag, "mask", c, j))
            rec = model.generate(c, sched, 1, derive_seed(cfg.seed, eval_tag, c, j),
                                 cfg_scale=cfg.cfg_scale)
            finals.append(rec.final_tokens)
            class_rewards.append(reward_model(rec.final_tokens, c))
        rewards.extend(class_rewards)
        per_class.append(float(np.mean(class_rewards)))
        if n_per > 1:
            dists = [np.linalg.norm(a - b) for i, a in enumerate(finals)
                     for b in finals[i + 1:]]
            diversity.append(float(np.mean(dists)))
    return {
        "mean_reward": float(np.mean(rewards)),
        "reward_std": float(np.std(rewards)),
        "per_class": per_class,
        "diversity": float(np.mean(diversity)) if diversity else 0.0,
    }


# ---------------------------------------------------------------------------
# policy post-training


def _knobs(cfg: TrainConfig) -> ObjectiveKnobs:
    return ObjectiveKnobs(beta=cfg.beta, clip_eps=cfg.clip_eps, k_percent=cfg.k_percent,
                          tau=cfg.tau, ratio_clamp=cfg.ratio_clamp,
                          ratio_dim_normalize=cfg.ratio_dim_normalize,
                          use_consistency=(cfg.variant == "full"))


def rl_iteration_records(model: MARModel, cfg: TrainConfig, reward_model: RewardModel,
                         iteration: int, s_trajectories: int):
    """Roll out all prompt groups for one iteration under the current policy.

    The stored-density fill is deferred to the objective evaluation; the
    policy does not change in between, so the values are identical and the
    extra likelihood pass is saved.
    """
    records = []
    for p in range(cfg.prompts_per_step):
        c = int(stream(cfg.seed, "rl", "prompt", iteration, p).integers(0, cfg.num_classes))
        records.extend(rollout_group(
            model, c, group_size=cfg.group_size, s_trajectories=s_trajectories,
            n_mask_sel=cfg.mask_sel, n_t_sel=cfg.t_sel, reward_model=reward_model,
            rollout_seed=derive_seed(cfg.seed, "rl", "rollout", iteration, p),
            cfg_scale=cfg.cfg_scale, resample_post_hoc=cfg.mte_resample_post_hoc,
            fill_old=False))
    return records


def rl_train(cfg: TrainConfig, out_dir: str, base_checkpoint: str,
             quiet: bool = False) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    model, _, base_fp = load_model(base_checkpoint)
    if base_fp and base_fp != cfg.fingerprint() and not quiet:
        print(f"[train] note: checkpoint fingerprint {base_fp} differs from "
              f"config fingerprint {cfg.fingerprint()}")
    ref_model, _, _ = load_model(base_checkpoint)
    ref_model.set_trainable(ar=False, head=False)
    model.set_trainable(ar=not cfg.freeze_ar, head=not cfg.freeze_head)

    templates = get_templates(cfg)
    reward_model = build_reward(cfg, templates)
    knobs = _knobs(cfg)
    objective_fn = assemble_objective if cfg.variant == "full" else baseline_objective
    s_traj = 1 if cfg.variant == "baseline" else cfg.s_trajectories
    opt = Adam(model.params(), cfg.lr_rl)
    ckpt_path = os.path.join(out_dir, "model.ckpt")
    fingerprint = cfg.fingerprint()

    pre_eval = eval_policy(model, cfg, reward_model, eval_tag="heldout")
    summary = {"heldout_before": pre_eval["mean_reward"], "heldout_curve": []}
    save_model(model, ckpt_path, fingerprint, {"phase": "rl", "iteration": 0})

    with MetricsWriter(os.path.join(out_dir, "metrics.jsonl"),
                       os.path.join(out_dir, "timings.jsonl")) as writer:
        for it in range(1, cfg.rl_iters + 1):
            t0 = time.perf_counter()
            try:
                records = rl_iteration_records(model, cfg, reward_model, it, s_traj)
                if cfg.dump_rollouts:
                    dump_group(records, os.path.join(out_dir, f"rollouts_{it:05d}.bin"))
                objective, stats = objective_fn(model, ref_model, records, knobs)
                j_value = objective.item()
                if not np.isfinite(j_value):
                    _abort(out_dir, "rl", it, f"non-finite objective {j_value}")
                T.backward(T.mul(objective, -1.0))
            except NumericError as exc:
                _abort(out_dir, "rl", it, str(exc))

            params = model.params()
            ar_norm = grad_norm(params, "ar.")
            head_norm = grad_norm(params, "head.")
            pre_clip = clip_grad_norm(params, cfg.grad_clip)
            opt.step()
            opt.zero_grad()
            T.clear_tape()

            record = {
                "iteration": it,
                "mean_reward": float(np.mean([r.reward for r in records])),
                "objective": j_value,
                "kl_mean": stats["kl_mean"],
                "ar_grad_norm": ar_norm,
                "head_grad_norm": head_norm,
                "grad_norm": pre_clip,
                "ratio_dev_max": stats["ratio_dev_max"],
                "ratio_clamp_hits": stats["ratio_clamp_hits"],
                "surrogate_clip_fraction": stats["surrogate_clip_fraction"],
            }
            if cfg.variant == "full":
                record["masked_fraction"] = stats["masked_fraction"]
                record["kappa_fraction"] = stats["kappa_fraction"]
                record["empty_kappa_steps"] = stats["empty_kappa_steps"]
            if it % cfg.eval_every == 0 or it == cfg.rl_iters:
                ev = eval_policy(model, cfg, reward_model, eval_tag="heldout")
                record["heldout_reward"] = ev["mean_reward"]
                summary["heldout_curve"].append((it, ev["mean_reward"]))
            writer.write(record, wall_time_s=time.perf_counter() - t0)
            if it % cfg.ckpt_every == 0 or it == cfg.rl_iters:
                save_model(model, ckpt_path, fingerprint, {"phase": "rl", "iteration": it})
            if not quiet and (it % 25 == 0 or it == 1):
                print(f"[train] iter {it} reward {record['mean_reward']:.4f} "
                      f"objective {j_value:+.5f}")

    post_eval = eval_policy(model, cfg, reward_model, eval_tag="heldout")
    summary["heldout_after"] = post_eval["mean_reward"]
    summary["checkpoint"] = ckpt_path
    if not quiet:
        print(f"[train] held-out reward {summary['heldout_before']:.4f} -> "
              f"{summary['heldout_after']:.4f}")
    return summary


# ---------------------------------------------------------------------------
# gradient variance probe


def gradient_variance_probe(base_checkpoint: str, cfg: TrainConfig,
                            s_values: tuple[int, ...] = (1, 4), repeats: int = 20,
                            probe_seed: int = 0, quiet: bool = True) -> dict[int, float]:
    """Backbone-gradient variance across repeated matched-prompt rollouts.

    All trajectory counts share rollout streams, so the canonical
    trajectories (and therefore rewards and advantages) are identical
    across the compared settings; only the extra trajectories differ. The
    probe masks every token and disables the consistency gate to isolate
    the effect of averaging over trajectories.
    """
    templates = None
    results: dict[int, float] = {}
    prompt_classes = [int(stream(probe_seed, "probe", "class", p).integers(0, cfg.num_classes))
                      for p in range(cfg.prompts_per_step)]
    knobs = ObjectiveKnobs(beta=cfg.beta, clip_eps=cfg.clip_eps, k_percent=100.0,
                           tau=cfg.tau, ratio_clamp=cfg.ratio_clamp,
                           ratio_dim_normalize=cfg.ratio_dim_normalize,
                           use_consistency=False)
    for s in s_values:
        model, _, _ = load_model(base_checkpoint)
        ref_model, _, _ = load_model(base_checkpoint)
        ref_model.set_trainable(ar=False, head=False)
        model.set_trainable(ar=True, head=not cfg.freeze_head)
        if templates is None:
            templates = get_templates(cfg)
        reward_model = build_reward(cfg, templates)
        grads = []
        for rep in range(repeats):
            records = []
            for p, c in enumerate(prompt_classes):
                records.extend(rollout_group(
                    model, c, group_size=cfg.group_size, s_trajectories=s,
                    n_mask_sel=cfg.mask_sel, n_t_sel=cfg.t_sel,
                    reward_model=reward_model,
                    rollout_seed=derive_seed(probe_seed, "probe", rep, p),
                    cfg_scale=cfg.cfg_scale,
                    resample_post_hoc=cfg.mte_resample_post_hoc,
                    fill_old=False))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                objective, _ = assemble_objective(model, ref_model, records, knobs)
            T.backward(T.mul(objective, -1.0))
            grads.append(flat_grad(model.params(), "ar."))
            for p_t in model.params().values():
                p_t.grad = None
            T.clear_tape()
        results[s] = grad_variance(grads)
        if not quiet:
            print(f"[probe] S={s} ar-grad variance {results[s]:.3e}")
    return results


# ---------------------------------------------------------------------------
# ablations


ABLATION_AXES = {
    "head-mode": ["frozen", "end2end", "head-only"],
    "s": [1, 2, 3, 4],
    "k_percent": [0.0, 10.0, 30.0, 100.0],
    "tau": [-0.05, 0.0, 0.05],
}


def _ablation_config(cfg: TrainConfig, axis: str, value) -> TrainConfig:
    if axis == "head-mode":
        flags = {"frozen": (False, True), "end2end": (False, False),
                 "head-only": (True, False)}[value]
        return dataclasses.replace(cfg, freeze_ar=flags[0], freeze_head=flags[1])
    if axis == "s":
        return dataclasses.replace(cfg, s_trajectories=int(value))
    if axis == "k_percent":
        return dataclasses.replace(cfg, k_percent=float(value))
    if axis == "tau":
        return dataclasses.replace(cfg, tau=float(value))
    raise ValueError(f"unknown ablation axis {axis!r}")


def run_ablation(cfg: TrainConfig, axis: str, out_dir: str, base_checkpoint: str,
                 quiet: bool = False) -> list[dict]:
    """Matched-seed sweep along one axis; returns one row per setting."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"axis must be one of {sorted(ABLATION_AXES)}, got {axis!r}")
    rows = []
    for value in ABLATION_AXES[axis]:
        sub = os.path.join(out_dir, f"{axis.replace('-', '_')}_{value}")
        run_cfg = _ablation_config(cfg, axis, value)
        t0 = time.perf_counter()
        summary = rl_train(run_cfg, sub, base_checkpoint, quiet=quiet)
        curve = summary["heldout_curve"]
        rows.append({
            "axis": axis, "value": str(value),
            "final_reward": summary["heldout_after"],
            "peak_reward": max(v for _, v in curve) if curve else summary["heldout_after"],
            "heldout_before": summary["heldout_before"],
            "runtime_s": round(time.perf_counter() - t0, 3),
        })
        if not quiet:
            print(f"[ablate] {axis}={value}: final {rows[-1]['final_reward']:.4f} "
                  f"peak {rows[-1]['peak_reward']:.4f}")
    header = "axis,value,heldout_before,final_reward,peak_reward,runtime_s"
    lines = [header] + [
        f"{r['axis']},{r['value']},{r['heldout_before']:.6f},{r['final_reward']:.6f},"
        f"{r['peak_reward']:.6f},{r['runtime_s']}" for r in rows]
    with open(os.path.join(out_dir, "ablation.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return rows
