"""Finite-difference verification of backward rules.

Two layers: per-primitive checks that exercise every differentiable op in
isolation, and an end-to-end check of the post-training objective on a
miniature instance. Both compare reverse-mode gradients against central
differences with step h and report the worst relative error, guarded
against vanishing denominators.

Random inputs are drawn from continuous distributions and, where an op
has kinks (clip boundaries, min/max ties), the generators keep inputs a
safe margin away so the difference stencil never straddles one.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .loss import ObjectiveKnobs, assemble_objective
from .nn import AttentionBlock, layer_norm
from .rng import derive_seed, stream
from .rollout import rollout_group
from .train import build_model, build_reward, get_templates

DEFAULT_H = 1e-5
# Error denominator is floored at this scale. A coordinate whose true
# gradient sits far below the tensor's typical scale measures only fp64
# roundoff in the stencil (about eps*|f|/2h, ~1e-11 here), so pure
# relative error would be meaningless for it; flooring turns the check
# into |fd - an| <= tol * (guard + max(|fd|, |an|)), absolute near zero
# and relative elsewhere.
DENOM_GUARD = 1e-3


def fd_max_err(f, params: list[T.Tensor], h: float = DEFAULT_H,
               max_coords: int = 12, n_directions: int = 2,
               rng: np.random.Generator | None = None) -> float:
    """Worst relative error between reverse-mode and central differences.

    Checks a random subset of coordinates per parameter plus a few random
    global directions. f must rebuild its graph from the params on every
    call and return a scalar Tensor.
    """
    rng = rng or np.random.default_rng(0)
    T.clear_tape()
    for p in params:
        p.grad = None
    loss = f()
    T.backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros(p.shape)
                for p in params]
    for p in params:
        p.grad = None
    T.clear_tape()

    def value() -> float:
        with T.no_grad():
            return f().item()

    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        an_flat = an.reshape(-1)
        count = min(max_coords, flat.size)
        coords = rng.choice(flat.size, size=count, replace=False)
        for i in coords:
            keep = flat[i]
            flat[i] = keep + h
            fp = value()
            flat[i] = keep - h
            fm = value()
            flat[i] = keep
            fd = (fp - fm) / (2.0 * h)
            err = abs(fd - an_flat[i]) / (DENOM_GUARD + max(abs(fd), abs(an_flat[i])))
            worst = max(worst, err)
    for _ in range(n_directions):
        vs = [rng.standard_normal(p.shape) for p in params]
        norm = np.sqrt(sum(float(np.sum(v * v)) for v in vs))
        vs = [v / norm for v in vs]
        for p, v in zip(params, vs):
            p.data += h * v
        fp = value()
        for p, v in zip(params, vs):
            p.data -= 2.0 * h * v
        fm = value()
        for p, v in zip(params, vs):
            p.data += h * v
        fd = (fp - fm) / (2.0 * h)
        an_dir = sum(float(np.sum(a * v)) for a, v in zip(analytic, vs))
        worst = max(worst, abs(fd - an_dir) / (DENOM_GUARD + max(abs(fd), abs(an_dir))))
    return worst


def _param(rng: np.random.Generator, shape, low=-1.0, high=1.0) -> T.Tensor:
    return T.parameter(rng.uniform(low, high, size=shape))


def primitive_cases(seed: int = 0) -> dict:
    """name -> (f, params, rng).

    Builders return a function producing the op's raw output tensor; it is
    contracted to a scalar with a projection drawn once per case, so every
    evaluation of f is the same deterministic function of the params.
    """
    cases = {}

    def add_case(name, build):
        rng = np.random.default_rng(derive_seed(seed, "case", name))
        raw, params = build(rng)
        with T.no_grad():
            out_shape = raw().shape
        proj = rng.standard_normal(out_shape)

        def f(raw=raw, proj=proj):
            return T.tsum(T.mul(raw(), T.constant(proj)))

        cases[name] = (f, params, rng)

    def binary(op):
        def build(rng):
            a = _param(rng, (3, 4))
            b = _param(rng, (3, 4))
            return lambda: op(a, b), [a, b]
        return build

    add_case("add", binary(T.add))
    add_case("sub", binary(T.sub))
    add_case("mul", binary(T.mul))

    def build_div(rng):
        a = _param(rng, (3, 4))
        b = T.parameter(rng.uniform(0.5, 1.5, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4)))
        return lambda: T.div(a, b), [a, b]
    add_case("div", build_div)

    def build_broadcast_binary(rng):
        a = _param(rng, (3, 4))
        b = _param(rng, (4,))
        return lambda: T.add(T.mul(a, b), b), [a, b]
    add_case("broadcast_binary", build_broadcast_binary)

    def gapped_pair(rng, shape):
        a = _param(rng, shape)
        gap = 0.05 + rng.uniform(0.0, 1.0, size=shape)
        b = T.parameter(a.data + rng.choice([-1.0, 1.0], size=shape) * gap)
        return a, b

    def build_minimum(rng):
        a, b = gapped_pair(rng, (3, 4))
        return lambda: T.minimum(a, b), [a, b]
    add_case("minimum", build_minimum)

    def build_maximum(rng):
        a, b = gapped_pair(rng, (3, 4))
        return lambda: T.maximum(a, b), [a, b]
    add_case("maximum", build_maximum)

    def build_clip(rng):
        x = _param(rng, (4, 5))
        x.data[np.abs(np.abs(x.data) - 0.5) < 1e-3] += 0.01
        return lambda: T.clip(x, -0.5, 0.5), [x]
    add_case("clip", build_clip)

    def unary(op, low=-1.0, high=1.0):
        def build(rng):
            x = _param(rng, (3, 4), low, high)
            return lambda: op(x), [x]
        return build

    add_case("neg", unary(T.neg))
    add_case("exp", unary(T.exp))
    add_case("log", unary(T.log, 0.5, 2.0))
    add_case("sqrt", unary(T.sqrt, 0.5, 2.0))
    add_case("square", unary(T.square))
    add_case("gelu", unary(lambda x: T.gelu(x), -2.0, 2.0))
    add_case("tanh", unary(T.tanh, -2.0, 2.0))

    def build_matmul(rng):
        a = _param(rng, (3, 4))
        b = _param(rng, (4, 5))
        return lambda: T.matmul(a, b), [a, b]
    add_case("matmul", build_matmul)

    def build_matmul_batched(rng):
        a = _param(rng, (2, 3, 4))
        b = _param(rng, (4, 5))
        return lambda: T.matmul(a, b), [a, b]
    add_case("matmul_batched", build_matmul_batched)

    def build_affine(rng):
        x = _param(rng, (2, 3, 4))
        w = _param(rng, (4, 5))
        b = _param(rng, (5,))
        return lambda: T.affine(x, w, b), [x, w, b]
    add_case("affine", build_affine)

    def build_sum(rng):
        x = _param(rng, (2, 3, 4))
        return lambda: T.tsum(x, axis=1), [x]
    add_case("tsum_axis", build_sum)

    def build_mean(rng):
        x = _param(rng, (2, 3, 4))
        return lambda: T.tmean(x, axis=-1, keepdims=True), [x]
    add_case("tmean_keepdims", build_mean)

    def build_tmax(rng):
        x = _param(rng, (4, 6))
        return lambda: T.tmax(x, axis=1)[0], [x]
    add_case("tmax", build_tmax)

    def build_tstd(rng):
        x = _param(rng, (3, 8))
        return lambda: T.tstd(x, axis=1), [x]
    add_case("tstd", build_tstd)

    def build_reshape(rng):
        x = _param(rng, (3, 4))
        return lambda: T.reshape(x, (2, 6)), [x]
    add_case("reshape", build_reshape)

    def build_transpose(rng):
        x = _param(rng, (2, 3, 4))
        return lambda: T.transpose(x, (2, 0, 1)), [x]
    add_case("transpose", build_transpose)

    def build_broadcast_to(rng):
        x = _param(rng, (3, 1))
        return lambda: T.broadcast_to(x, (3, 4)), [x]
    add_case("broadcast_to", build_broadcast_to)

    def build_concat(rng):
        a = _param(rng, (3, 2))
        b = _param(rng, (3, 4))
        return lambda: T.concat([a, b], axis=1), [a, b]
    add_case("concat", build_concat)

    def build_take_rows(rng):
        x = _param(rng, (5, 3))
        idx = np.array([0, 2, 2, 4])
        return lambda: T.take_rows(x, idx), [x]
    add_case("take_rows_repeated", build_take_rows)

    def build_softmax(rng):
        x = _param(rng, (3, 5), -2.0, 2.0)
        return lambda: T.softmax(x, axis=-1), [x]
    add_case("softmax", build_softmax)

    def build_layer_norm(rng):
        x = _param(rng, (3, 6))
        gamma = T.parameter(rng.uniform(0.5, 1.5, size=(6,)))
        beta = _param(rng, (6,))
        return lambda: layer_norm(x, gamma, beta), [x, gamma, beta]
    add_case("layer_norm", build_layer_norm)

    def build_attention(rng):
        block = AttentionBlock(8, 2, rng)
        x = _param(rng, (2, 4, 8))
        allowed = rng.uniform(size=(2, 1, 4, 4)) < 0.7
        allowed[..., np.arange(4), np.arange(4)] = True
        mask = T.constant(np.where(allowed, 0.0, -1e30))
        params = [x] + list(block.params("blk.").values())
        return lambda: block(x, mask), params
    add_case("attention_block", build_attention)

    return cases


def check_primitives(seed: int = 0, h: float = DEFAULT_H) -> dict[str, float]:
    report = {}
    for name, (f, params, rng) in primitive_cases(seed).items():
        report[name] = fd_max_err(f, params, h=h, rng=rng)
    return report


def micro_config(seed: int = 0) -> TrainConfig:
    """Tiny instance for the end-to-end objective check."""
    return TrainConfig(
        grid_h=2, grid_w=2, channels=3, k_steps=2, t_steps=3,
        width=16, blocks=1, heads=2, head_hidden=24, temb_dim=8,
        num_classes=4, group_size=2, prompts_per_step=1, s_trajectories=2,
        n_mask_sel=2, n_t_sel=2, k_percent=50.0, clip_eps=0.5, seed=seed)


def check_objective(seed: int = 1, h: float = DEFAULT_H,
                    max_coords: int = 6, n_directions: int = 3) -> float:
    """FD check of the full objective on the miniature instance.

    The policy is nudged away from the rollout parameters so ratios sit
    strictly inside the clip interval rather than exactly at 1, and the
    clip range itself is widened to keep the stencil away from kinks.
    """
    cfg = micro_config(seed)
    model = build_model(cfg)
    ref_model = build_model(cfg, seed=cfg.seed + 1)
    ref_model.set_trainable(ar=False, head=False)
    templates = get_templates(cfg)
    reward_model = build_reward(cfg, templates)
    records = rollout_group(
        model, class_id=1, group_size=cfg.group_size,
        s_trajectories=cfg.s_trajectories, n_mask_sel=cfg.mask_sel,
        n_t_sel=cfg.t_sel, reward_model=reward_model,
        rollout_seed=derive_seed(cfg.seed, "gradcheck", "rollout"))
    jiggle = stream(cfg.seed, "gradcheck", "jiggle")
    params = model.params()
    for p in params.values():
        p.data += 1e-3 * jiggle.standard_normal(p.shape)
    knobs = ObjectiveKnobs(beta=cfg.beta, clip_eps=cfg.clip_eps,
                           k_percent=cfg.k_percent, tau=cfg.tau,
                           ratio_clamp=cfg.ratio_clamp,
                           ratio_dim_normalize=cfg.ratio_dim_normalize,
                           use_consistency=True)

    def f():
        return assemble_objective(model, ref_model, records, knobs)[0]

    rng = np.random.default_rng(derive_seed(cfg.seed, "gradcheck", "coords"))
    return fd_max_err(f, list(params.values()), h=h, max_coords=max_coords,
                      n_directions=n_directions, rng=rng)


def run_all(seed: int = 1, tol: float = 1e-5, quiet: bool = False) -> tuple[dict, float, bool]:
    report = check_primitives(seed)
    obj_err = check_objective(seed)
    ok = max(report.values()) < tol and obj_err < tol
    if not quiet:
        width = max(len(k) for k in report)
        for name in sorted(report):
            flag = "" if report[name] < tol else "  <-- FAIL"
            print(f"  {name:<{width}}  {report[name]:.3e}{flag}")
        flag = "" if obj_err < tol else "  <-- FAIL"
        print(f"  {'objective':<{width}}  {obj_err:.3e}{flag}")
        print(f"gradcheck {'passed' if ok else 'FAILED'} (tol {tol:g})")
    return report, obj_err, ok
