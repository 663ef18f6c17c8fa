"""Run configuration: defaults, file parsing, overrides, fingerprinting.

Config files are plain ``key = value`` lines (``#`` comments allowed).
Command-line ``--set key=value`` pairs override file values, and both
override the defaults below. The fingerprint is a stable hash of every
field and is embedded in checkpoints and metrics so artifacts can be
matched to the configuration that produced them.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass

from .model import ModelSpec


class UsageError(Exception):
    """Bad invocation: unknown key, malformed value, missing input."""


OUTPUT_ROOT_ENV = "MARGRID_OUTPUT_ROOT"


@dataclass
class TrainConfig:
    # model geometry
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

    # data and reward
    data_noise: float = 0.25
    reward_kind: str = "pattern"
    reward_sigma2: float = 2.0
    count_threshold: float = 0.0
    composite_mix: float = 0.5

    # pretraining
    pretrain_steps: int = 2000
    pretrain_batch: int = 16
    lr_pretrain: float = 1e-3
    cond_dropout: float = 0.1

    # post-training
    rl_iters: int = 200
    group_size: int = 4
    prompts_per_step: int = 3
    s_trajectories: int = 3
    n_mask_sel: int = 12
    n_t_sel: int = 10
    beta: float = 0.01
    clip_eps: float = 1e-4
    k_percent: float = 30.0
    tau: float = 0.0
    ratio_clamp: float = 20.0
    ratio_dim_normalize: bool = True
    lr_rl: float = 1e-5
    grad_clip: float = 1.0
    freeze_head: bool = True
    freeze_ar: bool = False
    variant: str = "full"
    mte_resample_post_hoc: bool = True
    cfg_scale: float = 1.0

    # bookkeeping
    seed: int = 0
    eval_every: int = 50
    eval_samples: int = 2
    ckpt_every: int = 25
    dump_rollouts: bool = False

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            grid_h=self.grid_h, grid_w=self.grid_w, channels=self.channels,
            k_steps=self.k_steps, t_steps=self.t_steps, width=self.width,
            blocks=self.blocks, heads=self.heads, head_hidden=self.head_hidden,
            temb_dim=self.temb_dim, num_classes=self.num_classes,
            x0_clamp=self.x0_clamp,
        )

    @property
    def mask_sel(self) -> int:
        return min(self.n_mask_sel, self.k_steps)

    @property
    def t_sel(self) -> int:
        return min(self.n_t_sel, self.t_steps - 1)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def validate(self):
        if self.variant not in ("full", "baseline"):
            raise UsageError(f"variant must be 'full' or 'baseline', got {self.variant!r}")
        if self.reward_kind not in ("pattern", "count", "composite"):
            raise UsageError(f"unknown reward kind {self.reward_kind!r}")
        if self.group_size < 2:
            raise UsageError("group_size must be at least 2")
        if not (0.0 <= self.k_percent <= 100.0):
            raise UsageError("k_percent must lie in [0, 100]")
        if self.t_steps < 2 or self.k_steps < 1:
            raise UsageError("need t_steps >= 2 and k_steps >= 1")
        if self.s_trajectories < 1:
            raise UsageError("s_trajectories must be at least 1")
        if self.freeze_ar and self.freeze_head:
            raise UsageError("cannot freeze both the backbone and the head")


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(name: str, value: str):
    if name not in _FIELDS:
        raise UsageError(f"unknown config key {name!r}")
    target = _FIELDS[name].type
    value = value.strip()
    if target == "bool":
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"cannot parse bool from {value!r} for {name}")
    try:
        if target == "int":
            return int(value)
        if target == "float":
            return float(value)
    except ValueError as exc:
        raise UsageError(f"cannot parse {target} from {value!r} for {name}") from exc
    return value


def parse_config_file(path: str) -> dict:
    """Read ``key = value`` lines into a typed dict of overrides."""
    overrides: dict = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {line.rstrip()!r}")
        key, value = body.split("=", 1)
        overrides[key.strip()] = _coerce(key.strip(), value)
    return overrides


def build_config(file_path: str | None = None, sets: list[str] | None = None) -> TrainConfig:
    """Defaults, then config file, then ``--set key=value`` overrides."""
    values: dict = {}
    if file_path:
        values.update(parse_config_file(file_path))
    for item in sets or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), value)
    cfg = TrainConfig(**values)
    cfg.validate()
    return cfg


def resolve_out_dir(out: str | None, default_name: str) -> str:
    """Output directory: explicit path, else env root + default run name."""
    root = os.environ.get(OUTPUT_ROOT_ENV, ".")
    if out is None:
        return os.path.join(root, default_name)
    if os.path.isabs(out):
        return out
    return os.path.join(root, out)


def save_config(cfg: TrainConfig, path: str):
    lines = [f"{k} = {v}" for k, v in sorted(cfg.to_dict().items())]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
