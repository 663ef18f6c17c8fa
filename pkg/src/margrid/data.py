"""Synthetic class-conditional grid data.

Each class is a fixed smooth template over the grid; training samples are
the template plus small Gaussian perturbations. Templates are generated
once from a committed seed and shipped with the package, so rewards are
stable across machines. ``build_templates`` regenerates them exactly and
serves as the oracle for the shipped asset.
"""

from __future__ import annotations

import importlib.resources

import numpy as np

from .checkpoint import load_arrays, save_arrays
from .rng import stream

TEMPLATE_SEED = 431
ASSET_NAME = "templates.bin"


def build_templates(num_classes: int = 16, grid_h: int = 8, grid_w: int = 8,
                    channels: int = 8, seed: int = TEMPLATE_SEED) -> np.ndarray:
    """Smooth per-class target grids, standardized to zero mean, unit std.

    Each channel mixes two low-frequency plane waves whose frequencies and
    phases are drawn from the class's own stream.
    """
    ys, xs = np.meshgrid(np.arange(grid_h) / grid_h, np.arange(grid_w) / grid_w,
                         indexing="ij")
    out = np.empty((num_classes, grid_h * grid_w, channels))
    for c in range(num_classes):
        rng = stream(seed, "template", c)
        grid = np.empty((grid_h, grid_w, channels))
        for ch in range(channels):
            f1 = rng.integers(1, 3, size=2)
            f2 = rng.integers(1, 3, size=2)
            p1, p2 = rng.uniform(0.0, 2.0 * np.pi, size=2)
            a = rng.uniform(0.5, 1.0)
            wave1 = np.sin(2.0 * np.pi * (f1[0] * xs + f1[1] * ys) + p1)
            wave2 = np.cos(2.0 * np.pi * (f2[0] * xs - f2[1] * ys) + p2)
            grid[:, :, ch] = a * wave1 + (1.0 - a) * wave2
        flat = grid.reshape(grid_h * grid_w, channels)
        flat = flat - flat.mean()
        out[c] = flat / flat.std()
    return out


def load_templates() -> np.ndarray:
    """Load the committed template asset (16 classes, 8x8 grid, 8 channels)."""
    path = importlib.resources.files("margrid").joinpath("assets", ASSET_NAME)
    with importlib.resources.as_file(path) as p:
        arrays, _, _ = load_arrays(p)
    return arrays["templates"]


def write_template_asset(path) -> None:
    save_arrays(path, {"templates": build_templates()},
                meta={"seed": TEMPLATE_SEED, "classes": 16, "grid": [8, 8], "channels": 8})


def sample_grid(templates: np.ndarray, class_id: int, rng: np.random.Generator,
                noise_scale: float = 0.25) -> np.ndarray:
    """One training target: the class template plus Gaussian perturbation."""
    tpl = templates[class_id]
    return tpl + noise_scale * rng.standard_normal(tpl.shape)


if __name__ == "__main__":
    import pathlib

    dest = pathlib.Path(__file__).parent / "assets" / ASSET_NAME
    dest.parent.mkdir(exist_ok=True)
    write_template_asset(dest)
    print(f"wrote {dest}")
