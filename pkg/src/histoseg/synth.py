"""Synthetic trichrome-like image/label generator for tests and demos.

Two smooth random fields are thresholded at per-image quantiles to
carve the plane into background and a myocyte/fibrosis mixture with
target class fractions. Class colors come from a palette and are
degraded by multiplicative low-frequency shading, per-pixel uniform
color jitter, and additive Gaussian noise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

Array = np.ndarray


@dataclass(frozen=True)
class SynthParams:
    """Knobs for the synthetic generator.

    fractions: target (myocyte, background, fibrosis) area fractions.
    fraction_jitter: per-image Gaussian spread applied to the targets,
        so the corpus has across-image variance in class areas.
    blob_scale: correlation length (pixels) of the structure fields.
    palette: base RGB color per class id.
    color_jitter: half-width of per-pixel uniform color perturbation.
    noise: standard deviation of additive Gaussian pixel noise.
    shading: amplitude of the multiplicative low-frequency shading
        field (0 disables it).
    """

    fractions: tuple[float, float, float] = (0.44, 0.32, 0.24)
    fraction_jitter: float = 0.02
    blob_scale: float = 48.0
    palette: tuple[tuple[int, int, int], ...] = (
        (190, 80, 90),     # myocyte: dull red
        (235, 230, 235),   # background: near white
        (90, 110, 200),    # fibrosis: blue
    )
    color_jitter: float = 10.0
    noise: float = 15.0
    shading: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        f = np.asarray(self.fractions, dtype=np.float64)
        if f.shape != (3,) or np.any(f <= 0):
            raise ContractError("fractions must be three positive numbers")
        if abs(float(f.sum()) - 1.0) > 1e-6:
            raise ContractError(f"fractions must sum to 1, got {f.sum()}")
        if len(self.palette) != 3 or len(set(self.palette)) != 3:
            raise ContractError("palette must hold three distinct RGB colors")
        for color in self.palette:
            if len(color) != 3 or any(not (0 <= v <= 255) for v in color):
                raise ContractError(f"palette color {color} is not a valid RGB triple")
        if self.blob_scale <= 0:
            raise ContractError(f"blob_scale must be positive, got {self.blob_scale}")
        for name in ("fraction_jitter", "color_jitter", "noise"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        if not (0.0 <= self.shading < 1.0):
            raise ContractError(f"shading must lie in [0, 1), got {self.shading}")


def _smooth_field(rng: np.random.Generator, h: int, w: int, scale: float) -> Array:
    """Low-resolution Gaussian grid upsampled bilinearly to (h, w)."""
    gh = max(2, int(np.ceil(h / scale)) + 1)
    gw = max(2, int(np.ceil(w / scale)) + 1)
    grid = rng.standard_normal((gh, gw))
    ys = np.linspace(0.0, gh - 1.0, h)
    xs = np.linspace(0.0, gw - 1.0, w)
    y0 = np.minimum(np.floor(ys).astype(np.int64), gh - 2)
    x0 = np.minimum(np.floor(xs).astype(np.int64), gw - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = grid[y0][:, x0] * (1 - fx) + grid[y0][:, x0 + 1] * fx
    bot = grid[y0 + 1][:, x0] * (1 - fx) + grid[y0 + 1][:, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def synth_generate(params: SynthParams, count: int, dims) -> list[tuple[Array, Array]]:
    """Generate `count` (image, label) pairs, deterministic per seed.

    Args:
        params: generator settings (the seed lives here).
        count: number of pairs.
        dims: (height, width) or a single square side.

    Returns:
        List of (uint8 (h, w, 3) image, uint8 (h, w) label map) pairs.
    """
    if count < 1:
        raise ContractError(f"count must be >= 1, got {count}")
    if isinstance(dims, (int, np.integer)):
        h, w = int(dims), int(dims)
    else:
        h, w = int(dims[0]), int(dims[1])
    if h < 8 or w < 8:
        raise ContractError(f"image dims must be at least 8x8, got {h}x{w}")
    rng = np.random.default_rng(params.seed)
    palette = np.asarray(params.palette, dtype=np.float64)
    out = []
    for _ in range(count):
        f = np.asarray(params.fractions, dtype=np.float64)
        if params.fraction_jitter > 0:
            f = f + rng.normal(0.0, params.fraction_jitter, 3)
        f = np.maximum(f, 0.005)
        f = f / f.sum()
        structure = _smooth_field(rng, h, w, params.blob_scale)
        texture = _smooth_field(rng, h, w, params.blob_scale)
        labels = np.zeros((h, w), dtype=np.uint8)
        bg = structure >= np.quantile(structure, 1.0 - f[1])
        labels[bg] = 1
        rest = ~bg
        if rest.any():
            fib_within = f[2] / (f[0] + f[2])
            thr = np.quantile(texture[rest], 1.0 - fib_within)
            labels[rest & (texture >= thr)] = 2
        img = palette[labels]
        if params.shading > 0:
            shade = _smooth_field(rng, h, w, params.blob_scale * 2.0)
            peak = max(float(np.abs(shade).max()), 1e-12)
            img = img * (1.0 + params.shading * shade / peak)[:, :, None]
        if params.color_jitter > 0:
            img = img + rng.uniform(-params.color_jitter, params.color_jitter,
                                    (h, w, 3))
        if params.noise > 0:
            img = img + rng.normal(0.0, params.noise, (h, w, 3))
        img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        out.append((img, labels))
    return out
