"""Synthetic ellipse phantoms used as clean references at desk scale."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .imaging import ImageGrid
from .noise import rng_from_seed

# Head-phantom base: (x0, y0, semi_a, semi_b, angle_deg, intensity) in [-1, 1]
# coordinates. Random per-phantom ellipses are layered on top. Intensities
# sit mid-range like display-windowed soft tissue.
_BASE_ELLIPSES = (
    (0.0, 0.0, 0.86, 0.92, 0.0, 0.85),
    (0.0, 0.02, 0.78, 0.84, 0.0, 0.45),
)


def _render_ellipse(grid_x, grid_y, x0, y0, a, b, angle_deg, value, canvas):
    theta = np.radians(angle_deg)
    xr = (grid_x - x0) * np.cos(theta) + (grid_y - y0) * np.sin(theta)
    yr = -(grid_x - x0) * np.sin(theta) + (grid_y - y0) * np.cos(theta)
    inside = (xr / a) ** 2 + (yr / b) ** 2 <= 1.0
    canvas[inside] = value


def _smooth(canvas: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    # Partial-volume smoothing: tissue boundaries in reconstructed CT are
    # not step edges.
    radius = 2
    taps = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (taps / sigma) ** 2)
    kernel /= kernel.sum()
    for axis in (0, 1):
        pad = [(radius, radius) if ax == axis else (0, 0) for ax in (0, 1)]
        padded = np.pad(canvas, pad, mode="edge")
        acc = np.zeros_like(canvas)
        for j, weight in enumerate(kernel):
            index = [slice(None), slice(None)]
            index[axis] = slice(j, j + canvas.shape[axis])
            acc += weight * padded[tuple(index)]
        canvas = acc
    return canvas


def make_phantom(size: int, rng: np.random.Generator, id: str, group: str | None = None) -> ImageGrid:
    """One skull-plus-tissue phantom with randomized internal structures."""
    coords = np.linspace(-1.0, 1.0, size)
    gx, gy = np.meshgrid(coords, coords)
    canvas = np.zeros((size, size), dtype=np.float64)
    for x0, y0, a, b, ang, val in _BASE_ELLIPSES:
        _render_ellipse(gx, gy, x0, y0, a, b, ang, val, canvas)
    n_blobs = int(rng.integers(4, 9))
    for _ in range(n_blobs):
        x0, y0 = rng.uniform(-0.5, 0.5, size=2)
        a = rng.uniform(0.06, 0.35)
        b = rng.uniform(0.06, 0.35)
        ang = rng.uniform(0.0, 180.0)
        val = rng.uniform(0.25, 0.95)
        _render_ellipse(gx, gy, x0, y0, a, b, ang, val, canvas)
    canvas = _smooth(canvas)
    np.clip(canvas, 0.0, 1.0, out=canvas)
    return ImageGrid(canvas.astype(np.float32), (0.0, 1.0), id, group)


def make_phantoms(
    n: int, size: int = 64, seed: int = 0, group_size: int | None = None
) -> list[ImageGrid]:
    """Generate n deterministic phantoms; optionally tag consecutive groups."""
    if n < 1:
        raise ConfigError(f"phantom count must be >= 1, got {n}")
    if size < 4:
        raise ConfigError(f"phantom size must be >= 4, got {size}")
    phantoms = []
    for i in range(n):
        group = None
        if group_size:
            group = f"cohort_{i // group_size:03d}"
        rng = rng_from_seed(seed, 0x9A17, i)
        phantoms.append(make_phantom(size, rng, f"phantom_{i:04d}", group))
    return phantoms
