"""Vectorised 2-D Perlin gradient noise and fractal sums of it."""

from __future__ import annotations

import numpy as np


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6 - 15) + 10)


def perlin(shape: tuple[int, int], cells: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Gradient noise over a ``cells`` lattice spanning ``shape`` pixels, roughly in [-0.7, 0.7]."""
    h, w = shape
    ch, cw = cells
    angles = rng.uniform(0.0, 2 * np.pi, size=(ch + 1, cw + 1))
    grads = np.stack([np.cos(angles), np.sin(angles)], axis=-1)

    ys = (np.arange(h) + 0.5) * ch / h
    xs = (np.arange(w) + 0.5) * cw / w
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    y0 = y0[:, None]
    x0 = x0[None, :]

    def corner(dy: int, dx: int) -> np.ndarray:
        g = grads[y0 + dy, x0 + dx]
        return g[..., 0] * (fy - dy) + g[..., 1] * (fx - dx)

    u = _fade(fx)
    v = _fade(fy)
    top = corner(0, 0) * (1 - u) + corner(0, 1) * u
    bottom = corner(1, 0) * (1 - u) + corner(1, 1) * u
    return top * (1 - v) + bottom * v


def fbm(
    shape: tuple[int, int],
    rng: np.random.Generator,
    base_cells: int = 2,
    octaves: int = 4,
    persistence: float = 0.5,
) -> np.ndarray:
    """Fractal Brownian motion normalised to [0, 1]."""
    total = np.zeros(shape)
    amp = 1.0
    for k in range(octaves):
        c = base_cells * 2**k
        total += amp * perlin(shape, (c, c), rng)
        amp *= persistence
    lo, hi = total.min(), total.max()
    if hi - lo < 1e-12:
        return np.full(shape, 0.5)
    return (total - lo) / (hi - lo)
