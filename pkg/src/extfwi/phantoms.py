"""Deterministic synthetic velocity models (km/s) on a :class:`Grid`."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .mesh import Grid, Model

PHANTOMS = ("two_layer", "layered")


def _depth_and_offset(grid: Grid):
    """Physical coordinates with the origin at the top-left of the interior."""
    x, z = grid.coords()
    w = grid.sponge_width
    return x - w * grid.dx, z - w * grid.dz


def two_layer(grid: Grid, v_top: float = 2.0, v_bottom: float = 3.0, v_inclusion: float = 4.0,
              interface: float = 0.4, inclusion_width: float = 0.12, seed: int = 0) -> np.ndarray:
    """Two flat layers with a Gaussian high-velocity inclusion below the interface.

    ``interface`` is a fraction of the physical depth; ``inclusion_width`` a
    fraction of the physical width.  The seed jitters the inclusion centre.
    """
    rng = np.random.default_rng(seed)
    x, z = _depth_and_offset(grid)
    w = grid.sponge_width
    width = (grid.nx - 1 - 2 * w) * grid.dx
    depth = (grid.nz - 1 - 2 * w) * grid.dz
    v = np.where(z < interface * depth, v_top, v_bottom)
    cx = width * (0.5 + 0.05 * rng.uniform(-1, 1))
    cz = depth * (0.65 + 0.05 * rng.uniform(-1, 1))
    s = inclusion_width * width
    bump = np.exp(-((x - cx) ** 2 + (z - cz) ** 2) / (2 * s**2))
    return v + (v_inclusion - v) * bump


def layered(grid: Grid, v_min: float = 1.5, v_max: float = 4.0, n_layers: int = 8,
            smoothing: float = 1.5, seed: int = 0) -> np.ndarray:
    """Smoothed random layers with velocity increasing on average with depth."""
    rng = np.random.default_rng(seed)
    x, z = _depth_and_offset(grid)
    zmax = max(float(z.max()), grid.dz)
    xmax = max(float(x.max()), grid.dx)
    trend = v_min + (v_max - v_min) * np.clip(z / zmax, 0, 1)
    tilt = rng.uniform(-0.1, 0.1, n_layers)
    edges = np.sort(rng.uniform(0, 1, n_layers))
    jumps = rng.uniform(-0.3, 0.3, n_layers) * (v_max - v_min) / 4
    v = trend.copy()
    for e, t, dv in zip(edges, tilt, jumps):
        v += dv * (z / zmax > e + t * (x / xmax - 0.5))
    v = gaussian_filter(v.reshape(grid.shape), smoothing, mode="nearest").ravel()
    return np.clip(v, v_min, v_max)


def smooth_background(grid: Grid, velocity: np.ndarray, sigma_km: float = 0.3) -> np.ndarray:
    """Gaussian-blurred copy of ``velocity`` for use as a starting model."""
    sig = (sigma_km / grid.dx, sigma_km / grid.dz)
    return gaussian_filter(np.asarray(velocity).reshape(grid.shape), sig, mode="nearest").ravel()


def make_phantom(name: str, grid: Grid, seed: int = 0, **kwargs) -> np.ndarray:
    if name == "two_layer":
        return two_layer(grid, seed=seed, **kwargs)
    if name == "layered":
        return layered(grid, seed=seed, **kwargs)
    raise ValueError(f"unknown phantom {name!r}; expected one of {PHANTOMS}")


def to_model(velocity: np.ndarray, v_low: float = 1.0, v_high: float = 6.0) -> Model:
    return Model.from_velocity(velocity, v_low, v_high)


def linear_gradient(grid: Grid, v_top: float = 2.0, v_bottom: float = 3.0) -> np.ndarray:
    """Velocity increasing linearly with physical depth, constant in the sponge."""
    _, z = _depth_and_offset(grid)
    depth = max((grid.nz - 1 - 2 * grid.sponge_width) * grid.dz, grid.dz)
    return v_top + (v_bottom - v_top) * np.clip(z / depth, 0.0, 1.0)
