"""Check the discrete Helmholtz solution against the analytic 2D Green's function."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import hankel1

from .helmholtz import DEFAULT_GAMMA_MAX, assemble, factorize, point_source, solve
from .mesh import Grid, Model


@dataclass
class GreensResult:
    points_per_wavelength: float
    n: int
    error: float
    scale: complex


def greens_error(velocity: float = 2.0, freq: float = 4.0, ppw: float = 15.0,
                 half_width: float = 0.6, sponge_wavelengths: float = 2.0,
                 gamma_max: float = DEFAULT_GAMMA_MAX, margin: int = 5) -> GreensResult:
    """Relative L2 error of ``H^-1 q`` against ``(i/4) H0(1)(w r / v)``.

    The point source sits at the centre of a square homogeneous domain.  The
    comparison covers nodes at least ``margin`` nodes from the source and from
    the sponge.  The discrete field carries the sign convention of the
    operator, so the analytic field is rescaled by the ratio of the two at a
    reference node halfway between source and sponge.
    """
    wavelength = velocity / freq
    h = wavelength / ppw
    w = int(round(sponge_wavelengths * wavelength / h))
    n_phys = int(round(2 * half_width / h)) + 1
    n = n_phys + 2 * w
    grid = Grid(n, n, h, h, w)
    m = 1.0 / velocity**2
    model = Model(np.full(grid.n, m), 0.5 * m, 2.0 * m)
    omega = 2 * np.pi * freq
    u = solve(factorize(assemble(grid, model, omega, gamma_max)), point_source(grid, n // 2, n // 2))
    c = n // 2
    x, z = grid.coords()
    r = np.hypot(x - c * h, z - c * h)
    ix, iz = np.divmod(np.arange(grid.n), n)
    from_source = np.maximum(np.abs(ix - c), np.abs(iz - c))
    mask = (grid.boundary_distance() >= w + margin) & (from_source >= margin)
    g = 0.25j * hankel1(0, omega * r[mask] / velocity)
    uu = u[mask]
    ref = grid.index(c + n_phys // 4, c)
    k = int(np.searchsorted(np.flatnonzero(mask), ref))
    scale = uu[k] / g[k]
    err = float(np.linalg.norm(uu - scale * g) / np.linalg.norm(scale * g))
    return GreensResult(ppw, n, err, complex(scale))


def greens_check(ppw: float = 15.0, **kwargs) -> tuple[GreensResult, GreensResult]:
    """Errors at ``ppw`` and at twice the resolution."""
    return greens_error(ppw=ppw, **kwargs), greens_error(ppw=2 * ppw, **kwargs)
