"""Regular 2D grids, bounded squared-slowness models and the FWIM file format.

Nodes are ordered depth-fastest: the flat index of node ``(ix, iz)`` is
``ix * nz + iz``.  Units are km and s, so squared slowness is in s^2/km^2.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

MODEL_MAGIC = b"FWIM"
_MODEL_HEADER = struct.Struct("<4sIIddI")


class ModelFileError(ValueError):
    """Raised for malformed FWIM files."""


class BadMagicError(ModelFileError):
    pass


class DimensionMismatchError(ModelFileError):
    pass


class NonFiniteValueError(ModelFileError):
    pass


@dataclass(frozen=True)
class Grid:
    nx: int
    nz: int
    dx: float
    dz: float
    sponge_width: int = 0

    def __post_init__(self):
        if self.nx < 3 or self.nz < 3:
            raise ValueError(f"grid needs at least 3x3 nodes, got {self.nx}x{self.nz}")
        if not (self.dx > 0 and self.dz > 0):
            raise ValueError("grid spacing must be positive")
        if self.sponge_width < 0 or 2 * self.sponge_width >= min(self.nx, self.nz):
            raise ValueError(
                f"sponge width {self.sponge_width} too large for {self.nx}x{self.nz} grid"
            )

    @property
    def n(self) -> int:
        return self.nx * self.nz

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.nz)

    def index(self, ix, iz):
        return np.asarray(ix) * self.nz + np.asarray(iz)

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Flat arrays of node coordinates (x, z) in km."""
        ix, iz = np.meshgrid(np.arange(self.nx), np.arange(self.nz), indexing="ij")
        return (ix * self.dx).ravel(), (iz * self.dz).ravel()

    def boundary_distance(self) -> np.ndarray:
        """Distance in nodes from each node to the nearest grid edge (flat)."""
        ix, iz = np.meshgrid(np.arange(self.nx), np.arange(self.nz), indexing="ij")
        d = np.minimum.reduce(
            [ix, self.nx - 1 - ix, iz, self.nz - 1 - iz]
        )
        return d.ravel()

    def interior_mask(self) -> np.ndarray:
        """True on nodes outside the absorbing margin."""
        return self.boundary_distance() >= self.sponge_width


@dataclass(frozen=True)
class Model:
    """Squared slowness on the nodes of a grid, with box bounds.

    Construction rejects out-of-bound values; use :func:`project_to_bounds`
    on a :class:`RawModel` to clamp arbitrary values first.
    """

    values: np.ndarray
    m_low: float
    m_high: float

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).ravel()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if not (0 < self.m_low <= self.m_high):
            raise ValueError(f"invalid bounds [{self.m_low}, {self.m_high}]")
        if not np.all(np.isfinite(v)):
            raise ValueError("model contains non-finite values")
        if v.size and (v.min() < self.m_low or v.max() > self.m_high):
            raise ValueError("model values outside bounds; use project_to_bounds first")

    @classmethod
    def from_velocity(cls, velocity, v_low: float, v_high: float) -> "Model":
        """Build a model from velocities in km/s; bounds given as velocities."""
        m = 1.0 / np.asarray(velocity, dtype=np.float64) ** 2
        lo, hi = 1.0 / v_high**2, 1.0 / v_low**2
        return cls(np.clip(m, lo, hi), lo, hi)

    @property
    def velocity(self) -> np.ndarray:
        return 1.0 / np.sqrt(self.values)

    def replace(self, values) -> "Model":
        """Same bounds, new values (clamped)."""
        return project_to_bounds(RawModel(values, self.m_low, self.m_high))


class RawModel(NamedTuple):
    """Unvalidated values plus bounds, the input side of projection."""

    values: np.ndarray
    m_low: float
    m_high: float


def project_to_bounds(model) -> Model:
    """Clamp every entry into ``[m_low, m_high]``."""
    if not (0 < model.m_low < model.m_high):
        raise ValueError(f"invalid bounds [{model.m_low}, {model.m_high}]")
    values = np.clip(np.asarray(model.values, dtype=np.float64), model.m_low, model.m_high)
    return Model(values, model.m_low, model.m_high)


def write_model_file(path, grid: Grid, model: Model) -> None:
    values = np.asarray(model.values, dtype="<f8")
    if values.size != grid.n:
        raise DimensionMismatchError(
            f"model has {values.size} values but grid has {grid.n} nodes"
        )
    if not np.all(np.isfinite(values)):
        raise NonFiniteValueError("refusing to write non-finite model values")
    header = _MODEL_HEADER.pack(
        MODEL_MAGIC, grid.nx, grid.nz, grid.dx, grid.dz, grid.sponge_width
    )
    Path(path).write_bytes(header + values.tobytes())


def read_model_file(path, m_low: float | None = None, m_high: float | None = None):
    """Read an FWIM file.

    The format carries no bounds; unless given, they default to the value
    range of the file so that the returned model is valid.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MODEL_MAGIC:
        raise BadMagicError(f"{path}: not an FWIM model file")
    if len(raw) < _MODEL_HEADER.size:
        raise DimensionMismatchError(f"{path}: truncated header")
    _, nx, nz, dx, dz, sponge = _MODEL_HEADER.unpack_from(raw)
    payload = raw[_MODEL_HEADER.size:]
    if len(payload) != 8 * nx * nz:
        raise DimensionMismatchError(
            f"{path}: expected {nx * nz} values for {nx}x{nz} grid, "
            f"found {len(payload) / 8:g}"
        )
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise NonFiniteValueError(f"{path}: non-finite model values")
    grid = Grid(nx, nz, dx, dz, sponge)
    lo = float(values.min()) if m_low is None else m_low
    hi = float(values.max()) if m_high is None else m_high
    if values.min() < lo or values.max() > hi:
        raise ValueError(f"{path}: values outside requested bounds [{lo}, {hi}]")
    return grid, Model(values, lo, hi)


def downsample_model(grid: Grid, model: Model, factor: int):
    """Nodal subsampling by an integer factor in both directions."""
    factor = int(factor)
    if factor < 1 or (grid.nx - 1) % factor or (grid.nz - 1) % factor:
        raise ValueError(
            f"factor {factor} must divide nx-1={grid.nx - 1} and nz-1={grid.nz - 1}"
        )
    if factor == 1:
        return grid, model
    nx = (grid.nx - 1) // factor + 1
    nz = (grid.nz - 1) // factor + 1
    sponge = min(-(-grid.sponge_width // factor), (min(nx, nz) - 1) // 2)
    coarse = Grid(nx, nz, grid.dx * factor, grid.dz * factor, sponge)
    values = model.values.reshape(grid.nx, grid.nz)[::factor, ::factor]
    return coarse, Model(values.ravel(), model.m_low, model.m_high)
