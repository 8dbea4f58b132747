"""Sources, receivers, synthetic data and the FWID observed-data format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .helmholtz import FactorizationCache, solve
from .mesh import Grid, Model

DATA_MAGIC = b"FWID"
_DATA_HEADER = struct.Struct("<4sIII")

# per-frequency noise substreams are derived from the root seed by fixed offsets
_NOISE_STREAM_OFFSET = 1000


class DataFileError(ValueError):
    pass


def surface_row(grid: Grid) -> int:
    """Depth index of the top row of the physical (non-sponge) domain."""
    return grid.sponge_width


def spread_positions(grid: Grid, count: int, row: int | None = None) -> list[tuple[int, int]]:
    """``count`` nodes evenly spread along a row, inside the sponge margins."""
    if count < 1:
        raise ValueError("need at least one position")
    row = surface_row(grid) if row is None else row
    lo, hi = grid.sponge_width, grid.nx - 1 - grid.sponge_width
    if count == 1:
        xs = [(lo + hi) // 2]
    else:
        xs = np.round(np.linspace(lo, hi, count + 2)[1:-1]).astype(int).tolist()
    return [(int(ix), int(row)) for ix in xs]


@dataclass(frozen=True)
class SourceSet:
    grid: Grid
    positions: tuple[tuple[int, int], ...]

    @property
    def n_sources(self) -> int:
        return len(self.positions)

    @property
    def amplitude(self) -> float:
        return 1.0 / (self.grid.dx * self.grid.dz)

    @property
    def matrix(self) -> sp.csc_matrix:
        n_s = self.n_sources
        rows = [self.grid.index(ix, iz) for ix, iz in self.positions]
        return sp.csc_matrix(
            (np.full(n_s, self.amplitude, dtype=np.complex128), (rows, np.arange(n_s))),
            shape=(self.grid.n, n_s),
        )

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


@dataclass(frozen=True)
class ReceiverSet:
    grid: Grid
    positions: tuple[tuple[int, int], ...]
    masks: np.ndarray | None = None

    def __post_init__(self):
        if len(self.positions) == 0:
            raise ValueError("receiver set is empty")

    @property
    def n_receivers(self) -> int:
        return len(self.positions)

    @property
    def nodes(self) -> np.ndarray:
        return np.array([self.grid.index(ix, iz) for ix, iz in self.positions])

    @property
    def matrix(self) -> sp.csc_matrix:
        """The N x n_r selection operator P."""
        n_r = self.n_receivers
        return sp.csc_matrix(
            (np.ones(n_r), (self.nodes, np.arange(n_r))), shape=(self.grid.n, n_r)
        )

    def sample(self, fields: np.ndarray) -> np.ndarray:
        """``P^T u``: field values at receiver nodes."""
        return fields[self.nodes]

    def spread(self, values: np.ndarray) -> np.ndarray:
        """``P w``: place receiver-space values back on the grid."""
        out = np.zeros((self.grid.n,) + values.shape[1:], dtype=np.result_type(values, complex))
        np.add.at(out, self.nodes, values)
        return out

    def mask_matrix(self, n_sources: int) -> np.ndarray:
        if self.masks is None:
            return np.ones((self.n_receivers, n_sources), dtype=bool)
        return np.asarray(self.masks, dtype=bool)


@dataclass
class ObservedData:
    frequencies: np.ndarray
    data: list[np.ndarray]
    sigma2: np.ndarray
    masks: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=np.float64)
        self.sigma2 = np.asarray(self.sigma2, dtype=np.float64)
        if len(self.data) != self.frequencies.size or self.sigma2.size != self.frequencies.size:
            raise ValueError("frequency count does not match data blocks / noise levels")
        if np.any(self.sigma2 <= 0):
            raise ValueError("noise variances must be positive")
        shapes = {d.shape for d in self.data}
        if len(shapes) > 1:
            raise ValueError(f"inconsistent data block shapes {shapes}")

    @property
    def n_frequencies(self) -> int:
        return self.frequencies.size

    @property
    def shape(self) -> tuple[int, int]:
        return self.data[0].shape

    def omega(self, j: int) -> float:
        return 2 * np.pi * float(self.frequencies[j])

    def weight_mask(self) -> np.ndarray:
        """1 on recorded entries, 0 on masked-out ones."""
        if self.masks is None:
            return np.ones(self.shape)
        return np.asarray(self.masks, dtype=np.float64)


def simulate(cache: FactorizationCache, model: Model, receivers: ReceiverSet,
             sources: np.ndarray, omega: float) -> np.ndarray:
    """Clean data ``P^T H^{-1} S`` for an N x k source block."""
    fact = cache.get(model, omega)
    return receivers.sample(solve(fact, sources))


def generate_data(grid: Grid, true_model: Model, sources: SourceSet, receivers: ReceiverSet,
                  frequencies, noise_level: float = 0.0, seed: int = 0,
                  gamma_max: float | None = None, return_clean: bool = False):
    """Synthetic observations with complex Gaussian noise relative to data RMS.

    Noise for frequency ``j`` has standard deviation ``noise_level`` times the
    RMS modulus of the clean block and is drawn from substream
    ``seed + 1000 * (j + 1)``.  The recorded variance per frequency is that
    of the noise; for ``noise_level == 0`` the variance of 1% noise is
    recorded instead so that misfits stay normalized.
    """
    freqs = np.asarray(frequencies, dtype=np.float64)
    if freqs.size == 0 or np.any(freqs <= 0) or np.any(np.diff(freqs) <= 0):
        raise ValueError("frequencies must be positive and strictly increasing")
    if noise_level < 0:
        raise ValueError("noise level must be non-negative")
    if np.any(true_model.values < true_model.m_low) or np.any(true_model.values > true_model.m_high):
        raise ValueError("true model outside bounds")
    kwargs = {} if gamma_max is None else {"gamma_max": gamma_max}
    cache = FactorizationCache(grid, **kwargs)
    q = sources.dense()
    clean, noisy, sigma2 = [], [], []
    for j, f in enumerate(freqs):
        d = simulate(cache, true_model, receivers, q, 2 * np.pi * f)
        rms = np.sqrt(np.mean(np.abs(d) ** 2))
        std = noise_level * rms
        rng = np.random.default_rng(seed + _NOISE_STREAM_OFFSET * (j + 1))
        eps = (rng.standard_normal(d.shape) + 1j * rng.standard_normal(d.shape)) * (std / np.sqrt(2))
        clean.append(d)
        noisy.append(d + eps if noise_level > 0 else d.copy())
        sigma2.append(std**2 if noise_level > 0 else (0.01 * rms) ** 2)
    masks = None if receivers.masks is None else receivers.mask_matrix(sources.n_sources)
    obs = ObservedData(freqs, noisy, np.array(sigma2), masks)
    if return_clean:
        return obs, ObservedData(freqs, clean, np.array(sigma2), masks)
    return obs


def complete_data(predicted: np.ndarray, observed: np.ndarray, sigma2: float,
                  eta: float = 1e3, masks: np.ndarray | None = None) -> np.ndarray:
    """Entrywise minimizer of ``|a - d|^2 + eta |d - d_obs|^2 / sigma^2`` on
    recorded entries; masked-out entries take the prediction."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    blend = (sigma2 * predicted + eta * observed) / (sigma2 + eta)
    if masks is None:
        return blend
    return np.where(np.asarray(masks, dtype=bool), blend, predicted)


def write_data_file(path, obs: ObservedData) -> None:
    n_r, n_s = obs.shape
    if n_r == 0:
        raise DataFileError("cannot write data with an empty receiver set")
    parts = [
        _DATA_HEADER.pack(DATA_MAGIC, n_r, n_s, obs.n_frequencies),
        np.asarray(obs.frequencies, dtype="<f8").tobytes(),
    ]
    for block in obs.data:
        # source-major: all receivers of source 0, then source 1, ...
        inter = np.empty((n_s, n_r, 2), dtype="<f8")
        inter[..., 0] = block.T.real
        inter[..., 1] = block.T.imag
        parts.append(inter.tobytes())
    parts.append(np.asarray(obs.sigma2, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_data_file(path, n_frequencies: int | None = None) -> ObservedData:
    raw = Path(path).read_bytes()
    if raw[:4] != DATA_MAGIC:
        raise DataFileError(f"{path}: not an FWID data file")
    if len(raw) < _DATA_HEADER.size:
        raise DataFileError(f"{path}: truncated header")
    _, n_r, n_s, n_f = _DATA_HEADER.unpack_from(raw)
    if n_r == 0:
        raise DataFileError(f"{path}: empty receiver set")
    if n_frequencies is not None and n_f != n_frequencies:
        raise DataFileError(f"{path}: has {n_f} frequencies, expected {n_frequencies}")
    expected = _DATA_HEADER.size + 8 * n_f + 16 * n_r * n_s * n_f + 8 * n_f
    if len(raw) != expected:
        raise DataFileError(f"{path}: size {len(raw)} does not match shape header ({expected})")
    off = _DATA_HEADER.size
    freqs = np.frombuffer(raw, "<f8", n_f, off).astype(np.float64)
    off += 8 * n_f
    blocks = []
    for _ in range(n_f):
        inter = np.frombuffer(raw, "<f8", 2 * n_r * n_s, off).reshape(n_s, n_r, 2)
        blocks.append((inter[..., 0] + 1j * inter[..., 1]).T.copy())
        off += 16 * n_r * n_s
    sigma2 = np.frombuffer(raw, "<f8", n_f, off).astype(np.float64)
    return ObservedData(freqs, blocks, sigma2)
