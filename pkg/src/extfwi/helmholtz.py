"""Discrete Helmholtz operator with a sponge layer, banded LU, multi-RHS solves.

The operator is ``Lap_h + omega^2 diag(m * (1 + i*gamma))`` where ``Lap_h`` is
the 5-point Laplacian with mirrored (Neumann) closure on the outer rows and
``gamma`` a quadratic attenuation ramp inside the sponge.
"""

from __future__ import annotations

import hashlib
import threading
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lapack

from .mesh import Grid, Model

DEFAULT_GAMMA_MAX = 2.0


class SingularOperatorError(RuntimeError):
    """A zero pivot turned up while factorizing H(m, omega)."""


class SolveCounter:
    """Thread-safe tally of forward solves and factorizations by phase."""

    def __init__(self):
        self._lock = threading.Lock()
        self._phase = "other"
        self.reset()

    def reset(self):
        with self._lock:
            self.forward_solves = 0
            self.factorizations = 0
            self.solves_by_phase = defaultdict(int)
            self.factorizations_by_phase = defaultdict(int)

    @property
    def current_phase(self) -> str:
        return self._phase

    @contextmanager
    def phase(self, name: str):
        previous, self._phase = self._phase, name
        try:
            yield self
        finally:
            self._phase = previous

    def add_solves(self, k: int):
        with self._lock:
            self.forward_solves += k
            self.solves_by_phase[self._phase] += k

    def add_factorization(self):
        with self._lock:
            self.factorizations += 1
            self.factorizations_by_phase[self._phase] += 1

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "forward_solves": self.forward_solves,
                "factorizations": self.factorizations,
                "solves_by_phase": dict(self.solves_by_phase),
                "factorizations_by_phase": dict(self.factorizations_by_phase),
            }


counter = SolveCounter()


def model_key(model: Model) -> str:
    """Content hash used to tag fields and factorizations with a model version."""
    return hashlib.blake2b(model.values.tobytes(), digest_size=16).hexdigest()


def attenuation_profile(grid: Grid, gamma_max: float = DEFAULT_GAMMA_MAX) -> np.ndarray:
    w = grid.sponge_width
    gamma = np.zeros(grid.n)
    if w == 0:
        return gamma
    d = grid.boundary_distance()
    inside = d < w
    gamma[inside] = gamma_max * ((w - d[inside]) / w) ** 2
    return gamma


def _second_difference(n: int, h: float) -> sp.csr_matrix:
    # D^T D for the forward difference D; mirrored closure at both ends
    d = sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n)) / h
    return (d.T @ d).tocsr()


def difference_operator(grid: Grid) -> sp.csr_matrix:
    """Nodal gradient: x-differences stacked over z-differences."""
    dx = sp.diags([-np.ones(grid.nx - 1), np.ones(grid.nx - 1)], [0, 1],
                  shape=(grid.nx - 1, grid.nx)) / grid.dx
    dz = sp.diags([-np.ones(grid.nz - 1), np.ones(grid.nz - 1)], [0, 1],
                  shape=(grid.nz - 1, grid.nz)) / grid.dz
    return sp.vstack(
        [sp.kron(dx, sp.identity(grid.nz)), sp.kron(sp.identity(grid.nx), dz)]
    ).tocsr()


def laplacian(grid: Grid) -> sp.csr_matrix:
    lxx = _second_difference(grid.nx, grid.dx)
    lzz = _second_difference(grid.nz, grid.dz)
    lap = sp.kron(lxx, sp.identity(grid.nz)) + sp.kron(sp.identity(grid.nx), lzz)
    return (-lap).tocsr()


@dataclass(frozen=True)
class HelmholtzOperator:
    grid: Grid
    omega: float
    model: Model
    attenuation: np.ndarray
    matrix: sp.csr_matrix

    @property
    def mass_weight(self) -> np.ndarray:
        """Derivative of the operator diagonal with respect to m, over omega^2."""
        return 1.0 + 1j * self.attenuation


def assemble(grid: Grid, model: Model, omega: float,
             gamma_max: float = DEFAULT_GAMMA_MAX) -> HelmholtzOperator:
    if model.values.size != grid.n:
        raise ValueError(f"model has {model.values.size} values, grid has {grid.n} nodes")
    if omega < 0:
        raise ValueError("omega must be non-negative")
    gamma = attenuation_profile(grid, gamma_max)
    mass = omega**2 * model.values * (1.0 + 1j * gamma)
    matrix = (laplacian(grid).astype(np.complex128) + sp.diags(mass)).tocsr()
    return HelmholtzOperator(grid, float(omega), model, gamma, matrix)


@dataclass(frozen=True)
class HelmholtzFactorization:
    lu: np.ndarray
    piv: np.ndarray
    bandwidth: int
    perm: np.ndarray | None
    omega: float
    version: str

    @property
    def n(self) -> int:
        return self.lu.shape[1]


def _band_permutation(grid: Grid) -> np.ndarray | None:
    # depth-fastest order has bandwidth nz; switch to x-fastest when nx < nz
    if grid.nx >= grid.nz:
        return None
    ix, iz = np.meshgrid(np.arange(grid.nx), np.arange(grid.nz), indexing="ij")
    natural = (ix * grid.nz + iz).ravel()
    order = np.empty(grid.n, dtype=np.int64)
    order[(iz * grid.nx + ix).ravel()] = natural
    return order


def factorize(op: HelmholtzOperator) -> HelmholtzFactorization:
    grid = op.grid
    perm = _band_permutation(grid)
    a = op.matrix
    if perm is not None:
        a = a[perm][:, perm]
    bw = min(grid.nx, grid.nz)
    coo = a.tocoo()
    ab = np.zeros((3 * bw + 1, grid.n), dtype=np.complex128)
    ab[2 * bw + coo.row - coo.col, coo.col] = coo.data
    lu, piv, info = lapack.zgbtrf(ab, bw, bw, overwrite_ab=1)
    if info > 0:
        f_hz = op.omega / (2 * np.pi)
        raise SingularOperatorError(
            f"zero pivot {info} factorizing Helmholtz operator at {f_hz:g} Hz"
        )
    if info < 0:
        raise ValueError(f"zgbtrf rejected argument {-info}")
    counter.add_factorization()
    return HelmholtzFactorization(lu, piv, bw, perm, op.omega, model_key(op.model))


def solve(fact: HelmholtzFactorization, b: np.ndarray, adjoint: bool = False) -> np.ndarray:
    """Return ``H^{-1} b`` (or ``H^{-*} b``) for a vector or an N x k block."""
    b = np.asarray(b)
    vector = b.ndim == 1
    rhs = b.reshape(-1, 1) if vector else b
    if rhs.shape[0] != fact.n:
        raise ValueError(f"right-hand side has {rhs.shape[0]} rows, operator has {fact.n}")
    k = rhs.shape[1]
    if k == 0:
        return np.zeros(b.shape, dtype=np.complex128)
    rhs = np.array(rhs, dtype=np.complex128, order="F")
    if fact.perm is not None:
        rhs = np.asfortranarray(rhs[fact.perm])
    x, info = lapack.zgbtrs(fact.lu, fact.bandwidth, fact.bandwidth, rhs, fact.piv,
                            trans=2 if adjoint else 0, overwrite_b=1)
    if info != 0:
        raise ValueError(f"zgbtrs failed with info={info}")
    if fact.perm is not None:
        out = np.empty_like(x)
        out[fact.perm] = x
        x = out
    counter.add_solves(k)
    return x.ravel() if vector else np.ascontiguousarray(x)


class FactorizationCache:
    """Factorizations keyed by (model version, frequency).

    Callers drop stale versions with :meth:`prune`; ``max_versions`` is only a
    memory backstop (least recently used versions go first) and should exceed
    the number of line-search trials per step.
    """

    def __init__(self, grid: Grid, gamma_max: float = DEFAULT_GAMMA_MAX, max_versions: int = 32):
        self.grid = grid
        self.gamma_max = gamma_max
        self.max_versions = max_versions
        self._store: dict[tuple[str, float], HelmholtzFactorization] = {}
        self._versions: list[str] = []
        self._lock = threading.Lock()

    def get(self, model: Model, omega: float) -> HelmholtzFactorization:
        key = (model_key(model), float(omega))
        with self._lock:
            hit = self._store.get(key)
            if hit is not None:
                self._touch(key[0])
                return hit
        fact = factorize(assemble(self.grid, model, omega, self.gamma_max))
        with self._lock:
            self._store[key] = fact
            self._touch(key[0])
        return fact

    def _touch(self, version: str):
        if version in self._versions:
            self._versions.remove(version)
        self._versions.append(version)
        if len(self._versions) > self.max_versions:
            self._retain(self._versions[-self.max_versions:])

    def _retain(self, versions):
        keep = set(versions)
        self._versions = [v for v in self._versions if v in keep]
        self._store = {k: v for k, v in self._store.items() if k[0] in keep}

    def prune(self, *models: Model):
        """Drop every factorization not belonging to one of ``models``."""
        with self._lock:
            self._retain([model_key(m) for m in models])

    def __len__(self) -> int:
        return len(self._store)

    def clear(self):
        with self._lock:
            self._store.clear()
            self._versions.clear()


def point_source(grid: Grid, ix: int, iz: int) -> np.ndarray:
    q = np.zeros(grid.n, dtype=np.complex128)
    q[grid.index(ix, iz)] = 1.0 / (grid.dx * grid.dz)
    return q
