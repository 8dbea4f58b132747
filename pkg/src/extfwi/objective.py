"""Misfit variants (reduced, low-rank extended, simultaneous) and regularizers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .acquisition import ObservedData, ReceiverSet, SourceSet
from .helmholtz import (DEFAULT_GAMMA_MAX, FactorizationCache, counter, difference_operator,
                        laplacian, solve)
from .mesh import Grid, Model
from .parallel import ordered_map

SPLINE = "spline_smoothing"
DIFFUSION = "diffusion"


@dataclass
class Problem:
    """Everything fixed during an inversion: geometry, data and the solver cache."""

    grid: Grid
    sources: SourceSet
    receivers: ReceiverSet
    observed: ObservedData
    gamma_max: float = DEFAULT_GAMMA_MAX
    cache: FactorizationCache = field(default=None)

    def __post_init__(self):
        if self.cache is None:
            self.cache = FactorizationCache(self.grid, self.gamma_max)
        n_r, n_s = self.observed.shape
        if n_r != self.receivers.n_receivers or n_s != self.sources.n_sources:
            raise ValueError(
                f"data shape {(n_r, n_s)} does not match geometry "
                f"({self.receivers.n_receivers} receivers, {self.sources.n_sources} sources)"
            )
        self._q = self.sources.dense()

    @property
    def q(self) -> np.ndarray:
        return self._q

    @property
    def n_frequencies(self) -> int:
        return self.observed.n_frequencies

    def omega(self, j: int) -> float:
        return self.observed.omega(j)

    def factor(self, model: Model, j: int):
        return self.cache.get(model, self.omega(j))

    def all_frequencies(self) -> list[int]:
        return list(range(self.n_frequencies))


@dataclass
class Regularizer:
    kind: str
    alpha: float
    m_ref: np.ndarray
    update_ref_each_iteration: bool | None = None

    def __post_init__(self):
        if self.kind not in (SPLINE, DIFFUSION):
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        self.m_ref = np.array(self.m_ref, dtype=np.float64)
        if self.update_ref_each_iteration is None:
            self.update_ref_each_iteration = self.kind == DIFFUSION
        self._op = None
        self._gram = None

    def operator(self, grid: Grid) -> sp.csr_matrix:
        if self._op is None or self._op.shape[1] != grid.n:
            self._op = laplacian(grid) if self.kind == SPLINE else difference_operator(grid)
            self._gram = None
        return self._op

    def gram(self, grid: Grid) -> sp.csr_matrix:
        """``2 A^T A``, the Hessian of ``||A (m - m_ref)||^2``."""
        if self._gram is None:
            a = self.operator(grid)
            self._gram = (2.0 * (a.T @ a)).tocsr()
        return self._gram

    def accept(self, model: Model):
        if self.update_ref_each_iteration:
            self.m_ref = np.array(model.values)


def reg_value_grad_hess(grid: Grid, model: Model, reg: Regularizer):
    """Value, gradient and Hessian-apply of ``||A (m - m_ref)||^2`` (no alpha)."""
    a = reg.operator(grid)
    diff = model.values - reg.m_ref
    ad = a @ diff
    gram = reg.gram(grid)
    return float(ad @ ad), 2.0 * (a.T @ ad), (lambda v: gram @ v)


@dataclass
class MisfitReport:
    data_misfit: float
    reg_value: float = 0.0
    per_frequency: dict = field(default_factory=dict)
    solves: int = 0
    z1_l1: float = 0.0
    z2_penalty: float = 0.0
    beta1: float = 0.0
    beta2: float = 0.0
    alpha: float = 0.0

    @property
    def total(self) -> float:
        return (self.data_misfit + self.beta1 * self.z1_l1 + self.z2_penalty
                + self.alpha * self.reg_value)


def weighted_norm2(residual: np.ndarray, sigma2: float, mask=None) -> float:
    r = residual if mask is None else residual * mask
    return float(np.sum(r.real**2 + r.imag**2) / sigma2)


def _data_term(problem: Problem, model: Model, sources: np.ndarray, data_fn,
               freqs, scale: float, use_mask: bool):
    before = counter.forward_solves
    mask = problem.observed.weight_mask() if use_mask else None

    def one(j):
        u = solve(problem.factor(model, j), sources)
        resid = problem.receivers.sample(u) - data_fn(j)
        return scale * weighted_norm2(resid, problem.observed.sigma2[j], mask)

    terms = ordered_map(one, freqs)
    per = {int(j): t for j, t in zip(freqs, terms)}
    return float(sum(terms)), per, counter.forward_solves - before


def _with_reg(report: MisfitReport, problem: Problem, model: Model, reg: Regularizer | None):
    if reg is not None:
        report.reg_value, _, _ = reg_value_grad_hess(problem.grid, model, reg)
        report.alpha = reg.alpha
    return report


def reduced_misfit(problem: Problem, model: Model, freqs=None,
                   reg: Regularizer | None = None) -> MisfitReport:
    """Weighted residual over all sources with the original point sources."""
    freqs = problem.all_frequencies() if freqs is None else list(freqs)
    value, per, n = _data_term(problem, model, problem.q, lambda j: problem.observed.data[j],
                               freqs, 1.0, True)
    return _with_reg(MisfitReport(value, per_frequency=per, solves=n), problem, model, reg)


def z1_l1(z1: np.ndarray) -> float:
    return float(np.sum(np.abs(z1)))


def extended_misfit(problem: Problem, model: Model, z1: np.ndarray, z2: np.ndarray,
                    beta1: float, beta2: float, freqs=None,
                    reg: Regularizer | None = None) -> MisfitReport:
    """Misfit with sources ``Q + Z1 Z2`` plus the two extension penalties."""
    n_s = problem.sources.n_sources
    if z1.shape[0] != problem.grid.n or z2.shape != (z1.shape[1], n_s):
        raise ValueError(f"shape mismatch: Z1 {z1.shape}, Z2 {z2.shape}, n_s={n_s}")
    freqs = problem.all_frequencies() if freqs is None else list(freqs)
    sources = problem.q + z1 @ z2
    value, per, n = _data_term(problem, model, sources, lambda j: problem.observed.data[j],
                               freqs, 1.0, True)
    report = MisfitReport(value, per_frequency=per, solves=n, z1_l1=z1_l1(z1),
                          z2_penalty=0.5 * beta2 * float(np.sum(np.abs(z2) ** 2)),
                          beta1=beta1, beta2=beta2)
    return _with_reg(report, problem, model, reg)


def simultaneous_misfit(problem: Problem, model: Model, z1: np.ndarray | None,
                        x: np.ndarray, *, z2: np.ndarray | None = None,
                        z2_hat: np.ndarray | None = None, beta1: float = 0.0,
                        beta2: float = 0.0, freqs=None,
                        reg: Regularizer | None = None) -> MisfitReport:
    """Sketched misfit ``(1/p) sum_j ||P^T H^-1 (QX + Z1 Z2hat) - D_j X||^2``.

    ``z2_hat`` is the sketched coefficient block ``Z2 X``; pass either it or
    the full ``z2``.  With ``z1=None`` the extension is absent.
    """
    x = np.asarray(x, dtype=np.float64)
    n_s, p = x.shape
    if n_s != problem.sources.n_sources:
        raise ValueError(f"sketch has {n_s} rows, expected {problem.sources.n_sources}")
    if not np.all(np.abs(x) == 1):
        raise ValueError("sketch entries must be +1 or -1")
    freqs = problem.all_frequencies() if freqs is None else list(freqs)
    sources = problem.q @ x
    z2_pen = 0.0
    if z1 is not None:
        if z2_hat is None:
            if z2 is None:
                raise ValueError("need z2 or z2_hat with an extension")
            z2_hat = z2 @ x
        if z2_hat.shape != (z1.shape[1], p):
            raise ValueError(f"shape mismatch: Z1 {z1.shape}, Z2X {z2_hat.shape}")
        sources = sources + z1 @ z2_hat
        z2_pen = 0.5 * beta2 / p * float(np.sum(np.abs(z2_hat) ** 2))
    value, per, n = _data_term(problem, model, sources,
                               lambda j: problem.observed.data[j] @ x, freqs, 1.0 / p, False)
    report = MisfitReport(value, per_frequency=per, solves=n,
                          z1_l1=0.0 if z1 is None else z1_l1(z1), z2_penalty=z2_pen,
                          beta1=beta1, beta2=beta2)
    return _with_reg(report, problem, model, reg)
