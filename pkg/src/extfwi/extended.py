"""Low-rank, sparse source extensions ``Z = Z1 Z2``.

``T_j = P^T H_j^{-1}`` is never formed: ``T_j V`` is a forward solve with the
columns of ``V`` and ``T_j^* W`` an adjoint solve with ``P W``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .helmholtz import counter, solve
from .mesh import Grid, Model
from .objective import Problem, weighted_norm2
from .parallel import ordered_map

log = logging.getLogger(__name__)

Z1_MAGIC = b"FWIZ"
_Z1_HEADER = struct.Struct("<4sIIQ")
_Z1_ENTRY = np.dtype([("row", "<u4"), ("col", "<u4"), ("re", "<f8"), ("im", "<f8")])

BETA_RATIO = 100.0


class Z1FileError(ValueError):
    pass


@dataclass
class BetaState:
    beta1: float
    beta2: float | None = None
    r1: float = 0.3
    r2: float = 0.5
    gamma: float = 1.5

    def __post_init__(self):
        if self.beta2 is None:
            self.beta2 = BETA_RATIO * self.beta1
        if self.beta1 <= 0 or self.beta2 <= 0:
            raise ValueError("beta values must be positive")


def update_betas(state: BetaState, misfit_with_ext: float, misfit_without_ext: float) -> BetaState:
    """Keep misfit(Z1 Z2) / misfit(0) inside ``[r1, r2]`` by scaling both betas."""
    if misfit_without_ext <= 0:
        raise ValueError("misfit without extension must be positive")
    ratio = misfit_with_ext / misfit_without_ext
    if ratio > state.r2:
        factor = 1.0 / state.gamma
    elif ratio < state.r1:
        factor = state.gamma
    else:
        return state
    return BetaState(state.beta1 * factor, state.beta2 * factor, state.r1, state.r2, state.gamma)


def init_z1(grid: Grid, n_es: int, seed: int, scale: float = 1e-2) -> np.ndarray:
    """Dense complex Gaussian start, ``scale`` times the point-source amplitude.

    Moduli are clamped at ten times the nominal scale.
    """
    if n_es < 1:
        raise ValueError("n_es must be at least 1")
    amp = scale / (grid.dx * grid.dz)
    rng = np.random.default_rng(seed)
    z = (rng.standard_normal((grid.n, n_es)) + 1j * rng.standard_normal((grid.n, n_es)))
    z *= amp / np.sqrt(2)
    cap = 10 * amp
    mod = np.abs(z)
    over = mod > cap
    z[over] *= cap / mod[over]
    return z


def irls_weights(z1: np.ndarray, epsilon: float) -> np.ndarray:
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return 1.0 / (np.abs(z1) + epsilon)


def irls_epsilon(z1: np.ndarray) -> float:
    return 1e-3 * max(1.0, float(np.max(np.abs(z1))) if z1.size else 1.0)


def threshold(z1: np.ndarray, rel: float) -> np.ndarray:
    """Zero every entry with modulus at or below ``rel * max(1, max|z1|)``.

    The unit floor matches the IRLS epsilon, so a uniformly negligible Z1
    collapses to zero instead of being rescaled against itself.
    """
    mod = np.abs(z1)
    top = max(1.0, mod.max()) if mod.size else 0.0
    out = z1.copy()
    out[mod <= rel * top] = 0.0
    return out


def nnz_fraction(z1: np.ndarray) -> float:
    return float(np.count_nonzero(z1)) / z1.size if z1.size else 0.0


def solve_z2(tz1_blocks, residuals, sigma2, shift: float) -> np.ndarray:
    """``(sum_j B_j^* B_j / s_j + shift I)^{-1} sum_j B_j^* R_j / s_j``.

    ``B_j = T_j Z1`` (n_r x n_es), ``R_j`` (n_r x k); one Hermitian Cholesky
    factor serves all k right-hand sides.
    """
    tz1_blocks = list(tz1_blocks)
    residuals = list(residuals)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    n_es = tz1_blocks[0].shape[1]
    k = residuals[0].shape[1]
    gram = shift * np.eye(n_es, dtype=np.complex128)
    rhs = np.zeros((n_es, k), dtype=np.complex128)
    for b, r, s in zip(tz1_blocks, residuals, sigma2):
        if b.shape[0] != r.shape[0]:
            raise ValueError(f"block rows {b.shape[0]} != residual rows {r.shape[0]}")
        gram += b.conj().T @ b / s
        rhs += b.conj().T @ r / s
    if not (np.all(np.isfinite(gram)) and np.all(np.isfinite(rhs))):
        raise FloatingPointError("non-finite input to Z2 solve")
    if not np.any(rhs):
        return np.zeros((n_es, k), dtype=np.complex128)
    return cho_solve(cho_factor(gram), rhs)


def op_forward(problem: Problem, model: Model, j: int, v: np.ndarray, z2: np.ndarray):
    """``OP_j(V) = T_j V Z2``; returns the block and ``H_j^{-1} V``."""
    hv = solve(problem.factor(model, j), v)
    return problem.receivers.sample(hv) @ z2, hv


def op_adjoint(problem: Problem, model: Model, j: int, r: np.ndarray, z2: np.ndarray):
    """``OP_j^*(R) = T_j^* R Z2^*`` with ``n_es`` adjoint solves."""
    w = r @ z2.conj().T
    return solve(problem.factor(model, j), problem.receivers.spread(w), adjoint=True)


@dataclass
class Z1SolveInfo:
    iterations: int
    epsilon: float
    irls_objective: list = field(default_factory=list)
    nnz_fraction: float = 0.0


def solve_z1(problem: Problem, model: Model, z1: np.ndarray, z2: np.ndarray, residuals: dict,
             beta1: float, tz1: dict | None = None, cg_iters: int = 5, data_scale: float = 1.0,
             threshold_rel: float = 1e-3, epsilon: float | None = None):
    """IRLS-weighted PCG on the normal equations for Z1, then hard thresholding.

    Minimizes ``data_scale * sum_j ||T_j Z1 Z2 - R_j||^2 / s_j
    + (beta1/2) ||Z1||_W^2`` with ``W = 1/(|Z1_0| + eps)`` and preconditioner
    ``W^{-1}``.  Data residuals are tracked through the iteration, so each CG
    step costs one forward and (except the last) one adjoint block of
    ``n_es`` solves per frequency, plus one adjoint block to start.
    """
    freqs = sorted(residuals)
    sig = problem.observed.sigma2
    eps = irls_epsilon(z1) if epsilon is None else epsilon
    w = irls_weights(z1, eps)
    minv = 1.0 / w
    lam = 0.5 * beta1

    if tz1 is None:
        tz1 = dict(zip(freqs, ordered_map(
            lambda j: problem.receivers.sample(solve(problem.factor(model, j), z1)), freqs)))
    rho = {j: residuals[j] - tz1[j] @ z2 for j in freqs}

    def neg_grad(x):
        parts = ordered_map(lambda j: op_adjoint(problem, model, j, (data_scale / sig[j]) * rho[j], z2),
                            freqs)
        s = -lam * w * x
        for part in parts:
            s = s + part
        return s

    def surrogate(x):
        return (sum(data_scale * weighted_norm2(rho[j], sig[j]) for j in freqs)
                + lam * float(np.sum(w * np.abs(x) ** 2)))

    x = z1.copy()
    history = [surrogate(x)]
    s = neg_grad(x)
    zvec = minv * s
    p = zvec.copy()
    gamma = np.vdot(s, zvec).real
    done = 0
    for it in range(cg_iters):
        if gamma <= 0:
            break
        outs = ordered_map(lambda j: op_forward(problem, model, j, p, z2)[0], freqs)
        q = dict(zip(freqs, outs))
        curv = sum(data_scale * weighted_norm2(q[j], sig[j]) for j in freqs) \
            + lam * float(np.sum(w * np.abs(p) ** 2))
        if curv <= 0:
            break
        step = gamma / curv
        x = x + step * p
        for j in freqs:
            rho[j] = rho[j] - step * q[j]
        done += 1
        history.append(surrogate(x))
        if it == cg_iters - 1:
            break
        s = neg_grad(x)
        zvec = minv * s
        gamma_new = np.vdot(s, zvec).real
        p = zvec + (gamma_new / gamma) * p
        gamma = gamma_new
    x = threshold(x, threshold_rel)
    return x, Z1SolveInfo(done, eps, history, nnz_fraction(x))


def extended_objective(problem: Problem, tz1: dict, z1: np.ndarray, z2: np.ndarray,
                       residuals: dict, beta1: float, beta2: float, data_scale: float = 1.0) -> float:
    """Model-independent part of the extended objective at fixed m (and sketch)."""
    sig = problem.observed.sigma2
    data = sum(data_scale * weighted_norm2(tz1[j] @ z2 - residuals[j], sig[j]) for j in residuals)
    return float(data + beta1 * np.sum(np.abs(z1))
                 + 0.5 * beta2 * data_scale * np.sum(np.abs(z2) ** 2))


@dataclass
class ALMPass:
    """Outcome of the Z2 -> Z1 -> Z2 half of an alternating iteration."""

    z1: np.ndarray
    z2: np.ndarray
    fields_q: dict
    fields_z1: dict
    residuals: dict
    tz1: dict
    misfit_with: float
    misfit_without: float
    objective_before: float
    objective_after: float
    z1_info: Z1SolveInfo


def alm_pass(problem: Problem, model: Model, z1: np.ndarray, betas: BetaState, freqs,
             x: np.ndarray | None = None, cg_iters: int = 5, threshold_rel: float = 1e-3) -> ALMPass:
    """Residuals, closed-form Z2 (or sketched Z2 X), IRLS-CG for Z1, Z2 again.

    With a sketch ``x`` (n_s x p), sources, data and residuals are all
    multiplied by it and the data terms carry a ``1/p`` weight.
    """
    freqs = list(freqs)
    sig = problem.observed.sigma2
    if x is None:
        src = problem.q
        data = {j: problem.observed.data[j] for j in freqs}
        scale = 1.0
    else:
        src = problem.q @ x
        data = {j: problem.observed.data[j] @ x for j in freqs}
        scale = 1.0 / x.shape[1]

    def base(j):
        f = problem.factor(model, j)
        return solve(f, src), solve(f, z1)

    outs = ordered_map(base, freqs)
    fields_q = {j: o[0] for j, o in zip(freqs, outs)}
    fields_z1 = {j: o[1] for j, o in zip(freqs, outs)}
    res = {j: data[j] - problem.receivers.sample(fields_q[j]) for j in freqs}
    tz1 = {j: problem.receivers.sample(fields_z1[j]) for j in freqs}
    # (1/p) scales the data term and the Z2 penalty alike, so the shift is beta2/2
    z2 = solve_z2([tz1[j] for j in freqs], [res[j] for j in freqs], sig[freqs], 0.5 * betas.beta2)
    before = extended_objective(problem, tz1, z1, z2, res, betas.beta1, betas.beta2, scale)

    with counter.phase("z1"):
        z1_new, info = solve_z1(problem, model, z1, z2, res, betas.beta1, tz1=tz1,
                                cg_iters=cg_iters, data_scale=scale, threshold_rel=threshold_rel)

    fz = ordered_map(lambda j: solve(problem.factor(model, j), z1_new), freqs)
    fields_z1 = dict(zip(freqs, fz))
    tz1 = {j: problem.receivers.sample(fields_z1[j]) for j in freqs}
    z2 = solve_z2([tz1[j] for j in freqs], [res[j] for j in freqs], sig[freqs], 0.5 * betas.beta2)
    after = extended_objective(problem, tz1, z1_new, z2, res, betas.beta1, betas.beta2, scale)
    with_ext = sum(scale * weighted_norm2(tz1[j] @ z2 - res[j], sig[j]) for j in freqs)
    without = sum(scale * weighted_norm2(res[j], sig[j]) for j in freqs)
    return ALMPass(z1_new, z2, fields_q, fields_z1, res, tz1, float(with_ext), float(without),
                   before, after, info)


def write_z1_file(path, z1: np.ndarray) -> None:
    n, n_es = z1.shape
    col, row = np.nonzero(z1.T)  # column-major order
    entries = np.empty(row.size, dtype=_Z1_ENTRY)
    entries["row"] = row
    entries["col"] = col
    vals = z1[row, col]
    entries["re"] = vals.real
    entries["im"] = vals.imag
    Path(path).write_bytes(_Z1_HEADER.pack(Z1_MAGIC, n, n_es, row.size) + entries.tobytes())


def read_z1_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != Z1_MAGIC:
        raise Z1FileError(f"{path}: not an FWIZ file")
    if len(raw) < _Z1_HEADER.size:
        raise Z1FileError(f"{path}: truncated header")
    _, n, n_es, nnz = _Z1_HEADER.unpack_from(raw)
    if len(raw) != _Z1_HEADER.size + nnz * _Z1_ENTRY.itemsize:
        raise Z1FileError(f"{path}: entry count does not match file size")
    entries = np.frombuffer(raw, _Z1_ENTRY, nnz, _Z1_HEADER.size)
    if nnz and (entries["row"].max() >= n or entries["col"].max() >= n_es):
        raise Z1FileError(f"{path}: entry index out of range")
    z1 = np.zeros((n, n_es), dtype=np.complex128)
    z1[entries["row"], entries["col"]] = entries["re"] + 1j * entries["im"]
    return z1
