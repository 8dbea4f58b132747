"""Projected Gauss-Newton with preconditioned CG inner solves and Armijo search."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_solve_banded, cholesky_banded

from .mesh import Grid, Model, RawModel, project_to_bounds
from .objective import Regularizer

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GNConfig:
    max_gn_iters: int = 10
    cg_iters: int = 5
    armijo_c: float = 1e-4
    backtrack_factor: float = 0.5
    max_backtracks: int = 10
    precond_shift: float = 1e-5

    def __post_init__(self):
        if self.cg_iters < 1:
            raise ValueError("cg_iters must be at least 1")
        if not 0 < self.backtrack_factor < 1:
            raise ValueError("backtrack_factor must lie in (0, 1)")


class RegularizerPreconditioner:
    """Solves ``(2 A^T A + delta I) z = r`` with a banded Cholesky factor.

    ``delta`` is ``shift`` times the mean diagonal of ``2 A^T A``; it makes the
    smoothing Hessian invertible on constants.  Sponge entries pass through
    as zeros when ``keep`` is given.
    """

    def __init__(self, grid: Grid, reg: Regularizer, shift: float = 1e-5,
                 keep: np.ndarray | None = None):
        gram = reg.gram(grid)
        self.delta = shift * float(gram.diagonal().mean())
        self.matrix = (gram + self.delta * sp.identity(grid.n)).tocsr()
        coo = sp.triu(self.matrix).tocoo()
        self.bandwidth = int(np.max(coo.col - coo.row))
        ab = np.zeros((self.bandwidth + 1, grid.n))
        ab[self.bandwidth + coo.row - coo.col, coo.col] = coo.data
        self._factor = cholesky_banded(ab, lower=False)
        self.keep = keep

    def __call__(self, r: np.ndarray) -> np.ndarray:
        z = cho_solve_banded((self._factor, False), r)
        if self.keep is not None:
            z = np.where(self.keep, z, 0.0)
        return z


def pcg(apply_a, b: np.ndarray, precond=None, iters: int = 5, x0=None):
    """Fixed-count preconditioned CG; stops early only on breakdown.

    Returns ``(x, n_iterations)``.  Works for real symmetric and complex
    Hermitian operators (inner products use ``vdot``).
    """
    x = np.zeros_like(b) if x0 is None else np.array(x0)
    r = b - apply_a(x) if x0 is not None else b.copy()
    z = precond(r) if precond is not None else r
    p = z.copy()
    gamma = np.vdot(r, z).real
    done = 0
    for _ in range(iters):
        if gamma <= 0:
            break
        q = apply_a(p)
        curv = np.vdot(p, q).real
        if curv <= 0:
            break
        step = gamma / curv
        x = x + step * p
        r = r - step * q
        done += 1
        z = precond(r) if precond is not None else r
        gamma_new = np.vdot(r, z).real
        p = z + (gamma_new / gamma) * p
        gamma = gamma_new
    return x, done


@dataclass
class StepInfo:
    accepted: bool
    mu: float
    trials: int
    cg_iterations: int
    value_old: float
    value_new: float
    directional: float
    extra: dict = field(default_factory=dict)


def gn_step(model: Model, value: float, grad: np.ndarray, hess_apply, evaluate,
            config: GNConfig = GNConfig(), precond=None):
    """One projected GN iteration.

    ``evaluate(model)`` returns the objective (or a tuple whose first item is
    the objective) at a trial point.  Returns ``(model, value, info, payload)``
    where ``payload`` is whatever ``evaluate`` returned at the accepted point.
    On line-search failure the input model is returned and ``info.accepted``
    is false.
    """
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    direction, cg_done = pcg(hess_apply, -grad, precond, config.cg_iters)
    mu = 1.0
    trials = 0
    for _ in range(config.max_backtracks):
        trials += 1
        trial = project_to_bounds(RawModel(model.values + mu * direction,
                                           model.m_low, model.m_high))
        step = trial.values - model.values
        slope = float(grad @ step)
        out = evaluate(trial)
        new_value = out[0] if isinstance(out, tuple) else out
        if slope < 0 and np.isfinite(new_value) and \
                new_value <= value + config.armijo_c * slope:
            info = StepInfo(True, mu, trials, cg_done, value, new_value, slope)
            return trial, new_value, info, out
        mu *= config.backtrack_factor
    log.warning("line search failed after %d trials; model unchanged", trials)
    info = StepInfo(False, 0.0, trials, cg_done, value, value, 0.0)
    return model, value, info, None
