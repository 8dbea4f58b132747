"""Jacobian products, the model gradient and the Gauss-Newton Hessian.

The model is real and fields are complex, so the adjoint of the Jacobian
with respect to a real perturbation is ``Re(J^H w)``.  Data terms carry a
``scale`` (1, or 1/p under a source sketch) and per-frequency weights
``1/sigma_j^2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .helmholtz import attenuation_profile, model_key, solve
from .mesh import Model
from .objective import Problem, Regularizer, reg_value_grad_hess, weighted_norm2
from .parallel import ordered_map


class StaleFieldsError(RuntimeError):
    """Fields were computed for a different model than the one supplied."""


@dataclass
class FieldStore:
    """Wavefields ``u_j = H_j^{-1} S`` and the data they are compared with.

    ``fields[j]`` is N x k, ``data[j]`` is n_r x k; ``mask`` (n_r x k or None)
    drops unrecorded entries from the data term.
    """

    version: str
    freqs: list
    fields: dict
    data: dict
    scale: float = 1.0
    mask: np.ndarray | None = None
    _weights: np.ndarray | None = field(default=None, repr=False)

    def check(self, model: Model):
        if model_key(model) != self.version:
            raise StaleFieldsError("field store does not belong to this model")

    @property
    def k(self) -> int:
        return next(iter(self.fields.values())).shape[1]


def compute_fields(problem: Problem, model: Model, sources: np.ndarray, data: dict,
                   freqs, scale: float = 1.0, mask=None) -> FieldStore:
    """Solve for the fields of an N x k source block at each frequency."""
    freqs = list(freqs)
    us = ordered_map(lambda j: solve(problem.factor(model, j), sources), freqs)
    return FieldStore(model_key(model), freqs, dict(zip(freqs, us)), dict(data), scale, mask)


def store_from_fields(model: Model, fields: dict, data: dict, scale: float = 1.0,
                      mask=None) -> FieldStore:
    freqs = sorted(fields)
    return FieldStore(model_key(model), freqs, dict(fields), dict(data), scale, mask)


def _mass_weight(problem: Problem) -> np.ndarray:
    return 1.0 + 1j * attenuation_profile(problem.grid, problem.gamma_max)


def jacobian_apply(problem: Problem, model: Model, store: FieldStore, j: int,
                   v: np.ndarray) -> np.ndarray:
    """``J_j v = -w^2 P^T H^-1 ((1+i gamma) u v)`` for every column of ``u``."""
    store.check(model)
    omega = problem.omega(j)
    u = store.fields[j]
    rhs = (-omega**2) * (_mass_weight(problem) * v)[:, None] * u
    return problem.receivers.sample(solve(problem.factor(model, j), rhs))


def jacobian_adjoint_apply(problem: Problem, model: Model, store: FieldStore, j: int,
                           w: np.ndarray) -> np.ndarray:
    """``Re(J_j^H w)`` summed over the columns; real N-vector."""
    store.check(model)
    omega = problem.omega(j)
    u = store.fields[j]
    lam = solve(problem.factor(model, j), problem.receivers.spread(w), adjoint=True)
    g = np.conj(_mass_weight(problem)[:, None] * u) * ((-omega**2) * lam)
    return np.sum(g.real, axis=1)


def residuals(problem: Problem, store: FieldStore) -> dict:
    return {j: problem.receivers.sample(store.fields[j]) - store.data[j] for j in store.freqs}


def data_misfit(problem: Problem, store: FieldStore) -> float:
    res = residuals(problem, store)
    return float(sum(
        store.scale * weighted_norm2(res[j], problem.observed.sigma2[j], store.mask)
        for j in store.freqs
    ))


def gradient(problem: Problem, model: Model, store: FieldStore,
             reg: Regularizer | None = None, mask_sponge: bool = True):
    """Gradient of ``scale * sum_j ||P^T u_j - D_j||^2 / sigma_j^2 + alpha R``.

    Returns ``(gradient, data misfit)``.  Entries inside the sponge are zeroed
    unless ``mask_sponge`` is false.
    """
    store.check(model)
    res = residuals(problem, store)
    sig = problem.observed.sigma2

    def one(j):
        r = res[j] if store.mask is None else res[j] * store.mask
        return jacobian_adjoint_apply(problem, model, store, j, (2.0 * store.scale / sig[j]) * r)

    parts = ordered_map(one, store.freqs)
    g = np.zeros(problem.grid.n)
    for part in parts:
        g += part
    misfit = float(sum(store.scale * weighted_norm2(res[j], sig[j], store.mask)
                       for j in store.freqs))
    if reg is not None and reg.alpha:
        _, rg, _ = reg_value_grad_hess(problem.grid, model, reg)
        g += reg.alpha * rg
    if mask_sponge:
        g[~problem.grid.interior_mask()] = 0.0
    return g, misfit


def gn_hessian_apply(problem: Problem, model: Model, store: FieldStore, v: np.ndarray,
                     reg: Regularizer | None = None, mask_sponge: bool = True) -> np.ndarray:
    """``sum_j 2 scale Re(J_j^H J_j v) / sigma_j^2 + alpha * 2 A^T A v``."""
    store.check(model)
    sig = problem.observed.sigma2
    keep = problem.grid.interior_mask() if mask_sponge else None
    if keep is not None:
        v = np.where(keep, v, 0.0)

    def one(j):
        jv = jacobian_apply(problem, model, store, j, v)
        if store.mask is not None:
            jv = jv * store.mask
        return jacobian_adjoint_apply(problem, model, store, j, (2.0 * store.scale / sig[j]) * jv)

    out = np.zeros(problem.grid.n)
    for part in ordered_map(one, store.freqs):
        out += part
    if reg is not None and reg.alpha:
        out += reg.alpha * (reg.gram(problem.grid) @ v)
    if keep is not None:
        out[~keep] = 0.0
    return out
