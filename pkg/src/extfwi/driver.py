"""Frequency-continuation sweeps with alternating extension/model updates."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .extended import BetaState, alm_pass, init_z1, nnz_fraction, update_betas, write_z1_file
from .helmholtz import counter, model_key, solve
from .mesh import Model, write_model_file
from .objective import DIFFUSION, SPLINE, Problem, Regularizer, reduced_misfit, reg_value_grad_hess
from .optimizer import GNConfig, RegularizerPreconditioner, gn_step
from .parallel import ordered_map
from .sensitivity import data_misfit, gradient, gn_hessian_apply, store_from_fields

log = logging.getLogger(__name__)

STANDARD = "standard"
EXTENDED = "extended"
EXTENDED_SS = "extended+simultaneous"
SIMULTANEOUS = "simultaneous"
MODES = (STANDARD, EXTENDED, EXTENDED_SS, SIMULTANEOUS)

REPORT_PHASE = "report"
GN_PHASE = "gn"
Z1_PHASE = "z1"
RESIDUAL_PHASE = "residual"

HISTORY_HEADER = ["sweep", "outer", "inner", "mode", "freq_hi_hz", "misfit_report",
                  "data_misfit_active", "beta1", "beta2", "z1_nnz_frac", "solves_cum"]


class InversionError(RuntimeError):
    """A solver or line-search failure, tagged with its sweep and window."""


@dataclass(frozen=True)
class SweepConfig:
    mode: str = STANDARD
    regularizer: str = DIFFUSION
    alpha: float = 0.0
    iters: int = 10
    p: int | None = None
    resample_every_iteration: bool = True
    i_start: int | None = None
    i_end: int | None = None
    reset_z1: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.regularizer not in (SPLINE, DIFFUSION):
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if self.iters < 1:
            raise ValueError("iters must be at least 1")
        if self.sketched and (self.p is None or self.p < 1):
            raise ValueError(f"mode {self.mode!r} needs p >= 1")

    @property
    def extended(self) -> bool:
        return self.mode in (EXTENDED, EXTENDED_SS)

    @property
    def sketched(self) -> bool:
        return self.mode in (SIMULTANEOUS, EXTENDED_SS)


@dataclass(frozen=True)
class ContinuationSchedule:
    frequencies: tuple
    window_size: int = 4
    i_start: int = 1
    i_end: int | None = None
    sweeps: tuple = (SweepConfig(),)

    def __post_init__(self):
        freqs = tuple(float(f) for f in self.frequencies)
        if list(freqs) != sorted(freqs) or len(set(freqs)) != len(freqs):
            raise ValueError("frequencies must be strictly increasing")
        object.__setattr__(self, "frequencies", freqs)
        object.__setattr__(self, "sweeps", tuple(self.sweeps))
        if self.i_end is None:
            object.__setattr__(self, "i_end", len(freqs))
        if self.window_size < 0:
            raise ValueError("window_size must be non-negative")
        for sw in self.sweeps:
            lo, hi = self.bounds(sw)
            if not 1 <= lo <= hi <= len(freqs):
                raise ValueError(f"need 1 <= i_start <= i_end <= {len(freqs)}, got {lo}..{hi}")

    @property
    def n_f(self) -> int:
        return len(self.frequencies)

    def bounds(self, sweep: SweepConfig) -> tuple[int, int]:
        lo = self.i_start if sweep.i_start is None else sweep.i_start
        hi = self.i_end if sweep.i_end is None else sweep.i_end
        return lo, hi

    def window(self, i: int) -> list[int]:
        """Zero-based frequency indices for the 1-based outer step ``i``."""
        return list(range(max(i - self.window_size, 1) - 1, i))

    def n_inner_iterations(self) -> int:
        total = 0
        for sw in self.sweeps:
            lo, hi = self.bounds(sw)
            total += (hi - lo + 1) * sw.iters
        return total


def marmousi_schedule(frequencies=(3.0, 3.5, 4.0, 4.5, 5.0, 5.5, 6.0, 6.5, 7.0),
                      mode: str = STANDARD, p: int | None = None, alpha: float = 0.0,
                      iters: int = 10) -> ContinuationSchedule:
    """One smoothing sweep over the first four frequencies, then two sweeps over the rest."""
    n_f = len(frequencies)
    first = SweepConfig(mode=mode, regularizer=SPLINE, alpha=alpha, iters=iters, p=p,
                        i_start=1, i_end=min(4, n_f))
    rest = SweepConfig(mode=STANDARD, regularizer=DIFFUSION, alpha=alpha, iters=iters,
                       i_start=min(5, n_f), i_end=n_f)
    return ContinuationSchedule(tuple(frequencies), 4, 1, n_f, (first, rest, rest))


def draw_sketch(n_s: int, p: int, seed: int, draw: int) -> np.ndarray:
    """Rademacher ``n_s x p`` matrix, deterministic in ``(seed, draw)``."""
    if not 1 <= p <= n_s:
        raise ValueError(f"p must lie in [1, {n_s}], got {p}")
    rng = np.random.default_rng([int(seed), int(draw)])
    return rng.choice(np.array([-1.0, 1.0]), size=(n_s, p))


@dataclass
class IterationTrace:
    """Data-dependent counts of one inner iteration, used for cost prediction."""

    sweep: int
    outer: int
    mode: str
    window: list
    k: int
    gn_cg: int
    trials: int
    accepted: bool
    z1_cg: int = 0


@dataclass
class InversionState:
    model: Model
    seed: int = 0
    z1: np.ndarray | None = None
    betas: BetaState | None = None
    sketch_draws: int = 0
    history: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    report: float | None = None
    report_key: str | None = None
    initial_report: float | None = None
    gn_solves: int = 0


def _report(problem: Problem, state: InversionState) -> float:
    key = model_key(state.model)
    if key != state.report_key:
        with counter.phase(REPORT_PHASE):
            state.report = reduced_misfit(problem, state.model).data_misfit
        state.report_key = key
    return state.report


def _non_report_solves() -> int:
    return counter.forward_solves - counter.solves_by_phase.get(REPORT_PHASE, 0)


def _gn_update(problem, state, sweep, reg, window, fields, sources, data, scale, mask,
               penalty, config: GNConfig, precond):
    """Gradient, PCG direction and Armijo search for fixed sources."""
    store = store_from_fields(state.model, fields, data, scale, mask)
    g, misfit = gradient(problem, state.model, store, reg)
    reg_val = reg_value_grad_hess(problem.grid, state.model, reg)[0] if reg.alpha else 0.0
    value = misfit + reg.alpha * reg_val + penalty

    def hess(v):
        return gn_hessian_apply(problem, state.model, store, v, reg)

    def evaluate(trial):
        us = ordered_map(lambda j: solve(problem.factor(trial, j), sources), window)
        trial_store = store_from_fields(trial, dict(zip(window, us)), data, scale, mask)
        mis = data_misfit(problem, trial_store)
        r = reg_value_grad_hess(problem.grid, trial, reg)[0] if reg.alpha else 0.0
        return mis + reg.alpha * r + penalty, mis

    new_model, _, info, payload = gn_step(state.model, value, g, hess, evaluate, config, precond)
    active = payload[1] if info.accepted else misfit
    return new_model, info, active


def _inner_iteration(problem: Problem, state: InversionState, sweep: SweepConfig, sweep_no: int,
                     outer: int, schedule: ContinuationSchedule, reg: Regularizer,
                     config: GNConfig, precond, fixed_x, z1_cg_iters: int, threshold_rel: float):
    window = schedule.window(outer)
    x = None
    if sweep.sketched:
        if fixed_x is not None:
            x = fixed_x
        else:
            x = draw_sketch(problem.sources.n_sources, sweep.p, state.seed, state.sketch_draws)
            state.sketch_draws += 1
    if x is None:
        sources, scale = problem.q, 1.0
        data = {j: problem.observed.data[j] for j in window}
        mask = problem.observed.weight_mask()
    else:
        sources, scale = problem.q @ x, 1.0 / x.shape[1]
        data = {j: problem.observed.data[j] @ x for j in window}
        mask = None

    z1_cg = 0
    penalty = 0.0
    if sweep.extended:
        with counter.phase(RESIDUAL_PHASE):
            alm = alm_pass(problem, state.model, state.z1, state.betas, window, x,
                           cg_iters=z1_cg_iters, threshold_rel=threshold_rel)
        state.z1 = alm.z1
        z1_cg = alm.z1_info.iterations
        z2 = alm.z2
        fields = {j: alm.fields_q[j] + alm.fields_z1[j] @ z2 for j in window}
        sources = sources + alm.z1 @ z2
        penalty = (state.betas.beta1 * float(np.sum(np.abs(alm.z1)))
                   + 0.5 * state.betas.beta2 * scale * float(np.sum(np.abs(z2) ** 2)))
        ratio_with, ratio_without = alm.misfit_with, alm.misfit_without
        if mask is not None:
            mask = None  # the extension fits every recorded trace; masks are for completion only
    else:
        with counter.phase(GN_PHASE):
            fields = dict(zip(window, ordered_map(
                lambda j: solve(problem.factor(state.model, j), sources), window)))

    with counter.phase(GN_PHASE):
        new_model, info, active = _gn_update(problem, state, sweep, reg, window, fields, sources,
                                             data, scale, mask, penalty, config, precond)
    if not info.accepted:
        log.warning("sweep %d, outer step %d: line search failed", sweep_no, outer)
    state.model = new_model
    problem.cache.prune(state.model)
    if info.accepted:
        reg.accept(state.model)

    if sweep.extended and ratio_without > 0:
        state.betas = update_betas(state.betas, ratio_with, ratio_without)

    state.trace.append(IterationTrace(sweep_no, outer, sweep.mode, window, sources.shape[1],
                                      info.cg_iterations, info.trials, info.accepted, z1_cg))
    return active


def run_sweep(problem: Problem, state: InversionState, sweep: SweepConfig, sweep_no: int,
              schedule: ContinuationSchedule, config: GNConfig = GNConfig(), n_es: int = 16,
              z1_cg_iters: int = 5, threshold_rel: float = 1e-3, history_path=None) -> InversionState:
    """Run every outer step and inner iteration of one sweep."""
    if sweep.sketched and sweep.p > problem.sources.n_sources:
        raise ValueError(f"p = {sweep.p} exceeds the {problem.sources.n_sources} sources")
    if sweep.mode == EXTENDED_SS and sweep.p < n_es:
        warnings.warn(f"p = {sweep.p} < n_es = {n_es}: the extension may over-fit sketched data",
                      stacklevel=2)
    if sweep.extended:
        if state.betas is None:
            raise ValueError("extended modes need initial beta values")
        if state.z1 is None or sweep.reset_z1:
            state.z1 = init_z1(problem.grid, n_es, seed=[state.seed, 1])
    reg = Regularizer(sweep.regularizer, sweep.alpha, state.model.values)
    keep = problem.grid.interior_mask()
    precond = RegularizerPreconditioner(problem.grid, reg, config.precond_shift, keep) \
        if sweep.alpha > 0 else None
    fixed_x = None
    if sweep.sketched and not sweep.resample_every_iteration:
        fixed_x = draw_sketch(problem.sources.n_sources, sweep.p, state.seed, state.sketch_draws)
        state.sketch_draws += 1

    lo, hi = schedule.bounds(sweep)
    for outer in range(lo, hi + 1):
        for inner in range(1, sweep.iters + 1):
            try:
                active = _inner_iteration(problem, state, sweep, sweep_no, outer, schedule, reg,
                                          config, precond, fixed_x, z1_cg_iters, threshold_rel)
            except (FloatingPointError, ArithmeticError, np.linalg.LinAlgError) as exc:
                raise InversionError(
                    f"sweep {sweep_no}, outer step {outer} "
                    f"(window {[schedule.frequencies[j] for j in schedule.window(outer)]} Hz): {exc}"
                ) from exc
            state.gn_solves = _non_report_solves()
            report = _report(problem, state)
            betas = state.betas if sweep.extended else None
            row = [sweep_no, outer, inner, sweep.mode, schedule.frequencies[outer - 1], report,
                   active, betas.beta1 if betas else 0.0, betas.beta2 if betas else 0.0,
                   nnz_fraction(state.z1) if sweep.extended else 0.0, state.gn_solves]
            state.history.append(row)
            if history_path is not None:
                _append_row(history_path, row)
            log.info("sweep %d outer %d inner %d: report %.6g", sweep_no, outer, inner, report)
    return state


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _append_row(path, row):
    with open(path, "a", newline="") as fh:
        csv.writer(fh).writerow([_fmt(v) for v in row])


def write_history(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_HEADER)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def run_inversion(problem: Problem, model0: Model, schedule: ContinuationSchedule, *,
                  seed: int = 0, n_es: int = 16, beta1: float = 0.1, beta2: float | None = None,
                  config: GNConfig = GNConfig(), z1_cg_iters: int = 5,
                  threshold_rel: float = 1e-3, out_dir=None) -> InversionState:
    """Run all sweeps of ``schedule`` from ``model0``.

    With ``out_dir`` the misfit history is streamed to ``history.csv`` and the
    model (and Z1, when present) is checkpointed after each sweep.
    """
    if problem.observed.n_frequencies < schedule.n_f:
        raise ValueError("observed data does not cover the schedule frequencies")
    for j, f in enumerate(schedule.frequencies):
        if not np.isclose(problem.observed.frequencies[j], f):
            raise ValueError(f"schedule frequency {f} Hz does not match data "
                             f"frequency {problem.observed.frequencies[j]} Hz")
    betas = BetaState(beta1, beta2) if any(sw.extended for sw in schedule.sweeps) else None
    state = InversionState(model0, seed, betas=betas)
    history_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        history_path = out_dir / "history.csv"
        write_history(history_path, [])
    state.initial_report = _report(problem, state)
    for sweep_no, sweep in enumerate(schedule.sweeps, start=1):
        run_sweep(problem, state, sweep, sweep_no, schedule, config, n_es, z1_cg_iters,
                  threshold_rel, history_path)
        if out_dir is not None:
            write_model_file(out_dir / f"checkpoint_sweep{sweep_no}.fwim", problem.grid,
                             state.model)
            if state.z1 is not None:
                write_z1_file(out_dir / f"checkpoint_sweep{sweep_no}.fwiz", state.z1)
    if out_dir is not None:
        write_model_file(out_dir / "model.fwim", problem.grid, state.model)
    return state


@dataclass
class CostPrediction:
    forward_solves: int = 0
    factorizations: int = 0
    by_phase: dict = field(default_factory=dict)
    per_sweep: list = field(default_factory=list)

    def add(self, phase: str, solves: int):
        self.forward_solves += solves
        self.by_phase[phase] = self.by_phase.get(phase, 0) + solves


def expected_cost(schedule: ContinuationSchedule, n_s: int, n_es: int = 16,
                  config: GNConfig = GNConfig(), z1_cg_iters: int = 5,
                  trace: list | None = None, include_report: bool = False) -> CostPrediction:
    """Predicted solve and factorization counts.

    Per inner iteration on a window of ``nw`` frequencies with ``k`` source
    columns (``n_s``, or ``p`` when sketched):

    * standard: ``nw * k * (1 + 1 + 2 cg + trials)`` (fields, gradient, GN-CG,
      line search), one factorization per trial and frequency;
    * extended: the same GN terms plus ``nw * (k + n_es)`` for the residual and
      ``H^-1 Z1``, ``nw * n_es * 2 cg_z1`` for the Z1 normal equations and
      ``nw * n_es`` to refresh ``H^-1 Z1``.

    ``trace`` supplies the measured CG and line-search counts of a run; without
    it every CG runs in full and every first trial is accepted.  The report
    phase (original sources, all frequencies) is counted only on request.
    """
    pred = CostPrediction()
    if trace is None:
        trace = []
        for sweep_no, sw in enumerate(schedule.sweeps, start=1):
            lo, hi = schedule.bounds(sw)
            k = sw.p if sw.sketched else n_s
            for outer in range(lo, hi + 1):
                for _ in range(sw.iters):
                    trace.append(IterationTrace(sweep_no, outer, sw.mode, schedule.window(outer),
                                                k, config.cg_iters, 1, True,
                                                z1_cg_iters if sw.mode in (EXTENDED, EXTENDED_SS)
                                                else 0))
    n_f = schedule.n_f
    if include_report:
        pred.add(REPORT_PHASE, n_s * n_f)
        pred.factorizations += n_f
    sweep_totals: dict[int, int] = {}
    for it in trace:
        nw = len(it.window)
        before = pred.forward_solves
        if it.mode in (EXTENDED, EXTENDED_SS):
            adj = max(it.z1_cg - 1, 0) if it.z1_cg == z1_cg_iters else it.z1_cg
            pred.add(RESIDUAL_PHASE, nw * (it.k + n_es))
            pred.add(Z1_PHASE, nw * n_es * (1 + it.z1_cg + adj))
            pred.add(RESIDUAL_PHASE, nw * n_es)
        else:
            pred.add(GN_PHASE, nw * it.k)
        pred.add(GN_PHASE, nw * it.k * (1 + 2 * it.gn_cg + it.trials))
        pred.factorizations += nw * it.trials
        if include_report and it.accepted:
            pred.add(REPORT_PHASE, n_s * n_f)
            pred.factorizations += n_f - nw
        sweep_totals[it.sweep] = sweep_totals.get(it.sweep, 0) + pred.forward_solves - before
    pred.per_sweep = [sweep_totals[s] for s in sorted(sweep_totals)]
    return pred
