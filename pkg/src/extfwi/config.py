"""Run configuration: an INI-style file of ``key = value`` lines in sections.

Every key has a default; unknown sections and keys are rejected with their
line number.  Sweeps are sections named ``sweep1``, ``sweep2``, ... and run
in numeric order.
"""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .acquisition import ReceiverSet, SourceSet, generate_data, read_data_file, spread_positions
from .driver import ContinuationSchedule, SweepConfig
from .helmholtz import DEFAULT_GAMMA_MAX
from .mesh import Grid, Model, read_model_file
from .objective import DIFFUSION, SPLINE, Problem
from .optimizer import GNConfig
from .phantoms import PHANTOMS, linear_gradient, make_phantom, smooth_background


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in re.split(r"[,\s]+", text.strip()) if x)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str):
    return None if text.strip().lower() in ("", "none") else int(text)


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "none") else float(text)


def _opt_str(text: str):
    return None if text.strip().lower() in ("", "none") else text.strip()


@dataclass
class RunConfig:
    """All run parameters; the defaults are the shipped 64 x 32 desk configuration."""

    # [grid]
    nx: int = 64
    nz: int = 32
    h: float = 0.05
    sponge: int = 6
    gamma_max: float = DEFAULT_GAMMA_MAX
    # [model]
    phantom: str = "two_layer"
    true_model: str | None = None
    initial: str = "gradient"
    initial_model: str | None = None
    v_low: float = 1.0
    v_high: float = 6.0
    v_top: float = 2.0
    v_bottom: float = 3.0
    # [acquisition]
    n_sources: int = 8
    n_receivers: int = 16
    frequencies: tuple = (2.0, 3.0, 4.0, 5.0)
    noise: float = 0.01
    data: str | None = None
    # [inversion]
    window_size: int = 4
    i_start: int = 1
    i_end: int | None = None
    n_es: int = 4
    beta1: float = 1.0
    beta2: float | None = None
    z1_cg_iters: int = 5
    threshold_rel: float = 1e-3
    cg_iters: int = 5
    max_backtracks: int = 10
    armijo_c: float = 1e-4
    # [greens]
    greens_velocity: float = 2.0
    greens_frequency: float = 4.0
    greens_ppw: float = 15.0
    greens_tolerance: float = 0.05
    # [run]
    seed: int = 0
    sweeps: list = field(default_factory=lambda: [
        SweepConfig(mode="standard", regularizer=SPLINE, alpha=100.0, iters=5),
        SweepConfig(mode="standard", regularizer=DIFFUSION, alpha=100.0, iters=5),
    ])

    def grid(self) -> Grid:
        return Grid(self.nx, self.nz, self.h, self.h, self.sponge)

    def schedule(self) -> ContinuationSchedule:
        return ContinuationSchedule(self.frequencies, self.window_size, self.i_start,
                                    self.i_end, tuple(self.sweeps))

    def gn_config(self) -> GNConfig:
        return GNConfig(cg_iters=self.cg_iters, armijo_c=self.armijo_c,
                        max_backtracks=self.max_backtracks)

    def with_first_sweep_mode(self, mode: str, p: int | None = None) -> "RunConfig":
        """Copy with the first sweep switched to ``mode`` (for mode comparisons)."""
        first = dataclasses.replace(self.sweeps[0], mode=mode, p=p if p else self.sweeps[0].p)
        return dataclasses.replace(self, sweeps=[first] + list(self.sweeps[1:]))


_SECTIONS = {
    "grid": {"nx": int, "nz": int, "h": float, "sponge": int, "gamma_max": float},
    "model": {"phantom": str, "true_model": _opt_str, "initial": str,
              "initial_model": _opt_str, "v_low": float, "v_high": float, "v_top": float,
              "v_bottom": float},
    "acquisition": {"n_sources": int, "n_receivers": int, "frequencies": _floats,
                    "noise": float, "data": _opt_str},
    "inversion": {"window_size": int, "i_start": int, "i_end": _opt_int, "n_es": int,
                  "beta1": float, "beta2": _opt_float, "z1_cg_iters": int,
                  "threshold_rel": float, "cg_iters": int, "max_backtracks": int,
                  "armijo_c": float},
    "greens": {"velocity": ("greens_velocity", float), "frequency": ("greens_frequency", float),
               "ppw": ("greens_ppw", float), "tolerance": ("greens_tolerance", float)},
    "run": {"seed": int},
}

_SWEEP_KEYS = {"mode": str, "regularizer": str, "alpha": float, "iters": int, "p": _opt_int,
               "resample_every_iteration": _bool, "i_start": _opt_int, "i_end": _opt_int,
               "reset_z1": _bool}


def _line_numbers(text: str) -> dict:
    """Map (section, key) and (section, None) to 1-based line numbers."""
    where, section = {}, None
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip().lower()
            where.setdefault((section, None), no)
        elif section is not None:
            key = re.split(r"[=:]", s, maxsplit=1)[0].strip().lower()
            where.setdefault((section, key), no)
    return where


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    lines = _line_numbers(text)
    values: dict = {}
    sweep_sections = []
    for section in parser.sections():
        name = section.lower()
        if re.fullmatch(r"sweep\d+", name):
            sweep_sections.append(name)
            continue
        if name not in _SECTIONS:
            raise ConfigError(f"{source}:{lines.get((name, None), '?')}: unknown section [{section}]")
        for key, raw in parser.items(section):
            spec = _SECTIONS[name].get(key)
            if spec is None:
                raise ConfigError(f"{source}:{lines.get((name, key), '?')}: "
                                  f"unknown key {key!r} in [{section}]")
            attr, conv = spec if isinstance(spec, tuple) else (key, spec)
            try:
                values[attr] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"{source}:{lines.get((name, key), '?')}: "
                                  f"bad value for {key}: {exc}") from exc
    cfg = RunConfig(**values)
    if sweep_sections:
        sweeps = []
        for name in sorted(sweep_sections, key=lambda s: int(s[5:])):
            kwargs = {}
            for key, raw in parser.items(name):
                conv = _SWEEP_KEYS.get(key)
                if conv is None:
                    raise ConfigError(f"{source}:{lines.get((name, key), '?')}: "
                                      f"unknown key {key!r} in [{name}]")
                try:
                    kwargs[key] = conv(raw)
                except ValueError as exc:
                    raise ConfigError(f"{source}:{lines.get((name, key), '?')}: "
                                      f"bad value for {key}: {exc}") from exc
            try:
                sweeps.append(SweepConfig(**kwargs))
            except ValueError as exc:
                raise ConfigError(f"{source}:{lines.get((name, None), '?')}: {exc}") from exc
        cfg.sweeps = sweeps
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def validate(cfg: RunConfig) -> None:
    try:
        cfg.grid()
        cfg.schedule()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.phantom not in PHANTOMS:
        raise ConfigError(f"unknown phantom {cfg.phantom!r}; expected one of {PHANTOMS}")
    if cfg.initial not in ("gradient", "smoothed", "file"):
        raise ConfigError(f"initial must be gradient, smoothed or file, not {cfg.initial!r}")
    if cfg.initial == "file" and not cfg.initial_model:
        raise ConfigError("initial = file needs initial_model")
    if not 0 < cfg.v_low < cfg.v_high:
        raise ConfigError("need 0 < v_low < v_high")
    if cfg.n_es < 1 or cfg.beta1 <= 0 or (cfg.beta2 is not None and cfg.beta2 <= 0):
        raise ConfigError("n_es must be >= 1 and betas positive")
    if cfg.noise < 0:
        raise ConfigError("noise must be non-negative")
    for sw in cfg.sweeps:
        if sw.sketched and sw.p > cfg.n_sources:
            raise ConfigError(f"p = {sw.p} exceeds n_sources = {cfg.n_sources}")


def format_config(cfg: RunConfig) -> str:
    """Render ``cfg`` in the file format (round-trips through :func:`parse_config`)."""
    def fmt(v):
        if v is None:
            return "none"
        if isinstance(v, tuple):
            return ", ".join(repr(x) for x in v)
        return repr(v) if isinstance(v, float) else str(v)

    out = []
    for name, keys in _SECTIONS.items():
        out.append(f"[{name}]")
        for key, spec in keys.items():
            attr = spec[0] if isinstance(spec, tuple) else key
            out.append(f"{key} = {fmt(getattr(cfg, attr))}")
        out.append("")
    for i, sw in enumerate(cfg.sweeps, start=1):
        out.append(f"[sweep{i}]")
        for key in _SWEEP_KEYS:
            out.append(f"{key} = {fmt(getattr(sw, key))}")
        out.append("")
    return "\n".join(out)


@dataclass
class Setup:
    grid: Grid
    true_model: Model | None
    initial_model: Model
    sources: SourceSet
    receivers: ReceiverSet
    problem: Problem | None = None


def _load_model(path, grid: Grid, cfg: RunConfig) -> Model:
    file_grid, model = read_model_file(path)
    if (file_grid.nx, file_grid.nz) != (grid.nx, grid.nz):
        raise ConfigError(f"{path}: grid {file_grid.nx}x{file_grid.nz} does not match "
                          f"configured {grid.nx}x{grid.nz}")
    return Model.from_velocity(model.velocity, cfg.v_low, cfg.v_high)


def true_model(cfg: RunConfig, grid: Grid) -> Model:
    if cfg.true_model:
        return _load_model(cfg.true_model, grid, cfg)
    return Model.from_velocity(make_phantom(cfg.phantom, grid, seed=cfg.seed), cfg.v_low, cfg.v_high)


def initial_model(cfg: RunConfig, grid: Grid, truth: Model | None) -> Model:
    if cfg.initial == "file":
        return _load_model(cfg.initial_model, grid, cfg)
    if cfg.initial == "smoothed":
        if truth is None:
            raise ConfigError("initial = smoothed needs a true model")
        return Model.from_velocity(smooth_background(grid, truth.velocity), cfg.v_low, cfg.v_high)
    return Model.from_velocity(linear_gradient(grid, cfg.v_top, cfg.v_bottom), cfg.v_low,
                               cfg.v_high)


def geometry(cfg: RunConfig, grid: Grid) -> tuple[SourceSet, ReceiverSet]:
    return (SourceSet(grid, tuple(spread_positions(grid, cfg.n_sources))),
            ReceiverSet(grid, tuple(spread_positions(grid, cfg.n_receivers))))


def build_setup(cfg: RunConfig, with_data: bool = True) -> Setup:
    """Grid, models, geometry and (unless ``with_data`` is false) the problem.

    Observed data come from ``cfg.data`` when set, otherwise they are
    simulated from the true model with the configured noise.
    """
    grid = cfg.grid()
    truth = true_model(cfg, grid) if (cfg.data is None or cfg.initial == "smoothed") else None
    m0 = initial_model(cfg, grid, truth)
    src, rec = geometry(cfg, grid)
    setup = Setup(grid, truth, m0, src, rec)
    if with_data:
        if cfg.data is not None:
            obs = read_data_file(cfg.data)
            if not np.allclose(obs.frequencies[:len(cfg.frequencies)], cfg.frequencies):
                raise ConfigError(f"{cfg.data}: frequencies {list(obs.frequencies)} do not "
                                  f"match configured {list(cfg.frequencies)}")
        else:
            obs = generate_data(grid, truth, src, rec, cfg.frequencies, cfg.noise,
                                seed=cfg.seed, gamma_max=cfg.gamma_max)
        try:
            setup.problem = Problem(grid, src, rec, obs, cfg.gamma_max)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return setup
