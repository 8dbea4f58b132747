"""Frequency-domain full-waveform inversion with low-rank, sparse extended sources."""

from .config import RunConfig, build_setup, load_config, parse_config
from .driver import (ContinuationSchedule, SweepConfig, draw_sketch, expected_cost,
                     run_inversion)
from .helmholtz import FactorizationCache, assemble, counter, factorize, solve
from .mesh import Grid, Model, read_model_file, write_model_file

__all__ = [
    "ContinuationSchedule", "FactorizationCache", "Grid", "Model", "RunConfig", "SweepConfig",
    "assemble", "build_setup", "counter", "draw_sketch", "expected_cost", "factorize",
    "load_config", "parse_config", "read_model_file", "run_inversion", "solve",
    "write_model_file",
]
__version__ = "0.1.0"
