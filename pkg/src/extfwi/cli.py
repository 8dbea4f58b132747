"""Command-line front end: ``extfwi <command> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .acquisition import generate_data, write_data_file
from .config import ConfigError, RunConfig, build_setup, load_config
from .driver import (EXTENDED, EXTENDED_SS, SIMULTANEOUS, STANDARD, InversionError, expected_cost,
                     run_inversion, write_history)
from .greens import greens_check
from .helmholtz import SingularOperatorError, counter
from .mesh import ModelFileError, read_model_file, write_model_file
from .parallel import set_threads

log = logging.getLogger("extfwi")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_TOLERANCE = 0, 2, 3, 4

MODE_LABELS = {SIMULTANEOUS: "FWI+SS", EXTENDED_SS: "FWI+ES+SS", STANDARD: "FWI",
               EXTENDED: "FWI+ES"}


def _configure_logging():
    level = os.environ.get("FWI_LOG", "info").lower()
    levels = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"FWI_LOG must be one of {sorted(levels)}, not {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def cmd_forward(cfg: RunConfig, out: Path) -> int:
    """Simulate observed data (and its noiseless twin) from the true model."""
    setup = build_setup(cfg, with_data=False)
    truth = setup.true_model
    if truth is None:
        from .config import true_model
        truth = true_model(cfg, setup.grid)
    obs, clean = generate_data(setup.grid, truth, setup.sources, setup.receivers,
                               cfg.frequencies, cfg.noise, seed=cfg.seed,
                               gamma_max=cfg.gamma_max, return_clean=True)
    write_data_file(out / "data.fwid", obs)
    write_data_file(out / "data_clean.fwid", clean)
    write_model_file(out / "true_model.fwim", setup.grid, truth)
    log.info("wrote %s", out / "data.fwid")
    return EXIT_OK


def cmd_invert(cfg: RunConfig, out: Path) -> int:
    setup = build_setup(cfg)
    counter.reset()
    state = run_inversion(setup.problem, setup.initial_model, cfg.schedule(), seed=cfg.seed,
                          n_es=cfg.n_es, beta1=cfg.beta1, beta2=cfg.beta2,
                          config=cfg.gn_config(), z1_cg_iters=cfg.z1_cg_iters,
                          threshold_rel=cfg.threshold_rel, out_dir=out)
    write_model_file(out / "initial_model.fwim", setup.grid, setup.initial_model)
    pred = expected_cost(cfg.schedule(), cfg.n_sources, cfg.n_es, cfg.gn_config(),
                         cfg.z1_cg_iters, trace=state.trace, include_report=True)
    report = {
        "measured": counter.snapshot(),
        "predicted": {"forward_solves": pred.forward_solves,
                      "factorizations": pred.factorizations, "by_phase": pred.by_phase},
        "initial_misfit": state.initial_report,
        "final_misfit": state.report,
    }
    (out / "cost.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    print(f"initial misfit {state.initial_report:.6g}  final misfit {state.report:.6g}")
    return EXIT_OK


def cmd_greens_check(cfg: RunConfig, out: Path) -> int:
    coarse, fine = greens_check(cfg.greens_ppw, velocity=cfg.greens_velocity,
                                freq=cfg.greens_frequency, gamma_max=cfg.gamma_max)
    for r in (coarse, fine):
        print(f"{r.points_per_wavelength:6.1f} nodes/wavelength  n={r.n:4d}  "
              f"relative L2 error {r.error:.4%}")
    print(f"convergence factor {coarse.error / fine.error:.3f}")
    ok = coarse.error <= cfg.greens_tolerance and fine.error < coarse.error
    if not ok:
        print(f"FAIL: tolerance {cfg.greens_tolerance:g} violated or no improvement")
    return EXIT_OK if ok else EXIT_TOLERANCE


def mode_costs(cfg: RunConfig, p: int | None = None) -> dict:
    """Predicted non-report solve counts with the first sweep in each mode."""
    p = p or next((sw.p for sw in cfg.sweeps if sw.p), None) or min(cfg.n_es, cfg.n_sources)
    out = {}
    for mode, label in MODE_LABELS.items():
        variant = cfg.with_first_sweep_mode(mode, p if mode in (SIMULTANEOUS, EXTENDED_SS) else None)
        out[label] = expected_cost(variant.schedule(), cfg.n_sources, cfg.n_es,
                                   cfg.gn_config(), cfg.z1_cg_iters).forward_solves
    return out


def cmd_cost_report(cfg: RunConfig, out: Path) -> int:
    print(f"{'mode':<12}{'predicted solves':>18}")
    for label, n in mode_costs(cfg).items():
        print(f"{label:<12}{n:>18d}")
    log_path = out / "cost.json"
    if log_path.exists():
        run = json.loads(log_path.read_text())
        measured = run["measured"]["forward_solves"]
        predicted = run["predicted"]["forward_solves"]
        print(f"last run: measured {measured}  predicted {predicted}  "
              f"{'match' if measured == predicted else 'MISMATCH'}")
        if measured != predicted:
            return EXIT_TOLERANCE
    return EXIT_OK


def export_image(model_path, image_path) -> tuple[float, float]:
    """Write velocity as a binary PGM, rows = depth, columns = x."""
    grid, model = read_model_file(model_path)
    v = model.velocity.reshape(grid.nx, grid.nz).T
    v_min, v_max = float(v.min()), float(v.max())
    if v_max > v_min:
        pix = np.rint(255 * (v - v_min) / (v_max - v_min))
    else:
        pix = np.full(v.shape, 128.0)
    header = f"P5\n# v_min={v_min!r} v_max={v_max!r} km/s\n{grid.nx} {grid.nz}\n255\n"
    Path(image_path).write_bytes(header.encode("ascii") + pix.astype(np.uint8).tobytes())
    return v_min, v_max


def read_pgm(path) -> tuple[np.ndarray, float, float]:
    """Inverse of :func:`export_image`: pixels (rows x cols) and the declared range."""
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n", 4)
    if lines[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    fields = dict(item.split("=") for item in lines[1].decode()[1:].split() if "=" in item)
    w, h = map(int, lines[2].split())
    pix = np.frombuffer(lines[4], dtype=np.uint8, count=w * h).reshape(h, w)
    return pix, float(fields["v_min"]), float(fields["v_max"])


def _add_global_flags(parser, suppress: bool):
    # flags may come before or after the command; the subcommand copies must
    # not overwrite values given before it
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="run configuration file")
    parser.add_argument("--seed", type=int, default=d(None),
                        help="root seed (overrides the config)")
    parser.add_argument("--threads", type=int, default=d(0),
                        help="worker threads (default: available cores)")
    parser.add_argument("--out", default=d("."), help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="extfwi", description=__doc__)
    _add_global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"forward": "simulate observed data", "invert": "run the configured sweeps",
             "greens-check": "compare with the analytic Green's function",
             "cost-report": "predicted and measured solve counts",
             "export-image": "model file to PGM"}
    for name, text in helps.items():
        cmd = sub.add_parser(name, help=text)
        _add_global_flags(cmd, suppress=True)
        if name == "export-image":
            cmd.add_argument("model", help="FWIM model file")
            cmd.add_argument("-o", "--output",
                             help="PGM path (default: <out>/<model stem>.pgm)")
    return parser


COMMANDS = {"forward": cmd_forward, "invert": cmd_invert, "greens-check": cmd_greens_check,
            "cost-report": cmd_cost_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _configure_logging()
        set_threads(args.threads or None)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "export-image":
            target = Path(args.output) if args.output else out / (Path(args.model).stem + ".pgm")
            v_min, v_max = export_image(args.model, target)
            print(f"wrote {target} (v in [{v_min:.4g}, {v_max:.4g}] km/s)")
            return EXIT_OK
        return COMMANDS[args.command](_config(args), out)
    except (ConfigError, ModelFileError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InversionError, SingularOperatorError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
