"""Batch front end: simulate stacks, localize, evaluate, render.

Driven by a small TOML config with [operator], [solver], [simulate] and
[io] sections; every command writes the fully resolved config next to its
primary output so a run can be reproduced from the artifacts alone.
Exit codes: 0 success, 2 config error, 3 I/O error, 4 solver did not
converge (output still written).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .operators import SmlmOperator
from .reformulation import Constrained, Penalized
from .smlm import (
    FileFormatError,
    FrameStack,
    jaccard,
    localize_frame,
    random_molecules,
    read_molecule_csv,
    render_superres,
    simulate_stack,
    write_molecule_csv,
    write_pgm16,
)
from .solvers import SolveConfig


class ConfigError(ValueError):
    pass


_SOLVE_FIELDS = (
    "pam_c",
    "pam_b",
    "fista_tol",
    "fista_fp_tol",
    "fista_max_iter",
    "pam_tol",
    "pam_max_iter",
    "iht_max_iter",
    "rho0",
    "rho_growth",
    "rho_safety",
    "zero_tol",
    "feas_coeff",
    "spectral_tol",
    "spectral_max_iter",
)

_DEFAULT_SOLVE = SolveConfig()

DEFAULTS: dict[str, dict] = {
    "operator": {
        "type": "smlm",
        "coarse_size": 32,
        "zoom": 4,
        "fwhm_nm": 258.21,
        "pixel_nm": 100.0,
        "matrix_csv": None,
    },
    "solver": {
        "algo": "biconvex",
        "mode": "constrained",
        "k": 15,
        "lambda": None,
        "seed": None,
        **{name: getattr(_DEFAULT_SOLVE, name) for name in _SOLVE_FIELDS},
    },
    "simulate": {
        "frames": 20,
        "molecules_per_frame": 15,
        "intensity_min": 800.0,
        "intensity_max": 1200.0,
        "min_separation_nm": 0.0,
        "margin_nm": None,
        "snap_to_fine": False,
        "noise_sigma": None,
        "noise_peak_fraction": 0.05,
        "seed": 0,
    },
    "io": {
        "stack": "stack.f32",
        "sidecar": "stack.json",
        "ground_truth": "ground_truth.csv",
        "molecules": "molecules.csv",
        "trace_dir": "traces",
        "render": "render.pgm",
        "report": "report.csv",
    },
}


def load_config(path) -> dict:
    """Read a TOML config, fill defaults, and reject unknown keys."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    resolved = {sec: dict(defaults) for sec, defaults in DEFAULTS.items()}
    for sec, values in raw.items():
        if sec not in resolved:
            raise ConfigError(f"{path}: unknown section [{sec}]")
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: [{sec}] must be a table")
        for key, value in values.items():
            if key not in resolved[sec]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{sec}]")
            resolved[sec][key] = value
    for key, value in resolved["io"].items():
        if not isinstance(value, str):
            raise ConfigError(f"{path}: [io] {key} must be a path string")
        resolved["io"][key] = _resolve_path(path, value)
    return resolved


def _resolve_path(config_path, value):
    base = os.path.dirname(os.path.abspath(config_path))
    return value if os.path.isabs(value) else os.path.join(base, value)


def _toml_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    raise TypeError(f"cannot serialize {value!r}")


def write_resolved_config(config: dict, path) -> None:
    lines = []
    for sec in ("operator", "solver", "simulate", "io"):
        lines.append(f"[{sec}]")
        for key, value in config[sec].items():
            if value is None:
                continue  # absent keys keep their scale-derived defaults
            lines.append(f"{key} = {_toml_scalar(value)}")
        lines.append("")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines))


def build_operator(config: dict) -> SmlmOperator:
    op = config["operator"]
    if op["type"] == "dense":
        raise ConfigError(
            "dense operators are a library surface; the pipeline commands need operator.type = 'smlm'"
        )
    if op["type"] != "smlm":
        raise ConfigError(f"unknown operator type {op['type']!r}")
    try:
        return SmlmOperator(
            coarse_size=int(op["coarse_size"]),
            zoom=int(op["zoom"]),
            fwhm_nm=float(op["fwhm_nm"]),
            pixel_nm=float(op["pixel_nm"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[operator]: {exc}") from exc


def build_solve_config(config: dict) -> SolveConfig:
    solver = config["solver"]
    kwargs = {}
    try:
        for name in _SOLVE_FIELDS:
            value = solver[name]
            if name == "rho0" and value is None:
                kwargs[name] = None
                continue
            default = getattr(_DEFAULT_SOLVE, name)
            kwargs[name] = int(value) if isinstance(default, int) else float(value)
        return SolveConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[solver]: {exc}") from exc


def build_mode(config: dict):
    solver = config["solver"]
    try:
        if solver["mode"] == "constrained":
            return Constrained(int(solver["k"]))
        if solver["mode"] == "penalized":
            if solver["lambda"] is None:
                raise ConfigError("[solver]: penalized mode needs lambda")
            return Penalized(float(solver["lambda"]))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[solver]: {exc}") from exc
    raise ConfigError(f"[solver]: unknown mode {solver['mode']!r}")


def _seed(config: dict, override) -> int:
    if override is not None:
        return int(override)
    if config["simulate"]["seed"] is not None:
        return int(config["simulate"]["seed"])
    if config["solver"]["seed"] is not None:
        return int(config["solver"]["seed"])
    return 0


def cmd_simulate(config: dict, seed_override=None) -> int:
    op = build_operator(config)
    sim = config["simulate"]
    seed = _seed(config, seed_override)
    rng = np.random.default_rng(seed)
    try:
        ground_truth = [
            random_molecules(
                op,
                int(sim["molecules_per_frame"]),
                rng,
                min_separation_nm=float(sim["min_separation_nm"]),
                intensity_range=(float(sim["intensity_min"]), float(sim["intensity_max"])),
                margin_nm=None if sim["margin_nm"] is None else float(sim["margin_nm"]),
                snap_to_fine=bool(sim["snap_to_fine"]),
            )
            for _ in range(int(sim["frames"]))
        ]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[simulate]: {exc}") from exc

    if sim["noise_sigma"] is not None:
        sigma = float(sim["noise_sigma"])
    else:
        clean = simulate_stack(ground_truth, op, 0.0, seed)
        peak = float(clean.frames.max(initial=0.0))
        sigma = float(sim["noise_peak_fraction"]) * peak
    stack = simulate_stack(ground_truth, op, sigma, seed)

    paths = config["io"]
    stack.save(paths["stack"], paths["sidecar"])
    write_molecule_csv(paths["ground_truth"], ground_truth)
    resolved = {**config, "simulate": {**sim, "seed": seed, "noise_sigma": sigma}}
    write_resolved_config(resolved, os.path.join(os.path.dirname(paths["stack"]), "resolved_simulate.toml"))
    print(f"simulate: wrote {int(sim['frames'])} frames, noise sigma {sigma!r}")
    return 0


def _solve_frame_task(frame, op, mode, cfg, algo):
    return localize_frame(frame, op, mode, cfg, algo)


def cmd_solve(config: dict, jobs: int = 1, trace: bool = False) -> int:
    from joblib import Parallel, delayed

    op = build_operator(config)
    cfg = build_solve_config(config)
    mode = build_mode(config)
    if isinstance(mode, Constrained) and mode.k > op.fine_size**2:
        raise ConfigError(f"[solver]: k = {mode.k} exceeds the {op.fine_size}^2 fine grid")
    algo = config["solver"]["algo"]
    if algo not in ("biconvex", "iht"):
        raise ConfigError(f"[solver]: unknown algo {algo!r}")

    paths = config["io"]
    stack = FrameStack.load(paths["stack"], paths["sidecar"])
    mismatches = [
        name
        for name, got, want in (
            ("size", stack.size, op.coarse_size),
            ("zoom", stack.zoom, op.zoom),
            ("pixel_nm", stack.pixel_nm, op.pixel_nm),
            ("fwhm_nm", stack.fwhm_nm, op.fwhm_nm),
        )
        if got != want
    ]
    if mismatches:
        raise ConfigError(
            f"sidecar disagrees with [operator] on {', '.join(mismatches)}: "
            f"stack is {stack.frames.shape[0]}x{stack.size}px zoom {stack.zoom}, "
            f"pixel {stack.pixel_nm} nm, fwhm {stack.fwhm_nm} nm"
        )

    results = Parallel(n_jobs=jobs)(
        delayed(_solve_frame_task)(frame, op, mode, cfg, algo) for frame in stack.frames
    )

    write_molecule_csv(paths["molecules"], [r.molecules for r in results])
    if trace and algo == "biconvex":
        os.makedirs(paths["trace_dir"], exist_ok=True)
        for f, r in enumerate(results):
            r.trace.write_csv(os.path.join(paths["trace_dir"], f"frame_{f:04d}.csv"))
    write_resolved_config(config, os.path.join(os.path.dirname(paths["molecules"]), "resolved_solve.toml"))

    bad = [f for f, r in enumerate(results) if not r.converged]
    for f, r in enumerate(results):
        print(f"solve: frame {f}: {len(r.molecules)} molecules" + ("" if r.converged else " (not converged)"))
    if bad:
        print(f"solve: {len(bad)} frame(s) did not converge", file=sys.stderr)
        return 4
    return 0


def cmd_evaluate(config: dict, est_path=None, gt_path=None, tolerances=None, out_path=None) -> int:
    paths = config["io"]
    est = read_molecule_csv(est_path or paths["molecules"])
    gt = read_molecule_csv(gt_path or paths["ground_truth"])
    tolerances = tolerances or [50.0, 100.0, 150.0, 200.0]

    frames = sorted(set(est) | set(gt))
    lines = ["tolerance_nm,CR,FP,FN,jaccard"]
    for tol in tolerances:
        cr = fp = fn = 0
        for f in frames:
            rep = jaccard(est.get(f, []), gt.get(f, []), tol)
            cr, fp, fn = cr + rep.cr, fp + rep.fp, fn + rep.fn
        total = cr + fp + fn
        value = cr / total if total else 1.0
        lines.append(f"{float(tol)!r},{cr},{fp},{fn},{value!r}")

    report = "\n".join(lines) + "\n"
    print(report, end="")
    out = out_path or paths["report"]
    with open(out, "w", encoding="ascii", newline="\n") as fh:
        fh.write(report)
    write_resolved_config(config, os.path.join(os.path.dirname(out), "resolved_evaluate.toml"))
    return 0


def cmd_render(config: dict, est_path=None, out_path=None) -> int:
    op = build_operator(config)
    paths = config["io"]
    est = read_molecule_csv(est_path or paths["molecules"])
    image = render_superres(est.values(), op.fine_size, op.fine_pixel_nm)
    out = out_path or paths["render"]
    write_pgm16(out, image)
    write_resolved_config(config, os.path.join(os.path.dirname(out), "resolved_render.toml"))
    print(f"render: wrote {op.fine_size}x{op.fine_size} image to {out}")
    return 0


def _parse_tolerances(text):
    try:
        return [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --tolerances value {text!r}") from exc


def main(argv=None) -> int:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="path to the TOML run config")
    common.add_argument("--jobs", type=int, default=1, help="parallel frame solves")
    common.add_argument("--trace", action="store_true", help="write per-frame continuation traces (biconvex)")
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")

    parser = argparse.ArgumentParser(prog="bisparse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="generate a synthetic stack and ground truth")
    sub.add_parser("solve", parents=[common], help="localize every frame of a stack")
    p_eval = sub.add_parser("evaluate", parents=[common], help="Jaccard index of estimates vs ground truth")
    p_eval.add_argument("--est", default=None, help="estimates CSV (default: io.molecules)")
    p_eval.add_argument("--gt", default=None, help="ground-truth CSV (default: io.ground_truth)")
    p_eval.add_argument("--tolerances", default="50,100,150,200", help="comma-separated radii in nm")
    p_eval.add_argument("--out", default=None, help="report CSV path (default: io.report)")
    p_render = sub.add_parser("render", parents=[common], help="accumulate estimates into a PGM image")
    p_render.add_argument("--est", default=None, help="estimates CSV (default: io.molecules)")
    p_render.add_argument("--out", default=None, help="image path (default: io.render)")

    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
        if args.command == "simulate":
            return cmd_simulate(config, seed_override=args.seed)
        if args.command == "solve":
            return cmd_solve(config, jobs=args.jobs, trace=args.trace)
        if args.command == "evaluate":
            return cmd_evaluate(
                config,
                est_path=args.est,
                gt_path=args.gt,
                tolerances=_parse_tolerances(args.tolerances),
                out_path=args.out,
            )
        if args.command == "render":
            return cmd_render(config, est_path=args.est, out_path=args.out)
        raise AssertionError(args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FileFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
