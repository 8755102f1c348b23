# cli.py  –  planecal command line  (simulate → select → calibrate → evaluate)
# ---------------------------------------------------------------------------

import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from planecal.evaluation import (
    CALIBRATORS,
    error_table,
    fit_method,
    mcs_budget,
    run_experiment,
)
from planecal.exceptions import CalibrationError, InvalidArgumentError
from planecal.formatter import write_report
from planecal.mcs import observability_curve, select_per_plane
from planecal.models import ANGLE_BLOCKS, BLOCKS, CalibrationResult, ExperimentReport, RobotModel, SampleSet
from planecal.parser import SampleParser, write_ground_truth, write_samples
from planecal.settings import METHODS, RunConfig, configure_logging, load_config
from planecal.simulator import generate_dataset, make_ground_truth

logger = logging.getLogger("planecal")

GROUND_TRUTH_FILE = "ground_truth.json"
EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def _csv_list(text: str) -> List[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def _int_list(text: str) -> List[int]:
    try:
        return [int(item) for item in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _write_csv(df: pd.DataFrame, path: str, comments: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for comment in comments:
            fh.write(f"# {comment}\n")
        df.to_csv(fh, index=False, float_format="%.17g", lineterminator="\n")


def _load_samples(cfg: RunConfig, n_planes: Optional[int]) -> SampleSet:
    if not cfg.sample_paths:
        raise InvalidArgumentError("no samples given; pass --samples or set sample_paths in the config")
    samples = SampleSet.concat([SampleParser(p).parse(max_workers=cfg.workers) for p in cfg.sample_paths])
    if n_planes is not None:
        ids = samples.plane_ids
        if n_planes > len(ids):
            raise InvalidArgumentError(f"{n_planes} planes requested but the samples cover {len(ids)}")
        samples = samples.select_planes(ids[:n_planes])
    return samples


# ───────────────────────── Commands ───────────────────────────────────────

def cmd_simulate(cfg: RunConfig, out_dir: str, n_planes: Optional[int] = None) -> Dict[str, str]:
    """One sample file per plane plus the ground-truth sidecar."""
    planes = cfg.planes[:n_planes] if n_planes else cfg.planes
    gt = make_ground_truth(cfg.seed, cfg.caps, planes, cfg.anchor)
    noise = cfg.noise.model_copy(update={"seed": cfg.seed})
    samples = generate_dataset(gt, cfg.samples_per_plane, noise, cfg.region, max_workers=cfg.workers)

    os.makedirs(out_dir, exist_ok=True)
    written = {}
    for pid, group in samples.group_by_plane().items():
        path = os.path.join(out_dir, f"samples_plane{pid}.csv")
        write_samples(group, path, [f"plane: {planes[pid].name}", *cfg.snapshot()])
        written[f"plane{pid}"] = path
    written["ground_truth"] = os.path.join(out_dir, GROUND_TRUTH_FILE)
    write_ground_truth(gt, written["ground_truth"])
    logger.info("wrote %d samples on %d planes to %s", len(samples), len(planes), out_dir)
    return written


def cmd_select(cfg: RunConfig, out_dir: str, n_planes: Optional[int] = None) -> Dict[str, str]:
    """Per-plane configuration selection; optionally the index-vs-K curve."""
    nominal = RobotModel.nominal()
    samples = _load_samples(cfg, n_planes)
    groups = samples.group_by_plane()
    pool = min(len(g) for g in groups.values())
    k = cfg.k if cfg.k is not None else mcs_budget(pool, len(groups), cfg)

    selected, results = select_per_plane(nominal, samples, k, cfg.de, max_workers=cfg.workers)
    rows = []
    for pid, result in results.items():
        global_rows = np.flatnonzero(samples.plane_id == pid)[result.chosen_indices]
        for local, row in zip(result.chosen_indices, global_rows):
            rows.append({"plane_id": pid, "index": local, "row": int(row), "index_value": result.index_value})

    os.makedirs(out_dir, exist_ok=True)
    written = {
        "selected": os.path.join(out_dir, "selected.csv"),
        "samples": os.path.join(out_dir, "samples_selected.csv"),
    }
    comments = [f"k: {k}", *cfg.snapshot()]
    _write_csv(pd.DataFrame(rows, columns=["plane_id", "index", "row", "index_value"]), written["selected"], comments)
    write_samples(selected, written["samples"], comments)
    for pid, result in results.items():
        logger.info("plane %d: %d of %d configurations, index %.6g", pid, k, len(groups[pid]), result.index_value)

    if cfg.curve:
        curve_rows = []
        for pid, group in groups.items():
            for K, value in observability_curve(nominal, group.joints, [c for c in cfg.curve if c <= len(group)], cfg.de):
                curve_rows.append({"plane_id": pid, "K": K, "index": value, "index_per_sqrt_k": value / np.sqrt(K)})
        written["curve"] = os.path.join(out_dir, "curve.csv")
        _write_csv(pd.DataFrame(curve_rows, columns=["plane_id", "K", "index", "index_per_sqrt_k"]),
                   written["curve"], comments)
    return written


def parameter_table(result: CalibrationResult) -> pd.DataFrame:
    """Calibrated D-H table with the identified deviations next to each column."""
    table = result.model().to_table()
    u = result.state.u
    units = {"alpha": "deg", "a": "mm", "d": "mm", "theta": "deg"}
    for block in BLOCKS:
        values = u.block(block)
        table[f"delta_{block}_{units[block]}"] = np.rad2deg(values) if block in ANGLE_BLOCKS else values
    return table


def cmd_calibrate(cfg: RunConfig, method: str, out_dir: str, n_planes: Optional[int] = None) -> Dict[str, str]:
    """Calibrated parameter table and per-iteration trace for one method."""
    samples = _load_samples(cfg, n_planes)
    # every given sample is fitted unless configurations_per_plane asks for fewer
    result, fit_set = fit_method(method, samples, RobotModel.nominal(), cfg.model_copy(update={"budget": "full"}))
    os.makedirs(out_dir, exist_ok=True)
    tag = method.replace("+", "_")
    written = {
        "parameters": os.path.join(out_dir, f"parameters_{tag}.csv"),
        "trace": os.path.join(out_dir, f"trace_{tag}.csv"),
    }
    anchor = ",".join(f"{x:.17g}" for x in result.anchor)
    comments = [
        f"method: {method}",
        f"samples: {len(fit_set)}",
        f"anchor_mm: {anchor}",
        *[f"plane {pid}: W={','.join(f'{x:.17g}' for x in p.W)} gamma={','.join(f'{x:.17g}' for x in p.gamma)}"
          for pid, p in zip(result.state.plane_ids, result.state.planes)],
        f"converged: {result.converged}",
        *cfg.snapshot(),
    ]
    _write_csv(parameter_table(result), written["parameters"], comments)
    _write_csv(result.trace_frame(), written["trace"], comments)
    if not result.converged:
        logger.warning("%s stopped after %d iterations without meeting its tolerance", method, result.iterations_used)
    logger.info("%s: %d iterations, %.2f s", method, result.iterations_used, result.wall_time)
    return written


def cmd_evaluate(cfg: RunConfig, out_dir: str) -> Tuple[ExperimentReport, Dict[str, str]]:
    """Repeated split/calibrate/evaluate report plus the per-sample error table."""
    report = run_experiment(cfg)
    written = write_report(report, out_dir, cfg.snapshot())
    written["error_table"] = os.path.join(out_dir, "error_table.csv")
    _write_csv(error_table(report, cfg), written["error_table"], cfg.snapshot())
    return report, written


# ───────────────────────── Argument parsing ───────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="planecal", description="Multi-plane kinematic calibration of a 6-DOF arm")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (default: $PLANECAL_LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--planes", type=int, choices=(1, 2, 3), help="use the first N planes")

    p = sub.add_parser("simulate", help="generate sample files and a ground-truth sidecar")
    common(p)
    p.add_argument("--noise", type=float, help="cable and dial noise sigma, mm")
    p.add_argument("--samples", type=int, dest="samples_per_plane", help="samples per plane")

    p = sub.add_parser("select", help="choose measurement configurations per plane")
    common(p)
    p.add_argument("--samples", nargs="+", dest="sample_paths", help="sample file(s) or directory")
    p.add_argument("--k", type=int, help="configurations kept per plane")
    p.add_argument("--curve", type=_int_list, help="comma-separated K values for the index curve")

    p = sub.add_parser("calibrate", help="identify parameters with one method")
    common(p)
    p.add_argument("--samples", nargs="+", dest="sample_paths", help="sample file(s) or directory")
    p.add_argument("--method", default="ampc", help=f"one of {', '.join(METHODS)}")
    p.add_argument("--k", type=int, help="configurations per plane for mcs+ampc")

    p = sub.add_parser("evaluate", help="repeated experiment with mean ± std report")
    common(p)
    p.add_argument("--methods", type=_csv_list, help=f"comma-separated subset of {','.join(METHODS)}")
    p.add_argument("--repeats", type=int)
    p.add_argument("--noise", type=float, help="cable and dial noise sigma, mm")
    p.add_argument("--samples", nargs="+", dest="sample_paths", help="use sample files instead of the simulator")
    p.add_argument("--k", type=int, help="configurations per plane for mcs+ampc")
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    """Config overrides for every flag that was given."""
    out: Dict[str, Any] = {}
    for flag, key in (("seed", "seed"), ("out", "out_dir"), ("repeats", "repeats"), ("k", "k"),
                      ("samples_per_plane", "samples_per_plane"), ("curve", "curve"), ("methods", "methods")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    if getattr(args, "sample_paths", None):
        out["sample_paths"] = args.sample_paths
        if args.command == "evaluate":
            out["dataset"] = "files"
    if getattr(args, "noise", None) is not None:
        out["noise"] = {"cable_sigma": args.noise, "dial_sigma": args.noise}
    if args.command == "simulate" and getattr(args, "samples_per_plane", None) is not None:
        out.setdefault("subsample_per_plane", None)
    if args.command == "evaluate" and args.planes is not None:
        out["plane_counts"] = [args.planes]
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)

    if getattr(args, "method", None) is not None and args.method not in CALIBRATORS:
        parser.error(f"unknown method {args.method!r}; choose from {', '.join(METHODS)}")
    if getattr(args, "methods", None) is not None:
        unknown = [m for m in args.methods if m not in METHODS]
        if unknown or not args.methods:
            parser.error(f"unknown method(s) {unknown}; choose from {', '.join(METHODS)}")

    try:
        cfg = load_config(args.config, overrides_from_args(args))
    except (InvalidArgumentError, FileNotFoundError) as e:
        logger.error("%s", e)
        return EXIT_USAGE

    out_dir = cfg.out_dir
    try:
        if args.command == "simulate":
            cmd_simulate(cfg, out_dir, args.planes)
        elif args.command == "select":
            cmd_select(cfg, out_dir, args.planes)
        elif args.command == "calibrate":
            cmd_calibrate(cfg, args.method, out_dir, args.planes)
        else:
            report, written = cmd_evaluate(cfg, out_dir)
            if report.partial:
                logger.error("some runs failed; see %s", written["runs"])
                return EXIT_FAILURE
    except (CalibrationError, OSError) as e:
        logger.error("%s failed: %s", args.command, e)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
