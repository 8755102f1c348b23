"""Metrics, dataset splitting and the repeated-experiment harness."""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from planecal.ampc import MIN_TOTAL_SAMPLES, calibrate_ampc
from planecal.baselines import calibrate_lm, calibrate_ls, initialize_state
from planecal.exceptions import InvalidArgumentError, NumericalFailureError
from planecal.kinematics import end_effector_positions
from planecal.mcs import select_per_plane
from planecal.models import (
    CalibrationResult,
    ExperimentReport,
    GroundTruth,
    MethodRun,
    MetricSet,
    ParameterVector,
    RobotModel,
    SampleSet,
)
from planecal.parser import SampleParser, read_ground_truth
from planecal.residuals import length_terms
from planecal.settings import RunConfig
from planecal.simulator import generate_dataset, make_ground_truth, subsample_per_plane

logger = logging.getLogger(__name__)

MIN_SPLIT_SIDE = 3
DIVERGENCE_FACTOR = 10.0  # train rmse against the uncalibrated model


# ───────────────────────── Metrics ────────────────────────────────────────

def compute_metrics(errors) -> MetricSet:
    """RMSE, mean/max absolute error and the std of absolute errors, mm."""
    e = np.asarray(errors, dtype=float).ravel()
    if e.size == 0:
        raise InvalidArgumentError("cannot compute metrics of an empty error list")
    a = np.abs(e)
    return MetricSet(
        rmse=float(np.sqrt(np.mean(e ** 2))),
        mean_abs=float(a.mean()),
        max_abs=float(a.max()),
        sample_std=float(a.std()),
        n=int(e.size),
    )


def position_error_per_sample(model: RobotModel, anchor, samples: SampleSet) -> np.ndarray:
    """Recorded minus predicted cable length for every sample."""
    positions = end_effector_positions(model, samples.joints)
    lengths, _ = length_terms(positions, np.asarray(anchor, dtype=float))
    return np.asarray(samples.cable_mm) - lengths


def align_base_gauge(estimated, true) -> Tuple[float, float]:
    """Rotation about base z and shift along base z that best map `estimated` onto `true`.

    Cable and plane measurements cannot observe these two motions, so
    Cartesian comparisons are made after removing them.
    """
    e = np.atleast_2d(np.asarray(estimated, dtype=float))
    t = np.atleast_2d(np.asarray(true, dtype=float))
    shift = float(np.mean(t[:, 2] - e[:, 2]))
    angle = math.atan2(np.sum(e[:, 0] * t[:, 1] - e[:, 1] * t[:, 0]),
                       np.sum(e[:, 0] * t[:, 0] + e[:, 1] * t[:, 1]))
    return angle, shift


def apply_base_gauge(points, angle: float, shift: float) -> np.ndarray:
    p = np.atleast_2d(np.asarray(points, dtype=float))
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return p @ rot.T + np.array([0.0, 0.0, shift])


def cartesian_errors(model: RobotModel, truth: RobotModel, samples: SampleSet) -> Tuple[np.ndarray, float, float]:
    """Per-sample position error norms after gauge alignment, plus the gauge."""
    estimated = end_effector_positions(model, samples.joints)
    actual = end_effector_positions(truth, samples.joints)
    angle, shift = align_base_gauge(estimated, actual)
    errors = np.linalg.norm(apply_base_gauge(estimated, angle, shift) - actual, axis=1)
    return errors, angle, shift


def split_dataset(samples: SampleSet, train_fraction: float = 0.2, seed: int = 0) -> Tuple[SampleSet, SampleSet]:
    """Per-plane stratified split; each plane gives round(train_fraction * N) rows to train."""
    if not 0.0 < train_fraction < 1.0:
        raise InvalidArgumentError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for pid in samples.plane_ids:
        idx = np.flatnonzero(samples.plane_id == pid)
        n_train = int(round(train_fraction * idx.size))
        if n_train < MIN_SPLIT_SIDE or idx.size - n_train < MIN_SPLIT_SIDE:
            raise InvalidArgumentError(
                f"plane {pid}: {idx.size} samples cannot give {MIN_SPLIT_SIDE}+ rows to both sides")
        perm = rng.permutation(idx)
        train_idx.append(np.sort(perm[:n_train]))
        test_idx.append(np.sort(perm[n_train:]))
    return samples.take(np.concatenate(train_idx)), samples.take(np.concatenate(test_idx))


def position_error_table(
    fits: Mapping[str, Tuple[RobotModel, np.ndarray]],
    samples: SampleSet,
    n: int = 30,
) -> pd.DataFrame:
    """Signed cable-length errors of the first `n` samples for every fitted model."""
    head = samples.take(np.arange(min(n, len(samples))))
    table = pd.DataFrame({"sample": np.arange(1, len(head) + 1), "plane_id": head.plane_id})
    for method, (model, anchor) in fits.items():
        table[method] = position_error_per_sample(model, anchor, head)
    return table


# ───────────────────────── Experiment harness ─────────────────────────────

Calibrator = Callable[[SampleSet, RobotModel, RunConfig], CalibrationResult]

CALIBRATORS: Dict[str, Calibrator] = {
    "ampc": lambda s, m, cfg: calibrate_ampc(s, m, cfg.ampc),
    "mcs+ampc": lambda s, m, cfg: calibrate_ampc(s, m, cfg.ampc),
    "lm": lambda s, m, cfg: calibrate_lm(s, m, cfg.lm),
    "ls": lambda s, m, cfg: calibrate_ls(s, m, cfg.ls),
}


def calibrate(method: str, samples: SampleSet, nominal: RobotModel, cfg: RunConfig) -> CalibrationResult:
    try:
        runner = CALIBRATORS[method]
    except KeyError:
        raise InvalidArgumentError(f"unknown method {method!r}; choose from {sorted(CALIBRATORS)}") from None
    return runner(samples, nominal, cfg)


def mcs_budget(pool_per_plane: int, n_planes: int, cfg: RunConfig) -> int:
    """Configurations kept per plane by MCS, never fewer than AMPC needs in total."""
    if cfg.configurations_per_plane is not None:
        k = cfg.configurations_per_plane
    elif cfg.k is not None:
        k = cfg.k
    else:
        k = int(round(cfg.mcs_fraction * pool_per_plane))
    k = max(k, math.ceil(MIN_TOTAL_SAMPLES / n_planes))
    return min(k, pool_per_plane)


def load_dataset(cfg: RunConfig, repetition: int) -> Tuple[SampleSet, Optional[GroundTruth]]:
    """Fresh simulated data per repetition, or the configured files."""
    if cfg.dataset == "files":
        samples = SampleSet.concat([SampleParser(p).parse(max_workers=cfg.workers) for p in cfg.sample_paths])
        gt = read_ground_truth(cfg.ground_truth_path) if cfg.ground_truth_path else None
        return samples, gt
    seed = cfg.seed + repetition
    gt = make_ground_truth(seed, cfg.caps, cfg.planes, cfg.anchor)
    noise = cfg.noise.model_copy(update={"seed": seed})
    samples = generate_dataset(gt, cfg.samples_per_plane, noise, cfg.region, max_workers=cfg.workers)
    return samples, gt


def _metrics_or_none(model, anchor, samples) -> Optional[MetricSet]:
    return compute_metrics(position_error_per_sample(model, anchor, samples)) if len(samples) else None


def _evaluate_fit(
    run: MethodRun,
    model: RobotModel,
    anchor: np.ndarray,
    train: SampleSet,
    test: SampleSet,
    gt: Optional[GroundTruth],
) -> MethodRun:
    run.train = _metrics_or_none(model, anchor, train)
    run.test = _metrics_or_none(model, anchor, test)
    if gt is not None:
        errors, angle, shift = cartesian_errors(model, gt.model(), test)
        run.cartesian_test_rmse = float(np.sqrt(np.mean(errors ** 2)))
        aligned_anchor = apply_base_gauge(anchor, angle, shift)[0]
        run.anchor_error = float(np.linalg.norm(aligned_anchor - gt.anchor))
    return run


def fit_method(
    method: str,
    train: SampleSet,
    nominal: RobotModel,
    cfg: RunConfig,
    repetition: int = 0,
) -> Tuple[Optional[CalibrationResult], SampleSet]:
    """Calibrate with `method` on the training pool.

    Returns the result (None for "before") and the samples actually fitted.
    mcs+ampc fits the K configurations per plane chosen by DE; with the
    "matched" budget every other method fits a random K per plane.
    """
    if method == "before":
        return None, train
    groups = train.group_by_plane()
    pool = min(len(g) for g in groups.values())
    k = mcs_budget(pool, len(groups), cfg)
    if method == "mcs+ampc":
        de_cfg = cfg.de.model_copy(update={"seed": cfg.de.seed + repetition})
        fit_set, _ = select_per_plane(nominal, train, k, de_cfg, max_workers=cfg.workers)
    elif cfg.budget == "matched" or cfg.configurations_per_plane is not None:
        fit_set = subsample_per_plane(train, k, cfg.seed + repetition)
    else:
        fit_set = train
    return calibrate(method, fit_set, nominal, cfg), fit_set


def repetition_split(cfg: RunConfig, repetition: int, plane_count: int,
                     samples: Optional[SampleSet] = None) -> Tuple[SampleSet, SampleSet]:
    """Train/test split of one repetition restricted to the first `plane_count` planes."""
    if samples is None:
        samples, _ = repetition_samples(cfg, repetition)
    plane_ids = samples.plane_ids
    if plane_count > len(plane_ids):
        raise InvalidArgumentError(f"{plane_count} planes requested but the data has {len(plane_ids)}")
    subset = samples.select_planes(plane_ids[:plane_count])
    return split_dataset(subset, cfg.train_fraction, cfg.seed + repetition)


def repetition_samples(cfg: RunConfig, repetition: int) -> Tuple[SampleSet, Optional[GroundTruth]]:
    samples, gt = load_dataset(cfg, repetition)
    if cfg.subsample_per_plane is not None:
        samples = subsample_per_plane(samples, cfg.subsample_per_plane, cfg.seed + repetition)
    return samples, gt


def error_table(report: ExperimentReport, cfg: RunConfig, nominal: Optional[RobotModel] = None) -> pd.DataFrame:
    """Per-sample errors of the fits stored in `report`.

    Uses repetition 0 on the largest plane set; its test split is rebuilt
    from the seed, nothing is refitted. Failed runs are left out.
    """
    nominal = nominal or RobotModel.nominal()
    count = max(cfg.plane_counts)
    fits = {
        run.method: (nominal.apply(ParameterVector(values=run.parameters)), np.asarray(run.anchor))
        for run in report.runs
        if run.repetition == 0 and run.plane_count == count and run.parameters is not None and not run.error
    }
    _, test = repetition_split(cfg, 0, count)
    return position_error_table(fits, test, cfg.error_table_samples)


def _check_divergence(run: MethodRun, reference: Optional[MetricSet]) -> None:
    values = [m.rmse for m in (run.train, run.test) if m is not None]
    if not np.all(np.isfinite(values)):
        raise NumericalFailureError("calibration produced non-finite errors")
    if reference is not None and run.train is not None and run.train.rmse > DIVERGENCE_FACTOR * reference.rmse:
        raise NumericalFailureError(
            f"calibration diverged: train rmse {run.train.rmse:.3g} mm against {reference.rmse:.3g} mm uncalibrated")


def _run_method(method, repetition, plane_count, train, test, nominal, gt, cfg,
                reference: Optional[MetricSet] = None) -> MethodRun:
    run = MethodRun(repetition=repetition, method=method, plane_count=plane_count)
    try:
        if method == "before":
            state = initialize_state(train, nominal)
            run.iterations, run.converged, run.wall_time = 0, True, 0.0
            run.parameters, run.anchor = state.u.values.tolist(), state.anchor.tolist()
            return _evaluate_fit(run, nominal, state.anchor, train, test, gt)
        result, _ = fit_method(method, train, nominal, cfg, repetition)
        run.iterations, run.converged, run.wall_time = result.iterations_used, result.converged, result.wall_time
        run.parameters, run.anchor = result.state.u.values.tolist(), result.anchor.tolist()
        run = _evaluate_fit(run, result.model(), result.anchor, train, test, gt)
        _check_divergence(run, reference)
        return run
    except Exception as e:  # recorded per run; the report is marked partial
        logger.warning("repetition %d, %d plane(s), %s failed: %s", repetition, plane_count, method, e)
        run.error = f"{type(e).__name__}: {e}"
        return run


def run_repetition(cfg: RunConfig, repetition: int, nominal: Optional[RobotModel] = None) -> List[MethodRun]:
    nominal = nominal or RobotModel.nominal()
    samples, gt = repetition_samples(cfg, repetition)

    runs: List[MethodRun] = []
    for count in cfg.plane_counts:
        train, test = repetition_split(cfg, repetition, count, samples)
        before = _run_method("before", repetition, count, train, test, nominal, gt, cfg)
        runs.append(before)
        for method in cfg.methods:
            runs.append(_run_method(method, repetition, count, train, test, nominal, gt, cfg, before.train))
    return runs


def run_experiment(cfg: RunConfig, nominal: Optional[RobotModel] = None) -> ExperimentReport:
    """Repeat the split/calibrate/evaluate protocol `cfg.repeats` times.

    Repetitions run on a thread pool; the report keeps repetition order.
    """
    nominal = nominal or RobotModel.nominal()
    with ThreadPoolExecutor(max_workers=max(1, min(cfg.workers, cfg.repeats))) as ex:
        per_rep = list(tqdm(
            ex.map(lambda r: run_repetition(cfg, r, nominal), range(cfg.repeats)),
            total=cfg.repeats, desc="repetitions", disable=cfg.repeats < 2,
        ))
    runs = [run for rep in per_rep for run in rep]
    partial = any(run.error for run in runs)
    if partial:
        logger.warning("%d of %d runs failed; report is partial", sum(bool(r.error) for r in runs), len(runs))
    return ExperimentReport(runs=runs, repeats=cfg.repeats, config=cfg.model_dump(mode="json"), partial=partial)
