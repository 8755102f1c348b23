"""Plane fitting, anchor trilateration and the LM / LS reference identifiers."""

import logging
import time
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.linalg

from planecal.exceptions import DegenerateGeometryError, InvalidArgumentError
from planecal.kinematics import end_effector_positions
from planecal.models import (
    N_PARAMS,
    CalibrationResult,
    CalibrationState,
    LmConfig,
    LsConfig,
    ParameterVector,
    PlaneEstimate,
    RobotModel,
    SampleSet,
)
from planecal.residuals import (
    ResidualSystem,
    build_residual_system,
    dial_offsets,
    free_columns,
    least_squares_cost,
    normal_equations,
    reduced_solve,
    with_planes,
)

logger = logging.getLogger(__name__)

MIN_SPREAD = 1e-9
PLANAR_RATIO = 0.05
COST_FLOOR = 1e-20  # mean squared residual treated as an exact fit
MIN_SAMPLES_PER_PLANE = 3


# ───────────────────────── Geometry helpers ───────────────────────────────

def fit_plane(points) -> PlaneEstimate:
    """Total-least-squares plane through `points`.

    The normal's largest-magnitude component is made positive so repeated
    fits of nearby point sets agree in orientation.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 3:
        raise InvalidArgumentError(f"fit_plane needs at least 3 points in 3-D, got shape {pts.shape}")
    centroid = pts.mean(axis=0)
    _, s, vt = scipy.linalg.svd(pts - centroid, full_matrices=False)
    if s.size < 2 or s[1] < MIN_SPREAD:
        raise DegenerateGeometryError("points are collinear or coincident; no unique plane")
    normal = vt[-1]
    if normal[np.argmax(np.abs(normal))] < 0:
        normal = -normal
    return PlaneEstimate(W=centroid, gamma=normal)


def _refine_anchor(positions: np.ndarray, lengths: np.ndarray, anchor: np.ndarray, iterations: int = 20):
    for _ in range(iterations):
        diff = positions - anchor
        dist = np.linalg.norm(diff, axis=1)
        if np.any(dist <= MIN_SPREAD):
            break
        r = dist - lengths
        jac = -diff / dist[:, None]
        step, *_ = np.linalg.lstsq(jac, -r, rcond=None)
        anchor = anchor + step
        if np.linalg.norm(step) < 1e-12:
            break
    residual = np.linalg.norm(np.linalg.norm(positions - anchor, axis=1) - lengths)
    return anchor, float(residual)


def trilaterate_anchor(positions, lengths) -> np.ndarray:
    """Estimate the cable anchor from end-effector positions and cable lengths.

    A linear solve seeds 20 Gauss-Newton iterations. When the positions
    are nearly coplanar only the distance to the plane is known up to sign;
    the candidate on the positive side of the fitted normal is used.
    """
    p = np.asarray(positions, dtype=float)
    L = np.asarray(lengths, dtype=float)
    if p.shape[0] < 4 or p.shape != (L.shape[0], 3):
        raise InvalidArgumentError("trilateration needs at least 4 positions with matching lengths")

    centroid = p.mean(axis=0)
    _, s, vt = scipy.linalg.svd(p - centroid, full_matrices=False)
    if s[1] < MIN_SPREAD:
        raise DegenerateGeometryError("positions are collinear; anchor is not determined")

    if s[2] / s[0] < PLANAR_RATIO:
        e1, e2, normal = vt
        if normal[np.argmax(np.abs(normal))] < 0:
            normal = -normal
        local = np.stack([(p - centroid) @ e1, (p - centroid) @ e2], axis=1)
        a = np.column_stack([-2.0 * local, np.ones(len(p))])
        sol, *_ = np.linalg.lstsq(a, L ** 2 - np.sum(local ** 2, axis=1), rcond=None)
        in_plane = sol[:2]
        height_sq = np.mean(L ** 2 - np.sum((local - in_plane) ** 2, axis=1))
        height = np.sqrt(max(height_sq, 0.0))
        seed = centroid + in_plane[0] * e1 + in_plane[1] * e2 + height * normal
        anchor, residual = _refine_anchor(p, L, seed)
    else:
        a = np.column_stack([-2.0 * p, np.ones(len(p))])
        sol, *_ = np.linalg.lstsq(a, L ** 2 - np.sum(p ** 2, axis=1), rcond=None)
        anchor, residual = _refine_anchor(p, L, sol[:3])
    logger.debug("trilaterated anchor %s (residual norm %.3e mm)", anchor, residual)
    return anchor


def check_plane_groups(samples: SampleSet, minimum: int = MIN_SAMPLES_PER_PLANE) -> Dict[int, SampleSet]:
    groups = samples.group_by_plane()
    if not groups:
        raise InvalidArgumentError("no samples given")
    small = {pid: len(g) for pid, g in groups.items() if len(g) < minimum}
    if small:
        raise InvalidArgumentError(f"every plane needs at least {minimum} samples, got {small}")
    return groups


def initialize_state(
    samples: SampleSet,
    nominal: RobotModel,
    initial_anchor=None,
    dial_mode: str = "correction",
) -> CalibrationState:
    """u = 0, zero multipliers, planes fitted and anchor trilaterated under `nominal`."""
    groups = check_plane_groups(samples)
    positions = end_effector_positions(nominal, samples.joints)
    dial = dial_offsets(samples, dial_mode)
    planes = []
    for pid in groups:
        mask = samples.plane_id == pid
        plane = fit_plane(positions[mask])
        planes.append(PlaneEstimate(W=plane.W - dial[mask].mean() * plane.gamma, gamma=plane.gamma))
    anchor = np.asarray(initial_anchor, dtype=float) if initial_anchor is not None \
        else trilaterate_anchor(positions, samples.cable_mm)
    return CalibrationState(
        nominal=nominal,
        u=ParameterVector.zeros(),
        anchor=anchor,
        planes=planes,
        multipliers=np.zeros(len(planes)),
        plane_ids=list(groups),
    )


def advance(state: CalibrationState, step: np.ndarray, iteration: int) -> CalibrationState:
    """Apply a (u, P0) step."""
    return state.model_copy(update={
        "u": ParameterVector(values=state.u.values + step[:N_PARAMS]),
        "anchor": _frozen(state.anchor + step[N_PARAMS:]),
        "iteration": iteration,
    })


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=float).copy()
    arr.setflags(write=False)
    return arr


def refit_planes(state: CalibrationState, system: ResidualSystem, samples: SampleSet, dial_mode: str) -> CalibrationState:
    """Refit every plane to the currently predicted contact points."""
    dial = dial_offsets(samples, dial_mode)
    planes = []
    for j, old in enumerate(state.planes):
        rows = system.plane_index == j
        plane = fit_plane(system.positions[rows])
        gamma = plane.gamma if plane.gamma @ old.gamma >= 0 else -plane.gamma
        planes.append(PlaneEstimate(W=plane.W - dial[rows].mean() * gamma, gamma=gamma))
    return state.model_copy(update={"planes": planes})


def prepare_samples(samples: SampleSet) -> SampleSet:
    check_plane_groups(samples)
    ordered = samples.sorted_by_plane()
    if len(ordered) < N_PARAMS + 3:
        logger.warning("only %d samples for %d unknowns; the step relies on regularization",
                       len(ordered), N_PARAMS + 3)
    return ordered


# ───────────────────────── Identifiers ────────────────────────────────────

def _refit_if_better(state, system, cost, samples, rho, dial_mode):
    refit = refit_planes(state, system, samples, dial_mode)
    refit_system = with_planes(system, refit, samples, dial_mode)
    refit_cost = least_squares_cost(refit_system, rho)
    if refit_cost <= cost:
        return refit, refit_system, refit_cost
    return state, system, cost


def gauss_newton_step(state: CalibrationState, samples: SampleSet, cfg: LsConfig) -> np.ndarray:
    """One regularized Gauss-Newton (u, P0) step at fixed planes."""
    system = build_residual_system(state, samples, cfg.dial_mode)
    lhs, rhs = normal_equations(system, cfg.rho, 0.0, cfg.ridge)
    return reduced_solve(lhs, rhs, free_columns(system), state.iteration, "ls")


def calibrate_ls(
    samples: SampleSet,
    nominal: RobotModel,
    cfg: Optional[LsConfig] = None,
    initial_anchor=None,
) -> CalibrationResult:
    cfg = cfg or LsConfig()
    start = time.perf_counter()
    samples = prepare_samples(samples)
    state = initialize_state(samples, nominal, initial_anchor, cfg.dial_mode)
    system = build_residual_system(state, samples, cfg.dial_mode)
    cost = least_squares_cost(system, cfg.rho)

    objective: List[float] = []
    step_norms: List[float] = []
    converged, increases, it = False, 0, 0
    for it in range(1, cfg.max_iterations + 1):
        state, system, cost = _refit_if_better(state, system, cost, samples, cfg.rho, cfg.dial_mode)
        if 2.0 * cost < COST_FLOOR:
            objective.append(cost)
            step_norms.append(0.0)
            converged = True
            break
        lhs, rhs = normal_equations(system, cfg.rho, 0.0, cfg.ridge)
        step = reduced_solve(lhs, rhs, free_columns(system), it, "ls")
        state = advance(state, step, it)
        system = build_residual_system(state, samples, cfg.dial_mode)
        new_cost = least_squares_cost(system, cfg.rho)
        objective.append(new_cost)
        step_norms.append(float(np.linalg.norm(step)))
        logger.debug("ls iteration %d: cost %.6e, step %.3e", it, new_cost, step_norms[-1])

        if abs(cost - new_cost) <= cfg.rel_tol * cost or 2.0 * new_cost < COST_FLOOR:
            converged = True
            break
        increases = increases + 1 if new_cost > cost else 0
        cost = new_cost
        if increases >= cfg.divergence_window:
            logger.warning("ls cost increased %d iterations in a row; stopping", increases)
            break

    result = CalibrationResult(
        method="ls", state=state, objective=objective, step_norms=step_norms,
        converged=converged, iterations_used=it, wall_time=time.perf_counter() - start,
    )
    logger.info("ls finished: converged=%s after %d iterations", converged, it)
    return result


def calibrate_lm(
    samples: SampleSet,
    nominal: RobotModel,
    cfg: Optional[LmConfig] = None,
    initial_anchor=None,
) -> CalibrationResult:
    """Levenberg-Marquardt on the stacked residuals with per-iteration plane refits.

    Only accepted steps are recorded, so the objective trace never increases.
    """
    cfg = cfg or LmConfig()
    start = time.perf_counter()
    samples = prepare_samples(samples)
    state = initialize_state(samples, nominal, initial_anchor, cfg.dial_mode)
    system = build_residual_system(state, samples, cfg.dial_mode)
    cost = least_squares_cost(system, cfg.rho)
    mu = cfg.mu0

    objective: List[float] = []
    step_norms: List[float] = []
    converged, it = False, 0
    for it in range(1, cfg.max_iterations + 1):
        state, system, cost = _refit_if_better(state, system, cost, samples, cfg.rho, cfg.dial_mode)
        if 2.0 * cost < COST_FLOOR:
            objective.append(cost)
            step_norms.append(0.0)
            converged = True
            break
        lhs, rhs = normal_equations(system, cfg.rho, 0.0, 0.0)
        columns = free_columns(system)
        scale = np.diag(np.maximum(np.diag(lhs), 1e-12))

        accepted: Optional[Tuple[np.ndarray, CalibrationState, ResidualSystem, float]] = None
        while mu <= cfg.max_mu:
            step = reduced_solve(lhs + mu * scale, rhs, columns, it, "lm")
            trial = advance(state, step, it)
            trial_system = build_residual_system(trial, samples, cfg.dial_mode)
            trial_cost = least_squares_cost(trial_system, cfg.rho)
            if trial_cost < cost:
                accepted = (step, trial, trial_system, trial_cost)
                mu = max(mu / cfg.mu_factor, 1e-15)
                break
            mu *= cfg.mu_factor

        if accepted is None:
            # no damping level decreases the cost: stationary to working precision
            logger.debug("lm iteration %d: no descent step, mu=%.1e", it, mu)
            objective.append(cost)
            step_norms.append(0.0)
            converged = True
            break

        step, state, system, new_cost = accepted
        objective.append(new_cost)
        step_norms.append(float(np.linalg.norm(step)))
        logger.debug("lm iteration %d: cost %.6e, mu %.1e", it, new_cost, mu)
        decrease = cost - new_cost
        cost = new_cost
        if decrease <= cfg.rel_tol * (cost + decrease) or 2.0 * cost < COST_FLOOR:
            converged = True
            break

    result = CalibrationResult(
        method="lm", state=state, objective=objective, step_norms=step_norms,
        converged=converged, iterations_used=it, wall_time=time.perf_counter() - start,
    )
    logger.info("lm finished: converged=%s after %d iterations", converged, it)
    return result
