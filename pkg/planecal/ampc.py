"""ADMM identification of kinematic errors under multi-plane contact constraints.

One outer iteration linearizes every sample once, then updates in order:
all plane points W_j, all plane normals gamma_j, the joint (u, P0) step,
and finally the multipliers Gamma_j from freshly evaluated constraints.
"""

import logging
import time
from typing import List, Optional, Tuple

import numpy as np

from planecal.baselines import advance, initialize_state, prepare_samples
from planecal.exceptions import InvalidArgumentError, NumericalFailureError
from planecal.kinematics import end_effector_positions
from planecal.models import (
    N_PARAMS,
    AmpcConfig,
    CalibrationResult,
    CalibrationState,
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
    length_terms,
    normal_equations,
    reduced_solve,
    solve_step,
    with_planes,
)

logger = logging.getLogger(__name__)

MAX_CONDITION = 1e14  # for the 3x3 plane systems
MIN_TOTAL_SAMPLES = N_PARAMS + 3
MAX_HALVINGS = 20


# ───────────────────────── Residuals ──────────────────────────────────────

def predicted_length(model: RobotModel, anchor, joints) -> float:
    """Distance from the end-effector to the cable anchor, mm."""
    position = end_effector_positions(model, joints)
    lengths, _ = length_terms(position, np.asarray(anchor, dtype=float))
    return float(lengths[0])


def plane_residual(model: RobotModel, plane: PlaneEstimate, joints, dial_reading: float = 0.0) -> float:
    """Signed distance of the end-effector from `plane`, less the dial reading."""
    position = end_effector_positions(model, joints)[0]
    return float(plane.gamma @ (position - plane.W) - dial_reading)


def _config_for(cfg: Optional[AmpcConfig], n_planes: int) -> AmpcConfig:
    cfg = cfg or AmpcConfig(n_planes=n_planes)
    if cfg.n_planes != n_planes:
        logger.debug("re-broadcasting AMPC settings from %d to %d planes", cfg.n_planes, n_planes)
        try:
            cfg = cfg.for_planes(n_planes)
        except ValueError as e:
            raise InvalidArgumentError(str(e)) from e
    return cfg


def _lagrangian(system: ResidualSystem, rho: List[float], multipliers: np.ndarray) -> float:
    m = system.n_samples
    rho_rows = np.asarray(rho)[system.plane_index]
    gamma_rows = np.asarray(multipliers)[system.plane_index]
    phi = system.plane_residuals
    r = system.length_residuals
    return float((0.5 * r @ r + gamma_rows @ phi + 0.5 * (rho_rows * phi) @ phi) / m)


def augmented_lagrangian(state: CalibrationState, samples: SampleSet, cfg: AmpcConfig) -> float:
    """Augmented Lagrangian at zero step, the AMPC convergence diagnostic."""
    groups = samples.group_by_plane()
    missing = [pid for pid in state.plane_ids if pid not in groups]
    if missing:
        raise InvalidArgumentError(f"no samples for plane(s) {missing}")
    cfg = _config_for(cfg, len(state.planes))
    system = build_residual_system(state, samples, cfg.dial_mode)
    return _lagrangian(system, cfg.rho, state.multipliers)


# ───────────────────────── Block updates ──────────────────────────────────

def _plane_point_step(plane: PlaneEstimate, positions, dial, multiplier, rho, lam, iteration=None) -> np.ndarray:
    gamma = plane.gamma
    phi = (positions - plane.W) @ gamma - dial
    lhs = rho * np.outer(gamma, gamma) + lam * np.eye(3)
    rhs = gamma * (rho * phi.mean() + multiplier)
    step = solve_step(lhs, rhs, iteration, "W", assume_a="gen", max_condition=MAX_CONDITION)
    return plane.W + step


def _plane_normal_step(plane: PlaneEstimate, positions, dial, multiplier, rho, lam, iteration=None) -> np.ndarray:
    offsets = positions - plane.W
    phi = offsets @ plane.gamma - dial
    n = positions.shape[0]
    lhs = rho * (offsets.T @ offsets) / n + lam * np.eye(3)
    grad = offsets.T @ (rho * phi + multiplier) / n
    step = solve_step(lhs, grad, iteration, "gamma", assume_a="gen", max_condition=MAX_CONDITION)
    gamma = plane.gamma - step
    norm = np.linalg.norm(gamma)
    if not np.isfinite(norm) or norm < 1e-12:
        raise NumericalFailureError("plane normal collapsed to zero", iteration=iteration, block="gamma")
    gamma = gamma / norm
    # keep the orientation of the previous estimate
    return gamma if gamma @ plane.gamma >= 0 else -gamma


def _plane_inputs(state: CalibrationState, samples_j: SampleSet, cfg: AmpcConfig, j: int):
    if not 0 <= j < len(state.planes):
        raise InvalidArgumentError(f"plane index {j} out of range")
    if len(samples_j) == 0:
        raise InvalidArgumentError(f"plane {state.plane_ids[j]} has no samples")
    cfg = _config_for(cfg, len(state.planes))
    positions = end_effector_positions(state.model(), samples_j.joints)
    return cfg, positions, dial_offsets(samples_j, cfg.dial_mode)


def update_plane_point(state: CalibrationState, samples_j: SampleSet, cfg: AmpcConfig, j: int) -> np.ndarray:
    cfg, positions, dial = _plane_inputs(state, samples_j, cfg, j)
    return _plane_point_step(state.planes[j], positions, dial, state.multipliers[j],
                             cfg.rho[j], cfg.lam[j], state.iteration)


def update_plane_normal(state: CalibrationState, samples_j: SampleSet, cfg: AmpcConfig, j: int) -> np.ndarray:
    """Regularized normal step, renormalized to unit length."""
    cfg, positions, dial = _plane_inputs(state, samples_j, cfg, j)
    return _plane_normal_step(state.planes[j], positions, dial, state.multipliers[j],
                              cfg.rho[j], cfg.lam[j], state.iteration)


def _parameter_step(system: ResidualSystem, state: CalibrationState, cfg: AmpcConfig, iteration) -> np.ndarray:
    lhs, rhs = normal_equations(system, cfg.rho, state.multipliers, float(np.mean(cfg.lam)))
    return reduced_solve(lhs, rhs, free_columns(system), iteration, "u")


def update_parameters(state: CalibrationState, samples: SampleSet, cfg: AmpcConfig) -> Tuple[ParameterVector, np.ndarray]:
    """Joint (u, P0) step from the regularized normal equations.

    Only the unknowns in `free_columns` move; the rest keep their value.
    """
    if len(samples) < MIN_TOTAL_SAMPLES:
        raise InvalidArgumentError(f"the parameter step needs at least {MIN_TOTAL_SAMPLES} samples, got {len(samples)}")
    cfg = _config_for(cfg, len(state.planes))
    system = build_residual_system(state, samples, cfg.dial_mode)
    step = _parameter_step(system, state, cfg, state.iteration)
    return ParameterVector(values=state.u.values + step[:N_PARAMS]), state.anchor + step[N_PARAMS:]


def _multiplier_step(system: ResidualSystem, multipliers: np.ndarray, cfg: AmpcConfig) -> np.ndarray:
    new = np.array(multipliers, dtype=float)
    for j in range(len(new)):
        rows = system.plane_index == j
        if np.any(rows):
            new[j] += cfg.eta[j] * cfg.rho[j] * system.plane_residuals[rows].mean()
    return new


def update_multipliers(state: CalibrationState, samples: SampleSet, cfg: AmpcConfig) -> np.ndarray:
    """Dual ascent on each plane's mean constraint violation."""
    cfg = _config_for(cfg, len(state.planes))
    system = build_residual_system(state, samples, cfg.dial_mode)
    return _multiplier_step(system, state.multipliers, cfg)


def _descend(
    moved: CalibrationState,
    direction: np.ndarray,
    samples: SampleSet,
    cfg: AmpcConfig,
    current: float,
    iteration: int,
):
    """Halve the (u, P0) step until the sweep does not raise the Lagrangian.

    Each trial is relinearized and given updated multipliers; if those
    raise f, the trial is retried with the multipliers left as they were.
    Returns (state, system, f, step norm) or None when nothing descends.
    """
    for halving in range(MAX_HALVINGS + 1):
        step = direction * 0.5 ** halving
        trial = advance(moved, step, iteration)
        # fresh linearization: used for the multipliers now and the planes next iteration
        system = build_residual_system(trial, samples, cfg.dial_mode)
        multipliers = _multiplier_step(system, trial.multipliers, cfg)
        multipliers.setflags(write=False)
        for gammas in (multipliers, trial.multipliers):
            f = _lagrangian(system, cfg.rho, gammas)
            if f <= current:
                if halving:
                    logger.debug("ampc iteration %d: step halved %d times", iteration, halving)
                return (trial.model_copy(update={"multipliers": gammas}), system, f,
                        float(np.linalg.norm(step)))
    return None


# ───────────────────────── Driver ─────────────────────────────────────────

def calibrate_ampc(
    samples: SampleSet,
    nominal: RobotModel,
    cfg: Optional[AmpcConfig] = None,
    initial_anchor=None,
) -> CalibrationResult:
    start = time.perf_counter()
    samples = prepare_samples(samples)
    if len(samples) < MIN_TOTAL_SAMPLES:
        raise InvalidArgumentError(f"AMPC needs at least {MIN_TOTAL_SAMPLES} samples, got {len(samples)}")
    n_planes = len(samples.plane_ids)
    cfg = _config_for(cfg, n_planes)

    state = initialize_state(samples, nominal, initial_anchor, cfg.dial_mode)
    system = build_residual_system(state, samples, cfg.dial_mode)
    dial = dial_offsets(samples, cfg.dial_mode)
    masks = [system.plane_index == j for j in range(n_planes)]
    current = _lagrangian(system, cfg.rho, state.multipliers)

    objective: List[float] = []
    step_norms: List[float] = []
    converged, it = False, 0
    for it in range(1, cfg.max_outer_iterations + 1):
        planes = list(state.planes)
        for j, rows in enumerate(masks):
            W = _plane_point_step(planes[j], system.positions[rows], dial[rows],
                                  state.multipliers[j], cfg.rho[j], cfg.lam[j], it)
            planes[j] = PlaneEstimate(W=W, gamma=planes[j].gamma)
        for j, rows in enumerate(masks):
            gamma = _plane_normal_step(planes[j], system.positions[rows], dial[rows],
                                       state.multipliers[j], cfg.rho[j], cfg.lam[j], it)
            planes[j] = PlaneEstimate(W=planes[j].W, gamma=gamma)
        moved = state.model_copy(update={"planes": planes})
        direction = _parameter_step(with_planes(system, moved, samples, cfg.dial_mode), moved, cfg, it)

        accepted = _descend(moved, direction, samples, cfg, current, it)
        if accepted is None:
            logger.debug("ampc iteration %d: no step lowers the Lagrangian", it)
            objective.append(current)
            step_norms.append(0.0)
            converged = True
            break
        state, system, current, step_norm = accepted
        objective.append(current)
        step_norms.append(step_norm)
        logger.debug("ampc iteration %d: f=%.6e step=%.3e", it, current, step_norm)
        if step_norm <= cfg.convergence_tol:
            converged = True
            break

    if not converged:
        logger.warning("ampc stopped after %d iterations without reaching tol %.1e (last step %.3e)",
                       it, cfg.convergence_tol, step_norms[-1] if step_norms else float("nan"))
    result = CalibrationResult(
        method="ampc", state=state, objective=objective, step_norms=step_norms,
        converged=converged, iterations_used=it, wall_time=time.perf_counter() - start,
    )
    logger.info("ampc finished: converged=%s after %d iterations", converged, it)
    return result
