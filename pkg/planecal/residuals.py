"""Cable-length and plane-contact residuals shared by every identifier.

AMPC, LM and LS all linearize through `build_residual_system` and solve
their parameter step through `normal_equations`/`reduced_solve`, so the
solvers differ only in how they use the same rows.
"""

import logging
import warnings
from typing import Literal, Sequence

import numpy as np
import scipy.linalg
from pydantic import BaseModel, ConfigDict

from planecal.exceptions import DegenerateGeometryError, InvalidArgumentError, NumericalFailureError
from planecal.kinematics import JacobianMethod, positions_and_jacobians
from planecal.models import N_PARAMS, CalibrationState, SampleSet

logger = logging.getLogger(__name__)

N_UNKNOWNS = N_PARAMS + 3  # u plus the anchor P0
MIN_LENGTH = 1e-9  # mm
NULL_COLUMN = 1e-6  # column norm, relative to the largest

DialMode = Literal["correction", "ignore"]


class ResidualSystem(BaseModel):
    """One linearization of all samples about a calibration state.

    Rows follow the sample order, which is grouped by plane. Jacobian
    columns are (u, P0).
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    length_residuals: np.ndarray  # L - L_hat
    length_jacobian: np.ndarray  # dL_hat/dv, (M, 27)
    plane_residuals: np.ndarray  # Phi
    plane_jacobian: np.ndarray  # dPhi/dv, (M, 27)
    plane_index: np.ndarray  # position of each row's plane in state.planes
    positions: np.ndarray  # (M, 3)
    jacobians: np.ndarray  # (M, 3, 24)

    @property
    def n_samples(self) -> int:
        return int(self.length_residuals.shape[0])

    @property
    def residuals(self) -> np.ndarray:
        """Stacked [L - L_hat; Phi]."""
        return np.concatenate([self.length_residuals, self.plane_residuals])

    @property
    def jacobian(self) -> np.ndarray:
        """d(residuals)/d(u, P0)."""
        return np.vstack([-self.length_jacobian, self.plane_jacobian])


def plane_rows(state: CalibrationState, samples: SampleSet) -> np.ndarray:
    """Index into state.planes for every sample."""
    lookup = {pid: j for j, pid in enumerate(state.plane_ids)}
    try:
        return np.array([lookup[int(p)] for p in samples.plane_id], dtype=int)
    except KeyError as e:
        raise InvalidArgumentError(f"sample refers to plane {e.args[0]} which the state does not track") from e


def dial_offsets(samples: SampleSet, dial_mode: DialMode) -> np.ndarray:
    if dial_mode == "correction":
        return np.asarray(samples.dial_mm)
    if dial_mode == "ignore":
        return np.zeros(len(samples))
    raise InvalidArgumentError(f"unknown dial mode: {dial_mode!r}")


def length_terms(positions: np.ndarray, anchor: np.ndarray):
    """Predicted cable lengths and unit directions from the anchor to each position."""
    diff = positions - anchor
    lengths = np.linalg.norm(diff, axis=1)
    if np.any(lengths <= MIN_LENGTH):
        raise DegenerateGeometryError("anchor coincides with an end-effector position")
    return lengths, diff / lengths[:, None]


def _plane_terms(state: CalibrationState, rows: np.ndarray, positions, jacobians, dial: np.ndarray):
    W = np.stack([p.W for p in state.planes])[rows]
    gamma = np.stack([p.gamma for p in state.planes])[rows]
    g_plane = np.zeros((positions.shape[0], N_UNKNOWNS))
    g_plane[:, :N_PARAMS] = np.einsum("mi,mij->mj", gamma, jacobians)
    phi = np.einsum("mi,mi->m", gamma, positions - W) - dial
    return phi, g_plane


def build_residual_system(
    state: CalibrationState,
    samples: SampleSet,
    dial_mode: DialMode = "correction",
    method: JacobianMethod | None = None,
) -> ResidualSystem:
    if len(samples) == 0:
        raise InvalidArgumentError("cannot linearize an empty sample set")
    positions, jacobians = positions_and_jacobians(state.model(), samples.joints, method)
    lengths, unit = length_terms(positions, state.anchor)

    g_length = np.zeros((len(samples), N_UNKNOWNS))
    g_length[:, :N_PARAMS] = np.einsum("mi,mij->mj", unit, jacobians)
    g_length[:, N_PARAMS:] = -unit

    rows = plane_rows(state, samples)
    phi, g_plane = _plane_terms(state, rows, positions, jacobians, dial_offsets(samples, dial_mode))
    return ResidualSystem(
        length_residuals=samples.cable_mm - lengths,
        length_jacobian=g_length,
        plane_residuals=phi,
        plane_jacobian=g_plane,
        plane_index=rows,
        positions=positions,
        jacobians=jacobians,
    )


def with_planes(
    system: ResidualSystem,
    state: CalibrationState,
    samples: SampleSet,
    dial_mode: DialMode = "correction",
) -> ResidualSystem:
    """Re-evaluate plane rows for new plane estimates at the same linearization point."""
    phi, g_plane = _plane_terms(state, system.plane_index, system.positions, system.jacobians,
                                dial_offsets(samples, dial_mode))
    return system.model_copy(update={"plane_residuals": phi, "plane_jacobian": g_plane})


def normal_equations(
    system: ResidualSystem,
    rho: Sequence[float] | float,
    multipliers: Sequence[float] | float,
    lam: float,
):
    """Regularized (u, P0) normal equations, averaged over all samples.

    Returns (lhs, rhs) whose solution is the step minimizing the local
    quadratic model of the augmented Lagrangian plus (lam/2)|step|^2.
    """
    m = system.n_samples
    rho_rows = _per_row(rho, system.plane_index)
    gamma_rows = _per_row(multipliers, system.plane_index)

    gl, gp = system.length_jacobian, system.plane_jacobian
    lhs = (gl.T @ gl + gp.T @ (rho_rows[:, None] * gp)) / m + lam * np.eye(N_UNKNOWNS)
    rhs = (gl.T @ system.length_residuals - gp.T @ (rho_rows * system.plane_residuals + gamma_rows)) / m
    return lhs, rhs


def _per_row(values, plane_index: np.ndarray) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        return np.full(plane_index.shape, float(arr))
    return arr[plane_index]


def solve_step(
    lhs: np.ndarray,
    rhs: np.ndarray,
    iteration: int | None = None,
    block: str = "u",
    assume_a: str = "sym",
    max_condition: float | None = None,
) -> np.ndarray:
    if not (np.all(np.isfinite(lhs)) and np.all(np.isfinite(rhs))):
        raise NumericalFailureError("non-finite normal equations", iteration=iteration, block=block)
    if max_condition is not None and np.linalg.cond(lhs) > max_condition:
        raise NumericalFailureError("system is singular to working precision", iteration=iteration, block=block)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            step = scipy.linalg.solve(lhs, rhs, assume_a=assume_a)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise NumericalFailureError(f"singular system: {e}", iteration=iteration, block=block) from e
    if not np.all(np.isfinite(step)):
        raise NumericalFailureError("solver returned a non-finite step", iteration=iteration, block=block)
    return step


def least_squares_cost(system: ResidualSystem, rho: float) -> float:
    """(1/2M) sum (L - L_hat)^2 + (rho/2M) sum Phi^2."""
    m = system.n_samples
    return float(0.5 * (system.length_residuals @ system.length_residuals
                        + rho * system.plane_residuals @ system.plane_residuals) / m)


def free_columns(system: ResidualSystem, rtol: float = 1e-4) -> np.ndarray:
    """Unknowns the cable rows can move independently of the anchor.

    The anchor columns are always kept. Parameter columns are scaled to
    unit norm and the anchor span is projected out; pivoted QR then keeps
    the columns whose remaining part exceeds `rtol`. Dropped columns
    at the nominal table are the zero columns (alpha6, theta6), the d2/d3
    duplicate and the base gauge (theta1, d1), which moves robot and anchor
    together without changing any cable length. The set depends on the
    linearization point: theta6 separates from a6 once a6 is non-zero.
    """
    gl = system.length_jacobian
    anchor = np.arange(N_PARAMS, N_UNKNOWNS)
    params = gl[:, :N_PARAMS]

    norms = np.linalg.norm(params, axis=0)
    if not np.any(norms > 0.0):
        return anchor
    scale = np.where(norms > NULL_COLUMN * norms.max(), norms, np.inf)
    params = params / scale

    q_anchor, _ = scipy.linalg.qr(gl[:, anchor], mode="economic")
    params = params - q_anchor @ (q_anchor.T @ params)

    _, r, pivots = scipy.linalg.qr(params, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    keep = np.sort(pivots[: int(np.sum(diag > rtol))])
    dropped = sorted(set(range(N_PARAMS)) - set(keep.tolist()))
    logger.debug("frozen parameter columns: %s", dropped)
    return np.concatenate([keep, anchor])


def reduced_solve(
    lhs: np.ndarray,
    rhs: np.ndarray,
    columns: np.ndarray,
    iteration: int | None = None,
    block: str = "u",
) -> np.ndarray:
    """Solve on `columns` only; frozen unknowns get a zero step."""
    idx = np.asarray(columns, dtype=int)
    step = np.zeros(N_UNKNOWNS)
    step[idx] = solve_step(lhs[np.ix_(idx, idx)], rhs[idx], iteration, block)
    return step
