"""Stacked identification Jacobians and their observability index."""

import logging
from typing import Literal, Optional, Sequence

import numpy as np
import scipy.linalg

from planecal.exceptions import InvalidArgumentError, SingularIndexError
from planecal.kinematics import JacobianMethod, position_jacobians
from planecal.models import N_JOINTS, ObservabilityReport, RobotModel, StackedJacobian

logger = logging.getLogger(__name__)

IndexVariant = Literal["inverse-mean", "as-printed"]


def stack_jacobians(model: RobotModel, configs, method: JacobianMethod | None = None) -> StackedJacobian:
    """Vertical stack [J_1; J_2; ...] of per-configuration position Jacobians."""
    q = np.asarray(configs, dtype=float)
    if q.size == 0:
        raise InvalidArgumentError("at least one configuration is required")
    jac = position_jacobians(model, q.reshape(-1, N_JOINTS), method)
    return StackedJacobian(matrix=jac.reshape(-1, jac.shape[-1]))


def singular_values(J) -> np.ndarray:
    """Singular values in descending order."""
    matrix = J.matrix if isinstance(J, StackedJacobian) else np.asarray(J, dtype=float)
    if not np.all(np.isfinite(matrix)):
        raise InvalidArgumentError("Jacobian contains non-finite entries")
    return scipy.linalg.svd(matrix, compute_uv=False)


def observability_index(
    sigmas: Sequence[float],
    V: float = 2.0,
    variant: IndexVariant = "inverse-mean",
    n_configurations: Optional[int] = None,
) -> float:
    """Scalar summary of a singular-value spectrum.

    `inverse-mean` is the power mean of order -V, which grows with the
    conditioning of the Jacobian and is 0 when any sigma is 0.
    `as-printed` evaluates [(1/N0) sum sigma^-V]^(1/V) with the caller's
    N0 (default: the number of sigmas).
    """
    s = np.asarray(sigmas, dtype=float)
    if s.size == 0:
        raise InvalidArgumentError("no singular values given")
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise InvalidArgumentError("singular values must be finite and non-negative")
    if V <= 0:
        raise InvalidArgumentError(f"V must be positive, got {V}")

    if variant == "inverse-mean":
        if np.any(s == 0):
            return 0.0
        return float(np.mean(s ** -V) ** (-1.0 / V))
    if variant == "as-printed":
        if np.any(s == 0):
            raise SingularIndexError("zero singular value in the as-printed index")
        n0 = s.size if n_configurations is None else n_configurations
        if n0 <= 0:
            raise InvalidArgumentError("N0 must be positive")
        return float((np.sum((1.0 / s ** 2) ** (V / 2.0)) / n0) ** (1.0 / V))
    raise InvalidArgumentError(f"unknown index variant: {variant!r}")


def observability_report(
    J: StackedJacobian,
    V: float = 2.0,
    variant: IndexVariant = "inverse-mean",
    columns: Optional[Sequence[int]] = None,
) -> ObservabilityReport:
    matrix = J.matrix if columns is None else J.matrix[:, list(columns)]
    sigmas = singular_values(matrix)
    n0 = J.n_configurations if variant == "as-printed" else None
    return ObservabilityReport(
        singular_values=sigmas,
        index_value=observability_index(sigmas, V, variant, n0),
        V=V,
        n_configurations=J.n_configurations,
        variant=variant,
    )


def identifiable_columns(
    model: RobotModel,
    n_configurations: int = 60,
    seed: int = 0,
    rtol: float = 1e-8,
) -> np.ndarray:
    """Parameter columns that position measurements can separate.

    Rank-revealing QR on Jacobians at random configurations. Columns that
    are identically zero, or duplicates of others (parallel consecutive
    joint axes), are left out.
    """
    rng = np.random.default_rng(seed)
    configurations = rng.uniform(-np.pi, np.pi, size=(n_configurations, N_JOINTS))
    matrix = stack_jacobians(model, configurations).matrix
    _, r, pivots = scipy.linalg.qr(matrix, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > rtol * diag[0]))
    columns = np.sort(pivots[:rank])
    logger.debug("identifiable columns: %d of %d (dropped %s)", rank, matrix.shape[1],
                 sorted(set(range(matrix.shape[1])) - set(columns.tolist())))
    return columns
