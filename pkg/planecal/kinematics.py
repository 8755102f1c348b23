"""D-H forward kinematics and the end-effector position Jacobian.

Every function here is pure; batched variants take joint arrays of shape
(M, 6) and return stacked results so callers never loop in Python over
samples.
"""

from functools import reduce
from typing import List, Literal

import numpy as np

from planecal.exceptions import InvalidArgumentError
from planecal.models import (
    N_JOINTS,
    N_PARAMS,
    DhLink,
    HomogeneousTransform,
    PoseError,
    PositionJacobian,
    RobotModel,
)

JacobianMethod = Literal["analytic", "finite-difference"]

# default used by every caller that does not pass `method`
DEFAULT_JACOBIAN_METHOD: JacobianMethod = "analytic"
FD_STEP = 1e-6


def _as_joint_batch(joints) -> np.ndarray:
    q = np.asarray(joints, dtype=float)
    if q.ndim == 1:
        q = q[None, :]
    if q.ndim != 2 or q.shape[1] != N_JOINTS:
        raise InvalidArgumentError(f"expected {N_JOINTS} joint angles per configuration, got shape {np.shape(joints)}")
    if not np.all(np.isfinite(q)):
        raise InvalidArgumentError("joint angles must be finite")
    return q


def _dh_matrices(alpha, a, d, theta) -> np.ndarray:
    """Closed-form Rz(theta) Tz(d) Tx(a) Rx(alpha), broadcast over inputs."""
    alpha, a, d, theta = np.broadcast_arrays(alpha, a, d, theta)
    ct, st = np.cos(theta), np.sin(theta)
    ca, sa = np.cos(alpha), np.sin(alpha)
    out = np.zeros(theta.shape + (4, 4))
    out[..., 0, 0] = ct
    out[..., 0, 1] = -st * ca
    out[..., 0, 2] = st * sa
    out[..., 0, 3] = a * ct
    out[..., 1, 0] = st
    out[..., 1, 1] = ct * ca
    out[..., 1, 2] = -ct * sa
    out[..., 1, 3] = a * st
    out[..., 2, 1] = sa
    out[..., 2, 2] = ca
    out[..., 2, 3] = d
    out[..., 3, 3] = 1.0
    return out


def _chain(params, q: np.ndarray) -> np.ndarray:
    """Per-link matrices of shape (M, 6, 4, 4) for parameter arrays `params`."""
    alpha, a, d, theta = params
    return _dh_matrices(alpha, a, d, theta + q)


def _positions(params, q: np.ndarray) -> np.ndarray:
    links = _chain(params, q)
    total = links[:, 0]
    for i in range(1, N_JOINTS):
        total = total @ links[:, i]
    return total[:, :3, 3]


# ───────────────────────── Transforms ─────────────────────────────────────

def link_transform(link: DhLink, commanded_angle: float) -> HomogeneousTransform:
    if not np.isfinite(commanded_angle):
        raise InvalidArgumentError(f"commanded angle must be finite, got {commanded_angle}")
    m = _dh_matrices(link.alpha, link.a, link.d, link.theta_offset + commanded_angle)
    return HomogeneousTransform.from_matrix(m)


def link_transforms(model: RobotModel, joints) -> List[HomogeneousTransform]:
    q = _as_joint_batch(joints)
    if q.shape[0] != 1:
        raise InvalidArgumentError("link_transforms takes a single configuration")
    return [link_transform(link, angle) for link, angle in zip(model.links, q[0])]


def forward_kinematics(model: RobotModel, joints) -> HomogeneousTransform:
    """Base-to-tool transform, the ordered product of the six link transforms."""
    return reduce(lambda acc, t: acc @ t, link_transforms(model, joints))


def forward_kinematics_batch(model: RobotModel, joints) -> np.ndarray:
    """Stacked 4x4 base-to-tool matrices, shape (M, 4, 4)."""
    q = _as_joint_batch(joints)
    links = _chain(model.arrays(), q)
    total = links[:, 0]
    for i in range(1, N_JOINTS):
        total = total @ links[:, i]
    return total


def end_effector_positions(model: RobotModel, joints) -> np.ndarray:
    """Tool positions in the base frame, shape (M, 3), mm."""
    return _positions(model.arrays(), _as_joint_batch(joints))


def pose_error(nominal: RobotModel, perturbed: RobotModel, joints) -> PoseError:
    actual = forward_kinematics(perturbed, joints)
    expected = forward_kinematics(nominal, joints)
    return PoseError(
        position=actual.translation - expected.translation,
        rotation=actual.rotation - expected.rotation,
    )


# ───────────────────────── Jacobians ──────────────────────────────────────

def _analytic_jacobians(params, q: np.ndarray) -> np.ndarray:
    alpha, a, d, theta = params
    links = _chain(params, q)
    m = q.shape[0]

    # prefix[k] = A_1..A_k, suffix[k] = A_{k+1}..A_6
    prefix = np.empty((m, N_JOINTS + 1, 4, 4))
    prefix[:, 0] = np.eye(4)
    for k in range(N_JOINTS):
        prefix[:, k + 1] = prefix[:, k] @ links[:, k]
    suffix = np.empty((m, N_JOINTS + 1, 4, 4))
    suffix[:, N_JOINTS] = np.eye(4)
    for k in range(N_JOINTS - 1, -1, -1):
        suffix[:, k] = links[:, k] @ suffix[:, k + 1]

    jac = np.zeros((m, 3, N_PARAMS))
    for i in range(N_JOINTS):
        th = theta[i] + q[:, i]
        ct, st = np.cos(th), np.sin(th)
        ca, sa = np.cos(alpha[i]), np.sin(alpha[i])
        s = suffix[:, i + 1, :3, 3]
        rot = prefix[:, i, :3, :3]
        sx, sy, sz = s[:, 0], s[:, 1], s[:, 2]

        d_theta = np.stack([
            -st * sx - ct * ca * sy + ct * sa * sz - a[i] * st,
            ct * sx - st * ca * sy + st * sa * sz + a[i] * ct,
            np.zeros(m),
        ], axis=1)
        d_alpha = np.stack([
            st * sa * sy + st * ca * sz,
            -ct * sa * sy - ct * ca * sz,
            ca * sy - sa * sz,
        ], axis=1)
        d_a = np.stack([ct, st, np.zeros(m)], axis=1)
        d_d = np.tile([0.0, 0.0, 1.0], (m, 1))

        for block, local in enumerate((d_alpha, d_a, d_d, d_theta)):
            jac[:, :, block * N_JOINTS + i] = np.einsum("mij,mj->mi", rot, local)
    return jac


def _perturbed_params(params, k: int, h: float):
    flat = np.concatenate(params)
    flat[k] += h
    return np.split(flat, 4)


def finite_difference_jacobians(model: RobotModel, joints, step: float = FD_STEP) -> np.ndarray:
    """Central-difference d(position)/d(parameters), shape (M, 3, 24)."""
    q = _as_joint_batch(joints)
    params = model.arrays()
    jac = np.empty((q.shape[0], 3, N_PARAMS))
    for k in range(N_PARAMS):
        plus = _positions(_perturbed_params(params, k, step), q)
        minus = _positions(_perturbed_params(params, k, -step), q)
        jac[:, :, k] = (plus - minus) / (2.0 * step)
    return jac


def position_jacobians(model: RobotModel, joints, method: JacobianMethod | None = None) -> np.ndarray:
    """Batched position Jacobians, shape (M, 3, 24)."""
    method = method or DEFAULT_JACOBIAN_METHOD
    if method == "analytic":
        return _analytic_jacobians(model.arrays(), _as_joint_batch(joints))
    if method == "finite-difference":
        return finite_difference_jacobians(model, joints)
    raise InvalidArgumentError(f"unknown Jacobian method: {method!r}")


def position_jacobian(model: RobotModel, joints, method: JacobianMethod | None = None) -> PositionJacobian:
    q = _as_joint_batch(joints)
    if q.shape[0] != 1:
        raise InvalidArgumentError("position_jacobian takes a single configuration")
    return PositionJacobian(matrix=position_jacobians(model, q, method)[0])


def positions_and_jacobians(model: RobotModel, joints, method: JacobianMethod | None = None):
    """(positions (M, 3), jacobians (M, 3, 24)) at one linearization point."""
    return end_effector_positions(model, joints), position_jacobians(model, joints, method)


def joint_jacobian(model: RobotModel, joints, step: float = FD_STEP) -> np.ndarray:
    """Central-difference d(position)/d(joints), shape (3, 6)."""
    q = _as_joint_batch(joints)[0]
    shifted = np.concatenate([q + step * np.eye(N_JOINTS), q - step * np.eye(N_JOINTS)])
    p = _positions(model.arrays(), shifted)
    return ((p[:N_JOINTS] - p[N_JOINTS:]) / (2.0 * step)).T


def reach_bound(model: RobotModel) -> float:
    """Upper bound on the tool's distance from the base origin, mm."""
    _, a, d, _ = model.arrays()
    return float(np.sum(np.abs(a)) + np.sum(np.abs(d)))
