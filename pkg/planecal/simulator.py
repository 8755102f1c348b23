"""Synthetic stand-in for the cable/dial measurement rig.

A ground-truth robot (nominal model plus a bounded perturbation) touches
each plane at random points of a rectangular patch. Joint angles come from
position IK under the true model; cable lengths and dial readings are
computed from the true geometry and corrupted with Gaussian noise.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np

from planecal.exceptions import InvalidArgumentError, RegionInfeasibleError, UnreachableTargetError
from planecal.kinematics import end_effector_positions, joint_jacobian, reach_bound
from planecal.models import (
    N_JOINTS,
    N_PARAMS,
    GroundTruth,
    MeasurementSample,
    NoiseSpec,
    ParameterVector,
    PerturbationCaps,
    PlaneSpec,
    RobotModel,
    SampleSet,
    wrap_angle,
)

logger = logging.getLogger(__name__)

DEFAULT_ANCHOR = (400.0, 800.0, 2000.0)
DEFAULT_REGION = (400.0, 400.0)  # mm, patch centred on the plane point
IK_TOL = 1e-6  # mm
SIM_IK_TOL = 1e-9  # mm, tight enough that noiseless data is exact
IK_DAMPING = 1.0  # mm
IK_MAX_STEP = 100.0  # mm of task-space error handled per iteration
RESAMPLE_FACTOR = 10


def default_planes() -> List[PlaneSpec]:
    """Horizontal, 45-degree and vertical planes inside the nominal workspace."""
    s = np.sin(np.pi / 4)
    return [
        PlaneSpec(name="horizontal", W=(1400.0, 0.0, 900.0), gamma=(0.0, 0.0, 1.0)),
        PlaneSpec(name="tilted", W=(1300.0, -400.0, 1300.0), gamma=(0.0, s, s)),
        PlaneSpec(name="vertical", W=(1300.0, -500.0, 1200.0), gamma=(0.0, 1.0, 0.0)),
    ]


def perturb_parameters(caps: Optional[PerturbationCaps], rng: np.random.Generator) -> ParameterVector:
    """Uniform deltas in [-cap, cap] per parameter block."""
    bound = (caps or PerturbationCaps()).as_vector()
    return ParameterVector(values=rng.uniform(-1.0, 1.0, N_PARAMS) * bound)


def make_ground_truth(
    seed: int = 0,
    caps: Optional[PerturbationCaps] = None,
    planes: Optional[Sequence[PlaneSpec]] = None,
    anchor=DEFAULT_ANCHOR,
    nominal: Optional[RobotModel] = None,
) -> GroundTruth:
    rng = np.random.default_rng(seed)
    return GroundTruth(
        perturbation=perturb_parameters(caps, rng),
        anchor=anchor,
        planes=list(planes) if planes is not None else default_planes(),
        nominal=nominal or RobotModel.nominal(),
    )


# ───────────────────────── Inverse kinematics ─────────────────────────────

def ik_position(
    model: RobotModel,
    target,
    seed_joints=None,
    tol: float = IK_TOL,
    max_iters: int = 200,
    damping: float = IK_DAMPING,
) -> np.ndarray:
    """Damped-least-squares position IK; orientation is left free."""
    target = np.asarray(target, dtype=float)
    if target.shape != (3,) or not np.all(np.isfinite(target)):
        raise InvalidArgumentError(f"target must be a finite 3-vector, got {target}")
    if np.linalg.norm(target) > reach_bound(model):
        raise UnreachableTargetError(f"target {target} lies beyond the reach bound {reach_bound(model):.1f} mm")

    q = np.zeros(N_JOINTS) if seed_joints is None else np.asarray(seed_joints, dtype=float).copy()
    error = target - end_effector_positions(model, q)[0]
    lam = damping
    for _ in range(max_iters):
        err_norm = np.linalg.norm(error)
        if err_norm <= tol:
            return q
        e = error if err_norm <= IK_MAX_STEP else error * (IK_MAX_STEP / err_norm)
        J = joint_jacobian(model, q)
        dq = J.T @ np.linalg.solve(J @ J.T + lam ** 2 * np.eye(3), e)

        # backtracking: halve until the error shrinks, else damp harder
        alpha = 1.0
        for _ in range(5):
            q_try = q + alpha * dq
            err_try = target - end_effector_positions(model, q_try)[0]
            if np.linalg.norm(err_try) < err_norm:
                q, error = q_try, err_try
                lam = max(lam / 2.0, damping)
                break
            alpha *= 0.5
        else:
            lam *= 2.0
    if np.linalg.norm(error) <= tol:
        return q
    raise UnreachableTargetError(f"IK did not reach {target} within {max_iters} iterations "
                                 f"(residual {np.linalg.norm(error):.3e} mm)")


def compensate_joints(calibrated: RobotModel, target, seed_joints=None, tol: float = IK_TOL) -> np.ndarray:
    """Joint command that puts the calibrated robot's tool at `target`."""
    return wrap_angle(ik_position(calibrated, target, seed_joints, tol=tol))


# ───────────────────────── Dataset generation ─────────────────────────────

def plane_basis(gamma) -> Tuple[np.ndarray, np.ndarray]:
    """Two in-plane unit vectors; the first follows the base x-axis where possible."""
    gamma = np.asarray(gamma, dtype=float)
    for axis in (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])):
        e1 = axis - (axis @ gamma) * gamma
        if np.linalg.norm(e1) > 1e-6:
            e1 = e1 / np.linalg.norm(e1)
            return e1, np.cross(gamma, e1)
    raise InvalidArgumentError(f"cannot build an in-plane basis for {gamma}")


def _plane_samples(
    truth: RobotModel,
    anchor: np.ndarray,
    plane: PlaneSpec,
    plane_id: int,
    n: int,
    noise: NoiseSpec,
    region: Tuple[float, float],
    seeds: np.random.SeedSequence,
) -> List[MeasurementSample]:
    target_seed, noise_seed = seeds.spawn(2)
    target_rng = np.random.default_rng(target_seed)
    noise_rng = np.random.default_rng(noise_seed)
    e1, e2 = plane_basis(plane.gamma)
    half = np.asarray(region, dtype=float) / 2.0

    rows: List[MeasurementSample] = []
    previous = np.zeros(N_JOINTS)
    attempts, max_attempts = 0, RESAMPLE_FACTOR * n
    while len(rows) < n:
        if attempts >= max_attempts:
            raise RegionInfeasibleError(
                f"plane {plane.name!r}: only {len(rows)} of {n} targets reachable after {attempts} attempts")
        attempts += 1
        u, v = target_rng.uniform(-half, half)
        target = plane.W + u * e1 + v * e2
        try:
            q = ik_position(truth, target, previous, tol=SIM_IK_TOL)
        except UnreachableTargetError:
            try:
                q = ik_position(truth, target, np.zeros(N_JOINTS), tol=SIM_IK_TOL)
            except UnreachableTargetError:
                logger.debug("plane %s: target %s unreachable, resampling", plane.name, target)
                continue
        previous = q
        q = wrap_angle(q)
        p = end_effector_positions(truth, q)[0]
        rows.append(MeasurementSample(
            joints=q + noise_rng.normal(0.0, noise.joint_sigma, N_JOINTS) if noise.joint_sigma else q,
            cable_mm=np.linalg.norm(p - anchor) + (noise_rng.normal(0.0, noise.cable_sigma) if noise.cable_sigma else 0.0),
            dial_mm=plane.gamma @ (p - plane.W) + (noise_rng.normal(0.0, noise.dial_sigma) if noise.dial_sigma else 0.0),
            plane_id=plane_id,
        ))
    if attempts > n:
        logger.info("plane %s: %d targets resampled", plane.name, attempts - n)
    return rows


def generate_dataset(
    gt: GroundTruth,
    samples_per_plane: int = 800,
    noise: Optional[NoiseSpec] = None,
    region: Tuple[float, float] = DEFAULT_REGION,
    planes: Optional[Sequence[PlaneSpec]] = None,
    max_workers: int = 1,
) -> SampleSet:
    """Samples for every plane, ordered by plane id (the index into `planes`)."""
    if samples_per_plane < 3:
        raise InvalidArgumentError(f"need at least 3 samples per plane, got {samples_per_plane}")
    noise = noise or NoiseSpec()
    planes = list(planes) if planes is not None else gt.planes
    truth = gt.model()
    anchor = np.asarray(gt.anchor)
    seeds = np.random.SeedSequence(noise.seed).spawn(len(planes))

    def _one(j: int) -> List[MeasurementSample]:
        return _plane_samples(truth, anchor, planes[j], j, samples_per_plane, noise, region, seeds[j])

    with ThreadPoolExecutor(max_workers=max(1, min(max_workers, len(planes)))) as ex:
        per_plane = list(ex.map(_one, range(len(planes))))

    samples = SampleSet.from_rows([row for rows in per_plane for row in rows])
    logger.info("generated %d samples on %d planes", len(samples), len(planes))
    return samples


def subsample(samples: SampleSet, count: int, seed: int = 0) -> SampleSet:
    """Uniform draw without replacement; rows keep their original order."""
    if count < 0 or count > len(samples):
        raise InvalidArgumentError(f"cannot draw {count} of {len(samples)} samples")
    rng = np.random.default_rng(seed)
    return samples.take(np.sort(rng.choice(len(samples), size=count, replace=False)))


def subsample_per_plane(samples: SampleSet, count: int, seed: int = 0) -> SampleSet:
    """`subsample` applied to every plane independently."""
    groups = samples.group_by_plane()
    return SampleSet.concat([subsample(g, count, seed + pid) for pid, g in groups.items()])
