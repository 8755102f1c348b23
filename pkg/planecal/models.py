from typing import Annotated, Dict, List, Literal, Optional

import numpy as np
import pandas as pd
from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    PlainSerializer,
    field_validator,
    model_validator,
)

N_JOINTS = 6
N_PARAMS = 4 * N_JOINTS
BLOCKS = ("alpha", "a", "d", "theta")
ANGLE_BLOCKS = ("alpha", "theta")


def wrap_angle(value):
    """Map radians onto (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(value, dtype=float), 2.0 * np.pi)


def _array_validator(shape=None, dtype=float):
    def convert(value):
        arr = np.array(value, dtype=dtype)
        if shape is not None and arr.shape != shape:
            raise ValueError(f"expected array of shape {shape}, got {arr.shape}")
        if dtype is float and not np.all(np.isfinite(arr)):
            raise ValueError("array contains NaN or Inf")
        arr.setflags(write=False)
        return arr
    return convert


def _to_list(arr: np.ndarray) -> list:
    return np.asarray(arr).tolist()


Vector3 = Annotated[np.ndarray, BeforeValidator(_array_validator((3,))), PlainSerializer(_to_list, return_type=list)]
Matrix3 = Annotated[np.ndarray, BeforeValidator(_array_validator((3, 3))), PlainSerializer(_to_list, return_type=list)]
Vector24 = Annotated[np.ndarray, BeforeValidator(_array_validator((N_PARAMS,))), PlainSerializer(_to_list, return_type=list)]
FloatArray = Annotated[np.ndarray, BeforeValidator(_array_validator()), PlainSerializer(_to_list, return_type=list)]
IntArray = Annotated[np.ndarray, BeforeValidator(_array_validator(dtype=int)), PlainSerializer(_to_list, return_type=list)]


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True, extra="forbid")


# ───────────────────────── Kinematics ─────────────────────────────────────

class DhLink(_Frozen):
    alpha: float  # rad
    a: float  # mm
    d: float  # mm
    theta_offset: float  # rad

    @field_validator("alpha", "a", "d", "theta_offset")
    @classmethod
    def _finite(cls, v: float) -> float:
        if not np.isfinite(v):
            raise ValueError("D-H parameters must be finite")
        return float(v)

    @field_validator("alpha", "theta_offset")
    @classmethod
    def _wrap(cls, v: float) -> float:
        return float(wrap_angle(v))

    @classmethod
    def from_degrees(cls, alpha_deg: float, a: float, d: float, theta_deg: float) -> "DhLink":
        return cls(alpha=np.deg2rad(alpha_deg), a=a, d=d, theta_offset=np.deg2rad(theta_deg))

    def to_degrees(self) -> Dict[str, float]:
        return {
            "alpha_deg": float(np.rad2deg(self.alpha)),
            "a_mm": self.a,
            "d_mm": self.d,
            "theta_deg": float(np.rad2deg(self.theta_offset)),
        }


# Joint i: alpha/deg, a/mm, d/mm, theta/deg
TABLE_I = (
    (-90.0, 250.0, 653.5, 0.0),
    (0.0, 900.0, 0.0, -90.0),
    (90.0, -205.0, 0.0, 180.0),
    (-90.0, 0.0, 1030.2, 0.0),
    (90.0, 0.0, 0.0, 90.0),
    (0.0, 0.0, 200.6, 0.0),
)


class ParameterVector(_Frozen):
    """Kinematic parameter deltas ordered (dalpha1..6, da1..6, dd1..6, dtheta1..6)."""

    values: Vector24

    @classmethod
    def zeros(cls) -> "ParameterVector":
        return cls(values=np.zeros(N_PARAMS))

    @classmethod
    def from_blocks(cls, alpha=None, a=None, d=None, theta=None) -> "ParameterVector":
        blocks = [np.zeros(N_JOINTS) if b is None else np.asarray(b, dtype=float) for b in (alpha, a, d, theta)]
        return cls(values=np.concatenate(blocks))

    @staticmethod
    def index(block: str, joint: int) -> int:
        """Column of `block` for 1-based `joint`."""
        return BLOCKS.index(block) * N_JOINTS + (joint - 1)

    def block(self, name: str) -> np.ndarray:
        start = BLOCKS.index(name) * N_JOINTS
        return self.values[start:start + N_JOINTS]

    @property
    def alpha(self) -> np.ndarray:
        return self.block("alpha")

    @property
    def a(self) -> np.ndarray:
        return self.block("a")

    @property
    def d(self) -> np.ndarray:
        return self.block("d")

    @property
    def theta(self) -> np.ndarray:
        return self.block("theta")

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def __add__(self, other: "ParameterVector") -> "ParameterVector":
        return ParameterVector(values=self.values + other.values)

    def __sub__(self, other: "ParameterVector") -> "ParameterVector":
        return ParameterVector(values=self.values - other.values)

    def __neg__(self) -> "ParameterVector":
        return ParameterVector(values=-self.values)


class RobotModel(_Frozen):
    links: List[DhLink]

    @field_validator("links")
    @classmethod
    def _six_links(cls, v: List[DhLink]) -> List[DhLink]:
        if len(v) != N_JOINTS:
            raise ValueError(f"a robot model needs exactly {N_JOINTS} links, got {len(v)}")
        return v

    @classmethod
    def nominal(cls) -> "RobotModel":
        return cls(links=[DhLink.from_degrees(*row) for row in TABLE_I])

    @classmethod
    def from_arrays(cls, alpha, a, d, theta) -> "RobotModel":
        return cls(links=[
            DhLink(alpha=al, a=aa, d=dd, theta_offset=th) for al, aa, dd, th in zip(alpha, a, d, theta)
        ])

    def arrays(self):
        """Return (alpha, a, d, theta_offset) as length-6 arrays."""
        alpha = np.array([l.alpha for l in self.links])
        a = np.array([l.a for l in self.links])
        d = np.array([l.d for l in self.links])
        theta = np.array([l.theta_offset for l in self.links])
        return alpha, a, d, theta

    def apply(self, delta: ParameterVector) -> "RobotModel":
        alpha, a, d, theta = self.arrays()
        return RobotModel.from_arrays(alpha + delta.alpha, a + delta.a, d + delta.d, theta + delta.theta)

    def subtract(self, delta: ParameterVector) -> "RobotModel":
        return self.apply(-delta)

    def difference(self, other: "RobotModel") -> ParameterVector:
        """Deltas that turn `other` into this model (angles wrapped)."""
        mine, theirs = self.arrays(), other.arrays()
        alpha = wrap_angle(mine[0] - theirs[0])
        theta = wrap_angle(mine[3] - theirs[3])
        return ParameterVector.from_blocks(alpha, mine[1] - theirs[1], mine[2] - theirs[2], theta)

    def to_table(self) -> pd.DataFrame:
        """D-H table in degrees, one row per joint."""
        rows = [{"joint": i + 1, **link.to_degrees()} for i, link in enumerate(self.links)]
        return pd.DataFrame(rows, columns=["joint", "alpha_deg", "a_mm", "d_mm", "theta_deg"])

    @classmethod
    def from_table(cls, table: pd.DataFrame) -> "RobotModel":
        table = table.sort_values("joint")
        return cls(links=[
            DhLink.from_degrees(r.alpha_deg, r.a_mm, r.d_mm, r.theta_deg) for r in table.itertuples()
        ])


class HomogeneousTransform(_Frozen):
    rotation: Matrix3
    translation: Vector3  # mm

    @classmethod
    def identity(cls) -> "HomogeneousTransform":
        return cls(rotation=np.eye(3), translation=np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "HomogeneousTransform":
        return cls(rotation=matrix[:3, :3], translation=matrix[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def compose(self, other: "HomogeneousTransform") -> "HomogeneousTransform":
        return HomogeneousTransform(
            rotation=self.rotation @ other.rotation,
            translation=self.rotation @ other.translation + self.translation,
        )

    __matmul__ = compose

    def inverse(self) -> "HomogeneousTransform":
        rt = self.rotation.T
        return HomogeneousTransform(rotation=rt, translation=-rt @ self.translation)


class PoseError(_Frozen):
    position: Vector3  # mm
    rotation: Matrix3  # carried along, never consumed by the measurement models


class PositionJacobian(_Frozen):
    """d(position)/d(parameters), 3 x 24, columns ordered as ParameterVector."""

    matrix: FloatArray

    @field_validator("matrix")
    @classmethod
    def _shape(cls, v: np.ndarray) -> np.ndarray:
        if v.shape != (3, N_PARAMS):
            raise ValueError(f"position Jacobian must be 3x{N_PARAMS}, got {v.shape}")
        return v

    def column(self, block: str, joint: int) -> np.ndarray:
        return self.matrix[:, ParameterVector.index(block, joint)]


# ───────────────────────── Observability / MCS ────────────────────────────

class StackedJacobian(_Frozen):
    matrix: FloatArray  # (3*N0) x 24

    @field_validator("matrix")
    @classmethod
    def _rows(cls, v: np.ndarray) -> np.ndarray:
        if v.ndim != 2 or v.shape[0] % 3 != 0:
            raise ValueError(f"stacked Jacobian must have 3*N0 rows, got shape {v.shape}")
        return v

    @property
    def n_configurations(self) -> int:
        return self.matrix.shape[0] // 3


class ObservabilityReport(_Frozen):
    singular_values: FloatArray
    index_value: float
    V: float = 2.0
    n_configurations: int
    variant: Literal["inverse-mean", "as-printed"] = "inverse-mean"


class DeConfig(_Frozen):
    population_size: int = Field(40, ge=4)
    max_generations: int = Field(300, ge=1)
    F: float = Field(0.5, gt=0.0, le=2.0)
    CR: float = Field(0.9, ge=0.0, le=1.0)
    seed: int = 0
    stall_generations: int = Field(50, ge=1)
    workers: int = Field(1, ge=1)


class SelectionResult(_Frozen):
    chosen_indices: List[int]
    index_value: float
    generations_used: int
    history: List[float]
    final_population_values: List[float] = Field(default_factory=list)


# ───────────────────────── Measurements ───────────────────────────────────

class MeasurementSample(_Frozen):
    joints: FloatArray  # rad
    cable_mm: float
    dial_mm: float = 0.0
    plane_id: int = Field(0, ge=0)

    @field_validator("joints")
    @classmethod
    def _six(cls, v: np.ndarray) -> np.ndarray:
        if v.shape != (N_JOINTS,):
            raise ValueError(f"a sample needs {N_JOINTS} joint angles, got {v.size}")
        return v


class SampleSet(_Frozen):
    """Column-oriented measurement samples; rows keep their original order."""

    joints: FloatArray  # (M, 6) rad
    cable_mm: FloatArray
    dial_mm: FloatArray
    plane_id: IntArray

    @model_validator(mode="after")
    def _consistent(self) -> "SampleSet":
        m = self.cable_mm.shape[0]
        if self.joints.shape != (m, N_JOINTS):
            raise ValueError(f"joints must be ({m}, {N_JOINTS}), got {self.joints.shape}")
        if self.dial_mm.shape != (m,) or self.plane_id.shape != (m,):
            raise ValueError("cable, dial and plane_id columns must have equal length")
        if m and self.plane_id.min() < 0:
            raise ValueError("plane_id must be non-negative")
        return self

    @classmethod
    def empty(cls) -> "SampleSet":
        return cls(joints=np.zeros((0, N_JOINTS)), cable_mm=np.zeros(0), dial_mm=np.zeros(0),
                   plane_id=np.zeros(0, dtype=int))

    @classmethod
    def from_rows(cls, rows: List[MeasurementSample]) -> "SampleSet":
        if not rows:
            return cls.empty()
        return cls(
            joints=np.stack([r.joints for r in rows]),
            cable_mm=[r.cable_mm for r in rows],
            dial_mm=[r.dial_mm for r in rows],
            plane_id=[r.plane_id for r in rows],
        )

    @classmethod
    def concat(cls, sets: List["SampleSet"]) -> "SampleSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls.empty()
        return cls(
            joints=np.concatenate([s.joints for s in sets]),
            cable_mm=np.concatenate([s.cable_mm for s in sets]),
            dial_mm=np.concatenate([s.dial_mm for s in sets]),
            plane_id=np.concatenate([s.plane_id for s in sets]),
        )

    def __len__(self) -> int:
        return int(self.cable_mm.shape[0])

    def rows(self) -> List[MeasurementSample]:
        return [
            MeasurementSample(joints=self.joints[i], cable_mm=self.cable_mm[i],
                              dial_mm=self.dial_mm[i], plane_id=int(self.plane_id[i]))
            for i in range(len(self))
        ]

    def take(self, indices) -> "SampleSet":
        idx = np.asarray(indices, dtype=int)
        return SampleSet(joints=self.joints[idx], cable_mm=self.cable_mm[idx],
                         dial_mm=self.dial_mm[idx], plane_id=self.plane_id[idx])

    @property
    def plane_ids(self) -> List[int]:
        return sorted(int(p) for p in np.unique(self.plane_id))

    def group_by_plane(self) -> Dict[int, "SampleSet"]:
        return {p: self.take(np.flatnonzero(self.plane_id == p)) for p in self.plane_ids}

    def sorted_by_plane(self) -> "SampleSet":
        return self.take(np.argsort(self.plane_id, kind="stable"))

    def select_planes(self, plane_ids: List[int]) -> "SampleSet":
        return self.take(np.flatnonzero(np.isin(self.plane_id, plane_ids)))


# ───────────────────────── Planes / simulation ────────────────────────────

def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("normal vector must be non-zero")
    out = np.asarray(v, dtype=float) / n
    out.setflags(write=False)
    return out


class PlaneEstimate(_Frozen):
    W: Vector3  # point on the plane, mm
    gamma: Vector3  # unit normal

    @field_validator("gamma")
    @classmethod
    def _normalize(cls, v: np.ndarray) -> np.ndarray:
        return _unit(v)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.W) @ self.gamma


class PlaneSpec(_Frozen):
    name: str
    W: Vector3
    gamma: Vector3

    @field_validator("gamma")
    @classmethod
    def _normalize(cls, v: np.ndarray) -> np.ndarray:
        return _unit(v)

    def as_estimate(self) -> PlaneEstimate:
        return PlaneEstimate(W=self.W, gamma=self.gamma)


class NoiseSpec(_Frozen):
    cable_sigma: float = Field(0.05, ge=0.0)  # mm
    dial_sigma: float = Field(0.01, ge=0.0)  # mm
    joint_sigma: float = Field(0.0, ge=0.0)  # rad
    seed: int = 0


class PerturbationCaps(_Frozen):
    alpha_deg: float = Field(1.0, ge=0.0)
    a_mm: float = Field(2.0, ge=0.0)
    d_mm: float = Field(2.0, ge=0.0)
    theta_deg: float = Field(1.0, ge=0.0)

    def as_vector(self) -> np.ndarray:
        """Per-parameter caps in internal units (rad, mm)."""
        return np.concatenate([
            np.full(N_JOINTS, np.deg2rad(self.alpha_deg)),
            np.full(N_JOINTS, self.a_mm),
            np.full(N_JOINTS, self.d_mm),
            np.full(N_JOINTS, np.deg2rad(self.theta_deg)),
        ])


class GroundTruth(_Frozen):
    perturbation: ParameterVector
    anchor: Vector3
    planes: List[PlaneSpec]
    nominal: RobotModel = Field(default_factory=RobotModel.nominal)

    def model(self) -> RobotModel:
        return self.nominal.apply(self.perturbation)


# ───────────────────────── Calibration ────────────────────────────────────

def _broadcast(value, n: int, name: str) -> List[float]:
    values = [float(value)] * n if np.isscalar(value) else [float(v) for v in value]
    if len(values) == 1 and n > 1:
        values = values * n
    if len(values) != n:
        raise ValueError(f"{name} needs one value per plane ({n}), got {len(values)}")
    return values


class AmpcConfig(_Frozen):
    n_planes: int = Field(3, ge=1)
    rho: List[float] | float = 1.0
    lam: List[float] | float = 1e-4
    eta: List[float] | float = 1.0
    max_outer_iterations: int = Field(50, ge=1)
    convergence_tol: float = Field(1e-8, gt=0.0)
    dial_mode: Literal["correction", "ignore"] = "correction"

    @model_validator(mode="after")
    def _per_plane(self) -> "AmpcConfig":
        rho = _broadcast(self.rho, self.n_planes, "rho")
        lam = _broadcast(self.lam, self.n_planes, "lam")
        eta = _broadcast(self.eta, self.n_planes, "eta")
        if any(r <= 0 for r in rho):
            raise ValueError("rho must be > 0")
        if any(l < 0 for l in lam):
            raise ValueError("lam must be >= 0")
        if any(e <= 0 for e in eta):
            raise ValueError("eta must be > 0")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "eta", eta)
        return self

    def for_planes(self, n_planes: int) -> "AmpcConfig":
        """Same settings re-broadcast to a different plane count."""
        def pick(values):
            return values[0] if len(set(values)) == 1 else values
        return AmpcConfig(**{**self.model_dump(), "n_planes": n_planes,
                             "rho": pick(self.rho), "lam": pick(self.lam), "eta": pick(self.eta)})


class LmConfig(_Frozen):
    mu0: float = Field(1e-3, gt=0.0)
    mu_factor: float = Field(10.0, gt=1.0)
    max_iterations: int = Field(50, ge=1)
    rel_tol: float = Field(1e-10, gt=0.0)
    rho: float = Field(1.0, ge=0.0)
    dial_mode: Literal["correction", "ignore"] = "correction"
    max_mu: float = 1e12


class LsConfig(_Frozen):
    ridge: float = Field(1e-10, ge=0.0)
    max_iterations: int = Field(50, ge=1)
    rel_tol: float = Field(1e-10, gt=0.0)
    rho: float = Field(1.0, ge=0.0)
    dial_mode: Literal["correction", "ignore"] = "correction"
    divergence_window: int = Field(3, ge=1)


class CalibrationState(_Frozen):
    nominal: RobotModel
    u: ParameterVector
    anchor: Vector3
    planes: List[PlaneEstimate]
    multipliers: FloatArray
    plane_ids: List[int]
    iteration: int = 0

    @model_validator(mode="after")
    def _counts(self) -> "CalibrationState":
        if not (len(self.planes) == len(self.multipliers) == len(self.plane_ids)):
            raise ValueError("planes, multipliers and plane_ids must have equal length")
        return self

    def model(self) -> RobotModel:
        return self.nominal.apply(self.u)


class CalibrationResult(_Frozen):
    method: str
    state: CalibrationState
    objective: List[float] = Field(default_factory=list)
    step_norms: List[float] = Field(default_factory=list)
    converged: bool = False
    iterations_used: int = 0
    wall_time: float = 0.0

    def model(self) -> RobotModel:
        return self.state.model()

    @property
    def anchor(self) -> np.ndarray:
        return self.state.anchor

    def trace_frame(self) -> pd.DataFrame:
        n = max(len(self.objective), len(self.step_norms))
        pad = lambda xs: list(xs) + [np.nan] * (n - len(xs))
        return pd.DataFrame({
            "iteration": np.arange(1, n + 1),
            "objective": pad(self.objective),
            "step_norm": pad(self.step_norms),
        })


# ───────────────────────── Evaluation ─────────────────────────────────────

class MetricSet(_Frozen):
    rmse: float
    mean_abs: float
    max_abs: float
    sample_std: float
    n: int


class MethodRun(BaseModel):
    repetition: int
    method: str
    plane_count: int
    train: Optional[MetricSet] = None
    test: Optional[MetricSet] = None
    cartesian_test_rmse: Optional[float] = None
    anchor_error: Optional[float] = None
    iterations: Optional[int] = None
    wall_time: Optional[float] = None
    converged: Optional[bool] = None
    error: Optional[str] = None
    # fitted (u, P0), kept for the per-sample error table
    parameters: Optional[List[float]] = None
    anchor: Optional[List[float]] = None

    @property
    def status(self) -> str:
        if self.error:
            return "failed"
        if self.converged is False:
            return "unconverged"
        return "ok"


class ExperimentReport(BaseModel):
    runs: List[MethodRun]
    repeats: int
    config: Dict = Field(default_factory=dict)
    partial: bool = False
