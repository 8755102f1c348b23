"""Run configuration: YAML file, environment (.env) and command-line overrides.

Precedence is flags > YAML > environment > defaults.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from planecal.exceptions import InvalidArgumentError
from planecal.models import (
    AmpcConfig,
    DeConfig,
    LmConfig,
    LsConfig,
    NoiseSpec,
    PerturbationCaps,
    PlaneSpec,
    Vector3,
)
from planecal.simulator import DEFAULT_ANCHOR, DEFAULT_REGION, default_planes

METHODS = ("ampc", "mcs+ampc", "lm", "ls")
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _env_int(name: str, default: int) -> int:
    try:
        return int(os.getenv(name, default))
    except ValueError:
        raise InvalidArgumentError(f"{name} must be an integer, got {os.getenv(name)!r}") from None


class RunConfig(BaseModel):
    """Everything a command needs; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", arbitrary_types_allowed=True)

    seed: int = Field(0, ge=0)
    out_dir: str = "results"
    workers: int = Field(default_factory=lambda: _env_int("PLANECAL_WORKERS", 1), ge=1)

    # dataset
    dataset: Literal["simulator", "files"] = "simulator"
    sample_paths: List[str] = Field(default_factory=list)
    ground_truth_path: Optional[str] = None
    samples_per_plane: int = Field(800, ge=3)
    subsample_per_plane: Optional[int] = Field(200, ge=3)
    train_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    planes: List[PlaneSpec] = Field(default_factory=default_planes)
    anchor: Vector3 = DEFAULT_ANCHOR
    region: Tuple[float, float] = DEFAULT_REGION
    caps: PerturbationCaps = Field(default_factory=PerturbationCaps)
    noise: NoiseSpec = Field(default_factory=NoiseSpec)

    # experiment
    methods: List[str] = Field(default_factory=lambda: list(METHODS))
    plane_counts: List[int] = Field(default_factory=lambda: [1, 2, 3])
    repeats: int = Field(10, ge=1)
    mcs_fraction: float = Field(0.5, gt=0.0, le=1.0)
    configurations_per_plane: Optional[int] = Field(None, ge=3)
    budget: Literal["matched", "full"] = "matched"  # samples fitted by the non-MCS methods
    k: Optional[int] = Field(None, ge=1)
    curve: List[int] = Field(default_factory=list)
    error_table_samples: int = Field(30, ge=1)

    # solvers
    ampc: AmpcConfig = Field(default_factory=AmpcConfig)
    lm: LmConfig = Field(default_factory=LmConfig)
    ls: LsConfig = Field(default_factory=LsConfig)
    de: DeConfig = Field(default_factory=DeConfig)

    @field_validator("methods")
    @classmethod
    def _known_methods(cls, v: List[str]) -> List[str]:
        unknown = [m for m in v if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown method(s) {unknown}; choose from {list(METHODS)}")
        if not v:
            raise ValueError("at least one method is required")
        return v

    @field_validator("curve", "plane_counts")
    @classmethod
    def _ascending(cls, v: List[int]) -> List[int]:
        if v != sorted(v) or any(x <= 0 for x in v):
            raise ValueError("must be positive and sorted ascending")
        return v

    @model_validator(mode="after")
    def _consistent(self) -> "RunConfig":
        if self.dataset == "files" and not self.sample_paths:
            raise ValueError("dataset 'files' needs sample_paths")
        if self.plane_counts and max(self.plane_counts) > len(self.planes) and self.dataset == "simulator":
            raise ValueError(f"plane_counts exceed the {len(self.planes)} configured planes")
        if self.subsample_per_plane is not None and self.dataset == "simulator" \
                and self.subsample_per_plane > self.samples_per_plane:
            raise ValueError("subsample_per_plane exceeds samples_per_plane")
        return self

    def snapshot(self) -> List[str]:
        """Comment lines recording this configuration in output files."""
        return [f"config: {json.dumps(self.model_dump(mode='json', exclude={'workers', 'out_dir'}), sort_keys=True)}"]


def _deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Validate a RunConfig from an optional YAML file plus overrides.

    Raises InvalidArgumentError for unreadable YAML or any invalid field.
    """
    load_dotenv(override=False)
    data: Dict[str, Any] = {}
    if path:
        config_path = Path(path)
        if not config_path.exists():
            raise FileNotFoundError(f"Config file not found: {config_path}")
        try:
            with open(config_path, encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise InvalidArgumentError(f"{config_path}: invalid YAML: {e}") from e
        if not isinstance(data, dict):
            raise InvalidArgumentError(f"{config_path}: top level must be a mapping")
    data = _deep_merge(data, overrides or {})
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise InvalidArgumentError(f"invalid configuration:\n{e}") from e


def configure_logging(level: Optional[str] = None) -> None:
    load_dotenv(override=False)
    level = (level or os.getenv("PLANECAL_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT)
