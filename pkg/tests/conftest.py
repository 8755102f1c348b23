import numpy as np
import pytest

from planecal.models import CalibrationState, NoiseSpec, RobotModel
from planecal.simulator import generate_dataset, make_ground_truth

NOISELESS = NoiseSpec(cable_sigma=0.0, dial_sigma=0.0, seed=11)


@pytest.fixture(scope="session")
def nominal():
    return RobotModel.nominal()


@pytest.fixture(scope="session")
def ground_truth():
    return make_ground_truth(seed=7)


@pytest.fixture(scope="session")
def noiseless_samples(ground_truth):
    """Three planes, 100 exact samples each."""
    return generate_dataset(ground_truth, samples_per_plane=100, noise=NOISELESS)


@pytest.fixture(scope="session")
def noisy_samples(ground_truth):
    return generate_dataset(ground_truth, samples_per_plane=100, noise=NoiseSpec(seed=12))


@pytest.fixture
def true_state(ground_truth, nominal):
    """Calibration state sitting exactly on the ground truth."""
    return CalibrationState(
        nominal=nominal,
        u=ground_truth.perturbation,
        anchor=ground_truth.anchor,
        planes=[p.as_estimate() for p in ground_truth.planes],
        multipliers=np.zeros(len(ground_truth.planes)),
        plane_ids=list(range(len(ground_truth.planes))),
    )
