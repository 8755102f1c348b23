import numpy as np
import pytest
from pydantic import ValidationError

from planecal.ampc import (
    augmented_lagrangian,
    calibrate_ampc,
    plane_residual,
    predicted_length,
    update_multipliers,
    update_parameters,
    update_plane_normal,
    update_plane_point,
)
from planecal.baselines import gauss_newton_step, initialize_state
from planecal.evaluation import align_base_gauge, apply_base_gauge, position_error_per_sample, split_dataset
from planecal.exceptions import DegenerateGeometryError, InvalidArgumentError, NumericalFailureError
from planecal.kinematics import end_effector_positions
from planecal.models import N_PARAMS, AmpcConfig, CalibrationState, LsConfig, ParameterVector, PlaneEstimate, SampleSet
from planecal.residuals import build_residual_system, free_columns, least_squares_cost, solve_step

Q = np.array([0.3, -0.5, 0.4, 0.2, -0.6, 0.1])


def _single_plane_state(nominal, plane: PlaneEstimate, anchor=(0.0, 0.0, 3000.0)) -> CalibrationState:
    return CalibrationState(nominal=nominal, u=ParameterVector.zeros(), anchor=anchor,
                            planes=[plane], multipliers=np.zeros(1), plane_ids=[0])


def _one_sample(q, dial=0.0) -> SampleSet:
    return SampleSet(joints=np.atleast_2d(q), cable_mm=[1000.0], dial_mm=[dial], plane_id=[0])


def test_predicted_length_three_four_five(nominal):
    p = end_effector_positions(nominal, Q)[0]
    assert predicted_length(nominal, p + [3.0, 4.0, 0.0], Q) == pytest.approx(5.0, abs=1e-9)
    assert predicted_length(nominal, p + [250.0, 0.0, 0.0], Q) == pytest.approx(250.0, abs=1e-9)


def test_predicted_length_coincident_anchor_raises(nominal):
    with pytest.raises(DegenerateGeometryError):
        predicted_length(nominal, end_effector_positions(nominal, Q)[0], Q)


def test_plane_residual_is_signed_distance(nominal):
    p = end_effector_positions(nominal, Q)[0]
    plane = PlaneEstimate(W=[0.0, 0.0, p[2] - 0.3], gamma=[0.0, 0.0, 1.0])
    assert plane_residual(nominal, plane, Q) == pytest.approx(0.3, abs=1e-9)
    assert plane_residual(nominal, plane, Q, dial_reading=0.3) == pytest.approx(0.0, abs=1e-9)


def test_noiseless_samples_fit_the_truth(ground_truth, noiseless_samples):
    model = ground_truth.model()
    for row in noiseless_samples.rows()[::37]:
        assert predicted_length(model, ground_truth.anchor, row.joints) == pytest.approx(row.cable_mm, abs=1e-9)
        plane = ground_truth.planes[row.plane_id].as_estimate()
        assert abs(plane_residual(model, plane, row.joints, row.dial_mm)) < 1e-9


def test_lagrangian_vanishes_at_truth(true_state, noiseless_samples):
    assert augmented_lagrangian(true_state, noiseless_samples, AmpcConfig()) < 1e-12


def test_lagrangian_without_multipliers_is_penalized_cost(true_state, noiseless_samples):
    state = true_state.model_copy(update={"u": ParameterVector.zeros()})
    f = augmented_lagrangian(state, noiseless_samples, AmpcConfig(rho=2.0))
    system = build_residual_system(state, noiseless_samples)
    r = position_error_per_sample(state.model(), state.anchor, noiseless_samples)
    phi = system.plane_residuals
    assert f == pytest.approx(least_squares_cost(system, 2.0), rel=1e-12)
    assert f == pytest.approx(0.5 * np.mean(r ** 2) + np.mean(phi ** 2), rel=1e-12)


def test_lagrangian_needs_every_plane(true_state, noiseless_samples):
    with pytest.raises(InvalidArgumentError):
        augmented_lagrangian(true_state, noiseless_samples.select_planes([0, 1]), AmpcConfig())


def test_plane_point_stationary_at_truth(true_state, noiseless_samples):
    group = noiseless_samples.group_by_plane()[1]
    W = update_plane_point(true_state, group, AmpcConfig(), 1)
    np.testing.assert_allclose(W, true_state.planes[1].W, atol=1e-6)


def test_plane_point_restores_contact_for_one_sample(nominal):
    p = end_effector_positions(nominal, Q)[0]
    eps = 0.25
    plane = PlaneEstimate(W=p - [0.0, 0.0, eps], gamma=[0.0, 0.0, 1.0])
    state = _single_plane_state(nominal, plane)
    W = update_plane_point(state, _one_sample(Q), AmpcConfig(n_planes=1, lam=1e-9), 0)
    np.testing.assert_allclose(W - plane.W, [0.0, 0.0, eps], atol=1e-6)


def test_large_proximal_term_freezes_plane_point(nominal):
    p = end_effector_positions(nominal, Q)[0]
    plane = PlaneEstimate(W=p - [0.0, 0.0, 0.25], gamma=[0.0, 0.0, 1.0])
    state = _single_plane_state(nominal, plane)
    W = update_plane_point(state, _one_sample(Q), AmpcConfig(n_planes=1, lam=1e9), 0)
    assert np.linalg.norm(W - plane.W) < 1e-9


def test_plane_normal_unchanged_at_truth(true_state, noiseless_samples):
    group = noiseless_samples.group_by_plane()[0]
    gamma = update_plane_normal(true_state, group, AmpcConfig(lam=1e-6), 0)
    np.testing.assert_allclose(gamma, true_state.planes[0].gamma, atol=1e-9)
    assert np.linalg.norm(gamma) == pytest.approx(1.0, abs=1e-12)


def test_plane_normal_step_reduces_violation(true_state, noiseless_samples):
    """Horizontal plane with its normal tilted by 1 mrad."""
    group = noiseless_samples.group_by_plane()[0]
    tilt = 1e-3
    tilted = PlaneEstimate(W=true_state.planes[0].W, gamma=[np.sin(tilt), 0.0, np.cos(tilt)])
    state = true_state.model_copy(update={"planes": [tilted, *true_state.planes[1:]]})
    positions = end_effector_positions(state.model(), group.joints)

    def violation(plane):
        return np.sum((plane.signed_distance(positions) - group.dial_mm) ** 2)

    gamma = update_plane_normal(state, group, AmpcConfig(lam=1e-6), 0)
    assert violation(PlaneEstimate(W=tilted.W, gamma=gamma)) < violation(tilted)


def test_multiplier_ascent(true_state, noiseless_samples):
    shifted = PlaneEstimate(W=true_state.planes[0].W - [0.0, 0.0, 0.5], gamma=true_state.planes[0].gamma)
    state = true_state.model_copy(update={"planes": [shifted, *true_state.planes[1:]]})
    cfg = AmpcConfig(rho=2.0, eta=0.5)
    multipliers = update_multipliers(state, noiseless_samples, cfg)
    assert multipliers[0] == pytest.approx(0.5 * 2.0 * 0.5, abs=1e-6)
    np.testing.assert_allclose(multipliers[1:], 0.0, atol=1e-9)


def test_parameter_step_needs_enough_samples(true_state, noiseless_samples):
    few = noiseless_samples.take(np.arange(0, 300, 12))
    with pytest.raises(InvalidArgumentError):
        update_parameters(true_state, few, AmpcConfig())


def test_parameter_step_is_zero_at_truth(true_state, noiseless_samples):
    u, anchor = update_parameters(true_state, noiseless_samples, AmpcConfig())
    assert np.linalg.norm(u.values - true_state.u.values) < 1e-5
    assert np.linalg.norm(anchor - true_state.anchor) < 1e-5


def test_singular_plane_system_reports_context():
    with pytest.raises(NumericalFailureError) as info:
        solve_step(np.zeros((3, 3)), np.ones(3), iteration=4, block="W", assume_a="gen", max_condition=1e14)
    assert info.value.iteration == 4
    assert info.value.block == "W"


def test_config_validation():
    with pytest.raises(ValidationError):
        AmpcConfig(eta=0.0)
    with pytest.raises(ValidationError):
        AmpcConfig(lam=-1.0)
    with pytest.raises(ValidationError):
        AmpcConfig(n_planes=3, rho=[1.0, 2.0])
    assert AmpcConfig(n_planes=2, rho=[1.0, 2.0]).for_planes(2).rho == [1.0, 2.0]
    assert AmpcConfig(rho=3.0).rho == [3.0, 3.0, 3.0]


@pytest.mark.parametrize("rho", [0.0, -1.0, [1.0, 0.0, 1.0]])
def test_config_rejects_non_positive_rho(rho):
    with pytest.raises(ValidationError):
        AmpcConfig(rho=rho)


def test_config_defaults():
    cfg = AmpcConfig()
    assert cfg.rho == [1.0] * 3
    assert cfg.lam == [1e-4] * 3
    assert cfg.eta == [1.0] * 3
    assert cfg.convergence_tol == 1e-8
    assert cfg.max_outer_iterations == 50


def test_free_columns_drop_null_and_gauge_directions(nominal, noiseless_samples):
    system = build_residual_system(initialize_state(noiseless_samples, nominal), noiseless_samples)
    columns = set(free_columns(system).tolist())
    # alpha6, theta6 have no effect; theta1, d1 move robot and anchor together
    for block, joint in (("alpha", 6), ("theta", 6), ("theta", 1), ("d", 1)):
        assert ParameterVector.index(block, joint) not in columns
    # parallel axes 2 and 3: only one d offset survives
    assert len({ParameterVector.index("d", 2), ParameterVector.index("d", 3)} & columns) == 1
    assert ParameterVector.index("a", 2) in columns
    assert {N_PARAMS, N_PARAMS + 1, N_PARAMS + 2} <= columns


def test_ls_step_equals_parameter_step_without_multipliers(nominal, noiseless_samples):
    samples = noiseless_samples.select_planes([0])
    state = initialize_state(samples, nominal)
    u, anchor = update_parameters(state, samples, AmpcConfig(n_planes=1, rho=1.0, lam=1e-10))
    step = gauss_newton_step(state, samples, LsConfig(rho=1.0, ridge=1e-10))
    np.testing.assert_allclose(u.values - state.u.values, step[:N_PARAMS], rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(anchor - state.anchor, step[N_PARAMS:], rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_residual_rows_match_finite_differences(seed, ground_truth, nominal, noiseless_samples):
    rng = np.random.default_rng(seed)
    u = ParameterVector(values=ground_truth.perturbation.values + rng.normal(scale=1e-3, size=N_PARAMS))
    anchor = ground_truth.anchor + rng.normal(scale=5.0, size=3)
    planes = [p.as_estimate() for p in ground_truth.planes]
    state = CalibrationState(nominal=nominal, u=u, anchor=anchor, planes=planes,
                             multipliers=np.zeros(3), plane_ids=[0, 1, 2])
    rows = rng.choice(len(noiseless_samples), size=3, replace=False)
    samples = noiseless_samples.take(np.sort(rows))
    system = build_residual_system(state, samples)

    h = 1e-5
    for i in range(len(samples)):
        joints, plane = samples.joints[i], planes[int(samples.plane_id[i])]
        d_length, d_plane = np.zeros(N_PARAMS + 3), np.zeros(N_PARAMS + 3)
        for k in range(N_PARAMS + 3):
            e = np.zeros(N_PARAMS + 3)
            e[k] = h
            hi = state.model_copy(update={"u": ParameterVector(values=u.values + e[:N_PARAMS])})
            lo = state.model_copy(update={"u": ParameterVector(values=u.values - e[:N_PARAMS])})
            d_length[k] = (predicted_length(hi.model(), anchor + e[N_PARAMS:], joints)
                           - predicted_length(lo.model(), anchor - e[N_PARAMS:], joints)) / (2 * h)
            d_plane[k] = (plane_residual(hi.model(), plane, joints) - plane_residual(lo.model(), plane, joints)) / (2 * h)
        for analytic, numeric in ((system.length_jacobian[i], d_length), (system.plane_jacobian[i], d_plane)):
            np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-5 * np.max(np.abs(numeric)))


def test_noiseless_recovery(ground_truth, nominal, noiseless_samples):
    train, test = split_dataset(noiseless_samples, train_fraction=0.5, seed=0)
    result = calibrate_ampc(train, nominal)
    if result.converged:
        assert result.step_norms[-1] <= AmpcConfig().convergence_tol
    errors = position_error_per_sample(result.model(), result.anchor, test)
    assert np.sqrt(np.mean(errors ** 2)) < 1e-3

    estimated = end_effector_positions(result.model(), test.joints)
    angle, shift = align_base_gauge(estimated, end_effector_positions(ground_truth.model(), test.joints))
    anchor = apply_base_gauge(result.anchor, angle, shift)[0]
    assert np.linalg.norm(anchor - ground_truth.anchor) < 1e-2


def test_one_sweep_decreases_lagrangian(nominal, noiseless_samples):
    start = initialize_state(noiseless_samples, nominal)
    f0 = augmented_lagrangian(start, noiseless_samples, AmpcConfig())
    result = calibrate_ampc(noiseless_samples, nominal, AmpcConfig(max_outer_iterations=1))
    assert result.objective[0] < f0
    assert result.iterations_used == len(result.objective) == 1


def test_single_plane_configuration_is_rebroadcast(nominal, noiseless_samples):
    result = calibrate_ampc(noiseless_samples.select_planes([2]), nominal, AmpcConfig(max_outer_iterations=2))
    assert len(result.state.planes) == 1
    assert result.state.plane_ids == [2]


def test_objective_trace_never_increases(nominal, noisy_samples):
    start = initialize_state(noisy_samples, nominal)
    f0 = augmented_lagrangian(start, noisy_samples, AmpcConfig())
    result = calibrate_ampc(noisy_samples, nominal)
    objective = np.asarray(result.objective)
    assert objective[0] <= f0
    assert np.all(np.diff(objective) <= 0.0)
    assert len(result.step_norms) == len(objective) == result.iterations_used
