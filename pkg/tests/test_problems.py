import numpy as np
import pytest

from adaptive_rb.estimator import space_riesz_constants
from adaptive_rb.operator import Discretization, OperatorComponent, SeparableTerm
from adaptive_rb.problems import (
    CDR_BETA0,
    DT,
    MASS,
    PRESETS,
    ProblemSpec,
    calibrate_beta0,
    cdr_spacetime,
    discrete_infsup_dense,
    load_problem,
    source_box,
    thermal_block,
)


@pytest.mark.parametrize(
    "factory,preset,count", [(thermal_block, "train", 180), (thermal_block, "test", 450), (cdr_spacetime, "train", 400), (cdr_spacetime, "test", 2500)]
)
def test_grid_preset_sizes(factory, preset, count):
    grid = factory((2, 2)).grid(preset)
    assert len(grid) == count == len(set(grid))
    assert grid == sorted(grid)


def test_thermal_grids_match_experiment_ranges():
    problem = thermal_block((2, 2))
    train = problem.grid("train")
    assert min(mu[0] for mu in train) == pytest.approx(0.01) and max(mu[0] for mu in train) == pytest.approx(10.0)
    assert max(mu[0] for mu in problem.grid("test")) == pytest.approx(20.0)
    assert problem.box.contains((100.0, 9)) and not problem.box.contains((0.5, 2.5))


def test_thermal_thetas():
    problem = thermal_block((2, 2))
    np.testing.assert_array_equal(problem.parametric_operator.thetas((0.5, 3)), [1.0, 0.5])
    np.testing.assert_array_equal(problem.parametric_rhs.thetas((0.5, 3)), np.eye(9)[2])
    assert len(problem.operator.components) == 2 and len(problem.functional.components) == 9


def test_thermal_unit_parameter_is_the_laplacian():
    problem = thermal_block((2, 2))
    for k in (1, 6):
        np.testing.assert_allclose(problem.parametric_operator.at((1.0, k)).to_dense(), problem.trial_gramian().to_dense(), atol=1e-13)


def test_source_numbering_runs_up_then_across():
    assert source_box(1) == ((0.0, 1 / 3), (0.0, 0.4))
    assert source_box(3) == ((0.0, 1 / 3), (0.8, 1.0))
    assert source_box(8) == ((2 / 3, 1.0), (0.4, 0.8))


def test_cdr_thetas_and_spaces():
    problem = cdr_spacetime((2, 2))
    np.testing.assert_array_equal(problem.parametric_operator.thetas((0.0, -9.0)), [1.0, 0.0, -9.0])
    np.testing.assert_array_equal(problem.parametric_rhs.thetas((3.0, 1.0)), [1.0])
    assert problem.test_levels == (3, 2) and not problem.same_spaces
    disc = problem.discretization
    assert disc.test.shape[0] > disc.trial.shape[0] and disc.test.shape[1] == disc.trial.shape[1]
    assert thermal_block((2, 2)).same_spaces


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_problem_json_round_trip(name, tmp_path):
    problem = PRESETS[name]()
    again = ProblemSpec.from_json(problem.to_json())
    assert again == problem
    assert again.to_dict() == problem.to_dict()
    assert again.presets.keys() == problem.presets.keys()
    path = tmp_path / "problem.json"
    path.write_text(problem.to_json())
    assert load_problem(str(path)) == problem


def test_stability_bounds_positive_on_grids():
    for factory in (thermal_block, cdr_spacetime):
        problem = factory((2, 2))
        for preset in ("train", "test"):
            for mu in problem.grid(preset):
                assert problem.bounds.beta(mu) > 0
                assert problem.bounds.gamma(mu) >= problem.bounds.beta(mu)


def test_thermal_coercivity_rayleigh_quotients():
    problem = thermal_block((3, 3))
    riesz = space_riesz_constants(problem.discretization.trial)
    rng = np.random.default_rng(5)
    for _ in range(10):
        mu = (float(10 ** rng.uniform(-2, 2)), int(rng.integers(1, 10)))
        op = problem.parametric_operator.at(mu)
        for _ in range(5):
            v = rng.standard_normal(op.trial_shape)
            quotient = np.sum(v * op.apply(v)) / np.sum(v * v)
            assert quotient >= problem.bounds.alpha(mu) * riesz.lower**2 * (1 - 1e-12)


def test_time_derivative_is_skew_on_periodic_square_space():
    problem = cdr_spacetime((3, 3))
    trial = problem.discretization.trial
    square = Discretization(trial, trial)
    dt = square.component(OperatorComponent((SeparableTerm((DT, MASS)),))).to_dense()
    rng = np.random.default_rng(2)
    for _ in range(5):
        v = rng.standard_normal(len(dt))
        assert abs(v @ (dt + dt.T) @ v) <= 1e-10 * np.abs(dt).max() * (v @ v)


def test_heat_part_is_symmetric_in_space_at_zero_parameter():
    problem = cdr_spacetime((2, 2))
    trial = problem.discretization.trial
    square = Discretization(trial, trial)
    heat = square.component(problem.operator.components[0]).to_dense()
    dt = square.component(OperatorComponent((SeparableTerm((DT, MASS)),))).to_dense()
    spatial = heat - dt
    np.testing.assert_allclose(spatial, spatial.T, atol=1e-12)


def test_beta_proxy_is_a_lower_bound_at_small_levels():
    samples = [(0.0, 0.0), (0.0, -9.0), (30.0, 15.0), (10.0, -9.0)]
    ratio = calibrate_beta0((2, 2), samples)
    assert ratio >= CDR_BETA0
    problem = cdr_spacetime((2, 2))
    for mu in samples:
        assert discrete_infsup_dense(problem, mu) >= problem.bounds.beta(mu)


def test_level_override_keeps_offset():
    problem = cdr_spacetime().with_levels((3, 2))
    assert problem.max_levels == (3, 2) and problem.test_levels == (4, 2)
