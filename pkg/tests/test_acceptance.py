"""Acceptance suite; a summary line per criterion is printed at the end of the run."""
import time
from types import SimpleNamespace

import numpy as np
import pytest
import scipy.linalg as sla

from adaptive_rb import selftest
from adaptive_rb.awgm import ErrorMeasure, galerkin_solve_on_set, recheck, solve
from adaptive_rb.estimator import space_riesz_constants, surrogate_dual_norm
from adaptive_rb.greedy import GreedyConfig, evaluate_testset, train
from adaptive_rb.index import approx_rate_estimate
from adaptive_rb.problems import cdr_spacetime, convection_1d, poisson_1d, thermal_block
from adaptive_rb.rb import (
    ReducedSpace,
    Solver,
    discrete_infsup,
    online_evaluate,
    reduced_solve,
    snapshot_reproduction_error,
    theta_pair,
)

TOL = 1e-4


def _dense_truth(problem, mu):
    mat = problem.parametric_operator.at(mu).to_dense()
    return np.linalg.solve(mat, problem.parametric_rhs.at(mu).ravel())


# ---------------------------------------------------------------------------
# 1: normal-equation Galerkin, least squares and Petrov-Galerkin coincide


def _unit_space(problem, indices):
    space = ReducedSpace(problem, solver=Solver.NORMAL_EQ, trunc_tol=0.0)
    shape = problem.discretization.trial.shape
    for k in indices:
        e = np.zeros(int(np.prod(shape)))
        e[k] = 1.0
        space.add_snapshot(SimpleNamespace(array=e.reshape(shape), mu=(0.0,)))
    return space


@pytest.mark.criterion(1, "least-squares and Petrov-Galerkin equalities on a 1D toy")
def test_normal_equation_galerkin_matches_least_squares_and_petrov_galerkin(record_property):
    start = time.perf_counter()
    problem = convection_1d(5)
    size = int(np.prod(problem.discretization.trial.shape))
    assert size <= 200
    adaptive = np.flatnonzero(solve(problem.system((25.0,)), 1e-2).mask.ravel())
    rng = np.random.default_rng(4)
    spans = {"adaptive set": adaptive, "random set": np.sort(rng.choice(size, 40, replace=False))}
    worst_res, worst_pg = 0.0, 0.0
    for indices in spans.values():
        assert 0 < len(indices) < size
        space = _unit_space(problem, indices)
        model = space.model()
        z = np.column_stack([b.ravel() for b in space.basis])
        for mu in [(0.0,), (17.0,), (50.0,)]:
            op = problem.parametric_operator.at(mu)
            f = problem.parametric_rhs.at(mu).ravel()
            u_bar = reduced_solve(model, mu, Solver.NORMAL_EQ).u_n
            residual = np.linalg.norm(f - op.apply((z @ u_bar).reshape(op.trial_shape)).ravel())
            dense = op.to_dense()
            _, lsq_res, *_ = np.linalg.lstsq(dense[:, indices], f, rcond=None)
            minimum = float(np.sqrt(lsq_res[0]))
            worst_res = max(worst_res, abs(residual - minimum) / minimum)
            # l2 Riesz map is the identity, so the test span is B applied to the trial span
            test = np.column_stack([op.apply(col.reshape(op.trial_shape)).ravel() for col in z.T])
            u_pg = np.linalg.solve(test.T @ dense @ z, test.T @ f)
            worst_pg = max(worst_pg, np.abs(u_pg - u_bar).max() / np.abs(u_pg).max())
    seconds = time.perf_counter() - start
    record_property("detail", f"residual rel {worst_res:.1e}, Petrov-Galerkin rel {worst_pg:.1e}, {seconds:.1f} s")
    assert worst_res <= 1e-10
    assert worst_pg <= 1e-10
    assert seconds < 5


# ---------------------------------------------------------------------------
# 2: surrogate dual norm against the dense Riesz representer


@pytest.mark.criterion(2, "dual-norm surrogate sandwich")
def test_surrogate_dual_norm_sandwich(record_property):
    start = time.perf_counter()
    problem = thermal_block((3, 3))
    riesz = space_riesz_constants(problem.discretization.test)
    space = ReducedSpace(problem, riesz=riesz)
    for mu in [(0.01, 2), (0.3, 5), (4.0, 9), (20.0, 1)]:
        space.add_snapshot(SimpleNamespace(array=_dense_truth(problem, mu).reshape(problem.discretization.trial.shape), mu=mu))
    model = space.model()
    z = np.column_stack([b.ravel() for b in space.basis])
    gram = sla.cho_factor(problem.test_gramian().to_dense())
    rng = np.random.default_rng(20)
    ratios = []
    for _ in range(20):
        mu = (float(10 ** rng.uniform(-2, 2)), int(rng.integers(1, 10)))
        u_n = reduced_solve(model, mu).u_n + rng.normal(scale=0.1, size=model.n) * rng.uniform(0, 1)
        theta_f, theta_b = theta_pair(problem, mu, "raise")
        surrogate = surrogate_dual_norm(theta_f, theta_b, u_n, model.gramians, riesz)
        g = problem.parametric_rhs.at(mu).ravel() - problem.parametric_operator.at(mu).to_dense() @ (z @ u_n)
        ratios.append(surrogate / np.sqrt(g @ sla.cho_solve(gram, g)))
    seconds = time.perf_counter() - start
    record_property("detail", f"ratios in [{min(ratios):.4f}, {max(ratios):.4f}], c/C = {riesz.ratio:.4f}, {seconds:.1f} s")
    assert min(ratios) >= riesz.ratio
    assert max(ratios) <= 1.01
    assert seconds < 120


# ---------------------------------------------------------------------------
# 3: online cost does not depend on snapshot accuracy


def _online_seconds(models, grid, riesz, repeats=5):
    best = [np.inf] * len(models)
    for _ in range(repeats):
        for k, model in enumerate(models):
            start = time.perf_counter()
            for mu in grid:
                online_evaluate(model, mu, riesz)
            best[k] = min(best[k], (time.perf_counter() - start) / len(grid))
    return best


@pytest.mark.criterion(3, "online independence of snapshot tolerances")
def test_online_cost_independent_of_snapshot_tolerance(record_property):
    problem = thermal_block((3, 3))
    riesz = space_riesz_constants(problem.discretization.test)
    runs = []
    for eps in (1e-4, 1e-5):
        config = GreedyConfig.for_problem(problem, 1e-12, n_max=8, constant_eps=eps)
        space, trace = train(problem, config, riesz)
        assert trace.status == "unconverged" and space.n == 8
        runs.append((space.model(), trace))
    (coarse, coarse_trace), (fine, fine_trace) = runs
    for model in (coarse, fine):
        assert model.gramians.cbb.shape == (8 * model.blocks.q_b,) * 2
        assert model.gramians.cff.shape == (model.blocks.q_f,) * 2
    support = [sum(s.support_size for s in t.steps) for t in (coarse_trace, fine_trace)]
    assert support[1] > support[0]
    t_coarse, t_fine = _online_seconds([coarse, fine], problem.grid("test"), riesz)
    change = abs(t_fine / t_coarse - 1)
    record_property("detail", f"{1e6 * t_coarse:.0f} vs {1e6 * t_fine:.0f} us per parameter ({100 * change:.1f}%), "
                              f"snapshot support {support[0]} vs {support[1]}")
    assert change < 0.2


# ---------------------------------------------------------------------------
# 4 and 7: thermal block reproduction


@pytest.fixture(scope="module")
def thermal_run():
    problem = thermal_block()
    start = time.perf_counter()
    space, trace = train(problem, GreedyConfig.for_problem(problem, TOL))
    model = space.model()
    report = evaluate_testset(model, problem.grid("test"), trace.riesz)
    return SimpleNamespace(problem=problem, model=model, trace=trace, report=report, seconds=time.perf_counter() - start)


@pytest.mark.slow
@pytest.mark.criterion(4, "thermal block greedy reproduction")
def test_thermal_first_selections_cover_all_sources(thermal_run, record_property):
    first = thermal_run.trace.selected[:9]
    record_property("detail", f"first nine {first}")
    assert all(mu[0] == pytest.approx(0.01) for mu in first)
    assert sorted(int(mu[1]) for mu in first) == list(range(1, 10))


@pytest.mark.slow
@pytest.mark.criterion(4, "thermal block greedy reproduction")
def test_thermal_basis_size(thermal_run, record_property):
    trace = thermal_run.trace
    record_property("detail", f"N = {trace.n}, status {trace.status}, {thermal_run.seconds / 60:.1f} min")
    assert trace.status == "converged"
    # levels (7, 7) are the reduced-resolution configuration with the wider band
    assert 15 <= trace.n <= 40


@pytest.mark.slow
@pytest.mark.criterion(4, "thermal block greedy reproduction")
def test_thermal_deterioration_ratios(thermal_run, record_property):
    ratios = [s.ratio for s in thermal_run.trace.steps]
    record_property("detail", f"ratios in [{min(ratios):.4f}, {max(ratios):.4f}]")
    assert all(0.95 <= r <= 1.7 for r in ratios)


@pytest.mark.slow
@pytest.mark.criterion(4, "thermal block greedy reproduction")
def test_thermal_test_set_maximum(thermal_run, record_property):
    report = thermal_run.report
    record_property("detail", f"test max {report.max_estimator:.3e} at {report.argmax}")
    assert report.max_estimator <= 2e-4


@pytest.mark.slow
@pytest.mark.criterion(7, "snapshot reproduction bound")
def test_snapshot_reproduction_bound(thermal_run, record_property):
    model, bounds = thermal_run.model, thermal_run.problem.bounds
    worst = 0.0
    for i, (mu, eps) in enumerate(zip(model.samples, model.epsilons)):
        err = snapshot_reproduction_error(model, i)
        bound = bounds.gamma(mu) / discrete_infsup(model, mu) * eps
        worst = max(worst, err / bound)
        assert err <= bound, f"snapshot {i + 1} at {mu}: {err:.3e} > {bound:.3e}"
    record_property("detail", f"largest error/bound {worst:.2e} over {model.n} snapshots")


# ---------------------------------------------------------------------------
# 5: space-time CDR reproduction


@pytest.fixture(scope="module")
def cdr_run():
    problem = cdr_spacetime()
    space, trace = train(problem, GreedyConfig.for_problem(problem, TOL))
    model = space.model()
    report = evaluate_testset(model, problem.grid("test"), trace.riesz)
    return SimpleNamespace(problem=problem, model=model, trace=trace, report=report)


@pytest.mark.slow
@pytest.mark.criterion(5, "space-time CDR greedy reproduction")
def test_cdr_reproduction(cdr_run, record_property):
    trace, report = cdr_run.trace, cdr_run.report
    ratios = [s.ratio for s in trace.steps]
    record_property("detail", f"N = {trace.n}, first {trace.selected[0]}, ratios in [{min(ratios):.4f}, {max(ratios):.4f}], "
                              f"test max {report.max_estimator:.3e}")
    assert trace.status == "converged"
    assert trace.selected[0] == pytest.approx((0.0, -9.0))
    assert trace.n <= 12
    assert all(0.95 <= r <= 1.1 for r in ratios)
    assert report.max_estimator <= 2e-4


@pytest.mark.slow
@pytest.mark.criterion(5, "space-time CDR greedy reproduction")
def test_cdr_online_speed(cdr_run, record_property):
    grid = cdr_run.problem.grid("test")
    assert len(grid) == 2500
    start = time.perf_counter()
    for mu in grid:
        online_evaluate(cdr_run.model, mu, cdr_run.trace.riesz)
    seconds = time.perf_counter() - start
    record_property("detail", f"2500 online evaluations in {seconds:.2f} s")
    assert seconds <= 10


# ---------------------------------------------------------------------------
# 6: termination at a repeated selection


@pytest.mark.criterion(6, "greedy termination at multiple selection")
def test_coarse_snapshots_terminate_at_multiple_selection(record_property):
    start = time.perf_counter()
    problem = thermal_block((3, 3))
    tol = 1e-3
    config = GreedyConfig.for_problem(problem, tol, constant_eps=1e-4, effectivity="riesz")
    space, trace = train(problem, config)
    assert trace.status == "multiple_selection"
    assert trace.argmax_history[-1] in space.samples
    limit = tol * trace.C_delta / trace.c_delta
    model = space.model()
    z = np.column_stack([b.ravel() for b in space.basis])
    worst = 0.0
    for mu in config.grid:
        u_n = reduced_solve(model, mu).u_n
        worst = max(worst, np.linalg.norm(_dense_truth(problem, mu) - z @ u_n))
    seconds = time.perf_counter() - start
    record_property("detail", f"N = {trace.n}, max error {worst:.3e} < {limit:.3e}, {seconds:.0f} s")
    assert worst < limit
    assert seconds < 300


# ---------------------------------------------------------------------------
# 8: adaptive solver rate and stopping contract


@pytest.mark.criterion(8, "adaptive solver convergence")
def test_adaptive_solver_rate_and_contract(record_property):
    start = time.perf_counter()
    problem = poisson_1d(12)
    riesz = space_riesz_constants(problem.discretization.trial)
    system = problem.system((0.0,))
    reference, _ = galerkin_solve_on_set(system, system.universe.full_mask(), rel_tol=1e-13)
    sizes, errors, rechecks = [], [], []
    for eps in np.geomspace(1e-2, 1e-5, 7):
        snap = solve(system, eps, ErrorMeasure.DUAL_RESIDUAL, riesz_lower=riesz.lower)
        sizes.append(snap.size)
        e = reference - snap.array
        errors.append(np.sqrt(np.sum(e * system.op.apply(e))))
        rechecks.append(recheck(system, snap, riesz_lower=riesz.lower, layers=3) / eps)
    slope = -np.polyfit(np.log(sizes), np.log(errors), 1)[0]
    coeffs = system.universe.coeff_vector(reference).values
    best = approx_rate_estimate(coeffs[np.abs(coeffs) > 1e-10 * np.abs(coeffs).max()])
    seconds = time.perf_counter() - start
    record_property("detail", f"slope {slope:.3f} vs best N-term {best.rate:.3f}, recheck/eps <= {max(rechecks):.3f}, {seconds:.1f} s")
    assert abs(slope - best.rate) <= 0.25 * best.rate
    assert max(rechecks) <= 1.2
    assert seconds < 60


# ---------------------------------------------------------------------------
# 9: invariant suites


@pytest.mark.criterion(9, "invariant suites")
def test_selftest_suites_pass(record_property):
    lines = []
    start = time.perf_counter()
    ok = selftest.run(lines.append)
    seconds = time.perf_counter() - start
    record_property("detail", f"{len(lines)} suites in {seconds:.0f} s")
    assert ok, "\n".join(lines)
    assert seconds < 600
