"""Invariant suites runnable without the test dependencies."""
from __future__ import annotations

import time
from types import SimpleNamespace

import numpy as np

from .awgm import AwgmConfig, ErrorMeasure, recheck, solve
from .estimator import space_riesz_constants, surrogate_dual_norm
from .index import TensorBasis, is_multitree, multitree_completion
from .problems import cdr_spacetime, poisson_1d, thermal_block
from .rb import ReducedSpace, Solver, reduced_solve
from .wavelet import (
    Boundary,
    Family,
    Kind,
    UnivariateBasisSpec,
    WaveletIndex1D,
    dual_pairing_matrix,
    gramian,
    riesz_constants,
    translation_range,
    vanishing_moment,
)

HATS = [UnivariateBasisSpec(boundary=b) for b in Boundary]
MULTI = [UnivariateBasisSpec(family=Family.MULTIWAVELET, boundary=b, dual_order=None) for b in (Boundary.FREE, Boundary.PERIODIC)]


def _check(condition, message):
    if not condition:
        raise AssertionError(message)


def wavelet_biorthogonality():
    for spec in HATS:
        pairing = dual_pairing_matrix(spec, 4)
        err = np.abs(pairing - np.eye(len(pairing))).max()
        _check(err < 1e-10, f"{spec.boundary.value}: pairing deviates by {err:.2e}")


def wavelet_vanishing_moments():
    for spec in HATS + MULTI:
        for j in range(1, 6):
            for k in translation_range(spec, j):
                idx = WaveletIndex1D(j, k, Kind.WAVELET)
                for r in (0, 1):
                    m = vanishing_moment(spec, idx, r)
                    _check(abs(m) < 1e-12, f"{spec.family.value}-{spec.boundary.value} {idx}: moment {r} = {m:.2e}")


def wavelet_riesz_bounds():
    rng = np.random.default_rng(7)
    for spec in HATS + MULTI:
        c, big_c = riesz_constants(spec, 5)
        gram = gramian(spec, 5)
        for _ in range(50):
            v = rng.standard_normal(gram.shape[0])
            q = v @ gram @ v / (v @ v)
            _check(c * (1 - 1e-10) <= q <= big_c * (1 + 1e-10), f"{spec.boundary.value}: Rayleigh quotient {q} outside [{c}, {big_c}]")
    for spec in MULTI:
        _check(np.allclose(riesz_constants(spec, 4), 1.0), "multiwavelets are not orthonormal")


def multitree_closure():
    specs = (UnivariateBasisSpec(), UnivariateBasisSpec(boundary=Boundary.FREE))
    universe = TensorBasis(specs, 4)
    rng = np.random.default_rng(11)
    for _ in range(30):
        a, b = (rng.random(universe.shape) < 0.01 for _ in range(2))
        ca, cb = universe.complete(a), universe.complete(b)
        _check(np.array_equal(universe.complete(ca), ca), "completion is not idempotent")
        _check(not np.any(ca & ~universe.complete(a | b)), "completion is not monotone")
        union = universe.index_set(ca | cb)
        _check(is_multitree(union, specs), "union of multitrees is not a multitree")
        _check(multitree_completion(union, specs) == union, "completion changed a multitree")


def affine_consistency():
    rng = np.random.default_rng(3)
    for problem, mus in ((thermal_block((2, 2)), [(0.3, 2), (7.0, 9)]), (cdr_spacetime((2, 2)), [(0.0, -9.0), (12.5, 4.0)])):
        pop = problem.parametric_operator
        x = rng.standard_normal(problem.discretization.trial.shape)
        y = rng.standard_normal(problem.discretization.test.shape)
        for mu in mus:
            op = pop.at(mu)
            combined = sum(t * pop.component(q).apply(x) for q, t in enumerate(pop.thetas(mu)))
            err = np.abs(op.apply(x) - combined).max()
            _check(err < 1e-12 * max(1.0, np.abs(combined).max()), f"{problem.name} at {mu}: affine mismatch {err:.2e}")
            lhs, rhs = np.sum(op.apply(x) * y), np.sum(x * op.apply_transpose(y))
            _check(abs(lhs - rhs) <= 1e-11 * max(1.0, abs(lhs)), f"{problem.name}: transpose mismatch")


def _exact(problem, mu):
    mat = problem.parametric_operator.at(mu).to_dense()
    rhs = problem.parametric_rhs.at(mu).ravel()
    x = np.linalg.solve(mat, rhs) if mat.shape[0] == mat.shape[1] else np.linalg.lstsq(mat, rhs, rcond=None)[0]
    return SimpleNamespace(array=x.reshape(problem.discretization.trial.shape), mu=mu)


def offline_online_consistency():
    cases = (
        (thermal_block((2, 2)), [(0.05, 1), (3.0, 8), (0.7, 4), (10.0, 2)], [(0.2, 5), (42.0, 3)]),
        (cdr_spacetime((2, 2)), [(0.0, -9.0), (30.0, 15.0), (1.0, 0.0), (0.5, 5.0)], [(3.0, -4.0), (25.0, 11.0)]),
    )
    for problem, samples, probes in cases:
        riesz = space_riesz_constants(problem.discretization.test)
        space = ReducedSpace(problem, supremizers=True, riesz=riesz, trunc_tol=0.0, riesz_tol=1e-12)
        for mu in samples:
            space.add_snapshot(_exact(problem, mu))
        gram_y = problem.test_gramian().to_dense()
        for n in range(1, 5):
            model = space.model().prefix(n)
            z = np.column_stack([b.ravel() for b in space.basis[:n]])
            e = np.column_stack([space.embed(b).ravel() for b in space.basis[:n]])
            for mu in probes:
                mat = problem.parametric_operator.at(mu).to_dense()
                f = problem.parametric_rhs.at(mu).ravel()
                sup = np.linalg.solve(gram_y, mat @ z)
                oracles = {
                    Solver.GALERKIN: np.linalg.solve(e.T @ mat @ z, e.T @ f),
                    Solver.NORMAL_EQ: np.linalg.lstsq(mat @ z, f, rcond=None)[0],
                    Solver.PETROV_SUPREMIZER: np.linalg.solve(sup.T @ mat @ z, sup.T @ f),
                }
                for solver, want in oracles.items():
                    got = reduced_solve(model, mu, solver).u_n
                    err = np.abs(got - want).max() / max(np.abs(want).max(), 1e-300)
                    _check(err < 1e-8, f"{problem.name} N={n} {solver.value} at {mu}: relative error {err:.2e}")
                u = reduced_solve(model, mu).u_n
                direct = np.linalg.norm(f - mat @ (z @ u)) / riesz.upper
                est = surrogate_dual_norm(problem.parametric_rhs.thetas(mu), problem.parametric_operator.thetas(mu), u, model.gramians, riesz)
                _check(abs(est - direct) <= 1e-7 * direct, f"{problem.name} N={n}: estimator {est} vs direct {direct}")


def awgm_contract():
    problem = poisson_1d(8)
    system = problem.system((0.0,))
    for eps in (1e-3, 1e-5):
        snap = solve(system, eps, ErrorMeasure.DUAL_RESIDUAL, AwgmConfig())
        again = recheck(system, snap)
        _check(again <= 1.2 * eps, f"recheck {again:.3e} exceeds 1.2 * {eps:g}")


SUITES = (
    ("wavelet biorthogonality", wavelet_biorthogonality),
    ("wavelet vanishing moments", wavelet_vanishing_moments),
    ("wavelet Riesz bounds", wavelet_riesz_bounds),
    ("multitree closure algebra", multitree_closure),
    ("affine consistency", affine_consistency),
    ("offline-online consistency", offline_online_consistency),
    ("adaptive solve contract", awgm_contract),
)


def run(echo=print):
    """Run every suite; returns True when all pass."""
    ok = True
    for name, check in SUITES:
        start = time.perf_counter()
        try:
            check()
        except AssertionError as exc:
            ok = False
            echo(f"FAIL {name}: {exc}")
        else:
            echo(f"PASS {name} ({time.perf_counter() - start:.1f} s)")
    return ok
