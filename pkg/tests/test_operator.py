import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptive_rb.index import IndexSet, TensorBasis, TensorIndex
from adaptive_rb.operator import (
    WORK,
    AffineBilinearOperator,
    AffineFunctional,
    ContractError,
    Discretization,
    DomainError,
    Factor1D,
    FunctionalComponent,
    Load1D,
    OperatorComponent,
    ParameterBox,
    ParametricOperator,
    SeparableTerm,
    Space,
    ThetaExpression,
    apply_restricted,
    assemble_rhs,
    entry,
    evaluate_thetas,
    sparse_apply,
)
from adaptive_rb.wavelet import Boundary, Family, Kind, UnivariateBasisSpec, WaveletIndex1D, eval_primal

DIRICHLET = UnivariateBasisSpec(boundary=Boundary.DIRICHLET)
FREE = UnivariateBasisSpec(boundary=Boundary.FREE)
PERIODIC = UnivariateBasisSpec(boundary=Boundary.PERIODIC)
MULTI = UnivariateBasisSpec(family=Family.MULTIWAVELET, boundary=Boundary.FREE, dual_order=None)

H1_NORM = OperatorComponent(
    (
        SeparableTerm((Factor1D("stiffness"), Factor1D("mass"))),
        SeparableTerm((Factor1D("mass"), Factor1D("stiffness"))),
    )
)


def _quadrature_form(spec, row, col, factor, level_cap):
    """Reference 1D integral from point evaluations on a mesh finer than both functions."""
    cuts = np.linspace(0, 1, 2 ** (level_cap + 4) + 1)
    cuts = np.union1d(cuts, np.clip(factor.interval, 0, 1))
    a, b = factor.interval
    nodes, weights = np.polynomial.legendre.leggauss(6)
    total = 0.0
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        if hi <= a or lo >= b:
            continue
        h = hi - lo
        pts = lo + 0.5 * h * (nodes + 1)
        w = 0.5 * h * weights * np.polynomial.polynomial.polyval(pts, factor.weight)
        u = eval_primal(spec, col, pts)
        v = eval_primal(spec, row, pts)
        probe = lo + h * np.array([0.25, 0.75])
        du = np.diff(eval_primal(spec, col, probe))[0] / (0.5 * h)
        dv = np.diff(eval_primal(spec, row, probe))[0] / (0.5 * h)
        if factor.form == "mass":
            total += np.sum(w * u * v)
        elif factor.form == "stiffness":
            total += np.sum(w) * du * dv
        else:
            total += np.sum(w * v) * du
    return total


def _unscaled(specs, levels):
    universe = TensorBasis(specs, levels)
    space = Space(universe, scaling="none")
    return universe, Discretization(space)


@st.composite
def index_pair(draw, spec, level):
    universe = TensorBasis((spec,), (level,))
    b = universe.bases[0]
    i, j = draw(st.integers(0, b.n - 1)), draw(st.integers(0, b.n - 1))
    return b.index(i), b.index(j)


FACTORS = [
    Factor1D("mass"),
    Factor1D("stiffness"),
    Factor1D("advection", (0.5, -1.0)),
    Factor1D("stiffness", (1.0,), (0.0, 0.5)),
    Factor1D("mass", (0.0, 0.0, 1.0), (1 / 3, 0.8)),
]


@pytest.mark.parametrize("spec", [DIRICHLET, FREE, PERIODIC], ids=lambda s: s.boundary.value)
@pytest.mark.parametrize("factor", FACTORS, ids=lambda f: f"{f.form}-{f.interval}")
@settings(max_examples=15, deadline=None)
@given(data=st.data())
def test_entries_match_quadrature(spec, factor, data):
    level = 4
    row, col = data.draw(index_pair(spec, level))
    _, disc = _unscaled((spec,), (level,))
    comp = OperatorComponent((SeparableTerm((factor,)),))
    got = entry(disc, comp, (row,), (col,))
    assert got == pytest.approx(_quadrature_form(spec, row, col, factor, level), rel=1e-12, abs=1e-11)


def test_multiwavelet_mass_is_identity():
    _, disc = _unscaled((MULTI,), (4,))
    np.testing.assert_allclose(disc.matrix(0, Factor1D("mass")), np.eye(32), atol=1e-13)


def test_tensor_entry_is_product_of_factors():
    universe, disc = _unscaled((DIRICHLET, FREE), (3, 3))
    row = TensorIndex([(2, 3), (1, 1)])
    col = TensorIndex([(3, 5), (0, 2, Kind.SCALING)])
    term = SeparableTerm((Factor1D("stiffness"), Factor1D("mass")), scale=2.5)
    expected = 2.5
    for spec, r, c, f in zip((DIRICHLET, FREE), row, col, term.factors):
        expected *= _quadrature_form(spec, r, c, f, 3)
    assert entry(disc, OperatorComponent((term,)), row, col) == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_scaled_diagonal_of_norm_is_one():
    universe = TensorBasis((DIRICHLET, FREE), (4, 3))
    disc = Discretization(Space(universe, H1_NORM))
    np.testing.assert_allclose(disc.component(H1_NORM).diagonal(), 1.0, atol=1e-12)


def _random_problem(seed=0):
    universe = TensorBasis((DIRICHLET, PERIODIC), (3, 3))
    disc = Discretization(Space(universe, H1_NORM))
    comp = OperatorComponent(
        (
            SeparableTerm((Factor1D("stiffness", (1.0, 1.0)), Factor1D("mass"))),
            SeparableTerm((Factor1D("mass"), Factor1D("advection"))),
            SeparableTerm((Factor1D("mass", (1.0,), (0.0, 0.5)), Factor1D("mass")), 3.0),
        )
    )
    return universe, disc, comp


def test_dense_apply_matches_assembled_matrix():
    universe, disc, comp = _random_problem()
    op = disc.component(comp)
    full = op.to_dense()
    # element-by-element assembly through the index API
    some = [(i, j) for i in range(0, universe.size, 7) for j in range(0, universe.size, 11)]
    for i, j in some:
        r = universe.codes_at(i)[0]
        c = universe.codes_at(j)[0]
        assert full[i, j] == pytest.approx(entry(disc, comp, TensorIndex.from_code(r), TensorIndex.from_code(c)), rel=1e-12, abs=1e-12)
    x = np.random.default_rng(1).standard_normal(universe.shape)
    np.testing.assert_allclose(op.apply(x).ravel(), full @ x.ravel(), atol=1e-12)
    np.testing.assert_allclose(op.apply_transpose(x).ravel(), full.T @ x.ravel(), atol=1e-12)
    np.testing.assert_allclose(op.normal_diagonal().ravel(), (full**2).sum(axis=0), atol=1e-11)


@st.composite
def multitree_masks(draw, universe):
    seeds = draw(st.lists(st.integers(0, universe.size - 1), min_size=1, max_size=12))
    mask = universe.coarsest_mask()
    mask.ravel()[seeds] = True
    return universe.complete(mask)


UNIVERSE = TensorBasis((DIRICHLET, PERIODIC), (3, 3))


@settings(max_examples=25, deadline=None)
@given(multitree_masks(UNIVERSE), multitree_masks(UNIVERSE), st.integers(0, 2**31))
def test_restricted_apply_methods_agree(rows, cols, seed):
    _, disc, comp = _random_problem()
    universe = disc.trial.basis
    x = np.random.default_rng(seed).standard_normal(universe.shape) * cols
    v = universe.coeff_vector(x, cols)
    row_set, col_set = universe.index_set(rows), universe.index_set(cols)
    dense = apply_restricted(disc, comp, row_set, col_set, v, method="dense")
    sparse = apply_restricted(disc, comp, row_set, col_set, v, method="sparse")
    expected = disc.component(comp).to_dense() @ x.ravel()
    assert dense.index_set() == row_set
    np.testing.assert_allclose(dense.values, expected[np.flatnonzero(rows.ravel())], atol=1e-12)
    np.testing.assert_allclose(sparse.values, dense.values, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_transpose_identity(seed):
    _, disc, comp = _random_problem()
    op = disc.component(comp)
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(op.trial_shape), rng.standard_normal(op.test_shape)
    assert np.sum(op.apply(x) * y) == pytest.approx(np.sum(x * op.apply_transpose(y)), rel=1e-12, abs=1e-12)


def test_affine_consistency():
    universe = TensorBasis((DIRICHLET, FREE), (3, 3))
    disc = Discretization(Space(universe, H1_NORM))
    q0 = OperatorComponent((SeparableTerm((Factor1D("stiffness", interval=(0.5, 1)), Factor1D("mass"))),))
    q1 = OperatorComponent((SeparableTerm((Factor1D("stiffness", interval=(0, 0.5)), Factor1D("mass"))),))
    q2 = OperatorComponent((SeparableTerm((Factor1D("mass"), Factor1D("stiffness"))),))
    affine = AffineBilinearOperator((q0, q1, q2), ("1", "mu1", "mu2**2 + delta(mu1 = 2)"))
    param = ParametricOperator(disc, affine, ParameterBox((0.1, -1), (10, 1)))
    x = np.random.default_rng(3).standard_normal(universe.shape)
    for mu in [(0.5, 0.2), (2.0, -0.7), (7.5, 1.0)]:
        theta = param.thetas(mu)
        combined = sum(t * param.component(q).apply(x) for q, t in enumerate(theta))
        np.testing.assert_allclose(param.at(mu).apply(x), combined, atol=1e-12)
    assert param.thetas((2.0, 0.5))[2] == pytest.approx(1.25)


def test_theta_grammar():
    assert ThetaExpression("μ₁ * 2 + 1")((3.0,)) == 7.0
    assert ThetaExpression("δ(μ₂ = 3)")((0.0, 3.0)) == 1.0
    assert ThetaExpression("delta(mu2 == 3)")((0.0, 2.0)) == 0.0
    assert ThetaExpression("1 + min(0, mu1/2 + mu2)/9")((2.0, -3.0)) == pytest.approx(1 - 2 / 9)
    assert ThetaExpression("sqrt(abs(mu1))")((-4.0,)) == 2.0
    for bad in ("__import__('os')", "mu1.real", "[mu1]", "lambda: 1", "x + 1", "1 < mu1 < 2"):
        with pytest.raises(ValueError):
            ThetaExpression(bad)


def test_theta_domain_handling():
    affine = AffineFunctional((FunctionalComponent((Load1D(),)),), ("mu1",))
    box = ParameterBox((0.0,), (1.0,))
    with pytest.raises(DomainError):
        evaluate_thetas(affine, (2.0,), box)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        assert evaluate_thetas(affine, (2.0,), box, on_outside="warn")[0] == 2.0
    assert caught
    integer_box = ParameterBox((0, 0), (1, 4), (False, True))
    assert integer_box.contains((0.5, 3)) and not integer_box.contains((0.5, 2.5))


def _reference_load(spec, idx, load, level):
    cuts = np.union1d(np.linspace(0, 1, 2 ** (level + 4) + 1), np.clip(load.interval, 0, 1))
    nodes, weights = np.polynomial.legendre.leggauss(10)
    total = 0.0
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        mid = 0.5 * (lo + hi)
        if not load.interval[0] <= mid <= load.interval[1]:
            continue
        pts = lo + 0.5 * (hi - lo) * (nodes + 1)
        total += np.sum(0.5 * (hi - lo) * weights * load(pts) * eval_primal(spec, idx, pts))
    return total


@pytest.mark.parametrize(
    "load",
    [
        Load1D(interval=(1 / 3, 2 / 3)),
        Load1D(interval=(0.4, 0.8)),
        Load1D("cosine", frequency=1.0),
        Load1D("polynomial", (0.0, 1.0, -1.0)),
    ],
    ids=["indicator-third", "indicator-fifth", "cosine", "quadratic"],
)
@pytest.mark.parametrize("spec", [DIRICHLET, FREE, PERIODIC], ids=lambda s: s.boundary.value)
def test_rhs_matches_quadrature(load, spec):
    level = 4
    universe, disc = _unscaled((spec,), (level,))
    rows = universe.index_set(universe.full_mask())
    vec = assemble_rhs(disc, FunctionalComponent((load,)), rows)
    for idx, value in list(vec.items())[::5]:
        assert value == pytest.approx(_reference_load(spec, idx[0], load, level), rel=1e-12, abs=1e-12)


def test_rhs_tensor_product_and_scaling():
    universe = TensorBasis((DIRICHLET, FREE), (3, 2))
    disc = Discretization(Space(universe, H1_NORM))
    comp = FunctionalComponent((Load1D(interval=(0, 1 / 3)), Load1D(interval=(0.4, 0.8))), scale=2.0)
    full = disc.rhs(comp)
    row = TensorIndex([(1, 1), (1, 2)])
    pos = universe.positions([row.code])
    expected = 2.0 * _reference_load(DIRICHLET, row[0], comp.factors[0], 3) * _reference_load(FREE, row[1], comp.factors[1], 2)
    assert full[pos][0] == pytest.approx(expected * disc.test.scale[pos][0], rel=1e-12, abs=1e-12)


def test_restricted_apply_contract_violations():
    _, disc, comp = _random_problem()
    universe = disc.trial.basis
    coarse = universe.index_set(universe.coarsest_mask())
    deep = IndexSet.from_indices([TensorIndex([(3, 2), (0, 0, Kind.SCALING)])])
    with pytest.raises(ContractError):
        apply_restricted(disc, comp, coarse, deep, universe.coeff_vector(np.zeros(universe.shape), universe.mask(deep)))
    outside = universe.coeff_vector(np.ones(universe.shape), universe.full_mask())
    with pytest.raises(ContractError):
        apply_restricted(disc, comp, coarse, coarse, outside)


def test_work_grows_linearly_with_set_size():
    universe = TensorBasis((DIRICHLET, DIRICHLET), (7, 7))
    disc = Discretization(Space(universe, H1_NORM))
    op = disc.component(H1_NORM)
    b = universe.bases[0]
    centre = (b.support_start + 0.5 * b.support_count) / b.cells
    lev0, lev1 = universe.level_grid()
    sizes, work = [], []
    for width in (1 / 8, 1 / 4, 1 / 2):
        mask = universe.complete((centre[:, None] < width) & (lev0 + lev1 <= 7))
        WORK.reset()
        sparse_apply(op, np.ones(universe.shape), mask, mask)
        sizes.append(mask.sum())
        work.append(WORK.flops)
    for k in range(2):
        growth = (work[k + 1] / work[k]) / (sizes[k + 1] / sizes[k])
        assert growth <= 1.25


def test_operator_json_round_trip():
    _, _, comp = _random_problem()
    affine = AffineBilinearOperator((comp, H1_NORM), ("mu1", "δ(μ₂ = 1)"))
    again = AffineBilinearOperator.from_dict(json.loads(json.dumps(affine.to_dict())))
    assert again == affine
    functional = AffineFunctional((FunctionalComponent((Load1D("cosine"), Load1D())),), ("1",))
    assert AffineFunctional.from_dict(json.loads(json.dumps(functional.to_dict()))) == functional
