import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptive_rb.wavelet import (
    Boundary,
    Family,
    Kind,
    UnivariateBasisSpec,
    WaveletIndex1D,
    basis_1d,
    dual_pairing_matrix,
    eval_dual,
    eval_primal,
    gramian,
    riesz_constants,
    support_of,
    translation_range,
    vanishing_moment,
)

HATS = [UnivariateBasisSpec(boundary=b) for b in Boundary]
MULTI = [UnivariateBasisSpec(family=Family.MULTIWAVELET, boundary=b, dual_order=None) for b in (Boundary.FREE, Boundary.PERIODIC)]
ALL_SPECS = HATS + MULTI


def all_indices(spec, max_level):
    for j in range(max_level + 1):
        kind = Kind.SCALING if j == 0 else Kind.WAVELET
        for k in translation_range(spec, j):
            yield WaveletIndex1D(j, k, kind)


@st.composite
def spec_and_index(draw, max_level=5):
    spec = draw(st.sampled_from(ALL_SPECS))
    j = draw(st.integers(0, max_level))
    k = draw(st.sampled_from(list(translation_range(spec, j))))
    return spec, WaveletIndex1D(j, k, Kind.SCALING if j == 0 else Kind.WAVELET)


def _piecewise_linear(nodes, values, x):
    return np.interp(x, nodes, values)


def _subdivide(values, times):
    for _ in range(times):
        fine = np.empty(2 * len(values) - 1)
        fine[::2] = values
        fine[1::2] = 0.5 * (values[:-1] + values[1:])
        values = fine
    return values


# Fixed lifting mask of an interior hat wavelet on its own mesh (unnormalised).
INTERIOR_MASK = np.array([-1 / 8, -1 / 4, 3 / 4, -1 / 4, -1 / 8])


def test_interior_wavelet_matches_cascade_oracle():
    spec = HATS[0]
    j, k = 3, 6
    h = 2.0 ** -(j + 2)
    first = 2 * k - 1
    # cascade: repeated subdivision of the mask gives exact dyadic values
    refined = _subdivide(np.concatenate([[0.0], INTERIOR_MASK, [0.0]]), 4)
    x = (first - 1) * h + np.arange(len(refined)) * h / 16
    norm = np.sqrt(np.sum(refined[:-1] ** 2 + refined[:-1] * refined[1:] + refined[1:] ** 2) * h / 16 / 3)
    got = eval_primal(spec, WaveletIndex1D(j, k), x)
    np.testing.assert_allclose(got, refined / norm, atol=1e-13)
    mid = 0.5 * (support_of(spec, WaveletIndex1D(j, k)).lo + support_of(spec, WaveletIndex1D(j, k)).hi)
    assert eval_primal(spec, WaveletIndex1D(j, k), mid) == pytest.approx(0.75 / norm, abs=1e-13)


@settings(max_examples=60, deadline=None)
@given(spec_and_index(), st.floats(0.0, 1.0))
def test_zero_outside_support(pair, x):
    spec, idx = pair
    supp = support_of(spec, idx)
    if not supp.contains(x):
        assert eval_primal(spec, idx, x) == 0.0


@pytest.mark.parametrize("spec", MULTI)
def test_multiwavelet_scaling_unit_norm(spec):
    x, w = np.polynomial.legendre.leggauss(4)
    pts, wts = 0.5 * (x + 1), 0.5 * w
    for k in (0, 1):
        vals = eval_primal(spec, WaveletIndex1D(0, k, Kind.SCALING), pts)
        assert np.sum(wts * vals**2) == pytest.approx(1.0, abs=1e-14)


def test_free_coarsest_full_hat_support():
    spec = UnivariateBasisSpec(boundary=Boundary.FREE)
    supp = support_of(spec, WaveletIndex1D(0, 1, Kind.SCALING))
    assert supp.pieces == ((0.0, 0.5),)
    assert support_of(spec, WaveletIndex1D(0, 0, Kind.SCALING)).pieces == ((0.0, 0.25),)


@settings(max_examples=80, deadline=None)
@given(spec_and_index(max_level=8))
def test_support_width_locality(pair):
    spec, idx = pair
    width = {Family.BSPLINE: 1.5, Family.MULTIWAVELET: 2.0}[spec.family]
    assert support_of(spec, idx).length <= width * 2.0 ** -idx.level + 1e-15


def test_periodic_wrapped_support():
    spec = UnivariateBasisSpec(boundary=Boundary.PERIODIC)
    j = 3
    last = WaveletIndex1D(j, max(translation_range(spec, j)))
    interior = WaveletIndex1D(j, 5)
    wrapped = support_of(spec, last)
    assert len(wrapped.pieces) == 2
    assert wrapped.length == pytest.approx(support_of(spec, interior).length)
    assert eval_primal(spec, last, 0.01) != 0.0


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: f"{s.family.value}-{s.boundary.value}")
def test_vanishing_moments(spec):
    for idx in all_indices(spec, 6):
        if idx.kind is Kind.WAVELET:
            assert abs(vanishing_moment(spec, idx, 0)) < 1e-12
            assert abs(vanishing_moment(spec, idx, 1)) < 1e-12


def _exact_second_moment(nodes, values):
    # integral of x^2 (alpha x + beta) over each linear piece in closed form
    total = 0.0
    for a, b, va, vb in zip(nodes[:-1], nodes[1:], values[:-1], values[1:]):
        alpha = (vb - va) / (b - a)
        beta = va - alpha * a
        total += alpha * (b**4 - a**4) / 4 + beta * (b**3 - a**3) / 3
    return total


def test_second_moment_matches_symbolic_integral():
    spec = HATS[0]
    for idx in [WaveletIndex1D(1, 0), WaveletIndex1D(3, 5), WaveletIndex1D(4, 31)]:
        n = 2 ** (idx.level + 2)
        nodes = np.linspace(0, 1, n + 1)
        values = eval_primal(spec, idx, nodes)
        expected = _exact_second_moment(nodes, values)
        assert abs(expected) > 1e-6
        assert vanishing_moment(spec, idx, 2) == pytest.approx(expected, rel=1e-10, abs=1e-15)


@pytest.mark.parametrize("spec", HATS, ids=lambda s: s.boundary.value)
def test_biorthogonality(spec):
    pairing = dual_pairing_matrix(spec, 4)
    np.testing.assert_allclose(pairing, np.eye(len(pairing)), atol=1e-10)


def test_dual_cascade_pairing_is_close_to_delta():
    spec = HATS[0]
    idx = WaveletIndex1D(2, 3)
    x = np.linspace(0, 1, 2**14 + 1)
    dual = eval_dual(spec, idx, x)
    same = np.trapezoid(eval_primal(spec, idx, x) * dual, x)
    other = np.trapezoid(eval_primal(spec, WaveletIndex1D(2, 4), x) * dual, x)
    assert same == pytest.approx(1.0, abs=2e-2)
    assert abs(other) < 2e-2


@pytest.mark.parametrize("spec", HATS, ids=lambda s: s.boundary.value)
def test_refinement_by_finer_hats(spec):
    for idx in all_indices(spec, 4):
        n = 2 ** (idx.level + 3)
        nodes = np.linspace(0, 1, n + 1)
        coeffs = eval_primal(spec, idx, nodes)
        x = np.linspace(0, 1, 16 * n + 1)
        np.testing.assert_allclose(_piecewise_linear(nodes, coeffs, x), eval_primal(spec, idx, x), atol=1e-12)


@pytest.mark.parametrize("spec", MULTI, ids=lambda s: s.boundary.value)
def test_multiwavelet_refinement_by_finer_generators(spec):
    for idx in all_indices(spec, 4):
        cells = 2 ** (idx.level + 1)
        for c in range(cells):
            a, b = c / cells, (c + 1) / cells
            inner = np.linspace(a, b, 9)[1:-1]
            # a linear function on the finer cell is determined by two interior samples
            p = np.polyfit(inner[[0, -1]], eval_primal(spec, idx, inner[[0, -1]]), 1)
            np.testing.assert_allclose(np.polyval(p, inner), eval_primal(spec, idx, inner), atol=1e-12)


def test_sobolev_factor_applied():
    l2 = HATS[0]
    h1 = UnivariateBasisSpec(sobolev_scale=1.0)
    x = np.linspace(0, 1, 101)
    idx = WaveletIndex1D(3, 4)
    np.testing.assert_allclose(eval_primal(h1, idx, x), 2.0**-3 * eval_primal(l2, idx, x))


@pytest.mark.parametrize("spec", MULTI, ids=lambda s: s.boundary.value)
def test_multiwavelet_riesz_constants_are_one(spec):
    for level in (1, 3, 6):
        c, big_c = riesz_constants(spec, level)
        assert c == pytest.approx(1.0, abs=1e-10)
        assert big_c == pytest.approx(1.0, abs=1e-10)


@pytest.mark.parametrize(
    "boundary,level", [(Boundary.DIRICHLET, 6), (Boundary.PERIODIC, 8)], ids=["dirichlet", "periodic"]
)
def test_h1_riesz_constants_level_robust(boundary, level):
    spec = UnivariateBasisSpec(boundary=boundary, sobolev_scale=1.0)
    c1, big1 = riesz_constants(spec, level)
    c2, big2 = riesz_constants(spec, level + 2)
    assert 0 < c1 <= big1 and 0 < c2 <= big2
    assert abs(c2 / c1 - 1) < 0.05
    assert abs(big2 / big1 - 1) < 0.05


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: f"{s.family.value}-{s.boundary.value}")
def test_norm_equivalence_random_vectors(spec):
    level = 5
    c, big_c = riesz_constants(spec, level)
    gram = gramian(spec, level)
    rng = np.random.default_rng(7)
    for _ in range(100):
        v = rng.standard_normal(gram.shape[0])
        ratio = v @ gram @ v / (v @ v)
        assert c * (1 - 1e-10) <= ratio <= big_c * (1 + 1e-10)


def test_l2_norm_of_basis_functions():
    for spec in ALL_SPECS:
        gram = gramian(spec, 4)
        np.testing.assert_allclose(np.diag(gram), 1.0, atol=1e-12)


def test_invalid_index_and_spec():
    with pytest.raises(IndexError):
        eval_primal(HATS[0], WaveletIndex1D(0, 0, Kind.SCALING), 0.5)
    with pytest.raises(IndexError):
        eval_primal(HATS[0], WaveletIndex1D(2, 8), 0.5)
    with pytest.raises(IndexError):
        eval_primal(HATS[0], WaveletIndex1D(0, 1, Kind.WAVELET), 0.5)
    with pytest.raises(ValueError):
        UnivariateBasisSpec(family=Family.MULTIWAVELET, boundary=Boundary.DIRICHLET, dual_order=None)
    with pytest.raises(ValueError):
        UnivariateBasisSpec(order=1)


def test_spec_json_round_trip():
    for spec in ALL_SPECS:
        assert UnivariateBasisSpec.from_json(spec.to_json()) == spec


def test_level_counts():
    counts = {Boundary.DIRICHLET: -1, Boundary.FREE: 1, Boundary.PERIODIC: 0}
    for spec in HATS:
        for level in range(5):
            assert basis_1d(spec, level).n == 2 ** (level + 2) + counts[spec.boundary]
    for spec in MULTI:
        assert basis_1d(spec, 5).n == 2**6


def test_transform_reproduces_point_values():
    for spec in ALL_SPECS:
        basis = basis_1d(spec, 3)
        dg = basis.to_dg(basis.mesh_exponent + 1) @ basis.dense_transform
        cells = 2 ** (basis.mesh_exponent + 1)
        grid = np.linspace(0, 1, cells + 1)
        mids = 0.5 * (grid[:-1] + grid[1:])
        for pos in range(basis.n):
            idx = basis.index(pos)
            # values at the centre of each element from the (left, right) pair
            approx = 0.5 * (dg[0::2, pos] + dg[1::2, pos])
            np.testing.assert_allclose(approx, eval_primal(spec, idx, mids), atol=1e-12)
