"""Univariate piecewise-linear wavelet bases on the unit interval.

Two families are available:

* lifted hat-function wavelets (primal order 2, two vanishing moments) with
  homogeneous Dirichlet, free or periodic boundary treatment;
* the L2-orthonormal piecewise-linear multiwavelets (two generators per
  interval).

Level 0 of the hat family lives on the mesh of width 1/4; a level-j wavelet is
a fine hat on the mesh of width 2^-(j+2) minus two coarse hats chosen so that
the first two moments vanish.  All functions are L2-normalised; the Sobolev
factor 2^(-j s) of a spec is applied on evaluation.
"""
from __future__ import annotations

import enum
import functools
import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

COARSE_MESH_EXPONENT = 2
CODE_SHIFT = 32


class Family(str, enum.Enum):
    BSPLINE = "BiorthoBSpline"
    MULTIWAVELET = "OrthonormalMultiwavelet"


class Boundary(str, enum.Enum):
    DIRICHLET = "DirichletHomog"
    PERIODIC = "Periodic"
    FREE = "Free"


class Kind(str, enum.Enum):
    SCALING = "Scaling"
    WAVELET = "Wavelet"


class RieszEstimationError(RuntimeError):
    """Eigenvalue iteration did not converge; carries the last iterate."""

    def __init__(self, message, last_iterate):
        super().__init__(message)
        self.last_iterate = last_iterate


@dataclass(frozen=True)
class UnivariateBasisSpec:
    family: Family = Family.BSPLINE
    boundary: Boundary = Boundary.DIRICHLET
    order: int = 2
    dual_order: int | None = 2
    vanishing_moments: int = 2
    sobolev_scale: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "boundary", Boundary(self.boundary))
        object.__setattr__(self, "sobolev_scale", float(self.sobolev_scale))
        if self.order < 2:
            raise ValueError("primal order must be at least 2")
        if self.vanishing_moments < 1:
            raise ValueError("at least one vanishing moment is required")
        if self.order != 2 or self.vanishing_moments != 2:
            raise NotImplementedError("only piecewise-linear constructions with two vanishing moments exist")
        if self.family is Family.MULTIWAVELET:
            if self.boundary is Boundary.DIRICHLET:
                raise ValueError("multiwavelets do not satisfy homogeneous Dirichlet conditions")
            if self.dual_order not in (None, self.order):
                raise ValueError("multiwavelets are orthonormal: the dual order equals the primal order")
            object.__setattr__(self, "dual_order", self.order)
        elif self.dual_order != 2:
            raise NotImplementedError("only dual order 2 is available for hat wavelets")

    def to_dict(self):
        return {
            "family": self.family.value,
            "boundary": self.boundary.value,
            "order": self.order,
            "dual_order": self.dual_order,
            "vanishing_moments": self.vanishing_moments,
            "sobolev_scale": self.sobolev_scale,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


class WaveletIndex1D(NamedTuple):
    level: int
    translation: int
    kind: Kind = Kind.WAVELET

    @property
    def code(self):
        return encode(self.level, self.translation)


def encode(level, translation):
    """Integer key ordered by (level, translation)."""
    return (np.int64(level) << CODE_SHIFT) | np.int64(translation)


def decode(code):
    code = np.asarray(code, dtype=np.int64)
    return code >> CODE_SHIFT, code & ((1 << CODE_SHIFT) - 1)


def index_from_code(code):
    level, k = (int(v) for v in decode(code))
    return WaveletIndex1D(level, k, Kind.SCALING if level == 0 else Kind.WAVELET)


def translation_range(spec, level):
    """Valid translations on a level; total in the level (empty for level < 0)."""
    if level < 0:
        return range(0)
    if spec.family is Family.MULTIWAVELET:
        return range(2) if level == 0 else range(2**level)
    if level == 0:
        return {
            Boundary.DIRICHLET: range(1, 4),
            Boundary.FREE: range(0, 5),
            Boundary.PERIODIC: range(0, 4),
        }[spec.boundary]
    return range(2 ** (level + 1))


def level_count(spec, level):
    return len(translation_range(spec, level))


def is_valid(spec, idx):
    idx = WaveletIndex1D(*idx)
    expected = Kind.SCALING if idx.level == 0 else Kind.WAVELET
    return Kind(idx.kind) is expected and idx.translation in translation_range(spec, idx.level)


def check_index(spec, idx):
    if not is_valid(spec, idx):
        raise IndexError(f"{tuple(idx)} is not a valid index for {spec.family.value}/{spec.boundary.value}")
    return WaveletIndex1D(*idx)


def sobolev_factor(spec, level):
    return 2.0 ** (-np.asarray(level, dtype=float) * spec.sobolev_scale)


# ---------------------------------------------------------------------------
# Hat-function construction on "full" node vectors.  Dirichlet and free meshes
# carry nodes 0..n, periodic meshes carry nodes 0..n-1.


def _mesh_exponent(spec, level):
    if spec.family is Family.MULTIWAVELET:
        return level
    return level + COARSE_MESH_EXPONENT


def _full_size(boundary, n):
    return n if boundary is Boundary.PERIODIC else n + 1


def _prolongation(boundary, n):
    """Linear interpolation from the full nodes of an n-cell mesh to 2n cells."""
    rows, cols, vals = [], [], []
    for i in range(_full_size(boundary, n)):
        rows.append(2 * i)
        cols.append(i)
        vals.append(1.0)
    for i in range(n):
        right = (i + 1) % n if boundary is Boundary.PERIODIC else i + 1
        rows += [2 * i + 1, 2 * i + 1]
        cols += [i, right]
        vals += [0.5, 0.5]
    return sp.csr_matrix((vals, (rows, cols)), shape=(_full_size(boundary, 2 * n), _full_size(boundary, n)))


def _hat_moments(boundary, node, n):
    h = 1.0 / n
    if boundary is Boundary.FREE and node == 0:
        return h / 2, h * h / 6
    if boundary is Boundary.FREE and node == n:
        return h / 2, h / 2 - h * h / 6
    return h, node * h * h


def _coarse_neighbours(boundary, k, n_coarse):
    if boundary is Boundary.DIRICHLET:
        if k == 0:
            return 1, 2
        if k + 1 == n_coarse:
            return k, k - 1
    return k, k + 1


def _full_mass(boundary, n):
    h = 1.0 / n
    size = _full_size(boundary, n)
    left = np.arange(n)
    right = (left + 1) % size if boundary is Boundary.PERIODIC else left + 1
    rows = np.concatenate([left, right, left, right])
    cols = np.concatenate([left, right, right, left])
    vals = np.concatenate([np.full(n, h / 3), np.full(n, h / 3), np.full(n, h / 6), np.full(n, h / 6)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(size, size))


@functools.lru_cache(maxsize=None)
def _hat_level(spec, level):
    """Normalised nodal values (full nodes, mesh 2^-(level+2)) of one level, one CSC column per function."""
    bnd = spec.boundary
    n = 2 ** (level + COARSE_MESH_EXPONENT)
    size = _full_size(bnd, n)
    trans = translation_range(spec, level)
    if level == 0:
        values = sp.csc_matrix((np.ones(len(trans)), (np.array(trans), np.arange(len(trans)))), shape=(size, len(trans)))
    else:
        n_coarse = n // 2
        n_full = _full_size(bnd, n_coarse)
        rows, cols, vals = [], [], []
        for c, k in enumerate(trans):
            c1, c2 = _coarse_neighbours(bnd, k, n_coarse)
            m1 = _hat_moments(bnd, c1, n_coarse)
            m2 = _hat_moments(bnd, c2, n_coarse)
            mf = _hat_moments(bnd, 2 * k + 1, n)
            a, b = np.linalg.solve(np.array([[m1[0], m2[0]], [m1[1], m2[1]]]), np.array(mf))
            rows += [c1 % n_full, c2 % n_full]
            cols += [c, c]
            vals += [-a, -b]
        coarse = sp.csc_matrix((vals, (rows, cols)), shape=(n_full, len(trans)))
        fine = sp.csc_matrix(
            (np.ones(len(trans)), (2 * np.array(trans) + 1, np.arange(len(trans)))), shape=(size, len(trans))
        )
        values = (_prolongation(bnd, n_coarse) @ coarse + fine).tocsc()
    if bnd is Boundary.DIRICHLET:
        keep = np.ones(size)
        keep[[0, -1]] = 0.0
        values = (sp.diags(keep) @ values).tocsc()
    values.eliminate_zeros()
    mass = _full_mass(bnd, n)
    norms = np.sqrt(np.asarray(values.multiply(mass @ values).sum(axis=0)).ravel())
    return (values @ sp.diags(1.0 / norms)).tocsc()


def _hat_column(spec, level, k):
    """(node indices, values) of one normalised function."""
    col = list(translation_range(spec, level)).index(k) if level == 0 else k
    mat = _hat_level(spec, level)
    sl = slice(mat.indptr[col], mat.indptr[col + 1])
    return mat.indices[sl], mat.data[sl]


def _hat_support_cells(spec, level, k):
    """Support as (first cell, cell count) on the function's own mesh."""
    nodes, vals = _hat_column(spec, level, k)
    n = 2 ** (level + COARSE_MESH_EXPONENT)
    nz = np.sort(nodes[np.abs(vals) > 1e-14])
    if spec.boundary is Boundary.PERIODIC:
        # nonzero nodes form a cyclic run; rotate so it is contiguous
        gaps = np.diff(np.concatenate([nz, [nz[0] + n]]))
        start = nz[(int(np.argmax(gaps)) + 1) % len(nz)]
        run = (nz - start) % n
        return int(start) - 1, int(run.max()) + 2
    lo = max(int(nz.min()) - 1, 0)
    hi = min(int(nz.max()) + 1, n)
    return lo, hi - lo


# ---------------------------------------------------------------------------
# Multiwavelets


_SQ3 = np.sqrt(3.0)


def _mw_pieces(level, k):
    """(interval start, interval length, scale, generator) of a multiwavelet."""
    if level == 0:
        return 0.0, 1.0, 1.0, ("phi0", "phi1")[k]
    width = 2.0 ** (-(level - 1))
    return (k // 2) * width, width, 2.0 ** ((level - 1) / 2), ("psi0", "psi1")[k % 2]


def _mw_generator(name, y, right_half):
    if name == "phi0":
        return np.ones_like(y)
    if name == "phi1":
        return _SQ3 * (2 * y - 1)
    if name == "psi0":
        return np.where(right_half, 5 - 6 * y, 1 - 6 * y)
    return _SQ3 * np.where(right_half, 4 * y - 3, 1 - 4 * y)


def _mw_eval(level, k, x, side=None):
    start, width, scale, name = _mw_pieces(level, k)
    x = np.asarray(x, dtype=float)
    y = (x - start) / width
    if side is None:
        inside = (y >= 0) & ((y < 1) | ((y == 1) & (start + width >= 1.0)))
        right_half = y >= 0.5
    else:
        # side gives the sample point that selects the linear piece
        ys = (np.asarray(side, dtype=float) - start) / width
        inside = (ys > 0) & (ys < 1)
        right_half = ys >= 0.5
    return np.where(inside, scale * _mw_generator(name, y, right_half), 0.0)


# ---------------------------------------------------------------------------
# Public evaluation API


@dataclass(frozen=True)
class Support:
    """Closed support as up to two disjoint intervals in [0, 1]."""

    pieces: tuple

    @property
    def lo(self):
        return self.pieces[0][0]

    @property
    def hi(self):
        return self.pieces[-1][1]

    @property
    def length(self):
        return sum(b - a for a, b in self.pieces)

    @property
    def center(self):
        if len(self.pieces) == 1:
            return 0.5 * (self.lo + self.hi)
        # wrapped: centre of the unwrapped interval, mapped back into [0, 1)
        (a0, b0), (a1, b1) = self.pieces
        return (0.5 * (a1 + 1.0 + b0)) % 1.0

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        mask = np.zeros(x.shape, dtype=bool)
        for a, b in self.pieces:
            mask |= (x >= a) & (x <= b)
        return mask


def _cells_to_support(start, count, n, periodic):
    if periodic:
        start %= n
        end = start + count
        if end > n:
            return Support(((0.0, (end - n) / n), (start / n, 1.0)))
    return Support(((start / n, (start + count) / n),))


def support_of(spec, idx):
    idx = check_index(spec, idx)
    if spec.family is Family.MULTIWAVELET:
        start, width, _, _ = _mw_pieces(idx.level, idx.translation)
        return Support(((start, start + width),))
    start, count = _hat_support_cells(spec, idx.level, idx.translation)
    n = 2 ** (idx.level + COARSE_MESH_EXPONENT)
    return _cells_to_support(start, count, n, spec.boundary is Boundary.PERIODIC)


def _hat_nodal(spec, idx):
    nodes, vals = _hat_column(spec, idx.level, idx.translation)
    values = np.zeros(_full_size(spec.boundary, 2 ** (idx.level + COARSE_MESH_EXPONENT)))
    values[nodes] = vals
    if spec.boundary is Boundary.PERIODIC:
        values = np.append(values, values[0])
    return np.linspace(0.0, 1.0, len(values)), values


def eval_primal(spec, idx, x):
    """Point values of a primal basis function (vectorised over x)."""
    idx = check_index(spec, idx)
    x = np.asarray(x, dtype=float)
    if np.any((x < 0) | (x > 1)):
        raise ValueError("evaluation points must lie in [0, 1]")
    if spec.family is Family.MULTIWAVELET:
        vals = _mw_eval(idx.level, idx.translation, x)
    else:
        nodes, values = _hat_nodal(spec, idx)
        vals = np.interp(x, nodes, values)
    return vals * sobolev_factor(spec, idx.level)


def _breakpoints(spec, idx):
    return np.linspace(0.0, 1.0, 2 ** _mesh_exponent(spec, idx.level) + 1)


def vanishing_moment(spec, idx, r):
    """Exact integral of x^r against a wavelet (Gauss rule on each linear piece).

    Periodic functions whose support wraps around x = 1 are integrated in the
    unwrapped coordinate, where their moments vanish.
    """
    idx = check_index(spec, idx)
    if idx.kind is not Kind.WAVELET:
        raise ValueError("moments are defined for wavelets only")
    if r < 0:
        raise ValueError("moment order must be non-negative")
    nodes, weights = np.polynomial.legendre.leggauss(r // 2 + 2)
    grid = _breakpoints(spec, idx)
    a, b = grid[:-1, None], grid[1:, None]
    pts = 0.5 * (b - a) * nodes + 0.5 * (a + b)
    if spec.family is Family.MULTIWAVELET:
        vals = _mw_eval(idx.level, idx.translation, pts, side=np.broadcast_to(0.5 * (a + b), pts.shape))
        vals = vals * sobolev_factor(spec, idx.level)
    else:
        vals = eval_primal(spec, idx, pts)
    coord = pts
    if spec.boundary is Boundary.PERIODIC:
        supp = support_of(spec, idx)
        if len(supp.pieces) == 2:
            coord = np.where(pts <= supp.pieces[0][1], pts + 1.0, pts)
    return float(np.sum(0.5 * (b - a) * weights * coord**r * vals))


# ---------------------------------------------------------------------------
# Full bases up to a maximal level


class Basis1D:
    """All functions of one family on levels 0..max_level.

    ``transform`` maps coefficients of the L2-normalised functions to a native
    fine representation: nodal values of continuous hats on the mesh
    2^-mesh_exponent (hat family) or left/right element values of a
    discontinuous linear function (multiwavelets).
    """

    def __init__(self, spec, max_level):
        if max_level < 0:
            raise ValueError("max_level must be non-negative")
        self.spec = spec
        self.max_level = max_level
        levels, trans = [], []
        for j in range(max_level + 1):
            rng = translation_range(spec, j)
            levels.append(np.full(len(rng), j, dtype=np.int64))
            trans.append(np.fromiter(rng, dtype=np.int64))
        self.levels = np.concatenate(levels)
        self.translations = np.concatenate(trans)
        self.codes = encode(self.levels, self.translations)
        self.n = len(self.codes)
        self.level_offsets = np.searchsorted(self.levels, np.arange(max_level + 2))
        self.mesh_exponent = max(_mesh_exponent(spec, max_level), 0)
        self.cells = 2**self.mesh_exponent
        self.periodic = spec.boundary is Boundary.PERIODIC
        self.discontinuous = spec.family is Family.MULTIWAVELET
        self.transform = self._build_transform().tocsc()
        self.support_start, self.support_count = self._build_supports()

    # -- positions -----------------------------------------------------------
    def position(self, codes):
        codes = np.asarray(codes, dtype=np.int64)
        pos = np.searchsorted(self.codes, codes)
        pos = np.minimum(pos, self.n - 1)
        if np.any(self.codes[pos] != codes):
            raise KeyError("index outside the basis")
        return pos

    def contains(self, codes):
        codes = np.asarray(codes, dtype=np.int64)
        pos = np.minimum(np.searchsorted(self.codes, codes), self.n - 1)
        return self.codes[pos] == codes

    def index(self, pos):
        return index_from_code(self.codes[pos])

    def level_slice(self, level):
        return slice(self.level_offsets[level], self.level_offsets[level + 1])

    @property
    def native_size(self):
        return self.transform.shape[0]

    # -- fine representation --------------------------------------------------
    def _build_transform(self):
        if self.discontinuous:
            return self._multiwavelet_transform()
        bnd = self.spec.boundary
        blocks = []
        for j in range(self.max_level + 1):
            block = sp.csr_matrix(_hat_level(self.spec, j))
            n = 2 ** (j + COARSE_MESH_EXPONENT)
            while n < self.cells:
                block = _prolongation(bnd, n) @ block
                n *= 2
            blocks.append(block)
        full = sp.hstack(blocks).tocsr()
        if bnd is Boundary.DIRICHLET:
            full = full[1:-1]
        full.eliminate_zeros()
        return full

    def _multiwavelet_transform(self):
        grid = np.linspace(0.0, 1.0, self.cells + 1)
        mids = 0.5 * (grid[:-1] + grid[1:])
        cols = []
        for j, k in zip(self.levels, self.translations):
            left = _mw_eval(int(j), int(k), grid[:-1], side=mids)
            right = _mw_eval(int(j), int(k), grid[1:], side=mids)
            cols.append(np.column_stack([left, right]).ravel())
        mat = sp.csr_matrix(np.column_stack(cols))
        mat.eliminate_zeros()
        return mat

    def full_nodal(self):
        """Map native values to node values including boundary nodes (continuous family)."""
        size = self.native_size
        if self.spec.boundary is Boundary.DIRICHLET:
            return sp.vstack([sp.csr_matrix((1, size)), sp.identity(size, format="csr"), sp.csr_matrix((1, size))]).tocsr()
        if self.periodic:
            wrap = sp.csr_matrix(([1.0], ([0], [0])), shape=(1, size))
            return sp.vstack([sp.identity(size, format="csr"), wrap]).tocsr()
        return sp.identity(size, format="csr")

    @functools.lru_cache(maxsize=None)
    def to_dg(self, exponent):
        """Native values -> (left, right) element values on the mesh 2^-exponent."""
        if exponent < self.mesh_exponent:
            raise ValueError("target mesh must be at least as fine as the native mesh")
        factor = 2 ** (exponent - self.mesh_exponent)
        cells = 2**exponent
        elem = np.arange(cells)
        coarse = elem // factor
        t0 = (elem % factor) / factor
        t1 = t0 + 1.0 / factor
        if self.discontinuous:
            rows = np.concatenate([2 * elem, 2 * elem, 2 * elem + 1, 2 * elem + 1])
            cols = np.concatenate([2 * coarse, 2 * coarse + 1, 2 * coarse, 2 * coarse + 1])
            vals = np.concatenate([1 - t0, t0, 1 - t1, t1])
            return sp.csr_matrix((vals, (rows, cols)), shape=(2 * cells, self.native_size))
        rows = np.concatenate([2 * elem, 2 * elem, 2 * elem + 1, 2 * elem + 1])
        cols = np.concatenate([coarse, coarse + 1, coarse, coarse + 1])
        vals = np.concatenate([1 - t0, t0, 1 - t1, t1])
        interp = sp.csr_matrix((vals, (rows, cols)), shape=(2 * cells, self.cells + 1))
        return (interp @ self.full_nodal()).tocsr()

    @functools.cached_property
    def dense_transform(self):
        return self.transform.toarray()

    # -- supports ------------------------------------------------------------
    def _build_supports(self):
        start = np.empty(self.n, dtype=np.int64)
        count = np.empty(self.n, dtype=np.int64)
        for j in range(self.max_level + 1):
            sl = self.level_slice(j)
            factor = 2 ** (self.mesh_exponent - max(_mesh_exponent(self.spec, j), 0))
            for p, k in zip(range(sl.start, sl.stop), self.translations[sl]):
                if self.discontinuous:
                    a, width, _, _ = _mw_pieces(j, int(k))
                    s, c = int(round(a * self.cells)), int(round(width * self.cells))
                else:
                    s, c = _hat_support_cells(self.spec, j, int(k))
                    s, c = s * factor, c * factor
                start[p], count[p] = s, c
        return start, count

    def support_cells(self, pos):
        return int(self.support_start[pos]), int(self.support_count[pos])

    def _overlap(self, s1, c1, s2, c2):
        ov = np.maximum(0, np.minimum(s1 + c1, s2 + c2) - np.maximum(s1, s2))
        if self.periodic:
            for shift in (-self.cells, self.cells):
                ov = ov + np.maximum(0, np.minimum(s1 + c1, s2 + shift + c2) - np.maximum(s1, s2 + shift))
        return ov

    def _coarser_candidates(self, level, window=6):
        """Overlapping level-1 functions of every function on ``level``."""
        child = self.level_slice(level)
        parent = self.level_slice(level - 1)
        p_start = self.support_start[parent]
        p_count = self.support_count[parent]
        p_center2 = 2 * p_start + p_count
        c_start = self.support_start[child][:, None]
        c_count = self.support_count[child][:, None]
        c_center2 = 2 * c_start + c_count
        n_par = parent.stop - parent.start
        pivot = np.searchsorted(p_center2, c_center2[:, 0])
        offs = np.arange(-window, window + 1)
        cand = pivot[:, None] + offs[None, :]
        if self.periodic:
            cand %= n_par
        valid = (cand >= 0) & (cand < n_par)
        cand = np.clip(cand, 0, n_par - 1)
        ov = self._overlap(c_start, c_count, p_start[cand], p_count[cand]) * valid
        dist = np.abs(c_center2 - p_center2[cand])
        if self.periodic:
            dist = np.minimum(dist, 2 * self.cells - dist)
        return cand + parent.start, ov, dist

    @functools.cached_property
    def parent_structure(self):
        """(canonical parent matrix, overlap-children matrix), both sparse 0/1.

        ``parents[p, c] = 1`` when p is a canonical parent of c; the canonical
        parents of a function are a greedy minimal cover of its support by
        coarser-level functions (largest overlap first, then closest centre,
        then translation).  ``children[c, p] = 1`` when c lies one level above
        p and their supports overlap.
        """
        p_rows, p_cols, c_rows, c_cols = [], [], [], []
        for level in range(1, self.max_level + 1):
            cand, ov, dist = self._coarser_candidates(level)
            first = self.level_offsets[level]
            for i in range(cand.shape[0]):
                child = first + i
                seen = {}
                for p, o, d in zip(cand[i], ov[i], dist[i]):
                    if o > 0 and p not in seen:
                        seen[int(p)] = (int(o), int(d))
                for p in seen:
                    c_rows.append(child)
                    c_cols.append(p)
                order = sorted(seen, key=lambda p: (-seen[p][0], seen[p][1], p))
                chosen = []
                for p in order:
                    chosen.append(p)
                    if self._covered(child, chosen):
                        break
                else:
                    raise RuntimeError("support of a function is not covered by the coarser level")
                p_rows += chosen
                p_cols += [child] * len(chosen)
        parents = sp.csr_matrix((np.ones(len(p_rows)), (p_rows, p_cols)), shape=(self.n, self.n))
        children = sp.csr_matrix((np.ones(len(c_rows)), (c_rows, c_cols)), shape=(self.n, self.n))
        return parents, children

    def _covered(self, target, cover):
        s, c = self.support_cells(target)
        pieces = []
        for p in cover:
            a, n = self.support_cells(p)
            a -= s
            if self.periodic:
                a %= self.cells
                pieces.append((a, a + n))
                pieces.append((a - self.cells, a - self.cells + n))
            else:
                pieces.append((a, a + n))
        reach = 0
        for a, b in sorted(pieces):
            if a > reach:
                break
            reach = max(reach, b)
        return reach >= c

    def coverage_ok(self, mask):
        """Tree check: each selected level-j>0 support is covered by selected level-(j-1) supports."""
        mask = np.asarray(mask, dtype=bool)
        for level in range(1, self.max_level + 1):
            sl = self.level_slice(level)
            sel = np.flatnonzero(mask[sl]) + sl.start
            if len(sel) == 0:
                continue
            coarse = self.level_slice(level - 1)
            covered = np.zeros(self.cells + 1, dtype=np.int64)
            for p in np.flatnonzero(mask[coarse]) + coarse.start:
                s, c = self.support_cells(p)
                if self.periodic:
                    s %= self.cells
                end = s + c
                if self.periodic and end > self.cells:
                    covered[s] += 1
                    covered[self.cells] -= 1
                    covered[0] += 1
                    covered[end - self.cells] -= 1
                else:
                    covered[s] += 1
                    covered[end] -= 1
            bare = np.concatenate([[0], np.cumsum(np.cumsum(covered)[:-1] == 0)])
            for p in sel:
                s, c = self.support_cells(p)
                if self.periodic:
                    s %= self.cells
                    end = s + c
                    if end > self.cells:
                        gaps = bare[self.cells] - bare[s] + bare[end - self.cells]
                    else:
                        gaps = bare[end] - bare[s]
                else:
                    gaps = bare[s + c] - bare[s]
                if gaps:
                    return False
        return True


@functools.lru_cache(maxsize=64)
def basis_1d(spec, max_level):
    return Basis1D(spec, max_level)


# ---------------------------------------------------------------------------
# Native one-dimensional Gramians (shared with the operator module)


def native_mass(basis):
    dg = basis.to_dg(basis.mesh_exponent)
    h = 1.0 / basis.cells
    block = h * np.array([[1 / 3, 1 / 6], [1 / 6, 1 / 3]])
    mass = sp.kron(sp.identity(basis.cells), block, format="csr")
    return (dg.T @ mass @ dg).tocsr()


def native_stiffness(basis):
    if basis.discontinuous:
        raise ValueError("discontinuous functions carry no H1 seminorm")
    dg = basis.to_dg(basis.mesh_exponent)
    h = 1.0 / basis.cells
    block = np.array([[1.0, -1.0], [-1.0, 1.0]]) / h
    stiff = sp.kron(sp.identity(basis.cells), block, format="csr")
    return (dg.T @ stiff @ dg).tocsr()


def gramian(spec, max_level):
    """Gramian of the normalised basis of ``spec`` in its natural norm (L2 or H1)."""
    basis = basis_1d(spec, max_level)
    if spec.sobolev_scale == 0:
        native = native_mass(basis)
    elif spec.sobolev_scale == 1:
        native = native_stiffness(basis)
        if spec.boundary is not Boundary.DIRICHLET:
            native = native + native_mass(basis)
    else:
        raise NotImplementedError("only L2 (s=0) and H1 (s=1) normalisations are available")
    scale = sobolev_factor(spec, basis.levels)
    t = basis.transform
    gram = (t.T @ (native @ t)).toarray()
    return scale[:, None] * gram * scale[None, :]


def extreme_eigenvalues(matvec, n, *, dense=None, tol=1e-10, maxiter=5000, solve=None):
    """Smallest and largest eigenvalue of a symmetric positive definite operator.

    ``dense`` short-cuts to a full eigen-decomposition; otherwise Lanczos is
    used for the top and (with ``solve``, an inverse action) for the bottom
    of the spectrum.
    """
    if dense is not None:
        eig = sla.eigvalsh(dense)
        return float(eig[0]), float(eig[-1])
    from scipy.sparse.linalg import LinearOperator

    op = LinearOperator((n, n), matvec=matvec, dtype=float)
    v0 = np.ones(n)
    try:
        top = eigsh(op, k=1, which="LA", tol=tol, maxiter=maxiter, v0=v0, return_eigenvectors=False)[0]
        if solve is not None:
            inv = LinearOperator((n, n), matvec=solve, dtype=float)
            bottom = 1.0 / eigsh(inv, k=1, which="LA", tol=tol, maxiter=maxiter, v0=v0, return_eigenvectors=False)[0]
        else:
            bottom = eigsh(op, k=1, which="SA", tol=tol, maxiter=maxiter, v0=v0, return_eigenvectors=False)[0]
    except ArpackNoConvergence as err:
        raise RieszEstimationError("eigenvalue iteration did not converge", err.eigenvalues) from err
    return float(bottom), float(top)


def riesz_constants(spec, max_level, *, dual=False):
    """Riesz constants (c, C) with c|v|^2 <= ||sum v psi||^2 <= C|v|^2 on levels <= max_level.

    For ``dual=True`` the constants refer to the dual system, whose Gramian is
    the inverse of the primal one.
    """
    if max_level < 1:
        raise ValueError("max_level must be at least 1")
    gram = gramian(spec, max_level)
    if gram.shape[0] <= 1100:
        low, high = extreme_eigenvalues(None, gram.shape[0], dense=gram)
    else:
        chol = sla.cho_factor(gram)
        low, high = extreme_eigenvalues(
            lambda v: gram @ v, gram.shape[0], solve=lambda v: sla.cho_solve(chol, v)
        )
    if dual:
        return 1.0 / high, 1.0 / low
    return low, high


# ---------------------------------------------------------------------------
# Dual functions (used only in diagnostics)


def _two_scale(spec, level):
    """Square matrix [P | Q] expressing level-1 hats and level wavelets in level hats."""
    n_coarse = 2 ** (level - 1 + COARSE_MESH_EXPONENT)
    native = _native_rows(spec, 2 * n_coarse)
    p_mat = native @ _prolongation(spec.boundary, n_coarse) @ _native_rows(spec, n_coarse).T
    q_mat = native @ sp.csr_matrix(_hat_level(spec, level))
    return sp.hstack([p_mat, q_mat]).toarray()


def _native_rows(spec, cells):
    size = _full_size(spec.boundary, cells)
    if spec.boundary is Boundary.DIRICHLET:
        return sp.identity(size, format="csr")[1:-1]
    return sp.identity(size, format="csr")


def _dual_refinement(spec, level):
    """Dual refinement: coarse dual hats in terms of fine dual hats."""
    two_scale = _two_scale(spec, level)
    inv_t = np.linalg.inv(two_scale).T
    n_coarse = two_scale.shape[1] - level_count(spec, level)
    return inv_t[:, :n_coarse], inv_t[:, n_coarse:]


def dual_coefficients(spec, level, extra_levels=6):
    """Coefficients of all dual functions up to ``level`` in the dual hats of level+extra_levels.

    The dual hats of a level are the functions biorthogonal to the (unnormalised)
    primal hats of that level; the returned matrix maps basis position to
    coefficients, so the pairing with primal functions reduces to dot
    products with nodal values.
    """
    if spec.family is Family.MULTIWAVELET:
        raise ValueError("multiwavelets are self-dual")
    basis = basis_1d(spec, level)
    dense = basis.dense_transform
    # duals on the level's own mesh: rows of T^-1
    coeffs = np.linalg.inv(dense).T
    for extra in range(1, extra_levels + 1):
        p_dual, _ = _dual_refinement(spec, level + extra)
        coeffs = p_dual @ coeffs
    return coeffs


def eval_dual(spec, idx, x, extra_levels=6):
    """Cascade approximation of a dual function on the mesh 2^-(level+extra+2)."""
    idx = check_index(spec, idx)
    if spec.family is Family.MULTIWAVELET:
        return eval_primal(spec, idx, x)
    basis = basis_1d(spec, idx.level)
    coeffs = dual_coefficients(spec, idx.level, extra_levels)[:, basis.position(idx.code)]
    fine = basis_1d(spec, idx.level + extra_levels)
    nodal = fine.full_nodal() @ coeffs * fine.cells
    # dual hats are approximated by area-normalised hats
    grid = np.linspace(0.0, 1.0, fine.cells + 1)
    return np.interp(np.asarray(x, dtype=float), grid, nodal) / sobolev_factor(spec, idx.level)


def dual_pairing_matrix(spec, level, extra_levels=6):
    """Matrix of pairings <psi_a, dual psi_b> for all functions up to ``level``."""
    if spec.family is Family.MULTIWAVELET:
        basis = basis_1d(spec, level)
        return (basis.transform.T @ native_mass(basis) @ basis.transform).toarray()
    basis = basis_1d(spec, level)
    fine = basis_1d(spec, level + extra_levels)
    primal = fine.dense_transform[:, : basis.n]
    dual = dual_coefficients(spec, level, extra_levels)
    return primal.T @ dual
