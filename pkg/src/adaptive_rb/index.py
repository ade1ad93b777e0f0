"""Tensor-product wavelet indices, finite index sets and sparse coefficient vectors.

Indices are stored as integer codes ``(level << 32) | translation`` per
direction, so sets and vectors are sorted integer arrays of shape (m, dim)
ordered lexicographically by direction, level and translation.

A ``TensorBasis`` fixes a level cap per direction; inside it, sets are also
handled as boolean masks over the full product of one-dimensional bases,
which is what the solvers use internally.
"""
from __future__ import annotations

import functools
import json
import struct
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .wavelet import Kind, WaveletIndex1D, basis_1d, check_index, decode, encode, index_from_code

class TensorIndex(tuple):
    """Fixed-length tuple of one-dimensional indices."""

    __slots__ = ()

    def __new__(cls, components):
        return super().__new__(cls, tuple(WaveletIndex1D(*c) for c in components))

    @property
    def dim(self):
        return len(self)

    @property
    def code(self):
        return tuple(int(c.code) for c in self)

    @classmethod
    def from_code(cls, codes):
        return cls(index_from_code(c) for c in codes)

    def __repr__(self):
        return "TensorIndex(" + ", ".join(f"({c.level},{c.translation})" for c in self) + ")"


def _as_codes(indices, dim):
    rows = [TensorIndex(i).code for i in indices]
    if not rows:
        return np.empty((0, dim), dtype=np.int64)
    arr = np.array(rows, dtype=np.int64)
    if arr.shape[1] != dim:
        raise ValueError("index dimension mismatch")
    return arr


def _lexsort(codes):
    if codes.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    return np.lexsort(codes.T[::-1])


def _sorted_unique(codes):
    order = _lexsort(codes)
    codes = codes[order]
    if len(codes) > 1:
        keep = np.concatenate([[True], np.any(codes[1:] != codes[:-1], axis=1)])
        return codes[keep], order[keep]
    return codes, order


def _row_keys(codes):
    return np.ascontiguousarray(codes).view([("", np.int64)] * codes.shape[1]).ravel()


class IndexSet:
    """Finite, duplicate-free set of tensor indices in lexicographic order."""

    __slots__ = ("_codes",)

    def __init__(self, codes=None, dim=2):
        if codes is None:
            codes = np.empty((0, dim), dtype=np.int64)
        codes = np.asarray(codes, dtype=np.int64).reshape(-1, dim if np.size(codes) == 0 else np.shape(codes)[-1])
        self._codes, _ = _sorted_unique(codes)
        self._codes.flags.writeable = False

    @classmethod
    def from_indices(cls, indices, dim=None):
        indices = list(indices)
        if dim is None:
            if not indices:
                raise ValueError("dimension required for an empty set")
            dim = len(indices[0])
        return cls(_as_codes(indices, dim), dim)

    @property
    def codes(self):
        return self._codes

    @property
    def dim(self):
        return self._codes.shape[1]

    def __len__(self):
        return self._codes.shape[0]

    def __iter__(self):
        for row in self._codes:
            yield TensorIndex.from_code(row)

    def _locate(self, codes):
        keys = _row_keys(self._codes)
        probe = _row_keys(np.asarray(codes, dtype=np.int64).reshape(-1, self.dim))
        pos = np.searchsorted(keys, probe)
        pos = np.minimum(pos, max(len(keys) - 1, 0))
        found = (len(keys) > 0) & (keys[pos] == probe) if len(keys) else np.zeros(len(probe), bool)
        return pos, found

    def __contains__(self, idx):
        _, found = self._locate(np.array(TensorIndex(idx).code))
        return bool(found[0])

    def contains_codes(self, codes):
        return self._locate(codes)[1]

    def __eq__(self, other):
        return isinstance(other, IndexSet) and np.array_equal(self._codes, other._codes)

    def __hash__(self):
        return hash(self._codes.tobytes())

    def __or__(self, other):
        return IndexSet(np.vstack([self._codes, other.codes]), self.dim)

    def __and__(self, other):
        return IndexSet(self._codes[other.contains_codes(self._codes)], self.dim)

    def __sub__(self, other):
        return IndexSet(self._codes[~other.contains_codes(self._codes)], self.dim)

    def __le__(self, other):
        return bool(np.all(other.contains_codes(self._codes)))

    union, intersection, difference, issubset = __or__, __and__, __sub__, __le__

    def max_levels(self):
        if len(self) == 0:
            return (0,) * self.dim
        return tuple(int(v) for v in decode(self._codes)[0].max(axis=0))

    def __repr__(self):
        return f"IndexSet(n={len(self)}, dim={self.dim})"


class CoeffVector:
    """Sparse real vector indexed by tensor indices."""

    __slots__ = ("_codes", "_values")

    def __init__(self, codes=None, values=None, dim=2):
        if codes is None:
            codes = np.empty((0, dim), dtype=np.int64)
            values = np.empty(0)
        codes = np.asarray(codes, dtype=np.int64)
        codes = codes.reshape(-1, dim if codes.size == 0 else codes.shape[-1])
        values = np.asarray(values, dtype=float).ravel()
        if len(values) != len(codes):
            raise ValueError("codes and values differ in length")
        sorted_codes, order = _sorted_unique(codes)
        if len(sorted_codes) != len(codes):
            raise ValueError("duplicate indices")
        self._codes = sorted_codes
        self._values = values[order]
        self._codes.flags.writeable = False

    @classmethod
    def from_dict(cls, mapping, dim=None):
        items = list(mapping.items())
        if dim is None:
            if not items:
                raise ValueError("dimension required for an empty vector")
            dim = len(items[0][0])
        codes = _as_codes([k for k, _ in items], dim)
        return cls(codes, [v for _, v in items], dim)

    @classmethod
    def zeros(cls, dim=2):
        return cls(dim=dim)

    @property
    def codes(self):
        return self._codes

    @property
    def values(self):
        return self._values

    @property
    def dim(self):
        return self._codes.shape[1]

    def __len__(self):
        return len(self._values)

    def items(self):
        for row, val in zip(self._codes, self._values):
            yield TensorIndex.from_code(row), float(val)

    def to_dict(self):
        return dict(self.items())

    def support(self):
        return IndexSet(self._codes[self._values != 0], self.dim)

    def index_set(self):
        return IndexSet(self._codes, self.dim)

    def __getitem__(self, idx):
        pos, found = IndexSet(self._codes, self.dim)._locate(np.array(TensorIndex(idx).code))
        return float(self._values[pos[0]]) if found[0] else 0.0

    def get_codes(self, codes):
        pos, found = IndexSet(self._codes, self.dim)._locate(codes)
        out = np.zeros(len(found))
        out[found] = self._values[pos[found]]
        return out

    def compact(self):
        keep = self._values != 0
        return CoeffVector(self._codes[keep], self._values[keep], self.dim)

    def restrict(self, index_set):
        keep = index_set.contains_codes(self._codes)
        return CoeffVector(self._codes[keep], self._values[keep], self.dim)

    def norm(self):
        return float(np.linalg.norm(self._values))

    def _combine(self, other, sign):
        both = IndexSet(np.vstack([self._codes, other.codes]), self.dim)
        vals = self.get_codes(both.codes) + sign * other.get_codes(both.codes)
        return CoeffVector(both.codes, vals, self.dim)

    def __add__(self, other):
        return self._combine(other, 1.0)

    def __sub__(self, other):
        return self._combine(other, -1.0)

    def __mul__(self, scalar):
        return CoeffVector(self._codes, self._values * float(scalar), self.dim)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def dot(self, other):
        return float(self._values @ other.get_codes(self._codes))

    def allclose(self, other, atol=1e-12):
        return bool(np.all(np.abs((self - other).values) <= atol))

    # -- serialisation -------------------------------------------------------
    def record_dtype(self):
        return record_dtype(self.dim)

    def to_bytes(self):
        """Little-endian block: u4 dim, u8 count, then (i4 level, i8 translation, u1 kind) per direction and f8 value."""
        rec = np.empty(len(self), dtype=record_dtype(self.dim))
        levels, trans = decode(self._codes)
        for d in range(self.dim):
            rec[f"level{d}"] = levels[:, d]
            rec[f"translation{d}"] = trans[:, d]
            rec[f"kind{d}"] = levels[:, d] > 0
        rec["value"] = self._values
        return struct.pack("<IQ", self.dim, len(self)) + rec.tobytes()

    @classmethod
    def from_bytes(cls, data):
        dim, count = struct.unpack_from("<IQ", data, 0)
        rec = np.frombuffer(data, dtype=record_dtype(dim), count=count, offset=12)
        codes = np.empty((count, dim), dtype=np.int64)
        for d in range(dim):
            codes[:, d] = encode(rec[f"level{d}"].astype(np.int64), rec[f"translation{d}"].astype(np.int64))
        return cls(codes, rec["value"].astype(float), dim)

    def byte_size(self):
        return 12 + len(self) * record_dtype(self.dim).itemsize

    def to_json(self):
        entries = [
            [[[c.level, c.translation, c.kind.value] for c in idx], val] for idx, val in self.items()
        ]
        return json.dumps({"dim": self.dim, "entries": entries})

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        mapping = {}
        for comps, val in data["entries"]:
            mapping[TensorIndex(WaveletIndex1D(j, k, Kind(kind)) for j, k, kind in comps)] = val
        return cls.from_dict(mapping, data["dim"])

    def __repr__(self):
        return f"CoeffVector(n={len(self)}, dim={self.dim}, norm={self.norm():.3e})"


@functools.lru_cache(maxsize=None)
def record_dtype(dim):
    fields = []
    for d in range(dim):
        fields += [(f"level{d}", "<i4"), (f"translation{d}", "<i8"), (f"kind{d}", "u1")]
    fields.append(("value", "<f8"))
    return np.dtype(fields)


def read_coeff_vector(stream):
    head = stream.read(12)
    dim, count = struct.unpack("<IQ", head)
    body = stream.read(count * record_dtype(dim).itemsize)
    return CoeffVector.from_bytes(head + body)


# ---------------------------------------------------------------------------
# Tensor bases with a level cap


class TensorBasis:
    """Product of one-dimensional bases, each complete up to its level cap."""

    def __init__(self, specs, max_levels):
        if isinstance(max_levels, int):
            max_levels = (max_levels,) * len(specs)
        self.specs = tuple(specs)
        self.max_levels = tuple(int(v) for v in max_levels)
        self.bases = tuple(basis_1d(s, L) for s, L in zip(self.specs, self.max_levels))
        self.shape = tuple(b.n for b in self.bases)
        self.dim = len(self.bases)
        self.size = int(np.prod(self.shape))

    def __eq__(self, other):
        return isinstance(other, TensorBasis) and (self.specs, self.max_levels) == (other.specs, other.max_levels)

    def __hash__(self):
        return hash((self.specs, self.max_levels))

    # -- conversions ---------------------------------------------------------
    def positions(self, codes):
        codes = np.asarray(codes, dtype=np.int64).reshape(-1, self.dim)
        return tuple(b.position(codes[:, d]) for d, b in enumerate(self.bases))

    def contains(self, codes):
        codes = np.asarray(codes, dtype=np.int64).reshape(-1, self.dim)
        ok = np.ones(len(codes), dtype=bool)
        for d, b in enumerate(self.bases):
            ok &= b.contains(codes[:, d])
        return ok

    def mask(self, index_set):
        out = np.zeros(self.shape, dtype=bool)
        if len(index_set):
            out[self.positions(index_set.codes)] = True
        return out

    def codes_at(self, flat_or_tuple):
        pos = flat_or_tuple if isinstance(flat_or_tuple, tuple) else np.unravel_index(flat_or_tuple, self.shape)
        return np.column_stack([b.codes[p] for b, p in zip(self.bases, pos)]).astype(np.int64)

    def index_set(self, mask):
        pos = np.nonzero(mask)
        return IndexSet(self.codes_at(pos), self.dim)

    def dense(self, vector):
        out = np.zeros(self.shape)
        if len(vector):
            inside = self.contains(vector.codes)
            if not np.all(inside):
                raise KeyError("vector has entries beyond the level cap")
            out[self.positions(vector.codes)] = vector.values
        return out

    def coeff_vector(self, array, mask=None):
        sel = np.nonzero(array) if mask is None else np.nonzero(mask)
        return CoeffVector(self.codes_at(sel), np.asarray(array)[sel], self.dim)

    def full_mask(self):
        return np.ones(self.shape, dtype=bool)

    def coarsest_mask(self):
        out = np.zeros(self.shape, dtype=bool)
        out[tuple(b.level_slice(0) for b in self.bases)] = True
        return out

    def level_grid(self):
        return np.meshgrid(*[b.levels for b in self.bases], indexing="ij")

    def support_centers(self, mask):
        """Centres of the supports of the masked functions, one row per index in storage order."""
        pos = np.nonzero(mask)
        cols = []
        for b, p in zip(self.bases, pos):
            centre = (b.support_start[p] + 0.5 * b.support_count[p]) / b.cells
            cols.append(np.mod(centre, 1.0) if b.periodic else centre)
        return np.column_stack(cols) if cols else np.zeros((0, self.dim))

    # -- tree structure ------------------------------------------------------
    def _along(self, axis, fn, mask):
        moved = np.moveaxis(mask, axis, 0)
        flat = moved.reshape(moved.shape[0], -1)
        out = fn(flat)
        return np.moveaxis(out.reshape(moved.shape), 0, axis)

    def complete(self, mask):
        """Smallest superset closed under canonical parents in every direction."""
        mask = np.array(mask, dtype=bool)
        parents = [b.parent_structure[0] for b in self.bases]
        while True:
            grown = mask.copy()
            for axis, par in enumerate(parents):
                grown |= self._along(axis, lambda flat: (par @ flat.astype(np.float64)) > 0, mask)
            if np.array_equal(grown, mask):
                return mask
            mask = grown

    def expand(self, mask, layers=1):
        """Add overlapping children in every direction, then complete."""
        mask = np.array(mask, dtype=bool)
        children = [b.parent_structure[1] for b in self.bases]
        for _ in range(layers):
            grown = mask.copy()
            for axis, ch in enumerate(children):
                grown |= self._along(axis, lambda flat: (ch @ flat.astype(np.float64)) > 0, mask)
            mask = grown
        return self.complete(mask)

    def is_multitree(self, mask):
        mask = np.asarray(mask, dtype=bool)
        for axis, b in enumerate(self.bases):
            bad = self._along(axis, lambda flat: tree_violations(b, flat), mask)
            if bad.any():
                return False
        return True

    def touches_cap(self, mask):
        """True when the set holds an index on a capped level in some direction."""
        for axis, b in enumerate(self.bases):
            top = np.moveaxis(mask, axis, 0)[b.level_slice(b.max_level)]
            if top.any():
                return True
        return False


def _incidence(basis):
    cached = getattr(basis, "_incidence_cache", None)
    if cached is not None:
        return cached
    rows, cols = [], []
    for p in range(basis.n):
        s, c = basis.support_cells(p)
        cells = np.arange(s, s + c)
        if basis.periodic:
            cells %= basis.cells
        rows.append(np.full(len(cells), p))
        cols.append(cells)
    inc = sp.csr_matrix(
        (np.ones(sum(len(r) for r in rows)), (np.concatenate(rows), np.concatenate(cols))),
        shape=(basis.n, basis.cells),
    )
    basis._incidence_cache = inc
    return inc


def tree_violations(basis, flat):
    """Boolean array (like ``flat``) marking members not covered by the coarser level."""
    flat = np.asarray(flat, dtype=bool)
    inc = _incidence(basis)
    bad = np.zeros_like(flat)
    for level in range(1, basis.max_level + 1):
        coarse = basis.level_slice(level - 1)
        fine = basis.level_slice(level)
        if not flat[fine].any():
            continue
        covered = (inc[coarse].T @ flat[coarse].astype(np.float64)) > 0
        uncovered = inc[fine] @ (~covered).astype(np.float64)
        bad[fine] = flat[fine] & (uncovered > 0)
    return bad


# ---------------------------------------------------------------------------
# Set operations over arbitrary index sets


def _basis_for(spec, levels):
    return basis_1d(spec, max(int(np.max(levels)) if len(levels) else 0, 0))


def is_tree(indices, spec):
    """Coverage tree test for a list of one-dimensional indices."""
    indices = [check_index(spec, i) for i in indices]
    if not indices:
        return True
    basis = _basis_for(spec, [i.level for i in indices])
    flat = np.zeros((basis.n, 1), dtype=bool)
    flat[basis.position([i.code for i in indices]), 0] = True
    return not tree_violations(basis, flat).any()


def tree_completion(indices, spec):
    indices = [check_index(spec, i) for i in indices]
    if not indices:
        return []
    basis = _basis_for(spec, [i.level for i in indices])
    mask = np.zeros(basis.n, dtype=bool)
    mask[basis.position([i.code for i in indices])] = True
    par = basis.parent_structure[0]
    while True:
        grown = mask | ((par @ mask.astype(np.float64)) > 0)
        if np.array_equal(grown, mask):
            break
        mask = grown
    return [basis.index(p) for p in np.flatnonzero(mask)]


def _universe_for(index_set, specs):
    return TensorBasis(specs, index_set.max_levels())


def is_multitree(index_set, specs):
    if len(index_set) == 0:
        return True
    universe = _universe_for(index_set, specs)
    return universe.is_multitree(universe.mask(index_set))


def multitree_completion(index_set, specs):
    if len(index_set) == 0:
        return index_set
    universe = _universe_for(index_set, specs)
    return universe.index_set(universe.complete(universe.mask(index_set)))


# ---------------------------------------------------------------------------
# Nonlinear approximation diagnostics


def best_n_term(v, n_terms):
    if n_terms < 0:
        raise ValueError("N must be non-negative")
    # storage order is lexicographic, so a stable sort breaks ties by index
    order = np.argsort(-np.abs(v.values), kind="stable")[:n_terms]
    return CoeffVector(v.codes[order], v.values[order], v.dim)


class UndefinedRateError(ValueError):
    pass


class RateEstimate(NamedTuple):
    rate: float
    finite_support: bool
    points: int


def approx_rate_estimate(v):
    """Algebraic rate s of the best N-term error ||v - v_N|| ~ N^-s (dyadic N)."""
    mags = np.sort(np.abs(np.asarray(v.values if isinstance(v, CoeffVector) else v, dtype=float)))[::-1]
    mags = mags[mags > 0]
    if len(mags) < 16:
        raise ValueError("at least 16 nonzero coefficients are required")
    if mags[0] - mags[-1] <= 1e-12 * mags[0]:
        raise UndefinedRateError("all coefficients have equal modulus")
    tail = np.sqrt(np.cumsum((mags**2)[::-1])[::-1])
    dyadic = 2 ** np.arange(int(np.log2(len(mags) - 1)) + 1)
    errors = tail[dyadic]
    fit = dyadic <= len(mags) / 4
    if fit.sum() < 2:
        fit[:2] = True
    slope = np.polyfit(np.log(dyadic[fit]), np.log(errors[fit]), 1)[0]
    rate = -float(slope)
    local = -np.diff(np.log(errors)) / np.diff(np.log(dyadic))
    if local[-1] > 2 * max(rate, 0) + 1:
        # the tail collapses faster than any algebraic rate: support is exhausted
        return RateEstimate(float("inf"), True, int(fit.sum()))
    return RateEstimate(rate, False, int(fit.sum()))
