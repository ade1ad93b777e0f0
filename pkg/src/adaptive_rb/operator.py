"""Parameter-affine bilinear forms and functionals in wavelet coordinates.

A bilinear form component is a sum of separable terms; each term is a tensor
product of one-dimensional forms (mass, stiffness, advection ``w u' v``)
restricted to an interval and weighted by a polynomial.  Entries between
tensor wavelets are products of one-dimensional integrals, which are
computed exactly with Gauss rules on the common breakpoint mesh.

Coordinates are always the scaled ones: a trial coefficient array ``x``
represents ``sum x_l D_l psi_l`` with the space's diagonal scaling ``D``,
and test-side quantities are multiplied by the test scaling.
"""
from __future__ import annotations

import ast
import functools
import math
import re
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .index import CoeffVector, IndexSet, TensorBasis
from .wavelet import Boundary

FORMS = ("mass", "stiffness", "advection", "dual_mass")
DENSE_LIMIT = 4_000_000


class DomainError(ValueError):
    """Parameter outside the declared box."""


class ContractError(ValueError):
    """Input violates a documented precondition."""


# ---------------------------------------------------------------------------
# Form descriptions


@dataclass(frozen=True)
class Factor1D:
    form: str
    weight: tuple = (1.0,)
    interval: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.form not in FORMS:
            raise ValueError(f"unknown form {self.form!r}")
        object.__setattr__(self, "weight", tuple(float(w) for w in self.weight))
        object.__setattr__(self, "interval", tuple(float(v) for v in self.interval))

    def to_dict(self):
        return {"form": self.form, "weight": list(self.weight), "interval": list(self.interval)}

    @classmethod
    def from_dict(cls, data):
        return cls(data["form"], tuple(data.get("weight", (1.0,))), tuple(data.get("interval", (0.0, 1.0))))


@dataclass(frozen=True)
class SeparableTerm:
    factors: tuple
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))

    def to_dict(self):
        return {"factors": [f.to_dict() for f in self.factors], "scale": self.scale}

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(Factor1D.from_dict(f) for f in data["factors"]), data.get("scale", 1.0))


@dataclass(frozen=True)
class OperatorComponent:
    terms: tuple
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if not self.terms:
            raise ValueError("a component needs at least one term")
        if len({len(t.factors) for t in self.terms}) != 1:
            raise ValueError("all terms of a component must share the dimension")

    @property
    def dim(self):
        return len(self.terms[0].factors)

    def to_dict(self):
        return {"name": self.name, "terms": [t.to_dict() for t in self.terms]}

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(SeparableTerm.from_dict(t) for t in data["terms"]), data.get("name", ""))


@dataclass(frozen=True)
class Load1D:
    """One-dimensional source factor: ``w(x)`` or ``w(x) cos(2 pi f x + phase)`` on an interval."""

    kind: str = "polynomial"
    weight: tuple = (1.0,)
    interval: tuple = (0.0, 1.0)
    frequency: float = 1.0
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in ("polynomial", "cosine"):
            raise ValueError(f"unknown load kind {self.kind!r}")
        object.__setattr__(self, "weight", tuple(float(w) for w in self.weight))
        object.__setattr__(self, "interval", tuple(float(v) for v in self.interval))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        vals = np.polynomial.polynomial.polyval(x, self.weight)
        if self.kind == "cosine":
            vals = vals * np.cos(2 * np.pi * self.frequency * x + self.phase)
        a, b = self.interval
        return np.where((x >= a) & (x <= b), vals, 0.0)

    def to_dict(self):
        return {
            "kind": self.kind,
            "weight": list(self.weight),
            "interval": list(self.interval),
            "frequency": self.frequency,
            "phase": self.phase,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            data.get("kind", "polynomial"),
            tuple(data.get("weight", (1.0,))),
            tuple(data.get("interval", (0.0, 1.0))),
            data.get("frequency", 1.0),
            data.get("phase", 0.0),
        )


@dataclass(frozen=True)
class FunctionalComponent:
    factors: tuple
    scale: float = 1.0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))

    @property
    def dim(self):
        return len(self.factors)

    def to_dict(self):
        return {"name": self.name, "scale": self.scale, "factors": [f.to_dict() for f in self.factors]}

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(Load1D.from_dict(f) for f in data["factors"]), data.get("scale", 1.0), data.get("name", ""))


# ---------------------------------------------------------------------------
# Theta expressions

_SUBSCRIPTS = str.maketrans("₀₁₂₃₄₅₆₇₈₉", "0123456789")
_ALLOWED = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.Constant, ast.Name, ast.Call, ast.Load,
    ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd,
    ast.Compare, ast.Eq,
)
_FUNCS = {"min": min, "max": max, "abs": abs, "sqrt": math.sqrt}


class ThetaExpression:
    """Small arithmetic grammar over parameters.

    Accepts numbers, ``mu1``/``μ₁`` style parameter names, ``+ - * / **``,
    ``min``/``max``/``abs``/``sqrt`` and Kronecker deltas ``delta(mu2 = 3)``
    (also written ``δ(μ₂ = 3)``).
    """

    def __init__(self, text):
        self.text = str(text)
        src = self.text.translate(_SUBSCRIPTS).replace("μ", "mu").replace("δ", "delta")
        src = re.sub(r"mu\[(\d+)\]", r"mu\1", src)
        src = re.sub(r"delta\(([^=()]+?)=(?!=)([^()]+)\)", r"delta(\1==\2)", src)
        tree = ast.parse(src.strip(), mode="eval")
        for node in ast.walk(tree):
            if not isinstance(node, _ALLOWED):
                raise ValueError(f"unsupported syntax in theta expression {self.text!r}")
            if isinstance(node, ast.Name) and not (re.fullmatch(r"mu\d+", node.id) or node.id in _FUNCS or node.id == "delta"):
                raise ValueError(f"unknown name {node.id!r} in theta expression")
            if isinstance(node, ast.Compare) and len(node.ops) != 1:
                raise ValueError("chained comparisons are not supported")
        self._tree = tree

    def __call__(self, mu):
        return float(self._eval(self._tree.body, tuple(float(m) for m in mu)))

    def _eval(self, node, mu):
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            i = int(node.id[2:])
            if not 1 <= i <= len(mu):
                raise DomainError(f"parameter {node.id} missing")
            return mu[i - 1]
        if isinstance(node, ast.UnaryOp):
            val = self._eval(node.operand, mu)
            return -val if isinstance(node.op, ast.USub) else val
        if isinstance(node, ast.BinOp):
            a, b = self._eval(node.left, mu), self._eval(node.right, mu)
            return {ast.Add: a + b, ast.Sub: a - b, ast.Mult: a * b}.get(type(node.op)) if not isinstance(
                node.op, (ast.Div, ast.Pow)
            ) else (a / b if isinstance(node.op, ast.Div) else a**b)
        if isinstance(node, ast.Compare):
            return float(self._eval(node.left, mu) == self._eval(node.comparators[0], mu))
        if isinstance(node, ast.Call):
            name = node.func.id
            args = [self._eval(a, mu) for a in node.args]
            if name == "delta":
                if len(args) != 1:
                    raise ValueError("delta takes one comparison")
                return args[0]
            return float(_FUNCS[name](*args))
        raise ValueError("unsupported expression")

    def __eq__(self, other):
        return isinstance(other, ThetaExpression) and other.text == self.text

    def __hash__(self):
        return hash(self.text)

    def __repr__(self):
        return f"ThetaExpression({self.text!r})"


def _theta(t):
    return t if isinstance(t, ThetaExpression) else ThetaExpression(t)


@dataclass(frozen=True)
class ParameterBox:
    lower: tuple
    upper: tuple
    integer: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
        object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))
        integer = tuple(bool(v) for v in self.integer) or (False,) * len(self.lower)
        object.__setattr__(self, "integer", integer)
        if len(self.lower) != len(self.upper) or len(integer) != len(self.lower):
            raise ValueError("inconsistent box dimensions")

    @property
    def dim(self):
        return len(self.lower)

    def contains(self, mu, tol=1e-12):
        mu = tuple(float(m) for m in mu)
        if len(mu) != self.dim:
            return False
        for m, lo, hi, integer in zip(mu, self.lower, self.upper, self.integer):
            if m < lo - tol or m > hi + tol:
                return False
            if integer and abs(m - round(m)) > tol:
                return False
        return True

    def to_dict(self):
        return {"lower": list(self.lower), "upper": list(self.upper), "integer": list(self.integer)}

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(data["lower"]), tuple(data["upper"]), tuple(data.get("integer", ())))


@dataclass(frozen=True)
class AffineBilinearOperator:
    components: tuple
    thetas: tuple

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        object.__setattr__(self, "thetas", tuple(_theta(t) for t in self.thetas))
        if not self.components or len(self.components) != len(self.thetas):
            raise ValueError("need Q_b >= 1 components with one theta each")

    @property
    def size(self):
        return len(self.components)

    def to_dict(self):
        return {"components": [c.to_dict() for c in self.components], "thetas": [t.text for t in self.thetas]}

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(OperatorComponent.from_dict(c) for c in data["components"]), tuple(data["thetas"]))


@dataclass(frozen=True)
class AffineFunctional:
    components: tuple
    thetas: tuple

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        object.__setattr__(self, "thetas", tuple(_theta(t) for t in self.thetas))
        if not self.components or len(self.components) != len(self.thetas):
            raise ValueError("need Q_f >= 1 components with one theta each")

    @property
    def size(self):
        return len(self.components)

    def to_dict(self):
        return {"components": [c.to_dict() for c in self.components], "thetas": [t.text for t in self.thetas]}

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(FunctionalComponent.from_dict(c) for c in data["components"]), tuple(data["thetas"]))


def evaluate_thetas(affine, mu, box=None, on_outside="raise"):
    """Coefficient functions of an affine operator or functional at ``mu``."""
    if box is not None and not box.contains(mu):
        message = f"parameter {tuple(mu)} lies outside the box"
        if on_outside == "raise":
            raise DomainError(message)
        if on_outside == "warn":
            warnings.warn(message, stacklevel=2)
    return np.array([t(mu) for t in affine.thetas])


# ---------------------------------------------------------------------------
# One-dimensional matrices


def _gauss(n):
    return np.polynomial.legendre.leggauss(n)


def _clipped_cells(cells, interval):
    grid = np.linspace(0.0, 1.0, cells + 1)
    x0, x1 = grid[:-1], grid[1:]
    a = np.maximum(x0, interval[0])
    b = np.minimum(x1, interval[1])
    return x0, x1, a, b, b > a


@functools.lru_cache(maxsize=256)
def dg_form(exponent, factor):
    """Block-diagonal matrix of a form on the discontinuous linear space of mesh 2^-exponent.

    Rows are test (left, right) element values, columns trial values.
    """
    cells = 2**exponent
    x0, x1, a, b, active = _clipped_cells(cells, factor.interval)
    h = x1 - x0
    deg = len(factor.weight) - 1
    nodes, weights = _gauss(deg // 2 + 3)
    pts = 0.5 * (b - a)[:, None] * nodes + 0.5 * (a + b)[:, None]
    wts = 0.5 * (b - a)[:, None] * weights
    w = np.polynomial.polynomial.polyval(pts, factor.weight) * wts
    phi = [(x1[:, None] - pts) / h[:, None], (pts - x0[:, None]) / h[:, None]]
    dphi = [-1.0 / h[:, None] * np.ones_like(pts), 1.0 / h[:, None] * np.ones_like(pts)]
    blocks = np.zeros((cells, 2, 2))
    for i in range(2):
        for j in range(2):
            if factor.form in ("mass", "dual_mass"):
                integrand = phi[i] * phi[j]
            elif factor.form == "stiffness":
                integrand = dphi[i] * dphi[j]
            else:
                integrand = phi[i] * dphi[j]
            blocks[:, i, j] = np.sum(w * integrand, axis=1)
    blocks[~active] = 0.0
    return sp.block_diag(list(blocks), format="csr")


def _native_form(test, trial, factor):
    exponent = max(test.mesh_exponent, trial.mesh_exponent)
    rt, rs = test.to_dg(exponent), trial.to_dg(exponent)
    if factor.form != "dual_mass":
        return (rt.T @ dg_form(exponent, factor) @ rs).tocsr()
    if test.discontinuous or trial.discontinuous or test is not trial:
        raise ValueError("the negative-norm Gramian needs identical continuous bases")
    # M K^-1 M with K the H1 Gramian of the native continuous space
    mass = (rt.T @ dg_form(exponent, Factor1D("mass", factor.weight, factor.interval)) @ rs).tocsc()
    stiff = (rt.T @ dg_form(exponent, Factor1D("stiffness")) @ rs).tocsc()
    if test.spec.boundary is not Boundary.DIRICHLET:
        stiff = stiff + (rt.T @ dg_form(exponent, Factor1D("mass")) @ rs).tocsc()
    return mass, splu(stiff)


@functools.lru_cache(maxsize=512)
def form_matrix(test, trial, factor):
    """Hierarchical matrix of a 1D form between L2-normalised test and trial functions."""
    native = _native_form(test, trial, factor)
    tt, ts = test.transform, trial.transform
    if factor.form == "dual_mass":
        mass, lu = native
        mt = (mass @ ts).toarray()
        return (tt.T @ (mass @ lu.solve(mt))).astype(float)
    mat = (tt.T @ (native @ ts)).tocsr()
    # couplings that vanish analytically come out as roundoff
    if mat.nnz:
        mat.data[np.abs(mat.data) <= 1e-13 * np.abs(mat.data).max()] = 0.0
        mat.eliminate_zeros()
    if mat.shape[0] * mat.shape[1] <= DENSE_LIMIT:
        return mat.toarray()
    mat.sort_indices()
    return mat


@functools.lru_cache(maxsize=512)
def form_diagonal(basis, factor):
    mat = form_matrix(basis, basis, factor)
    return np.asarray(mat.diagonal()).ravel()


@functools.lru_cache(maxsize=256)
def load_vector(test, load):
    """Pairings of a 1D load with the L2-normalised test functions."""
    exponent = test.mesh_exponent
    cells = 2**exponent
    x0, x1, a, b, active = _clipped_cells(cells, load.interval)
    h = x1 - x0
    n = 12 if load.kind == "cosine" else len(load.weight) // 2 + 2
    nodes, weights = _gauss(n)
    pts = 0.5 * (b - a)[:, None] * nodes + 0.5 * (a + b)[:, None]
    wts = 0.5 * (b - a)[:, None] * weights
    vals = np.polynomial.polynomial.polyval(pts, load.weight)
    if load.kind == "cosine":
        vals = vals * np.cos(2 * np.pi * load.frequency * pts + load.phase)
    left = np.sum(wts * vals * (x1[:, None] - pts) / h[:, None], axis=1)
    right = np.sum(wts * vals * (pts - x0[:, None]) / h[:, None], axis=1)
    dg = np.column_stack([np.where(active, left, 0.0), np.where(active, right, 0.0)]).ravel()
    native = test.to_dg(exponent).T @ dg
    return test.transform.T @ native


# ---------------------------------------------------------------------------
# Spaces and discretisations


class Space:
    """A tensor basis with the diagonal scaling that normalises it in a norm.

    ``scaling`` is ``"diagonal"`` (divide by the exact norm of each function,
    the norm given as an operator component), ``"level"`` (the factors
    2^(-j s) of the one-dimensional specs) or ``"none"``.
    """

    def __init__(self, basis, norm=None, scaling="diagonal"):
        if scaling == "diagonal" and norm is None:
            raise ValueError("diagonal scaling needs a norm")
        self.basis = basis
        self.norm = norm
        self.scaling = scaling

    def __eq__(self, other):
        return isinstance(other, Space) and (self.basis, self.norm, self.scaling) == (other.basis, other.norm, other.scaling)

    def __hash__(self):
        return hash((self.basis, self.norm, self.scaling))

    @property
    def shape(self):
        return self.basis.shape

    @functools.cached_property
    def scale(self):
        if self.scaling == "none":
            return np.ones(self.shape)
        if self.scaling == "level":
            out = np.ones(self.shape)
            for axis, b in enumerate(self.basis.bases):
                f = 2.0 ** (-b.levels * b.spec.sobolev_scale)
                out = out * f.reshape([-1 if i == axis else 1 for i in range(self.basis.dim)])
            return out
        return 1.0 / np.sqrt(self.norm_diagonal())

    def norm_diagonal(self):
        out = np.zeros(self.shape)
        for term in self.norm.terms:
            prod = np.full(self.shape, term.scale)
            for axis, (b, f) in enumerate(zip(self.basis.bases, term.factors)):
                d = form_diagonal(b, f)
                prod = prod * d.reshape([-1 if i == axis else 1 for i in range(self.basis.dim)])
            out += prod
        return out


@dataclass
class WorkCounter:
    flops: int = 0
    applications: int = 0

    def reset(self):
        self.flops = 0
        self.applications = 0


WORK = WorkCounter()


def _sub(mat, rows, cols):
    if rows is None and cols is None:
        return mat
    if sp.issparse(mat):
        out = mat
        if rows is not None:
            out = out[rows]
        if cols is not None:
            out = out[:, cols]
        return out
    if rows is None:
        return mat[:, cols]
    if cols is None:
        return mat[rows]
    return mat[np.ix_(rows, cols)]


def _count(*dims):
    return int(np.prod([int(d) for d in dims]))


class Discretization:
    """Trial and test spaces of a (possibly Petrov-)Galerkin problem."""

    def __init__(self, trial, test=None):
        self.trial = trial
        self.test = test if test is not None else trial
        if self.trial.basis.dim != self.test.basis.dim:
            raise ValueError("trial and test dimensions differ")

    @property
    def dim(self):
        return self.trial.basis.dim

    def matrix(self, axis, factor):
        return form_matrix(self.test.basis.bases[axis], self.trial.basis.bases[axis], factor)

    def bind(self, weighted_components):
        """Operator sum_c w_c * component_c as a ``BoundOperator``."""
        terms = []
        for comp, w in weighted_components:
            if comp.dim != self.dim:
                raise ValueError("component dimension mismatch")
            if w == 0:
                continue
            for term in comp.terms:
                terms.append((term, w * term.scale))
        return BoundOperator(self, terms)

    def component(self, comp):
        return self.bind([(comp, 1.0)])

    def rhs(self, functional_component):
        """Scaled test coefficients of a separable functional."""
        out = np.full(self.test.shape, float(functional_component.scale))
        for axis, (b, load) in enumerate(zip(self.test.basis.bases, functional_component.factors)):
            vec = load_vector(b, load)
            out = out * vec.reshape([-1 if i == axis else 1 for i in range(self.dim)])
        return out * self.test.scale


class BoundOperator:
    """A fixed linear combination of separable terms in scaled coordinates."""

    def __init__(self, disc, terms):
        self.disc = disc
        self.terms = terms
        self.groups = self._group()

    def _group(self):
        dim = self.disc.dim
        if not self.terms:
            return []
        if dim == 1:
            total = None
            for term, w in self.terms:
                m = w * self.disc.matrix(0, term.factors[0])
                total = m if total is None else total + m
            return [(total,)]
        best = None
        for key_axis in range(dim):
            keys = {}
            for term, w in self.terms:
                keys.setdefault(term.factors[key_axis], []).append((term, w))
            if best is None or len(keys) < len(best[1]):
                best = (key_axis, keys)
        key_axis, keys = best
        other = 1 - key_axis
        groups = []
        for factor, members in keys.items():
            summed = None
            for term, w in members:
                m = w * self.disc.matrix(other, term.factors[other])
                summed = m if summed is None else summed + m
            mats = [None, None]
            mats[key_axis] = self.disc.matrix(key_axis, factor)
            mats[other] = summed
            groups.append(tuple(mats))
        return groups

    @property
    def trial_shape(self):
        return self.disc.trial.shape

    @property
    def test_shape(self):
        return self.disc.test.shape

    def apply(self, x, cols=None, rows=None, transpose=False):
        """Scaled application restricted to a hull of input and output positions.

        ``cols`` and ``rows`` are tuples with one position array per
        direction (or None for everything); the result vanishes outside the
        row hull.  With ``transpose`` the adjoint maps test to trial arrays.
        """
        d_in, d_out = (self.disc.test.scale, self.disc.trial.scale) if transpose else (self.disc.trial.scale, self.disc.test.scale)
        out_shape = self.trial_shape if transpose else self.test_shape
        out = np.zeros(out_shape)
        if not self.groups:
            return out
        xs = d_in * x
        dim = self.disc.dim
        cols = cols if cols is not None else (None,) * dim
        rows = rows if rows is not None else (None,) * dim
        if dim == 2 and cols[0] is not None and cols[1] is not None:
            xs = xs[np.ix_(cols[0], cols[1])]
        elif dim == 2:
            xs = _sub(xs, cols[0], cols[1])
        else:
            xs = xs if cols[0] is None else xs[cols[0]]
        acc = None
        for mats in self.groups:
            blocks = []
            for axis, m in enumerate(mats):
                m = m.T if transpose else m
                blocks.append(_sub(m, rows[axis], cols[axis]))
            if dim == 1:
                y = blocks[0] @ xs
                WORK.flops += _count(blocks[0].nnz if sp.issparse(blocks[0]) else blocks[0].size)
            else:
                a0, a1 = blocks
                r0, c0 = a0.shape
                r1, c1 = a1.shape
                if r0 * c0 * c1 + r0 * c1 * r1 <= c0 * c1 * r1 + r0 * c0 * r1:
                    y = a0 @ xs
                    y = (a1 @ np.asarray(y).T).T
                    WORK.flops += _count(r0, c0, c1) + _count(r0, c1, r1)
                else:
                    y = xs @ a1.T if not sp.issparse(a1) else (a1 @ np.asarray(xs).T).T
                    y = a0 @ np.asarray(y)
                    WORK.flops += _count(c0, c1, r1) + _count(r0, c0, r1)
            y = np.asarray(y)
            acc = y if acc is None else acc + y
        WORK.applications += 1
        if dim == 2 and rows[0] is not None and rows[1] is not None:
            out[np.ix_(rows[0], rows[1])] = acc
        elif dim == 2 and (rows[0] is not None or rows[1] is not None):
            if rows[0] is not None:
                out[rows[0], :] = acc
            else:
                out[:, rows[1]] = acc
        elif dim == 1 and rows[0] is not None:
            out[rows[0]] = acc
        else:
            out[...] = acc
        return d_out * out

    def apply_transpose(self, y, rows=None, cols=None):
        """Adjoint: test array on ``rows`` hull to trial array on ``cols`` hull."""
        return self.apply(y, cols=rows, rows=cols, transpose=True)

    def diagonal(self):
        if self.disc.trial.basis != self.disc.test.basis:
            raise ValueError("diagonal needs identical trial and test bases")
        out = np.zeros(self.trial_shape)
        for mats in self.groups:
            prod = np.ones(self.trial_shape)
            for axis, m in enumerate(mats):
                d = np.asarray(m.diagonal()).ravel()
                prod = prod * d.reshape([-1 if i == axis else 1 for i in range(self.disc.dim)])
            out += prod
        return out * self.disc.trial.scale * self.disc.test.scale

    def normal_diagonal(self):
        """Diagonal of B^T B in scaled coordinates."""
        dt2 = self.disc.test.scale**2
        out = np.zeros(self.trial_shape)
        dense = [[m.toarray() if sp.issparse(m) else m for m in mats] for mats in self.groups]
        for g in dense:
            for h in dense:
                if self.disc.dim == 1:
                    out += (g[0] * h[0]).T @ dt2
                else:
                    out += (g[0] * h[0]).T @ dt2 @ (g[1] * h[1])
        return out * self.disc.trial.scale**2

    def to_dense(self):
        """Full matrix (test size x trial size); small universes only."""
        mats = [[m.toarray() if sp.issparse(m) else m for m in g] for g in self.groups]
        full = 0
        for g in mats:
            full = full + (np.kron(g[0], g[1]) if self.disc.dim == 2 else g[0])
        return self.disc.test.scale.reshape(-1, 1) * full * self.disc.trial.scale.reshape(1, -1)


class ParametricOperator:
    """An affine operator bound to a discretisation."""

    def __init__(self, disc, operator, box=None):
        self.disc = disc
        self.operator = operator
        self.box = box

    def thetas(self, mu, on_outside="raise"):
        return evaluate_thetas(self.operator, mu, self.box, on_outside)

    def at(self, mu, on_outside="raise"):
        theta = self.thetas(mu, on_outside)
        return self.disc.bind(list(zip(self.operator.components, theta)))

    def component(self, q):
        return self.disc.component(self.operator.components[q])

    def combine(self, theta):
        return self.disc.bind(list(zip(self.operator.components, theta)))


class ParametricRhs:
    def __init__(self, disc, functional, box=None):
        self.disc = disc
        self.functional = functional
        self.box = box
        self.vectors = [disc.rhs(c) for c in functional.components]

    def thetas(self, mu, on_outside="raise"):
        return evaluate_thetas(self.functional, mu, self.box, on_outside)

    def at(self, mu, on_outside="raise"):
        theta = self.thetas(mu, on_outside)
        out = np.zeros(self.disc.test.shape)
        for t, v in zip(theta, self.vectors):
            if t != 0:
                out += t * v
        return out


# ---------------------------------------------------------------------------
# Index-level API


def _positions(universe, index_set):
    return universe.positions(index_set.codes)


def entry(disc, comp, row, col):
    """Scaled value of a component at (test index ``row``, trial index ``col``)."""
    test_pos = disc.test.basis.positions([tuple(r.code for r in _as_tensor(row))])
    trial_pos = disc.trial.basis.positions([tuple(c.code for c in _as_tensor(col))])
    total = 0.0
    for term in comp.terms:
        val = term.scale
        for axis, f in enumerate(term.factors):
            m = disc.matrix(axis, f)
            val *= m[test_pos[axis][0], trial_pos[axis][0]]
        total += val
    return float(total * disc.test.scale[test_pos][0] * disc.trial.scale[trial_pos][0])


def _as_tensor(idx):
    from .index import TensorIndex

    return TensorIndex(idx)


def hull(mask):
    """Per-direction positions occupied by a mask (the tensor hull of the set)."""
    return tuple(np.flatnonzero(np.any(mask, axis=tuple(a for a in range(mask.ndim) if a != axis))) for axis in range(mask.ndim))


def apply_restricted(disc, comp, rows, cols, v, *, check=True, method="auto"):
    """Rows-restricted application of a component to a vector supported in ``cols``.

    ``method`` is ``"dense"`` (products over the tensor hulls of the sets),
    ``"sparse"`` (sparse per-slice evaluation whose work grows with the set
    sizes) or ``"auto"``.
    """
    trial_u, test_u = disc.trial.basis, disc.test.basis
    if check:
        if not (trial_u.is_multitree(trial_u.mask(cols)) and test_u.is_multitree(test_u.mask(rows))):
            raise ContractError("row and column sets must be multitrees")
        if not v.index_set() <= cols:
            raise ContractError("vector support exceeds the column set")
    x = trial_u.dense(v)
    row_mask = test_u.mask(rows)
    op = disc.component(comp) if isinstance(comp, OperatorComponent) else comp
    if method == "auto":
        method = "sparse" if len(rows) + len(cols) <= 2000 else "dense"
    if method == "dense":
        y = op.apply(x, cols=hull(trial_u.mask(cols)), rows=hull(row_mask))
    else:
        y = sparse_apply(op, x, trial_u.mask(cols), row_mask)
    return test_u.coeff_vector(y, row_mask)


def _split_by_level(mat, test_levels, trial_levels):
    """Entries coupling a coarser-or-equal trial level (lower) and a finer one (upper)."""
    coo = sp.coo_matrix(mat)
    keep = coo.data != 0
    r, c, v = coo.row[keep], coo.col[keep], coo.data[keep]
    low = trial_levels[c] <= test_levels[r]
    shape = coo.shape
    return (
        sp.csr_matrix((v[low], (r[low], c[low])), shape=shape),
        sp.csr_matrix((v[~low], (r[~low], c[~low])), shape=shape),
    )


def sparse_apply(op, x, col_mask, row_mask):
    """Set-restricted evaluation whose work scales with the sizes of the sets.

    The direction-1 matrix is split by level: where the trial level is
    coarser the direction-0 factor is applied first, otherwise last, so
    every intermediate set stays near the row and column sets.
    """
    disc = op.disc
    xs = disc.trial.scale * np.where(col_mask, x, 0.0)
    out = np.zeros(op.test_shape)
    if disc.dim == 1:
        r, c = np.flatnonzero(row_mask), np.flatnonzero(col_mask)
        for (m,) in op.groups:
            block = sp.csr_matrix(_sub(m, r, c))
            out[r] += block @ xs[c]
            WORK.flops += block.nnz
        WORK.applications += 1
        return out * disc.test.scale
    test_levels = disc.test.basis.bases[1].levels
    trial_levels = disc.trial.basis.bases[1].levels
    col_by_1 = {c1: np.flatnonzero(col_mask[:, c1]) for c1 in np.flatnonzero(col_mask.any(axis=0))}
    row_by_1 = {r1: np.flatnonzero(row_mask[:, r1]) for r1 in np.flatnonzero(row_mask.any(axis=0))}
    x_sparse = sp.csr_matrix(xs)
    for mats in op.groups:
        a0 = sp.csr_matrix(mats[0])
        low, up = _split_by_level(mats[1], test_levels, trial_levels)
        # lower part: z[r0, c1] = sum_c0 a0[r0, c0] x[c0, c1] on the rows it feeds
        needed = {}
        for r1, r0s in row_by_1.items():
            lo, hi = low.indptr[r1], low.indptr[r1 + 1]
            for c1 in low.indices[lo:hi]:
                if c1 in col_by_1:
                    needed.setdefault(c1, []).append(r0s)
        z = {}
        for c1, parts in needed.items():
            r0 = np.unique(np.concatenate(parts))
            c0 = col_by_1[c1]
            block = a0[r0][:, c0]
            z[c1] = (r0, block @ xs[c0, c1])
            WORK.flops += block.nnz
        for r1, r0s in row_by_1.items():
            lo, hi = low.indptr[r1], low.indptr[r1 + 1]
            acc = np.zeros(len(r0s))
            for c1, w in zip(low.indices[lo:hi], low.data[lo:hi]):
                if c1 in z:
                    r0, vals = z[c1]
                    acc += w * vals[np.searchsorted(r0, r0s)]
                    WORK.flops += len(r0s)
            out[r0s, r1] += acc
        # upper part: w[c0, r1] = sum_c1 up[r1, c1] x[c0, c1], then direction 0
        inter = (up @ x_sparse.T).tocsr()
        WORK.flops += int(np.bincount(up.indices, minlength=up.shape[1])[x_sparse.indices].sum())
        for r1, r0s in row_by_1.items():
            lo, hi = inter.indptr[r1], inter.indptr[r1 + 1]
            if lo == hi:
                continue
            block = a0[r0s][:, inter.indices[lo:hi]]
            out[r0s, r1] += block @ inter.data[lo:hi]
            WORK.flops += block.nnz
    WORK.applications += 1
    return out * disc.test.scale


def assemble_rhs(disc, functional_component, rows):
    """Scaled pairings of a functional component with the test functions in ``rows``."""
    full = disc.rhs(functional_component)
    mask = disc.test.basis.mask(rows)
    return disc.test.basis.coeff_vector(full, mask)
