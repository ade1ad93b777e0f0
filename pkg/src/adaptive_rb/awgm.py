"""Adaptive wavelet Galerkin solver with bulk chasing on multitrees.

The solver works on a capped ``TensorBasis``: active sets are boolean masks,
iterates are dense arrays that vanish outside their set.  Each outer step
solves the Galerkin system on the active set with preconditioned CG,
approximates the residual on an expanded multitree, checks the stopping
quantity of the chosen error measure and enlarges the set by bulk chasing.
"""
from __future__ import annotations

import enum
import functools
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .index import CoeffVector, IndexSet, TensorBasis
from .operator import hull


class ErrorMeasure(enum.Enum):
    XNORM = "XNorm"
    DUAL_RESIDUAL = "DualResidual"
    NORMAL_EQ_RESIDUAL = "NormalEqResidual"


@dataclass(frozen=True)
class AwgmConfig:
    bulk: float = 0.6
    omega: float = 0.5
    inner_factor: float = 0.1
    max_iter: int = 60
    max_inner: int = 2000
    max_layers: int = 3
    raise_on_failure: bool = True

    def __post_init__(self):
        if not 0 < self.bulk < 1:
            raise ValueError("bulk fraction must lie in (0, 1)")
        if not 0 < self.omega < 1:
            raise ValueError("omega must lie in (0, 1)")
        if not 0 < self.inner_factor < 1:
            raise ValueError("inner factor must lie in (0, 1)")
        if min(self.max_iter, self.max_inner, self.max_layers) < 1:
            raise ValueError("iteration limits must be positive")

    def to_dict(self):
        return asdict(self)


class CGStagnation(RuntimeError):
    def __init__(self, message, last_iterate, residual_norm):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual_norm = residual_norm


class AwgmError(RuntimeError):
    """Target not reached; ``snapshot`` holds the last iterate and its report."""

    def __init__(self, message, snapshot):
        super().__init__(message)
        self.snapshot = snapshot


# ---------------------------------------------------------------------------
# Systems


class GalerkinSystem:
    """Square system ``A x = b`` with identical trial and test universes."""

    normal = False

    def __init__(self, op, rhs):
        if op.disc.trial.basis != op.disc.test.basis:
            raise ValueError("a Galerkin system needs identical trial and test bases")
        self.op = op
        self.rhs = np.asarray(rhs, dtype=float)
        self.universe = op.disc.trial.basis

    def apply(self, x, cols, rows):
        return self.op.apply(x * cols, cols=hull(cols), rows=hull(rows)) * rows

    def residual(self, x, cols, rows):
        return (self.rhs - self.op.apply(x * cols, cols=hull(cols), rows=hull(rows))) * rows

    @functools.cached_property
    def diagonal(self):
        return self.op.diagonal()


class NormalEquationSystem:
    """``B^T B x = B^T b`` with ``B`` applied into the whole test universe."""

    normal = True

    def __init__(self, op, rhs):
        self.op = op
        self.primal_rhs = np.asarray(rhs, dtype=float)
        self.rhs = op.apply_transpose(self.primal_rhs)
        self.universe = op.disc.trial.basis

    def apply(self, x, cols, rows):
        y = self.op.apply(x * cols, cols=hull(cols))
        return self.op.apply_transpose(y, cols=hull(rows)) * rows

    def primal_residual(self, x, cols):
        return self.primal_rhs - self.op.apply(x * cols, cols=hull(cols))

    def residual(self, x, cols, rows):
        return self.op.apply_transpose(self.primal_residual(x, cols), cols=hull(rows)) * rows

    @functools.cached_property
    def diagonal(self):
        return self.op.normal_diagonal()


def normal_equation_wrap(op, rhs):
    return NormalEquationSystem(op, rhs)


# ---------------------------------------------------------------------------
# Building blocks


def _as_mask(universe, s):
    if isinstance(s, IndexSet):
        return universe.mask(s)
    return np.asarray(s, dtype=bool)


def galerkin_solve_on_set(system, active, rel_tol=None, *, abs_tol=None, x0=None, max_iter=2000):
    """Jacobi-preconditioned CG for the system restricted to ``active``.

    Stops when the restricted residual is below ``max(rel_tol * ||b||, abs_tol)``.
    Returns the iterate (zero outside the set) and the iteration count.
    """
    mask = _as_mask(system.universe, active)
    b = system.rhs * mask
    x = np.zeros(system.universe.shape) if x0 is None else np.asarray(x0, dtype=float) * mask
    b_norm = np.linalg.norm(b)
    if b_norm == 0:
        return np.zeros_like(x), 0
    tol = max(b_norm * (rel_tol or 0.0), abs_tol or 0.0)
    r = b - system.apply(x, mask, mask)
    inv_diag = np.where(mask, 1.0 / np.where(mask, system.diagonal, 1.0), 0.0)
    z = inv_diag * r
    p = z.copy()
    rz = np.sum(r * z)
    for it in range(max_iter):
        r_norm = np.linalg.norm(r)
        if r_norm <= tol:
            return x, it
        q = system.apply(p, mask, mask)
        alpha = rz / np.sum(p * q)
        x += alpha * p
        r -= alpha * q
        z = inv_diag * r
        rz_new = np.sum(r * z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    r_norm = np.linalg.norm(r)
    if r_norm <= tol:
        return x, max_iter
    raise CGStagnation(f"CG stopped at residual {r_norm:.3e} > {tol:.3e}", x, r_norm)


def approximate_residual(system, x, active, omega=0.5, max_layers=3):
    """Residual ``b - A x`` on an expanded multitree around ``active``.

    The set is grown layer by layer until the residual mass found one
    layer further out is at most ``omega`` times the residual on the set.
    Returns (residual array, set mask, capped) where ``capped`` says the set
    would have needed levels beyond the universe.
    """
    universe = system.universe
    mask = _as_mask(universe, active)
    xi = universe.expand(mask, 1)
    for layers in range(1, max_layers + 1):
        outer = universe.expand(xi, 1)
        r = system.residual(x, mask, outer)
        head = np.linalg.norm(r[xi])
        tail = np.linalg.norm(r[outer & ~xi])
        if tail <= omega * head or np.array_equal(outer, xi) or layers == max_layers:
            break
        xi = outer
    return r * xi, xi, universe.touches_cap(xi)


def bulk_mask(universe, r, active, c):
    """Smallest completed superset of ``active`` carrying a ``c`` share of ``||r||``."""
    mask = np.array(active, dtype=bool)
    mags = np.abs(np.asarray(r)).ravel()
    total = np.sum(mags**2)
    if total == 0:
        return universe.complete(mask)
    have = np.sum(mags[mask.ravel()] ** 2)
    need = c * c * total - have
    if need > 0:
        outside = np.flatnonzero(~mask.ravel() & (mags > 0))
        order = outside[np.argsort(-mags[outside], kind="stable")]
        cum = np.cumsum(mags[order] ** 2)
        k = len(order) if c >= 1 else int(np.searchsorted(cum, need * (1 - 1e-14))) + 1
        mask.ravel()[order[:k]] = True
    return universe.complete(mask)


def bulk_chase(r, active, c, specs):
    """Index-set form of bulk chasing: ``r`` and ``active`` as CoeffVector and IndexSet."""
    levels = np.maximum(np.array(r.index_set().max_levels()), np.array(active.max_levels() if len(active) else 0))
    universe = TensorBasis(specs, tuple(int(v) for v in levels))
    chosen = bulk_mask(universe, universe.dense(r), universe.mask(active), c)
    return universe.index_set(chosen)


# ---------------------------------------------------------------------------
# Reports and snapshots


@dataclass
class IterationRecord:
    set_size: int
    residual_set_size: int
    residual_norm: float
    stop_value: float
    inner_iterations: int
    wall_time: float


@dataclass
class SolveReport:
    iterations: list = field(default_factory=list)
    converged: bool = False
    capped: bool = False
    reason: str = ""

    @property
    def residual_norms(self):
        return [it.residual_norm for it in self.iterations]

    @property
    def set_sizes(self):
        return [it.set_size for it in self.iterations]

    @property
    def final_value(self):
        return self.iterations[-1].stop_value if self.iterations else 0.0

    def to_dict(self):
        return {
            "converged": self.converged,
            "capped": self.capped,
            "reason": self.reason,
            "iterations": [asdict(it) for it in self.iterations],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        return cls([IterationRecord(**it) for it in data["iterations"]], data["converged"], data["capped"], data["reason"])


@dataclass
class Snapshot:
    array: np.ndarray
    mask: np.ndarray
    universe: TensorBasis
    target: float
    measure: ErrorMeasure
    report: SolveReport
    mu: tuple | None = None

    @functools.cached_property
    def coeffs(self):
        return self.universe.coeff_vector(self.array, self.mask)

    @property
    def size(self):
        return int(self.mask.sum())


def _stop_scale(measure, riesz_lower, stability_lower):
    if measure is ErrorMeasure.DUAL_RESIDUAL:
        return riesz_lower
    if measure is ErrorMeasure.XNORM:
        return riesz_lower * stability_lower
    return 1.0


def stopping_value(system, measure, x, active, r_norm, riesz_lower=1.0, stability_lower=1.0):
    """Computable stand-in for the error measure of an iterate."""
    if system.normal and measure is not ErrorMeasure.NORMAL_EQ_RESIDUAL:
        r_norm = float(np.linalg.norm(system.primal_residual(x, active)))
    return r_norm / _stop_scale(measure, riesz_lower, stability_lower)


def recheck(system, snapshot, riesz_lower=1.0, stability_lower=1.0, layers=2):
    """Stopping quantity of a snapshot re-evaluated on a freshly expanded set."""
    universe = system.universe
    fresh = universe.expand(snapshot.mask, layers)
    r = system.residual(snapshot.array, snapshot.mask, fresh)
    return stopping_value(system, snapshot.measure, snapshot.array, snapshot.mask, np.linalg.norm(r), riesz_lower, stability_lower)


def solve(
    system,
    eps,
    measure=ErrorMeasure.DUAL_RESIDUAL,
    config=None,
    *,
    riesz_lower=1.0,
    stability_lower=1.0,
    mu=None,
    initial=None,
):
    """Adaptive solve until the measure's stopping quantity is at most ``eps``."""
    if eps <= 0:
        raise ValueError("target tolerance must be positive")
    config = config or AwgmConfig()
    universe = system.universe
    report = SolveReport()
    x = np.zeros(universe.shape)
    if not np.any(system.rhs) and not (system.normal and np.any(system.primal_rhs)):
        report.converged, report.reason = True, "zero right-hand side"
        return Snapshot(x, universe.coarsest_mask(), universe, eps, measure, report, mu)
    mask = universe.complete(universe.coarsest_mask() if initial is None else _as_mask(universe, initial))
    target_r = eps * _stop_scale(measure, riesz_lower, stability_lower)
    inner = config.inner_factor
    previous = None
    for _ in range(config.max_iter):
        start = time.perf_counter()
        reference = target_r if previous is None else max(target_r, 0.1 * previous)
        try:
            x, its = galerkin_solve_on_set(system, mask, abs_tol=inner * reference, x0=x, max_iter=config.max_inner)
        except CGStagnation as exc:
            x = exc.last_iterate
            its = config.max_inner
            report.reason = str(exc)
        r, xi, capped = approximate_residual(system, x, mask, config.omega, config.max_layers)
        report.capped |= capped
        r_norm = float(np.linalg.norm(r))
        value = stopping_value(system, measure, x, mask, r_norm, riesz_lower, stability_lower)
        report.iterations.append(
            IterationRecord(int(mask.sum()), int(xi.sum()), r_norm, value, its, time.perf_counter() - start)
        )
        if value <= eps:
            report.converged, report.reason = True, "target reached"
            break
        grown = bulk_mask(universe, r, mask, config.bulk)
        if np.array_equal(grown, mask):
            if mask.all() and inner < 1e-8:
                report.reason = "level cap reached before the target"
                break
            # all residual mass sits on the active set: solve more accurately
            inner *= 0.1
            continue
        mask = grown
        previous = r_norm
    else:
        report.reason = "iteration limit reached"
    snap = Snapshot(x, mask, universe, eps, measure, report, mu)
    if not report.converged and config.raise_on_failure:
        raise AwgmError(f"solve did not reach {eps:.3e}: {report.reason}", snap)
    return snap


def riesz_solve(gramian_op, g, tol, config=None):
    """Coefficients of the Riesz representer of a functional in the Gramian's space."""
    return solve(GalerkinSystem(gramian_op, g), tol, ErrorMeasure.DUAL_RESIDUAL, config)
