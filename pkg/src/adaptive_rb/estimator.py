"""Online-efficient surrogate for the dual norm of the reduced residual.

The residual of a reduced solution is a finite combination of functionals
whose (scaled) wavelet coefficients are computed offline: the right-hand side
components and the images of every reduced basis function under every
operator component.  Their pairwise inner products are collected in three
Gramians, after which the coefficient norm of the residual, and from it the
dual-norm surrogate, is evaluated without touching fine-space data.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg, eigsh

from .operator import ThetaExpression


class EstimatorError(ArithmeticError):
    pass


@dataclass(frozen=True)
class RieszConstants:
    """Norm equivalence ``c ||g||_dual <= ||coeffs|| <= C ||g||_dual`` (square roots of Gramian eigenvalues)."""

    lower: float
    upper: float

    def __post_init__(self):
        if not 0 < self.lower <= self.upper:
            raise ValueError("Riesz constants need 0 < c <= C")

    @property
    def ratio(self):
        return self.lower / self.upper

    def to_dict(self):
        return {"lower": self.lower, "upper": self.upper}

    @classmethod
    def from_dict(cls, data):
        return cls(data["lower"], data["upper"])


def space_riesz_constants(space, dense_limit=2500, tol=1e-6):
    """Riesz constants of a scaled tensor basis in the norm defining its scaling."""
    from .operator import Discretization

    op = Discretization(space, space).component(space.norm)
    n = space.basis.size
    if n <= dense_limit:
        eig = np.linalg.eigvalsh(op.to_dense())
        lo, hi = eig[0], eig[-1]
    else:
        shape = space.shape

        def matvec(v):
            return op.apply(np.asarray(v).reshape(shape)).ravel()

        lin = LinearOperator((n, n), matvec=matvec, dtype=float)
        # fixed start vector keeps repeated runs bit-identical
        v0 = np.random.default_rng(0).standard_normal(n)
        hi = eigsh(lin, k=1, which="LA", tol=tol, v0=v0, return_eigenvectors=False)[0]

        # shift-invert at zero; the scaled Gramian is well conditioned, so CG is cheap
        def inverse(v):
            x, info = cg(lin, np.asarray(v).ravel(), rtol=tol * 1e-2, maxiter=10 * n)
            if info:
                raise EstimatorError("inner CG of the eigenvalue solve did not converge")
            return x

        inv = LinearOperator((n, n), matvec=inverse, dtype=float)
        lo = eigsh(lin, k=1, sigma=0.0, OPinv=inv, which="LM", tol=tol, v0=v0, return_eigenvectors=False)[0]
    return RieszConstants(math.sqrt(lo), math.sqrt(hi))


def _expr(value):
    if value is None or isinstance(value, ThetaExpression):
        return value
    return ThetaExpression(value)


@dataclass(frozen=True)
class StabilityBounds:
    """Parameter-dependent stability bounds given as expressions in the parameters."""

    beta_lb: object
    gamma_ub: object
    alpha_lb: object = None

    def __post_init__(self):
        for name in ("beta_lb", "gamma_ub", "alpha_lb"):
            object.__setattr__(self, name, _expr(getattr(self, name)))

    @property
    def coercive(self):
        return self.alpha_lb is not None

    def _positive(self, expr, mu, what):
        value = expr(mu)
        if not value > 0:
            raise EstimatorError(f"{what} bound is not positive at {tuple(mu)}")
        return value

    def beta(self, mu):
        return self._positive(self.beta_lb, mu, "inf-sup")

    def gamma(self, mu):
        return self._positive(self.gamma_ub, mu, "continuity")

    def alpha(self, mu):
        if self.alpha_lb is None:
            raise EstimatorError("no coercivity bound for this problem")
        return self._positive(self.alpha_lb, mu, "coercivity")

    def to_dict(self):
        return {
            "beta_lb": self.beta_lb.text,
            "gamma_ub": self.gamma_ub.text,
            "alpha_lb": None if self.alpha_lb is None else self.alpha_lb.text,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(data["beta_lb"], data["gamma_ub"], data.get("alpha_lb"))


# ---------------------------------------------------------------------------
# Coefficient truncation


@dataclass(frozen=True)
class Truncation:
    levels: int
    tail_bound: float
    capped: bool


def level_truncation(array, universe, trunc_tol):
    """Keep all levels (max over directions) until the extrapolated tail drops below ``trunc_tol``.

    The tail beyond level J is bounded by the largest coefficient on the
    levels above J divided by (1 - q), with q the observed geometric decay
    ratio of the per-level maxima.  ``capped`` flags that even the levels
    available in the universe do not meet the criterion.
    """
    if trunc_tol <= 0:
        raise ValueError("truncation tolerance must be positive")
    level = np.maximum.reduce(universe.level_grid()) if universe.dim > 1 else universe.bases[0].levels
    top = int(level.max())
    maxima = np.array([np.abs(array[level == j]).max(initial=0.0) for j in range(top + 1)])
    ratios = [maxima[j + 1] / maxima[j] for j in range(max(top - 3, 0), top) if maxima[j] > 0]
    q = min(max(float(np.median(ratios)) if ratios else 0.5, 0.0), 0.95)
    beyond = maxima[top] * q / (1 - q)
    for cut in range(top + 1):
        tail = max(maxima[cut + 1 :].max(initial=0.0) / (1 - q), beyond)
        if tail <= trunc_tol:
            return Truncation(cut, tail, False)
    return Truncation(top, beyond, True)


def truncate(array, universe, truncation):
    level = np.maximum.reduce(universe.level_grid()) if universe.dim > 1 else universe.bases[0].levels
    return np.where(level <= truncation.levels, array, 0.0)


def rhs_coeffs(disc, component, trunc_tol=None):
    """Scaled test coefficients of a right-hand side component (optionally truncated)."""
    full = disc.rhs(component)
    if trunc_tol is None:
        return full, None
    info = level_truncation(full, disc.test.basis, trunc_tol * max(np.abs(full).max(), 1e-300))
    return truncate(full, disc.test.basis, info), info


def column_coeffs(op, zeta, trunc_tol=None):
    """Scaled test coefficients of ``b_q(zeta, .)`` for a trial array ``zeta``."""
    full = op.apply(zeta)
    if trunc_tol is None or not np.any(full):
        return full, None
    info = level_truncation(full, op.disc.test.basis, trunc_tol * np.abs(full).max())
    return truncate(full, op.disc.test.basis, info), info


# ---------------------------------------------------------------------------
# Offline Gramians


@dataclass
class OfflineGramians:
    """Inner products of the residual building blocks.

    Column ``i * q_b + q`` of the operator blocks belongs to basis function i
    and component q.
    """

    cff: np.ndarray
    cbb: np.ndarray
    cfb: np.ndarray
    q_b: int
    truncation_tol: float = 0.0
    riesz: RieszConstants | None = None

    @property
    def n(self):
        return self.cbb.shape[0] // self.q_b

    @property
    def q_f(self):
        return self.cff.shape[0]

    def prefix(self, n):
        """Gramians of the first ``n`` basis functions."""
        m = n * self.q_b
        return OfflineGramians(self.cff, self.cbb[:m, :m], self.cfb[:, :m], self.q_b, self.truncation_tol, self.riesz)

    def check(self, tol=1e-10):
        for name, mat in (("Cff", self.cff), ("Cbb", self.cbb)):
            if mat.size and not np.allclose(mat, mat.T, atol=tol * max(1.0, np.abs(mat).max())):
                raise EstimatorError(f"{name} is not symmetric")
            if mat.size and np.linalg.eigvalsh(0.5 * (mat + mat.T))[0] < -tol * max(1.0, np.abs(mat).max()):
                raise EstimatorError(f"{name} is not positive semidefinite")
        if self.cfb.shape != (self.q_f, self.cbb.shape[0]):
            raise EstimatorError("inconsistent Gramian dimensions")


class GramianBuilder:
    """Keeps the coefficient vectors and extends the Gramians one basis function at a time."""

    def __init__(self, rhs_vectors, q_b, truncation_tol=0.0, riesz=None):
        self.rhs = [np.asarray(v, dtype=float).ravel() for v in rhs_vectors]
        self.q_b = q_b
        self.columns = []
        self.truncation_tol = truncation_tol
        self.riesz = riesz
        f = np.array(self.rhs)
        self._cff = f @ f.T
        self._cbb = np.zeros((0, 0))
        self._cfb = np.zeros((len(self.rhs), 0))

    def append(self, columns):
        """Add the ``q_b`` column vectors of one new basis function."""
        if len(columns) != self.q_b:
            raise ValueError("one column per operator component is required")
        new = np.array([np.asarray(c, dtype=float).ravel() for c in columns])
        old = np.array(self.columns) if self.columns else np.zeros((0, new.shape[1]))
        cross = old @ new.T
        corner = new @ new.T
        m = self._cbb.shape[0]
        cbb = np.zeros((m + self.q_b, m + self.q_b))
        cbb[:m, :m] = self._cbb
        cbb[:m, m:] = cross
        cbb[m:, :m] = cross.T
        cbb[m:, m:] = corner
        self._cbb = cbb
        self._cfb = np.hstack([self._cfb, np.array(self.rhs) @ new.T])
        self.columns.extend(new)

    @property
    def gramians(self):
        return OfflineGramians(self._cff.copy(), self._cbb.copy(), self._cfb.copy(), self.q_b, self.truncation_tol, self.riesz)


def build_gramians(rhs_vectors, column_vectors, q_b, truncation_tol=0.0, riesz=None):
    """Batch construction; ``column_vectors`` is a list (per basis function) of ``q_b`` arrays."""
    f = np.array([np.asarray(v, dtype=float).ravel() for v in rhs_vectors])
    cols = [np.asarray(c, dtype=float).ravel() for group in column_vectors for c in group]
    b = np.array(cols) if cols else np.zeros((0, f.shape[1]))
    return OfflineGramians(f @ f.T, b @ b.T, f @ b.T, q_b, truncation_tol, riesz)


# ---------------------------------------------------------------------------
# Online evaluation


def residual_norm_squared(theta_f, theta_b, u_n, gramians):
    """Squared coefficient norm of f(mu) - B(mu) u_N, clamped for roundoff."""
    theta_f = np.asarray(theta_f, dtype=float)
    w = np.outer(np.asarray(u_n, dtype=float), np.asarray(theta_b, dtype=float)).ravel()
    ff = theta_f @ gramians.cff @ theta_f
    bb = w @ gramians.cbb @ w if w.size else 0.0
    fb = theta_f @ gramians.cfb @ w if w.size else 0.0
    radicand = ff - 2 * fb + bb
    scale = max(ff + bb, 1e-300)
    if radicand < -1e-8 * scale:
        raise EstimatorError(f"negative residual norm {radicand:.3e} (scale {scale:.3e})")
    return max(radicand, 0.0)


def residual_norms_squared(theta_f, theta_b, u_n, gramians):
    """Row-wise version of ``residual_norm_squared`` for stacked parameters."""
    theta_f = np.atleast_2d(np.asarray(theta_f, dtype=float))
    theta_b = np.atleast_2d(np.asarray(theta_b, dtype=float))
    u_n = np.asarray(u_n, dtype=float).reshape(len(theta_f), -1)
    w = (u_n[:, :, None] * theta_b[:, None, :]).reshape(len(theta_f), -1)
    ff = np.einsum("pa,ab,pb->p", theta_f, gramians.cff, theta_f)
    bb = np.einsum("pi,ij,pj->p", w, gramians.cbb, w) if w.shape[1] else np.zeros(len(ff))
    fb = np.einsum("pa,ai,pi->p", theta_f, gramians.cfb, w) if w.shape[1] else np.zeros(len(ff))
    radicand = ff - 2 * fb + bb
    scale = np.maximum(ff + bb, 1e-300)
    bad = radicand < -1e-8 * scale
    if np.any(bad):
        k = int(np.argmax(bad))
        raise EstimatorError(f"negative residual norm {radicand[k]:.3e} (scale {scale[k]:.3e})")
    return np.maximum(radicand, 0.0)


def surrogate_dual_norm(theta_f, theta_b, u_n, gramians, riesz=None):
    """Coefficient norm of the reduced residual divided by the upper Riesz constant."""
    riesz = riesz or gramians.riesz
    if riesz is None:
        raise EstimatorError("Riesz constants are required")
    return math.sqrt(residual_norm_squared(theta_f, theta_b, u_n, gramians)) / riesz.upper


def error_bound(dual_norm, stability):
    if not stability > 0:
        raise EstimatorError("stability bound must be positive")
    return dual_norm / stability


@dataclass(frozen=True)
class EffectivityConstants:
    lower: float
    upper: float

    @classmethod
    def from_riesz(cls, riesz, trunc_factor=0.0):
        trunc_factor = min(max(trunc_factor, 0.0), 0.5)
        return cls(riesz.ratio * (1 - trunc_factor), 1 + trunc_factor)

    def to_dict(self):
        return {"lower": self.lower, "upper": self.upper}
