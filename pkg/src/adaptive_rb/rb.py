"""Reduced spaces built from adaptive snapshots, reduced systems and their diagnostics."""
from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from .awgm import AwgmConfig, riesz_solve
from .estimator import (
    GramianBuilder,
    OfflineGramians,
    RieszConstants,
    level_truncation,
    residual_norms_squared,
    surrogate_dual_norm,
    truncate,
)
from .operator import evaluate_thetas


class Solver(enum.Enum):
    GALERKIN = "Galerkin"
    PETROV_SUPREMIZER = "PetrovSupremizer"
    NORMAL_EQ = "NormalEq"


class NearDependenceError(ValueError):
    """A new snapshot lies (numerically) in the span of the current basis."""


class ReducedSolveError(ArithmeticError):
    pass


DEPENDENCE_TOL = 1e-10
CONDITION_LIMIT = 1e14


class TrialEmbedding:
    """Trial coordinates re-expressed in the test basis (trial functions are test functions too)."""

    def __init__(self, disc):
        self.disc = disc
        self.identity = disc.trial == disc.test
        if self.identity:
            return
        trial, test = disc.trial.basis, disc.test.basis
        codes = trial.codes_at(np.nonzero(trial.full_mask()))
        if not np.all(test.contains(codes)):
            raise ValueError("trial functions are not contained in the test universe")
        self.positions = np.ravel_multi_index(test.positions(codes), test.shape)
        self.factor = disc.trial.scale.ravel() / disc.test.scale.ravel()[self.positions]

    def __call__(self, x):
        if self.identity:
            return x
        out = np.zeros(self.disc.test.basis.size)
        out[self.positions] = np.asarray(x).ravel() * self.factor
        return out.reshape(self.disc.test.shape)


def _grow(mat, shape):
    out = np.zeros(shape)
    out[tuple(slice(0, s) for s in mat.shape)] = mat
    return out


@dataclass
class ReducedBlocks:
    """Parameter-independent reduced quantities.

    ``galerkin[q, i, j]`` is b_q(zeta_j, zeta_i) with zeta_i read as a test
    function, ``rhs[a, i]`` is f_a(zeta_i), ``coords[:, i]`` holds the
    coefficients of the i-th raw snapshot in the basis.  The supremizer
    blocks are indexed by (basis function, component) pairs.
    """

    q_b: int
    q_f: int
    galerkin: np.ndarray
    rhs: np.ndarray
    zeta_gram: np.ndarray
    test_gram: np.ndarray
    coords: np.ndarray
    petrov: np.ndarray | None = None
    eta_rhs: np.ndarray | None = None
    eta_gram: np.ndarray | None = None

    @classmethod
    def empty(cls, q_b, q_f, supremizers=False):
        sup = (np.zeros((0, q_b, q_b, 0)), np.zeros((0, q_b, q_f)), np.zeros((0, q_b, 0, q_b))) if supremizers else (None,) * 3
        return cls(q_b, q_f, np.zeros((q_b, 0, 0)), np.zeros((q_f, 0)), np.zeros((0, 0)), np.zeros((0, 0)), np.zeros((0, 0)), *sup)

    @property
    def n(self):
        return self.zeta_gram.shape[0]

    @property
    def supremizers(self):
        return self.petrov is not None

    def prefix(self, n):
        if n > self.n:
            raise ValueError(f"only {self.n} basis functions available")
        sup = (None,) * 3
        if self.supremizers:
            sup = (self.petrov[:n, :, :, :n], self.eta_rhs[:n], self.eta_gram[:n, :, :n])
        return ReducedBlocks(
            self.q_b,
            self.q_f,
            self.galerkin[:, :n, :n],
            self.rhs[:, :n],
            self.zeta_gram[:n, :n],
            self.test_gram[:n, :n],
            self.coords[:n, :n],
            *sup,
        )

    def arrays(self):
        out = {
            "galerkin": self.galerkin,
            "rhs": self.rhs,
            "zeta_gram": self.zeta_gram,
            "test_gram": self.test_gram,
            "coords": self.coords,
        }
        if self.supremizers:
            out.update(petrov=self.petrov, eta_rhs=self.eta_rhs, eta_gram=self.eta_gram)
        return out

    @classmethod
    def from_arrays(cls, q_b, q_f, arrays):
        sup = tuple(arrays.get(k) for k in ("petrov", "eta_rhs", "eta_gram"))
        return cls(q_b, q_f, arrays["galerkin"], arrays["rhs"], arrays["zeta_gram"], arrays["test_gram"], arrays["coords"], *sup)


@dataclass
class ReducedSolution:
    mu: tuple
    u_n: np.ndarray
    solver: Solver

    def __post_init__(self):
        if not np.all(np.isfinite(self.u_n)):
            raise ReducedSolveError(f"non-finite reduced solution at {self.mu}")


@dataclass
class ReducedModel:
    """Everything the online stage needs, plus the sparse snapshots for inspection."""

    problem: object
    blocks: ReducedBlocks
    gramians: OfflineGramians
    samples: list = field(default_factory=list)
    solver: Solver = Solver.GALERKIN
    riesz: RieszConstants | None = None
    snapshots: list = field(default_factory=list)
    epsilons: list = field(default_factory=list)

    @property
    def n(self):
        return self.blocks.n

    def prefix(self, n):
        return replace(
            self,
            blocks=self.blocks.prefix(n),
            gramians=self.gramians.prefix(n),
            samples=self.samples[:n],
            snapshots=self.snapshots[:n],
            epsilons=self.epsilons[:n],
        )


# ---------------------------------------------------------------------------
# Offline: the growing reduced space


class ReducedSpace:
    """Snapshots, their (optionally orthonormalised) basis and incrementally extended blocks."""

    def __init__(
        self,
        problem,
        *,
        orthonormalize=True,
        supremizers=False,
        riesz=None,
        trunc_tol=1e-8,
        riesz_tol=1e-8,
        awgm_config=None,
        solver=None,
    ):
        self.problem = problem
        self.disc = problem.discretization
        self.orthonormalize = orthonormalize
        self.trunc_tol = trunc_tol
        self.riesz_tol = riesz_tol
        self.awgm_config = awgm_config or AwgmConfig(bulk=problem.bulk, max_iter=300)
        # reduced test space defaults to the trial span, also for rectangular problems
        self.solver = Solver(solver or Solver.GALERKIN)
        self.operators = [self.disc.component(c) for c in problem.operator.components]
        self.rhs_vectors = problem.parametric_rhs.vectors
        self.q_b, self.q_f = len(self.operators), len(self.rhs_vectors)
        self.embed = TrialEmbedding(self.disc)
        self.basis = []
        self.embedded = []
        self.snapshots = []
        self.samples = []
        self.eta = []
        self.riesz_solves = 0
        self.truncations = []
        self.blocks = ReducedBlocks.empty(self.q_b, self.q_f, bool(supremizers))
        self.builder = GramianBuilder(self._truncated(self.rhs_vectors), self.q_b, trunc_tol, riesz)

    @property
    def n(self):
        return len(self.basis)

    @property
    def gramians(self):
        return self.builder.gramians

    def model(self):
        trial = self.disc.trial.basis
        coeffs = [getattr(s, "coeffs", None) or trial.coeff_vector(s.array) for s in self.snapshots]
        epsilons = [getattr(s, "target", None) for s in self.snapshots]
        return ReducedModel(
            self.problem, self.blocks, self.gramians, list(self.samples), self.solver, self.builder.riesz, coeffs, epsilons
        )

    def _truncated(self, vectors):
        if not self.trunc_tol:
            return list(vectors)
        out = []
        universe = self.disc.test.basis
        for v in vectors:
            peak = np.abs(v).max()
            if peak == 0:
                out.append(v)
                continue
            info = level_truncation(v, universe, self.trunc_tol * peak)
            self.truncations.append(info)
            out.append(truncate(v, universe, info))
        return out

    def _orthogonal_part(self, v):
        """Two passes of classical Gram-Schmidt; returns (coefficients, remainder)."""
        coef = np.zeros(self.n)
        w = v.copy()
        for _ in range(2):
            if not self.basis:
                break
            if self.orthonormalize:
                c = np.array([np.sum(b * w) for b in self.basis])
                w = w - sum(ci * b for ci, b in zip(c, self.basis))
            else:
                rhs = np.array([np.sum(b * w) for b in self.basis])
                c = np.linalg.solve(self.blocks.zeta_gram, rhs)
                w = w - sum(ci * b for ci, b in zip(c, self.basis))
            coef += c
        return coef, w

    def add_snapshot(self, snapshot, mu=None):
        """Append a snapshot; returns the operator columns B_q zeta of the new basis function."""
        v = np.asarray(snapshot.array, dtype=float)
        v_norm = np.linalg.norm(v)
        if v_norm == 0:
            raise NearDependenceError("zero snapshot")
        coef, w = self._orthogonal_part(v)
        w_norm = np.linalg.norm(w)
        if w_norm < DEPENDENCE_TOL * v_norm:
            raise NearDependenceError(f"relative projection residual {w_norm / v_norm:.2e} below {DEPENDENCE_TOL:g}")
        n = self.n
        if self.orthonormalize:
            zeta = w / w_norm
            new_coords = np.append(coef, w_norm)
        else:
            zeta = v
            new_coords = np.eye(n + 1)[:, n]
        e_new = self.embed(zeta)
        cols = [op.apply(zeta) for op in self.operators]
        rows = [op.apply_transpose(e_new) for op in self.operators]

        b = self.blocks
        gal = _grow(b.galerkin, (self.q_b, n + 1, n + 1))
        for q in range(self.q_b):
            for i in range(n):
                gal[q, i, n] = np.sum(self.embedded[i] * cols[q])
                gal[q, n, i] = np.sum(rows[q] * self.basis[i])
            gal[q, n, n] = np.sum(e_new * cols[q])
        rhs = _grow(b.rhs, (self.q_f, n + 1))
        rhs[:, n] = [np.sum(f * e_new) for f in self.rhs_vectors]
        zg = _grow(b.zeta_gram, (n + 1, n + 1))
        tg = _grow(b.test_gram, (n + 1, n + 1))
        for i in range(n):
            zg[i, n] = zg[n, i] = np.sum(self.basis[i] * zeta)
            tg[i, n] = tg[n, i] = np.sum(self.embedded[i] * e_new)
        zg[n, n] = np.sum(zeta * zeta)
        tg[n, n] = np.sum(e_new * e_new)
        coords = _grow(b.coords, (n + 1, n + 1))
        coords[:, n] = new_coords
        sup = (None,) * 3
        if b.supremizers:
            sup = self._extend_supremizers(zeta, cols)
        self.blocks = ReducedBlocks(self.q_b, self.q_f, gal, rhs, zg, tg, coords, *sup)
        self.basis.append(zeta)
        self.embedded.append(e_new)
        self.snapshots.append(snapshot)
        self.samples.append(tuple(mu if mu is not None else snapshot.mu))
        self.builder.append(self._truncated(cols))
        return cols

    # -- supremizers ---------------------------------------------------------
    @functools.cached_property
    def _test_gramian(self):
        return self.problem.test_gramian()

    def _extend_supremizers(self, zeta, cols):
        b = self.blocks
        n = self.n
        gram_y = self._test_gramian
        etas = []
        for col in cols:
            snap = riesz_solve(gram_y, col, self.riesz_tol, self.awgm_config)
            self.riesz_solves += 1
            etas.append(snap.array)
        petrov = _grow(b.petrov, (n + 1, self.q_b, self.q_b, n + 1))
        eta_rhs = _grow(b.eta_rhs, (n + 1, self.q_b, self.q_f))
        eta_gram = _grow(b.eta_gram, (n + 1, self.q_b, n + 1, self.q_b))
        for p, eta in enumerate(etas):
            for q, op in enumerate(self.operators):
                back = op.apply_transpose(eta)
                for j in range(n):
                    petrov[n, p, q, j] = np.sum(back * self.basis[j])
                petrov[n, p, q, n] = np.sum(eta * cols[q])
            eta_rhs[n, p] = [np.sum(f * eta) for f in self.rhs_vectors]
        for i in range(n):
            for p in range(self.q_b):
                for q in range(self.q_b):
                    petrov[i, p, q, n] = np.sum(self.eta[i][p] * cols[q])
        all_eta = self.eta + [etas]
        for p in range(self.q_b):
            for j in range(n + 1):
                for q in range(self.q_b):
                    value = np.sum(etas[p] * all_eta[j][q])
                    eta_gram[n, p, j, q] = eta_gram[j, q, n, p] = value
        self.eta.append(etas)
        return petrov, eta_rhs, eta_gram

    # -- fine-space diagnostics ----------------------------------------------
    def reduced_function(self, u_n):
        return sum(c * z for c, z in zip(u_n, self.basis)) if len(u_n) else np.zeros(self.disc.trial.shape)

    def fine_residual(self, mu, x):
        op = self.problem.parametric_operator.at(mu, on_outside="ignore")
        return self.problem.parametric_rhs.at(mu, on_outside="ignore") - op.apply(x)

    def snapshot_residual_ratio(self, i, solver=None):
        """||r(u_N(mu^i))|| / ||r(zeta_i)|| for the i-th raw snapshot, on the whole capped test universe."""
        mu = self.samples[i]
        sol = reduced_solve(self.model(), mu, solver or self.solver)
        top = np.linalg.norm(self.fine_residual(mu, self.reduced_function(sol.u_n)))
        bottom = np.linalg.norm(self.fine_residual(mu, self.snapshots[i].array))
        if bottom == 0:
            raise ReducedSolveError("snapshot residual vanishes")
        return top / bottom


# ---------------------------------------------------------------------------
# Online stage


def theta_pair(problem, mu, on_outside="raise"):
    """(rhs thetas, operator thetas) without touching any discretisation."""
    return (
        evaluate_thetas(problem.functional, mu, problem.box, on_outside),
        evaluate_thetas(problem.operator, mu, problem.box, on_outside),
    )


def reduced_assemble(model, mu, solver=None, on_outside="raise", thetas=None):
    solver = solver or model.solver
    theta_f, theta_b = thetas or theta_pair(model.problem, mu, on_outside)
    blocks = model.blocks
    n = blocks.n
    if solver is Solver.GALERKIN:
        return np.tensordot(theta_b, blocks.galerkin, 1), theta_f @ blocks.rhs
    if solver is Solver.NORMAL_EQ:
        gram = model.gramians
        cbb = gram.cbb.reshape(n, blocks.q_b, n, blocks.q_b)
        cfb = gram.cfb.reshape(blocks.q_f, n, blocks.q_b)
        return np.einsum("iqjp,q,p->ij", cbb, theta_b, theta_b), np.einsum("aiq,a,q->i", cfb, theta_f, theta_b)
    if not blocks.supremizers:
        raise ReducedSolveError("supremizer blocks were not computed")
    mat = np.einsum("ipqj,p,q->ij", blocks.petrov, theta_b, theta_b)
    return mat, np.einsum("ipa,p,a->i", blocks.eta_rhs, theta_b, theta_f)


def _solve_dense(mat, rhs, mu):
    if mat.shape[0] == 0:
        return np.zeros(0)
    if np.linalg.cond(mat) > CONDITION_LIMIT:
        raise ReducedSolveError(f"reduced system is singular or ill-conditioned at {mu}")
    return sla.lu_solve(sla.lu_factor(mat), rhs)


def reduced_solve(model, mu, solver=None, on_outside="raise", thetas=None):
    solver = solver or model.solver
    mat, rhs = reduced_assemble(model, mu, solver, on_outside, thetas)
    return ReducedSolution(tuple(mu), _solve_dense(mat, rhs, mu), solver)


def online_evaluate(model, mu, riesz, solver=None, on_outside="warn"):
    """Reduced solution and error estimator at one parameter from stored blocks only."""
    thetas = theta_pair(model.problem, mu, on_outside)
    sol = reduced_solve(model, mu, solver, on_outside, thetas)
    dual = surrogate_dual_norm(thetas[0], thetas[1], sol.u_n, model.gramians, riesz)
    return sol, dual / model.problem.bounds.beta(mu)


def parameter_data(problem, mus, on_outside="raise"):
    """Stacked rhs thetas, operator thetas and stability lower bounds of a parameter list."""
    pairs = [theta_pair(problem, mu, on_outside) for mu in mus]
    theta_f = np.array([p[0] for p in pairs]).reshape(len(mus), -1)
    theta_b = np.array([p[1] for p in pairs]).reshape(len(mus), -1)
    beta = np.array([problem.bounds.beta(mu) for mu in mus])
    return theta_f, theta_b, beta


def batch_evaluate(model, mus, riesz, solver=None, data=None, on_outside="raise"):
    """Reduced solutions and error estimators at many parameters; rows follow ``mus``."""
    solver = solver or model.solver
    theta_f, theta_b, beta = data if data is not None else parameter_data(model.problem, mus, on_outside)
    n = model.blocks.n
    if n == 0:
        u = np.zeros((len(theta_f), 0))
    else:
        mats, rhss = zip(*(reduced_assemble(model, None, solver, thetas=(tf, tb)) for tf, tb in zip(theta_f, theta_b)))
        mats, rhss = np.array(mats), np.array(rhss)
        cond = np.linalg.cond(mats)
        if np.any(~(cond <= CONDITION_LIMIT)):
            k = int(np.argmax(~(cond <= CONDITION_LIMIT)))
            raise ReducedSolveError(f"reduced system is singular or ill-conditioned at {tuple(mus[k])}")
        u = np.linalg.solve(mats, rhss[:, :, None])[:, :, 0]
    dual = np.sqrt(residual_norms_squared(theta_f, theta_b, u, model.gramians)) / riesz.upper
    return u, dual / beta


def _cholesky(gram, what):
    try:
        return np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as exc:
        raise ReducedSolveError(f"{what} Gram matrix is not positive definite") from exc


def discrete_infsup(model, mu, solver=None, on_outside="ignore"):
    """Smallest singular value of the reduced operator in l2-surrogate norms of trial and test spans."""
    solver = solver or model.solver
    blocks = model.blocks
    if blocks.n == 0:
        raise ReducedSolveError("empty reduced space")
    theta_f, theta_b = theta_pair(model.problem, mu, on_outside)
    mat, _ = reduced_assemble(model, mu, solver, thetas=(theta_f, theta_b))
    lx = _cholesky(blocks.zeta_gram, "trial")
    if solver is Solver.NORMAL_EQ:
        # B_N here is (B Z)^T (B Z); the test span is B Z itself
        scaled = sla.solve_triangular(lx, sla.solve_triangular(lx, mat, lower=True).T, lower=True)
        return float(np.sqrt(max(np.linalg.eigvalsh(0.5 * (scaled + scaled.T))[0], 0.0)))
    if solver is Solver.GALERKIN:
        ly = _cholesky(blocks.test_gram, "test")
    else:
        eta_gram = np.einsum("ipjq,p,q->ij", blocks.eta_gram, theta_b, theta_b)
        ly = _cholesky(eta_gram, "supremizer")
    scaled = sla.solve_triangular(lx, sla.solve_triangular(ly, mat, lower=True).T, lower=True).T
    return float(np.linalg.svd(scaled, compute_uv=False)[-1])


def snapshot_reproduction_error(model, i, solver=None):
    """l2 distance between the i-th raw snapshot and the reduced solution at its parameter."""
    blocks = model.blocks
    mu = model.samples[i]
    u_n = reduced_solve(model, mu, solver, on_outside="ignore").u_n
    diff = blocks.coords[:, i] - u_n
    return float(np.sqrt(max(diff @ blocks.zeta_gram @ diff, 0.0)))
