"""Adaptive weak-greedy training with per-parameter snapshot tolerances."""
from __future__ import annotations

import csv
import enum
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .awgm import AwgmConfig, AwgmError, ErrorMeasure, solve
from .estimator import EffectivityConstants, RieszConstants, space_riesz_constants
from .rb import NearDependenceError, ReducedSpace, Solver, batch_evaluate, parameter_data

log = logging.getLogger(__name__)


class EpsilonRule(enum.Enum):
    NORM = "NormRule"
    ELLIPTIC_NORM = "EllipticNormRule"
    ELLIPTIC_RESIDUAL = "EllipticResidualRule"
    OPTIMAL_RESIDUAL = "OptimalResidualRule"
    NORMAL_EQ_RESIDUAL = "NormalEqResidualRule"

    @property
    def elliptic(self):
        return self in (EpsilonRule.ELLIPTIC_NORM, EpsilonRule.ELLIPTIC_RESIDUAL)


class ConfigurationError(ValueError):
    pass


class GreedyError(RuntimeError):
    """A snapshot solve failed; ``trace`` holds the iterations completed so far."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


def surrogate_constant(rule, mu, bounds, C_delta=1.0):
    """Factor linking the snapshot error measure to the estimator at a snapshot parameter."""
    rule = EpsilonRule(rule)
    beta = bounds.beta(mu)
    if rule.elliptic:
        if not bounds.coercive:
            raise ConfigurationError(f"{rule.value} needs a coercive problem")
        alpha, gamma = bounds.alpha(mu), bounds.gamma(mu)
        if rule is EpsilonRule.ELLIPTIC_NORM:
            return C_delta * (gamma / alpha) ** 1.5
        return C_delta * math.sqrt(gamma) / alpha**1.5
    if rule is EpsilonRule.NORM:
        return C_delta * bounds.gamma(mu) ** 2 / beta**2
    if rule is EpsilonRule.OPTIMAL_RESIDUAL:
        return C_delta / beta
    return C_delta / beta**2


def epsilon_of_mu(rule, mu, tol, c_delta, C_delta, bounds):
    return tol * c_delta / surrogate_constant(rule, mu, bounds, C_delta)


@dataclass(frozen=True)
class GreedyConfig:
    tol: float
    n_max: int
    grid: tuple
    measure: ErrorMeasure | None = None
    epsilon_rule: str | None = None
    c_delta: float = 1.0
    C_delta: float = 1.0
    effectivity: str = "fixed"
    constant_eps: float | None = None
    solver: Solver = Solver.GALERKIN
    orthonormalize: bool = True
    supremizers: bool = False
    trunc_tol: float = 1e-8
    riesz_tol: float = 1e-8
    awgm: AwgmConfig | None = None

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(tuple(float(v) for v in mu) for mu in self.grid))
        object.__setattr__(self, "solver", Solver(self.solver))
        if self.measure is not None:
            object.__setattr__(self, "measure", ErrorMeasure(self.measure))
        if self.epsilon_rule is not None:
            EpsilonRule(self.epsilon_rule)
        if not self.tol > 0:
            raise ConfigurationError("greedy tolerance must be positive")
        if self.n_max < 1:
            raise ConfigurationError("n_max must be at least 1")
        if not self.grid:
            raise ConfigurationError("training grid is empty")
        if self.effectivity not in ("fixed", "riesz"):
            raise ConfigurationError("effectivity mode must be 'fixed' or 'riesz'")
        if not 0 < self.c_delta <= self.C_delta:
            raise ConfigurationError("need 0 < c_delta <= C_delta")
        if self.constant_eps is not None and not self.constant_eps > 0:
            raise ConfigurationError("constant tolerance must be positive")

    @classmethod
    def for_problem(cls, problem, tol, n_max=50, grid="train", **kwargs):
        points = problem.grid(grid) if isinstance(grid, str) else grid
        kwargs.setdefault("awgm", AwgmConfig(bulk=problem.bulk))
        return cls(tol, n_max, points, **kwargs)

    def resolved(self, problem):
        """Measure and rule with the problem defaults filled in."""
        return self.measure or problem.measure, EpsilonRule(self.epsilon_rule or problem.epsilon_rule)

    def to_dict(self):
        out = asdict(self)
        out["grid"] = [list(mu) for mu in self.grid]
        out["measure"] = self.measure.value if self.measure else None
        out["solver"] = self.solver.value
        out["awgm"] = self.awgm.to_dict() if self.awgm else None
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["grid"] = tuple(tuple(mu) for mu in data["grid"])
        data["awgm"] = AwgmConfig(**data["awgm"]) if data.get("awgm") else None
        return cls(**data)


@dataclass
class GreedyStep:
    n: int
    mu: tuple
    max_estimator: float
    eps: float
    support_size: int
    ratio: float = float("nan")
    seconds: float = 0.0
    sweep_seconds: float = 0.0
    awgm_iterations: int = 0


@dataclass
class GreedyTrace:
    steps: list = field(default_factory=list)
    max_history: list = field(default_factory=list)
    argmax_history: list = field(default_factory=list)
    status: str = "running"
    c_delta: float = 1.0
    C_delta: float = 1.0
    riesz: RieszConstants | None = None

    @property
    def converged(self):
        return self.status in ("converged", "multiple_selection")

    @property
    def final_max(self):
        return self.max_history[-1] if self.max_history else float("nan")

    @property
    def selected(self):
        return [s.mu for s in self.steps]

    @property
    def n(self):
        return len(self.steps)

    CSV_COLUMNS = ("N", "mu", "max_estimator", "ratio", "eps_mu", "support_size", "seconds")

    def to_csv(self):
        dim = len(self.steps[0].mu) if self.steps else 0
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["N", *[f"mu{k + 1}" for k in range(dim)], "max_estimator", "ratio", "eps_mu", "support_size", "seconds"])
        for s in self.steps:
            writer.writerow([s.n, *[repr(v) for v in s.mu], repr(s.max_estimator), repr(s.ratio), repr(s.eps), s.support_size, f"{s.seconds:.3f}"])
        return buf.getvalue()

    def to_dict(self):
        return {
            "status": self.status,
            "c_delta": self.c_delta,
            "C_delta": self.C_delta,
            "riesz": self.riesz.to_dict() if self.riesz else None,
            "max_history": list(self.max_history),
            "argmax_history": [list(mu) for mu in self.argmax_history],
            "steps": [dict(asdict(s), mu=list(s.mu)) for s in self.steps],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        steps = [GreedyStep(**dict(s, mu=tuple(s["mu"]))) for s in data["steps"]]
        riesz = RieszConstants.from_dict(data["riesz"]) if data.get("riesz") else None
        return cls(
            steps,
            list(data["max_history"]),
            [tuple(mu) for mu in data["argmax_history"]],
            data["status"],
            data["c_delta"],
            data["C_delta"],
            riesz,
        )


def _effectivity(config, riesz, current_max):
    if config.effectivity == "fixed":
        return config.c_delta, config.C_delta
    factor = config.trunc_tol / current_max if current_max > 0 else 0.0
    eff = EffectivityConstants.from_riesz(riesz, factor)
    return eff.lower, eff.upper


def train(problem, config, riesz=None, progress=None):
    """Greedy loop; returns the reduced space (holding the model) and the trace."""
    measure, rule = config.resolved(problem)
    if config.constant_eps is None:
        # rule/problem compatibility is checked before any expensive work
        surrogate_constant(rule, config.grid[0], problem.bounds)
    awgm_config = config.awgm or AwgmConfig(bulk=problem.bulk)
    if riesz is None:
        start = time.perf_counter()
        riesz = space_riesz_constants(problem.discretization.test)
        log.info("Riesz constants %.4f, %.4f in %.1f s", riesz.lower, riesz.upper, time.perf_counter() - start)
    space = ReducedSpace(
        problem,
        orthonormalize=config.orthonormalize,
        supremizers=config.supremizers,
        riesz=riesz,
        trunc_tol=config.trunc_tol,
        riesz_tol=config.riesz_tol,
        awgm_config=awgm_config,
        solver=config.solver,
    )
    grid = list(config.grid)
    data = parameter_data(problem, grid, on_outside="warn")
    trace = GreedyTrace(riesz=riesz)
    while True:
        start = time.perf_counter()
        _, estimates = batch_evaluate(space.model(), grid, riesz, data=data)
        sweep_seconds = time.perf_counter() - start
        k = int(np.argmax(estimates))  # first maximum in grid order
        mu, current = grid[k], float(estimates[k])
        trace.max_history.append(current)
        trace.argmax_history.append(mu)
        c_delta, C_delta = _effectivity(config, riesz, current)
        trace.c_delta, trace.C_delta = c_delta, C_delta
        if progress:
            progress(space.n, mu, current)
        if current < c_delta * config.tol:
            trace.status = "converged"
            break
        if mu in space.samples:
            trace.status = "multiple_selection"
            break
        if space.n >= config.n_max:
            trace.status = "unconverged"
            break
        eps = config.constant_eps or epsilon_of_mu(rule, mu, config.tol, c_delta, C_delta, problem.bounds)
        start = time.perf_counter()
        try:
            snap = solve(
                problem.system(mu),
                eps,
                measure,
                awgm_config,
                riesz_lower=riesz.lower,
                stability_lower=problem.bounds.beta(mu),
                mu=mu,
            )
        except AwgmError as exc:
            trace.status = "failed"
            raise GreedyError(f"snapshot solve at {mu} failed: {exc}", trace) from exc
        try:
            space.add_snapshot(snap, mu)
        except NearDependenceError:
            trace.status = "multiple_selection"
            break
        seconds = time.perf_counter() - start
        trace.steps.append(
            GreedyStep(space.n, mu, current, eps, snap.size, seconds=seconds, sweep_seconds=sweep_seconds, awgm_iterations=len(snap.report.iterations))
        )
        log.info("N=%d mu=%s max=%.3e eps=%.2e support=%d (%.1f s)", space.n, mu, current, eps, snap.size, seconds)
    for i, step in enumerate(trace.steps):
        step.ratio = float(space.snapshot_residual_ratio(i))
    return space, trace


@dataclass
class TestsetReport:
    grid: list
    max_per_n: list
    mean_per_n: list
    argmax_per_n: list
    final_estimates: np.ndarray
    seconds: float

    @property
    def max_estimator(self):
        return self.max_per_n[-1]

    @property
    def argmax(self):
        return self.argmax_per_n[-1]

    @property
    def mean_estimator(self):
        return self.mean_per_n[-1]

    def curves_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["N", "max_estimator", "mean_estimator", *[f"argmax_mu{k + 1}" for k in range(len(self.grid[0]))]])
        for n, (mx, mean, arg) in enumerate(zip(self.max_per_n, self.mean_per_n, self.argmax_per_n)):
            writer.writerow([n, repr(mx), repr(mean), *[repr(v) for v in arg]])
        return buf.getvalue()


def evaluate_testset(model, grid, riesz=None, solver=None, sizes=None, on_outside="warn"):
    """Estimator statistics on a parameter grid for every prefix basis N = 0..N_final."""
    riesz = riesz or model.riesz
    grid = [tuple(mu) for mu in grid]
    data = parameter_data(model.problem, grid, on_outside)
    sizes = range(model.n + 1) if sizes is None else sizes
    maxima, means, argmaxes = [], [], []
    start = time.perf_counter()
    estimates = None
    for n in sizes:
        _, estimates = batch_evaluate(model.prefix(n), grid, riesz, solver, data=data)
        k = int(np.argmax(estimates))
        maxima.append(float(estimates[k]))
        means.append(float(estimates.mean()))
        argmaxes.append(grid[k])
    return TestsetReport(grid, maxima, means, argmaxes, estimates, time.perf_counter() - start)
