"""Benchmark problems: affine decompositions, bases, parameter boxes and stability bounds."""
from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .awgm import ErrorMeasure, GalerkinSystem, NormalEquationSystem
from .estimator import StabilityBounds
from .index import TensorBasis
from .operator import (
    AffineBilinearOperator,
    AffineFunctional,
    Discretization,
    Factor1D,
    FunctionalComponent,
    Load1D,
    OperatorComponent,
    ParameterBox,
    ParametricOperator,
    ParametricRhs,
    SeparableTerm,
    Space,
)
from .wavelet import Boundary, Family, UnivariateBasisSpec

MASS = Factor1D("mass")
STIFF = Factor1D("stiffness")
DT = Factor1D("advection")


def _term(*factors, scale=1.0):
    return SeparableTerm(tuple(factors), scale)


def _component(*terms, name=""):
    return OperatorComponent(tuple(terms), name)


@dataclass(frozen=True)
class GridAxis:
    kind: str
    lower: float = 0.0
    upper: float = 1.0
    count: int = 1
    values: tuple = ()

    def points(self):
        if self.kind == "log":
            return np.geomspace(self.lower, self.upper, self.count)
        if self.kind == "linear":
            return np.linspace(self.lower, self.upper, self.count)
        if self.kind == "values":
            return np.array(self.values, dtype=float)
        raise ValueError(f"unknown axis kind {self.kind!r}")

    def to_dict(self):
        return {"kind": self.kind, "lower": self.lower, "upper": self.upper, "count": self.count, "values": list(self.values)}

    @classmethod
    def from_dict(cls, data):
        return cls(data["kind"], data.get("lower", 0.0), data.get("upper", 1.0), data.get("count", 1), tuple(data.get("values", ())))


def grid_points(axes):
    """Tensor grid in lexicographic order (first parameter slowest)."""
    mesh = np.meshgrid(*[a.points() for a in axes], indexing="ij")
    return [tuple(float(v) for v in p) for p in np.stack([m.ravel() for m in mesh], axis=1)]


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    trial_specs: tuple
    test_specs: tuple
    max_levels: tuple
    trial_norm: OperatorComponent
    test_norm: OperatorComponent
    operator: AffineBilinearOperator
    functional: AffineFunctional
    box: ParameterBox
    bounds: StabilityBounds
    solver: str = "galerkin"
    measure: ErrorMeasure = ErrorMeasure.DUAL_RESIDUAL
    epsilon_rule: str = "OptimalResidualRule"
    presets: dict = field(default_factory=dict, compare=False, hash=False)
    test_offset: tuple = ()
    bulk: float = 0.6

    def __post_init__(self):
        if self.solver not in ("galerkin", "normal"):
            raise ValueError("solver must be 'galerkin' or 'normal'")
        if self.functional.components[0].dim != len(self.trial_specs):
            raise ValueError("functional dimension mismatch")

    @property
    def dim(self):
        return len(self.trial_specs)

    @property
    def test_levels(self):
        offset = self.test_offset or (0,) * self.dim
        return tuple(lv + o for lv, o in zip(self.max_levels, offset))

    @property
    def same_spaces(self):
        return (
            self.trial_specs == self.test_specs
            and self.trial_norm == self.test_norm
            and self.test_levels == self.max_levels
        )

    def with_levels(self, levels):
        if isinstance(levels, int):
            levels = (levels,) * self.dim
        return replace(self, max_levels=tuple(levels))

    def grid(self, preset):
        return grid_points(self.presets[preset])

    # -- discretisation ------------------------------------------------------
    @functools.cached_property
    def discretization(self):
        trial = Space(TensorBasis(self.trial_specs, self.max_levels), self.trial_norm)
        if self.same_spaces:
            return Discretization(trial)
        return Discretization(trial, Space(TensorBasis(self.test_specs, self.test_levels), self.test_norm))

    @functools.cached_property
    def parametric_operator(self):
        return ParametricOperator(self.discretization, self.operator, self.box)

    @functools.cached_property
    def parametric_rhs(self):
        return ParametricRhs(self.discretization, self.functional, self.box)

    def system(self, mu, on_outside="warn"):
        op = self.parametric_operator.at(mu, on_outside)
        rhs = self.parametric_rhs.at(mu, on_outside)
        return GalerkinSystem(op, rhs) if self.solver == "galerkin" else NormalEquationSystem(op, rhs)

    def test_gramian(self):
        disc = self.discretization
        return Discretization(disc.test, disc.test).component(self.test_norm)

    def trial_gramian(self):
        disc = self.discretization
        return Discretization(disc.trial, disc.trial).component(self.trial_norm)

    # -- serialisation -------------------------------------------------------
    def to_dict(self):
        return {
            "name": self.name,
            "trial_specs": [s.to_dict() for s in self.trial_specs],
            "test_specs": [s.to_dict() for s in self.test_specs],
            "max_levels": list(self.max_levels),
            "trial_norm": self.trial_norm.to_dict(),
            "test_norm": self.test_norm.to_dict(),
            "operator": self.operator.to_dict(),
            "functional": self.functional.to_dict(),
            "box": self.box.to_dict(),
            "bounds": self.bounds.to_dict(),
            "solver": self.solver,
            "measure": self.measure.value,
            "epsilon_rule": self.epsilon_rule,
            "presets": {k: [a.to_dict() for a in v] for k, v in self.presets.items()},
            "test_offset": list(self.test_offset),
            "bulk": self.bulk,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        return cls(
            data["name"],
            tuple(UnivariateBasisSpec.from_dict(s) for s in data["trial_specs"]),
            tuple(UnivariateBasisSpec.from_dict(s) for s in data["test_specs"]),
            tuple(data["max_levels"]),
            OperatorComponent.from_dict(data["trial_norm"]),
            OperatorComponent.from_dict(data["test_norm"]),
            AffineBilinearOperator.from_dict(data["operator"]),
            AffineFunctional.from_dict(data["functional"]),
            ParameterBox.from_dict(data["box"]),
            StabilityBounds.from_dict(data["bounds"]),
            data.get("solver", "galerkin"),
            ErrorMeasure(data.get("measure", "DualResidual")),
            data.get("epsilon_rule", "OptimalResidualRule"),
            {k: [GridAxis.from_dict(a) for a in v] for k, v in data.get("presets", {}).items()},
            tuple(data.get("test_offset", ())),
            data.get("bulk", 0.6),
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# Thermal block

X_SPLITS = (0.0, 1 / 3, 2 / 3, 1.0)
Y_SPLITS = (0.0, 0.4, 0.8, 1.0)
THERMAL_LEVELS = (7, 7)


def source_box(i):
    """Cell of source ``i`` (1..9); numbering runs upwards in y, then along x."""
    col, row = divmod(i - 1, 3)
    return (X_SPLITS[col], X_SPLITS[col + 1]), (Y_SPLITS[row], Y_SPLITS[row + 1])


def thermal_block(levels=THERMAL_LEVELS):
    x_spec = UnivariateBasisSpec(boundary=Boundary.DIRICHLET, sobolev_scale=1.0)
    y_spec = UnivariateBasisSpec(boundary=Boundary.FREE, sobolev_scale=1.0)
    norm = _component(_term(STIFF, MASS), _term(MASS, STIFF), name="energy")

    def diffusion(lo, hi, name):
        return _component(
            _term(Factor1D("stiffness", interval=(lo, hi)), MASS),
            _term(Factor1D("mass", interval=(lo, hi)), STIFF),
            name=name,
        )

    operator = AffineBilinearOperator((diffusion(0.5, 1.0, "omega0"), diffusion(0.0, 0.5, "omega1")), ("1", "mu1"))
    sources = []
    for i in range(1, 10):
        bx, by = source_box(i)
        sources.append(FunctionalComponent((Load1D(interval=bx), Load1D(interval=by)), name=f"source{i}"))
    functional = AffineFunctional(tuple(sources), tuple(f"delta(mu2 = {i})" for i in range(1, 10)))
    return ProblemSpec(
        name="thermal-block",
        trial_specs=(x_spec, y_spec),
        test_specs=(x_spec, y_spec),
        max_levels=tuple(levels),
        trial_norm=norm,
        test_norm=norm,
        operator=operator,
        functional=functional,
        box=ParameterBox((0.01, 1), (100.0, 9), (False, True)),
        bounds=StabilityBounds("min(1, mu1)", "max(1, mu1)", "min(1, mu1)"),
        solver="galerkin",
        measure=ErrorMeasure.DUAL_RESIDUAL,
        epsilon_rule="EllipticResidualRule",
        bulk=0.9,
        presets={
            "train": [GridAxis("log", 0.01, 10.0, 20), GridAxis("values", values=tuple(range(1, 10)))],
            "test": [GridAxis("log", 0.01, 20.0, 50), GridAxis("values", values=tuple(range(1, 10)))],
        },
    )


# ---------------------------------------------------------------------------
# Space-time convection-diffusion-reaction

CDR_LEVELS = (6, 6)
# rounded-down minimum over sampled parameters of the discrete inf-sup constant over
# the coercivity/continuity ratio; reproduced by calibrate_beta0
CDR_BETA0 = 0.8
PI2 = math.pi**2


def cdr_bound_expressions(beta0):
    alpha = f"(1 + min(0, mu1/2 + mu2)/{PI2!r})"
    gamma = f"(1 + mu1/{2 * math.pi!r} + abs(mu2)/{PI2!r})"
    return StabilityBounds(f"{beta0!r}*{alpha}/{gamma}", f"sqrt(1 + {gamma}**2)")


def cdr_spacetime(levels=CDR_LEVELS, beta0=CDR_BETA0):
    t_spec = UnivariateBasisSpec(boundary=Boundary.PERIODIC)
    x_spec = UnivariateBasisSpec(boundary=Boundary.DIRICHLET, sobolev_scale=1.0)
    trial_norm = _component(_term(MASS, STIFF), _term(STIFF, Factor1D("dual_mass")), name="spacetime")
    test_norm = _component(_term(MASS, STIFF), name="bochner")
    operator = AffineBilinearOperator(
        (
            _component(_term(DT, MASS), _term(MASS, STIFF), name="heat"),
            _component(_term(MASS, Factor1D("advection", (0.5, -1.0))), name="convection"),
            _component(_term(MASS, MASS), name="reaction"),
        ),
        ("1", "mu1", "mu2"),
    )
    functional = AffineFunctional((FunctionalComponent((Load1D("cosine", frequency=1.0), Load1D()), name="forcing"),), ("1",))
    return ProblemSpec(
        name="cdr",
        trial_specs=(t_spec, x_spec),
        test_specs=(t_spec, x_spec),
        max_levels=tuple(levels),
        trial_norm=trial_norm,
        test_norm=test_norm,
        operator=operator,
        functional=functional,
        box=ParameterBox((0.0, -9.0), (30.0, 15.0)),
        bounds=cdr_bound_expressions(beta0),
        solver="normal",
        # the capped least-squares residual does not vanish, its normal-equation residual does
        measure=ErrorMeasure.NORMAL_EQ_RESIDUAL,
        epsilon_rule="NormalEqResidualRule",
        bulk=0.9,
        presets={
            "train": [GridAxis("linear", 0.0, 30.0, 20), GridAxis("linear", -9.0, 15.0, 20)],
            "test": [GridAxis("linear", 0.0, 30.0, 50), GridAxis("linear", -9.0, 15.0, 50)],
        },
        # the test side needs one more time level to contain the time derivatives of the trial side
        test_offset=(1, 0),
    )


def discrete_infsup_dense(problem, mu):
    """Inf-sup constant of the discretised operator in the true (Gramian) norms; small universes only."""
    from scipy.linalg import cholesky, svdvals, solve_triangular

    b = problem.parametric_operator.at(mu, on_outside="ignore").to_dense()
    gx = cholesky(problem.trial_gramian().to_dense(), lower=True)
    gy = cholesky(problem.test_gramian().to_dense(), lower=True)
    scaled = solve_triangular(gy, solve_triangular(gx, b.T, lower=True).T, lower=True)
    return float(svdvals(scaled)[-1])


def calibrate_beta0(levels=(3, 3), samples=None):
    """Smallest ratio of the discrete inf-sup constant to the analytic coercivity/continuity factor."""
    problem = cdr_spacetime(levels, beta0=1.0)
    if samples is None:
        samples = grid_points([GridAxis("linear", 0.0, 30.0, 4), GridAxis("linear", -9.0, 15.0, 4)])
    ratios = [discrete_infsup_dense(problem, mu) / problem.bounds.beta(mu) for mu in samples]
    return float(min(ratios))


# ---------------------------------------------------------------------------
# One-dimensional models


def poisson_1d(level=12):
    spec = UnivariateBasisSpec(boundary=Boundary.DIRICHLET, sobolev_scale=1.0)
    norm = _component(_term(STIFF), name="energy")
    return ProblemSpec(
        name="poisson-1d",
        trial_specs=(spec,),
        test_specs=(spec,),
        max_levels=(level,),
        trial_norm=norm,
        test_norm=norm,
        operator=AffineBilinearOperator((norm,), ("1",)),
        functional=AffineFunctional((FunctionalComponent((Load1D(),)),), ("1",)),
        box=ParameterBox((0.0,), (1.0,)),
        bounds=StabilityBounds("1", "1", "1"),
        solver="galerkin",
        measure=ErrorMeasure.DUAL_RESIDUAL,
        epsilon_rule="EllipticResidualRule",
        presets={"train": [GridAxis("values", values=(0.0,))]},
    )


def convection_1d(level=5):
    """Non-symmetric 1D toy: -u'' + mu1 u' + u = f with f = 1 + x."""
    spec = UnivariateBasisSpec(boundary=Boundary.DIRICHLET, sobolev_scale=1.0)
    norm = _component(_term(STIFF), name="energy")
    return ProblemSpec(
        name="convection-1d",
        trial_specs=(spec,),
        test_specs=(spec,),
        max_levels=(level,),
        trial_norm=norm,
        test_norm=norm,
        operator=AffineBilinearOperator(
            (_component(_term(STIFF), _term(MASS)), _component(_term(DT))),
            ("1", "mu1"),
        ),
        functional=AffineFunctional((FunctionalComponent((Load1D(weight=(1.0, 1.0)),)),), ("1",)),
        box=ParameterBox((0.0,), (50.0,)),
        bounds=StabilityBounds("1", "1 + mu1/3.14159", None),
        solver="normal",
        measure=ErrorMeasure.DUAL_RESIDUAL,
        epsilon_rule="OptimalResidualRule",
        presets={"train": [GridAxis("linear", 0.0, 50.0, 11)]},
    )


PRESETS = {
    "thermal-block": thermal_block,
    "cdr": cdr_spacetime,
    "poisson-1d": poisson_1d,
    "convection-1d": convection_1d,
}


def load_problem(name_or_path):
    if name_or_path in PRESETS:
        return PRESETS[name_or_path]()
    with open(name_or_path) as fh:
        return ProblemSpec.from_json(fh.read())
