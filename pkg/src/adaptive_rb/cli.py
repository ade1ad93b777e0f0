"""Command-line driver: train, evaluate, sweep, inspect and selftest."""
from __future__ import annotations

import csv
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import click
import numpy as np

from . import __version__, modelfile, selftest
from .awgm import AwgmConfig
from .estimator import RieszConstants
from .greedy import GreedyConfig, GreedyError, evaluate_testset, train
from .operator import DomainError
from .problems import PRESETS, ProblemSpec, load_problem
from .rb import online_evaluate

EXIT_UNCONVERGED = 3
EXIT_SNAPSHOT_FAILED = 4

MODEL_FILE = "model.arb"


@dataclass
class RunConfig:
    problem: str
    levels: tuple | None
    greedy: dict
    riesz: dict | None = None
    out: str = "run"
    version: str = __version__
    problem_spec: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        data["levels"] = tuple(data["levels"]) if data.get("levels") else None
        return cls(**data)


def _floats(text):
    return tuple(float(v) for v in text.replace(";", ",").split(","))


def _problem(name, levels):
    problem = load_problem(name)
    return problem.with_levels(levels) if levels else problem


def _write(path, text):
    if path in (None, "-"):
        click.echo(text, nl=False)
    else:
        Path(path).write_text(text)


def _load_model(path):
    try:
        model, extra = modelfile.load(path)
    except (OSError, modelfile.ModelFileError) as exc:
        raise click.ClickException(f"cannot read model {path}: {exc}") from exc
    return model, extra


def _is_number(text):
    try:
        float(text)
    except ValueError:
        return False
    return True


def _read_grid(path, dim):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if rows and not _is_number(rows[0][0]):
        rows = rows[1:]  # header line
    return [tuple(float(v) for v in r[:dim]) for r in rows]


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Certified reduced-basis models with adaptive wavelet snapshots."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)


@main.command("train")
@click.option("--problem", default="thermal-block", help=f"Preset ({', '.join(PRESETS)}) or problem JSON path.")
@click.option("--tol", type=float, default=1e-4, show_default=True, help="Greedy tolerance.")
@click.option("--n-max", type=int, default=50, show_default=True)
@click.option("--grid", "grid_name", default="train", show_default=True, help="Grid preset name or CSV file of parameters.")
@click.option("--levels", default=None, help="Level caps per direction, e.g. 7,7.")
@click.option("--measure", default=None, help="Snapshot error measure (problem default if omitted).")
@click.option("--rule", default=None, help="Snapshot tolerance rule (problem default if omitted).")
@click.option("--constant-eps", type=float, default=None, help="Use one snapshot tolerance for every parameter.")
@click.option("--effectivity", type=click.Choice(["fixed", "riesz"]), default="fixed", show_default=True)
@click.option("--c-delta", type=float, default=1.0, show_default=True)
@click.option("--C-delta", "C_delta", type=float, default=1.0, show_default=True)
@click.option("--solver", type=click.Choice(["Galerkin", "PetrovSupremizer", "NormalEq"]), default="Galerkin", show_default=True)
@click.option("--orthonormalize/--raw", default=True, show_default=True)
@click.option("--bulk", type=float, default=None, help="Bulk-chasing fraction (problem default if omitted).")
@click.option("--trunc-tol", type=float, default=1e-8, show_default=True)
@click.option("--riesz", "riesz_text", default=None, help="Known Riesz constants 'lower,upper' of the test basis.")
@click.option("--from-manifest", type=click.Path(exists=True, dir_okay=False), default=None, help="Re-run a recorded run.")
@click.option("--out", default="run", show_default=True, type=click.Path(file_okay=False))
def train_cmd(problem, tol, n_max, grid_name, levels, measure, rule, constant_eps, effectivity, c_delta, C_delta, solver,
              orthonormalize, bulk, trunc_tol, riesz_text, from_manifest, out):
    """Run the greedy and write model.arb, trace.csv, trace.json and manifest.json."""
    if from_manifest:
        run = RunConfig.from_json(Path(from_manifest).read_text())
        spec = ProblemSpec.from_dict(run.problem_spec)
        config = GreedyConfig.from_dict(run.greedy)
        riesz = RieszConstants.from_dict(run.riesz) if run.riesz else None
        run.out = out
    else:
        levels = tuple(int(v) for v in levels.split(",")) if levels else None
        spec = _problem(problem, levels)
        if Path(grid_name).is_file():
            grid = _read_grid(grid_name, spec.dim)
        elif grid_name in spec.presets:
            grid = spec.grid(grid_name)
        else:
            raise click.BadParameter(f"unknown grid {grid_name!r}", param_hint="--grid")
        config = GreedyConfig(
            tol,
            n_max,
            grid,
            measure=measure,
            epsilon_rule=rule,
            c_delta=c_delta,
            C_delta=C_delta,
            effectivity=effectivity,
            constant_eps=constant_eps,
            solver=solver,
            orthonormalize=orthonormalize,
            trunc_tol=trunc_tol,
            awgm=AwgmConfig(bulk=bulk if bulk is not None else spec.bulk),
        )
        riesz = RieszConstants(*_floats(riesz_text)) if riesz_text else None
        run = RunConfig(problem, levels, config.to_dict(), out=out)
    run.problem_spec = spec.to_dict()
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        space, trace = train(spec, config, riesz)
    except GreedyError as exc:
        (out_dir / "trace.json").write_text(exc.trace.to_json())
        (out_dir / "trace.csv").write_text(exc.trace.to_csv())
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_SNAPSHOT_FAILED)
    run.riesz = trace.riesz.to_dict()
    model = space.model()
    modelfile.save(out_dir / MODEL_FILE, model, {"status": trace.status, "tol": config.tol})
    (out_dir / "trace.csv").write_text(trace.to_csv())
    (out_dir / "trace.json").write_text(trace.to_json())
    (out_dir / "manifest.json").write_text(run.to_json())
    click.echo(f"{spec.name}: N = {model.n}, status {trace.status}, final max estimator {trace.final_max:.4e} "
               f"({time.perf_counter() - start:.1f} s)")
    if trace.status == "unconverged":
        sys.exit(EXIT_UNCONVERGED)


def _parameters(model, mus, grid_file, preset):
    points = [_floats(m) for m in mus]
    if grid_file:
        points += _read_grid(grid_file, model.problem.dim)
    if preset:
        points += model.problem.grid(preset)
    if not points:
        raise click.UsageError("give --mu, --grid-file or --preset")
    return points


@main.command("evaluate")
@click.argument("model_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--mu", "mus", multiple=True, help="Parameter, e.g. '0.5,3'. Repeatable.")
@click.option("--grid-file", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--preset", default=None, help="Grid preset of the model's problem.")
@click.option("--strict", is_flag=True, help="Reject parameters outside the parameter box.")
@click.option("--out", default="-", show_default=True)
def evaluate_cmd(model_path, mus, grid_file, preset, strict, out):
    """Online evaluation: reduced coefficients and error estimator per parameter."""
    model, _ = _load_model(model_path)
    points = _parameters(model, mus, grid_file, preset)
    dim, n = model.problem.dim, model.n
    lines = [",".join([*[f"mu{k + 1}" for k in range(dim)], *[f"u{i + 1}" for i in range(n)], "estimator", "seconds"])]
    for mu in points:
        start = time.perf_counter()
        try:
            sol, bound = online_evaluate(model, mu, model.riesz, on_outside="raise" if strict else "warn")
        except DomainError as exc:
            raise click.ClickException(str(exc)) from exc
        seconds = time.perf_counter() - start
        lines.append(",".join([*[repr(v) for v in mu], *[repr(float(v)) for v in sol.u_n], repr(float(bound)), f"{seconds:.6f}"]))
    _write(out, "\n".join(lines) + "\n")


@main.command("sweep")
@click.argument("model_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--preset", default="test", show_default=True)
@click.option("--grid-file", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", default="-", show_default=True)
def sweep_cmd(model_path, preset, grid_file, out):
    """Max and mean estimator over a grid for every basis size N = 0..N_final."""
    model, _ = _load_model(model_path)
    grid = _read_grid(grid_file, model.problem.dim) if grid_file else model.problem.grid(preset)
    report = evaluate_testset(model, grid)
    _write(out, report.curves_csv())
    click.echo(f"N = {model.n}: max {report.max_estimator:.4e} at {report.argmax}, mean {report.mean_estimator:.4e} "
               f"over {len(grid)} parameters ({report.seconds:.2f} s)", err=True)


@main.command("inspect")
@click.argument("model_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default="-", show_default=True, help="CSV of support centres and coefficient magnitudes.")
def inspect_cmd(model_path, out):
    """Summary of a model plus support-centre scatter data of its snapshots."""
    model, extra = _load_model(model_path)
    problem = model.problem
    click.echo(f"problem {problem.name}, levels {problem.max_levels}, N = {model.n}, solver {model.solver.value}, "
               f"status {extra.get('status', 'unknown')}", err=True)
    for i, (mu, snap, eps) in enumerate(zip(model.samples, model.snapshots, model.epsilons)):
        eps_text = f"{eps:.3e}" if eps is not None else "n/a"
        click.echo(f"  {i + 1:3d}  mu = {mu}  eps = {eps_text}  support = {len(snap)}", err=True)
    dim = problem.dim
    coords = ["x", "y", "z"][:dim] if dim <= 3 else [f"x{k + 1}" for k in range(dim)]
    lines = [",".join(["snapshot", *[f"mu{k + 1}" for k in range(dim)], *coords, "abs_coef"])]
    if model.snapshots:
        universe = problem.discretization.trial.basis
        for i, (mu, snap) in enumerate(zip(model.samples, model.snapshots)):
            mask = universe.mask(snap.index_set())
            centers = universe.support_centers(mask)
            values = np.abs(universe.dense(snap)[mask])
            for c, v in zip(centers, values):
                lines.append(",".join([str(i + 1), *[repr(m) for m in mu], *[f"{x:.6g}" for x in c], repr(float(v))]))
    _write(out, "\n".join(lines) + "\n")


@main.command("selftest")
def selftest_cmd():
    """Run the invariant suites."""
    start = time.perf_counter()
    ok = selftest.run(click.echo)
    click.echo(f"{'all suites passed' if ok else 'FAILURES'} in {time.perf_counter() - start:.1f} s")
    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
