"""Derivative-free benchmark harness.

Classic least-squares test problems, each available in four variants:

* ``smooth``  -- sum of squared residuals
* ``nondiff`` -- sum of absolute residuals
* ``noisy3``  -- smooth value times ``1 + eps_f * phi(x)`` with a fixed
  high-frequency oscillation ``phi``
* ``wild3``   -- smooth value times ``1 + eps_f * u`` with ``u ~ U[-1, 1]``
  drawn from a counter-based stream keyed by (problem seed, evaluation index)

Methods are compared per task by a normalized score (best 0, worst 1) and by
average rank (1 is best, ties share the mean position).
"""

import csv
import json
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.stats import rankdata

from .errors import NonFiniteValueError
from .estimators import CountingObjective, Objective, SmoothingConfig, estimate_gradient
from .seeding import counter_uniforms, derive_iteration_seed
from .trainer import bfgs_minimize

SCHEMA_SCORES = "structes.bench-scores/1"
SCHEMA_RESULTS = "structes.bench-results/1"
DEFAULT_NOISE = 1e-3


class Variant(str, Enum):
    SMOOTH = "smooth"
    NONDIFF = "nondiff"
    NOISY_DETERMINISTIC = "noisy3"
    NOISY_STOCHASTIC = "wild3"


# --- residual definitions ----------------------------------------------------

def _rosenbrock(x):
    return np.array([10 * (x[1] - x[0] ** 2), 1 - x[0]])


def _freudenstein_roth(x):
    return np.array([-13 + x[0] + ((5 - x[1]) * x[1] - 2) * x[1],
                     -29 + x[0] + ((x[1] + 1) * x[1] - 14) * x[1]])


def _beale(x):
    y = np.array([1.5, 2.25, 2.625])
    i = np.arange(1, 4)
    return y - x[0] * (1 - x[1] ** i)


def _jennrich_sampson(x):
    i = np.arange(1, 11)
    return 2 + 2 * i - (np.exp(i * x[0]) + np.exp(i * x[1]))


def _helical_valley(x):
    # angle in (-1/4, 3/4), the classic arctan(x2/x1) branch convention
    th = math.atan2(x[1], x[0]) / (2 * math.pi)
    if th <= -0.25:
        th += 1.0
    return np.array([10 * (x[2] - 10 * th), 10 * (math.hypot(x[0], x[1]) - 1), x[2]])


_BARD_Y = np.array([0.14, 0.18, 0.22, 0.25, 0.29, 0.32, 0.35, 0.39, 0.37, 0.58,
                    0.73, 0.96, 1.34, 2.10, 4.39])


def _bard(x):
    u = np.arange(1, 16, dtype=np.float64)
    v = 16 - u
    w = np.minimum(u, v)
    return _BARD_Y - (x[0] + u / (v * x[1] + w * x[2]))


def _box_3d(x):
    t = 0.1 * np.arange(1, 11)
    return (np.exp(-t * x[0]) - np.exp(-t * x[1])
            - x[2] * (np.exp(-t) - np.exp(-10 * t)))


def _powell_singular(x):
    return np.array([x[0] + 10 * x[1], math.sqrt(5) * (x[2] - x[3]),
                     (x[1] - 2 * x[2]) ** 2, math.sqrt(10) * (x[0] - x[3]) ** 2])


def _wood(x):
    return np.array([10 * (x[1] - x[0] ** 2), 1 - x[0], math.sqrt(90) * (x[3] - x[2] ** 2),
                     1 - x[2], math.sqrt(10) * (x[1] + x[3] - 2),
                     (x[1] - x[3]) / math.sqrt(10)])


def _brown_dennis(x):
    t = np.arange(1, 21) / 5.0
    return (x[0] + t * x[1] - np.exp(t)) ** 2 + (x[2] + x[3] * np.sin(t) - np.cos(t)) ** 2


def _trigonometric(x):
    n = x.size
    c = np.cos(x)
    return n - c.sum() + np.arange(1, n + 1) * (1 - c) - np.sin(x)


def _extended_rosenbrock(x):
    r = np.empty_like(x)
    r[0::2] = 10 * (x[1::2] - x[0::2] ** 2)
    r[1::2] = 1 - x[0::2]
    return r


def _linear_full_rank(x):
    return x - 2.0 / x.size * x.sum() - 1


def _sphere(x):
    return np.array(x, dtype=np.float64)


@dataclass(frozen=True)
class BenchProblem:
    name: str
    dim: int
    residuals: object
    x0: tuple
    variant: Variant = Variant.SMOOTH
    noise_level: float = DEFAULT_NOISE
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))
        if not 2 <= self.dim <= 100:
            raise ValueError(f"dimension must lie in [2, 100], got {self.dim}")
        if len(self.x0) != self.dim:
            raise ValueError(f"start point has length {len(self.x0)}, expected {self.dim}")
        if not np.all(np.isfinite(self.residuals(np.array(self.x0)))):
            raise NonFiniteValueError(f"{self.name}: residuals not finite at the start point")

    @property
    def task(self):
        return f"{self.name}/{self.variant.value}"

    def with_variant(self, variant, noise_level=None, seed=None):
        return BenchProblem(self.name, self.dim, self.residuals, self.x0, variant,
                            self.noise_level if noise_level is None else noise_level,
                            self.seed if seed is None else seed)


def _problem(name, fn, x0):
    return BenchProblem(name, len(x0), fn, tuple(x0))


def _make_registry():
    reg = {}
    for p in (
        _problem("rosenbrock", _rosenbrock, (-1.2, 1.0)),
        _problem("freudenstein_roth", _freudenstein_roth, (0.5, -2.0)),
        _problem("beale", _beale, (1.0, 1.0)),
        _problem("jennrich_sampson", _jennrich_sampson, (0.3, 0.4)),
        _problem("helical_valley", _helical_valley, (-1.0, 0.0, 0.0)),
        _problem("bard", _bard, (1.0, 1.0, 1.0)),
        _problem("box_3d", _box_3d, (0.0, 10.0, 20.0)),
        _problem("powell_singular", _powell_singular, (3.0, -1.0, 0.0, 1.0)),
        _problem("wood", _wood, (-3.0, -1.0, -3.0, -1.0)),
        _problem("brown_dennis", _brown_dennis, (25.0, 5.0, -5.0, -1.0)),
        _problem("sphere", _sphere, (1.0,) * 10),
        _problem("trigonometric", _trigonometric, (0.1,) * 10),
        _problem("extended_rosenbrock", _extended_rosenbrock, (-1.2, 1.0) * 5),
        _problem("linear_full_rank", _linear_full_rank, (1.0,) * 10),
    ):
        reg[p.name] = p
    return reg


PROBLEMS = _make_registry()


def get_problem(name, variant=Variant.SMOOTH, dim=None, noise_level=DEFAULT_NOISE, seed=0):
    """Look up a registered problem; ``dim`` resizes the variable-dimension ones."""
    try:
        base = PROBLEMS[name]
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; known: {sorted(PROBLEMS)}") from None
    if dim is not None and dim != base.dim:
        if name not in ("sphere", "trigonometric", "extended_rosenbrock", "linear_full_rank"):
            raise ValueError(f"{name} has fixed dimension {base.dim}")
        if name == "extended_rosenbrock" and dim % 2:
            raise ValueError("extended_rosenbrock needs an even dimension")
        x0 = {"sphere": (1.0,) * dim, "trigonometric": (1.0 / dim,) * dim,
              "extended_rosenbrock": (-1.2, 1.0) * (dim // 2),
              "linear_full_rank": (1.0,) * dim}[name]
        base = BenchProblem(name, dim, base.residuals, x0)
    return base.with_variant(variant, noise_level, seed)


def constant_problem(value, dim=2):
    return BenchProblem("constant", dim, lambda x: np.array([math.sqrt(value)]), (0.0,) * dim)


# --- evaluation --------------------------------------------------------------

def oscillation(x):
    """Deterministic high-frequency perturbation in [-1, 1]."""
    x = np.asarray(x, dtype=np.float64)
    return (0.9 * math.sin(100 * np.abs(x).sum()) * math.cos(100 * np.abs(x).max())
            + 0.1 * math.cos(float(np.sqrt((x * x).sum()))))


def evaluate_problem(problem, x, evaluation_index=0):
    """Objective value of ``problem`` at ``x``.

    ``evaluation_index`` keys the uniform draw of the ``wild3`` variant and is
    ignored otherwise.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (problem.dim,):
        raise ValueError(f"{problem.name}: expected shape ({problem.dim},), got {x.shape}")
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        r = np.asarray(problem.residuals(x), dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise NonFiniteValueError(f"{problem.name}: non-finite residual at x")
    v = problem.variant
    if v is Variant.NONDIFF:
        return float(np.abs(r).sum())
    smooth = float((r * r).sum())
    if v is Variant.SMOOTH:
        return smooth
    if v is Variant.NOISY_DETERMINISTIC:
        return smooth * (1 + problem.noise_level * oscillation(x))
    u = 2 * counter_uniforms(problem.seed, np.array([evaluation_index]))[0] - 1
    return smooth * (1 + problem.noise_level * u)


class ProblemObjective(Objective):
    """Objective adapter that numbers evaluations consecutively."""

    def __init__(self, problem):
        self.problem = problem
        self.dim = problem.dim
        self.calls = 0

    def evaluate_batch(self, xs):
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        out = np.empty(xs.shape[0])
        for i, x in enumerate(xs):
            out[i] = evaluate_problem(self.problem, x, self.calls)
            self.calls += 1
        return out


# --- scoring -----------------------------------------------------------------

def normalized_score(values, lower_is_better=True):
    """Linear rescale to [0, 1], best 0 and worst 1; all-equal values score 0."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("normalized_score needs at least one value")
    if not lower_is_better:
        v = -v
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros(v.size)
    return (v - lo) / (hi - lo)


def task_ranks(values, lower_is_better=True):
    v = np.asarray(values, dtype=np.float64)
    return rankdata(v if lower_is_better else -v, method="average")


def average_rank(results, lower_is_better=True):
    """Mean per-task rank of each method.

    ``results`` maps task -> {method: value}.  Every method must have a value
    on every task.
    """
    if not results:
        raise ValueError("no tasks given")
    methods = sorted({m for cells in results.values() for m in cells})
    totals = dict.fromkeys(methods, 0.0)
    for task in sorted(results):
        cells = results[task]
        missing = [m for m in methods if m not in cells]
        if missing:
            raise ValueError(f"task {task!r} has no value for method(s) {missing}")
        ranks = task_ranks([cells[m] for m in methods], lower_is_better)
        for m, r in zip(methods, ranks):
            totals[m] += r
    return {m: totals[m] / len(results) for m in methods}


# --- running methods ---------------------------------------------------------

@dataclass(frozen=True)
class DriverConfig:
    max_iterations: int = 200
    gtol: float = 1e-10
    ftol: float = 1e-14
    stall_iterations: int = 3
    max_evaluations: int | None = None


@dataclass(frozen=True)
class MethodResult:
    method_name: str
    task: str
    final_objective: float
    function_evaluations: int
    oracle_calls: int = 0
    stalled: bool = False

    def to_dict(self):
        return {"method": self.method_name, "task": self.task,
                "final_objective": self.final_objective,
                "function_evaluations": self.function_evaluations,
                "oracle_calls": self.oracle_calls, "stalled": self.stalled}


def run_bench(problem, smoothing, scheme, driver=DriverConfig(), seed=0, method_name=None):
    """Minimize ``problem`` with BFGS fed by ES gradient estimates.

    The ``j``-th gradient request draws directions with seed
    ``derive_iteration_seed(seed, j)``.  ``function_evaluations`` is the
    instrumented count of every objective call.
    """
    obj = CountingObjective(ProblemObjective(problem))
    calls = [0]

    def grad(x):
        j = calls[0]
        calls[0] += 1
        dirs = scheme.sample(problem.dim, smoothing.num_directions,
                             derive_iteration_seed(seed, j), j)
        return estimate_gradient(obj, x, smoothing, dirs)

    res = bfgs_minimize(lambda x: obj(x), grad, np.array(problem.x0),
                        max_iterations=driver.max_iterations, gtol=driver.gtol,
                        ftol=driver.ftol, stall_iterations=driver.stall_iterations,
                        max_evaluations=driver.max_evaluations)
    if res.evaluations != obj.calls:
        raise AssertionError(f"evaluation tally {res.evaluations} != instrumented {obj.calls}")
    return MethodResult(method_name or scheme.kind.value, problem.task, res.fun, obj.calls,
                        res.oracle_calls, res.stalled)


def score_table(results, metric="objective"):
    """Rows ``(method, task, value, score, rank)`` sorted by task then method."""
    by_task = {}
    for r in results:
        v = r.final_objective if metric == "objective" else r.function_evaluations
        by_task.setdefault(r.task, {})[r.method_name] = v
    rows = []
    for task in sorted(by_task):
        methods = sorted(by_task[task])
        vals = [by_task[task][m] for m in methods]
        scores = normalized_score(vals)
        ranks = task_ranks(vals)
        for m, v, s, k in zip(methods, vals, scores, ranks):
            rows.append((m, task, v, float(s), float(k)))
    return rows


def run_suite(problems, methods, sigma=1e-6, seed=0, driver=DriverConfig(),
              num_directions=None):
    """Run every (problem, method) cell.

    ``methods`` maps a method name to an :class:`ExplorationScheme`; the
    antithetic estimator with ``N = d`` (unless given) is used throughout.
    """
    results = []
    for p in sorted(problems, key=lambda q: q.task):
        for name in sorted(methods):
            scheme = methods[name]
            n = num_directions or p.dim
            n = min(n, scheme.max_directions(p.dim) or n)
            cfg = SmoothingConfig(sigma, n)
            results.append(run_bench(p, cfg, scheme, driver, seed, name))
    return results


def write_scores_csv(rows, fp, schema=SCHEMA_SCORES):
    fp.write(f"# schema={schema}\n")
    w = csv.writer(fp, lineterminator="\n")
    w.writerow(["method", "task", "value", "score", "rank"])
    for m, t, v, s, k in rows:
        w.writerow([m, t, repr(float(v)), repr(s), repr(k)])


def write_results_json(results, fp):
    json.dump({"schema": SCHEMA_RESULTS, "results": [r.to_dict() for r in results]}, fp,
              indent=1)
    fp.write("\n")


def default_suite(variants=tuple(Variant), noise_level=DEFAULT_NOISE, seed=0):
    return [p.with_variant(v, noise_level, seed) for p in PROBLEMS.values() for v in variants]

