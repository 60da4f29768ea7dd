"""Command-line entry point.

Subcommands: mse-study, bench, train, grad-check, coordinator, worker.

Configuration is layered, later layers winning: built-in defaults, the JSON
file given with ``--config``, environment variables (``STRUCTES_OUTPUT_DIR``,
``STRUCTES_LOG_LEVEL``), ``--set dotted.key=value`` overrides, then named
flags such as ``--sigma``.

Exit codes: 0 success, 2 configuration error, 3 protocol error, 4 numeric
failure.
"""

import argparse
import copy
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import benchsuite
from .distributed import Coordinator, SharedConfig, SocketChannel, listen, local_cluster, \
    serve_worker
from .environments import ENVIRONMENTS, build_objective, episode_seeds_for
from .errors import ConfigError, DegenerateSampleError, NonFiniteValueError, ProtocolError
from .estimators import (EstimatorKind, FunctionKind, LinearObjective, SmoothingConfig,
                         SquaredNormObjective, analytic_smoothed_gradient, estimate_gradient,
                         mse_estimate)
from .exploration import ExplorationScheme, Scheme
from .policies import LayerKind, PolicySpec, param_count
from .seeding import derive_iteration_seed
from .trainer import OptimizerConfig, OptimizerKind, train

log = logging.getLogger("structes")

SCHEMA_RUN = "structes.run-records/1"
SCHEMA_SUMMARY = "structes.train-summary/1"
SCHEMA_MSE = "structes.mse-study/1"
SCHEMA_GRADCHECK = "structes.grad-check/1"
SCHEMA_RANKS = "structes.bench-ranks/1"

EXIT_OK, EXIT_CONFIG, EXIT_PROTOCOL, EXIT_NUMERIC = 0, 2, 3, 4


class Mode(str, Enum):
    MSE_STUDY = "mse-study"
    BENCH = "bench"
    TRAIN = "train"
    GRAD_CHECK = "grad-check"


DEFAULTS = {
    "mode": None,
    "master_seed": 0,
    "output_dir": "out",
    "log_level": "INFO",
    "estimator": "antithetic",
    "exploration": {"scheme": "ort", "k": 1, "num_directions": None, "sigma": None,
                    "leap": 700, "skip": 1000},
    "problem": {"name": None, "variant": "smooth", "dim": None, "noise_level": 1e-3,
                "methods": ["iid", "ort", "hd", "qmc"]},
    "driver": {"max_iterations": 200, "gtol": 1e-10, "ftol": 1e-14, "max_evaluations": None},
    "env": {"name": "pendulum", "dim": 50, "max_steps": None, "episodes": 1},
    "policy": {"hidden_sizes": [41, 41], "layer_kind": "toeplitz"},
    "optimizer": {"kind": "adam", "learning_rate": 0.01, "adam_beta1": 0.9,
                  "adam_beta2": 0.999, "adam_epsilon": 1e-8, "max_iterations": 100,
                  "termination_window": 50, "termination_delta": None,
                  "use_termination": False},
    "mse": {"functions": ["linear"], "dim": 32, "trials": 10000,
            "schemes": ["iid", "ort"], "estimators": ["antithetic"]},
    "distributed": {"role": "local", "address": "127.0.0.1:5555", "workers": 1,
                    "timeout": 30.0},
}

# short spellings accepted at the top level of a file and in --set
ALIASES = {"sigma": "exploration.sigma", "num_directions": "exploration.num_directions",
           "N": "exploration.num_directions", "scheme": "exploration.scheme",
           "k": "exploration.k", "seed": "master_seed", "workers": "distributed.workers"}

BENCH_SIGMA = 1e-6
DEFAULT_SIGMA = 0.1


@dataclass(frozen=True)
class ExperimentConfig:
    mode: Mode
    estimator: EstimatorKind
    scheme: ExplorationScheme
    sigma: float
    num_directions: int | None
    optimizer: OptimizerConfig
    master_seed: int
    output_dir: str
    sections: dict

    def smoothing(self, dim):
        n = self.num_directions if self.num_directions is not None else dim
        return SmoothingConfig(self.sigma, n, self.estimator)

    @property
    def dim(self):
        return _problem_dim(self)


# --- config handling ------------------------------------------------------------

def _set_dotted(cfg, key, value, source):
    key = ALIASES.get(key, key)
    parts = key.split(".")
    node = cfg
    ref = DEFAULTS
    for i, p in enumerate(parts):
        if not isinstance(ref, dict) or p not in ref:
            raise ConfigError(key, f"unknown key (from {source})")
        if i == len(parts) - 1:
            if isinstance(ref[p], dict):
                raise ConfigError(key, "is a section; set one of its keys instead")
            node[p] = value
        else:
            node = node[p]
            ref = ref[p]


def _merge(cfg, data, source, prefix=""):
    for k, v in data.items():
        full = ALIASES.get(prefix + k, prefix + k)
        if full in ("problem", "env") and isinstance(v, str):
            _set_dotted(cfg, full + ".name", v, source)
            continue
        ref = DEFAULTS
        try:
            for p in full.split("."):
                ref = ref[p]
        except (KeyError, TypeError):
            raise ConfigError(full, f"unknown key (from {source})") from None
        if isinstance(ref, dict):
            if not isinstance(v, dict):
                raise ConfigError(full, "expected an object")
            _merge(cfg, v, source, full + ".")
        else:
            _set_dotted(cfg, full, v, source)


def _parse_value(text):
    try:
        return json.loads(text)
    except ValueError:
        return text


def merge_layers(path=None, overrides=(), flags=None, environ=None):
    """Merged plain-dict configuration before validation."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except OSError as e:
            raise ConfigError("config", f"cannot read {path}: {e}") from None
        except ValueError as e:
            raise ConfigError("config", f"{path} is not valid JSON: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError("config", "top level must be a JSON object")
        _merge(cfg, data, str(path))
    environ = os.environ if environ is None else environ
    if environ.get("STRUCTES_OUTPUT_DIR"):
        cfg["output_dir"] = environ["STRUCTES_OUTPUT_DIR"]
    if environ.get("STRUCTES_LOG_LEVEL"):
        cfg["log_level"] = environ["STRUCTES_LOG_LEVEL"]
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        k, v = item.split("=", 1)
        _set_dotted(cfg, k.strip(), _parse_value(v), "--set")
    for k, v in (flags or {}).items():
        if v is not None:
            _set_dotted(cfg, k, v, "flag")
    return cfg


def _enum(cls, value, field):
    try:
        return cls(value)
    except ValueError:
        allowed = ", ".join(m.value for m in cls)
        raise ConfigError(field, f"invalid value {value!r}; expected one of {allowed}") from None


def _positive(value, field, integer=False):
    try:
        x = int(value) if integer else float(value)
    except (TypeError, ValueError):
        raise ConfigError(field, f"expected a number, got {value!r}") from None
    if integer and x != value:
        raise ConfigError(field, f"expected an integer, got {value!r}")
    if not x > 0 or not np.isfinite(x):
        raise ConfigError(field, f"must be positive, got {value!r}")
    return x


def validate(cfg):
    """Turn a merged dict into an :class:`ExperimentConfig` with defaults resolved."""
    if cfg["mode"] is None:
        raise ConfigError("mode", "missing")
    mode = _enum(Mode, cfg["mode"], "mode")
    est = _enum(EstimatorKind, cfg["estimator"], "estimator")
    ex = cfg["exploration"]
    kind = _enum(Scheme, ex["scheme"], "exploration.scheme")
    k = _positive(ex["k"], "exploration.k", integer=True)
    scheme = ExplorationScheme(kind, k, int(ex["leap"]), int(ex["skip"]))
    sigma = ex["sigma"]
    if sigma is None:
        sigma = BENCH_SIGMA if mode is Mode.BENCH else DEFAULT_SIGMA
    sigma = _positive(sigma, "exploration.sigma")
    n = ex["num_directions"]
    if n is not None:
        n = _positive(n, "exploration.num_directions", integer=True)
    o = cfg["optimizer"]
    try:
        opt = OptimizerConfig(
            _enum(OptimizerKind, o["kind"], "optimizer.kind"),
            _positive(o["learning_rate"], "optimizer.learning_rate"),
            float(o["adam_beta1"]), float(o["adam_beta2"]), float(o["adam_epsilon"]),
            _positive(o["max_iterations"], "optimizer.max_iterations", integer=True),
            _positive(o["termination_window"], "optimizer.termination_window", integer=True),
            o["termination_delta"])
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError("optimizer", str(e)) from None
    if not isinstance(cfg["master_seed"], int) or cfg["master_seed"] < 0:
        raise ConfigError("master_seed", f"expected a non-negative integer, got {cfg['master_seed']!r}")
    sections = {s: copy.deepcopy(cfg[s]) for s in
                ("problem", "driver", "env", "policy", "mse", "distributed")}
    sections["log_level"] = cfg["log_level"]
    sections["use_termination"] = bool(o["use_termination"])
    out = ExperimentConfig(mode, est, scheme, sigma, n, opt, int(cfg["master_seed"]),
                           str(cfg["output_dir"]), sections)
    _check_sections(out)
    if n is None and mode is not Mode.BENCH:
        object.__setattr__(out, "num_directions", out.dim)
    elif n is None and sections["problem"]["name"] not in (None, "all"):
        object.__setattr__(out, "num_directions", out.dim)
    return out


def _check_sections(c):
    p = c.sections["problem"]
    if c.mode is Mode.BENCH:
        if p["name"] is None:
            raise ConfigError("problem.name", "bench mode needs a problem (or \"all\")")
        if p["name"] != "all" and p["name"] not in benchsuite.PROBLEMS:
            raise ConfigError("problem.name", f"unknown problem {p['name']!r}")
        _enum(benchsuite.Variant, p["variant"], "problem.variant")
        for m in p["methods"]:
            _enum(Scheme, m, "problem.methods")
    e = c.sections["env"]
    if c.mode is Mode.TRAIN:
        if e["name"] != "quadratic" and e["name"] not in ENVIRONMENTS:
            raise ConfigError("env.name", f"unknown environment {e['name']!r}")
        _positive(e["episodes"], "env.episodes", integer=True)
        _enum(LayerKind, c.sections["policy"]["layer_kind"], "policy.layer_kind")
        if c.optimizer.kind is OptimizerKind.BFGS:
            raise ConfigError("optimizer.kind", "training needs adam or sgd; bfgs drives bench runs")
    m = c.sections["mse"]
    if c.mode in (Mode.MSE_STUDY, Mode.GRAD_CHECK):
        for f in m["functions"]:
            _enum(FunctionKind, f, "mse.functions")
        for s in m["schemes"]:
            _enum(Scheme, s, "mse.schemes")
        for s in m["estimators"]:
            _enum(EstimatorKind, s, "mse.estimators")
        _positive(m["trials"], "mse.trials", integer=True)
        _positive(m["dim"], "mse.dim", integer=True)
    d = c.sections["distributed"]
    if d["role"] not in ("local", "coordinator", "worker"):
        raise ConfigError("distributed.role", f"invalid value {d['role']!r}")
    _positive(d["workers"], "distributed.workers", integer=True)


def _problem_dim(c):
    if c.mode is Mode.BENCH:
        p = c.sections["problem"]
        if p["name"] in (None, "all"):
            return None
        return benchsuite.get_problem(p["name"], dim=p["dim"]).dim
    if c.mode is Mode.TRAIN:
        e = c.sections["env"]
        if e["name"] == "quadratic":
            return int(e["dim"])
        return param_count(policy_spec(c))
    return int(c.sections["mse"]["dim"])


def parse_config(path=None, overrides=(), flags=None, environ=None):
    return validate(merge_layers(path, overrides, flags, environ))


def policy_spec(c):
    env = ENVIRONMENTS[c.sections["env"]["name"]]
    pol = c.sections["policy"]
    return PolicySpec(env.obs_dim, env.act_dim, tuple(pol["hidden_sizes"]), pol["layer_kind"])


def objective_description(c):
    e = c.sections["env"]
    if e["name"] == "quadratic":
        return {"env": "quadratic", "dim": int(e["dim"])}
    pol = c.sections["policy"]
    return {"env": e["name"],
            "policy": {"hidden_sizes": list(pol["hidden_sizes"]),
                       "layer_kind": pol["layer_kind"]},
            "max_steps": e["max_steps"],
            "episode_seeds": episode_seeds_for(c.master_seed, int(e["episodes"]))}


def shared_config(c):
    desc = objective_description(c)
    return SharedConfig(desc, c.smoothing(c.dim), c.scheme, c.master_seed)


# --- output helpers ---------------------------------------------------------------

def _outdir(c):
    p = Path(c.output_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _csv_writer(fh, schema):
    fh.write(f"# schema={schema}\n")
    return csv.writer(fh, lineterminator="\n")


def _num(x):
    return repr(float(x))


# --- runners --------------------------------------------------------------------

def _mse_function(kind, dim):
    a = np.ones(dim) / np.sqrt(dim)
    theta = np.zeros(dim)
    if kind is FunctionKind.LINEAR:
        return LinearObjective(a), theta, a
    return SquaredNormObjective(dim), theta, None


def run_mse_study(c):
    """Empirical MSE of each (function, scheme, estimator) cell against the
    analytic smoothed gradient.  Returns the table rows."""
    m = c.sections["mse"]
    d = int(m["dim"])
    trials = int(m["trials"])
    rows = []
    for fname in m["functions"]:
        fk = FunctionKind(fname)
        obj, theta, a = _mse_function(fk, d)
        true = analytic_smoothed_gradient(fk, theta, c.sigma, a)
        for ename in m["estimators"]:
            cfg = SmoothingConfig(c.sigma, c.num_directions, ename)
            cells = []
            for sname in m["schemes"]:
                scheme = ExplorationScheme(sname, c.scheme.k, c.scheme.leap, c.scheme.skip)
                mse = mse_estimate(obj, theta, cfg, scheme, true, trials, c.master_seed)
                cells.append((sname, mse))
            scores = benchsuite.normalized_score([v for _, v in cells])
            base = dict(cells).get("iid")
            for (sname, mse), s in zip(cells, scores):
                gap = "" if base is None else _num(base - mse)
                rows.append([fname, sname, ename, cfg.num_directions, trials, _num(mse), gap,
                             _num(s)])
    with open(_outdir(c) / "mse.csv", "w") as fh:
        w = _csv_writer(fh, SCHEMA_MSE)
        w.writerow(["function", "scheme", "estimator", "num_directions", "trials", "mse",
                    "gap_vs_iid", "score"])
        w.writerows(rows)
    return rows


def run_grad_check(c):
    """Single-shot ES estimate versus the analytic gradient for each cell."""
    m = c.sections["mse"]
    d = int(m["dim"])
    rows = []
    for fname in m["functions"]:
        fk = FunctionKind(fname)
        obj, _, a = _mse_function(fk, d)
        theta = np.full(d, 0.5)
        true = analytic_smoothed_gradient(fk, theta, c.sigma, a)
        for ename in m["estimators"]:
            cfg = SmoothingConfig(c.sigma, c.num_directions, ename)
            for sname in m["schemes"]:
                scheme = ExplorationScheme(sname, c.scheme.k, c.scheme.leap, c.scheme.skip)
                dirs = scheme.sample(d, cfg.num_directions,
                                     derive_iteration_seed(c.master_seed, 0))
                est = estimate_gradient(obj, theta, cfg, dirs)
                err = float(np.linalg.norm(est.gradient - true))
                rel = err / max(float(np.linalg.norm(true)), 1e-300)
                rows.append([fname, sname, ename, est.function_evaluations, _num(err),
                             _num(rel)])
    with open(_outdir(c) / "gradcheck.csv", "w") as fh:
        w = _csv_writer(fh, SCHEMA_GRADCHECK)
        w.writerow(["function", "scheme", "estimator", "evaluations", "error", "relative_error"])
        w.writerows(rows)
    return rows


def run_bench(c):
    p = c.sections["problem"]
    if p["name"] == "all":
        variants = [benchsuite.Variant(p["variant"])] if p["variant"] != "all" else list(
            benchsuite.Variant)
        problems = benchsuite.default_suite(variants, p["noise_level"], c.master_seed)
    else:
        problems = [benchsuite.get_problem(p["name"], p["variant"], p["dim"], p["noise_level"],
                                           c.master_seed)]
    methods = {name: ExplorationScheme(name, c.scheme.k, c.scheme.leap, c.scheme.skip)
               for name in p["methods"]}
    dr = c.sections["driver"]
    driver = benchsuite.DriverConfig(int(dr["max_iterations"]), float(dr["gtol"]),
                                     float(dr["ftol"]), 3, dr["max_evaluations"])
    results = benchsuite.run_suite(problems, methods, c.sigma, c.master_seed, driver,
                                   c.num_directions)
    out = _outdir(c)
    with open(out / "results.json", "w") as fh:
        benchsuite.write_results_json(results, fh)
    for metric in ("objective", "evaluations"):
        with open(out / f"scores_{metric}.csv", "w") as fh:
            benchsuite.write_scores_csv(benchsuite.score_table(results, metric), fh)
    ranks = {metric: benchsuite.average_rank(
        {t: {m: (v if metric == "objective" else e) for m, (v, e) in cells.items()}
         for t, cells in _cells(results).items()}) for metric in ("objective", "evaluations")}
    with open(out / "ranks.csv", "w") as fh:
        w = _csv_writer(fh, SCHEMA_RANKS)
        w.writerow(["method", "average_rank_objective", "average_rank_evaluations"])
        for m in sorted(methods):
            w.writerow([m, _num(ranks["objective"][m]), _num(ranks["evaluations"][m])])
    return results


def _cells(results):
    out = {}
    for r in results:
        out.setdefault(r.task, {})[r.method_name] = (r.final_objective, r.function_evaluations)
    return out


def _write_train_outputs(c, result, config_hash):
    out = _outdir(c)
    with open(out / "run.jsonl", "w") as fh:
        fh.write(json.dumps({"schema": SCHEMA_RUN, "config_hash": config_hash}) + "\n")
        for r in result.records:
            fh.write(json.dumps(r.to_dict()) + "\n")
    with open(out / "summary.csv", "w") as fh:
        w = _csv_writer(fh, SCHEMA_SUMMARY)
        w.writerow(["final_reward", "max_reward", "iterations", "evaluations"])
        last = result.records[-1]
        w.writerow([_num(last.total_reward), _num(last.max_total_reward), len(result.records),
                    last.function_evaluations_cumulative])


def run_train(c, evaluator=None):
    sc = shared_config(c)
    objective = build_objective(sc.objective)
    theta0 = np.zeros(objective.dim) if c.sections["env"]["name"] != "quadratic" \
        else np.ones(objective.dim)
    workers = int(c.sections["distributed"]["workers"])
    maximize = True
    kwargs = dict(master_seed=c.master_seed, maximize=maximize,
                  use_termination=c.sections["use_termination"])
    if evaluator is None and workers > 1:
        with local_cluster(sc, workers, objective, c.sections["distributed"]["timeout"]) as coord:
            result = train(objective, theta0, sc.smoothing, c.scheme, c.optimizer,
                           evaluator=coord, **kwargs)
    else:
        result = train(objective, theta0, sc.smoothing, c.scheme, c.optimizer,
                       evaluator=evaluator, **kwargs)
    _write_train_outputs(c, result, sc.config_hash())
    return result


def _address(text):
    host, _, port = str(text).rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise ConfigError("distributed.address", f"expected host:port, got {text!r}") from None


def run_coordinator(c):
    d = c.sections["distributed"]
    host, port = _address(d["address"])
    try:
        chans = listen(host, port, int(d["workers"]), float(d["timeout"]))
    except OSError as e:
        raise ProtocolError(f"cannot listen on {host}:{port}: {e}") from None
    coord = Coordinator(chans, shared_config(c), float(d["timeout"]))
    try:
        coord.start()
        return run_train(c, evaluator=coord)
    finally:
        coord.close()


def run_worker(c):
    d = c.sections["distributed"]
    host, port = _address(d["address"])
    sc = shared_config(c)
    try:
        ch = SocketChannel.connect(host, port, float(d["timeout"]))
    except OSError as e:
        raise ProtocolError(f"cannot connect to {host}:{port}: {e}") from None
    try:
        serve_worker(ch, expected_hash=sc.config_hash(), timeout=float(d["timeout"]))
    except TimeoutError:
        raise ProtocolError("timed out waiting for the coordinator") from None
    finally:
        ch.close()


# --- argument parsing ---------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="structes", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("mse-study", "bench", "train", "grad-check", "coordinator", "worker"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-key override, repeatable")
        p.add_argument("--sigma", type=float)
        p.add_argument("--num-directions", "-N", type=int, dest="num_directions")
        p.add_argument("--scheme", choices=[s.value for s in Scheme])
        p.add_argument("--k", type=int)
        p.add_argument("--estimator", choices=[e.value for e in EstimatorKind])
        p.add_argument("--seed", type=int)
        p.add_argument("--output-dir", dest="output_dir")
        p.add_argument("--log-level", dest="log_level")
        if name == "bench":
            p.add_argument("--problem")
            p.add_argument("--variant")
        if name in ("train", "coordinator", "worker"):
            p.add_argument("--env")
            p.add_argument("--iterations", type=int)
            p.add_argument("--learning-rate", type=float, dest="learning_rate")
            p.add_argument("--workers", type=int)
        if name in ("coordinator", "worker"):
            p.add_argument("--address", help="host:port to listen on or connect to")
        if name in ("mse-study", "grad-check"):
            p.add_argument("--dim", type=int)
            p.add_argument("--trials", type=int)
    return ap


_FLAG_KEYS = {"sigma": "exploration.sigma", "num_directions": "exploration.num_directions",
              "scheme": "exploration.scheme", "k": "exploration.k", "estimator": "estimator",
              "seed": "master_seed", "output_dir": "output_dir", "log_level": "log_level",
              "problem": "problem.name", "variant": "problem.variant", "env": "env.name",
              "iterations": "optimizer.max_iterations",
              "learning_rate": "optimizer.learning_rate", "workers": "distributed.workers",
              "address": "distributed.address", "dim": "mse.dim", "trials": "mse.trials"}


def config_from_args(args, environ=None):
    flags = {_FLAG_KEYS[k]: v for k, v in vars(args).items() if k in _FLAG_KEYS}
    mode = {"coordinator": "train", "worker": "train"}.get(args.command, args.command)
    flags["mode"] = mode
    if args.command in ("coordinator", "worker"):
        flags["distributed.role"] = args.command
    return parse_config(args.config, args.set, flags, environ)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        c = config_from_args(args)
        logging.basicConfig(level=str(c.sections["log_level"]).upper(),
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "worker":
            run_worker(c)
        elif args.command == "coordinator":
            run_coordinator(c)
        elif c.mode is Mode.MSE_STUDY:
            run_mse_study(c)
        elif c.mode is Mode.GRAD_CHECK:
            run_grad_check(c)
        elif c.mode is Mode.BENCH:
            run_bench(c)
        else:
            run_train(c)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ProtocolError as e:
        print(f"protocol error: {e}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (NonFiniteValueError, DegenerateSampleError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
