"""Optimization drivers and the ES training loop.

``train`` runs ``theta_{k+1} = theta_k +/- step(grad_hat_k)`` where
``grad_hat_k`` is the raw estimator output for iteration ``k``; no fitness
shaping or reward normalization is applied anywhere.  Directions for
iteration ``k`` are drawn with seed ``derive_iteration_seed(master_seed, k)``,
so a run is a pure function of its arguments.
"""

import time
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import NonFiniteValueError
from .estimators import GradientEstimate, evaluations_for, gradient_from_values
from .seeding import derive_iteration_seed


class OptimizerKind(str, Enum):
    ADAM = "adam"
    SGD = "sgd"
    BFGS = "bfgs"


@dataclass(frozen=True)
class OptimizerConfig:
    kind: OptimizerKind = OptimizerKind.ADAM
    learning_rate: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    max_iterations: int = 1000
    termination_window: int = 50
    termination_delta: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", OptimizerKind(self.kind))
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("adam_beta1", "adam_beta2"):
            b = getattr(self, name)
            if not 0 <= b < 1:
                raise ValueError(f"{name} must lie in [0, 1), got {b}")
        if self.max_iterations < 1 or self.termination_window < 1:
            raise ValueError("max_iterations and termination_window must be >= 1")


@dataclass(frozen=True, eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, dim):
        return cls(np.zeros(dim), np.zeros(dim), 0)


def adam_step(state, gradient, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam.  Returns ``(new_state, step)``; the caller adds
    ``step`` for ascent or subtracts it for descent."""
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != state.m.shape:
        raise ValueError(f"gradient shape {g.shape} does not match state {state.m.shape}")
    if not np.all(np.isfinite(g)):
        raise NonFiniteValueError("non-finite gradient passed to Adam")
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * g
    v = beta2 * state.v + (1 - beta2) * g * g
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    return AdamState(m, v, t), lr * m_hat / (np.sqrt(v_hat) + eps)


class _Adam:
    def __init__(self, cfg, dim):
        self.cfg = cfg
        self.state = AdamState.zeros(dim)

    def step(self, g):
        c = self.cfg
        self.state, s = adam_step(self.state, g, c.learning_rate, c.adam_beta1, c.adam_beta2,
                                  c.adam_epsilon)
        return s


class _SGD:
    def __init__(self, cfg, dim):
        self.lr = cfg.learning_rate

    def step(self, g):
        g = np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NonFiniteValueError("non-finite gradient")
        return self.lr * g


def make_optimizer(cfg, dim):
    if cfg.kind is OptimizerKind.ADAM:
        return _Adam(cfg, dim)
    if cfg.kind is OptimizerKind.SGD:
        return _SGD(cfg, dim)
    raise ValueError("BFGS is a minimization driver; use bfgs_minimize")


# --- BFGS ------------------------------------------------------------------

@dataclass
class BFGSResult:
    x: np.ndarray
    fun: float
    evaluations: int
    iterations: int
    gradient_norm: float
    converged: bool
    stalled: bool
    message: str = ""
    oracle_calls: int = 0


def bfgs_minimize(fun, grad, x0, max_iterations=200, gtol=1e-10, ftol=1e-14,
                  stall_iterations=3, c1=1e-4, max_backtracks=50, max_evaluations=None):
    """Quasi-Newton minimization with an inverse-Hessian BFGS update.

    ``grad`` may return a plain array (exact gradient, costs no evaluations)
    or a :class:`GradientEstimate`, whose ``function_evaluations`` are added
    to the tally.  Stops when the gradient max-norm drops to ``gtol``, when
    the relative decrease stays under ``ftol`` for ``stall_iterations``
    iterations, or when the Armijo backtracking fails ``max_backtracks``
    times (``stalled``).  A trial point where ``fun`` is non-finite counts as
    an Armijo failure.  Always returns the best point seen.

    ``evaluations`` counts every objective call, including those spent inside
    gradient estimates.  ``oracle_calls`` counts value/gradient oracle
    queries the way a quasi-Newton routine fed user-supplied gradients
    would: one per trial point.
    """
    evals = 0
    calls = 0

    def f_eval(x):
        nonlocal evals, calls
        evals += 1
        calls += 1
        v = float(fun(x))
        if not np.isfinite(v):
            raise NonFiniteValueError(f"objective returned {v!r}")
        return v

    def g_eval(x):
        nonlocal evals
        out = grad(x)
        if isinstance(out, GradientEstimate):
            evals += out.function_evaluations
            out = out.gradient
        return np.asarray(out, dtype=np.float64)

    x = np.array(x0, dtype=np.float64)
    n = x.size
    f = f_eval(x)
    g = g_eval(x)
    h = np.eye(n)
    first_update = True
    flat = 0
    it = 0
    stalled = converged = False
    message = "max iterations"
    while it < max_iterations:
        gnorm = float(np.max(np.abs(g))) if n else 0.0
        if gnorm <= gtol:
            converged, message = True, "gradient tolerance"
            break
        if max_evaluations is not None and evals >= max_evaluations:
            message = "evaluation budget"
            break
        p = -h @ g
        slope = float(g @ p)
        if slope >= 0:
            h = np.eye(n)
            p, slope = -g, -float(g @ g)
        alpha = 1.0
        for _ in range(max_backtracks + 1):
            x_new = x + alpha * p
            try:
                f_new = f_eval(x_new)
            except NonFiniteValueError:
                # trial point left the domain; shrink like any Armijo failure
                f_new = np.inf
            if f_new <= f + c1 * alpha * slope:
                break
            alpha *= 0.5
        else:
            stalled, message = True, "line search failed"
            break
        it += 1
        g_new = g_eval(x_new)
        s = x_new - x
        y = g_new - g
        ys = float(y @ s)
        if ys > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if first_update:
                h = np.eye(n) * (ys / float(y @ y))
                first_update = False
            rho = 1.0 / ys
            hy = h @ y
            h = (h - rho * (np.outer(s, hy) + np.outer(hy, s))
                 + (rho * rho * float(y @ hy) + rho) * np.outer(s, s))
        decrease = f - f_new
        flat = flat + 1 if decrease <= ftol * max(1.0, abs(f)) else 0
        x, f, g = x_new, f_new, g_new
        if flat >= stall_iterations:
            stalled, message = True, "no progress"
            break
    return BFGSResult(x, f, evals, it, float(np.max(np.abs(g))) if n else 0.0,
                      converged, stalled, message, calls)


# --- training loop -----------------------------------------------------------

@dataclass(frozen=True)
class RunRecord:
    iteration: int
    total_reward: float
    max_total_reward: float
    function_evaluations_cumulative: int
    wall_time_seconds: float

    def to_dict(self):
        return {"iteration": self.iteration, "total_reward": self.total_reward,
                "max_total_reward": self.max_total_reward,
                "function_evaluations_cumulative": self.function_evaluations_cumulative,
                "wall_time_seconds": self.wall_time_seconds}


@dataclass(frozen=True, eq=False)
class IterationResult:
    """What an evaluator returns for one iteration.

    ``center_value`` is ``F(theta)``; ``evaluations`` counts every objective
    call made, including the center.
    """

    estimate: GradientEstimate
    center_value: float
    evaluations: int


class LocalEvaluator:
    """Evaluates all directions of an iteration in-process."""

    def __init__(self, objective, smoothing, scheme, master_seed):
        self.objective = objective
        self.smoothing = smoothing
        self.scheme = scheme
        self.master_seed = int(master_seed)

    def directions(self, iteration, dim):
        seed = derive_iteration_seed(self.master_seed, iteration)
        return self.scheme.sample(dim, self.smoothing.num_directions, seed, iteration).rows

    def evaluate(self, iteration, theta):
        theta = np.asarray(theta, dtype=np.float64)
        cfg = self.smoothing
        rows = self.directions(iteration, theta.size)
        values = evaluate_rows(self.objective, theta, cfg, rows)
        g = gradient_from_values(cfg.estimator_kind, cfg.sigma, rows, values["f_plus"],
                                 values.get("f_minus"), values["center"])
        est = GradientEstimate(g, evaluations_for(cfg.estimator_kind, cfg.num_directions),
                               cfg.estimator_kind)
        n = cfg.num_directions
        calls = 1 + (2 * n if values.get("f_minus") is not None else n)
        return IterationResult(est, float(values["center"]), calls)

    def close(self):
        pass


def evaluate_rows(objective, theta, cfg, rows, with_center=True):
    """Objective values at ``theta +/- sigma * rows`` (and at ``theta``).

    Shared by the local evaluator and distributed workers so that both
    compute each value the same way.
    """
    from .estimators import EstimatorKind, _check_finite

    out = {}
    step = cfg.sigma * rows
    if with_center:
        c = float(objective.evaluate_batch(theta[None, :])[0])
        if not np.isfinite(c):
            raise NonFiniteValueError(f"objective returned {c!r} at the center point")
        out["center"] = c
    if len(rows):
        fp = np.asarray(objective.evaluate_batch(theta + step), dtype=np.float64)
        _check_finite(fp, "+")
        out["f_plus"] = fp
        if cfg.estimator_kind is EstimatorKind.ANTITHETIC:
            fm = np.asarray(objective.evaluate_batch(theta - step), dtype=np.float64)
            _check_finite(fm, "-")
            out["f_minus"] = fm
    else:
        out["f_plus"] = np.zeros(0)
        if cfg.estimator_kind is EstimatorKind.ANTITHETIC:
            out["f_minus"] = np.zeros(0)
    return out


def should_terminate(history, window=50, delta=None):
    """True once the running-max reward gained less than ``delta`` over the
    last ``window`` iterations.

    ``history`` is a sequence of rewards or :class:`RunRecord`.  The gain is
    measured against the running max ``window`` iterations earlier, so at
    least ``window + 1`` entries are needed.  ``delta`` defaults to
    ``1e-3 * (|current running max| + 1)``.
    """
    rewards = [r.total_reward if isinstance(r, RunRecord) else float(r) for r in history]
    if not rewards:
        raise ValueError("history must be non-empty")
    if len(rewards) <= window:
        return False
    running = np.maximum.accumulate(np.asarray(rewards))
    current = running[-1]
    if delta is None:
        delta = 1e-3 * (abs(current) + 1.0)
    return bool(current - running[-1 - window] < delta)


@dataclass
class TrainResult:
    records: list
    theta: np.ndarray
    best_theta: np.ndarray
    best_reward: float
    terminated_early: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def rewards(self):
        return [r.total_reward for r in self.records]


def train(objective, theta0, smoothing, scheme, optimizer, master_seed=0, evaluator=None,
          maximize=True, use_termination=False, on_record=None, stop_when=None):
    """Run ES training and return the learning curve.

    ``evaluator`` defaults to a :class:`LocalEvaluator`; pass a distributed
    coordinator to farm evaluations out.  With ``maximize`` the estimator
    output is ascended (reward mode), otherwise descended.  Each
    :class:`RunRecord` reports ``F(theta_k)`` before the k-th update.
    ``stop_when(record)`` returning true ends the run after that record.
    """
    theta = np.array(theta0, dtype=np.float64)
    max_n = scheme.max_directions(theta.size)
    if max_n is not None and smoothing.num_directions > max_n:
        raise ValueError(f"N={smoothing.num_directions} exceeds the padded dimension {max_n}")
    if evaluator is None:
        evaluator = LocalEvaluator(objective, smoothing, scheme, master_seed)
    opt = make_optimizer(optimizer, theta.size)
    sign = 1.0 if maximize else -1.0
    records = []
    best_reward = -np.inf
    best_theta = theta.copy()
    evals = 0
    start = time.perf_counter()
    terminated = False
    for k in range(optimizer.max_iterations):
        res = evaluator.evaluate(k, theta)
        evals += res.evaluations
        reward = sign * res.center_value
        if reward > best_reward:
            best_reward, best_theta = reward, theta.copy()
        rec = RunRecord(k, res.center_value, sign * best_reward, evals,
                        time.perf_counter() - start)
        records.append(rec)
        if on_record is not None:
            on_record(rec)
        if stop_when is not None and stop_when(rec):
            terminated = True
            break
        if use_termination and should_terminate(
                [sign * r.total_reward for r in records], optimizer.termination_window,
                optimizer.termination_delta):
            terminated = True
            break
        theta = theta + sign * opt.step(res.estimate.gradient)
    return TrainResult(records, theta, best_theta, sign * best_reward, terminated)


def with_sigma(cfg, sigma):
    return replace(cfg, sigma=sigma)
