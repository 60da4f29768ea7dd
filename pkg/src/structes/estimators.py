"""Monte Carlo estimators of the gradient of a Gaussian smoothing.

For an objective ``F`` and radius ``sigma`` the smoothed objective is
``F_sigma(theta) = E[F(theta + sigma * eps)]`` with ``eps ~ N(0, I)``.  Given
``N`` exploration directions the three estimators are::

    vanilla     1/(N sigma)  sum_i F(theta + sigma e_i) e_i
    antithetic  1/(2N sigma) sum_i (F(theta + sigma e_i) - F(theta - sigma e_i)) e_i
    forward FD  1/(N sigma)  sum_i (F(theta + sigma e_i) - F(theta)) e_i

The estimators do not care how the directions were produced; pass any
``ExplorationMatrix`` (or a plain ``N x d`` array).

The accumulation over directions is always an explicit fold in ascending
direction index.  The same fold is used by the batched MSE harness and by
the distributed coordinator, which is what makes their results bit-identical
to a single local call.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DimensionMismatchError, NonFiniteValueError
from .exploration import ExplorationMatrix
from .seeding import counter_normals, derive_iteration_seed


class EstimatorKind(str, Enum):
    VANILLA = "vanilla"
    ANTITHETIC = "antithetic"
    FORWARD_FD = "forward_fd"


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float
    num_directions: int
    estimator_kind: EstimatorKind = EstimatorKind.ANTITHETIC

    def __post_init__(self):
        object.__setattr__(self, "estimator_kind", EstimatorKind(self.estimator_kind))
        if not (self.sigma > 0 and np.isfinite(self.sigma)):
            raise ValueError(f"sigma must be positive and finite, got {self.sigma}")
        if int(self.num_directions) != self.num_directions or self.num_directions < 1:
            raise ValueError(f"num_directions must be a positive integer, got {self.num_directions}")

    def evaluations(self):
        return evaluations_for(self.estimator_kind, self.num_directions)


def evaluations_for(kind, n):
    kind = EstimatorKind(kind)
    if kind is EstimatorKind.ANTITHETIC:
        return 2 * n
    if kind is EstimatorKind.FORWARD_FD:
        return n + 1
    return n


@dataclass(frozen=True, eq=False)
class GradientEstimate:
    gradient: np.ndarray
    function_evaluations: int
    estimator_kind: EstimatorKind


# --- objectives ------------------------------------------------------------

def rowwise_dot(xs, a):
    """``xs @ a`` accumulated in ascending coordinate order.

    Each row's result depends only on that row, never on how many rows were
    batched together (BLAS kernels give no such guarantee).
    """
    xs = np.asarray(xs, dtype=np.float64)
    acc = xs[:, 0] * a[0]
    for j in range(1, xs.shape[1]):
        acc = acc + xs[:, j] * a[j]
    return acc


class Objective:
    """A scalar function of a ``dim``-vector.

    Subclasses override ``__call__`` or ``evaluate_batch`` (or both).  The
    batch form must give, row by row, exactly what single calls give.
    """

    dim: int

    def __call__(self, x):
        return float(self.evaluate_batch(np.asarray(x, dtype=np.float64)[None, :])[0])

    def evaluate_batch(self, xs):
        return np.array([self(x) for x in xs], dtype=np.float64)


class FunctionObjective(Objective):
    def __init__(self, fn, dim):
        self.fn = fn
        self.dim = int(dim)

    def __call__(self, x):
        return float(self.fn(np.asarray(x, dtype=np.float64)))


class LinearObjective(Objective):
    """``F(x) = <a, x>``."""

    def __init__(self, a):
        self.a = np.asarray(a, dtype=np.float64)
        self.dim = self.a.size

    def evaluate_batch(self, xs):
        return rowwise_dot(xs, self.a)


class SquaredNormObjective(Objective):
    """``F(x) = ||x||^2``."""

    def __init__(self, dim):
        self.dim = int(dim)

    def evaluate_batch(self, xs):
        xs = np.asarray(xs, dtype=np.float64)
        return rowwise_dot(xs * xs, np.ones(xs.shape[1]))


class NoisyObjective(Objective):
    """Adds N(0, noise_std^2) to every evaluation of ``base``.

    The k-th evaluation (counting from 0 over the wrapper's lifetime) draws
    its noise from ``(noise_seed, k)`` alone, so results do not depend on how
    evaluations were batched.
    """

    def __init__(self, base, noise_std, noise_seed=0):
        self.base = base
        self.dim = base.dim
        self.noise_std = float(noise_std)
        self.noise_seed = int(noise_seed)
        self.counter = 0

    def evaluate_batch(self, xs):
        values = self.base.evaluate_batch(xs)
        ks = np.arange(self.counter, self.counter + len(values), dtype=np.uint64)
        self.counter += len(values)
        return values + self.noise_std * counter_normals(self.noise_seed, ks)


class CountingObjective(Objective):
    """Counts every point evaluated through it."""

    def __init__(self, base):
        self.base = base
        self.dim = base.dim
        self.calls = 0

    def __call__(self, x):
        self.calls += 1
        return self.base(x)

    def evaluate_batch(self, xs):
        xs = np.asarray(xs, dtype=np.float64)
        self.calls += xs.shape[0]
        return self.base.evaluate_batch(xs)


def as_objective(fn, dim=None):
    if isinstance(fn, Objective):
        return fn
    if dim is None:
        raise ValueError("a plain callable needs an explicit dimension")
    return FunctionObjective(fn, dim)


# --- core ------------------------------------------------------------------

def ordered_fold(weights, directions):
    """``sum_i weights[..., i] * directions[..., i, :]`` in ascending ``i``.

    Works on a single estimate (``(N,)`` and ``(N, d)``) or a stack of them
    (``(T, N)`` and ``(T, N, d)``) with identical per-element arithmetic.
    """
    w = np.asarray(weights, dtype=np.float64)
    e = np.asarray(directions, dtype=np.float64)
    acc = np.zeros(e.shape[:-2] + e.shape[-1:])
    for i in range(e.shape[-2]):
        acc += w[..., i, None] * e[..., i, :]
    return acc


def direction_weights(kind, sigma, f_plus, f_minus=None, f_center=None):
    """Per-direction scalar coefficients of each estimator."""
    kind = EstimatorKind(kind)
    f_plus = np.asarray(f_plus, dtype=np.float64)
    n = f_plus.shape[-1]
    if kind is EstimatorKind.VANILLA:
        return f_plus / (n * sigma)
    if kind is EstimatorKind.ANTITHETIC:
        if f_minus is None:
            raise ValueError("antithetic weights need f_minus")
        return (f_plus - np.asarray(f_minus, dtype=np.float64)) / (2 * n * sigma)
    if f_center is None:
        raise ValueError("forward-FD weights need f_center")
    fc = np.asarray(f_center, dtype=np.float64)
    if fc.ndim:
        fc = fc[..., None]
    return (f_plus - fc) / (n * sigma)


def gradient_from_values(kind, sigma, directions, f_plus, f_minus=None, f_center=None):
    """Combine already-computed function values into a gradient estimate."""
    w = direction_weights(kind, sigma, f_plus, f_minus, f_center)
    return ordered_fold(w, directions)


def _direction_rows(directions):
    if isinstance(directions, ExplorationMatrix):
        return directions.rows
    return np.asarray(directions, dtype=np.float64)


def _check_finite(values, what, offset=0):
    bad = ~np.isfinite(values)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise NonFiniteValueError(f"objective returned {values[i]!r} at {what} direction {i + offset}",
                                  index=i + offset)


def _prepare(objective, theta, cfg, directions, expected_kind):
    theta = np.asarray(theta, dtype=np.float64)
    rows = _direction_rows(directions)
    if cfg.estimator_kind is not expected_kind:
        raise ValueError(f"config asks for {cfg.estimator_kind.value}, "
                         f"called {expected_kind.value} estimator")
    if theta.ndim != 1 or rows.ndim != 2 or rows.shape[1] != theta.size:
        raise DimensionMismatchError(
            f"theta has shape {theta.shape}, directions have shape {rows.shape}")
    if rows.shape[0] != cfg.num_directions:
        raise DimensionMismatchError(
            f"config expects N={cfg.num_directions} directions, got {rows.shape[0]}")
    dim = getattr(objective, "dim", theta.size)
    if dim != theta.size:
        raise DimensionMismatchError(f"objective has dim {dim}, theta has {theta.size}")
    return theta, rows


def _evaluate(objective, points, label):
    values = np.asarray(objective.evaluate_batch(points), dtype=np.float64)
    _check_finite(values, label)
    return values


def vanilla_grad(objective, theta, cfg, directions):
    theta, rows = _prepare(objective, theta, cfg, directions, EstimatorKind.VANILLA)
    f_plus = _evaluate(objective, theta + cfg.sigma * rows, "+")
    g = gradient_from_values(EstimatorKind.VANILLA, cfg.sigma, rows, f_plus)
    return GradientEstimate(g, rows.shape[0], EstimatorKind.VANILLA)


def antithetic_grad(objective, theta, cfg, directions):
    theta, rows = _prepare(objective, theta, cfg, directions, EstimatorKind.ANTITHETIC)
    step = cfg.sigma * rows
    f_plus = _evaluate(objective, theta + step, "+")
    f_minus = _evaluate(objective, theta - step, "-")
    g = gradient_from_values(EstimatorKind.ANTITHETIC, cfg.sigma, rows, f_plus, f_minus)
    return GradientEstimate(g, 2 * rows.shape[0], EstimatorKind.ANTITHETIC)


def forward_fd_grad(objective, theta, cfg, directions):
    theta, rows = _prepare(objective, theta, cfg, directions, EstimatorKind.FORWARD_FD)
    f_center = objective.evaluate_batch(theta[None, :])[0]
    if not np.isfinite(f_center):
        raise NonFiniteValueError(f"objective returned {f_center!r} at the center point")
    f_plus = _evaluate(objective, theta + cfg.sigma * rows, "+")
    g = gradient_from_values(EstimatorKind.FORWARD_FD, cfg.sigma, rows, f_plus, f_center=f_center)
    return GradientEstimate(g, rows.shape[0] + 1, EstimatorKind.FORWARD_FD)


_ESTIMATORS = {
    EstimatorKind.VANILLA: vanilla_grad,
    EstimatorKind.ANTITHETIC: antithetic_grad,
    EstimatorKind.FORWARD_FD: forward_fd_grad,
}


def estimate_gradient(objective, theta, cfg, directions):
    """Dispatch on ``cfg.estimator_kind``."""
    return _ESTIMATORS[cfg.estimator_kind](objective, theta, cfg, directions)


# --- MSE harness -------------------------------------------------------------

def trial_estimates(objective, theta, cfg, scheme, trials, seed, chunk=2048):
    """Yield ``(start, gradients)`` blocks of independent per-trial estimates.

    Trial ``t`` draws its directions from ``scheme`` with seed
    ``derive_iteration_seed(seed, t)``.  Trials are evaluated in chunks with
    the same ordered fold as :func:`estimate_gradient`, so each row equals
    what a single call would produce.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    theta = np.asarray(theta, dtype=np.float64)
    d, n, sigma, kind = theta.size, cfg.num_directions, cfg.sigma, cfg.estimator_kind
    for start in range(0, trials, chunk):
        stop = min(trials, start + chunk)
        dirs = np.stack([scheme.sample(d, n, derive_iteration_seed(seed, t), iteration=t).rows
                         for t in range(start, stop)])
        m = stop - start
        step = sigma * dirs
        f_plus = _evaluate(objective, (theta + step).reshape(m * n, d), "+").reshape(m, n)
        f_minus = f_center = None
        if kind is EstimatorKind.ANTITHETIC:
            f_minus = _evaluate(objective, (theta - step).reshape(m * n, d), "-").reshape(m, n)
        elif kind is EstimatorKind.FORWARD_FD:
            f_center = _evaluate(objective, np.repeat(theta[None, :], m, axis=0), "center")
        yield start, gradient_from_values(kind, sigma, dirs, f_plus, f_minus, f_center)


def squared_errors(objective, theta, cfg, scheme, true_grad, trials, seed, chunk=2048):
    """Per-trial ``||grad_hat_t - true_grad||^2`` (see :func:`trial_estimates`)."""
    true_grad = np.asarray(true_grad, dtype=np.float64)
    out = np.empty(trials)
    for start, g in trial_estimates(objective, theta, cfg, scheme, trials, seed, chunk):
        diff = g - true_grad
        out[start:start + len(g)] = np.sum(diff * diff, axis=1)
    return out


def mse_estimate(objective, theta, cfg, scheme, true_grad, trials, seed):
    """Empirical mean squared error of the estimator against ``true_grad``."""
    return float(np.mean(squared_errors(objective, theta, cfg, scheme, true_grad, trials, seed)))


# --- analytic oracles --------------------------------------------------------

class FunctionKind(str, Enum):
    LINEAR = "linear"
    SQUARED_NORM = "squared_norm"


def analytic_smoothed_gradient(kind, theta, sigma, a=None):
    """Closed-form gradient of ``F_sigma`` for the supported test functions.

    ``linear``: ``F_sigma(theta) = <a, theta>`` so the gradient is ``a``.
    ``squared_norm``: ``F_sigma(theta) = ||theta||^2 + sigma^2 d``, gradient
    ``2 theta``.
    """
    kind = FunctionKind(kind)
    theta = np.asarray(theta, dtype=np.float64)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if kind is FunctionKind.LINEAR:
        if a is None:
            raise ValueError("linear kind needs the coefficient vector a")
        a = np.asarray(a, dtype=np.float64)
        if a.shape != theta.shape:
            raise DimensionMismatchError(f"a has shape {a.shape}, theta {theta.shape}")
        return a.copy()
    return 2.0 * theta


def analytic_smoothed_value(kind, theta, sigma, a=None):
    kind = FunctionKind(kind)
    theta = np.asarray(theta, dtype=np.float64)
    if kind is FunctionKind.LINEAR:
        return float(np.dot(a, theta))
    return float(theta @ theta + sigma ** 2 * theta.size)
