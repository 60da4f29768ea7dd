"""Exploration direction generators.

Every generator returns an :class:`ExplorationMatrix` whose ``N`` rows are
the perturbation directions handed to the gradient estimators.  Supported
schemes:

* ``iid``        -- independent standard Gaussian rows
* ``ort``        -- Gaussian orthogonal blocks (rows marginally N(0, I),
                    mutually orthogonal within each block of ``d`` rows)
* ``hd``         -- rows of ``d'^{-(k-1)/2} H D_1 ... H D_k`` (Hadamard times
                    Rademacher diagonals), zero-padded to ``d' = 2^l``
* ``ort_renorm`` -- ``ort`` rows rescaled to the deterministic length sqrt(d)
* ``hd_renorm``  -- ``hd`` rows rescaled to independent chi_d lengths
* ``qmc``        -- Halton points pushed through the inverse normal CDF

All randomized generators are pure functions of ``(d, N, seed)``.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg
from scipy.special import ndtr

from .errors import DegenerateSampleError, DimensionMismatchError
from .seeding import make_rng, mix64


class Scheme(str, Enum):
    IID = "iid"
    GAUSS_ORT = "ort"
    HD = "hd"
    GAUSS_ORT_RENORM = "ort_renorm"
    HD_RENORM = "hd_renorm"
    QMC = "qmc"


class RenormTarget(str, Enum):
    DETERMINISTIC_SQRT_D = "sqrt_d"
    CHI_D = "chi_d"


@dataclass(frozen=True, eq=False)
class ExplorationMatrix:
    """A block of exploration directions.

    ``padded_rows`` keeps the pre-truncation ``N x d'`` rows for the
    Hadamard schemes; it is ``None`` otherwise.
    """

    rows: np.ndarray
    scheme: Scheme
    seed: int | None = None
    padded_dim: int | None = None
    k: int | None = None
    padded_rows: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_directions(self):
        return self.rows.shape[0]

    @property
    def dim(self):
        return self.rows.shape[1]


def _check_sizes(d, n):
    if d < 1 or n < 1:
        raise ValueError(f"need d >= 1 and N >= 1, got d={d}, N={n}")


def sample_iid(d, n, seed):
    _check_sizes(d, n)
    rng = make_rng(seed)
    return ExplorationMatrix(rng.standard_normal((n, d)), Scheme.IID, seed=seed)


def _orthonormal_frame(rng, d, attempts=3):
    # Gram-Schmidt on the rows of a Gaussian matrix.  Householder QR with the
    # sign of diag(R) folded back in is the same frame, computed stably.
    for _ in range(attempts):
        g = rng.standard_normal((d, d))
        q, r = scipy.linalg.qr(g.T, mode="economic", check_finite=False)
        diag = np.diag(r)
        scale = np.abs(diag)
        if scale.min() > 1e-10 * scale.max():
            return (q * np.sign(diag)).T
    raise DegenerateSampleError(
        f"Gram-Schmidt produced numerically dependent rows {attempts} times (d={d})")


def sample_gauss_ort(d, n, seed):
    """Gaussian orthogonal directions.

    Rows come in consecutive blocks of ``min(d, remaining)``; inside a block
    they are orthogonal, across blocks independent.  Each row is a uniformly
    random orthonormal frame vector scaled by an independent chi_d length,
    so it is marginally N(0, I_d).
    """
    _check_sizes(d, n)
    rng = make_rng(seed)
    blocks = []
    remaining = n
    while remaining > 0:
        b = min(d, remaining)
        frame = _orthonormal_frame(rng, d)[:b]
        lengths = np.sqrt(rng.chisquare(d, size=b))
        blocks.append(frame * lengths[:, None])
        remaining -= b
    return ExplorationMatrix(np.vstack(blocks), Scheme.GAUSS_ORT, seed=seed)


def next_pow2(d):
    return 1 << max(0, int(d - 1).bit_length())


def _is_pow2(n):
    return n >= 1 and n & (n - 1) == 0


def fwht(v):
    """Walsh-Hadamard transform along the last axis.

    Computes ``H v`` for ``H = H1 ⊗ ... ⊗ H1`` with ``H1 = [[-1, 1], [1, 1]]``
    using ``log2(n)`` butterfly passes.  Integer input stays integer, so the
    result is exact.  The input is not modified.
    """
    a = np.array(v, copy=True)
    if a.dtype == np.bool_:
        a = a.astype(np.int64)
    n = a.shape[-1] if a.ndim else 0
    if not _is_pow2(n):
        raise ValueError(f"fwht needs a power-of-two length, got {n}")
    lead = a.shape[:-1]
    h = 1
    while h < n:
        a = a.reshape(*lead, n // (2 * h), 2, h)
        x = a[..., 0, :].copy()
        y = a[..., 1, :].copy()
        a[..., 0, :] = y - x
        a[..., 1, :] = x + y
        h *= 2
    return a.reshape(*lead, n)


def rademacher_diagonals(d_padded, k, seed):
    rng = make_rng(seed)
    return rng.integers(0, 2, size=(k, d_padded), dtype=np.int64) * 2 - 1


def hd_rows(d, row_indices, k, seed):
    """Selected padded rows of ``d'^{-(k-1)/2} H D_1 ... H D_k``.

    Row ``i`` is ``(H D_1 ... H D_k)^T e_i = D_k H ... D_1 H e_i``: ``k``
    transform passes, each followed by a sign flip.  Only the requested rows
    are built, and each row depends on nothing but ``(i, seed)``, so a worker
    holding a subset of rows gets bit-identical values to the full matrix.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    dp = next_pow2(d)
    idx = np.asarray(row_indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= dp):
        raise ValueError(f"row index out of range for padded dimension {dp}")
    diags = rademacher_diagonals(dp, k, seed)
    exact_int = k * max(1, dp.bit_length()) < 62
    x = np.zeros((idx.size, dp), dtype=np.int64 if exact_int else np.float64)
    x[np.arange(idx.size), idx] = 1
    for j in range(k):
        x = fwht(x)
        x *= diags[j]
    scale = float(dp) ** (-(k - 1) / 2.0)
    return x.astype(np.float64) * scale


def sample_hd(d, n, seed, k=1):
    _check_sizes(d, n)
    dp = next_pow2(d)
    if n > dp:
        raise ValueError(f"HD scheme needs N <= padded dimension {dp}, got N={n}")
    padded = hd_rows(d, np.arange(n), k, seed)
    return ExplorationMatrix(padded[:, :d].copy(), Scheme.HD, seed=seed,
                             padded_dim=dp, k=k, padded_rows=padded)


def renormalize(matrix, target, seed=None):
    """Rescale rows to a new length law, keeping their directions.

    ``sqrt_d`` gives every row norm ``sqrt(d)``; ``chi_d`` gives independent
    chi-distributed norms with ``d`` degrees of freedom, where ``d`` is the
    row dimension.
    """
    target = RenormTarget(target)
    if matrix.scheme in (Scheme.IID, Scheme.QMC):
        raise ValueError(f"renormalize applies to orthogonal schemes, not {matrix.scheme.value}")
    rows = matrix.rows
    n, d = rows.shape
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms == 0.0):
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise ValueError(f"cannot renormalize zero-norm row {bad}")
    if target is RenormTarget.DETERMINISTIC_SQRT_D:
        lengths = np.full(n, np.sqrt(d))
    else:
        if seed is None:
            raise ValueError("chi_d renormalization needs a seed")
        lengths = np.sqrt(make_rng(seed).chisquare(d, size=n))
    new_scheme = {Scheme.GAUSS_ORT: Scheme.GAUSS_ORT_RENORM, Scheme.HD: Scheme.HD_RENORM}.get(
        matrix.scheme, matrix.scheme)
    return ExplorationMatrix(rows * (lengths / norms)[:, None], new_scheme, seed=matrix.seed,
                             padded_dim=matrix.padded_dim, k=matrix.k,
                             padded_rows=matrix.padded_rows)


# --- quasi-Monte Carlo ---------------------------------------------------

DEFAULT_LEAP = 700
DEFAULT_SKIP = 1000


def first_primes(count):
    primes = []
    candidate = 2
    while len(primes) < count:
        if all(candidate % p for p in primes if p * p <= candidate):
            primes.append(candidate)
        candidate += 1
    return primes


def _radical_inverse(indices, base):
    # digit reversal with integer numerator/denominator; both stay below 2**53
    # for any realistic index, so the final division is correctly rounded
    n = np.asarray(indices, dtype=np.int64).copy()
    num = np.zeros_like(n)
    den = np.ones_like(n)
    while np.any(n > 0):
        active = n > 0
        digit = n % base
        num = np.where(active, num * base + digit, num)
        den = np.where(active, den * base, den)
        n //= base
    return num / den


def effective_halton_index(index, leap=DEFAULT_LEAP, skip=DEFAULT_SKIP):
    return skip + 1 + (np.asarray(index, dtype=np.int64) - 1) * (leap + 1)


def halton_point(index, bases, leap=DEFAULT_LEAP, skip=DEFAULT_SKIP):
    """Point number ``index`` (1-based) of the leaped and skipped Halton sequence."""
    if index < 1:
        raise ValueError(f"Halton index must be >= 1, got {index}")
    eff = effective_halton_index(np.array([index]), leap, skip)
    return np.array([_radical_inverse(eff, b)[0] for b in bases])


@dataclass
class HaltonStream:
    """Single-owner cursor over a Halton sequence in the first ``dim`` prime bases."""

    dim: int
    leap: int = DEFAULT_LEAP
    skip: int = DEFAULT_SKIP
    position: int = 0

    def __post_init__(self):
        self.bases = first_primes(self.dim)

    def take(self, n):
        idx = np.arange(self.position + 1, self.position + n + 1)
        eff = effective_halton_index(idx, self.leap, self.skip)
        pts = np.column_stack([_radical_inverse(eff, b) for b in self.bases])
        self.position += n
        return pts


# Acklam's rational approximation to the normal quantile (|rel err| < 1.2e-9)
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def _acklam_lower(p):
    # p in (0, 0.5]; returns z <= 0
    z = np.empty_like(p)
    tail = p < _P_LOW
    if np.any(tail):
        q = np.sqrt(-2.0 * np.log(p[tail]))
        z[tail] = ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
                   / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    mid = ~tail
    if np.any(mid):
        q = p[mid] - 0.5
        r = q * q
        z[mid] = ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
                  / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))
    return z


def inv_norm_cdf(u):
    """Standard normal quantile: ``z`` with ``Phi(z) = u``.

    Rational approximation on the lower half followed by one Newton step,
    mirrored for ``u > 0.5`` so that ``z(u) == -z(1 - u)`` whenever ``1 - u``
    is exact.
    """
    arr = np.asarray(u, dtype=np.float64)
    if np.any(~(arr > 0.0) | ~(arr < 1.0)):
        raise ValueError("inv_norm_cdf needs 0 < u < 1")
    flat = arr.reshape(-1)
    upper = flat > 0.5
    p = np.where(upper, 1.0 - flat, flat)
    z = _acklam_lower(p)
    err = ndtr(z) - p
    z = z - err * np.sqrt(2.0 * np.pi) * np.exp(0.5 * z * z)
    z = np.where(upper, -z, z).reshape(arr.shape)
    return float(z) if z.ndim == 0 else z


def sample_qmc(d, n, stream):
    """Next ``n`` Halton points of ``stream`` mapped to Gaussian directions."""
    _check_sizes(d, n)
    if stream.dim != d:
        raise DimensionMismatchError(f"stream has dim {stream.dim}, requested d={d}")
    start = stream.position
    rows = inv_norm_cdf(stream.take(n))
    return ExplorationMatrix(rows, Scheme.QMC, seed=start)


# --- scheme objects --------------------------------------------------------

_RENORM_SALT = 0x5BD1E995


@dataclass(frozen=True)
class ExplorationScheme:
    """A named generator with its settings, callable per optimization iteration.

    ``sample`` builds the whole ``N x d`` matrix; ``rows`` returns only the
    requested row indices and is what a distributed worker calls.  For the
    ``qmc`` scheme the seed is ignored and iteration ``t`` consumes Halton
    points ``t*N + 1 .. (t+1)*N``.
    """

    kind: Scheme = Scheme.GAUSS_ORT
    k: int = 1
    leap: int = DEFAULT_LEAP
    skip: int = DEFAULT_SKIP

    def __post_init__(self):
        object.__setattr__(self, "kind", Scheme(self.kind))
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")

    def max_directions(self, d):
        if self.kind in (Scheme.HD, Scheme.HD_RENORM):
            return next_pow2(d)
        return None

    def sample(self, d, n, seed, iteration=0):
        kind = self.kind
        if kind is Scheme.IID:
            return sample_iid(d, n, seed)
        if kind is Scheme.GAUSS_ORT:
            return sample_gauss_ort(d, n, seed)
        if kind is Scheme.GAUSS_ORT_RENORM:
            return renormalize(sample_gauss_ort(d, n, seed), RenormTarget.DETERMINISTIC_SQRT_D)
        if kind is Scheme.HD:
            return sample_hd(d, n, seed, k=self.k)
        if kind is Scheme.HD_RENORM:
            return renormalize(sample_hd(d, n, seed, k=self.k), RenormTarget.CHI_D,
                               seed=mix64(int(seed) ^ _RENORM_SALT))
        stream = HaltonStream(d, self.leap, self.skip, position=iteration * n)
        return sample_qmc(d, n, stream)

    def rows(self, d, n, seed, row_indices, iteration=0):
        idx = np.asarray(row_indices, dtype=np.int64)
        if self.kind in (Scheme.HD, Scheme.HD_RENORM):
            dp = next_pow2(d)
            if n > dp:
                raise ValueError(f"HD scheme needs N <= padded dimension {dp}, got N={n}")
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise ValueError("row index out of range")
            rows = hd_rows(d, idx, self.k, seed)[:, :d]
            if self.kind is Scheme.HD_RENORM:
                lengths = np.sqrt(make_rng(mix64(int(seed) ^ _RENORM_SALT)).chisquare(d, size=n))
                rows = rows * (lengths[idx] / np.linalg.norm(rows, axis=1))[:, None]
            return rows
        return self.sample(d, n, seed, iteration).rows[idx]
