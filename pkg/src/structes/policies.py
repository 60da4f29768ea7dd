"""Feedforward policies with dense or Toeplitz weight matrices.

Architecture: ``a = tanh(W3 tanh(W2 tanh(W1 s + b1) + b2))``.  Hidden layers
carry biases, the output layer does not.  A Toeplitz ``m x n`` layer stores
``m + n - 1`` numbers ``v`` with ``T[i, j] = v[(i - j) + (n - 1)]``.

Parameters live in one flat vector, laid out as W1, W2, W3, b1, b2.
"""

import json
import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DimensionMismatchError, NonFiniteValueError

G_ORT_HIDDEN = 41
FULL_HIDDEN = 32


class LayerKind(str, Enum):
    DENSE = "dense"
    TOEPLITZ = "toeplitz"


class MatvecMode(str, Enum):
    DIRECT = "direct"
    FFT = "fft"


@dataclass(frozen=True)
class PolicySpec:
    input_dim: int
    output_dim: int
    hidden_sizes: tuple = (FULL_HIDDEN, FULL_HIDDEN)
    layer_kind: LayerKind = LayerKind.DENSE

    def __post_init__(self):
        object.__setattr__(self, "layer_kind", LayerKind(self.layer_kind))
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if len(self.hidden_sizes) != 2:
            raise ValueError(f"exactly two hidden layers are supported, got {self.hidden_sizes}")
        if min(self.input_dim, self.output_dim, *self.hidden_sizes) < 1:
            raise ValueError("all layer sizes must be >= 1")

    @property
    def layer_shapes(self):
        h1, h2 = self.hidden_sizes
        return [(h1, self.input_dim), (h2, h1), (self.output_dim, h2)]

    @classmethod
    def toeplitz(cls, input_dim, output_dim, hidden=G_ORT_HIDDEN):
        return cls(input_dim, output_dim, (hidden, hidden), LayerKind.TOEPLITZ)

    @classmethod
    def dense(cls, input_dim, output_dim, hidden=FULL_HIDDEN):
        return cls(input_dim, output_dim, (hidden, hidden), LayerKind.DENSE)

    def to_dict(self):
        return {"input_dim": self.input_dim, "output_dim": self.output_dim,
                "hidden_sizes": list(self.hidden_sizes), "layer_kind": self.layer_kind.value}


def _weight_size(kind, m, n):
    return m + n - 1 if kind is LayerKind.TOEPLITZ else m * n


def param_count(spec):
    """Number of trainable parameters of ``spec``.

    Dense with hidden (32, 32): ``32 (o + a) + 1088``.
    Toeplitz with hidden (h, h): ``o + a + 6 h - 3``.
    """
    weights = sum(_weight_size(spec.layer_kind, m, n) for m, n in spec.layer_shapes)
    return weights + sum(spec.hidden_sizes)


def choose_hidden_size_hadamard(input_dim, output_dim, budget=256):
    """Largest Toeplitz hidden size keeping the parameter count within ``budget``.

    Capped at the Gaussian-orthogonal hidden size of 41.
    """
    h = min(G_ORT_HIDDEN, (budget - (input_dim + output_dim - 3)) // 6)
    if h < 1:
        raise ValueError(f"budget {budget} too small for o={input_dim}, a={output_dim}")
    return h


# --- FFT with an operation counter ----------------------------------------

class OpCounter:
    """Tally of real floating-point operations."""

    def __init__(self):
        self.flops = 0

    def add(self, n):
        self.flops += int(n)


def _bit_reverse_indices(n):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft_radix2(x, inverse=False, counter=None):
    """Iterative radix-2 Cooley-Tukey transform of a power-of-two-length vector.

    The inverse is unnormalized (caller divides by ``n``).  When ``counter``
    is given it is charged 10 real flops per butterfly.
    """
    a = np.asarray(x, dtype=np.complex128)
    n = a.size
    if n & (n - 1):
        raise ValueError(f"length must be a power of two, got {n}")
    a = a[_bit_reverse_indices(n)]
    sign = 1.0 if inverse else -1.0
    m = 2
    while m <= n:
        half = m // 2
        w = np.exp(sign * 2j * np.pi * np.arange(half) / m)
        blocks = a.reshape(n // m, m)
        u = blocks[:, :half]
        v = blocks[:, half:] * w
        a = np.concatenate([u + v, u - v], axis=1).reshape(n)
        if counter is not None:
            counter.add(10 * (n // 2))
        m *= 2
    return a


@dataclass(frozen=True, eq=False)
class ToeplitzLayer:
    rows: int
    cols: int
    diagonal_params: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rows", int(self.rows))
        object.__setattr__(self, "cols", int(self.cols))
        v = np.asarray(self.diagonal_params, dtype=np.float64)
        if v.shape != (self.rows + self.cols - 1,):
            raise DimensionMismatchError(
                f"{self.rows}x{self.cols} Toeplitz layer needs {self.rows + self.cols - 1} "
                f"parameters, got {v.shape}")
        object.__setattr__(self, "diagonal_params", v)

    def materialize(self):
        i = np.arange(self.rows)[:, None]
        j = np.arange(self.cols)[None, :]
        return self.diagonal_params[(i - j) + (self.cols - 1)]


def toeplitz_matvec(layer, x, mode=MatvecMode.DIRECT, counter=None):
    """``T x`` for a Toeplitz layer.

    ``direct`` is the O(mn) reference.  ``fft`` embeds ``T`` in a circulant of
    size ``L >= m + n - 1`` (next power of two): the product is entries
    ``n-1 .. n+m-2`` of the circular convolution of ``v`` with ``x``.
    """
    mode = MatvecMode(mode)
    x = np.asarray(x, dtype=np.float64)
    m, n = layer.rows, layer.cols
    if x.shape != (n,):
        raise DimensionMismatchError(f"expected a vector of length {n}, got shape {x.shape}")
    if mode is MatvecMode.DIRECT:
        if counter is not None:
            counter.add(2 * m * n - m)
        return layer.materialize() @ x
    size = 1 << (m + n - 2).bit_length()
    vp = np.zeros(size)
    vp[: m + n - 1] = layer.diagonal_params
    xp = np.zeros(size)
    xp[:n] = x
    spectrum = fft_radix2(vp, counter=counter) * fft_radix2(xp, counter=counter)
    if counter is not None:
        counter.add(6 * size)
    conv = fft_radix2(spectrum, inverse=True, counter=counter).real / size
    if counter is not None:
        counter.add(size)
    return conv[n - 1: n - 1 + m]


# --- vectorize / devectorize ---------------------------------------------

@dataclass(frozen=True, eq=False)
class Layers:
    """Devectorized network: three weight layers and two hidden biases.

    Weights are :class:`ToeplitzLayer` objects or dense ``(m, n)`` arrays.
    """

    weights: tuple
    biases: tuple


def param_slices(spec):
    """Slice of the flat vector for W1, W2, W3, b1, b2, in that order."""
    sizes = [_weight_size(spec.layer_kind, m, n) for m, n in spec.layer_shapes]
    sizes += list(spec.hidden_sizes)
    out, start = [], 0
    for s in sizes:
        out.append(slice(start, start + s))
        start += s
    return out


def devectorize(spec, params):
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (param_count(spec),):
        raise DimensionMismatchError(
            f"spec needs {param_count(spec)} parameters, got shape {params.shape}")
    sl = param_slices(spec)
    weights = []
    for (m, n), s in zip(spec.layer_shapes, sl[:3]):
        if spec.layer_kind is LayerKind.TOEPLITZ:
            weights.append(ToeplitzLayer(m, n, params[s].copy()))
        else:
            weights.append(params[s].reshape(m, n).copy())
    return Layers(tuple(weights), (params[sl[3]].copy(), params[sl[4]].copy()))


def vectorize(layers):
    parts = []
    for w in layers.weights:
        parts.append(w.diagonal_params if isinstance(w, ToeplitzLayer) else np.ravel(w))
    parts.extend(layers.biases)
    return np.concatenate(parts)


# --- inference ---------------------------------------------------------------

def _toeplitz_gather(m, n, offset):
    i = np.arange(m)[:, None]
    j = np.arange(n)[None, :]
    return offset + (i - j) + (n - 1)


def batch_weight_matrices(spec, params_batch):
    """Materialize weight stacks for ``P`` flat parameter vectors.

    Each layer comes back column-major as an ``(n, P, m)`` array so that
    :func:`_stacked_matvec` reads contiguous slices.
    """
    pb = np.atleast_2d(np.asarray(params_batch, dtype=np.float64))
    if pb.shape[1] != param_count(spec):
        raise DimensionMismatchError(
            f"spec needs {param_count(spec)} parameters, got {pb.shape[1]}")
    sl = param_slices(spec)
    mats = []
    for (m, n), s in zip(spec.layer_shapes, sl[:3]):
        if spec.layer_kind is LayerKind.TOEPLITZ:
            w = pb[:, _toeplitz_gather(m, n, s.start)]
        else:
            w = pb[:, s].reshape(-1, m, n)
        mats.append(np.ascontiguousarray(w.transpose(2, 0, 1)))
    return mats, pb[:, sl[3]], pb[:, sl[4]]


def _stacked_matvec(w, x):
    # ascending-column accumulation: a row's result never depends on batch size
    # w is (n, P, m), x is (P, n)
    acc = w[0] * x[:, 0, None]
    for j in range(1, w.shape[0]):
        acc += w[j] * x[:, j, None]
    return acc


def forward_batch(spec, weights, states):
    """Actions for ``P`` policies at ``P`` states.

    ``weights`` is the output of :func:`batch_weight_matrices`.
    """
    (w1, w2, w3), b1, b2 = weights
    s = np.asarray(states, dtype=np.float64)
    h = np.tanh(_stacked_matvec(w1, s) + b1)
    h = np.tanh(_stacked_matvec(w2, h) + b2)
    return np.tanh(_stacked_matvec(w3, h))


def forward(spec, params, state, mode=MatvecMode.DIRECT):
    """Single-state inference; every output lies in (-1, 1)."""
    state = np.asarray(state, dtype=np.float64)
    if state.shape != (spec.input_dim,):
        raise DimensionMismatchError(f"expected state of length {spec.input_dim}, got {state.shape}")
    if not np.all(np.isfinite(state)):
        raise NonFiniteValueError("policy input contains non-finite values")
    mode = MatvecMode(mode)
    if mode is MatvecMode.DIRECT:
        return forward_batch(spec, batch_weight_matrices(spec, params), state[None, :])[0]
    layers = devectorize(spec, params)

    def apply(w, x):
        if isinstance(w, ToeplitzLayer):
            return toeplitz_matvec(w, x, MatvecMode.FFT)
        return w @ x

    w1, w2, w3 = layers.weights
    h = np.tanh(apply(w1, state) + layers.biases[0])
    h = np.tanh(apply(w2, h) + layers.biases[1])
    return np.tanh(apply(w3, h))


# --- serialization -----------------------------------------------------------
#
# Binary layout, little-endian:
#   offset  size  field
#   0       4     magic b"STPL"
#   4       2     format version (uint16, currently 1)
#   6       1     layer kind (0 dense, 1 toeplitz)
#   7       1     reserved, 0
#   8       4     input_dim  (uint32)
#   12      4     output_dim (uint32)
#   16      4     hidden_1   (uint32)
#   20      4     hidden_2   (uint32)
#   24      4     parameter count P (uint32)
#   28      8*P   parameters (float64)

_MAGIC = b"STPL"
_HEADER = struct.Struct("<4sHBB5I")
_KIND_CODES = {LayerKind.DENSE: 0, LayerKind.TOEPLITZ: 1}
TEXT_FORMAT = "structes.policy/1"


def to_bytes(spec, params):
    params = np.asarray(params, dtype="<f8")
    if params.shape != (param_count(spec),):
        raise DimensionMismatchError("parameter vector does not match spec")
    h1, h2 = spec.hidden_sizes
    header = _HEADER.pack(_MAGIC, 1, _KIND_CODES[spec.layer_kind], 0,
                          spec.input_dim, spec.output_dim, h1, h2, params.size)
    return header + params.tobytes()


def from_bytes(blob):
    magic, version, kind, _, o, a, h1, h2, count = _HEADER.unpack_from(blob)
    if magic != _MAGIC or version != 1:
        raise ValueError("not a version-1 policy blob")
    layer_kind = {v: k for k, v in _KIND_CODES.items()}[kind]
    spec = PolicySpec(o, a, (h1, h2), layer_kind)
    if count != param_count(spec) or len(blob) != _HEADER.size + 8 * count:
        raise ValueError("policy blob length does not match its header")
    params = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size, count=count).astype(np.float64)
    return spec, params


def to_text(spec, params):
    doc = {"format": TEXT_FORMAT, **spec.to_dict(),
           "params": [float(p) for p in np.asarray(params, dtype=np.float64)]}
    return json.dumps(doc)


def from_text(text):
    doc = json.loads(text)
    if doc.get("format") != TEXT_FORMAT:
        raise ValueError(f"unknown policy text format {doc.get('format')!r}")
    spec = PolicySpec(doc["input_dim"], doc["output_dim"], tuple(doc["hidden_sizes"]),
                      doc["layer_kind"])
    params = np.array(doc["params"], dtype=np.float64)
    if params.shape != (param_count(spec),):
        raise ValueError("parameter count does not match spec")
    return spec, params
