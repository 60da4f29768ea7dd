import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from structes.errors import DimensionMismatchError, NonFiniteValueError
from structes.policies import (LayerKind, MatvecMode, OpCounter, PolicySpec, ToeplitzLayer,
                               choose_hidden_size_hadamard, devectorize, fft_radix2, forward,
                               from_bytes, from_text, param_count, param_slices, to_bytes,
                               to_text, toeplitz_matvec, vectorize)

# (o, a) of the benchmark tasks and their published counts: G_ort, H, full
TABLE = {
    "Swimmer": ((8, 2), 253, 253, 1408),
    "Ant": ((111, 8), 362, 254, 4896),
    "HalfCheetah": ((17, 6), 266, 254, 2174),
    "Hopper": ((11, 3), 257, 254, 1536),
    "Humanoid": ((376, 17), 636, 510, 13664),
    "Walker2d": ((17, 6), 266, 254, 1824),
    "Pusher": ((23, 7), 273, 255, 2048),
    "Reacher": ((11, 2), 256, 256, 1189),
    "Striker": ((23, 7), 273, 255, 2048),
    "Thrower": ((23, 7), 273, 255, 2048),
    "ContMountCar": ((2, 1), 246, 246, 1184),
    "Pendulum": ((3, 1), 247, 247, 1216),
}
ANOMALOUS_H = {"Hopper"}
ANOMALOUS_FULL = {"HalfCheetah", "Reacher"}


def hadamard_count(o, a):
    budget = 512 if o + a > 300 else 256
    return param_count(PolicySpec.toeplitz(o, a, choose_hidden_size_hadamard(o, a, budget)))


@pytest.mark.parametrize("name", sorted(TABLE))
def test_table_counts(name):
    (o, a), g_ort, had, full = TABLE[name]
    assert param_count(PolicySpec.toeplitz(o, a)) == g_ort
    if name not in ANOMALOUS_H:
        assert hadamard_count(o, a) == had
    if name not in ANOMALOUS_FULL:
        assert param_count(PolicySpec.dense(o, a)) == full


def test_anomalous_cells_do_not_fit():
    assert hadamard_count(11, 3) == 251
    assert param_count(PolicySpec.dense(17, 6)) == 1824
    assert param_count(PolicySpec.dense(11, 2)) == 1504


def test_param_count_examples():
    assert param_count(PolicySpec.toeplitz(8, 2, 41)) == 253
    assert param_count(PolicySpec.toeplitz(376, 17, 20)) == 510
    assert param_count(PolicySpec.dense(3, 1)) == 1216
    assert param_count(PolicySpec.dense(111, 8)) == 4896


def test_hidden_size_examples():
    assert choose_hidden_size_hadamard(111, 8, 256) == 23
    assert choose_hidden_size_hadamard(376, 17, 512) == 20
    assert choose_hidden_size_hadamard(2, 1, 256) == 41
    assert param_count(PolicySpec.toeplitz(2, 1, 41)) == 246
    with pytest.raises(ValueError):
        choose_hidden_size_hadamard(376, 17, 256)


@given(st.integers(1, 400), st.integers(1, 30), st.integers(1, 64))
def test_toeplitz_count_formula(o, a, h):
    spec = PolicySpec.toeplitz(o, a, h)
    assert param_count(spec) == o + a + 6 * h - 3
    assert sum(s.stop - s.start for s in param_slices(spec)) == param_count(spec)


def test_spec_validation():
    with pytest.raises(ValueError):
        PolicySpec(3, 1, (4, 4, 4))
    with pytest.raises(ValueError):
        PolicySpec(0, 1)


# --- vectorize / devectorize ------------------------------------------------------

def test_pendulum_slice_lengths():
    spec = PolicySpec.toeplitz(3, 1)
    assert [s.stop - s.start for s in param_slices(spec)] == [43, 81, 41, 41, 41]
    layers = devectorize(spec, np.arange(247.0))
    assert [w.diagonal_params.size for w in layers.weights] == [43, 81, 41]
    assert layers.biases[0][0] == 165.0


@pytest.mark.parametrize("spec", [PolicySpec.toeplitz(3, 1), PolicySpec.dense(2, 1, 5),
                                  PolicySpec(4, 2, (3, 6), "toeplitz")])
def test_round_trip(spec):
    p = np.random.default_rng(0).normal(size=param_count(spec))
    assert np.array_equal(vectorize(devectorize(spec, p)), p)


def test_devectorize_length_mismatch():
    with pytest.raises(DimensionMismatchError):
        devectorize(PolicySpec.toeplitz(3, 1), np.zeros(246))


def test_zero_params_zero_action():
    spec = PolicySpec.toeplitz(3, 1)
    for mode in MatvecMode:
        assert np.array_equal(forward(spec, np.zeros(247), np.array([0.3, -1, 2]), mode), [0.0])


# --- Toeplitz matvec -------------------------------------------------------------------

def test_toeplitz_identity():
    layer = ToeplitzLayer(2, 2, np.array([0.0, 1.0, 0.0]))
    x = np.array([3.0, -4.0])
    assert np.array_equal(layer.materialize(), np.eye(2))
    assert np.array_equal(toeplitz_matvec(layer, x), x)


def test_toeplitz_first_column():
    layer = ToeplitzLayer(2, 2, np.array([2.0, 3.0, 5.0]))
    assert np.array_equal(toeplitz_matvec(layer, np.array([1.0, 0.0])), [3.0, 5.0])


def test_toeplitz_diagonals_constant_exhaustive():
    rng = np.random.default_rng(1)
    for m in range(1, 9):
        for n in range(1, 9):
            t = ToeplitzLayer(m, n, rng.normal(size=m + n - 1)).materialize()
            for i in range(1, m):
                for j in range(1, n):
                    assert t[i, j] == t[i - 1, j - 1]


def test_toeplitz_fft_matches_direct():
    rng = np.random.default_rng(2)
    layer = ToeplitzLayer(7, 5, rng.normal(size=11))
    x = rng.normal(size=5)
    d = toeplitz_matvec(layer, x, "direct")
    f = toeplitz_matvec(layer, x, "fft")
    assert np.allclose(f, d, rtol=1e-10, atol=1e-12)


@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2 ** 32))
def test_toeplitz_fft_matches_direct_property(m, n, seed):
    rng = np.random.default_rng(seed)
    layer = ToeplitzLayer(m, n, rng.normal(size=m + n - 1))
    x = rng.normal(size=n)
    d = toeplitz_matvec(layer, x, "direct")
    assert np.allclose(toeplitz_matvec(layer, x, "fft"), d, rtol=1e-10,
                       atol=1e-10 * max(1.0, np.abs(d).max()))


def test_toeplitz_matvec_dimension_error():
    with pytest.raises(DimensionMismatchError):
        toeplitz_matvec(ToeplitzLayer(3, 2, np.zeros(4)), np.zeros(3))
    with pytest.raises(DimensionMismatchError):
        ToeplitzLayer(3, 2, np.zeros(5))


def test_fft_against_numpy():
    x = np.random.default_rng(3).normal(size=64)
    assert np.allclose(fft_radix2(x), np.fft.fft(x), atol=1e-12)
    assert np.allclose(fft_radix2(np.fft.fft(x), inverse=True) / 64, x, atol=1e-12)
    with pytest.raises(ValueError):
        fft_radix2(np.zeros(6))


@pytest.mark.parametrize("m,n", [(64, 64), (256, 128), (1024, 1024), (41, 3)])
def test_fft_operation_count(m, n):
    layer = ToeplitzLayer(m, n, np.ones(m + n - 1))
    c = OpCounter()
    toeplitz_matvec(layer, np.ones(n), "fft", counter=c)
    assert c.flops <= 60 * (m + n) * np.log2(m + n)
    direct = OpCounter()
    toeplitz_matvec(layer, np.ones(n), "direct", counter=direct)
    assert direct.flops == 2 * m * n - m
    if m * n >= 1024 * 1024:
        assert c.flops < direct.flops


# --- forward -------------------------------------------------------------------------------

def test_dense_chain():
    spec = PolicySpec(1, 1, (1, 1), "dense")
    # W1, W2, W3, b1, b2
    p = np.array([1.0, 1.0, 1.0, 0.0, 0.0])
    for s in (-2.0, 0.5, 3.0):
        assert forward(spec, p, np.array([s]))[0] == np.tanh(np.tanh(np.tanh(s)))


def test_forward_matches_materialized_layers():
    spec = PolicySpec.toeplitz(3, 1)
    rng = np.random.default_rng(4)
    p = rng.normal(size=247) * 0.3
    s = rng.normal(size=3)
    layers = devectorize(spec, p)
    w1, w2, w3 = (w.materialize() for w in layers.weights)
    ref = np.tanh(w3 @ np.tanh(w2 @ np.tanh(w1 @ s + layers.biases[0]) + layers.biases[1]))
    assert np.allclose(forward(spec, p, s), ref, rtol=1e-12)


@given(st.integers(0, 2 ** 32))
def test_direct_and_fft_paths_agree(seed):
    rng = np.random.default_rng(seed)
    spec = PolicySpec.toeplitz(8, 2)
    p = rng.normal(size=param_count(spec))
    s = rng.normal(size=8)
    assert np.allclose(forward(spec, p, s, "direct"), forward(spec, p, s, "fft"),
                       rtol=1e-10, atol=1e-12)


@given(arrays(np.float64, 3, elements=st.floats(-1e6, 1e6)), st.integers(0, 2 ** 32))
def test_output_bounded(state, seed):
    spec = PolicySpec(3, 2, (5, 4), "dense")
    p = np.random.default_rng(seed).normal(size=param_count(spec))
    out = forward(spec, p, state)
    assert np.all(np.abs(out) <= 1.0)


def test_forward_errors():
    spec = PolicySpec.toeplitz(3, 1)
    with pytest.raises(NonFiniteValueError):
        forward(spec, np.zeros(247), np.array([np.nan, 0, 0]))
    with pytest.raises(DimensionMismatchError):
        forward(spec, np.zeros(247), np.zeros(4))


# --- serialization ---------------------------------------------------------------------------

def test_binary_round_trip():
    spec = PolicySpec.toeplitz(3, 1)
    p = np.random.default_rng(5).normal(size=247)
    blob = to_bytes(spec, p)
    assert blob[:4] == b"STPL" and len(blob) == 28 + 8 * 247
    spec2, p2 = from_bytes(blob)
    assert spec2 == spec and np.array_equal(p2, p)
    with pytest.raises(ValueError):
        from_bytes(blob[:-8])


def test_text_round_trip():
    spec = PolicySpec.dense(2, 1, 3)
    p = np.random.default_rng(6).normal(size=param_count(spec))
    spec2, p2 = from_text(to_text(spec, p))
    assert spec2 == spec and spec2.layer_kind is LayerKind.DENSE
    assert np.array_equal(p2, p)


def test_numpy_integer_sizes():
    layer = ToeplitzLayer(np.int64(3), np.int64(2), np.arange(4.0))
    assert isinstance(layer.rows, int)
    x = np.array([1.0, -1.0])
    assert np.allclose(toeplitz_matvec(layer, x, "fft"), toeplitz_matvec(layer, x, "direct"))
