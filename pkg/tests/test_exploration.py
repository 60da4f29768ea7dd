from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import bisection_quantile, naive_hadamard, radical_inverse_fraction
from structes.errors import DimensionMismatchError
from structes.exploration import (ExplorationScheme, HaltonStream, RenormTarget, Scheme,
                                  effective_halton_index, first_primes, fwht, halton_point,
                                  hd_rows, inv_norm_cdf, next_pow2, renormalize,
                                  sample_gauss_ort, sample_hd, sample_iid, sample_qmc)


# --- iid -------------------------------------------------------------------

def test_iid_moments():
    m = sample_iid(4, 10 ** 6, 3).rows
    assert np.all(np.abs(m.mean(axis=0)) < 4 / np.sqrt(10 ** 6))
    assert np.max(np.abs(np.cov(m.T) - np.eye(4))) < 0.01


def test_iid_scalar_and_determinism():
    one = sample_iid(1, 1, 0).rows
    assert one.shape == (1, 1) and np.isfinite(one[0, 0])
    assert np.array_equal(sample_iid(5, 7, 9).rows, sample_iid(5, 7, 9).rows)
    assert not np.array_equal(sample_iid(5, 7, 9).rows, sample_iid(5, 7, 10).rows)


def test_bad_sizes():
    with pytest.raises(ValueError):
        sample_iid(0, 3, 0)
    with pytest.raises(ValueError):
        sample_gauss_ort(3, 0, 0)


# --- Gaussian orthogonal ----------------------------------------------------

def test_ort_orthogonal_d64():
    m = sample_gauss_ort(64, 64, 1).rows
    g = m @ m.T
    off = g - np.diag(np.diag(g))
    assert np.max(np.abs(off)) < 1e-10 * 64


def test_ort_mean_squared_norm():
    total = 0.0
    count = 0
    for s in range(100_000):
        m = sample_gauss_ort(64, 64, s).rows
        total += (m * m).sum()
        count += 64
    assert abs(total / count - 64) < 0.01 * 64


def test_ort_block_structure():
    m = sample_gauss_ort(4, 8, 2).rows
    for block in (m[:4], m[4:]):
        g = block @ block.T
        assert np.max(np.abs(g - np.diag(np.diag(g)))) < 1e-10 * 4
    cross = m[:4] @ m[4:].T
    assert np.max(np.abs(cross)) > 1e-3


def test_ort_partial_block():
    m = sample_gauss_ort(6, 9, 4).rows
    assert m.shape == (9, 6)
    tail = m[6:] @ m[6:].T
    assert np.max(np.abs(tail - np.diag(np.diag(tail)))) < 1e-10 * 6


# --- FWHT --------------------------------------------------------------------

def test_fwht_small_examples():
    assert fwht(np.array([1, 0])).tolist() == [-1, 1]
    assert fwht(np.array([1, 0, 0, 0])).tolist() == [1, -1, -1, 1]


@pytest.mark.parametrize("levels", range(1, 11))
def test_fwht_matches_kronecker(levels):
    rng = np.random.default_rng(levels)
    v = rng.integers(-1000, 1000, size=2 ** levels)
    assert np.array_equal(fwht(v), naive_hadamard(levels) @ v)


def test_fwht_rejects_non_power_of_two():
    with pytest.raises(ValueError):
        fwht(np.ones(6))


@given(st.integers(0, 8), st.integers(0, 2 ** 31))
def test_fwht_involution(levels, seed):
    v = np.random.default_rng(seed).integers(-50, 50, size=2 ** levels)
    assert np.array_equal(fwht(fwht(v)), (2 ** levels) * v)


@given(st.integers(1, 8), st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 2 ** 31))
def test_fwht_linearity(levels, alpha, beta, seed):
    rng = np.random.default_rng(seed)
    u, v = rng.normal(size=(2, 2 ** levels))
    lhs = fwht(alpha * u + beta * v)
    rhs = alpha * fwht(u) + beta * fwht(v)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12 * (np.abs(rhs).max() + 1))


def test_fwht_batched_rows():
    x = np.eye(8, dtype=np.int64)
    assert np.array_equal(fwht(x), naive_hadamard(3).T)


# --- Hadamard-Rademacher -----------------------------------------------------

def test_next_pow2():
    assert [next_pow2(d) for d in (1, 2, 3, 5, 8, 9)] == [1, 2, 4, 8, 8, 16]


def test_hd_k1_exact():
    m = sample_hd(8, 8, 5, k=1).rows
    assert np.array_equal((m * m).sum(axis=1), np.full(8, 8.0))
    g = m @ m.T
    assert np.array_equal(g, 8.0 * np.eye(8))


def test_hd_k3_norms_and_orthogonality():
    m = sample_hd(16, 16, 7, k=3).rows
    norms = (m * m).sum(axis=1)
    assert np.allclose(norms, 16, rtol=1e-9, atol=0)
    g = m @ m.T
    assert np.max(np.abs(g - np.diag(np.diag(g)))) < 1e-9 * 16


def test_hd_matches_direct_product():
    # row i of d'^{-(k-1)/2} H D1 H D2, built densely
    dp, k, seed = 8, 2, 11
    from structes.exploration import rademacher_diagonals
    dg = rademacher_diagonals(dp, k, seed)
    h = naive_hadamard(3)
    full = (h @ np.diag(dg[0]) @ h @ np.diag(dg[1])) / np.sqrt(dp)
    assert np.allclose(sample_hd(dp, dp, seed, k=k).rows, full, atol=1e-12)


def test_hd_truncation():
    em = sample_hd(5, 8, 3)
    assert em.rows.shape == (8, 5)
    p = em.padded_rows
    assert p.shape == (8, 8)
    assert np.array_equal(p @ p.T, 8.0 * np.eye(8))
    assert np.array_equal(em.rows, p[:, :5])


def test_hd_too_many_rows():
    with pytest.raises(ValueError):
        sample_hd(5, 9, 0)


@given(st.integers(2, 40), st.integers(1, 3), st.integers(0, 2 ** 40), st.data())
def test_hd_rows_subset_bit_identical(d, k, seed, data):
    n = next_pow2(d)
    full = sample_hd(d, n, seed, k=k).rows
    idx = sorted(data.draw(st.sets(st.integers(0, n - 1), min_size=1)))
    assert np.array_equal(hd_rows(d, idx, k, seed)[:, :d], full[idx])


# --- renormalization ---------------------------------------------------------

def test_renorm_sqrt_d():
    m = renormalize(sample_gauss_ort(10, 10, 0), RenormTarget.DETERMINISTIC_SQRT_D)
    assert np.allclose(np.linalg.norm(m.rows, axis=1), np.sqrt(10), rtol=1e-14)
    again = renormalize(m, RenormTarget.DETERMINISTIC_SQRT_D)
    assert np.allclose(again.rows, m.rows, rtol=1e-14, atol=0)
    assert m.scheme is Scheme.GAUSS_ORT_RENORM


def test_renorm_chi_mean():
    total = 0.0
    trials = 100_000
    base = sample_hd(16, 16, 0)
    for s in range(trials // 16):
        m = renormalize(base, RenormTarget.CHI_D, seed=s)
        total += (m.rows * m.rows).sum()
    assert abs(total / trials - 16) < 0.01 * 16


def test_renorm_preserves_direction():
    base = sample_hd(8, 8, 1)
    m = renormalize(base, RenormTarget.CHI_D, seed=3)
    cos = (m.rows * base.rows).sum(axis=1) / (
        np.linalg.norm(m.rows, axis=1) * np.linalg.norm(base.rows, axis=1))
    assert np.allclose(cos, 1.0)


def test_renorm_errors():
    with pytest.raises(ValueError):
        renormalize(sample_iid(3, 3, 0), RenormTarget.DETERMINISTIC_SQRT_D)
    with pytest.raises(ValueError):
        renormalize(sample_hd(4, 4, 0), RenormTarget.CHI_D)
    zero = sample_hd(4, 4, 0)
    zero.rows[1] = 0
    with pytest.raises(ValueError, match="row 1"):
        renormalize(zero, RenormTarget.DETERMINISTIC_SQRT_D)


# --- Halton / QMC --------------------------------------------------------------

def test_halton_golden():
    assert [halton_point(i, [2], leap=0, skip=0)[0] for i in (1, 2, 3)] == [0.5, 0.25, 0.75]
    assert halton_point(1, [3], leap=0, skip=0)[0] == 1 / 3


def test_halton_leap_skip_default():
    p = halton_point(1, [2, 3])
    assert effective_halton_index(1) == 1001
    assert p[0] == float(radical_inverse_fraction(1001, 2))
    assert p[1] == float(radical_inverse_fraction(1001, 3))


@given(st.integers(1, 10 ** 6), st.sampled_from(first_primes(12)),
       st.integers(0, 800), st.integers(0, 2000))
def test_halton_against_fraction_oracle(index, base, leap, skip):
    eff = skip + 1 + (index - 1) * (leap + 1)
    got = halton_point(index, [base], leap=leap, skip=skip)[0]
    assert got == float(radical_inverse_fraction(eff, base))
    assert 0 < got < 1


def test_first_primes():
    assert first_primes(10) == [2, 3, 5, 7, 11, 13, 17, 19, 23, 29]


def test_inv_norm_cdf_examples():
    assert inv_norm_cdf(0.5) == 0.0
    assert abs(inv_norm_cdf(0.975) - 1.95996398) < 1e-8
    assert abs(inv_norm_cdf(0.975) - bisection_quantile(0.975)) < 1e-8


@pytest.mark.parametrize("u", [1e-12, 1e-6, 0.001, 0.02, 0.0243, 0.1, 0.3, 0.49, 0.6, 0.8,
                               0.95, 0.99, 0.999999])
def test_inv_norm_cdf_against_bisection(u):
    assert abs(inv_norm_cdf(u) - bisection_quantile(u)) < 1e-8


@given(st.floats(1e-12, 0.5, exclude_max=True))
def test_inv_norm_cdf_antisymmetric(u):
    v = 1.0 - u
    if 1.0 - v == u:
        assert inv_norm_cdf(v) == -inv_norm_cdf(u)


@pytest.mark.parametrize("u", [0.0, 1.0, -0.1, 1.5, float("nan")])
def test_inv_norm_cdf_domain(u):
    with pytest.raises(ValueError):
        inv_norm_cdf(u)


def test_qmc_first_point_zero():
    s = HaltonStream(1, leap=0, skip=0)
    assert sample_qmc(1, 1, s).rows[0, 0] == 0.0


def test_qmc_moments():
    m = sample_qmc(2, 10 ** 4, HaltonStream(2)).rows
    assert np.all(np.abs(m.mean(axis=0)) < 0.02)
    assert np.all(np.abs(m.var(axis=0) - 1) < 0.02)


def test_qmc_stream_continuation():
    s1 = HaltonStream(3)
    a = sample_qmc(3, 5, s1).rows
    b = sample_qmc(3, 5, s1).rows
    whole = sample_qmc(3, 10, HaltonStream(3)).rows
    assert np.array_equal(np.vstack([a, b]), whole)


def test_qmc_dim_mismatch():
    with pytest.raises(DimensionMismatchError):
        sample_qmc(3, 2, HaltonStream(2))


# --- scheme objects --------------------------------------------------------------

@pytest.mark.parametrize("kind", list(Scheme))
def test_scheme_rows_match_sample(kind):
    sc = ExplorationScheme(kind, k=2)
    full = sc.sample(12, 16, 99, iteration=3).rows
    idx = [0, 5, 6, 15]
    assert np.array_equal(sc.rows(12, 16, 99, idx, iteration=3), full[idx])


def test_scheme_qmc_iterations_continue_stream():
    sc = ExplorationScheme("qmc")
    it0 = sc.sample(4, 6, seed=123, iteration=0).rows
    it1 = sc.sample(4, 6, seed=456, iteration=1).rows
    whole = sample_qmc(4, 12, HaltonStream(4)).rows
    assert np.array_equal(np.vstack([it0, it1]), whole)


def test_scheme_max_directions():
    assert ExplorationScheme("hd").max_directions(20) == 32
    assert ExplorationScheme("ort").max_directions(20) is None
    with pytest.raises(ValueError):
        ExplorationScheme("ort", k=0)
    with pytest.raises(ValueError):
        ExplorationScheme("nope")
