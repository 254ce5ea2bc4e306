import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvquant.metrics import dir_error, snr_error
from kvquant.quantizer import beta_codebook
from kvquant.schemes import (
    MAX_BUDGET,
    MIN_BUDGET,
    SchemeId,
    bit_accounting,
    decode_cache,
    encode_cache,
    signs_for,
)

ALL = [s.value for s in SchemeId]


def caches(seed=0, S=64, d=128):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((S, d)), rng.standard_normal((S, d))


def test_parse_accepts_values_and_names():
    assert SchemeId.parse("QJLK-ablation") is SchemeId.QJLK
    assert SchemeId.parse("PLAIN") is SchemeId.PLAIN
    with pytest.raises(ValueError):
        SchemeId.parse("KQQ")


@pytest.mark.parametrize("scheme", ALL)
@pytest.mark.parametrize("n", range(MIN_BUDGET, MAX_BUDGET + 1))
def test_bit_accounting_spends_the_budget(scheme, n):
    acc = bit_accounting(scheme, n)
    for cache in ("K", "V"):
        assert sum(acc[cache].values()) == n


def test_bit_accounting_table():
    assert bit_accounting("KV", 4) == {"K": {"scalar": 4, "sketch": 0, "unused": 0},
                                       "V": {"scalar": 4, "sketch": 0, "unused": 0}}
    assert bit_accounting("KQV", 4)["V"] == {"scalar": 3, "sketch": 1, "unused": 0}
    assert bit_accounting("QKQV", 4)["K"] == {"scalar": 3, "sketch": 1, "unused": 0}
    assert bit_accounting("QJLK", 4)["K"] == {"scalar": 0, "sketch": 1, "unused": 3}


def test_kqv_and_qkqv_share_v_bit_for_bit():
    K, V = caches(1)
    _, v1 = decode_cache(encode_cache(K, V, "KQV", 4, 99))
    _, v2 = decode_cache(encode_cache(K, V, "QKQV", 4, 99))
    np.testing.assert_array_equal(v1, v2)


def test_kv_and_plain_identical():
    K, V = caches(2)
    a = decode_cache(encode_cache(K, V, "KV", 3, 5))
    b = decode_cache(encode_cache(K, V, "Plain-ablation", 3, 5))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


@pytest.mark.parametrize("scheme", ALL)
def test_encoding_is_deterministic(scheme):
    K, V = caches(3)
    a = decode_cache(encode_cache(K, V, scheme, 4, 1234))
    b = decode_cache(encode_cache(K, V, scheme, 4, 1234))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


@pytest.mark.parametrize("scheme", ALL)
def test_zero_rows_decode_to_zero(scheme):
    K, V = caches(4)
    K[0] = 0.0
    V[5] = 0.0
    K_hat, V_hat = decode_cache(encode_cache(K, V, scheme, 4, 7))
    assert np.all(K_hat[0] == 0) and np.all(V_hat[5] == 0)
    assert np.all(np.isfinite(K_hat)) and np.all(np.isfinite(V_hat))


@pytest.mark.parametrize("scheme", ["KV", "KQV", "QKQV"])
def test_large_budget_is_nearly_exact(scheme):
    K, V = caches(5)
    K_hat, V_hat = decode_cache(encode_cache(K, V, scheme, MAX_BUDGET, 8))
    assert np.mean(snr_error(K, K_hat)) < 1e-3
    assert np.mean(dir_error(V, V_hat)) < 1e-3


def test_error_decreases_with_budget():
    K, V = caches(6)
    errs = [np.mean(snr_error(K, decode_cache(encode_cache(K, V, "KQV", n, 3))[0])) for n in range(2, 8)]
    assert all(a > b for a, b in zip(errs, errs[1:]))


def test_rotated_scalar_error_matches_codebook():
    K, V = caches(7, S=512)
    K_hat, _ = decode_cache(encode_cache(K, V, "KQV", 4, 11))
    assert np.mean(snr_error(K, K_hat)) == pytest.approx(beta_codebook(128, 4).expected_rel_mse, rel=0.05)


def test_qjl_correction_relative_error():
    # a unit-norm sketch of a residual with relative energy eps leaves (pi/2 - 1) eps
    K, V = caches(8, S=512)
    K_hat, _ = decode_cache(encode_cache(K, V, "QKQV", 4, 12))
    expected = (math.pi / 2 - 1) * beta_codebook(128, 3).expected_rel_mse
    assert np.mean(snr_error(K, K_hat)) == pytest.approx(expected, rel=0.05)


def test_sign_sketch_relative_error():
    K, V = caches(9, S=512)
    K_hat, _ = decode_cache(encode_cache(K, V, "QJLK", 4, 13))
    assert np.mean(snr_error(K, K_hat)) == pytest.approx(math.pi / 2 - 1, rel=0.03)


def test_to_dict_shape():
    K, V = caches(10)
    obj = encode_cache(K, V, "KQV", 4, 1).to_dict()
    assert obj["scheme"] == "KQV" and obj["budget"] == 4
    assert set(obj) >= {"k", "v", "bits"}


def test_signs_for_rows_are_prefix_stable():
    a = signs_for(42, 1, 64, rows=10)
    b = signs_for(42, 1, 64, rows=20)
    np.testing.assert_array_equal(a, b[:10])
    assert not np.array_equal(signs_for(42, 1, 64), signs_for(42, 2, 64))


@pytest.mark.parametrize("n", [1, 9])
def test_budget_out_of_range(n):
    K, V = caches(0)
    with pytest.raises(ValueError):
        encode_cache(K, V, "KV", n, 0)


def test_rotated_scheme_needs_power_of_two():
    rng = np.random.default_rng(0)
    K = rng.standard_normal((8, 12))
    with pytest.raises(ValueError):
        encode_cache(K, K, "KQV", 4, 0)
    encode_cache(K, K, "KV", 4, 0)


def test_mismatched_widths_rejected():
    with pytest.raises(ValueError):
        encode_cache(np.ones((4, 8)), np.ones((4, 16)), "KV", 4, 0)


def test_empirical_codebook_path():
    K, V = caches(11)
    K_hat, _ = decode_cache(encode_cache(K, V, "KV", 4, 0, codebook="empirical"))
    assert np.mean(snr_error(K, K_hat)) < 0.05
    with pytest.raises(ValueError):
        encode_cache(K, V, "KV", 4, 0, codebook="nope")


@settings(max_examples=25, deadline=None)
@given(scheme=st.sampled_from(ALL), n=st.integers(MIN_BUDGET, MAX_BUDGET), seed=st.integers(0, 2**62),
       S=st.integers(1, 16), d=st.sampled_from([8, 32, 128]))
def test_decode_shapes_and_finiteness(scheme, n, seed, S, d):
    rng = np.random.default_rng(seed % 2**32)
    K = rng.standard_normal((S, d)) * 10 ** rng.uniform(-3, 3)
    V = rng.standard_normal((S, d))
    K_hat, V_hat = decode_cache(encode_cache(K, V, scheme, n, seed))
    assert K_hat.shape == K.shape and V_hat.shape == V.shape
    assert np.all(np.isfinite(K_hat)) and np.all(np.isfinite(V_hat))
    assert np.all(dir_error(K, K_hat) <= 2.0)


@settings(max_examples=25, deadline=None)
@given(scheme=st.sampled_from(["KV", "KQV"]), seed=st.integers(0, 2**62), c=st.floats(1e-3, 1e3))
def test_scalar_k_path_is_scale_equivariant(scheme, seed, c):
    K, V = caches(seed % 1000, S=8, d=32)
    a, _ = decode_cache(encode_cache(K, V, scheme, 4, seed))
    b, _ = decode_cache(encode_cache(c * K, V, scheme, 4, seed))
    np.testing.assert_allclose(b, c * a, rtol=1e-6, atol=1e-12)
