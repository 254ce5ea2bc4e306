import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from kvquant.geometry import (
    beta_cdf,
    beta_moment_partial,
    beta_pdf,
    beta_shape,
    gaussian_limit_pdf,
    sample_unit_sphere,
)

from oracles import beta_gauss_gap, beta_pdf_ref

DIMS = (2, 3, 8, 128, 1024)

# frozen from oracles.py (quadrature)
E_ABS_BETA128 = 0.0706615727380926
BETA_GAUSS_GAP_1024 = 0.000732630557074693


def test_shape_parameter():
    assert beta_shape(128) == 63.5
    assert beta_shape(2) == 0.5


@pytest.mark.parametrize("d", [3, 8, 128, 1024])
def test_pdf_matches_reference(d):
    t = np.linspace(-0.99, 0.99, 41)
    np.testing.assert_allclose(beta_pdf(t, d), beta_pdf_ref(t, d), rtol=1e-10)


@pytest.mark.parametrize("d", [3, 8, 128, 1024])
def test_pdf_integrates_to_one(d):
    total, _ = integrate.quad(beta_pdf, -1, 1, args=(d,), points=[0.0], limit=200)
    assert total == pytest.approx(1.0, abs=1e-9)


def test_d2_is_arcsine_and_diverges_at_endpoints():
    assert beta_pdf(0.0, 2) == pytest.approx(1 / math.pi)
    assert math.isinf(beta_pdf(1.0, 2))
    assert beta_cdf(0.5, 2) == pytest.approx(0.5 + math.asin(0.5) / math.pi)


def test_d3_is_uniform():
    np.testing.assert_allclose(beta_pdf(np.array([-0.9, 0.0, 0.7]), 3), 0.5)


def test_first_absolute_moment_frozen():
    assert 2 * beta_moment_partial(0.0, 1.0, 128, 1) == pytest.approx(E_ABS_BETA128, rel=1e-10)


@pytest.mark.parametrize("d", [2, 8, 128, 1024])
@pytest.mark.parametrize("k", [0, 1, 2])
def test_partial_moments_match_quadrature(d, k):
    lo, hi = -0.05, 0.12
    ref, _ = integrate.quad(lambda t: t**k * beta_pdf_ref(t, d), lo, hi, epsrel=1e-12)
    assert beta_moment_partial(lo, hi, d, k) == pytest.approx(ref, rel=1e-9, abs=1e-15)


def test_second_moment_is_one_over_d():
    assert beta_moment_partial(-1.0, 1.0, 128, 2) == pytest.approx(1 / 128, rel=1e-12)


def test_gaussian_limit_close_at_1024():
    t = np.linspace(-0.2, 0.2, 40001)
    gap = np.max(np.abs(beta_pdf(t, 1024) - gaussian_limit_pdf(t, 1024))) / gaussian_limit_pdf(0.0, 1024)
    assert gap == pytest.approx(beta_gauss_gap(), rel=1e-9)
    assert gap == pytest.approx(BETA_GAUSS_GAP_1024, rel=1e-9)
    assert gap < 0.01


@pytest.mark.parametrize("bad", [1, 0, 2.5, -4])
def test_bad_dimension_rejected(bad):
    with pytest.raises(ValueError):
        beta_pdf(0.0, bad)
    with pytest.raises(ValueError):
        sample_unit_sphere(bad, np.random.default_rng(0))


def test_outside_support_rejected():
    with pytest.raises(ValueError):
        beta_pdf(1.5, 8)
    with pytest.raises(ValueError):
        beta_cdf(-1.01, 8)


def test_moment_order_rejected():
    with pytest.raises(ValueError):
        beta_moment_partial(0, 1, 8, 3)


def test_sphere_samples_are_unit():
    x = sample_unit_sphere(64, np.random.default_rng(0), size=500)
    assert x.shape == (500, 64)
    np.testing.assert_allclose(np.linalg.norm(x, axis=1), 1.0, atol=1e-12)
    assert sample_unit_sphere(5, np.random.default_rng(0)).shape == (5,)


@settings(max_examples=60, deadline=None)
@given(d=st.sampled_from(DIMS), t=st.floats(-0.999, 0.999))
def test_pdf_symmetric(d, t):
    assert beta_pdf(t, d) == pytest.approx(beta_pdf(-t, d), rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(d=st.sampled_from(DIMS), a=st.floats(-1, 1), b=st.floats(-1, 1))
def test_cdf_monotone_and_bounded(d, a, b):
    lo, hi = min(a, b), max(a, b)
    assert 0.0 <= beta_cdf(lo, d) <= beta_cdf(hi, d) <= 1.0


@settings(max_examples=60, deadline=None)
@given(d=st.sampled_from(DIMS), t=st.floats(-1, 1))
def test_cdf_reflection(d, t):
    assert beta_cdf(t, d) + beta_cdf(-t, d) == pytest.approx(1.0, abs=1e-12)
