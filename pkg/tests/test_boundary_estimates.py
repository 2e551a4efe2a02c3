import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from holokit.boundary_estimates import (catlin_bidisc, d_prime, fr_bounds, fr_bounds_from,
                                        fr_constant_fit, herbort_rho_star, herbort_sandwich_fit,
                                        herbort_terms, peak_function, shrink_factor,
                                        sqrt_hyperbolicity_lower, sqrt_lower_fit,
                                        write_residuals_csv)
from holokit.domain_core import preset_domain
from holokit.errors import NotStronglyPseudoconvexError, PreconditionError
from holokit.polynomial import Polynomial, RealPolynomial

BALL = preset_domain("ball", 2)
EGG = preset_domain("egg", 2)
ZETA = np.array([0.6, 0.8j])
PEAK = peak_function(BALL, ZETA)


# peak functions -------------------------------------------------------------------

def test_peak_function_peaks_at_zeta():
    assert PEAK(ZETA[None, :])[0] == pytest.approx(1, abs=1e-14)
    assert np.all(np.abs(PEAK(PEAK.samples)) < 1)
    assert 0 < PEAK.C1 <= PEAK.C2


@given(st.lists(st.floats(-1, 1, allow_nan=False), min_size=4, max_size=4), st.floats(0.01, 1))
def test_property_peak_two_sided_inequality(x, t):
    u = np.asarray(x[:2]) + 1j * np.asarray(x[2:])
    if np.linalg.norm(u) < 1e-6:
        u = -ZETA
    z = ZETA + PEAK.r * t * u / np.linalg.norm(u)
    if not BALL.values(z) < 0:
        # pull back inside along the inward normal, keeping it in the window
        z = ZETA + t * PEAK.r * (-ZETA)
    lo, hi = PEAK.residuals(z[None, :])
    assert lo[0] >= -1e-12 and hi[0] >= -1e-12


def test_peak_function_preconditions():
    with pytest.raises(PreconditionError):
        peak_function(BALL, np.array([0.5, 0]))
    with pytest.raises(PreconditionError):
        peak_function(EGG, np.array([1.0, 0]))
    # -|z1|^2 + |z2|^2 + Re z2: Levi form negative on the tangent line at 0
    z2 = Polynomial.z(2, 1)
    rho = RealPolynomial.from_any(Polynomial.abs2(2, 1) - Polynomial.abs2(2, 0) + (z2 + z2.conj()) * 0.5)
    D = BALL.with_(rho=rho, base_point=np.array([0, -0.5]), contained=False)
    with pytest.raises(NotStronglyPseudoconvexError):
        peak_function(D, np.zeros(2))


# Herbort ----------------------------------------------------------------------------

def test_herbort_is_zero_on_the_diagonal():
    a = np.array([0.1, -0.9])
    assert herbort_rho_star(EGG, a, a) == 0.0
    assert herbort_terms(EGG, a, a)["flag"] == "equal"


def test_herbort_terms_along_the_normal():
    a, b = np.array([0, -0.99]), np.array([0, -0.9])
    t = herbort_terms(EGG, a, b)
    assert t["d_a"] == pytest.approx(0.01, rel=1e-6)
    assert t["pair"] <= 1e-12  # a - b is parallel to the normal
    assert t["d"] <= np.linalg.norm(a - b) + 1e-15
    want = math.log(1 + t["d"] / t["d_a"] + t["pair"] / t["tau"])
    assert herbort_rho_star(EGG, a, b) == pytest.approx(want, rel=1e-14)


def test_d_prime_is_monotone_in_the_offset():
    b = np.array([0, -0.95])
    vals = [d_prime(EGG, b + np.array([s, 0]), b)[0] for s in (0.01, 0.05, 0.2)]
    assert vals[0] < vals[1] < vals[2]


def test_catlin_bidisc_grows_with_delta():
    q = np.array([0, -0.9])
    small, big = catlin_bidisc(EGG, q, 1e-3), catlin_bidisc(EGG, q, 1e-1)
    assert small.tau < big.tau
    pts = q + np.array([[0, 0], [small.tau * 0.5, 0], [0, 5e-4]])
    assert np.all(small.contains(pts)) and np.all(big.contains(pts))
    with pytest.raises(PreconditionError):
        catlin_bidisc(EGG, q, 0.0)


def test_herbort_fit_with_given_distances():
    pairs = [(np.array([0, -1 + 10.0 ** -k]), np.array([0.1, -0.5])) for k in range(1, 11)]
    fit = herbort_sandwich_fit(EGG, pairs, distances=[1.0] * 10)
    r = [row["ratio"] for row in fit.rows]
    assert fit.c_star == pytest.approx(min(min(r), 1 / max(r)))
    with pytest.raises(PreconditionError):
        herbort_sandwich_fit(EGG, pairs[:5], distances=[1.0] * 5)


# formulas ---------------------------------------------------------------------------

def test_fr_bounds_examples():
    lo, up = fr_bounds_from(1e-2, 1e-2, 1.0, 0.0)
    assert lo == pytest.approx(math.log(100))
    assert up == pytest.approx(math.log(1.01 / 0.01))
    lo2, up2 = fr_bounds_from(1e-2, 1e-2, 1.0, 0.5)
    assert lo2 == pytest.approx(lo - 0.5) and up2 == pytest.approx(up + 0.5)
    a, b = np.array([0, 0.99]), np.array([0, -0.99])
    assert fr_bounds(BALL, a, b, 0.0) == pytest.approx(fr_bounds_from(0.01, 0.01, 1.98, 0.0))


def test_fr_constant_fit_semantics():
    samples = [{"kind": "far", "d_a": 1e-2, "d_b": 1e-2, "sep": 1.0, "distance": 4.0},
               {"kind": "near", "d_a": 1e-2, "d_b": 1e-2, "sep": 1e-3, "distance": 0.05}]
    fit = fr_constant_fit(samples)
    lo, up = fr_bounds_from(1e-2, 1e-2, 1.0, 0.0)
    assert fit.rows[0]["C_lower"] == pytest.approx(lo - 4.0)
    assert fit.rows[1]["C_lower"] == -math.inf
    assert fit.C == pytest.approx(max(lo - 4.0, 4.0 - up, fit.rows[1]["C_upper"]))
    for s in samples:
        lo, up = fr_bounds_from(s["d_a"], s["d_b"], s["sep"], fit.C)
        assert s["distance"] <= up + 1e-12
        if s["kind"] == "far":
            assert s["distance"] >= lo - 1e-12
    with pytest.raises(PreconditionError):
        fr_constant_fit([])


def test_sqrt_law_on_the_ball():
    pts = [np.array([0, 1 - d]) for d in (1e-1, 1e-2, 1e-3)]
    C, rows = sqrt_lower_fit(BALL, pts, [np.array([1, 0]), np.array([0, 1])])
    # tangential exact value is 1 / sqrt(d (2 - d)), so C tends to 1/sqrt(2)
    assert 0.6 <= C <= 1 / math.sqrt(2)
    assert sqrt_hyperbolicity_lower(BALL, pts[1], np.array([3, 0]), C) == pytest.approx(
        C * 3 / math.sqrt(1e-2), rel=1e-9)
    assert sqrt_hyperbolicity_lower(BALL, pts[1], np.zeros(2), C) == 0.0


def test_shrink_factor():
    assert shrink_factor(1.0, 2.0) == pytest.approx(1 / math.tanh(1.0))
    with pytest.raises(PreconditionError):
        shrink_factor(2.0, 2.0)


def test_residuals_csv(tmp_path):
    p = write_residuals_csv([(0, "C1", 1.0, 2.0, 1.0)], tmp_path / "r.csv")
    text = p.read_text().splitlines()
    assert text[0] == "sample_id,quantity,lhs,rhs,margin"
    assert text[1] == "0,C1,1,2,1"
