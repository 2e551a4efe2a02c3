import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import unitary_group

from holokit.domain_core import Domain, preset_domain
from holokit.errors import DegenerateGeometryError, PreconditionError
from holokit.invariant_metrics import (EXACT, LOWER, UPPER, DiscConfig, PathConfig, RayProfile,
                                       caratheodory_inf_lower, cayley_from_ball, cayley_to_ball,
                                       closed_form_distance, closed_form_inf_metric,
                                       kobayashi_ball_probe, kobayashi_distance_estimate,
                                       kobayashi_inf_estimate, linear_disc_metric,
                                       localization_ratio, slice_disc_metric)
from holokit.scaling_engine import affine_automorphism

BALL = preset_domain("ball", 2)
EGG = preset_domain("egg", 2)
DISC = preset_domain("ball", 1)

unit = st.floats(-1, 1, allow_nan=False)
vec4 = st.lists(unit, min_size=4, max_size=4)


def ball_point(xs, r):
    z = np.asarray(xs[:2]) + 1j * np.asarray(xs[2:])
    nz = np.linalg.norm(z)
    return z * (r / nz) if nz > 1e-9 else np.array([r, 0], dtype=complex)


def direction(xs):
    v = np.asarray(xs[:2]) + 1j * np.asarray(xs[2:])
    return v if np.linalg.norm(v) > 1e-6 else np.array([1, 0], dtype=complex)


# independent oracles ---------------------------------------------------------

def poincare(a, b):
    r = abs(a - b) / abs(1 - np.conj(b) * a)
    return 0.5 * math.log((1 + r) / (1 - r))


def ball_automorphism(a, z):
    """phi_a(z) = (a - P_a z - s_a Q_a z) / (1 - <z, a>) from the textbook formula."""
    aa = np.vdot(a, a).real
    if aa == 0:
        return -z
    P = np.vdot(a, z) / aa * a
    Q = z - P
    return (a - P - math.sqrt(1 - aa) * Q) / (1 - np.vdot(a, z))


def ball_oracle_distance(a, b):
    return math.atanh(np.linalg.norm(ball_automorphism(a, b)))


# closed forms ------------------------------------------------------------------

def test_disc_closed_forms():
    assert closed_form_inf_metric("disc", 0.5, 1).value == pytest.approx(4 / 3, rel=1e-15)
    d = closed_form_distance("disc", 0, 0.5)
    assert d.bound_kind == EXACT
    assert abs(d.value - 0.5 * math.log(3)) <= 1e-12


def test_polydisc_max_law():
    a = np.array([0.3, -0.2j])
    b = np.array([-0.4, 0.6])
    want = max(poincare(a[0], b[0]), poincare(a[1], b[1]))
    assert closed_form_distance("polydisc", a, b).value == pytest.approx(want, rel=1e-14)


def test_outside_points_rejected():
    with pytest.raises(PreconditionError):
        closed_form_inf_metric("ball", np.array([1.0, 0.0]), np.array([1, 0]))
    with pytest.raises(PreconditionError):
        closed_form_distance("halfplane", np.array([0.1]), np.array([-1.0]))
    with pytest.raises(PreconditionError):
        closed_form_inf_metric("torus", np.zeros(2), np.ones(2))


def test_siegel_matches_ball_through_cayley():
    z = np.array([0.2 + 0.1j, -1.0 + 0.3j])
    w = cayley_to_ball(z)
    assert np.allclose(cayley_from_ball(w), z, atol=1e-14)
    assert np.allclose(cayley_to_ball(np.array([0, -1])), 0)
    q = np.array([0.0, -0.5])
    assert closed_form_distance("siegel", z, q).value == pytest.approx(
        ball_oracle_distance(cayley_to_ball(z), cayley_to_ball(q)), rel=1e-12)


def test_halfplane_metric():
    assert closed_form_inf_metric("halfplane", np.array([-2.0]), np.array([1.0])).value == 0.25


@given(vec4, vec4, st.floats(0, 0.95), st.floats(0, 0.95))
def test_property_ball_distance_oracle(x, y, r, s):
    a, b = ball_point(x, r), ball_point(y, s)
    want = ball_oracle_distance(a, b)
    got = closed_form_distance("ball", a, b).value
    assert got == pytest.approx(want, rel=1e-9, abs=1e-12)


@given(vec4, vec4, st.floats(0, 0.9))
def test_property_ball_metric_is_derivative_of_distance(x, y, r):
    z, v = ball_point(x, r), direction(y)
    v = v / np.linalg.norm(v)
    h = 1e-6
    fd = ball_oracle_distance(z, z + h * v) / h
    assert closed_form_inf_metric("ball", z, v).value == pytest.approx(fd, rel=1e-4)


# Schwarz-Pick monotonicity ---------------------------------------------------

@given(st.floats(0, 0.94), st.floats(0, 2 * np.pi), st.floats(0, 0.94), st.floats(0, 2 * np.pi),
       st.floats(0, 2 * np.pi), st.floats(0.1, 1.0))
def test_property_schwarz_pick_under_disc_self_maps(zr, zt, ar, at, phase, scale):
    z, a = zr * np.exp(1j * zt), ar * np.exp(1j * at)
    # f(w) = c * w * (w - a) / (1 - conj(a) w), |c| <= 1, maps the disc into itself
    c = scale * np.exp(1j * phase)
    f = lambda w: c * w * (w - a) / (1 - np.conj(a) * w)
    h = 1e-7
    df = (f(z + h) - f(z - h)) / (2 * h)
    lhs = closed_form_inf_metric("disc", f(z), df).value
    rhs = closed_form_inf_metric("disc", z, 1.0).value
    assert lhs <= rhs * (1 + 1e-6)


@given(vec4, vec4, st.floats(0, 0.95))
def test_property_estimates_decrease_under_inclusion(x, y, r):
    # ball(2) sits inside egg(2), so F_egg <= F_ball; both estimates are upper bounds
    z, v = ball_point(x, r), direction(y)
    fe = kobayashi_inf_estimate(EGG, z, v).value
    fb = kobayashi_inf_estimate(BALL, z, v).value
    assert fe <= fb * (1 + 1e-6)
    assert fb >= closed_form_inf_metric("ball", z, v).value * (1 - 1e-9)


# c <= d -----------------------------------------------------------------------

@given(vec4, vec4, st.floats(0, 0.9), st.booleans())
def test_property_caratheodory_below_kobayashi(x, y, r, egg):
    D = EGG if egg else BALL
    z, v = ball_point(x, r), direction(y)
    c = caratheodory_inf_lower(D, z, v, samples=400)
    k = kobayashi_inf_estimate(D, z, v)
    assert c.bound_kind == LOWER and k.bound_kind == UPPER
    assert c.value <= k.value * (1 + 1e-9)


def test_caratheodory_on_ball_is_close():
    z = np.array([0.5, 0])
    v = np.array([1, 0])
    c = caratheodory_inf_lower(BALL, z, v).value
    exact = closed_form_inf_metric("ball", z, v).value
    # candidate maps are scaled by 1/1.01 so they land strictly inside the disc
    assert exact / 1.01 * 0.99 <= c <= exact


# affine invariance ------------------------------------------------------------

def affine_image(D, M, b):
    A = affine_automorphism(M, b)
    R = D.bounding_radius * np.linalg.norm(M, 2) + np.linalg.norm(b)
    return A, Domain(A.push_forward(D.rho), D.class_tag, A(D.base_point),
                     declared_type=D.declared_type, bounding_radius=R, contained=True)


@given(vec4, vec4, st.floats(0, 0.95), st.integers(0, 2 ** 31 - 1))
def test_property_affine_invariance_of_estimates(x, y, r, seed):
    rng = np.random.default_rng(seed)
    U = unitary_group.rvs(2, random_state=rng)
    V = unitary_group.rvs(2, random_state=rng)
    M = U @ np.diag(rng.uniform(0.5, 2, size=2)) @ V
    b = rng.normal(size=2) * 0.3
    A, AD = affine_image(EGG, M, b)
    z, v = ball_point(x, r), direction(y)
    f0 = kobayashi_inf_estimate(EGG, z, v).value
    f1 = kobayashi_inf_estimate(AD, A(z), M @ v).value
    assert abs(f1 / f0 - 1) <= 1e-2


# estimator mechanics ------------------------------------------------------------

def test_estimate_returns_admissible_disc():
    est = kobayashi_inf_estimate(EGG, np.array([0.2, 0.3j]), np.array([1, 1j]))
    disc = est.witness
    assert disc.admissible(EGG)
    assert np.allclose(disc(0.0), [0.2, 0.3j])
    alpha = np.linalg.norm(disc.coeffs[1]) / np.linalg.norm([1, 1j])
    assert est.value == pytest.approx(1 / alpha, rel=1e-12)


def test_zero_vector_and_boundary_point():
    assert kobayashi_inf_estimate(BALL, np.zeros(2), np.zeros(2)).value == 0.0
    with pytest.raises(DegenerateGeometryError):
        kobayashi_inf_estimate(BALL, np.array([1 - 1e-9, 0]), np.array([1, 0]))


def test_estimates_are_deterministic():
    z, v = np.array([0.1, 0.4j]), np.array([0.3, 1])
    a = kobayashi_inf_estimate(EGG, z, v, DiscConfig(seed=3)).value
    b = kobayashi_inf_estimate(EGG, z, v, DiscConfig(seed=3)).value
    assert a == b


def test_linear_disc_metric_is_an_upper_bound():
    Z = np.array([[0.5, 0], [0, 0.8j], [0.3, 0.3]])
    V = np.array([[1, 0], [0, 1], [1, -1j]])
    lin = linear_disc_metric(BALL, Z, V, 0.0)
    for z, v, f in zip(Z, V, lin):
        assert f >= closed_form_inf_metric("ball", z, v).value * (1 - 1e-9)


def test_slice_surrogate_exact_on_polydisc():
    P = preset_domain("polydisc", 2)
    Z = np.array([[0.5, 0.2j], [-0.3, 0.7]])
    V = np.array([[1, 0.5], [0.2, 1j]])
    sur = slice_disc_metric(P, Z, V, 0.0, angles=64, iters=40)
    for z, v, f in zip(Z, V, sur):
        assert f == pytest.approx(closed_form_inf_metric("polydisc", z, v).value, rel=2e-2)


def test_distance_estimate_on_disc_and_symmetry():
    a, b = np.array([0.0]), np.array([0.5])
    d = kobayashi_distance_estimate(DISC, a, b)
    assert d.bound_kind == UPPER
    assert d.value == pytest.approx(0.5 * math.log(3), rel=1e-2)
    assert d.value >= 0.5 * math.log(3) * (1 - 1e-6)
    assert kobayashi_distance_estimate(DISC, b, a).value == d.value
    assert kobayashi_distance_estimate(DISC, a, a).value == 0.0


def test_ray_profile_and_ball_probe_on_disc():
    for R in (0.5, 1.5):
        out = kobayashi_ball_probe(DISC, np.array([0.0]), R, [np.array([1.0]), np.array([1j])])
        for t, exited in out:
            assert not exited
            # straight segments upper-bound the distance, so t sits inside the ball
            assert t <= math.tanh(R) * (1 + 1e-3)
            assert t == pytest.approx(math.tanh(R), rel=1e-2)
    prof = RayProfile(DISC, np.array([0.0]), np.array([1.0]), PathConfig())
    assert prof.length(0.5) == pytest.approx(0.5 * math.log(3), rel=1e-2)


def test_localization_ratio():
    z = np.array([0.0, 0.9])
    v = np.array([0.0, 1.0])
    assert localization_ratio(BALL, (np.zeros(2), 10.0), z, v) == 1.0
    near = localization_ratio(BALL, (np.array([0, 1.0]), 0.5), z, v)
    nearer = localization_ratio(BALL, (np.array([0, 1.0]), 0.5), np.array([0, 0.99]), v)
    assert near >= 1 - 1e-3 and nearer >= 1 - 1e-3
    assert nearer <= near + 1e-3
    with pytest.raises(PreconditionError):
        localization_ratio(BALL, (np.array([0, 1.0]), 0.05), z, v)
