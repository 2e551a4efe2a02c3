import numpy as np
import pytest
from hypothesis import given, strategies as st

from holokit.domain_core import PolyhedronSpec, preset_domain
from holokit.errors import NonConvergenceError, PreconditionError
from holokit.polynomial import Polynomial, RealPolynomial
from holokit.scaling_engine import (affine_automorphism, catlin_map, catlin_run, corner_exhaustion,
                                    dilation, limit_polynomial, local_hausdorff, normal_shear,
                                    polyhedron_corner_maps, spsc_run, spsc_scaled_domain,
                                    tau_exponent_fit, translation)

BALL = preset_domain("ball", 2)
EGG = preset_domain("egg", 2)
DISTANCES = [2.0 ** -j * 0.1 for j in range(1, 11)]

coef = st.floats(-2, 2, allow_nan=False)


def egg_points(ds):
    return [np.array([0, -1 + d], dtype=complex) for d in ds]


# spsc pipeline --------------------------------------------------------------------

@pytest.mark.parametrize("d", [1e-1, 1e-2, 1e-3, 1e-4])
def test_spsc_image_is_the_siegel_base_point(d):
    e = spsc_scaled_domain(BALL, np.array([0, 1 - d]))
    assert np.max(np.abs(e.image - np.array([0, -1]))) <= 1e-12
    assert e.domain.values(e.image) < 0


def test_spsc_off_axis_point():
    p = np.array([0.3, 0.5j]) * (1 - 1e-3) / np.linalg.norm([0.3, 0.5j])
    e = spsc_scaled_domain(BALL, p)
    assert np.max(np.abs(e.image - np.array([0, -1]))) <= 1e-12
    assert e.map.verify(count=100, radius=0.5)


def test_spsc_refuses_interior_points():
    with pytest.raises(PreconditionError):
        spsc_scaled_domain(BALL, np.array([0, 0.5]))


def test_spsc_run_limit_model_is_siegel():
    run = spsc_run(BALL, [np.array([0, 1 - d]) for d in (1e-2, 1e-3)])
    assert run.limit_model.name.startswith("siegel")
    assert len(run.entries) == 2


# catlin pipeline --------------------------------------------------------------------

def test_catlin_image_is_normalized():
    run = catlin_run(EGG, egg_points(DISTANCES[:6]), 4, np.array([0, -1]))
    for e in run.entries:
        want = np.array([0, -1 / e.params["d0"]])
        assert np.max(np.abs(e.image - want)) <= 1e-12


def test_catlin_limit_is_model_of_the_egg():
    run = catlin_run(EGG, egg_points(DISTANCES), 4, np.array([0, -1]))
    P = run.limit_model.rho - (Polynomial.z(2, 1) + Polynomial.zbar(2, 1))
    want = Polynomial.abs2(2, 0, 2)
    diff = P - want
    assert diff.max_abs_coeff() <= 1e-2
    eps = [e.params["eps"] for e in run.entries]
    tau = [e.params["tau"] for e in run.entries]
    slope, const = tau_exponent_fit(eps, tau)
    assert 0.25 - 1e-9 <= slope <= 0.5 + 1e-9
    ratios = [t / e ** slope for t, e in zip(tau, eps)]
    assert max(ratios) / min(ratios) < 3


def test_limit_polynomial_needs_entries():
    run = catlin_run(EGG, egg_points(DISTANCES[:2]), 4, np.array([0, -1]))
    with pytest.raises(PreconditionError):
        limit_polynomial(run)


def test_limit_polynomial_rejects_wandering_parts():
    # the |z1|^2 Re z2 term decays like sqrt(eps) under scaling, too slowly here
    z1, z2 = Polynomial.z(2, 0), Polynomial.z(2, 1)
    bent = EGG.with_(rho=EGG.rho + RealPolynomial.from_any(z1 * z1.conj() * (z2 + z2.conj()) * 0.25))
    with pytest.raises(NonConvergenceError):
        catlin_run(bent, egg_points([1e-1, 5e-2, 2.5e-2]), 4, np.array([0, -1]))


def test_tau_fit_recovers_a_power_law():
    eps = np.logspace(-1, -6, 8)
    slope, const = tau_exponent_fit(eps, 3 * eps ** 0.25)
    assert slope == pytest.approx(0.25, abs=1e-12)
    assert const == pytest.approx(3, rel=1e-12)


# automorphisms -------------------------------------------------------------------

@given(st.lists(coef, min_size=8, max_size=8), st.lists(coef, min_size=4, max_size=4))
def test_property_affine_round_trip(m, b):
    M = np.array(m[:4]).reshape(2, 2) + 1j * np.array(m[4:]).reshape(2, 2)
    if abs(np.linalg.det(M)) < 0.2 or np.linalg.cond(M) > 50:
        M = M + 3 * np.eye(2)
    A = affine_automorphism(M, np.array(b[:2]) + 1j * np.array(b[2:]))
    assert A.roundtrip_error(count=20, seed=1) <= 1e-10


@given(coef, coef, st.floats(0.05, 2), coef, coef)
def test_property_catlin_map_round_trip(d1r, d1i, d0, zr, zi):
    T = catlin_map(np.array([zr, zi]), [d0, complex(d1r, d1i), 0.3, -0.1j])
    assert T.roundtrip_error(count=20, seed=2, radius=1.0) <= 1e-10 * max(1, 1 / d0)


@given(coef, coef, coef)
def test_property_shear_compose_inverse(a, b, c):
    Q = Polynomial.z(2, 0) * Polynomial.z(2, 0) * complex(a, b) + c
    T = normal_shear(2, Q).compose(dilation([2, 0.5j])).compose(translation([c, a]))
    assert T.roundtrip_error(count=20, seed=3) <= 1e-10
    z = np.array([0.3 - 0.1j, 0.2j])
    assert np.allclose(T.inverse()(T(z)), z, atol=1e-12)


def test_push_forward_matches_pull_back():
    A = affine_automorphism(np.array([[1, 0.5j], [0, 2]]), np.array([0.1, -0.3]))
    rho = A.push_forward(BALL.rho)
    z = np.array([0.2 + 0.1j, -0.4j])
    assert rho.value(A(z)) == pytest.approx(BALL.rho.value(z), abs=1e-13)


# corner maps ----------------------------------------------------------------------

SQUARE = PolyhedronSpec((Polynomial.z(2, 0), Polynomial.z(2, 1)), np.ones(2, dtype=complex))


def test_corner_map_centers_and_round_trips():
    cm = polyhedron_corner_maps(SQUARE, np.full(2, 0.99, dtype=complex))
    assert np.max(np.abs(cm(cm.zk))) <= 1e-10
    assert cm.roundtrip_error() <= 1e-10


def test_corner_map_refuses_outside_points():
    with pytest.raises(PreconditionError):
        polyhedron_corner_maps(SQUARE, np.full(2, 1.2, dtype=complex))


@given(st.floats(1e-4, 0.5), st.floats(-0.3, 0.3), st.floats(0.3, 0.95))
def test_property_corner_exhaustion(d, phase, radius):
    zk = (1 - d) * np.exp(1j * phase) * np.ones(2)
    cm = polyhedron_corner_maps(SQUARE, zk)
    ok, worst, count = corner_exhaustion(cm, radius=radius, per_axis=4)
    assert ok and worst < 1 and count > 1


# Hausdorff --------------------------------------------------------------------------

def test_hausdorff_of_nested_balls():
    small = BALL.with_(rho=BALL.rho + 0.19)  # radius 0.9
    h, info = local_hausdorff(BALL, small, (np.zeros(2), 1.5), per_axis=7, rays=400)
    assert h == pytest.approx(0.1, abs=info["pitch"])
    h0, _ = local_hausdorff(BALL, BALL, (np.zeros(2), 1.5), per_axis=7, rays=400)
    assert h0 <= 1e-9


def test_hausdorff_window_limit():
    with pytest.raises(PreconditionError):
        local_hausdorff(BALL, BALL, (np.zeros(2), 50.0))
