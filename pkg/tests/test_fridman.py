import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from holokit.domain_core import Domain, preset_domain
from holokit.errors import PreconditionError
from holokit.fridman import (S_MAX, EmbeddingCandidate, ExperimentRow, FridmanConfig,
                             affine_conjugate, ball_automorphism, candidate_radius,
                             exact_ball_probe, fridman_directions, fridman_upper,
                             fridman_zero_cert, identity_candidate, spsc_candidates,
                             strictly_decreasing)
from holokit.scaling_engine import affine_automorphism

BALL = preset_domain("ball", 2)
CFG = FridmanConfig()
DIRS = fridman_directions(2)


def automorphism_candidate(p):
    phi = ball_automorphism(p)
    return EmbeddingCandidate("aut", "ball", phi, phi, onto=True)


def scaled_candidate(c, label="scaled"):
    return EmbeddingCandidate(label, "ball", lambda W: c * np.atleast_2d(W),
                              lambda Z: np.atleast_2d(Z) / c)


def oracle_bestR(s, margin=CFG.margin):
    # B(p, R) pulled back by the automorphism is the Euclidean ball of radius tanh R
    return math.atanh(s * (1 - margin))


# directions ------------------------------------------------------------------

def test_direction_set():
    assert DIRS.shape == (76, 2)
    assert np.allclose(np.linalg.norm(DIRS, axis=1), 1)
    assert len({tuple(np.round(d, 12)) for d in DIRS}) == 76
    assert np.array_equal(fridman_directions(2, seed=5)[:26], DIRS[:26])


# zero certificates ----------------------------------------------------------------

def test_siegel_zero_certificate():
    S = preset_domain("siegel", 2)
    cert = fridman_zero_cert(S, S.base_point)
    assert cert.certified
    assert np.allclose(cert.candidate.forward(np.zeros((1, 2)))[0], S.base_point, atol=1e-14)
    ups = [f["upper"] for f in cert.family]
    assert all(b < a for a, b in zip(ups, ups[1:]))
    for f in cert.family:
        assert f["bestR"] == pytest.approx(math.atanh(f["s"]), rel=1e-14)


@pytest.mark.parametrize("name,model", [("ball", "ball"), ("polydisc", "polydisc")])
def test_model_zero_certificates(name, model):
    X = preset_domain(name, 2)
    p = np.array([0.3, -0.2j])
    cert = fridman_zero_cert(X, p, model)
    assert cert.certified
    assert np.allclose(cert.candidate.forward(np.zeros((1, 2)))[0], p, atol=1e-14)
    assert cert.candidate.roundtrip_error(2) <= 1e-10


def test_refusals():
    assert not fridman_zero_cert(preset_domain("egg", 2), np.zeros(2)).certified
    assert not fridman_zero_cert(preset_domain("polydisc", 2), np.zeros(2), "ball").certified
    with pytest.raises(PreconditionError):
        fridman_zero_cert(BALL, np.array([1.0, 0.5]))


# the exact-probe oracle --------------------------------------------------------

@given(st.floats(-0.8, 0.8), st.floats(-0.8, 0.8))
def test_property_exact_probe_matches_oracle(x, y):
    p = np.array([x, 1j * y])
    if np.linalg.norm(p) >= 0.95:
        p = p * 0.9 / np.linalg.norm(p)
    probe = exact_ball_probe(p, DIRS)
    fb = fridman_upper(BALL, p, "ball", [automorphism_candidate(p)], CFG, probe=probe)
    assert fb.bestR == pytest.approx(oracle_bestR(S_MAX), abs=CFG.r_tol)
    assert fb.upper == pytest.approx(1 / fb.bestR)


def test_shrunken_source_gives_smaller_radius():
    p = np.zeros(2)
    cand = EmbeddingCandidate("half", "ball", lambda W: np.atleast_2d(W),
                              lambda Z: np.atleast_2d(Z), s=0.5)
    fb = fridman_upper(BALL, p, "ball", [cand], CFG, probe=exact_ball_probe(p, DIRS))
    assert fb.bestR == pytest.approx(oracle_bestR(0.5), abs=CFG.r_tol)


def test_more_candidates_never_hurt():
    p = np.array([0.2, 0.1j])
    probe = exact_ball_probe(p, DIRS)
    weak = [scaled_candidate(0.9, "s0.9")]
    strong = weak + [automorphism_candidate(p)]
    u1 = fridman_upper(BALL, p, "ball", weak, CFG, probe=probe).upper
    u2 = fridman_upper(BALL, p, "ball", strong, CFG, probe=probe).upper
    assert u2 <= u1
    assert fridman_upper(BALL, p, "ball", [], CFG, probe=probe).upper == math.inf


def test_affine_conjugate_invariance():
    p = np.array([0.1, -0.3])
    M = np.array([[2, 0.5j], [0, 1.5]])
    b = np.array([0.2, -1j])
    A = affine_automorphism(M, b)
    AX = Domain(A.push_forward(BALL.rho), BALL.class_tag, A(BALL.base_point), declared_type=2,
                bounding_radius=5.0, contained=True)
    inner = exact_ball_probe(p, DIRS)
    probe = lambda R: (A(inner(R)[0]), inner(R)[1])
    cand = affine_conjugate(automorphism_candidate(p), M, b)
    u0 = fridman_upper(BALL, p, "ball", [automorphism_candidate(p)], CFG, probe=inner).upper
    u1 = fridman_upper(AX, A(p), "ball", [cand], CFG, probe=probe).upper
    assert u1 == pytest.approx(u0, abs=1e-12)


def test_candidate_radius_refines_between_grid_values():
    s = candidate_radius(BALL, scaled_candidate(1.05))
    assert s == pytest.approx(1 / 1.05, abs=1e-4)
    assert s < 1 / 1.05
    assert candidate_radius(BALL, scaled_candidate(2.0)) is None
    assert candidate_radius(BALL, identity_candidate(2)) == max(CFG.s_grid)


def test_rejections_and_preconditions():
    bad = EmbeddingCandidate("bad", "ball", lambda W: np.atleast_2d(W),
                             lambda Z: 2 * np.atleast_2d(Z), onto=True)
    fb = fridman_upper(BALL, np.zeros(2), "ball", [bad], CFG, probe=exact_ball_probe(np.zeros(2), DIRS))
    assert fb.upper == math.inf and fb.log[0]["rejected"] == "round trip"
    with pytest.raises(PreconditionError):
        fridman_upper(BALL, np.zeros(2), "torus", [])
    with pytest.raises(PreconditionError):
        fridman_upper(BALL, np.array([2.0, 0]), "ball", [])
    with pytest.raises(PreconditionError):
        EmbeddingCandidate("x", "cube", None, None)


def test_spsc_candidates_are_valid_embeddings():
    p = np.array([0, 0.99])
    cands, entry = spsc_candidates(BALL, p, kappas=(0.1, 1.0))
    for c in cands:
        assert c.roundtrip_error(2) <= 1e-10
        assert c.image_inside(BALL, 0.9)[0]


def test_strictly_decreasing():
    rows = [ExperimentRow(j, 0.1, u, 1 / u, None, None, 0.0) for j, u in enumerate((0.3, 0.2, 0.1))]
    assert strictly_decreasing(rows)
    assert not strictly_decreasing(rows[::-1])
