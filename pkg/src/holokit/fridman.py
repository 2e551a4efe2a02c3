"""Upper bounds and zero certificates for Fridman's invariant h_X(p, model).

An embedding candidate is an explicit biholomorphism f from a model (unit
ball or unit polydisc) into X, used on the shrunken source sB.  For a fixed
candidate, bestR is the largest R whose probed Kobayashi ball B_X(p, R)
pulls back into sB; 1/bestR bounds h from above.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .domain_core import Domain, boundary_distance, preset_domain
from .errors import PreconditionError
from .invariant_metrics import (DiscConfig, PathConfig, RayProfile, UPPER, ball_distance,
                                cayley_from_ball, cayley_to_ball)
from .scaling_engine import (catlin_scaled_domain, polyhedron_corner_maps,
                             spsc_scaled_domain)

MODELS = ("ball", "polydisc")
S_MAX = 1.0 - 1e-6


def _probe_path_config():
    # balls of radius ~5 around points at depth 1e-4 reach depth ~1e-9,
    # so the disc margin has to sit well below that
    # 3-point Gauss rules on depth-ratio-4 pieces integrate 1/depth to 0.2%
    return PathConfig(quad_tol=None, ray_ratio=4.0, disc=DiscConfig(eta=1e-12, iterations=40))


@dataclass(frozen=True)
class FridmanConfig:
    axis_dirs: int = 26
    random_dirs: int = 50
    margin: float = 1e-6
    s_grid: tuple = (0.9, 0.99, 0.999, 0.9999, 0.99999, S_MAX)
    refine_s: bool = True
    image_samples: int = 2000
    r_start: float = 0.5
    r_growth: float = 1.25
    r_cap: float = 40.0
    r_tol: float = 1e-3
    seed: int = 0
    path: PathConfig = field(default_factory=_probe_path_config)


def source_size(model, W):
    """|w| for the ball, max |w_i| for the polydisc."""
    W = np.atleast_2d(W)
    if model == "ball":
        return np.linalg.norm(W, axis=-1)
    return np.max(np.abs(W), axis=-1)


def source_boundary_samples(model, n, s, count, seed=0):
    """Points on the boundary of the source of radius s (first ones deterministic)."""
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(count, n)) + 1j * rng.normal(size=(count, n))
    if model == "ball":
        axes = []
        for i in range(n):
            for ph in (1, -1, 1j, -1j):
                e = np.zeros(n, dtype=complex)
                e[i] = ph
                axes.append(e)
        W = np.vstack([np.array(axes), W])
        return s * W / np.linalg.norm(W, axis=1, keepdims=True)
    # polydisc: one coordinate on the circle of radius s, the rest inside
    W = W / np.maximum(1.0, np.abs(W)) * rng.uniform(0, 1, size=(count, 1)) ** 0.5
    k = rng.integers(0, n, size=count)
    W[np.arange(count), k] = np.exp(2j * np.pi * rng.uniform(size=count))
    return s * W


@dataclass
class EmbeddingCandidate:
    """f: source -> X with an explicit inverse on its image.

    ``onto`` marks candidates whose unrestricted image is all of X (model
    automorphisms); their shrunken sources are admissible for every s < 1.
    """

    label: str
    source: str
    forward: Callable
    inverse: Callable
    certificate: str = "ExplicitInverse"
    onto: bool = False
    s: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.source not in MODELS:
            raise PreconditionError(f"unknown source model {self.source!r}")
        if self.certificate not in ("ExplicitInverse", "Shrunken"):
            raise PreconditionError(f"unknown certificate kind {self.certificate!r}")

    def roundtrip_error(self, n, s=0.9, count=100, seed=0):
        rng = np.random.default_rng(seed)
        W = rng.normal(size=(count, n)) + 1j * rng.normal(size=(count, n))
        W *= s * rng.uniform(size=(count, 1)) / np.maximum(source_size(self.source, W), 1e-300)[:, None]
        back = self.inverse(self.forward(W))
        return float(np.max(np.abs(back - W)))

    def image_inside(self, X, s, count=2000, seed=0):
        """rho-sampling of f over the boundary of sB and a radial grid inside."""
        n = X.n
        B = source_boundary_samples(self.source, n, s, count, seed)
        inner = np.concatenate([B[:200] * r for r in (0.25, 0.5, 0.75, 0.9)])
        Z = self.forward(np.vstack([B, inner]))
        if not np.all(np.isfinite(Z)):
            return False, math.inf
        vals = X.values(Z)
        worst = float(np.max(vals))
        return bool(worst < 0), worst


def _admissible(X, cand, s, cfg):
    ok, _ = cand.image_inside(X, s, cfg.image_samples, cfg.seed)
    return ok


def candidate_radius(X, cand, cfg=None):
    """Largest admissible shrink factor s (None if no grid value works)."""
    cfg = cfg or FridmanConfig()
    if cand.s is not None:
        return cand.s if _admissible(X, cand, cand.s, cfg) else None
    grid = sorted(cfg.s_grid)
    good = [s for s in grid if _admissible(X, cand, s, cfg)]
    if not good:
        return None
    s = max(good)
    if cand.onto or not cfg.refine_s:
        return s
    above = [g for g in grid if g > s]
    hi = above[0] if above else S_MAX
    if hi <= s:
        return s
    # bisection on log(1 - s) between the last good and first bad grid value
    lo_l, hi_l = math.log(1 - s), math.log(1 - hi)
    for _ in range(20):
        mid = 0.5 * (lo_l + hi_l)
        if _admissible(X, cand, 1 - math.exp(mid), cfg):
            lo_l = mid
        else:
            hi_l = mid
    return 1 - math.exp(lo_l)


def fridman_directions(n, axis=26, extra=50, seed=0):
    """Axis and two-coordinate diagonal directions of R^{2n}, then seeded random."""
    basis = []
    for i in range(n):
        for ph in (1, 1j):
            e = np.zeros(n, dtype=complex)
            e[i] = ph
            basis.append(e)
    fixed = [sg * e for e in basis for sg in (1, -1)]
    for a in range(len(basis)):
        for b in range(a + 1, len(basis)):
            for sa in (1, -1):
                for sb in (1, -1):
                    fixed.append((sa * basis[a] + sb * basis[b]) / math.sqrt(2))
    fixed = fixed[:axis]
    rng = np.random.default_rng(seed)
    r = rng.normal(size=(extra, n)) + 1j * rng.normal(size=(extra, n))
    r /= np.linalg.norm(r, axis=1, keepdims=True)
    return np.array(fixed + list(r))


class EstimatorProbe:
    """Probe points of B_X(p, R) from cached straight-ray profiles.

    Rays are extended lazily, one direction at a time, so a containment test
    that fails early never pays for the remaining directions.
    """

    def __init__(self, X, p, directions, cfg):
        self.X, self.p = X, np.asarray(p, dtype=complex)
        U = np.asarray(directions, dtype=complex)
        self.dirs = U / np.linalg.norm(U, axis=1, keepdims=True)
        self.profiles = [RayProfile(X, self.p, u, cfg) for u in self.dirs]

    def __len__(self):
        return len(self.dirs)

    def point(self, i, R):
        t, ex = self.profiles[i].crossing(R)
        return self.p + t * self.dirs[i], ex

    def __call__(self, R):
        res = [self.point(i, R) for i in range(len(self))]
        return np.array([z for z, _ in res]), np.array([e for _, e in res])

    @property
    def evaluations(self):
        return sum(pr.evaluations for pr in self.profiles)


@dataclass
class FridmanBound:
    p: np.ndarray
    model: str
    bestR: float
    upper: float
    witness: EmbeddingCandidate | None
    s: float | None
    log: list
    bound_kind: str = UPPER

    @property
    def informative(self):
        return math.isfinite(self.upper)


class _Containment:
    """Does every probe point of B(p, R) pull back into sB?  Remembers the
    direction that failed last and tries it first next time."""

    def __init__(self, probe, margin):
        self.probe, self.margin = probe, margin
        self.first = 0

    def __call__(self, cand, s, R):
        lim = s * (1 - self.margin)
        if not hasattr(self.probe, "point"):
            W = cand.inverse(self.probe(R)[0])
            return bool(np.all(np.isfinite(W)) and np.all(source_size(cand.source, W) <= lim))
        m = len(self.probe)
        for k in range(m):
            i = (self.first + k) % m
            z, _ = self.probe.point(i, R)
            w = cand.inverse(z[None, :])
            if not (np.all(np.isfinite(w)) and source_size(cand.source, w)[0] <= lim):
                self.first = i
                return False
        return True


def best_radius(cand, s, probe, cfg, floor=0.0):
    """Largest R (to cfg.r_tol) with every probe point of B(p, R) in f(sB).

    With ``floor`` > 0 the search is skipped (returns 0) unless the candidate
    beats that radius, which keeps losing candidates cheap.
    """
    ok = probe if isinstance(probe, _Containment) else _Containment(probe, cfg.margin)
    test = lambda R: ok(cand, s, R)
    if floor > 0:
        if not test(floor + cfg.r_tol):
            return 0.0
        lo, hi = floor + cfg.r_tol, (floor + cfg.r_tol) * cfg.r_growth
    else:
        lo, hi = 0.0, cfg.r_start
    while test(hi):
        lo, hi = hi, hi * cfg.r_growth
        if lo >= cfg.r_cap:
            return cfg.r_cap
    while hi - lo > cfg.r_tol:
        mid = 0.5 * (lo + hi)
        if test(mid):
            lo = mid
        else:
            hi = mid
    return lo


def fridman_upper(X, p, model, candidates, cfg=None, probe=None):
    """min over candidates of 1/bestR; +inf when nothing covers a positive radius."""
    cfg = cfg or FridmanConfig()
    if model not in MODELS:
        raise PreconditionError(f"model must be one of {MODELS}")
    p = np.asarray(p, dtype=complex)
    if not X.contains(p[None, :])[0]:
        raise PreconditionError("p must be interior")
    if probe is None:
        dirs = fridman_directions(X.n, cfg.axis_dirs, cfg.random_dirs, cfg.seed)
        probe = EstimatorProbe(X, p, dirs, cfg.path)
    contain = _Containment(probe, cfg.margin)
    best, witness, wit_s, log = 0.0, None, None, []
    for cand in candidates:
        if cand.source != model:
            raise PreconditionError(f"candidate {cand.label} has source {cand.source}")
        rt = cand.roundtrip_error(X.n)
        s = candidate_radius(X, cand, cfg)
        row = {"candidate": cand.label, "roundtrip": rt, "s": s}
        if s is None or not rt <= 1e-10:
            row["bestR"] = 0.0
            row["rejected"] = "image check" if s is None else "round trip"
        else:
            R = best_radius(cand, s, contain, cfg, floor=best)
            row["bestR"] = R if R > 0 else None
            if R > best:
                best, witness, wit_s = R, cand, s
        log.append(row)
    if isinstance(probe, EstimatorProbe):
        log.append({"metric_evaluations": probe.evaluations,
                    "exited": int(np.sum(probe(best)[1])) if best > 0 else 0})
    upper = 1.0 / best if best > 0 else math.inf
    return FridmanBound(p, model, best, upper, witness, wit_s, log)


# ---------------------------------------------------------------------------
# candidate families


def ball_automorphism(a):
    """Involutive automorphism of the unit ball swapping 0 and a."""
    a = np.asarray(a, dtype=complex)
    n = a.shape[0]
    na2 = float(np.real(np.vdot(a, a)))

    def phi(Z):
        Z = np.atleast_2d(np.asarray(Z, dtype=complex))
        if na2 == 0:
            return -Z
        za = Z @ np.conj(a)
        P = za[:, None] * a[None, :] / na2
        Q = Z - P
        s = math.sqrt(1 - na2)
        return (a[None, :] - P - s * Q) / (1 - za)[:, None]

    return phi


def identity_candidate(n, model="ball"):
    f = lambda W: np.atleast_2d(np.asarray(W, dtype=complex))
    return EmbeddingCandidate("identity", model, f, f, onto=True)


def affine_conjugate(cand, M, b):
    """Candidate for A(X) with A(z) = M z + b."""
    M = np.asarray(M, dtype=complex)
    b = np.asarray(b, dtype=complex)
    Minv = np.linalg.inv(M)
    fwd = lambda W: cand.forward(W) @ M.T + b
    inv = lambda Z: cand.inverse((np.atleast_2d(Z) - b) @ Minv.T)
    return EmbeddingCandidate(cand.label + "|affine", cand.source, fwd, inv,
                              cand.certificate, cand.onto, cand.s, dict(cand.meta))


def siegel_cayley_candidate(n):
    return EmbeddingCandidate("cayley", "ball", cayley_from_ball, cayley_to_ball, onto=True)


def _siegel_dilation(n, c):
    sc = np.full(n, math.sqrt(c), dtype=complex)
    sc[-1] = c
    return sc


def spsc_candidates(D, p, kappas=(1.0,)):
    """Scaling map T o h at p composed with the Cayley transform.

    kappa rescales the Siegel model by its own dilation before Cayley, which
    moves the image of p along the model's normal axis.
    """
    entry = spsc_scaled_domain(D, p)
    out = []
    for kappa in kappas:
        sc = _siegel_dilation(D.n, kappa)

        def fwd(W, sc=sc):
            return entry.map.apply_inverse(cayley_from_ball(np.atleast_2d(W)) * sc)

        def inv(Z, sc=sc):
            return cayley_to_ball(entry.map(np.atleast_2d(Z)) / sc)

        out.append(EmbeddingCandidate(f"spsc-cayley[kappa={kappa:g}]", "ball", fwd, inv,
                                      certificate="Shrunken",
                                      meta={"delta": entry.params["delta"], "kappa": kappa}))
    return out, entry


def model_ball_candidates(image, two_m, scales=(1.0,), outer=None):
    """Ball embeddings into {2 Re z2 + P(z1) < 0}-type models via shrunk Cayley.

    The Siegel image is dilated anisotropically (z1 by c^(1/2m), z2 by c) so
    the center of the source lands on ``image``; ``scales`` multiply z1.
    ``outer`` (a PolynomialAutomorphism) pulls the model back to the domain.
    """
    image = np.asarray(image, dtype=complex)
    c = -float(np.real(image[1]))
    if not c > 0:
        raise PreconditionError("scaled image must lie on the negative normal axis")
    out = []
    for a in scales:
        sc = np.array([a * c ** (1.0 / two_m), c], dtype=complex)
        shift = np.array([image[0], 1j * np.imag(image[1])])

        def fwd(W, sc=sc, shift=shift):
            Z = cayley_from_ball(np.atleast_2d(W)) * sc + shift
            return outer.apply_inverse(Z) if outer is not None else Z

        def inv(Z, sc=sc, shift=shift):
            Z = np.atleast_2d(Z)
            if outer is not None:
                Z = outer(Z)
            return cayley_to_ball((Z - shift) / sc)

        out.append(EmbeddingCandidate(f"model-cayley[a={a:g}]", "ball", fwd, inv,
                                      certificate="Shrunken", meta={"scale": a}))
    return out


def corner_candidate(P, zk):
    """(Lambda^k)^{-1} on shrunken polydiscs."""
    cm = polyhedron_corner_maps(P, zk)
    fwd = lambda W: cm.apply_inverse(np.atleast_2d(W))
    inv = lambda Z: np.atleast_2d(cm(np.atleast_2d(Z)))
    onto = all(g.degree() == 1 for g in P.generators)
    return EmbeddingCandidate("corner-lambda", "polydisc", fwd, inv, onto=onto), cm


def polydisc_automorphism_candidate(p):
    """Product of disc Moebius maps sending 0 to p."""
    p = np.asarray(p, dtype=complex)
    fwd = lambda W: (np.atleast_2d(W) + p) / (1 + np.conj(p) * np.atleast_2d(W))
    inv = lambda Z: (np.atleast_2d(Z) - p) / (1 - np.conj(p) * np.atleast_2d(Z))
    return EmbeddingCandidate("polydisc-moebius", "polydisc", fwd, inv, onto=True)


# ---------------------------------------------------------------------------
# zero certificates

CATALOG = ("ball", "polydisc", "siegel")


@dataclass
class ZeroCertificate:
    domain: str
    p: np.ndarray
    model: str
    candidate: EmbeddingCandidate
    family: list
    note: str

    @property
    def certified(self):
        return True


@dataclass
class Refusal:
    domain: str
    reason: str

    @property
    def certified(self):
        return False


def _catalog_name(X):
    name = X.name.split(":")[0]
    return name if name in CATALOG else None


def fridman_zero_cert(X, p, model="ball", s_values=(0.9, 0.99, 0.999, 0.9999)):
    """Explicit biholomorphism onto the model plus bestR(s) = atanh(s) -> inf."""
    name = _catalog_name(X)
    p = np.asarray(p, dtype=complex)
    if name is None or (name == "polydisc") != (model == "polydisc"):
        return Refusal(X.name, "not a cataloged model for this target; upper bounds only")
    if not X.contains(p[None, :])[0]:
        raise PreconditionError("p must be interior")
    n = X.n
    if name == "ball":
        phi = ball_automorphism(p)
        cand = EmbeddingCandidate("ball-automorphism", "ball", phi, phi, onto=True)
        note = "automorphism exchanging p and 0"
    elif name == "polydisc":
        cand = polydisc_automorphism_candidate(p)
        note = "coordinatewise Moebius maps sending 0 to p"
    else:
        # Cayley onto the ball, then the ball automorphism moving the image of p to 0
        a = cayley_to_ball(p[None, :])[0]
        phi = ball_automorphism(a)
        fwd = lambda W: cayley_from_ball(phi(W))
        inv = lambda Z: phi(cayley_to_ball(np.atleast_2d(Z)))
        cand = EmbeddingCandidate("cayley-automorphism", "ball", fwd, inv, onto=True)
        note = "Cayley transform composed with a ball automorphism"
    if not cand.roundtrip_error(n) <= 1e-10:
        raise PreconditionError("certificate map failed its round trip")
    # in model coordinates B_model(0, R) is the radius-tanh(R) ball (or polydisc)
    family = [{"s": s, "bestR": math.atanh(s), "upper": 1.0 / math.atanh(s)} for s in s_values]
    return ZeroCertificate(X.name, p, model, cand, family, note)


# ---------------------------------------------------------------------------
# boundary experiments


def exact_ball_probe(p, directions):
    """Oracle probe for the unit ball: points at exact Kobayashi distance R."""
    p = np.asarray(p, dtype=complex)
    phi = ball_automorphism(p)
    U = np.asarray(directions, dtype=complex)
    U = U / np.linalg.norm(U, axis=1, keepdims=True)

    def probe(R):
        return phi(math.tanh(R) * U), np.zeros(len(U), dtype=bool)

    return probe


@dataclass
class ExperimentRow:
    j: int
    d: float
    upper: float
    bestR: float
    witness: str | None
    s: float | None
    reference: float
    extra: dict = field(default_factory=dict)


def normal_sequence(D, p0, distances):
    """Points p0 - d * nu along the inward normal."""
    from .domain_core import outward_normal
    p0 = np.asarray(p0, dtype=complex)
    nu = outward_normal(D.active_piece(p0), p0)
    return [p0 - d * nu for d in distances]


def fridman_boundary_experiment(D, points, model="ball", cfg=None, mode=None, p0=None,
                                two_m=None, kappas=(0.01, 0.03, 0.1, 0.3, 1.0), scales=(0.5, 1.0, 2.0),
                                corner=None):
    """Upper bounds on h_D(p^j) with candidates built from the scaling maps at p^j.

    mode "spsc": scaling map composed with Cayley (reference h of the Siegel
    limit = 0); mode "catlin": Cayley-type ball embeddings of the limit model
    pulled back through the Catlin map (reference: None, no certification);
    mode "corner": (Lambda^k)^{-1} on shrunken polydiscs (reference 0).
    """
    cfg = cfg or FridmanConfig()
    mode = mode or {"StronglyPseudoconvex": "spsc", "FiniteType2D": "catlin",
                    "Polyhedron": "corner"}.get(D.class_tag)
    rows = []
    for j, p in enumerate(points, start=1):
        p = np.asarray(p, dtype=complex)
        d = boundary_distance(D, p).distance
        extra = {}
        if mode == "spsc":
            cands, entry = spsc_candidates(D, p, kappas)
            ref = 0.0
            extra["delta"] = entry.params["delta"]
        elif mode == "catlin":
            entry = catlin_scaled_domain(D, p, two_m, p0, j)
            cands = model_ball_candidates(entry.image, two_m, scales, outer=entry.map)
            ref = math.nan
            extra.update(eps=entry.params["eps"], tau=entry.params["tau"])
        elif mode == "corner":
            cand, cm = corner_candidate(corner, p)
            cands = [cand]
            ref = 0.0
        else:
            raise PreconditionError(f"unknown experiment mode {mode!r}")
        fb = fridman_upper(D, p, model if mode != "corner" else "polydisc", cands, cfg)
        extra["log"] = fb.log
        rows.append(ExperimentRow(j, d, fb.upper, fb.bestR,
                                  fb.witness.label if fb.witness else None, fb.s, ref, extra))
    return rows


def strictly_decreasing(rows):
    u = [r.upper for r in rows]
    return all(b < a for a, b in zip(u, u[1:]))
