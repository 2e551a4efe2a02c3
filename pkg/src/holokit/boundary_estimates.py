"""Quantitative boundary estimates: bidiscs, polydiscs, peak functions, log bounds.

Every "uniform constant" here is fitted from samples and then frozen; the
fitted objects carry their residual tables so the inequalities they claim
can be re-checked verbatim.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .domain_core import boundary_distance, outward_normal, sphere_directions
from .errors import (DegenerateGeometryError, NotStronglyPseudoconvexError,
                     PreconditionError)
from .polynomial import Polynomial
from .scaling_engine import catlin_automorphism, catlin_tau, mcneal_frame


# ---------------------------------------------------------------------------
# peak functions


def levi_polynomial(D, zeta):
    """L(z) = sum a_i (z_i - zeta_i) + 1/2 sum A_ij (z_i - zeta_i)(z_j - zeta_j)."""
    zeta = np.asarray(zeta, dtype=complex)
    q = D.active_piece(zeta)
    n = D.n
    a = q.gradient(zeta)
    A, _ = q.hessians(zeta)
    s = [Polynomial.z(n, i) - zeta[i] for i in range(n)]
    L = Polynomial(n)
    for i in range(n):
        L = L + s[i] * a[i]
        for j in range(n):
            if A[i, j] != 0:
                L = L + s[i] * s[j] * (0.5 * A[i, j])
    return L


def _levi_form_on_tangent(q, zeta):
    a = q.gradient(zeta)
    _, B = q.hessians(zeta)
    n = a.shape[0]
    # basis of the complex tangent space {sum a_i t_i = 0}
    _, _, vh = np.linalg.svd(a[None, :])
    T = vh[1:].conj().T  # columns span the null space of a
    return T.conj().T @ B.T @ T if n > 1 else np.zeros((0, 0))


@dataclass
class PeakFunction:
    zeta: np.ndarray
    L: Polynomial
    sigma: float
    r: float
    C1: float
    C2: float
    samples: np.ndarray = field(repr=False, default=None)

    def __call__(self, Z):
        return np.exp(self.sigma * self.L(np.asarray(Z, dtype=complex)))

    def residuals(self, Z):
        """Margins of C1|1-P| <= |z-zeta| and |z-zeta| <= C2 sqrt|1-P| (>= 0 means holds)."""
        Z = np.atleast_2d(Z)
        u = np.abs(1 - self(Z))
        dist = np.linalg.norm(Z - self.zeta, axis=1)
        return dist - self.C1 * u, self.C2 * np.sqrt(u) - dist


def _sample_ball(D, center, r, count, rng):
    n = D.n
    g = rng.normal(size=(count, 2 * n))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    rad = r * rng.uniform(size=count) ** (1.0 / (2 * n))
    X = g * rad[:, None]
    Z = center[None, :] + X[:, :n] + 1j * X[:, n:]
    return Z[D.values(Z) < 0]


def peak_function(D, zeta, r=0.25, samples=10000, seed=0, safety=0.9):
    """exp(sigma L_zeta) with fitted (C1, C2) on D intersected with B(zeta, r).

    sigma is chosen so Re(sigma L) < 0 on the samples; if |P| < 1 fails at
    the requested r it is halved until the check passes.
    """
    if D.class_tag != "StronglyPseudoconvex":
        raise PreconditionError("peak functions are built at strongly pseudoconvex points")
    zeta = np.asarray(zeta, dtype=complex)
    q = D.active_piece(zeta)
    if abs(q.value(zeta)) > 1e-10 * max(1.0, D.rho_scale):
        raise PreconditionError("zeta is not on the boundary")
    lev = _levi_form_on_tangent(q, zeta)
    if lev.size and np.min(np.linalg.eigvalsh(0.5 * (lev + lev.conj().T))) <= 0:
        raise NotStronglyPseudoconvexError("Levi form is not positive definite at zeta")
    L = levi_polynomial(D, zeta)
    rng = np.random.default_rng(seed)
    while r > 1e-6:
        Z = _sample_ball(D, zeta, r, samples, rng)
        if Z.shape[0] == 0:
            r *= 0.5
            continue
        reL = np.real(L(Z))
        if np.all(reL < 0):
            sigma = 1.0
        elif np.all(reL > 0):
            sigma = -1.0
        else:
            r *= 0.5
            continue
        P = np.exp(sigma * L(Z))
        u = np.abs(1 - P)
        dist = np.linalg.norm(Z - zeta, axis=1)
        good = u > 0
        C1 = safety * float(np.min(dist[good] / u[good]))
        C2 = float(np.max(dist[good] / np.sqrt(u[good]))) / safety
        return PeakFunction(zeta, L, sigma, r, C1, C2, Z)
    raise DegenerateGeometryError("no radius with |P| < 1 found")


# ---------------------------------------------------------------------------
# Catlin bidiscs and the Herbort pseudodistance


@dataclass
class BidiscSpec:
    q: np.ndarray
    delta: float
    tau: float
    catlin: object

    def contains(self, Z):
        W = self.catlin.map(np.atleast_2d(np.asarray(Z, dtype=complex)))
        return (np.abs(W[:, 0]) < self.tau) & (np.abs(W[:, 1]) < self.delta)


_CATLIN_CACHE = {}


def _catlin_at(D, q, two_m):
    key = (id(D), two_m) + tuple(np.round(np.concatenate([q.real, q.imag]), 15))
    hit = _CATLIN_CACHE.get(key)
    if hit is None or hit[0] is not D:
        if len(_CATLIN_CACHE) > 4096:
            _CATLIN_CACHE.clear()
        hit = (D, catlin_automorphism(D, q, two_m))
        _CATLIN_CACHE[key] = hit
    return hit[1]


def catlin_bidisc(D, q, delta, two_m=None):
    """Q(q, delta) = (Delta^delta_q o phi^q)^{-1}(unit bidisc), expansion taken at q."""
    if not delta > 0:
        raise PreconditionError("delta must be positive")
    q = np.asarray(q, dtype=complex)
    two_m = two_m or D.declared_type
    cat = _catlin_at(D, q, two_m)
    tau = catlin_tau(cat.expansion, delta)
    return BidiscSpec(q, float(delta), tau, cat)


def d_prime(D, a, b, two_m=None, lo=1e-12, hi=1e3, iters=60):
    """inf{delta : a in Q(b, delta)} by bisection in log delta; (value, bracketed)."""
    a = np.asarray(a, dtype=complex)
    if not catlin_bidisc(D, b, hi, two_m).contains(a)[0]:
        return math.inf, False
    if catlin_bidisc(D, b, lo, two_m).contains(a)[0]:
        return lo, True
    llo, lhi = math.log(lo), math.log(hi)
    for _ in range(iters):
        mid = 0.5 * (llo + lhi)
        if catlin_bidisc(D, b, math.exp(mid), two_m).contains(a)[0]:
            lhi = mid
        else:
            llo = mid
    return math.exp(lhi), True


def herbort_terms(D, a, b, two_m=None):
    """The three increments of rho*(a, b) and bookkeeping."""
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    if D.n != 2:
        raise PreconditionError("the Herbort pseudodistance is defined in C^2")
    two_m = two_m or D.declared_type
    bd = boundary_distance(D, a)
    da = bd.distance
    euclid = float(np.linalg.norm(a - b))
    if euclid == 0:
        return {"d_a": da, "d": 0.0, "pair": 0.0, "tau": math.nan, "flag": "equal"}
    dp, ok = d_prime(D, a, b, two_m)
    d = min(dp, euclid)
    g = D.rho.gradient(a)
    L = np.array([-g[1], g[0]])
    pair = abs(np.vdot(a - b, L))  # sum L_i conj((a - b)_i)
    foot_cat = _catlin_at(D, bd.foot, two_m)
    tau = catlin_tau(foot_cat.expansion, da)
    return {"d_a": da, "d": d, "pair": pair, "tau": tau, "flag": "ok" if ok else "euclid"}


def herbort_rho_star(D, a, b, two_m=None):
    t = herbort_terms(D, a, b, two_m)
    if t["d"] == 0 and t["pair"] == 0:
        return 0.0
    return math.log(1 + t["d"] / t["d_a"] + t["pair"] / t["tau"])


@dataclass
class HerbortFit:
    c_star: float
    rows: list


def herbort_sandwich_fit(D, pairs, distances=None, cfg=None):
    """C_* = min(min r_i, 1/max r_i) with r_i = d_D / (rho*(a,b) + rho*(b,a))."""
    from .invariant_metrics import kobayashi_distance_estimate
    pairs = [(np.asarray(a, dtype=complex), np.asarray(b, dtype=complex)) for a, b in pairs]
    pairs = [(a, b) for a, b in pairs if not np.array_equal(a, b)]
    if len(pairs) < 10:
        raise PreconditionError("need at least 10 distinct pairs")
    rows = []
    for i, (a, b) in enumerate(pairs):
        dist = distances[i] if distances is not None else kobayashi_distance_estimate(D, a, b, cfg).value
        s = herbort_rho_star(D, a, b) + herbort_rho_star(D, b, a)
        if not (dist > 0 and s > 0):
            raise DegenerateGeometryError(f"nonpositive ratio for pair {i}")
        rows.append({"id": i, "distance": dist, "rho_sum": s, "ratio": dist / s})
    r = np.array([row["ratio"] for row in rows])
    return HerbortFit(float(min(r.min(), 1 / r.max())), rows)


# ---------------------------------------------------------------------------
# McNeal polydiscs


@dataclass
class McNealPolydisc:
    frame: object

    @property
    def radii(self):
        return self.frame.taus

    def contains(self, Z):
        W = self.frame.map(np.atleast_2d(np.asarray(Z, dtype=complex)))
        return np.all(np.abs(W) < self.frame.taus[None, :], axis=1)


def mcneal_polydisc(D, q, eps):
    return McNealPolydisc(mcneal_frame(D, q, eps))


# ---------------------------------------------------------------------------
# ball sandwiches


@dataclass
class SandwichFit:
    law: str
    exponents: tuple
    C1: float
    C2: float
    rows: list

    @property
    def inner_ratio(self):
        c = [r["C1"] for r in self.rows]
        return max(c) / min(c)

    @property
    def outer_ratio(self):
        c = [r["C2"] for r in self.rows]
        return max(c) / min(c)


class _RegionLaw:
    """Radial extent of the comparison region Q(q, C d) along a direction."""

    def __init__(self, D, q, d, law, two_m=None):
        self.D, self.q, self.d, self.law = D, q, d, law
        self.two_m = two_m or D.declared_type
        if law == "spsc":
            foot = boundary_distance(D, q).foot
            self.nu = outward_normal(D.active_piece(foot), foot)

    def extent(self, u, C):
        if self.law == "spsc":
            r = C * self.d
            c = np.vdot(self.nu, u)
            tang = np.linalg.norm(u - c * self.nu)
            # P(q; r, sqrt r): |normal part| < r, |tangential part| < sqrt(r)
            k = max(abs(c) / r, tang / math.sqrt(r))
            return 1.0 / k
        Q = catlin_bidisc(self.D, self.q, C * self.d, self.two_m)
        # first exit along the ray, by scan then bisection
        scale = max(Q.tau, C * self.d)
        ts = scale * np.geomspace(1e-6, 1e3, 200)
        inside = Q.contains(self.q[None, :] + ts[:, None] * u[None, :])
        if inside.all():
            return float(ts[-1])
        k = int(np.argmin(inside))
        lo = ts[k - 1] if k > 0 else 0.0
        hi = ts[k]
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if Q.contains(self.q + mid * u)[0]:
                lo = mid
            else:
                hi = mid
        return float(lo)


def _fit_C(region, dirs, extents, inner):
    """Largest C with Q-extents <= ball extents (inner) or smallest C with >= (outer)."""
    def ok(C):
        e = np.array([region.extent(u, C) for u in dirs])
        return np.all(e <= extents) if inner else np.all(e >= extents)
    lo, hi = math.log(1e-6), math.log(1e6)
    if inner and not ok(math.exp(lo)):
        return 0.0
    if not inner and not ok(math.exp(hi)):
        return math.inf
    for _ in range(45):
        mid = 0.5 * (lo + hi)
        if ok(math.exp(mid)) == inner:
            lo = mid
        else:
            hi = mid
    return math.exp(lo) if inner else math.exp(hi)


def frame_directions(D, q, extra=8, seed=0):
    """Normal/tangential frame axes at the foot of q plus seeded random directions."""
    foot = boundary_distance(D, q).foot
    nu = outward_normal(D.active_piece(foot), foot)
    n = D.n
    M = np.column_stack([nu, np.eye(n, dtype=complex)])
    Qm, _ = np.linalg.qr(M)
    Qm[:, 0] = nu
    dirs = []
    for k in range(n):
        for ph in (1, -1, 1j, -1j):
            dirs.append(ph * Qm[:, k])
    if extra:
        dirs.extend(sphere_directions(n, 4 * n + extra, seed)[4 * n:])
    return np.array(dirs)


def sandwich_constants(D, qs, R, law="catlin", cfg=None, extra_dirs=8, seed=0, probes=None):
    """Fit C_1 (inner) and C_2 (outer) for Q(q, C d) against the ball B_D(q, R)."""
    from .invariant_metrics import kobayashi_ball_probe
    rows = []
    for i, q in enumerate(qs):
        q = np.asarray(q, dtype=complex)
        d = boundary_distance(D, q).distance
        dirs = frame_directions(D, q, extra_dirs, seed)
        if probes is not None:
            res = probes[i]
        else:
            res = kobayashi_ball_probe(D, q, R, dirs, cfg)
        ext = np.array([t for t, _ in res])
        region = _RegionLaw(D, q, d, law)
        C1 = _fit_C(region, dirs, ext, inner=True)
        C2 = _fit_C(region, dirs, ext, inner=False)
        rows.append({"id": i, "d": d, "C1": C1, "C2": C2, "extents": ext.tolist(),
                     "exited": [bool(f) for _, f in res]})
    exps = (1.0, 0.5) if law == "spsc" else (1.0, None)
    return SandwichFit(law, exps, min(r["C1"] for r in rows), max(r["C2"] for r in rows), rows)


# ---------------------------------------------------------------------------
# formulas


def fr_bounds(D, a, b, C):
    """Lower and upper logarithmic bounds for d_D(a, b) near the boundary."""
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    da = boundary_distance(D, a).distance
    db = boundary_distance(D, b).distance
    return fr_bounds_from(da, db, float(np.linalg.norm(a - b)), C)


def fr_bounds_from(da, db, sep, C):
    lower = -0.5 * math.log(da) - 0.5 * math.log(db) - C
    upper = (-0.5 * math.log(da) + 0.5 * math.log(da + sep)
             + 0.5 * math.log(db + sep) - 0.5 * math.log(db) + C)
    return lower, upper


@dataclass
class FRFit:
    """Smallest C making the log bounds hold on every sample; per-row needs kept."""

    C: float
    rows: list


def fr_constant_fit(samples):
    """samples: dicts with d_a, d_b, sep, distance and kind in {"far", "near"}.

    The lower bound is only claimed for pairs near distinct boundary points
    ("far"); the upper bound is checked on every pair.
    """
    rows, need = [], []
    for i, s in enumerate(samples):
        lo0, up0 = fr_bounds_from(s["d_a"], s["d_b"], s["sep"], 0.0)
        c_up = s["distance"] - up0
        c_lo = lo0 - s["distance"] if s["kind"] == "far" else -math.inf
        rows.append(dict(s, id=i, C_lower=c_lo, C_upper=c_up))
        need.append(max(c_lo, c_up))
    if not rows:
        raise PreconditionError("no samples")
    return FRFit(float(max(need)), rows)


def sqrt_lower_fit(D, points, directions, cfg=None):
    """min over samples of F^C_lower(q, v) sqrt(d(q)) / |v|: a constant for the sqrt(d) law.

    Caratheodory lower bounds are lower bounds for F^K too, so the fitted
    constant certifies F^K(q, v) >= C |v| / sqrt(d) on the samples.
    """
    from .invariant_metrics import caratheodory_inf_lower
    rows = []
    for i, q in enumerate(points):
        q = np.asarray(q, dtype=complex)
        d = boundary_distance(D, q).distance
        for j, v in enumerate(directions):
            v = np.asarray(v, dtype=complex)
            c = caratheodory_inf_lower(D, q, v, cfg).value
            rows.append({"id": i, "dir": j, "d": d, "FC": c,
                         "C": c * math.sqrt(d) / float(np.linalg.norm(v))})
    return min(r["C"] for r in rows), rows


def shrink_factor(a, b):
    if not b > a:
        raise PreconditionError("need b > a")
    return 1.0 / math.tanh(b - a)


def sqrt_hyperbolicity_lower(D, q, v, C):
    v = np.asarray(v, dtype=complex)
    nv = float(np.linalg.norm(v))
    if nv == 0:
        return 0.0
    d = boundary_distance(D, q).distance
    return C * nv / math.sqrt(d)


def write_residuals_csv(rows, path):
    """rows: iterables of (sample id, quantity, lhs, rhs, margin)."""
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "quantity", "lhs", "rhs", "margin"])
        for sid, qty, lhs, rhs, margin in rows:
            w.writerow([sid, qty, format(float(lhs), ".17g"), format(float(rhs), ".17g"),
                        format(float(margin), ".17g")])
    return path
