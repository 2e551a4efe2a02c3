"""Domains in C^n cut out by real polynomials in (z, conj z).

Besides the Domain type this module holds the handful of geometric
primitives everything else leans on: evaluation with a reality check, exact
Wirtinger gradients, closest boundary points, and the preset catalog.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.optimize import minimize

from .errors import MalformedPolynomialError, PreconditionError
from .polynomial import Polynomial, RealPolynomial, reality_defects

CLASS_TAGS = ("StronglyPseudoconvex", "FiniteType2D", "ConvexFiniteType",
              "PolynomialModel", "Polyhedron", "Generic")
# classes whose defining functions are plurisubharmonic, so the maximum
# principle lets boundary samples certify disc containment
PSH_TAGS = frozenset(CLASS_TAGS[:5])

IMAG_TOL = 1e-12
FOOT_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class Domain:
    """{rho < 0} intersected with {q < 0} for every q in ``extra``.

    ``contained`` says the whole domain sits inside the ball of radius
    ``bounding_radius``; otherwise searches are clipped to that ball.
    """

    rho: RealPolynomial
    class_tag: str
    base_point: np.ndarray
    declared_type: int | None = None
    bounding_radius: float = 10.0
    extra: tuple = ()
    name: str = ""
    contained: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.class_tag not in CLASS_TAGS:
            raise PreconditionError(f"unknown class tag {self.class_tag!r}")
        bp = np.asarray(self.base_point, dtype=complex).reshape(-1)
        object.__setattr__(self, "base_point", bp)
        if bp.shape[0] != self.rho.n or any(q.n != self.rho.n for q in self.extra):
            raise PreconditionError("dimension mismatch between base point and polynomials")
        if self.declared_type is not None and (self.declared_type < 2 or self.declared_type % 2):
            raise PreconditionError("declared type must be an even integer >= 2")
        if not self.values(bp) < 0:
            raise PreconditionError("base point is not interior (rho >= 0)")
        if self.class_tag == "PolynomialModel":
            n = self.n
            rest = self.rho - (Polynomial.z(n, n - 1) + Polynomial.zbar(n, n - 1))
            if rest.depends_on(n - 1):
                raise PreconditionError("PolynomialModel needs rho = 2 Re z_n + P('z)")

    @property
    def n(self):
        return self.rho.n

    @property
    def pieces(self):
        return (self.rho,) + tuple(self.extra)

    @property
    def psh(self):
        return self.class_tag in PSH_TAGS

    @property
    def rho_scale(self):
        return max(q.max_abs_coeff() for q in self.pieces)

    def values(self, Z):
        """max over pieces of the defining polynomials, real, shape (...)."""
        vals = self.pieces[0].value(Z)
        for q in self.pieces[1:]:
            vals = np.maximum(vals, q.value(Z))
        return vals

    def piece_values(self, Z):
        return np.stack([q.value(Z) for q in self.pieces])

    def active_piece(self, z):
        return self.pieces[int(np.argmax([q.value(z) for q in self.pieces]))]

    def contains(self, Z):
        return self.values(Z) < 0

    def with_(self, **kw):
        d = dict(rho=self.rho, class_tag=self.class_tag, base_point=self.base_point,
                 declared_type=self.declared_type, bounding_radius=self.bounding_radius,
                 extra=self.extra, name=self.name, contained=self.contained, meta=dict(self.meta))
        d.update(kw)
        return Domain(**d)


@dataclass(frozen=True, eq=False)
class PolyhedronSpec:
    """Analytic polyhedron {|f^l| < 1} near a corner point z0 with |f^l(z0)| = 1."""

    generators: tuple
    reference_point: np.ndarray

    def __post_init__(self):
        z0 = np.asarray(self.reference_point, dtype=complex)
        object.__setattr__(self, "reference_point", z0)
        gens = tuple(self.generators)
        object.__setattr__(self, "generators", gens)
        n = z0.shape[0]
        if len(gens) != n or any(not g.is_holomorphic() or g.n != n for g in gens):
            raise PreconditionError("need n holomorphic generators in n variables")
        vals = np.array([g(z0) for g in gens])
        if np.max(np.abs(np.abs(vals) - 1)) > 1e-9:
            raise PreconditionError("reference point must satisfy |f^l(z0)| = 1 for every l")
        if abs(np.linalg.det(self.jacobian(z0))) <= 1e-9:
            raise PreconditionError("generators are not independent at the reference point")

    @property
    def n(self):
        return self.reference_point.shape[0]

    def values(self, Z):
        return np.stack([g(Z) for g in self.generators], axis=-1)

    def jacobian(self, z):
        z = np.asarray(z, dtype=complex)
        return np.array([[g.diff_z(j)(z) for j in range(self.n)] for g in self.generators])

    def domain(self, base_point=None):
        n = self.n
        pieces = [RealPolynomial.from_any(g * g.conj()) - 1.0 for g in self.generators]
        bp = np.zeros(n, dtype=complex) if base_point is None else base_point
        return Domain(pieces[0], "Polyhedron", bp, extra=tuple(pieces[1:]),
                      bounding_radius=10.0, name="polyhedron")


# ---------------------------------------------------------------------------
# evaluation and differentiation


def eval_rho(D, z):
    """Value of the defining function at z (max over pieces for intersections)."""
    z = np.asarray(z, dtype=complex)
    if not np.all(np.isfinite(z)):
        raise PreconditionError("point must be finite")
    vals = []
    for q in D.pieces:
        v = q(z)
        tol = IMAG_TOL * np.maximum(1.0, q.magnitude(z))
        if np.any(np.abs(np.imag(v)) > tol):
            raise MalformedPolynomialError("defining polynomial returned a non-real value")
        vals.append(np.real(v))
    out = vals[0]
    for v in vals[1:]:
        out = np.maximum(out, v)
    return float(out) if np.ndim(out) == 0 else out


def wirtinger_gradient(D, z):
    """(d rho/dz_1, ..., d rho/dz_n) at z for the active piece."""
    z = np.asarray(z, dtype=complex)
    return D.active_piece(z).gradient(z)


def real_gradient(q, z):
    """Gradient of a real polynomial in the real coordinates (x, y)."""
    g = q.gradient(z)
    return np.concatenate([2 * g.real, -2 * g.imag])


def real_hessian(q, z):
    A, B = q.hessians(z)
    hxx = 2 * np.real(A + B)
    hxy = -2 * np.imag(A - B)
    hyy = -2 * np.real(A - B)
    return np.block([[hxx, hxy], [hxy.T, hyy]])


def outward_normal(q, z):
    """Unit outward normal at z as a complex vector."""
    g = np.conj(q.gradient(z))
    nrm = np.linalg.norm(g)
    if nrm == 0:
        raise PreconditionError("gradient vanishes")
    return g / nrm


def _to_real(z):
    return np.concatenate([z.real, z.imag])


def _to_complex(x):
    n = x.shape[0] // 2
    return x[:n] + 1j * x[n:]


# ---------------------------------------------------------------------------
# closest boundary point


class BoundaryPoint(NamedTuple):
    distance: float
    foot: np.ndarray
    method: str


def ray_exit(D, z, dirs, t_max=None, grid=400, iters=70):
    """First t > 0 where z + t u leaves D, for each unit direction u.

    Returns an array of exit parameters (inf when no exit within t_max).
    """
    z = np.asarray(z, dtype=complex)
    dirs = np.atleast_2d(np.asarray(dirs, dtype=complex))
    if t_max is None:
        t_max = 2.0 * D.bounding_radius + float(np.linalg.norm(z))
    ts = t_max * np.geomspace(1e-13, 1.0, grid)
    pts = z[None, None, :] + ts[None, :, None] * dirs[:, None, :]
    vals = D.values(pts)
    outside = vals >= 0
    has = outside.any(axis=1)
    k = np.argmax(outside, axis=1)
    lo = np.where(k > 0, ts[np.maximum(k - 1, 0)], 0.0)
    hi = ts[k]
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        inside = D.values(z[None, :] + mid[:, None] * dirs) < 0
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    out = np.where(has, hi, np.inf)
    return out


def sphere_directions(n, count, seed=0):
    """Deterministic unit vectors in C^n: coordinate axes, then seeded random."""
    rng = np.random.default_rng(seed)
    base = []
    for i in range(n):
        for ph in (1, -1, 1j, -1j):
            e = np.zeros(n, dtype=complex)
            e[i] = ph
            base.append(e)
    extra = max(0, count - len(base))
    r = rng.normal(size=(extra, n)) + 1j * rng.normal(size=(extra, n))
    r /= np.linalg.norm(r, axis=1, keepdims=True)
    out = np.array(base + list(r))
    return out[:max(count, 1)] if count < len(base) else out


def _newton_foot(q, z, w0, iters=60):
    """Newton on the Lagrange system for min |w - z|^2 subject to q(w) = 0."""
    # a diverging run overflows on its way to the isfinite rejection below
    with np.errstate(all="ignore"):
        return _newton_foot_raw(q, z, w0, iters)


def _newton_foot_raw(q, z, w0, iters):
    x = _to_real(w0)
    x0 = _to_real(z)
    g = real_gradient(q, _to_complex(x))
    gg = g @ g
    mu = -(g @ (x - x0)) / gg if gg > 0 else 0.0
    m = x.shape[0]
    for _ in range(iters):
        w = _to_complex(x)
        g = real_gradient(q, w)
        H = real_hessian(q, w)
        F = np.concatenate([x - x0 + mu * g, [q.value(w)]])
        J = np.zeros((m + 1, m + 1))
        J[:m, :m] = np.eye(m) + mu * H
        J[:m, m] = g
        J[m, :m] = g
        try:
            step = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            return None
        x = x + step[:m]
        mu = mu + step[m]
        if np.linalg.norm(step[:m]) <= 1e-15 * (1 + np.linalg.norm(x)):
            break
    w = _to_complex(x)
    # final projection along the gradient pins rho(foot) to round-off
    for _ in range(3):
        g = real_gradient(q, w)
        gg = g @ g
        if gg == 0:
            break
        w = _to_complex(_to_real(w) - q.value(w) * g / gg)
    if not np.all(np.isfinite(w)):
        return None
    return w


def _descent_foot(q, z, w0):
    """Constrained descent from a boundary seed, for when Newton keeps landing on saddles."""
    x0 = _to_real(z)
    con = {"type": "eq", "fun": lambda x: q.value(_to_complex(x)),
           "jac": lambda x: real_gradient(q, _to_complex(x))}
    res = minimize(lambda x: (x - x0) @ (x - x0), _to_real(w0), jac=lambda x: 2 * (x - x0),
                   method="SLSQP", constraints=[con], options={"ftol": 1e-15, "maxiter": 200})
    return _newton_foot(q, z, _to_complex(res.x))


def boundary_distance(D, z, rays=64, seed=0):
    """Euclidean distance from an interior point to the boundary.

    Newton on the Lagrange system seeded from the normal ray, cross-checked
    against a sample of rays; falls back to the best ray when Newton fails.
    """
    z = np.asarray(z, dtype=complex)
    if not D.values(z) < 0:
        raise PreconditionError("boundary_distance needs an interior point")
    if np.linalg.norm(z) > D.bounding_radius:
        raise PreconditionError("point outside the bounding ball")
    scale = max(1.0, D.rho_scale)
    candidates = []

    def accept(w, how):
        if w is None:
            return
        if abs(D.values(w)) <= FOOT_TOL * scale and np.all(D.piece_values(w) <= FOOT_TOL * scale):
            candidates.append((float(np.linalg.norm(w - z)), w, how))

    q = D.active_piece(z)
    g = q.gradient(z)
    t = np.inf
    if np.linalg.norm(g) > 1e-14 * scale:
        nu = outward_normal(q, z)
        t = ray_exit(D, z, nu)[0]
    if np.isfinite(t):
        w0 = z + t * nu
        for piece in D.pieces:
            if abs(piece.value(w0)) <= 1e-6 * scale + 1e-9:
                accept(_newton_foot(piece, z, w0), "newton")
    dirs = sphere_directions(D.n, rays, seed)
    ts = ray_exit(D, z, dirs)
    if np.any(np.isfinite(ts)):
        k = int(np.argmin(ts))
        w_ray = z + ts[k] * dirs[k]
        best_newton = min((c[0] for c in candidates), default=np.inf)
        if ts[k] < best_newton - 1e-12:
            # Newton from one seed can jump to a farther critical point, so try a few
            for j in np.argsort(ts)[:6]:
                if not ts[j] < best_newton - 1e-12:
                    break
                w_seed = z + ts[j] * dirs[j]
                for piece in D.pieces:
                    if abs(piece.value(w_seed)) <= 1e-6 * scale + 1e-9:
                        accept(_newton_foot(piece, z, w_seed), "newton+rays")
            if ts[k] < min((c[0] for c in candidates), default=np.inf) - 1e-12:
                for piece in D.pieces:
                    if abs(piece.value(w_ray)) <= 1e-6 * scale + 1e-9:
                        accept(_descent_foot(piece, z, w_ray), "descent")
            accept(w_ray, "rays")
    if not candidates:
        raise PreconditionError("no boundary point found inside the bounding ball")
    d, w, how = min(candidates, key=lambda c: c[0])
    return BoundaryPoint(d, w, how)


# ---------------------------------------------------------------------------
# presets


def _sum_abs2(n, idx):
    p = Polynomial(n)
    for i in idx:
        p = p + Polynomial.abs2(n, i)
    return RealPolynomial.from_any(p)


def _two_re(n, i):
    return RealPolynomial.from_any(Polynomial.z(n, i) + Polynomial.zbar(n, i))


DEFAULT_BUMP = "re_z1sq+abs_z1z2sq"


def bump_polynomial(name=DEFAULT_BUMP):
    """Fixed perturbations used by perturbed_ball: named real polynomials in C^2."""
    n = 2
    z1, z2 = Polynomial.z(n, 0), Polynomial.z(n, 1)
    table = {
        "re_z1sq+abs_z1z2sq": (z1 * z1 + (z1 * z1).conj()) * 0.5 + (z1 * z2) * (z1 * z2).conj(),
        "abs_z1z2sq": (z1 * z2) * (z1 * z2).conj(),
        "re_z1sq": (z1 * z1 + (z1 * z1).conj()) * 0.5,
    }
    if name not in table:
        raise PreconditionError(f"unknown bump {name!r}")
    return RealPolynomial.from_any(table[name])


def preset_domain(name, *params, bump=DEFAULT_BUMP):
    """Standard domains: ball, polydisc, siegel, halfplane, thullen_model, egg, perturbed_ball."""
    p = [int(x) for x in params]
    if name == "ball":
        n = p[0] if p else 2
        return Domain(_sum_abs2(n, range(n)) - 1.0, "StronglyPseudoconvex", np.zeros(n),
                      declared_type=2, bounding_radius=2.0, name=f"ball:{n}", contained=True)
    if name == "polydisc":
        n = p[0] if p else 2
        pieces = [RealPolynomial.from_any(Polynomial.abs2(n, i)) - 1.0 for i in range(n)]
        return Domain(pieces[0], "Polyhedron", np.zeros(n), extra=tuple(pieces[1:]),
                      bounding_radius=2.0 * np.sqrt(n), name=f"polydisc:{n}", contained=True)
    if name == "siegel":
        n = p[0] if p else 2
        rho = _two_re(n, n - 1) + _sum_abs2(n, range(n - 1))
        bp = np.zeros(n, dtype=complex)
        bp[-1] = -1
        return Domain(rho, "PolynomialModel", bp, declared_type=2, name=f"siegel:{n}")
    if name == "halfplane":
        return Domain(_two_re(1, 0), "PolynomialModel", np.array([-1.0 + 0j]), name="halfplane")
    if name == "thullen_model":
        m = p[0] if p else 2
        rho = _two_re(2, 1) + RealPolynomial.from_any(Polynomial.abs2(2, 0, m))
        return Domain(rho, "PolynomialModel", np.array([0, -1], dtype=complex),
                      declared_type=2 * m, name=f"thullen_model:{m}")
    if name == "egg":
        m = p[0] if p else 2
        rho = RealPolynomial.from_any(Polynomial.abs2(2, 0, m) + Polynomial.abs2(2, 1)) - 1.0
        tag = "StronglyPseudoconvex" if m == 1 else "FiniteType2D"
        return Domain(rho, tag, np.zeros(2), declared_type=2 * m, bounding_radius=2.0,
                      name=f"egg:{m}", contained=True,
                      meta={"type_points": [[0, -1], [0, 1]]})
    if name == "perturbed_ball":
        k = p[0] if p else 4
        if k < 4:
            raise PreconditionError("perturbed_ball needs k >= 4 to stay strongly pseudoconvex")
        rho = _sum_abs2(2, range(2)) - 1.0 + bump_polynomial(bump) * (1.0 / k)
        return Domain(rho, "StronglyPseudoconvex", np.zeros(2), declared_type=2,
                      bounding_radius=2.0, name=f"perturbed_ball:{k}", contained=True,
                      meta={"k": k, "bump": bump})
    raise PreconditionError(f"unknown preset {name!r}")


# ---------------------------------------------------------------------------
# JSON term lists


def polynomial_from_terms(n, terms, real=True):
    raw = {}
    for t in terms:
        key = (tuple(t["z"]), tuple(t["zbar"]))
        if key in raw:
            raise MalformedPolynomialError(f"duplicate (alpha, beta) key {key}")
        raw[key] = complex(t.get("re", 0.0), t.get("im", 0.0))
    p = Polynomial(n, raw)
    if real:
        bad = reality_defects(p)
        if bad:
            raise MalformedPolynomialError(
                "reality violated at (alpha, beta) = " + ", ".join(str(b) for b in bad))
        return RealPolynomial.from_any(p)
    return p


def domain_from_dict(spec):
    """Build a Domain from the JSON schema; collects every violation before raising."""
    problems = []
    for key in ("n", "class", "terms", "base_point"):
        if key not in spec:
            problems.append(f"missing field {key!r}")
    if problems:
        raise PreconditionError("; ".join(problems))
    n = int(spec["n"])
    try:
        rho = polynomial_from_terms(n, spec["terms"])
    except MalformedPolynomialError as e:
        problems.append(str(e))
        rho = None
    extra = []
    for i, tl in enumerate(spec.get("extra", [])):
        try:
            extra.append(polynomial_from_terms(n, tl))
        except MalformedPolynomialError as e:
            problems.append(f"extra[{i}]: {e}")
    bp = np.array([complex(a, b) for a, b in spec["base_point"]])
    if bp.shape[0] != n:
        problems.append("base_point has wrong length")
    if spec["class"] not in CLASS_TAGS:
        problems.append(f"unknown class {spec['class']!r}")
    if problems:
        raise PreconditionError("; ".join(problems))
    return Domain(rho, spec["class"], bp, declared_type=spec.get("type"),
                  bounding_radius=float(spec.get("bounding_radius", 10.0)),
                  extra=tuple(extra), name=spec.get("name", "file"),
                  contained=bool(spec.get("contained", False)))


def domain_to_dict(D):
    out = {"n": D.n, "class": D.class_tag, "terms": D.rho.to_terms(),
           "base_point": [[float(c.real), float(c.imag)] for c in D.base_point],
           "bounding_radius": D.bounding_radius, "name": D.name, "contained": D.contained}
    if D.declared_type is not None:
        out["type"] = D.declared_type
    if D.extra:
        out["extra"] = [q.to_terms() for q in D.extra]
    return out


def domain_from_json(text):
    try:
        spec = json.loads(text)
    except json.JSONDecodeError as e:
        raise PreconditionError(f"schema error at byte offset {e.pos}: {e.msg}") from None
    return domain_from_dict(spec)
