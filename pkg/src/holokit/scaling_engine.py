"""Rescaling of domains near boundary points.

Four constructions live here: the strongly pseudoconvex normalization
followed by an anisotropic dilation, the finite-type scaling in C^2 with
polynomial changes of the normal coordinate, the convex scaling built on
extremal frames, and the corner maps for analytic polyhedra.  All maps
except the corner maps are polynomial automorphisms, so scaled defining
functions stay exact real polynomials.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .domain_core import (Domain, PolyhedronSpec, boundary_distance, preset_domain,
                          real_gradient)
from .errors import (ConvexityViolationError, DegenerateGeometryError, NonConvergenceError,
                     NotStronglyPseudoconvexError, PreconditionError, TypeMismatchError)
from .polynomial import Polynomial, RealPolynomial, affine_maps, hol_map_eval

MAP_KINDS = ("Translation", "Unitary", "Triangular", "Dilation", "Cayley", "Composite")


# ---------------------------------------------------------------------------
# polynomial automorphisms


@dataclass(frozen=True, eq=False)
class PolynomialAutomorphism:
    """z -> (components[i](z)) with an explicitly stored polynomial inverse."""

    components: tuple
    inverse_components: tuple
    kind: str = "Composite"

    def __post_init__(self):
        if self.kind not in MAP_KINDS:
            raise PreconditionError(f"unknown map kind {self.kind!r}")
        object.__setattr__(self, "components", tuple(self.components))
        object.__setattr__(self, "inverse_components", tuple(self.inverse_components))
        if self.kind == "Triangular" and self.components[0].degree() > 1:
            raise PreconditionError("triangular map must be affine in its first component")

    @property
    def n(self):
        return len(self.components)

    def __call__(self, Z):
        return hol_map_eval(self.components, np.asarray(Z, dtype=complex))

    def apply_inverse(self, Z):
        return hol_map_eval(self.inverse_components, np.asarray(Z, dtype=complex))

    def inverse(self):
        kind = self.kind if self.kind != "Composite" else "Composite"
        return PolynomialAutomorphism(self.inverse_components, self.components, kind)

    def compose(self, inner):
        """self o inner."""
        comps = [c.compose(inner.components) for c in self.components]
        inv = [c.compose(self.inverse_components) for c in inner.inverse_components]
        return PolynomialAutomorphism(comps, inv, "Composite")

    def push_forward(self, rho):
        """Defining function of the image domain: rho o self^{-1}."""
        return rho.compose(self.inverse_components)

    def jacobian(self, z):
        z = np.asarray(z, dtype=complex)
        return np.array([[c.diff_z(j)(z) for j in range(self.n)] for c in self.components])

    def roundtrip_error(self, count=100, seed=0, radius=1.0):
        rng = np.random.default_rng(seed)
        Z = rng.normal(size=(count, self.n)) + 1j * rng.normal(size=(count, self.n))
        Z *= radius / np.sqrt(2 * self.n)
        a = self.apply_inverse(self(Z))
        b = self(self.apply_inverse(Z))
        scale = np.maximum(1.0, np.linalg.norm(Z, axis=1))
        return float(max(np.max(np.linalg.norm(a - Z, axis=1) / scale),
                         np.max(np.linalg.norm(b - Z, axis=1) / scale)))

    def verify(self, count=100, seed=0, radius=1.0, tol=1e-10):
        err = self.roundtrip_error(count, seed, radius)
        if not err <= tol:
            raise DegenerateGeometryError(f"stored inverse is off by {err:.3e}")
        return err

    def to_dict(self):
        return {"kind": self.kind,
                "components": [c.to_terms() for c in self.components],
                "inverse": [c.to_terms() for c in self.inverse_components]}


def affine_automorphism(M, b, kind="Composite"):
    """z -> M z + b."""
    M = np.asarray(M, dtype=complex)
    b = np.asarray(b, dtype=complex)
    Minv = np.linalg.inv(M)
    return PolynomialAutomorphism(affine_maps(M, b), affine_maps(Minv, -Minv @ b), kind)


def translation(b):
    b = np.asarray(b, dtype=complex)
    return affine_automorphism(np.eye(b.shape[0]), b, "Translation")


def dilation(scales):
    """z_i -> scales[i] * z_i."""
    s = np.asarray(scales, dtype=complex)
    return affine_automorphism(np.diag(s), np.zeros(s.shape[0]), "Dilation")


def identity_map(n):
    return translation(np.zeros(n))


def normal_shear(n, Q):
    """w_n = z_n + Q('z), the other coordinates unchanged."""
    zs = [Polynomial.z(n, i) for i in range(n)]
    fwd = zs[:-1] + [zs[-1] + Q]
    inv = zs[:-1] + [zs[-1] - Q]
    return PolynomialAutomorphism(fwd, inv, "Triangular" if n > 1 else "Composite")


def catlin_map(zeta, d):
    """(z_1 - zeta_1, (z_2 - zeta_2 - sum_l d_l (z_1 - zeta_1)^l) / d_0) in C^2."""
    zeta = np.asarray(zeta, dtype=complex)
    z1, z2 = Polynomial.z(2, 0), Polynomial.z(2, 1)
    s1 = z1 - zeta[0]
    poly = Polynomial(2)
    pw = Polynomial.constant(2, 1.0)
    for l in range(1, len(d)):
        pw = pw * s1
        poly = poly + pw * d[l]
    fwd = [s1, (z2 - zeta[1] - poly) * (1.0 / d[0])]
    inv_poly = Polynomial(2)
    pw = Polynomial.constant(2, 1.0)
    for l in range(1, len(d)):
        pw = pw * z1
        inv_poly = inv_poly + pw * d[l]
    inv = [z1 + zeta[0], z2 * d[0] + zeta[1] + inv_poly]
    return PolynomialAutomorphism(fwd, inv, "Triangular")


# ---------------------------------------------------------------------------
# scaling runs


@dataclass
class ScalingEntry:
    j: int
    point: np.ndarray
    center: np.ndarray
    params: dict
    map: PolynomialAutomorphism
    domain: Domain
    image: np.ndarray
    extra: dict = field(default_factory=dict)


@dataclass
class ScalingRun:
    base: Domain
    p0: np.ndarray
    pipeline: str
    entries: list = field(default_factory=list)
    limit_model: Domain | None = None

    def to_json(self):
        """JSON text with every float written at 17 significant digits."""
        def entry(e):
            return {"j": e.j, "point": _cplx(e.point), "center": _cplx(e.center),
                    "params": {k: _num(v) for k, v in e.params.items()},
                    "image": _cplx(e.image), "map": e.map.to_dict(),
                    "rho": e.domain.rho.to_terms()}
        doc = {"pipeline": self.pipeline, "base": self.base.name, "p0": _cplx(self.p0),
               "entries": [entry(e) for e in self.entries],
               "limit_model": None if self.limit_model is None else self.limit_model.rho.to_terms()}
        return dumps17(doc)


def _cplx(z):
    return [[float(np.real(x)), float(np.imag(x))] for x in np.atleast_1d(z)]


def _num(v):
    if isinstance(v, (complex, np.complexfloating)):
        return [float(v.real), float(v.imag)]
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_num(x) for x in v]
    return float(v) if isinstance(v, (float, np.floating, int, np.integer)) else v


def dumps17(doc):
    """json.dumps with floats rendered by format(x, '.17g')."""
    def encode(o):
        if isinstance(o, dict):
            return "{" + ", ".join(json.dumps(str(k)) + ": " + encode(v) for k, v in o.items()) + "}"
        if isinstance(o, (list, tuple)):
            return "[" + ", ".join(encode(v) for v in o) + "]"
        if isinstance(o, bool) or o is None:
            return json.dumps(o)
        if isinstance(o, (float, np.floating)):
            x = float(o)
            if not math.isfinite(x):
                return json.dumps(str(x))
            return format(x, ".17g")
        if isinstance(o, (int, np.integer)):
            return str(int(o))
        return json.dumps(o)
    return encode(doc)


# ---------------------------------------------------------------------------
# strongly pseudoconvex normalization


@dataclass
class SpscNormalization:
    zeta: np.ndarray
    map: PolynomialAutomorphism
    rho: RealPolynomial
    scale: float


def _unitary_to_normal(a):
    """Unitary U whose last row is conj(u)^T with u = conj(a)/|a|."""
    n = a.shape[0]
    u = np.conj(a) / np.linalg.norm(a)
    M = np.column_stack([u, np.eye(n, dtype=complex)])
    Q, _ = np.linalg.qr(M)
    Q = Q[:, :n]
    Q[:, 0] = u
    # columns: u, then an orthonormal completion; rows of U are conj of columns
    cols = [Q[:, k] for k in range(1, n)] + [u]
    return np.array([np.conj(c) for c in cols])


def _taylor_check(rho, n, tol=1e-8):
    """Degree-2 structure: 2 Re z_n + hermitian |'z|^2, no pure 'z quadratic terms."""
    zero = (0,) * n
    scale = max(1.0, rho.max_abs_coeff())

    def e(i, k=1):
        t = [0] * n
        t[i] = k
        return tuple(t)

    problems = []
    if abs(rho.coeff(zero, zero)) > tol * scale:
        problems.append("constant term")
    for i in range(n):
        want = 1.0 if i == n - 1 else 0.0
        if abs(rho.coeff(e(i), zero) - want) > tol * scale:
            problems.append(f"linear z_{i + 1}")
    for i in range(n - 1):
        for j in range(n - 1):
            a = tuple(x + y for x, y in zip(e(i), e(j)))
            if i <= j and abs(rho.coeff(a, zero)) > tol * scale:
                problems.append(f"harmonic z_{i + 1} z_{j + 1}")
            want = 1.0 if i == j else 0.0
            if abs(rho.coeff(e(i), e(j)) - want) > tol * scale:
                problems.append(f"levi entry ({i + 1},{j + 1})")
    return problems


def spsc_normalization(D, zeta):
    """h_zeta = Lin o Shear o U o Translate and the normalized rho o h^{-1} / |a|."""
    if D.class_tag != "StronglyPseudoconvex":
        raise PreconditionError("normalization needs a strongly pseudoconvex domain")
    zeta = np.asarray(zeta, dtype=complex)
    n = D.n
    rho = D.rho
    if abs(rho.value(zeta)) > 1e-10 * max(1.0, D.rho_scale):
        raise PreconditionError("zeta is not on the boundary")
    a = rho.gradient(zeta)
    na = float(np.linalg.norm(a))
    if na == 0:
        raise DegenerateGeometryError("gradient vanishes at zeta")
    U = _unitary_to_normal(a)
    step1 = affine_automorphism(U, -U @ zeta)
    r1 = step1.push_forward(rho) / na
    # pure holomorphic quadratic part in 'w
    Q = Polynomial(n)
    for (al, be), c in r1.terms.items():
        if sum(be) == 0 and sum(al) == 2 and al[-1] == 0:
            Q = Q + Polynomial(n, {(al, be): c})
    shear = normal_shear(n, Q)
    r2 = shear.push_forward(r1)
    H = np.zeros((n - 1, n - 1), dtype=complex)
    for i in range(n - 1):
        for j in range(n - 1):
            al = tuple(1 if k == i else 0 for k in range(n))
            be = tuple(1 if k == j else 0 for k in range(n))
            H[i, j] = r2.coeff(al, be)
    if n > 1:
        try:
            L = np.linalg.cholesky(H.T)
        except np.linalg.LinAlgError as exc:
            raise NotStronglyPseudoconvexError("Levi form at zeta is not positive definite") from exc
        M = np.eye(n, dtype=complex)
        M[:n - 1, :n - 1] = np.conj(L.T)
        lin = affine_automorphism(M, np.zeros(n))
    else:
        lin = identity_map(n)
    h = lin.compose(shear.compose(step1))
    rho_z = h.push_forward(rho) / na
    problems = _taylor_check(rho_z, n)
    if problems:
        raise DegenerateGeometryError("normal form check failed: " + ", ".join(problems))
    return SpscNormalization(zeta, h, rho_z, na)


def _polish_foot(D, p, foot, iters=8):
    """Move the foot so p - foot is exactly along the normal (to round-off)."""
    q = D.rho
    w = foot
    for _ in range(iters):
        g = np.conj(q.gradient(w))
        nu = g / np.linalg.norm(g)
        t = np.real(np.vdot(nu, w - p))
        w_new = p + t * nu
        # re-project along the normal line onto rho = 0
        for _k in range(4):
            gr = real_gradient(q, w_new)
            x = np.concatenate([w_new.real, w_new.imag])
            dx = np.concatenate([nu.real, nu.imag])
            slope = gr @ dx
            if slope == 0:
                break
            s = -q.value(w_new) / slope
            w_new = w_new + s * nu
        if np.linalg.norm(w_new - w) < 1e-16:
            w = w_new
            break
        w = w_new
    return w


def spsc_scaled_domain(D, p, j=0):
    p = np.asarray(p, dtype=complex)
    bd = boundary_distance(D, p)
    if not bd.distance < 0.1:
        raise PreconditionError("point must be within 0.1 of the boundary")
    zeta = _polish_foot(D, p, bd.foot)
    norm = spsc_normalization(D, zeta)
    w = norm.map(p)
    delta = -float(np.real(w[-1]))
    n = D.n
    scales = np.full(n, 1.0 / math.sqrt(delta), dtype=complex)
    scales[-1] = 1.0 / delta
    T = dilation(scales)
    composed = T.compose(norm.map)
    rho_k = T.push_forward(norm.rho) / delta
    image = composed(p)
    Dk = Domain(rho_k, "StronglyPseudoconvex", image, declared_type=2,
                name=f"{D.name}|spsc[{j}]")
    return ScalingEntry(j, p, zeta, {"delta": delta, "distance": bd.distance}, composed, Dk,
                        image, {"normalization": norm})


def spsc_run(D, points):
    entries = [spsc_scaled_domain(D, p, j) for j, p in enumerate(points, start=1)]
    run = ScalingRun(D, entries[0].center if entries else None, "spsc", entries)
    run.limit_model = preset_domain("siegel", D.n)
    return run


# ---------------------------------------------------------------------------
# finite type in C^2


@dataclass
class HomogeneousExpansion:
    center: np.ndarray
    two_m: int
    parts: dict
    remainder: RealPolynomial

    def norms(self):
        return {l: P.max_abs_coeff() for l, P in self.parts.items()}


@dataclass
class CatlinData:
    map: PolynomialAutomorphism
    d: np.ndarray
    expansion: HomogeneousExpansion
    rho: RealPolynomial


def normal_chart(D, p0):
    """Affine chart at a boundary point: translate, rotate the normal to Re z_n, divide by |a|."""
    p0 = np.asarray(p0, dtype=complex)
    a = D.rho.gradient(p0)
    na = float(np.linalg.norm(a))
    if na == 0:
        raise DegenerateGeometryError("gradient vanishes at the chart point")
    U = _unitary_to_normal(a)
    A = affine_automorphism(U, -U @ p0)
    rho_c = A.push_forward(D.rho) / na
    Dc = Domain(rho_c, D.class_tag, A(D.base_point), declared_type=D.declared_type,
                bounding_radius=D.bounding_radius + float(np.linalg.norm(p0)),
                name=f"{D.name}|chart", contained=D.contained)
    return A, Dc


def _pure_key(l):
    return ((l, 0), (0, 0))


def catlin_automorphism(D, zeta, two_m):
    """phi^zeta with d^0 .. d^{2m} chosen to cancel the harmonic terms."""
    if D.n != 2:
        raise PreconditionError("finite-type scaling is implemented in C^2")
    if D.class_tag not in ("FiniteType2D", "StronglyPseudoconvex", "PolynomialModel"):
        raise PreconditionError("needs a finite-type domain in C^2")
    zeta = np.asarray(zeta, dtype=complex)
    rho = D.rho
    r2 = complex(rho.gradient(zeta)[1])
    if abs(r2) < 1e-12:
        raise DegenerateGeometryError("d rho / d z_2 vanishes at zeta")
    d = np.zeros(two_m + 1, dtype=complex)
    d[0] = 1.0 / r2
    for l in range(1, two_m + 1):
        phi = catlin_map(zeta, d)
        rt = phi.push_forward(rho)
        d[l] -= rt.terms.get(_pure_key(l), 0.0) / r2
    phi = catlin_map(zeta, d)
    rt = phi.push_forward(rho)
    parts = {}
    rest = dict(rt.terms)
    for l in range(2, two_m + 1):
        part = {k: c for k, c in rt.terms.items()
                if k[0][1] == 0 and k[1][1] == 0 and k[0][0] + k[1][0] == l}
        for k in part:
            rest.pop(k)
        parts[l] = RealPolynomial(2, part, check=False)
    for k in (((0, 1), (0, 0)), ((0, 0), (0, 1)), ((0, 0), (0, 0)), ((1, 0), (0, 0)), ((0, 0), (1, 0))):
        rest.pop(k, None)
    expansion = HomogeneousExpansion(zeta, two_m, parts, RealPolynomial(2, rest, check=False))
    if all(P.max_abs_coeff() <= 1e-14 for P in parts.values()):
        raise TypeMismatchError("every homogeneous part up to the declared type vanishes")
    return CatlinData(phi, d, expansion, rt)


def catlin_tau(expansion, eps):
    """min over nonzero parts of (eps / ||P_l||)^(1/l), ties to the smaller l."""
    if not eps > 0:
        raise PreconditionError("eps must be positive")
    best, best_l = math.inf, None
    for l in sorted(expansion.parts):
        nrm = expansion.parts[l].max_abs_coeff()
        if nrm > 0:
            t = (eps / nrm) ** (1.0 / l)
            if t < best:
                best, best_l = t, l
    if best_l is None:
        raise TypeMismatchError("all homogeneous parts vanish")
    return best


def _normal_root(Dc, pc, t_hi=None):
    """eps with rho(pc + (0, eps)) = 0, by bisection."""
    f = lambda t: Dc.rho.value(pc + np.array([0, t]))
    if not f(0.0) < 0:
        raise PreconditionError("point is not interior")
    hi = t_hi or 1e-6
    while f(hi) < 0:
        hi *= 2
        if hi > 4 * Dc.bounding_radius:
            raise NonConvergenceError("normal line never leaves the domain")
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * max(hi, 1e-300):
            break
    return 0.5 * (lo + hi)


def catlin_scaled_domain(D, p, two_m, p0=None, j=0):
    """Delta^eps o phi^zeta o chart applied to D, centered at zeta = p + (0, eps)."""
    p = np.asarray(p, dtype=complex)
    if p0 is None:
        p0 = boundary_distance(D, p).foot
    chart, Dc = normal_chart(D, p0)
    pc = chart(p)
    eps = _normal_root(Dc, pc)
    zeta = pc + np.array([0, eps])
    cat = catlin_automorphism(Dc, zeta, two_m)
    tau = catlin_tau(cat.expansion, eps)
    Dl = dilation([1.0 / tau, 1.0 / eps])
    composed = Dl.compose(cat.map.compose(chart))
    rho_j = Dl.push_forward(cat.rho) / eps
    image = composed(p)
    Dj = Domain(rho_j, "FiniteType2D" if two_m > 2 else D.class_tag, image,
                declared_type=two_m, name=f"{D.name}|catlin[{j}]")
    params = {"eps": eps, "tau": tau, "d0": cat.d[0], "ratio": tau ** two_m / eps}
    return ScalingEntry(j, p, chart.apply_inverse(zeta), params, composed, Dj, image,
                        {"catlin": cat, "chart": chart, "zeta_chart": zeta})


def catlin_run(D, points, two_m, p0):
    entries = [catlin_scaled_domain(D, p, two_m, p0, j) for j, p in enumerate(points, start=1)]
    run = ScalingRun(D, np.asarray(p0, dtype=complex), "catlin", entries)
    if len(entries) >= 3:
        P = limit_polynomial(run)
        rho = RealPolynomial.from_any(Polynomial.z(2, 1) + Polynomial.zbar(2, 1)) + P
        run.limit_model = Domain(rho, "PolynomialModel", np.array([0, -1], dtype=complex),
                                 declared_type=two_m, name="limit")
    return run


def scaled_parts(entry):
    """(1/eps) sum_l tau^l P_l as a polynomial in w_1."""
    cat = entry.extra["catlin"]
    eps, tau = entry.params["eps"], entry.params["tau"]
    S = {}
    for l, P in cat.expansion.parts.items():
        for k, c in P.terms.items():
            S[k] = S.get(k, 0) + c * tau ** l / eps
    return S


def limit_polynomial(run, rel_tol=0.05):
    """Extrapolated limit of the scaled homogeneous parts with sanity checks."""
    if len(run.entries) < 3:
        raise PreconditionError("need at least three entries")
    seq = [scaled_parts(e) for e in run.entries[-3:]]
    keys = sorted(set().union(*seq))
    X = np.array([[s.get(k, 0) for k in keys] for s in seq])
    last = np.max(np.abs(X[2])) if keys else 0.0
    change = np.max(np.abs(X[2] - X[1])) / last if last > 0 else math.inf
    if not change <= rel_tol:
        raise NonConvergenceError(f"scaled parts not Cauchy: relative change {change:.3g}")
    d1, d2 = X[1] - X[0], X[2] - X[1]
    den = d2 - d1
    with np.errstate(divide="ignore", invalid="ignore"):
        aitken = X[2] - d2 ** 2 / den
    ok = (np.abs(den) > 1e-12 * max(last, 1e-300)) & np.isfinite(aitken) \
        & (np.abs(aitken - X[2]) <= np.abs(d2) * 10)
    lim = np.where(ok, aitken, X[2])
    terms = {k: c for k, c in zip(keys, lim) if abs(c) > 1e-9 * max(last, 1e-300)}
    P = RealPolynomial.from_any(Polynomial(2, terms))
    two_m = run.entries[-1].extra["catlin"].expansion.two_m
    if P.degree() > two_m:
        raise DegenerateGeometryError("limit degree exceeds the declared type")
    scale = max(P.max_abs_coeff(), 1e-300)
    for (a, b), c in P.terms.items():
        if (sum(a) == 0 or sum(b) == 0) and abs(c) > 1e-8 * scale:
            raise DegenerateGeometryError("limit polynomial has harmonic terms")
    lap = P.diff_z(0).diff_zbar(0)
    g = np.linspace(-2, 2, 41)
    X1, Y1 = np.meshgrid(g, g)
    Z = X1 + 1j * Y1
    Z = Z[np.abs(Z) <= 2].ravel()
    pts = np.stack([Z, np.zeros_like(Z)], axis=-1)
    if np.min(np.real(lap(pts))) < -1e-8 * scale:
        raise DegenerateGeometryError("limit polynomial is not subharmonic")
    return P


def tau_exponent_fit(eps, tau):
    """Least-squares slope of log tau against log eps, with intercept."""
    x, y = np.log(np.asarray(eps)), np.log(np.asarray(tau))
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(slope), float(math.exp(icpt))


# ---------------------------------------------------------------------------
# convex finite type


@dataclass
class McNealFrame:
    q: np.ndarray
    eps: float
    map: PolynomialAutomorphism
    taus: np.ndarray
    points: np.ndarray
    directions: np.ndarray


def _line_radius(Dl, q, u, angles=64, refine=True):
    """Distance from q to the level set inside the complex line q + C u; (r, theta)."""
    from .invariant_metrics import _Constraints, _first_exit
    cons = _Constraints(Dl, 0.0)
    tmax = 2 * Dl.bounding_radius + float(np.linalg.norm(q))
    th = 2 * np.pi * np.arange(angles) / angles
    dirs = np.exp(1j * th)[:, None] * u[None, :]
    r = _first_exit(cons, q, dirs, tmax, iters=60)
    k = int(np.argmin(r))
    if not refine:
        return float(r[k]), float(th[k])
    h = 2 * np.pi / angles

    def f(t):
        return float(_first_exit(cons, q, (np.exp(1j * t) * u)[None, :], tmax, iters=70)[0])
    res = minimize_scalar(f, bounds=(th[k] - h, th[k] + h), method="bounded",
                          options={"xatol": 1e-10})
    if res.fun <= r[k]:
        return float(res.fun), float(res.x)
    return float(r[k]), float(th[k])


def _check_interval(Dl, q, d, r):
    """Leaving along q + t d, the set must not be re-entered (convexity)."""
    tmax = min(4 * r, 2 * Dl.bounding_radius)
    ts = np.linspace(r * 1.001, tmax, 64)
    vals = Dl.values(q[None, :] + ts[:, None] * d[None, :])
    if np.any(vals < -1e-9 * max(1.0, Dl.rho_scale)):
        raise ConvexityViolationError("line meets the level set in more than one interval")


def mcneal_frame(D, q, eps, starts=32, seed=0):
    q = np.asarray(q, dtype=complex)
    n = D.n
    level = float(D.rho.value(q)) + eps
    Dl = D.with_(rho=D.rho - level, base_point=q, class_tag="Generic",
                 name=f"{D.name}|level")
    bd = boundary_distance(Dl, q)
    dirs = [None] * n
    taus = np.zeros(n)
    pts = np.zeros((n, n), dtype=complex)
    taus[-1] = bd.distance
    dirs[-1] = (bd.foot - q) / bd.distance
    pts[-1] = bd.foot
    _check_interval(Dl, q, dirs[-1], taus[-1])
    rng = np.random.default_rng(seed)
    for k in range(n - 2, -1, -1):
        used = np.array([dirs[i] for i in range(k + 1, n)]).T
        # orthonormal basis of the complement of the chosen directions
        full, _ = np.linalg.qr(np.column_stack([used, np.eye(n, dtype=complex)]))
        comp = full[:, used.shape[1]:n]
        if comp.shape[1] == 1:
            cands = [comp[:, 0]]
        else:
            c = rng.normal(size=(starts, comp.shape[1])) + 1j * rng.normal(size=(starts, comp.shape[1]))
            c /= np.linalg.norm(c, axis=1, keepdims=True)
            cands = [comp @ x for x in c]
        best = (-1.0, None, 0.0)
        for u in cands:
            r, th = _line_radius(Dl, q, u, refine=False)
            if r > best[0]:
                best = (r, u, th)
        r, th = _line_radius(Dl, q, best[1])
        d = np.exp(1j * th) * best[1]
        _check_interval(Dl, q, d, r)
        dirs[k], taus[k], pts[k] = d, r, q + r * d
    E = np.array(dirs)
    gram = E.conj() @ E.T
    if np.max(np.abs(gram - np.eye(n))) > 1e-10:
        raise DegenerateGeometryError("extremal directions are not orthonormal")
    U = np.conj(E)
    UT = affine_automorphism(U, -U @ q)
    return McNealFrame(q, eps, UT, taus, pts, E)


def convex_scaled_domain(D, q, j=0, samples=1000, seed=0):
    """Lambda^{-1} o U o T applied to D, with the half-space envelope check."""
    if D.class_tag not in ("ConvexFiniteType", "StronglyPseudoconvex", "FiniteType2D"):
        raise PreconditionError("convex scaling needs a convex finite-type domain")
    q = np.asarray(q, dtype=complex)
    eps = -float(D.rho.value(q))
    if not eps > 0:
        raise PreconditionError("q must be interior")
    frame = mcneal_frame(D, q, eps)
    L = dilation(1.0 / frame.taus)
    composed = L.compose(frame.map)
    rho_j = composed.push_forward(D.rho) / eps
    n = D.n
    Dj = Domain(rho_j, D.class_tag, np.zeros(n), declared_type=D.declared_type,
                name=f"{D.name}|convex[{j}]")
    grads = []
    for k in range(n):
        e = np.zeros(n, dtype=complex)
        e[k] = 1
        grads.append(rho_j.gradient(e))
    envelope = [(k, grads[k]) for k in range(n)]
    from .invariant_metrics import _boundary_samples
    W = _boundary_samples(Dj, np.zeros(n, dtype=complex), samples, seed)
    worst = float(np.max(envelope_values(envelope, W) / (1 + np.linalg.norm(W, axis=1))))
    if worst > 1e-6:
        raise DegenerateGeometryError(f"envelope violated by {worst:.3e}")
    entry = ScalingEntry(j, q, q, {"eps": eps, "taus": frame.taus.tolist()}, composed, Dj,
                         composed(q), {"frame": frame, "envelope": envelope,
                                       "envelope_margin": worst})
    return entry


def envelope_values(envelope, Z):
    """max_k of the half-space functionals; <= 0 means inside every H_k."""
    Z = np.atleast_2d(Z)
    out = np.full(Z.shape[0], -np.inf)
    for k, g in envelope:
        val = (Z[:, k] - 1) * g[k] + Z[:, k + 1:] @ g[k + 1:]
        out = np.maximum(out, np.real(val))
    return out


# ---------------------------------------------------------------------------
# polyhedron corners


def _cayley_h(z):
    return 1j * (1 - z) / (1 + z)


def _cayley_h_inv(w):
    return (1j - w) / (1j + w)


@dataclass
class CornerMap:
    """Lambda = phi^{-1} o A o phi o F mapping a corner piece into the polydisc."""

    spec: PolyhedronSpec
    theta: np.ndarray
    tau: np.ndarray
    lam: np.ndarray
    zk: np.ndarray
    kind: str = "Cayley"

    def F(self, Z):
        return np.exp(1j * self.theta) * self.spec.values(Z)

    def __call__(self, Z):
        w = _cayley_h(self.F(np.asarray(Z, dtype=complex)))
        return _cayley_h_inv((w - self.tau) / self.lam)

    def target_values(self, W):
        """F-values of the preimage of W."""
        W = np.asarray(W, dtype=complex)
        s = _cayley_h(W) * self.lam + self.tau
        return _cayley_h_inv(s)

    def apply_inverse(self, W, iters=50):
        """Preimage by Newton on F(z) = target, started at z^k."""
        W = np.atleast_2d(np.asarray(W, dtype=complex))
        target = self.target_values(W) * np.exp(-1j * self.theta)
        out = np.empty_like(W)
        for i, t in enumerate(target):
            z = self.zk.copy()
            for _ in range(iters):
                r = self.spec.values(z) - t
                if np.linalg.norm(r) < 1e-15:
                    break
                z = z - np.linalg.solve(self.spec.jacobian(z), r)
            out[i] = z
        return out

    def roundtrip_error(self, count=100, seed=0, radius=0.9):
        rng = np.random.default_rng(seed)
        W = rng.uniform(-1, 1, size=(count, self.spec.n)) + 1j * rng.uniform(-1, 1, size=(count, self.spec.n))
        W *= radius / np.maximum(1, np.abs(W))
        back = self(self.apply_inverse(W))
        return float(np.max(np.abs(back - W)))


def polyhedron_corner_maps(P, zk):
    zk = np.asarray(zk, dtype=complex)
    f0 = P.values(P.reference_point)
    theta = -np.angle(f0)
    Fk = np.exp(1j * theta) * P.values(zk)
    if np.any(np.abs(1 + Fk) < 1e-12):
        raise PreconditionError("1 + F_l vanishes at z^k")
    w = _cayley_h(Fk)
    tau, lam = np.real(w), np.imag(w)
    if np.any(lam <= 0):
        raise PreconditionError("z^k lies outside the local piece of the polyhedron")
    cm = CornerMap(P, theta, tau, lam, zk)
    if np.max(np.abs(cm(zk))) > 1e-10:
        raise DegenerateGeometryError("corner map does not center z^k")
    return cm


def corner_exhaustion(cm, radius=0.9, per_axis=10):
    """Pull back a grid of the closed polydisc of given radius; all must land in P."""
    n = cm.spec.n
    r = np.linspace(0, radius, per_axis // 2 + 1)[1:]
    ang = 2 * np.pi * np.arange(per_axis) / per_axis
    ring = np.concatenate([[0], (r[:, None] * np.exp(1j * ang)[None, :]).ravel()])
    grids = np.meshgrid(*([ring] * n), indexing="ij")
    W = np.stack([g.ravel() for g in grids], axis=-1)
    Z = cm.apply_inverse(W)
    mods = np.abs(cm.spec.values(Z))
    return bool(np.all(mods < 1)), float(np.max(mods)), W.shape[0]


# ---------------------------------------------------------------------------
# Hausdorff diagnostics


def _project_to_boundary(rho, Z, iters=30):
    """Newton projection along the gradient onto {rho = 0}."""
    W = Z.copy()
    for _ in range(iters):
        g = np.conj(rho.gradient(W))  # real gradient direction in C^n
        gg = np.sum(np.abs(g) ** 2, axis=-1)
        v = rho.value(W)
        step = np.where(gg > 0, v / (2 * np.maximum(gg, 1e-300)), 0.0)
        W = W - step[:, None] * g
        if np.max(np.abs(v)) < 1e-13:
            break
    return W


def local_hausdorff(A, B, window, per_axis=9, rays=2000, seed=0):
    """Symmetric Hausdorff distance of the sublevel sets inside a window ball.

    Each set is sampled by the window grid plus the projections of the grid
    onto its boundary; samples outside the other set are projected onto the
    other boundary to measure their distance.  The sup runs over these
    samples, so the value is grid-resolution accurate but continuous in the
    data.  Returns (value, info).
    """
    center, radius = np.asarray(window[0], dtype=complex), float(window[1])
    if radius > max(A.bounding_radius, B.bounding_radius):
        raise PreconditionError("window exceeds the bounding radius")
    n = A.n
    g = np.linspace(-radius, radius, per_axis)
    pitch = float(g[1] - g[0])
    mesh = np.meshgrid(*([g] * (2 * n)), indexing="ij")
    X = np.stack([m.ravel() for m in mesh], axis=-1)
    X = X[np.linalg.norm(X, axis=1) <= radius]
    grid = center[None, :] + X[:, :n] + 1j * X[:, n:]

    from .domain_core import sphere_directions
    from .invariant_metrics import _Constraints, _first_exit
    dirs = sphere_directions(n, rays, seed)

    def samples(S):
        pts = [grid[S.values(grid) <= 0]]
        if S.values(center) < 0:
            t = _first_exit(_Constraints(S, 0.0), center, dirs, radius)
            hit = t < radius * (1 - 1e-12)
            pts.append(center[None, :] + t[hit, None] * dirs[hit])
        for q in S.pieces:
            proj = _project_to_boundary(q, grid)
            ok = (np.linalg.norm(proj - center, axis=1) <= radius) & (S.values(proj) <= 1e-12)
            pts.append(proj[ok])
        return np.concatenate(pts)

    SA, SB = samples(A), samples(B)
    if SA.shape[0] == 0 and SB.shape[0] == 0:
        return 0.0, {"pitch": pitch, "empty": True}
    if SA.shape[0] == 0 or SB.shape[0] == 0:
        return math.inf, {"pitch": pitch, "empty": False, "one_sided": True}

    def one_side(P, dst):
        out = P[dst.values(P) > 1e-12]
        if out.shape[0] == 0:
            return 0.0
        best = np.full(out.shape[0], np.inf)
        for q in dst.pieces:
            proj = _project_to_boundary(q, out)
            ok = dst.values(proj) <= 1e-9
            dist = np.where(ok, np.linalg.norm(proj - out, axis=1), np.inf)
            best = np.minimum(best, dist)
        return float(np.max(best))

    h = max(one_side(SA, B), one_side(SB, A))
    return h, {"pitch": pitch, "empty": False}
