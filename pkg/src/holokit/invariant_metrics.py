"""Kobayashi and Caratheodory metrics: closed forms and numerical bounds.

The numerical Kobayashi metric is an extremal-disc problem: among polynomial
discs f with f(0) = z and f'(0) = alpha * v that stay inside the domain,
maximize alpha.  Any admissible disc certifies F^K(z, v) <= |v| / alpha, so
every number produced here is labelled with the direction it bounds.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize

from .domain_core import Domain, boundary_distance, outward_normal, sphere_directions
from .errors import DegenerateGeometryError, PreconditionError

EXACT, UPPER, LOWER = "Exact", "UpperBound", "LowerBound"


@dataclass(frozen=True)
class DiscConfig:
    N: int = 8
    M: int = 256
    M_opt: int = 64
    eta: float = 1e-6
    iterations: int = 200
    seed: int = 0


@dataclass(frozen=True)
class PathConfig:
    control_points: int = 8
    sweeps: int = 8
    gl_nodes: int = 3
    quad_tol: float | None = 1e-3
    surrogate_angles: int = 16
    modes: int = 2
    mode_evals: int = 30
    ray_ratio: float = 2.0
    disc: DiscConfig = field(default_factory=DiscConfig)


@dataclass
class AnalyticDisc:
    """f(lam) = sum_k coeffs[k] lam^k."""

    coeffs: np.ndarray
    eta: float
    certification: str = "boundary"

    @property
    def N(self):
        return self.coeffs.shape[0] - 1

    def __call__(self, lam):
        lam = np.asarray(lam, dtype=complex)
        powers = lam[..., None] ** np.arange(self.N + 1)
        return powers @ self.coeffs

    def admissible(self, D, M=256):
        lam = np.exp(2j * np.pi * np.arange(M) / M)
        if not D.psh:
            lam = np.concatenate([r * lam for r in (0.5, 0.75, 0.9, 1.0)])
        pts = self(np.concatenate([[0.0], lam]))
        ok = np.all(D.values(pts) <= -self.eta)
        if not D.contained:
            ok = ok and np.all(np.sum(np.abs(pts) ** 2, axis=-1) <= D.bounding_radius ** 2)
        return bool(ok)


@dataclass
class MetricEstimate:
    value: float
    bound_kind: str
    witness: object = None
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


@dataclass
class DistanceEstimate:
    value: float
    bound_kind: str
    path: np.ndarray = None
    samples: list = field(default_factory=list)
    config: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# closed forms


def cayley_to_ball(z):
    """Siegel domain {2 Re z_n + |'z|^2 < 0} -> unit ball, ('0,-1) -> 0."""
    z = np.asarray(z, dtype=complex)
    den = 1 - z[..., -1]
    w = np.empty_like(z)
    w[..., :-1] = math.sqrt(2) * z[..., :-1] / den[..., None]
    w[..., -1] = (1 + z[..., -1]) / den
    return w


def cayley_from_ball(w):
    w = np.asarray(w, dtype=complex)
    den = 1 + w[..., -1]
    z = np.empty_like(w)
    z[..., -1] = (w[..., -1] - 1) / den
    z[..., :-1] = w[..., :-1] * (1 - z[..., -1])[..., None] / math.sqrt(2)
    return z


def cayley_to_ball_jacobian(z):
    z = np.asarray(z, dtype=complex)
    n = z.shape[0]
    den = 1 - z[-1]
    J = np.zeros((n, n), dtype=complex)
    for i in range(n - 1):
        J[i, i] = math.sqrt(2) / den
        J[i, -1] = math.sqrt(2) * z[i] / den ** 2
    J[-1, -1] = 2 / den ** 2
    return J


def halfplane_to_disc(z):
    """{Re z < 0} -> unit disc, -1 -> 0."""
    return (1 + z) / (1 - z)


def _check_inside(ok, kind):
    if not ok:
        raise PreconditionError(f"point is not strictly inside the {kind}")


def disc_metric(z, v):
    return abs(v) / (1 - abs(z) ** 2)


def ball_metric(z, v):
    z, v = np.asarray(z, dtype=complex), np.asarray(v, dtype=complex)
    s = 1 - np.vdot(z, z).real
    ip = abs(np.vdot(z, v))
    return math.sqrt(np.vdot(v, v).real / s + ip ** 2 / s ** 2)


def closed_form_inf_metric(kind, z, v):
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    v = np.atleast_1d(np.asarray(v, dtype=complex))
    if kind == "disc":
        _check_inside(abs(z[0]) < 1, kind)
        val = disc_metric(z[0], v[0])
    elif kind == "polydisc":
        _check_inside(np.all(np.abs(z) < 1), kind)
        val = float(np.max(np.abs(v) / (1 - np.abs(z) ** 2)))
    elif kind == "ball":
        _check_inside(np.vdot(z, z).real < 1, kind)
        val = ball_metric(z, v)
    elif kind == "halfplane":
        _check_inside(z[0].real < 0, kind)
        val = abs(v[0]) / (2 * abs(z[0].real))
    elif kind == "siegel":
        _check_inside(2 * z[-1].real + np.vdot(z[:-1], z[:-1]).real < 0, kind)
        val = ball_metric(cayley_to_ball(z), cayley_to_ball_jacobian(z) @ v)
    else:
        raise PreconditionError(f"no closed form for {kind!r}")
    return MetricEstimate(float(val), EXACT, witness=kind)


def _atanh_mobius(a, b):
    """tanh^{-1} |(a - b) / (1 - conj(b) a)| for points of the unit disc."""
    r = abs((a - b) / (1 - np.conj(b) * a))
    return math.atanh(min(r, 1.0))


def ball_distance(a, b):
    a, b = np.asarray(a, dtype=complex), np.asarray(b, dtype=complex)
    num = (1 - np.vdot(a, a).real) * (1 - np.vdot(b, b).real)
    den = abs(1 - np.vdot(a, b)) ** 2
    r2 = max(0.0, 1 - num / den)
    return math.atanh(min(math.sqrt(r2), 1.0))


def closed_form_distance(kind, p, q):
    p = np.atleast_1d(np.asarray(p, dtype=complex))
    q = np.atleast_1d(np.asarray(q, dtype=complex))
    if kind == "disc":
        _check_inside(abs(p[0]) < 1 and abs(q[0]) < 1, kind)
        val = _atanh_mobius(p[0], q[0])
    elif kind == "polydisc":
        _check_inside(np.all(np.abs(p) < 1) and np.all(np.abs(q) < 1), kind)
        val = max(_atanh_mobius(a, b) for a, b in zip(p, q))
    elif kind == "ball":
        _check_inside(np.vdot(p, p).real < 1 and np.vdot(q, q).real < 1, kind)
        val = ball_distance(p, q)
    elif kind == "halfplane":
        _check_inside(p[0].real < 0 and q[0].real < 0, kind)
        val = _atanh_mobius(halfplane_to_disc(p[0]), halfplane_to_disc(q[0]))
    elif kind == "siegel":
        for x in (p, q):
            _check_inside(2 * x[-1].real + np.vdot(x[:-1], x[:-1]).real < 0, kind)
        val = ball_distance(cayley_to_ball(p), cayley_to_ball(q))
    else:
        raise PreconditionError(f"no closed form for {kind!r}")
    return DistanceEstimate(float(val), EXACT, path=np.array([p, q]))


# ---------------------------------------------------------------------------
# extremal discs


class _Constraints:
    """Vectorized admissibility constraints c(w) <= 0 for a domain with margin eta."""

    def __init__(self, D, eta):
        self.D = D
        self.eta = eta
        self.pieces = D.pieces
        self.R2 = None if D.contained else D.bounding_radius ** 2

    def worst(self, W):
        """max over constraints at each point, shape (...)."""
        v = self.D.values(W) + self.eta
        if self.R2 is not None:
            v = np.maximum(v, np.sum(np.abs(W) ** 2, axis=-1) - self.R2)
        return v

    def all_values_and_grads(self, W):
        """Per-constraint values (K, P) and Wirtinger gradients (K, P, n)."""
        vals, grads = [], []
        for q in self.pieces:
            vals.append(q.value(W) + self.eta)
            grads.append(q.gradient(W))
        if self.R2 is not None:
            vals.append(np.sum(np.abs(W) ** 2, axis=-1) - self.R2)
            grads.append(np.conj(W))
        return np.array(vals), np.array(grads)


def _first_exit(cons, z, dirs, t_max, grid=120, iters=42):
    """Largest feasible t (inside side) before the first crossing along each ray."""
    ts = t_max * np.geomspace(1e-12, 1.0, grid)
    pts = z[None, None, :] + ts[None, :, None] * dirs[:, None, :]
    bad = cons.worst(pts) > 0
    has = bad.any(axis=1)
    k = np.argmax(bad, axis=1)
    lo = np.where(k > 0, ts[np.maximum(k - 1, 0)], 0.0)
    hi = ts[k]
    lo = np.where(has, lo, t_max)
    hi = np.where(has, hi, t_max)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        ok = cons.worst(z[None, :] + mid[:, None] * dirs) <= 0
        lo = np.where(ok, mid, lo)
        hi = np.where(ok, hi, mid)
    return lo


def _t_max(D, z):
    return 2.0 * D.bounding_radius + float(np.linalg.norm(z))


def linear_disc_radius(D, z, vhat, eta, angles=64, cons=None):
    """Largest t with z + t*lam*vhat admissible for |lam| <= 1 (first-exit sense)."""
    cons = cons or _Constraints(D, eta)
    th = np.exp(2j * np.pi * np.arange(angles) / angles)
    dirs = th[:, None] * vhat[None, :]
    return float(np.min(_first_exit(cons, z, dirs, _t_max(D, z))))


def _frame(vhat):
    n = vhat.shape[0]
    M = np.eye(n, dtype=complex)
    M = np.column_stack([vhat, M])
    Q, _ = np.linalg.qr(M)
    Q = Q[:, :n]
    # fix the phase so the first column is exactly vhat
    Q[:, 0] = vhat
    return Q


class _DiscProblem:
    def __init__(self, D, z, vhat, cfg, eta):
        self.D, self.z, self.vhat, self.cfg, self.eta = D, z, vhat, cfg, eta
        self.n = D.n
        self.cons = _Constraints(D, eta)
        # the optimizer sees a subsample of the circle, certification sees all M points
        self.lam, self.Lam = self._circle(cfg.M)
        self.lam_o, self.Lam_o = self._circle(min(cfg.M, cfg.M_opt or cfg.M))
        E = _frame(vhat)
        s = np.array([linear_disc_radius(D, z, E[:, i], eta, cons=self.cons)
                      for i in range(self.n)])
        s = np.maximum(s, 1e-300)
        self.s = s
        self.W = (s[:, None] * E.T)  # row i: s_i * E[:, i]
        self.nu = (cfg.N - 1) * self.n

    def _circle(self, m):
        lam = np.exp(2j * np.pi * np.arange(m) / m)
        if not self.D.psh:
            lam = np.concatenate([r * lam for r in (0.5, 0.75, 0.9, 1.0)])
        return lam, lam[:, None] ** np.arange(2, self.cfg.N + 1)[None, :]

    def unpack(self, x):
        a = x[0]
        U = (x[1:1 + self.nu] + 1j * x[1 + self.nu:]).reshape(self.cfg.N - 1, self.n)
        return a, U

    def points(self, x, opt=False):
        a, U = self.unpack(x)
        C = U @ self.W
        lam, Lam = (self.lam_o, self.Lam_o) if opt else (self.lam, self.Lam)
        return self.z[None, :] + (a * self.s[0]) * lam[:, None] * self.vhat[None, :] + Lam @ C

    def coeffs(self, x, scale=1.0):
        a, U = self.unpack(x)
        C = U @ self.W
        out = np.zeros((self.cfg.N + 1, self.n), dtype=complex)
        out[0] = self.z
        out[1] = scale * a * self.s[0] * self.vhat
        out[2:] = scale * C
        return out

    def con(self, x):
        vals, _ = self.cons.all_values_and_grads(self.points(x, opt=True))
        return -vals.reshape(-1)

    def con_jac(self, x):
        W = self.points(x, opt=True)
        _, G = self.cons.all_values_and_grads(W)  # (K, P, n)
        ga = 2 * np.real(self.s[0] * self.lam_o[None, :] * (G @ self.vhat))  # (K, P)
        H = G @ self.W.T  # (K, P, n)
        prod = self.Lam_o[None, :, :, None] * H[:, :, None, :]  # (K, P, N-1, n)
        K, P = H.shape[:2]
        gre = 2 * np.real(prod).reshape(K, P, -1)
        gim = -2 * np.imag(prod).reshape(K, P, -1)
        J = np.concatenate([ga[..., None], gre, gim], axis=-1)
        return -J.reshape(K * P, -1)

    def certify(self, x):
        """Largest t in [0, 1] with the scaled disc z + t (f - z) admissible."""
        F = self.points(x)
        dF = F - self.z
        if np.max(self.cons.worst(F)) <= 0:
            return 1.0
        lo, hi = 0.0, 1.0
        for _ in range(42):
            mid = 0.5 * (lo + hi)
            if np.max(self.cons.worst(self.z + mid * dF)) <= 0:
                lo = mid
            else:
                hi = mid
        return lo

    def solve(self, warm=None):
        dim = 1 + 2 * self.nu
        x_lin = np.zeros(dim)
        x_lin[0] = 1.0
        best_alpha = self.s[0] * self.certify(x_lin)
        best_x, best_t = x_lin, self.certify(x_lin)
        x0 = x_lin
        if warm is not None and np.shape(warm) == (dim,) and np.all(np.isfinite(warm)):
            x0 = np.asarray(warm, dtype=float)
        if self.cfg.iterations > 0 and self.cfg.N >= 2:
            bounds = [(0.0, 50.0)] + [(-1e3, 1e3)] * (2 * self.nu)
            res = minimize(lambda x: -x[0], x0, jac=lambda x: np.eye(1, dim, 0).ravel() * -1.0,
                           method="SLSQP", bounds=bounds,
                           constraints=[{"type": "ineq", "fun": self.con, "jac": self.con_jac}],
                           options={"maxiter": self.cfg.iterations, "ftol": 1e-13})
            for cand in (res.x,):
                if np.all(np.isfinite(cand)):
                    t = self.certify(cand)
                    alpha = t * cand[0] * self.s[0]
                    if alpha > best_alpha:
                        best_alpha, best_x, best_t = alpha, cand, t
        return best_alpha, best_x, best_t


def _eta_abs(D, cfg):
    return cfg.eta * max(1.0, D.rho_scale)


def kobayashi_inf_estimate(D, z, v, cfg=None, warm=None):
    """Upper bound for F^K_D(z, v) from the best admissible polynomial disc."""
    cfg = cfg or DiscConfig()
    z = np.asarray(z, dtype=complex)
    v = np.asarray(v, dtype=complex)
    echo = asdict(cfg)
    nv = float(np.linalg.norm(v))
    eta = _eta_abs(D, cfg)
    if nv == 0:
        coeffs = np.zeros((cfg.N + 1, D.n), dtype=complex)
        coeffs[0] = z
        return MetricEstimate(0.0, UPPER, AnalyticDisc(coeffs, eta), echo)
    if not D.values(z) < -eta:
        raise DegenerateGeometryError("point too close to the boundary for the safety margin")
    prob = _DiscProblem(D, z, v / nv, cfg, eta)
    alpha, x, t = prob.solve(warm)
    if not alpha > 0:
        raise DegenerateGeometryError("no admissible disc found")
    disc = AnalyticDisc(prob.coeffs(x, t), eta, "boundary" if D.psh else "radial")
    return MetricEstimate(nv / alpha, UPPER, disc, echo,
                          extra={"x": x, "alpha": alpha, "linear_radius": prob.s[0]})


def _slice_radii(worst, Z, dirs, t_max, iters, grid=48):
    """First-exit radii along dirs (P, A, n) from Z (P, n) for a constraint function."""
    ts = t_max * np.geomspace(1e-9, 1.0, grid)
    pts = Z[:, None, None, :] + ts[None, None, :, None] * dirs[:, :, None, :]
    bad = worst(pts) > 0  # (P, A, T)
    has = bad.any(axis=2)
    k = np.argmax(bad, axis=2)
    lo = np.where(k > 0, ts[np.maximum(k - 1, 0)], 0.0)
    hi = ts[k]
    lo = np.where(has, lo, t_max)
    hi = np.where(has, hi, t_max)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        ok = worst(Z[:, None, :] + mid[..., None] * dirs) <= 0
        lo = np.where(ok, mid, lo)
        hi = np.where(ok, hi, mid)
    return lo


def _unit_vectors(Z, V):
    Z = np.atleast_2d(np.asarray(Z, dtype=complex))
    V = np.atleast_2d(np.asarray(V, dtype=complex))
    nv = np.linalg.norm(V, axis=1)
    return Z, nv, V / np.where(nv > 0, nv, 1)[:, None]


def linear_disc_metric(D, Z, V, eta, angles=32, iters=40):
    """Cheap upper bound |v| / r_lin(z, v) for many (z, v) pairs at once."""
    Z, nv, vh = _unit_vectors(Z, V)
    cons = _Constraints(D, eta)
    th = np.exp(2j * np.pi * np.arange(angles) / angles)
    dirs = th[None, :, None] * vh[:, None, :]  # (P, A, n)
    t_max = 2.0 * D.bounding_radius + float(np.max(np.linalg.norm(Z, axis=1)))
    r = _slice_radii(cons.worst, Z, dirs, t_max, iters).min(axis=1)
    inside = cons.worst(Z) <= 0
    with np.errstate(divide="ignore"):
        out = np.where(inside & (r > 0), nv / np.maximum(r, 1e-300), np.inf)
    return np.where(nv == 0, 0.0, out)


def _round_disc_metric(lo, th):
    """min over round discs D(c, R) inside the sampled slice of R / (R^2 - |c|^2)."""
    B = lo * th[None, :]  # (P, A) star-shaped slice boundary in the lambda plane
    # algebraic circle fit |b|^2 = 2 Re(conj(c) b) + k, exact for round slices
    A = np.stack([2 * B.real, 2 * B.imag, np.ones_like(B.real)], axis=-1)  # (P, A, 3)
    rhs = np.abs(B) ** 2
    AtA = np.einsum("pai,paj->pij", A, A) + 1e-14 * np.eye(3)
    sol = np.linalg.solve(AtA, np.einsum("pai,pa->pi", A, rhs)[..., None])[..., 0]
    fit = (sol[:, 0] + 1j * sol[:, 1])[:, None]
    C = np.concatenate([fit, B.mean(axis=1, keepdims=True)]
                       + [f * B for f in (0.25, 0.5, 0.75)], axis=1)  # (P, K)
    # distance from each center to the boundary polygon
    a, b = B[:, None, :], np.roll(B, -1, axis=1)[:, None, :]
    c = C[:, :, None]
    seg = b - a
    L2 = np.maximum(np.abs(seg) ** 2, 1e-300)
    s = np.clip(np.real((c - a) * np.conj(seg)) / L2, 0.0, 1.0)
    R = np.min(np.abs(c - (a + s * seg)), axis=2)  # (P, K)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(np.abs(C) < R, R / (R ** 2 - np.abs(C) ** 2), np.inf)
    lin = 1.0 / np.maximum(lo.min(axis=1), 1e-300)
    return np.minimum(np.min(val, axis=1), lin)


def slice_disc_metric(D, Z, V, eta, angles=16, iters=16):
    """Surrogate for F^K used to shape paths, not a bound.

    For each defining piece the slice z + C v of {piece < 0} is sampled and
    the best off-center round disc inside it gives a Poincare value; the
    largest value over pieces is returned.  This is exact for the ball and
    for products of discs.
    """
    Z, nv, vh = _unit_vectors(Z, V)
    th = np.exp(2j * np.pi * np.arange(angles) / angles)
    dirs = th[None, :, None] * vh[:, None, :]
    t_max = 2.0 * D.bounding_radius + float(np.max(np.linalg.norm(Z, axis=1)))
    R2 = None if D.contained else D.bounding_radius ** 2
    best = np.zeros(Z.shape[0])
    for q in D.pieces:
        def worst(W, q=q):
            v = q.value(W) + eta
            if R2 is not None:
                v = np.maximum(v, np.sum(np.abs(W) ** 2, axis=-1) - R2)
            return v
        lo = _slice_radii(worst, Z, dirs, t_max, iters, grid=32)
        best = np.maximum(best, _round_disc_metric(lo, th))
    inside = _Constraints(D, eta).worst(Z) <= 0
    out = np.where(inside, nv * best, np.inf)
    return np.where(nv == 0, 0.0, out)


# ---------------------------------------------------------------------------
# Caratheodory lower bound


def _boundary_samples(D, z, count, seed):
    dirs = sphere_directions(D.n, count, seed)
    cons = _Constraints(D, 0.0)
    t = _first_exit(cons, z, dirs, _t_max(D, z))
    return z[None, :] + t[:, None] * dirs


class _ball_mobius:
    """w -> (a - P w - s Q w) / (1 - <w, a>), the involution of the unit ball swapping 0 and a."""

    def __init__(self, a):
        self.a = np.asarray(a, dtype=complex)
        self.aa = float(np.vdot(self.a, self.a).real)
        self.s = math.sqrt(1 - self.aa)

    def _num(self, W, lin=False):
        a = self.a
        P = (W @ np.conj(a))[..., None] / self.aa * a
        out = -P - self.s * (W - P)
        return out if lin else a + out

    def __call__(self, W):
        W = np.asarray(W, dtype=complex)
        return self._num(W) / (1 - W @ np.conj(self.a))[..., None]

    def derivative(self, z, v):
        den = 1 - z @ np.conj(self.a)
        dden = -(v @ np.conj(self.a))
        return (self._num(v[None, :], lin=True)[0] * den - self._num(z[None, :])[0] * dden) / den ** 2


def _refine_sup(D, f, w, steps=30):
    """Local ascent of |f| along the boundary starting from w (crude but monotone)."""
    best_w, best = w, abs(f(w))
    h = 1e-2
    rng = np.random.default_rng(0)
    for _ in range(steps):
        improved = False
        for _k in range(4 * D.n):
            d = rng.normal(size=D.n) + 1j * rng.normal(size=D.n)
            cand = best_w + h * d / np.linalg.norm(d)
            # push back to the boundary along the ray from the base point
            c0 = D.base_point
            u = cand - c0
            nu = np.linalg.norm(u)
            t = _first_exit(_Constraints(D, 0.0), c0, (u / nu)[None, :], _t_max(D, c0))[0]
            cand = c0 + t * u / nu
            val = abs(f(cand))
            if val > best:
                best_w, best, improved = cand, val, True
        if not improved:
            h *= 0.5
            if h < 1e-6:
                break
    return best


def caratheodory_inf_lower(D, z, v, cfg=None, candidates=12, samples=2000):
    """Lower bound for F^C_D(z, v) from explicit maps D -> unit disc.

    Each candidate g is normalized by 1.01 times its sampled boundary sup so
    that it maps D into the disc; the bound is |dg(z) v| / (1 - |g(z)|^2).
    For unbounded domains the sup is taken over D intersected with the
    bounding ball and the result is flagged.
    """
    cfg = cfg or DiscConfig()
    z = np.asarray(z, dtype=complex)
    v = np.asarray(v, dtype=complex)
    echo = asdict(cfg)
    if np.linalg.norm(v) == 0:
        return MetricEstimate(0.0, LOWER, None, echo, {"vacuous": True})
    if not D.values(z) < 0:
        raise PreconditionError("point is not interior")
    rng = np.random.default_rng(cfg.seed)
    W = _boundary_samples(D, z, samples, cfg.seed)
    dirs = [np.conj(v) / np.linalg.norm(v)]
    try:
        foot = boundary_distance(D, z).foot
        dirs.append(np.conj(outward_normal(D.active_piece(foot), foot)))
    except Exception:
        foot = None
    for _ in range(candidates):
        u = rng.normal(size=D.n) + 1j * rng.normal(size=D.n)
        dirs.append(u / np.linalg.norm(u))
    best, best_desc = 0.0, None
    for k, u in enumerate(dirs):
        fz = u @ z
        for quad in (0.0, 0.15):
            def f(w, u=u, fz=fz, quad=quad):
                lin = np.asarray(w) @ u - fz
                return lin + quad * lin ** 2
            S = np.max(np.abs(f(W)))
            if not np.isfinite(S) or S <= 0:
                continue
            S = max(S, _refine_sup(D, f, W[int(np.argmax(np.abs(f(W))))], steps=8)) if k < 2 else S
            val = abs(u @ v) / (1.01 * S)
            if val > best:
                best, best_desc = val, {"kind": "polynomial", "u": u, "quad": quad, "sup": S}
    # components of ball automorphisms centered near z, rescaled so the pole
    # stays off the sampled boundary
    nz = np.linalg.norm(z)
    if nz > 0:
        zh = z / nz
        m = float(np.max(np.abs(W @ np.conj(zh))))
        gap = max(m - nz, 1e-12)
        for shrink in (0.5, 1.0, 2.0, 4.0):
            a = zh * max(m - shrink * gap, 0.0) / m ** 2
            if not 1e-9 < np.linalg.norm(a) < 1:
                continue
            mob = _ball_mobius(a)
            phi_z, dphi = mob(z[None, :])[0], mob.derivative(z, v)
            for e in (dphi, phi_z):
                ne = np.linalg.norm(e)
                if ne == 0:
                    continue
                e = np.conj(e / ne)
                f = lambda w, e=e, mob=mob: mob(np.atleast_2d(w)) @ e
                vals = np.abs(f(W))
                S = float(np.max(vals))
                if not np.isfinite(S) or S <= 0:
                    continue
                S = max(S, _refine_sup(D, lambda w: f(w)[0], W[int(np.argmax(vals))], steps=8))
                g0 = (phi_z @ e) / (1.01 * S)
                if abs(g0) < 1:
                    val = abs(dphi @ e) / (1.01 * S) / (1 - abs(g0) ** 2)
                    if val > best:
                        best, best_desc = val, {"kind": "mobius", "a": a, "sup": S}
    if foot is not None:
        from .boundary_estimates import levi_polynomial
        L = levi_polynomial(D, foot)
        for sigma in (1.0, -1.0):
            vals = np.real(sigma * L(W))
            if np.max(vals) > 1e-9:
                continue
            S = float(np.max(np.exp(vals)))
            g0 = np.exp(sigma * L(z)) / (1.01 * S)
            dL = sum(L.diff_z(i)(z) * v[i] for i in range(D.n))
            dg = sigma * np.exp(sigma * L(z)) * dL / (1.01 * S)
            if abs(g0) < 1:
                val = abs(dg) / (1 - abs(g0) ** 2)
                if val > best:
                    best, best_desc = val, {"kind": "peak", "sigma": sigma, "sup": S}
    return MetricEstimate(float(best), LOWER, best_desc, echo,
                          {"vacuous": best == 0.0, "restricted_to_bounding_ball": not D.contained})


# ---------------------------------------------------------------------------
# distances along polylines

_GL = {k: np.polynomial.legendre.leggauss(k) for k in range(1, 9)}


def depth_proxy(D, Z):
    """First-order distance to the boundary, -q / |grad q|, minimized over pieces."""
    Z = np.atleast_2d(Z)
    out = np.full(Z.shape[0], np.inf)
    for q in D.pieces:
        val = q.value(Z)
        g = np.linalg.norm(q.gradient(Z), axis=-1) * 2
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(g > 0, -val / g, np.inf)
        out = np.minimum(out, d)
    out = np.minimum(out, D.bounding_radius)
    return out


def _graded_pieces(D, a, b, ratio=2.0, max_depth=40):
    """Split [0, 1] so the depth proxy varies by at most `ratio` on each piece."""
    out = []
    stack = [(0.0, 1.0, 0)]
    while stack:
        t0, t1, lev = stack.pop()
        pts = np.array([a + t * (b - a) for t in (t0, 0.5 * (t0 + t1), t1)])
        d = depth_proxy(D, pts)
        if np.any(d <= 0):
            lo, hi = d.min(), d.max()
        else:
            lo, hi = d.min(), d.max()
        if lev < max_depth and (lo <= 0 or hi / lo > ratio):
            tm = 0.5 * (t0 + t1)
            stack.append((tm, t1, lev + 1))
            stack.append((t0, tm, lev + 1))
        else:
            out.append((t0, t1))
    out.sort()
    return out


def _polyline_nodes(D, path, gl):
    """Quadrature nodes/weights for the surrogate length: (X, V, w)."""
    xg, wg = _GL[gl]
    X, V, Wt = [], [], []
    for a, b in zip(path[:-1], path[1:]):
        for t0, t1 in _graded_pieces(D, a, b):
            h = t1 - t0
            ts = t0 + 0.5 * h * (xg + 1)
            X.append(a[None, :] + ts[:, None] * (b - a)[None, :])
            V.append(np.repeat((b - a)[None, :], gl, axis=0))
            Wt.append(0.5 * h * wg)
    return np.concatenate(X), np.concatenate(V), np.concatenate(Wt)


def _surrogate_length(D, path, eta, cfg):
    if np.any(D.values(path) >= -eta):
        return np.inf
    X, V, w = _polyline_nodes(D, path, cfg.gl_nodes)
    if np.any(D.values(X) >= -eta):
        return np.inf
    F = slice_disc_metric(D, X, V, eta, cfg.surrogate_angles)
    return float(np.sum(w * F))


def _local_frame(D, x):
    q = D.active_piece(x)
    g = q.gradient(x)
    if np.linalg.norm(g) == 0:
        return np.eye(D.n, dtype=complex)
    return _frame(np.conj(g) / np.linalg.norm(g))


def _mode_search(D, path, eta, cfg, ts, L):
    """Nelder-Mead over sin(k pi t) deformations; moves all control points at once.

    Coordinated moves matter where the metric is a max of several terms and
    single-point moves stall on the ridge.
    """
    n = D.n
    m = cfg.modes
    S = np.array([np.sin((k + 1) * np.pi * ts) for k in range(m)]).T  # (K+2, m)

    def unpack(x):
        c = (x[:m * n] + 1j * x[m * n:]).reshape(m, n)
        return path + S @ c

    def f(x):
        return _surrogate_length(D, unpack(x), eta, cfg)

    dim = 2 * m * n
    simplex = np.vstack([np.zeros(dim), 0.1 * L * np.eye(dim)])
    res = minimize(f, np.zeros(dim), method="Nelder-Mead",
                   options={"maxfev": cfg.mode_evals * dim, "initial_simplex": simplex,
                            "xatol": 1e-6 * L, "fatol": 1e-9})
    base = f(np.zeros(dim))
    if np.isfinite(res.fun) and res.fun < base:
        return unpack(res.x), float(res.fun)
    return path, base


def _optimize_path(D, p, q, cfg, eta):
    K = cfg.control_points
    ts = np.linspace(0, 1, K + 2)
    straight = p[None, :] + ts[:, None] * (q - p)[None, :]
    L = float(np.linalg.norm(q - p))
    best = straight
    best_len = _surrogate_length(D, straight, eta, cfg)
    if K == 0:
        return best, best_len
    mid = 0.5 * (p + q)
    try:
        inward = -outward_normal(D.active_piece(mid), mid)
    except PreconditionError:
        inward = None
    if inward is not None:
        tent = 4 * ts * (1 - ts)
        for beta in (0.125, 0.25, 0.5, 1.0, 2.0):
            cand = straight + beta * L * tent[:, None] * inward[None, :]
            ln = _surrogate_length(D, cand, eta, cfg)
            if ln < best_len:
                best, best_len = cand, ln
    if cfg.modes > 0 and np.isfinite(best_len):
        best, best_len = _mode_search(D, best, eta, cfg, ts, L)
    path = best.copy()
    step = np.full(K + 2, 0.5)
    for _sweep in range(cfg.sweeps):
        improved = False
        for k in range(1, K + 1):
            E = _local_frame(D, path[k])
            depth = float(depth_proxy(D, path[k][None, :])[0])
            scale = max(min(depth, L), 1e-12)
            old = _surrogate_length(D, path[k - 1:k + 2], eta, cfg)
            for j in range(D.n):
                for ph in (1.0, 1j):
                    d = ph * E[:, j]
                    for sgn in (1.0, -1.0):
                        h = step[k] * scale
                        while True:
                            trial = path.copy()
                            trial[k] = path[k] + sgn * h * d
                            new = _surrogate_length(D, trial[k - 1:k + 2], eta, cfg)
                            if new < old - 1e-12 * max(1.0, old):
                                path, old = trial, new
                                improved = True
                                h *= 2.0
                            else:
                                break
        if not improved:
            step *= 0.5
            if step.max() < 1e-3:
                break
    return path, _surrogate_length(D, path, eta, cfg)


def _adaptive_segment(D, a, b, cfg, eta, state):
    """Adaptive Gauss-Legendre of F^K along [a, b]; returns (integral, samples)."""
    xg, wg = _GL[cfg.gl_nodes]
    vec = b - a
    samples = []

    def rule(t0, t1):
        h = t1 - t0
        ts = t0 + 0.5 * h * (xg + 1)
        vals = []
        for t in ts:
            x = a + t * vec
            est = kobayashi_inf_estimate(D, x, vec, cfg.disc, warm=state.get("warm"))
            state["warm"] = est.extra.get("x")
            state["evals"] = state.get("evals", 0) + 1
            vals.append(est.value)
            samples.append((float(t), est.value))
        return 0.5 * h * float(np.dot(wg, vals))

    total = 0.0
    for t0, t1 in _graded_pieces(D, a, b):
        if cfg.quad_tol is None:
            total += rule(t0, t1)
            continue
        stack = [(t0, t1, rule(t0, t1), 0)]
        while stack:
            s0, s1, coarse, lev = stack.pop()
            sm = 0.5 * (s0 + s1)
            left, right = rule(s0, sm), rule(sm, s1)
            fine = left + right
            if abs(fine - coarse) <= cfg.quad_tol * abs(fine) or lev >= 12:
                total += fine
            else:
                stack.append((sm, s1, right, lev + 1))
                stack.append((s0, sm, left, lev + 1))
    samples.sort()
    return total, samples


def path_length(D, path, cfg=None):
    cfg = cfg or PathConfig()
    eta = _eta_abs(D, cfg.disc)
    state = {}
    total, per = 0.0, []
    for a, b in zip(path[:-1], path[1:]):
        val, samples = _adaptive_segment(D, a, b, cfg, eta, state)
        total += val
        per.append(samples)
    return total, per, state.get("evals", 0)


def kobayashi_distance_estimate(D, p, q, cfg=None):
    """Upper bound for d_D(p, q): F^K-length of an optimized polyline."""
    cfg = cfg or PathConfig()
    p = np.asarray(p, dtype=complex)
    q = np.asarray(q, dtype=complex)
    echo = asdict(cfg)
    if np.allclose(p, q, rtol=0, atol=0):
        return DistanceEstimate(0.0, UPPER, np.array([p, q]), [], echo)
    eta = _eta_abs(D, cfg.disc)
    for x in (p, q):
        if not D.values(x) < -eta:
            raise PreconditionError("endpoints must be interior")
    # canonical orientation makes d(p, q) and d(q, p) identical
    flip = tuple(np.concatenate([p.real, p.imag])) > tuple(np.concatenate([q.real, q.imag]))
    a, b = (q, p) if flip else (p, q)
    path, _ = _optimize_path(D, a, b, cfg, eta)
    total, per, evals = path_length(D, path, cfg)
    if flip:
        path = path[::-1]
        per = [[(1 - t, f) for t, f in reversed(s)] for s in reversed(per)]
    echo["metric_evaluations"] = evals
    return DistanceEstimate(float(total), UPPER, path, per, echo)


# ---------------------------------------------------------------------------
# Kobayashi balls


@dataclass
class RayProfile:
    """Cumulative straight-ray length t -> int_0^t F^K(p + s u, u) ds.

    Pieces are graded so the depth proxy changes by at most ``cfg.ray_ratio``.  The
    Gauss-Legendre node values of every piece are kept; crossings inside a
    piece interpolate 1/F (nearly affine in the depth) instead of calling the
    estimator again.  With ``cfg.quad_tol`` set to None each piece is a single
    rule with no error check.
    """

    D: Domain
    p: np.ndarray
    u: np.ndarray
    cfg: PathConfig
    knots: list = field(default_factory=lambda: [0.0])
    cum: list = field(default_factory=lambda: [0.0])
    nodes: list = field(default_factory=list)
    exit_t: float = np.inf
    exhausted: bool = False
    evaluations: int = 0
    step: float = 2.0
    state: dict = field(default_factory=dict)

    def _F(self, t):
        est = kobayashi_inf_estimate(self.D, self.p + t * self.u, self.u, self.cfg.disc,
                                     warm=self.state.get("warm"))
        self.state["warm"] = est.extra.get("x")
        self.evaluations += 1
        return est.value

    def _gl(self, t0, t1):
        xg, wg = _GL[self.cfg.gl_nodes]
        h = t1 - t0
        ts = t0 + 0.5 * h * (xg + 1)
        fs = np.array([self._F(t) for t in ts])
        return 0.5 * h * float(wg @ fs), (ts, fs)

    def _push(self, t1, val, node):
        self.knots.append(t1)
        self.cum.append(self.cum[-1] + val)
        self.nodes.append(node)

    def _next_piece(self):
        t0 = self.knots[-1]
        eta = _eta_abs(self.D, self.cfg.disc)
        if not np.isfinite(self.exit_t):
            cons = _Constraints(self.D, 2 * eta)
            self.exit_t = float(_first_exit(cons, self.p, self.u[None, :], _t_max(self.D, self.p))[0])
        room = self.exit_t - t0
        if room <= 1e-14 * max(1.0, self.exit_t):
            self.exhausted = True
            return False
        d0 = float(depth_proxy(self.D, (self.p + t0 * self.u)[None, :])[0])
        prev = self.knots[-1] - self.knots[-2] if len(self.knots) > 1 else 0.0
        # pieces may at most double in length; depth grading cuts them back
        h = min(room, max(self.step * d0, 2.0 * prev, 1e-3 * room))
        h = min(h, room * 0.5) if room > 2 * d0 else h
        h = max(h, 1e-15)
        t1 = t0 + h
        d1 = float(depth_proxy(self.D, (self.p + t1 * self.u)[None, :])[0])
        # 10% slack for the curvature of the proxy on a nominal step
        limit = 1.1 * self.cfg.ray_ratio
        while d1 <= 0 or max(d0, d1) / max(min(d0, d1), 1e-300) > limit:
            h *= 0.7
            t1 = t0 + h
            d1 = float(depth_proxy(self.D, (self.p + t1 * self.u)[None, :])[0])
            if h < 1e-15:
                self.exhausted = True
                return False
        if self.cfg.quad_tol is None:
            val, node = self._gl(t0, t1)
            self._push(t1, val, node)
            return True
        coarse, _ = self._gl(t0, t1)
        tm = 0.5 * (t0 + t1)
        (left, nl), (right, nr) = self._gl(t0, tm), self._gl(tm, t1)
        if abs(left + right - coarse) > self.cfg.quad_tol * abs(left + right) and h > 1e-12:
            # one more level on each half keeps the piece list graded
            for a, b, v, nd in ((t0, tm, left, nl), (tm, t1, right, nr)):
                c = 0.5 * (a + b)
                (l2, n1), (r2, n2) = self._gl(a, c), self._gl(c, b)
                self._push(c, l2, n1)
                self._push(b, r2, n2)
        else:
            self._push(tm, left, nl)
            self._push(t1, right, nr)
        return True

    def _partial(self, k, t):
        """Integral of the interpolated F over [knots[k-1], t]."""
        a, b = self.knots[k - 1], self.knots[k]
        ts, fs = self.nodes[k - 1]
        # quadratic (or lower) interpolant of 1/F through the stored nodes
        coef = np.polyfit((ts - a) / (b - a), 1.0 / fs, len(ts) - 1)
        xg, wg = _GL[8]
        s = a + 0.5 * (t - a) * (xg + 1)
        inv = np.polyval(coef, (s - a) / (b - a))
        inv = np.maximum(inv, 1e-300)
        return 0.5 * (t - a) * float(wg @ (1.0 / inv))

    def crossing(self, R, rel_tol=1e-10):
        """Smallest t with cumulative length >= R; (t, exited_flag).

        Bisection runs on the interpolant, so tightening ``rel_tol`` (relative
        to the piece width) costs no estimator calls.
        """
        if R <= 0:
            return 0.0, False
        while self.cum[-1] < R:
            if self.exhausted or not self._next_piece():
                return self.knots[-1], True
        k = int(np.searchsorted(self.cum, R))
        a, base = self.knots[k - 1], self.cum[k - 1]
        lo, hi = a, self.knots[k]
        # rescale the interpolated piece so it matches the stored rule exactly
        full = self._partial(k, hi)
        scale = (self.cum[k] - base) / full if full > 0 else 1.0
        width = hi - lo
        for _ in range(80):
            if hi - lo <= rel_tol * width:
                break
            mid = 0.5 * (lo + hi)
            if base + scale * self._partial(k, mid) < R:
                lo = mid
            else:
                hi = mid
        return lo, False

    def length(self, t):
        """Cumulative length at t (extends the profile as needed)."""
        while self.knots[-1] < t:
            if self.exhausted or not self._next_piece():
                return np.inf
        k = max(1, int(np.searchsorted(self.knots, t)))
        full = self._partial(k, self.knots[k])
        scale = (self.cum[k] - self.cum[k - 1]) / full if full > 0 else 1.0
        return self.cum[k - 1] + scale * self._partial(k, t)


def kobayashi_ball_probe(D, p, R, directions, cfg=None, profiles=None):
    """Inner radial extents of B_D(p, R) along each unit direction.

    Straight segments from p upper-bound the distance, so each returned t(u)
    lies inside the true ball.  Returns a list of (t, exited) pairs.
    """
    cfg = cfg or PathConfig()
    p = np.asarray(p, dtype=complex)
    out = []
    for i, u in enumerate(directions):
        u = np.asarray(u, dtype=complex)
        u = u / np.linalg.norm(u)
        prof = profiles[i] if profiles is not None else RayProfile(D, p, u, cfg)
        out.append(prof.crossing(R))
    return out


def localization_ratio(D, U, z, v, cfg=None):
    """F^K estimate on U n D divided by the estimate on D.

    U is (center, radius).  When U covers D the two domains coincide and the
    ratio is exactly 1.
    """
    center, radius = np.asarray(U[0], dtype=complex), float(U[1])
    z = np.asarray(z, dtype=complex)
    if np.linalg.norm(z - center) >= radius:
        raise PreconditionError("z must lie in U")
    W = _boundary_samples(D, D.base_point, 512, 0) if D.contained else None
    if W is not None and np.all(np.linalg.norm(W - center, axis=1) < radius) \
            and radius >= np.linalg.norm(center) + D.bounding_radius:
        return 1.0
    from .polynomial import Polynomial, RealPolynomial
    n = D.n
    ball = Polynomial.constant(n, -radius ** 2)
    for i in range(n):
        zi = Polynomial.z(n, i) - center[i]
        ball = ball + zi * zi.conj()
    local = D.with_(extra=tuple(D.extra) + (RealPolynomial.from_any(ball),),
                    base_point=z, name=D.name + "|local", contained=True,
                    bounding_radius=min(D.bounding_radius, np.linalg.norm(center) + radius))
    num = kobayashi_inf_estimate(local, z, v, cfg).value
    den = kobayashi_inf_estimate(D, z, v, cfg).value
    if den == 0:
        raise PreconditionError("vacuous estimate on D")
    return num / den
