"""Sparse polynomials in (z, conj z) with exact algebra.

A term is keyed by the pair of multi-indices (alpha, beta) and stands for
c * z**alpha * conj(z)**beta.  Holomorphic polynomials are the special case
beta == 0; they double as the component maps of polynomial automorphisms.
"""
from __future__ import annotations

import math
from functools import cached_property

import numpy as np

from .errors import MalformedPolynomialError

REALITY_TOL = 1e-12
# polynomials with at most this many terms are evaluated term by term
_PLAN_TERMS = 12


def _zero(n):
    return (0,) * n


def _unit(n, i):
    return tuple(1 if k == i else 0 for k in range(n))


def _add(a, b):
    return tuple(x + y for x, y in zip(a, b))


class Polynomial:
    """Complex polynomial in z and conj(z); immutable after construction."""

    def __init__(self, n, terms=None):
        self.n = int(n)
        clean = {}
        for (a, b), c in (terms or {}).items():
            a, b = tuple(int(x) for x in a), tuple(int(x) for x in b)
            if len(a) != self.n or len(b) != self.n:
                raise MalformedPolynomialError(f"multi-index length != {self.n}: {(a, b)}")
            if min(a + b, default=0) < 0:
                raise MalformedPolynomialError(f"negative exponent in {(a, b)}")
            c = complex(c)
            if c != 0:
                clean[(a, b)] = clean.get((a, b), 0) + c
        self.terms = {k: c for k, c in clean.items() if c != 0}

    # constructors ---------------------------------------------------------
    @classmethod
    def constant(cls, n, c):
        return cls(n, {(_zero(n), _zero(n)): c})

    @classmethod
    def z(cls, n, i):
        return cls(n, {(_unit(n, i), _zero(n)): 1.0})

    @classmethod
    def zbar(cls, n, i):
        return cls(n, {(_zero(n), _unit(n, i)): 1.0})

    @classmethod
    def abs2(cls, n, i, power=1):
        """|z_i|^(2*power)."""
        e = tuple(power if k == i else 0 for k in range(n))
        return cls(n, {(e, e): 1.0})

    @classmethod
    def holomorphic(cls, n, coeffs):
        """Build from {alpha: c}."""
        return cls(n, {(tuple(a), _zero(n)): c for a, c in coeffs.items()})

    # arithmetic -----------------------------------------------------------
    def _lift(self, other):
        if isinstance(other, Polynomial):
            if other.n != self.n:
                raise ValueError("dimension mismatch")
            return other
        return Polynomial.constant(self.n, other)

    def __add__(self, other):
        other = self._lift(other)
        out = dict(self.terms)
        for k, c in other.terms.items():
            out[k] = out.get(k, 0) + c
        return type(self)._make(self.n, out)

    __radd__ = __add__

    def __neg__(self):
        return type(self)._make(self.n, {k: -c for k, c in self.terms.items()})

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        if not isinstance(other, Polynomial):
            other = complex(other)
            return type(self)._make(self.n, {k: c * other for k, c in self.terms.items()})
        out = {}
        for (a1, b1), c1 in self.terms.items():
            for (a2, b2), c2 in other.terms.items():
                key = (_add(a1, a2), _add(b1, b2))
                out[key] = out.get(key, 0) + c1 * c2
        return type(self)._make(self.n, out)

    __rmul__ = __mul__

    def __truediv__(self, s):
        return self * (1.0 / complex(s))

    def __pow__(self, k):
        result = Polynomial.constant(self.n, 1.0)
        base = self
        k = int(k)
        while k:
            if k & 1:
                result = result * base
            base = base * base
            k >>= 1
        return result

    @classmethod
    def _make(cls, n, terms):
        return Polynomial(n, terms)

    def conj(self):
        return Polynomial(self.n, {(b, a): np.conj(c) for (a, b), c in self.terms.items()})

    def real_part(self):
        return RealPolynomial.from_any((self + self.conj()) * 0.5)

    # structure ------------------------------------------------------------
    def degree(self):
        return max((sum(a) + sum(b) for a, b in self.terms), default=0)

    def is_holomorphic(self):
        return all(sum(b) == 0 for _, b in self.terms)

    def is_zero(self):
        return not self.terms

    def coeff(self, alpha, beta=None):
        beta = _zero(self.n) if beta is None else tuple(beta)
        return self.terms.get((tuple(alpha), beta), 0j)

    def homogeneous_part(self, l):
        return Polynomial(self.n, {k: c for k, c in self.terms.items()
                                   if sum(k[0]) + sum(k[1]) == l})

    def max_abs_coeff(self):
        return max((abs(c) for c in self.terms.values()), default=0.0)

    def prune(self, tol):
        """Drop coefficients with |c| <= tol."""
        return type(self)._make(self.n, {k: c for k, c in self.terms.items() if abs(c) > tol})

    def depends_on(self, i):
        return any(a[i] or b[i] for a, b in self.terms)

    # calculus -------------------------------------------------------------
    def diff_z(self, i):
        out = {}
        for (a, b), c in self.terms.items():
            if a[i]:
                a2 = tuple(x - 1 if k == i else x for k, x in enumerate(a))
                out[(a2, b)] = out.get((a2, b), 0) + c * a[i]
        return Polynomial(self.n, out)

    def diff_zbar(self, i):
        out = {}
        for (a, b), c in self.terms.items():
            if b[i]:
                b2 = tuple(x - 1 if k == i else x for k, x in enumerate(b))
                out[(a, b2)] = out.get((a, b2), 0) + c * b[i]
        return Polynomial(self.n, out)

    # substitution ---------------------------------------------------------
    def compose(self, maps):
        """Substitute z_i -> maps[i] (holomorphic, all in the same variables)."""
        if len(maps) != self.n:
            raise ValueError("need one map per variable")
        m = maps[0].n
        for g in maps:
            if not g.is_holomorphic():
                raise ValueError("substitution maps must be holomorphic")
        conj_maps = [g.conj() for g in maps]
        cache = {}

        def power(i, k, bar):
            key = (i, k, bar)
            if key not in cache:
                if k == 0:
                    cache[key] = Polynomial.constant(m, 1.0)
                else:
                    base = conj_maps[i] if bar else maps[i]
                    cache[key] = power(i, k - 1, bar) * base
            return cache[key]

        out = Polynomial(m)
        acc = {}
        for (a, b), c in self.terms.items():
            t = Polynomial.constant(m, c)
            for i in range(self.n):
                if a[i]:
                    t = t * power(i, a[i], False)
                if b[i]:
                    t = t * power(i, b[i], True)
            for k, v in t.terms.items():
                acc[k] = acc.get(k, 0) + v
        out = Polynomial(m, acc)
        return type(self)._make(m, out.terms)

    # evaluation -----------------------------------------------------------
    @cached_property
    def _arrays(self):
        keys = list(self.terms)
        if not keys:
            return None
        A = np.array([k[0] for k in keys], dtype=int).reshape(len(keys), self.n)
        B = np.array([k[1] for k in keys], dtype=int).reshape(len(keys), self.n)
        c = np.array([self.terms[k] for k in keys], dtype=complex)
        kmax = int(max(A.max(initial=0), B.max(initial=0)))
        return A, B, c, kmax

    @cached_property
    def _plan(self):
        """Per-term factor lists (var, power, conjugated) for short polynomials."""
        if not self.terms or len(self.terms) > _PLAN_TERMS:
            return None
        plan = []
        for (a, b), c in self.terms.items():
            facs = [(i, a[i], False) for i in range(self.n) if a[i]]
            facs += [(i, b[i], True) for i in range(self.n) if b[i]]
            plan.append((c, facs))
        return plan

    def _eval_plan(self, Z, plan):
        # per-call overhead matters more than vector width in the bisection loops
        cols, pows = {}, {}

        def power(i, k, bar):
            key = (i, k, bar)
            if key not in pows:
                if (i, bar) not in cols:
                    zi = Z[..., i]
                    cols[(i, bar)] = np.conj(zi) if bar else zi
                base = cols[(i, bar)]
                pows[key] = base if k == 1 else power(i, k - 1, bar) * base
            return pows[key]

        out = None
        for c, facs in plan:
            if not facs:
                term = np.full(Z.shape[:-1], c, dtype=complex)
            else:
                term = power(*facs[0])
                for f in facs[1:]:
                    term = term * power(*f)
                term = c * term
            out = term if out is None else out + term
        return out

    def __call__(self, Z):
        """Evaluate at points Z of shape (..., n); returns complex (...)."""
        Z = np.asarray(Z, dtype=complex)
        arr = self._arrays
        if arr is None:
            return np.zeros(Z.shape[:-1], dtype=complex)
        plan = self._plan
        if plan is not None:
            return self._eval_plan(Z, plan)
        A, B, c, kmax = arr
        pw = np.empty(Z.shape + (kmax + 1,), dtype=complex)
        pw[..., 0] = 1.0
        for k in range(1, kmax + 1):
            pw[..., k] = pw[..., k - 1] * Z
        pwc = np.conj(pw)
        mono = pw[..., 0, A[:, 0]] * pwc[..., 0, B[:, 0]]
        for i in range(1, self.n):
            mono *= pw[..., i, A[:, i]]
            mono *= pwc[..., i, B[:, i]]
        return mono @ c

    def magnitude(self, Z):
        """Sum of |term| at Z; the scale against which round-off is judged."""
        Z = np.asarray(Z, dtype=complex)
        arr = self._arrays
        if arr is None:
            return np.zeros(Z.shape[:-1])
        A, B, c, _ = arr
        az = np.abs(Z)[..., None, :]
        mono = np.prod(az ** A * az ** B, axis=-1)
        return mono @ np.abs(c)

    # serialization ----------------------------------------------------------
    def to_terms(self):
        out = []
        for (a, b), c in sorted(self.terms.items()):
            out.append({"re": float(c.real), "im": float(c.imag), "z": list(a), "zbar": list(b)})
        return out

    def __repr__(self):
        parts = []
        for (a, b), c in sorted(self.terms.items()):
            mon = "".join(f"z{i + 1}^{e}" for i, e in enumerate(a) if e)
            mon += "".join(f"zb{i + 1}^{e}" for i, e in enumerate(b) if e)
            parts.append(f"({c:.6g}){mon}")
        return f"{type(self).__name__}(n={self.n}: " + " + ".join(parts or ["0"]) + ")"

    def close_to(self, other, tol):
        keys = set(self.terms) | set(other.terms)
        return all(abs(self.terms.get(k, 0) - other.terms.get(k, 0)) <= tol for k in keys)


class RealPolynomial(Polynomial):
    """Real-valued polynomial: c(alpha, beta) == conj(c(beta, alpha)).

    Construction checks the reality pairing; results of arithmetic between real
    polynomials are re-symmetrized so round-off never breaks the invariant.
    """

    def __init__(self, n, terms=None, check=True, tol=REALITY_TOL):
        super().__init__(n, terms)
        if check:
            bad = reality_defects(self, tol)
            if bad:
                key = bad[0]
                raise MalformedPolynomialError(
                    f"reality violated at (alpha, beta) = {key}: missing or mismatched conjugate term")

    @classmethod
    def from_any(cls, p, tol=None):
        """Symmetrize p into a real polynomial; optionally reject big defects."""
        if tol is not None:
            bad = reality_defects(p, tol)
            if bad:
                raise MalformedPolynomialError(f"reality violated at (alpha, beta) = {bad[0]}")
        out = {}
        for (a, b), c in p.terms.items():
            out[(a, b)] = out.get((a, b), 0) + 0.5 * c
            out[(b, a)] = out.get((b, a), 0) + 0.5 * np.conj(c)
        for (a, b), c in list(out.items()):
            if a == b:
                out[(a, b)] = complex(c.real, 0.0)
        return cls(p.n, out, check=False)

    @classmethod
    def _make(cls, n, terms):
        return cls.from_any(Polynomial(n, terms))

    def __mul__(self, other):
        if isinstance(other, RealPolynomial) or (not isinstance(other, Polynomial) and np.isreal(other)):
            return RealPolynomial.from_any(Polynomial.__mul__(self, other))
        return Polynomial(self.n, self.terms) * other

    __rmul__ = __mul__

    def __add__(self, other):
        if isinstance(other, RealPolynomial) or (not isinstance(other, Polynomial) and np.isreal(other)):
            return RealPolynomial.from_any(Polynomial.__add__(self, other))
        return Polynomial(self.n, self.terms) + other

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-1.0) * other if isinstance(other, Polynomial) else self + (-float(np.real(other)))

    def __neg__(self):
        return self * -1.0

    def __truediv__(self, s):
        return self * (1.0 / float(s))

    def compose(self, maps):
        p = Polynomial(self.n, self.terms).compose(maps)
        return RealPolynomial.from_any(p)

    def value(self, Z):
        """Real value at Z (no imaginary-part check)."""
        return np.real(self(Z))

    @cached_property
    def gradient_polys(self):
        return [Polynomial(self.n, self.terms).diff_z(i) for i in range(self.n)]

    @cached_property
    def hessian_polys(self):
        """(A, B) with A[i][j] = d2/dz_i dz_j and B[i][j] = d2/dz_i dzbar_j."""
        g = self.gradient_polys
        A = [[g[i].diff_z(j) for j in range(self.n)] for i in range(self.n)]
        B = [[g[i].diff_zbar(j) for j in range(self.n)] for i in range(self.n)]
        return A, B

    def gradient(self, Z):
        """Wirtinger gradient d rho / dz_i at Z, shape (..., n)."""
        Z = np.asarray(Z, dtype=complex)
        return np.stack([g(Z) for g in self.gradient_polys], axis=-1)

    def hessians(self, Z):
        A, B = self.hessian_polys
        Z = np.asarray(Z, dtype=complex)
        HA = np.array([[A[i][j](Z) for j in range(self.n)] for i in range(self.n)])
        HB = np.array([[B[i][j](Z) for j in range(self.n)] for i in range(self.n)])
        return HA, HB


def reality_defects(p, tol=REALITY_TOL):
    """List (alpha, beta) keys whose conjugate partner is missing or mismatched."""
    bad = []
    scale = max(1.0, p.max_abs_coeff())
    for (a, b), c in p.terms.items():
        partner = p.terms.get((b, a), 0)
        if abs(c - np.conj(partner)) > tol * scale:
            bad.append((a, b))
    return sorted(bad)


def hol_map_eval(maps, Z):
    """Evaluate a list of holomorphic polynomials at Z -> (..., len(maps))."""
    return np.stack([g(Z) for g in maps], axis=-1)


def affine_maps(M, b):
    """Holomorphic component polys of z -> M z + b."""
    M = np.asarray(M, dtype=complex)
    n = M.shape[1]
    out = []
    for i in range(M.shape[0]):
        p = Polynomial.constant(n, b[i])
        for j in range(n):
            if M[i, j] != 0:
                p = p + Polynomial.z(n, j) * M[i, j]
        out.append(p)
    return out


def binom(n, k):
    return math.comb(n, k)
