"""Jacobi cusp forms of scalar index: Poincare series, Gram bases, Bergman kernels.

Conventions
-----------
* ``phi(tau, z) = sum c(n, r) q^n zeta^r`` with ``D = 4 n m - r^2``.
* The slash action of ``M = (a b; c d)`` and ``[lam, mu]`` is
  ``(phi|M)(tau,z) = (c tau + d)^-k e(-m c z^2/(c tau + d)) phi(M tau, z/(c tau + d))`` and
  ``(phi|[lam,mu])(tau,z) = e(m(lam^2 tau + 2 lam z)) phi(tau, z + lam tau + mu)``.
* The invariant mass of a form is ``v^k e^{-4 pi m y^2/v} |phi|^2``.
* Petersson products integrate ``phi psibar v^k e^{-4 pi m y^2 / v} v^-3 du dv dx dy`` over the
  quotient of H x C by SL_2(Z) x Z^2 (tau in F, z in half of C/(Z tau + Z), because
  ``-1`` acts as ``z -> -z``).
* Poincare series sum over all coprime ``(c, d)`` of both signs, so the identity coset
  contributes the seed twice for even ``k``.
"""
from __future__ import annotations

import cmath
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

from ._accel import NUMBA_AVAILABLE, njit, prange
from .elliptic import EigenformData, QExpansion, _bernoulli, eigenbasis, eisenstein, delta_qexp, dim_cusp
from .errors import ContractError, DomainError, TruncationError
from .massreport import MassReport
from .numkernel import LogComplex, PrecisionPolicy, divisors, is_fundamental_discriminant, kronecker_chi, kronecker_table, mobius

__all__ = [
    "JacobiPoint",
    "JacobiTransform",
    "JacobiCoeffTable",
    "PoincareSpec",
    "PoincareNormalizer",
    "GramBasis",
    "reduce_point",
    "cohen_H",
    "eisenstein_jacobi",
    "jacobi_cusp_basis",
    "poincare_eval",
    "poincare_fourier",
    "delta_count",
    "petersson_trace",
    "gram_orthobasis",
    "bergman_spectral",
    "bergman_geometric",
    "vm_apply",
    "vm_slash_check",
    "vp_norm_factor",
    "mass_old_Ul",
    "mass_old_Vp",
    "sup_scan",
    "exponent_fit",
    "jacobi_cusp_dim",
    "jacobi_eval",
    "jacobi_hecke",
    "JacobiEigenform",
    "hecke_eigenbasis",
    "vp_image_gram",
    "bergman_constant",
    "bergman_spectral_many",
    "default_Dmax",
    "default_grid",
    "jacobi_mass_functional",
    "sup_jacobi",
    "sup_old_Ul",
]

TWO_PI = 2.0 * math.pi


# ============================================================================
# Points and reduction
# ============================================================================


@dataclass(frozen=True)
class JacobiPoint:
    """(tau, z) = (u + i v, x + i y) in H x C."""

    u: float
    v: float
    x: float = 0.0
    y: float = 0.0

    def __post_init__(self):
        if not self.v > 0:
            raise DomainError(f"JacobiPoint needs v > 0, got {self.v}")

    @property
    def tau(self) -> complex:
        return complex(self.u, self.v)

    @property
    def z(self) -> complex:
        return complex(self.x, self.y)

    @classmethod
    def of(cls, tau: complex, z: complex = 0j) -> "JacobiPoint":
        return cls(tau.real, tau.imag, z.real, z.imag)

    def is_reduced(self, eps: float = 1e-12) -> bool:
        return (
            abs(self.u) <= 0.5 + eps
            and self.u * self.u + self.v * self.v >= 1 - eps
            and -eps <= self.x < 1 + eps
            and -eps <= self.y < self.v + eps
        )


@dataclass(frozen=True)
class JacobiTransform:
    """Element M [lam, mu] of the Jacobi group acting on points.

    ``apply`` maps (tau, z) to (M tau, (z + lam tau + mu)/(c tau + d)).
    """

    M: tuple = (1, 0, 0, 1)
    lam: int = 0
    mu: int = 0

    def apply(self, p: JacobiPoint) -> JacobiPoint:
        a, b, c, d = self.M
        tau, z = p.tau, p.z
        j = c * tau + d
        return JacobiPoint.of((a * tau + b) / j, (z + self.lam * tau + self.mu) / j)

    def inverse(self) -> "JacobiTransform":
        a, b, c, d = self.M
        # z = z'(c tau + d) - lam tau - mu rewritten in tau' = M tau, using (c tau + d)(a - c tau') = 1
        lam2 = -self.lam * d + self.mu * c
        mu2 = self.lam * b - self.mu * a
        return JacobiTransform((d, -b, -c, a), lam2, mu2)

    def is_identity(self) -> bool:
        return self.M == (1, 0, 0, 1) and self.lam == 0 and self.mu == 0


def _reduce_tau(tau: complex):
    """Standard reduction to F; returns (tau_reduced, M) with tau_reduced = M tau."""
    a, b, c, d = 1, 0, 0, 1
    for _ in range(10000):
        n = math.floor(tau.real + 0.5)
        if n:
            tau -= n
            a, b = a - n * c, b - n * d
        if abs(tau) < 1 - 1e-15:
            tau = -1 / tau
            a, b, c, d = -c, -d, a, b
        else:
            break
    if c < 0 or (c == 0 and d < 0):
        a, b, c, d = -a, -b, -c, -d
    return tau, (a, b, c, d)


def reduce_point(p: JacobiPoint):
    """Move p into the fundamental domain; returns (reduced point, transform g) with g(p) = reduced."""
    tau_r, M = _reduce_tau(p.tau)
    a, b, c, d = M
    z1 = p.z / (c * p.tau + d)
    lam = -math.floor(z1.imag / tau_r.imag)
    z2 = z1 + lam * tau_r
    mu = -math.floor(z2.real)
    z3 = z2 + mu
    # (z + lam' tau + mu')/(c tau + d) = z3 with lam' tau + mu' = (lam tau_r + mu)(c tau + d)
    # lam tau_r (c tau + d) = lam (a tau + b)
    lam_p = lam * a + mu * c
    mu_p = lam * b + mu * d
    g = JacobiTransform(M, lam_p, mu_p)
    red = JacobiPoint(tau_r.real, tau_r.imag, z3.real, z3.imag)
    return red, g


# ============================================================================
# Coefficient tables
# ============================================================================


def _canon(r: int, m: int) -> int:
    rho = r % (2 * m)
    return min(rho, 2 * m - rho)


@dataclass
class JacobiCoeffTable:
    """c(n, r) of a weight-k index-m form stored by (D, r mod 2m) with c(D, r) = c(D, -r).

    ``data`` maps ``(D, rho)`` with ``0 <= rho <= m`` to the coefficient.
    Entries with ``D <= 0`` are kept only for non-cusp forms (``D = 0``).
    """

    k: int
    m: int
    Dmax: int
    data: dict
    meta: dict = field(default_factory=dict, repr=False, compare=False)

    def coeff(self, n: int, r: int):
        D = 4 * n * self.m - r * r
        if D < 0 or D > self.Dmax:
            if D > self.Dmax:
                raise TruncationError(f"D = {D} beyond table Dmax = {self.Dmax}")
            return 0
        return self.data.get((D, _canon(r, self.m)), 0)

    def __call__(self, D: int, r: int = None):
        if r is None:
            if self.m != 1:
                raise DomainError("index > 1 needs r")
            r = D % 2
        return self.data.get((D, _canon(r, self.m)), 0)

    @property
    def entries(self) -> dict:
        """(n, r) -> c with -m < r <= m: one representative per stored class and sign."""
        out = {}
        m = self.m
        for (D, rho), val in sorted(self.data.items()):
            if D <= 0:
                continue
            for r in {rho, -rho}:
                if r <= -m:
                    continue
                num = D + r * r
                if num % (4 * m) == 0:
                    out[(num // (4 * m), r)] = val
        return out

    def scale(self, c) -> "JacobiCoeffTable":
        return JacobiCoeffTable(self.k, self.m, self.Dmax, {key: c * v for key, v in self.data.items()})

    def combine(self, other: "JacobiCoeffTable", a=1, b=1) -> "JacobiCoeffTable":
        if (self.k, self.m) != (other.k, other.m):
            raise DomainError("tables of different weight or index")
        Dmax = min(self.Dmax, other.Dmax)
        keys = {key for key in self.data if key[0] <= Dmax} | {key for key in other.data if key[0] <= Dmax}
        return JacobiCoeffTable(self.k, self.m, Dmax, {key: a * self.data.get(key, 0) + b * other.data.get(key, 0) for key in keys})

    def truncate(self, Dmax: int) -> "JacobiCoeffTable":
        return JacobiCoeffTable(self.k, self.m, Dmax, {key: v for key, v in self.data.items() if key[0] <= Dmax})

    def to_json(self) -> str:
        ents = []
        for (n, r), val in sorted(self.entries.items()):
            c = complex(val)
            ents.append([n, r, c.real, c.imag])
        return json.dumps({"k": self.k, "m": self.m, "Dmax": self.Dmax, "entries": ents})

    @classmethod
    def from_json(cls, text: str) -> "JacobiCoeffTable":
        obj = json.loads(text)
        m = obj["m"]
        data = {}
        for n, r, re, im in obj["entries"]:
            data[(4 * n * m - r * r, _canon(r, m))] = complex(re, im) if im else re
        return cls(obj["k"], m, obj["Dmax"], data)

    def is_cusp(self) -> bool:
        return all(v == 0 for (D, _), v in self.data.items() if D <= 0)


# ============================================================================
# Exact bases: Eisenstein-Jacobi series and products
# ============================================================================


def _gen_bernoulli(r: int, D0: int) -> Fraction:
    """B_{r, chi_D0} = F^{r-1} sum_{a=1}^{F} chi(a) B_r(a/F) = sum_j binom(r, j) B_{r-j} F^(r-1-j) S_j.

    S_j = sum_a chi(a) a^j is an exact integer power sum.
    """
    F = abs(D0)
    poly = _bernoulli_poly(r)
    chi = np.array(kronecker_table(D0, F)[1:], dtype=object)
    a = np.arange(1, F + 1, dtype=object)
    s = Fraction(0)
    pw = np.ones(F, dtype=object)
    for j, c in enumerate(poly):
        if c:
            s += c * Fraction(F) ** (r - 1 - j) * int(np.dot(chi, pw))
        pw = pw * a
    return s


@lru_cache(maxsize=None)
def _bernoulli_poly(r: int) -> tuple:
    # B_r(x) = sum_j binom(r, j) B_{r-j} x^j with B_1 = -1/2
    out = []
    for j in range(r + 1):
        i = r - j
        b = Fraction(-1, 2) if i == 1 else _bernoulli(i) if i != 1 else None
        if i == 0:
            b = Fraction(1)
        out.append(math.comb(r, j) * b)
    return tuple(out)


def _fundamental_part(N: int):
    """-N = D0 f^2 with D0 a fundamental discriminant."""
    D = -N
    for f in range(int(math.isqrt(N)), 0, -1):
        if N % (f * f) == 0:
            D0 = D // (f * f)
            if D0 % 4 in (0, 1) and is_fundamental_discriminant(D0):
                return D0, f
    raise DomainError(f"-{N} is not a discriminant")


@lru_cache(maxsize=None)
def cohen_H(r: int, N: int) -> Fraction:
    """Cohen's number H(r, N): zeta(1-2r) at N = 0, a twisted divisor sum times L(1-r, chi_D0) for N > 0."""
    if N == 0:
        return -_bernoulli(2 * r) / (2 * r)
    if N < 0 or N % 4 in (1, 2):
        return Fraction(0)
    D0, f = _fundamental_part(N)
    L = -_gen_bernoulli(r, D0) / r
    s = Fraction(0)
    for d in divisors(f):
        mu = mobius(d)
        if mu:
            sig = sum(e ** (2 * r - 1) for e in divisors(f // d))
            s += mu * kronecker_chi(D0, d) * Fraction(d) ** (r - 1) * sig
    return L * s


@lru_cache(maxsize=None)
def _eisenstein_jacobi_D(k: int, Dmax: int) -> tuple:
    # e_{k,1}(D) = H(k-1, D)/H(k-1, 0) for D >= 0
    h0 = cohen_H(k - 1, 0)
    return tuple(cohen_H(k - 1, D) / h0 for D in range(Dmax + 1))


def _index1_table(k: int, coeffs, Dmax: int) -> JacobiCoeffTable:
    data = {}
    for D in range(Dmax + 1):
        if D % 4 in (0, 3):
            val = coeffs[D]
            if val != 0:
                data[(D, D % 2)] = int(val) if isinstance(val, Fraction) and val.denominator == 1 else val
    return JacobiCoeffTable(k, 1, Dmax, data)


def eisenstein_jacobi(k: int, Dmax: int) -> JacobiCoeffTable:
    """E_{k,1} for even k >= 4 with exact coefficients."""
    if k < 4 or k % 2:
        raise DomainError("E_{k,1} needs even k >= 4")
    return _index1_table(k, _eisenstein_jacobi_D(k, Dmax), Dmax)


def _intify(v):
    return int(v) if isinstance(v, Fraction) and v.denominator == 1 else v


def _times_modular(f: QExpansion, g: JacobiCoeffTable) -> JacobiCoeffTable:
    """Product of a modular form and an index-1 Jacobi form: c(D) = sum_j a(j) c_g(D - 4j)."""
    if g.m != 1:
        raise DomainError("only index 1 here")
    Dmax = g.Dmax
    if f.N < Dmax // 4:
        raise DomainError("q-expansion too short for the product")
    G = np.array([_intify(g.data.get((D, D % 2), 0)) for D in range(Dmax + 1)], dtype=object)
    A = np.array([_intify(f[j]) for j in range(Dmax // 4 + 1)], dtype=object)
    data = {}
    for D in range(Dmax + 1):
        if D % 4 not in (0, 3):
            continue
        s = np.dot(A[: D // 4 + 1], G[D::-4][: D // 4 + 1])
        if s:
            data[(D, D % 2)] = _intify(s)
    return JacobiCoeffTable(f.weight + g.k, 1, Dmax, data)


def _modular_basis(w: int, N: int) -> list:
    """Basis E4^a E6^b (4a + 6b = w) of M_w, or [] if w < 0 or w = 2."""
    if w < 0 or w == 2 or w % 2:
        return []
    if w == 0:
        return [QExpansion(0, (1,) + (0,) * N)]
    out = []
    for b in range(w // 6 + 1):
        rest = w - 6 * b
        if rest % 4 == 0:
            out.append(eisenstein(4, N) ** (rest // 4) * eisenstein(6, N) ** b)
    return out


@lru_cache(maxsize=None)
def _phi10_phi12(Dmax: int):
    N = Dmax // 4 + 1
    E4, E6 = eisenstein(4, N), eisenstein(6, N)
    e4 = eisenstein_jacobi(4, Dmax)
    e6 = eisenstein_jacobi(6, Dmax)
    phi10 = _times_modular(E6, e4).combine(_times_modular(E4, e6), Fraction(1, 144), Fraction(-1, 144))
    phi12 = _times_modular(E4 * E4, e4).combine(_times_modular(E6, e6), Fraction(1, 144), Fraction(-1, 144))
    # both have integral coefficients
    phi10, phi12 = (JacobiCoeffTable(t.k, 1, t.Dmax, {key: _intify(v) for key, v in t.data.items()}) for t in (phi10, phi12))
    return phi10, phi12


def _index1_cusp_raw(k: int, Dmax: int) -> list:
    phi10, phi12 = _phi10_phi12(Dmax)
    N = Dmax // 4 + 1
    out = [_times_modular(f, phi10) for f in _modular_basis(k - 10, N)]
    out += [_times_modular(f, phi12) for f in _modular_basis(k - 12, N)]
    return out


# ---- index m >= 2: two-variable series on a (n, r) grid ----


class _Series2:
    """Exact c(n, r) on 0 <= n <= N, |r| <= R (used for products at index >= 2)."""

    def __init__(self, k: int, m: int, N: int, R: int, arr=None):
        self.k, self.m, self.N, self.R = k, m, N, R
        self.arr = arr if arr is not None else np.zeros((N + 1, 2 * R + 1), dtype=object)

    @classmethod
    def from_table(cls, t: JacobiCoeffTable, N: int, R: int) -> "_Series2":
        s = cls(t.k, t.m, N, R)
        s.arr[:] = 0
        for n in range(N + 1):
            for r in range(-R, R + 1):
                D = 4 * n * t.m - r * r
                if 0 <= D <= t.Dmax:
                    s.arr[n, r + R] = t.data.get((D, _canon(r, t.m)), 0)
                elif D > t.Dmax:
                    raise TruncationError("table too short for the product grid")
        return s

    def __mul__(self, other: "_Series2") -> "_Series2":
        N, R = self.N, self.R
        out = _Series2(self.k + other.k, self.m + other.m, N, R)
        out.arr[:] = 0
        A, B = self.arr, other.arr
        nzA = [(n, r) for n in range(N + 1) for r in range(2 * R + 1) if A[n, r] != 0]
        nzB = [(n, r) for n in range(N + 1) for r in range(2 * R + 1) if B[n, r] != 0]
        for n1, r1 in nzA:
            a = A[n1, r1]
            for n2, r2 in nzB:
                n = n1 + n2
                r = r1 + r2 - R
                if n <= N and 0 <= r <= 2 * R:
                    out.arr[n, r] += a * B[n2, r2]
        return out

    def times_modular(self, f: QExpansion) -> "_Series2":
        out = _Series2(self.k + f.weight, self.m, self.N, self.R)
        out.arr[:] = 0
        for n in range(self.N + 1):
            for j in range(n + 1):
                if f[j]:
                    out.arr[n] = out.arr[n] + f[j] * self.arr[n - j]
        return out

    def to_table(self, Dmax: int) -> JacobiCoeffTable:
        data = {}
        m = self.m
        for n in range(self.N + 1):
            for r in range(-self.R, self.R + 1):
                D = 4 * n * m - r * r
                if D < 0 or D > Dmax:
                    continue
                key = (D, _canon(r, m))
                val = self.arr[n, r + self.R]
                if key in data and data[key] != val:
                    raise ContractError(f"coefficient at {key} not a function of (D, r mod 2m)")
                data[key] = val
        # every class up to Dmax must have been reached
        for D in range(Dmax + 1):
            for rho in range(m + 1):
                if (rho * rho + D) % (4 * m) == 0 and (D, rho) not in data:
                    raise TruncationError("product grid too small for Dmax")
        return JacobiCoeffTable(self.k, m, Dmax, {key: v for key, v in data.items() if v != 0 or key[0] == 0})


def vm_apply(phi: JacobiCoeffTable, m: int, Dmax: int | None = None) -> JacobiCoeffTable:
    """V_m phi: c(n, r) = sum_{a | (n, r, m)} a^(k-1) c_phi(n m / a^2, r / a) for an index-1 cusp table."""
    if phi.m != 1:
        raise DomainError("vm_apply needs an index-1 table")
    if m < 1:
        raise DomainError("m >= 1")
    if m == 1:
        return JacobiCoeffTable(phi.k, 1, phi.Dmax, dict(phi.data))
    k = phi.k
    # D' = 4 n m - r^2 = m' D_phi where D_phi = (4 (nm/a^2) - (r/a)^2) = D'/a^2 ; need D'/a^2 <= phi.Dmax
    Dmax = phi.Dmax if Dmax is None else Dmax
    data = {}
    for D in range(1, Dmax + 1):
        for rho in range(m + 1):
            if (rho * rho + D) % (4 * m):
                continue
            # representative (n, r) with r = rho
            r = rho
            n = (D + r * r) // (4 * m)
            s = 0
            for a in divisors(math.gcd(math.gcd(n, r), m) if r else math.gcd(n, m)):
                Dp = D // (a * a)
                if D % (a * a):
                    continue
                if Dp > phi.Dmax:
                    raise TruncationError("index-1 table too short for V_m")
                s += a ** (k - 1) * phi.data.get((Dp, (r // a) % 2), 0)
            if s:
                data[(D, rho)] = s
    return JacobiCoeffTable(k, m, Dmax, data)


def _weak_generators(N: int, R: int) -> tuple:
    """phi_{-2,1} = phi_{10,1}/Delta and phi_{0,1} = phi_{12,1}/Delta on the grid n <= N, |r| <= R."""
    phi10, phi12 = _phi10_phi12(4 * (N + 2))
    delta = delta_qexp(N + 2)
    out = []
    for t in (phi10, phi12):
        src = _Series2.from_table(t, N + 1, R)
        w = _Series2(t.k - 12, 1, N, R)
        w.arr[:] = 0
        for n in range(N + 1):
            row = src.arr[n + 1].copy()
            for j in range(1, n + 1):
                if delta[j + 1]:
                    row = row - delta[j + 1] * w.arr[n - j]
            w.arr[n] = row
        out.append(w)
    return tuple(out)


@lru_cache(maxsize=None)
def _index_m_raw(k: int, m: int, Dmax: int) -> tuple:
    """Spanning set of J^cusp_{k,m}: cusp combinations in M_*[phi_{-2,1}, phi_{0,1}] (m >= 2)."""
    if m == 1:
        return tuple(_index1_cusp_raw(k, Dmax))
    N = (Dmax + m * m) // (4 * m) + 1
    R = int(math.isqrt(4 * m * N + m * m)) + 1
    wm2, w0 = _weak_generators(N, R)
    weak = []
    powm2 = [None] * (m + 1)
    pow0 = [None] * (m + 1)
    for j in range(m + 1):
        powm2[j] = wm2 if j == 1 else (None if j == 0 else powm2[j - 1] * wm2)
        pow0[j] = w0 if j == 1 else (None if j == 0 else pow0[j - 1] * w0)
    for j in range(m + 1):
        mods = _modular_basis(k + 2 * j, N)
        if not mods:
            continue
        a, b = powm2[j], pow0[m - j]
        prod = a if b is None else (b if a is None else a * b)
        for f in mods:
            weak.append(prod.times_modular(f))
    if not weak:
        return ()
    # cusp condition: every coefficient with 4nm - r^2 <= 0 vanishes
    keys = [(n, r) for n in range(N + 1) for r in range(-R, R + 1) if 4 * n * m - r * r <= 0]
    rows = [[Fraction(w.arr[n, r + R]) for n, r in keys] for w in weak]
    combos = _nullspace(rows, len(weak))
    cusp = []
    for vec in combos:
        acc = _Series2(k, m, N, R)
        acc.arr[:] = 0
        for coef, w in zip(vec, weak):
            if coef:
                acc.arr = acc.arr + coef * w.arr
        tab = acc.to_table(Dmax)
        cusp.append(JacobiCoeffTable(k, m, Dmax, {key: v for key, v in tab.data.items() if v != 0 and key[0] > 0}))
    return tuple(cusp)


def _nullspace(rows: list, n: int) -> list:
    """Rational null space of the map x -> sum_i x_i rows[i] (rows given per variable)."""
    if not rows or not rows[0]:
        return [[Fraction(int(i == j)) for i in range(n)] for j in range(n)]
    ncon = len(rows[0])
    # matrix A (ncon x n), solve A x = 0
    A = [[rows[j][i] for j in range(n)] for i in range(ncon)]
    piv_cols = []
    r = 0
    for c in range(n):
        p = next((i for i in range(r, ncon) if A[i][c] != 0), None)
        if p is None:
            continue
        A[r], A[p] = A[p], A[r]
        pv = A[r][c]
        A[r] = [x / pv for x in A[r]]
        for i in range(ncon):
            if i != r and A[i][c] != 0:
                f = A[i][c]
                A[i] = [a - f * b for a, b in zip(A[i], A[r])]
        piv_cols.append(c)
        r += 1
        if r == ncon:
            break
    free = [c for c in range(n) if c not in piv_cols]
    out = []
    for fc in free:
        x = [Fraction(0)] * n
        x[fc] = Fraction(1)
        for i, pc in enumerate(piv_cols):
            x[pc] = -A[i][fc]
        out.append(x)
    return out


def _admissible_classes(m: int, count: int, start: int = 1) -> list:
    """(D, rho) classes ordered by D, then rho."""
    out = []
    D = start
    while len(out) < count:
        for rho in range(m + 1):
            if (rho * rho + D) % (4 * m) == 0:
                out.append((D, rho))
        D += 1
    return out


@lru_cache(maxsize=None)
def jacobi_cusp_basis(k: int, m: int, Dmax: int) -> tuple:
    """Exact echelon basis of J^cusp_{k,m}: returns (pivot classes, tables).

    Table i has coefficient delta_ij at pivot class j.  The dimension is the
    exact rank of the spanning set.
    """
    if k % 2 or k < 4:
        raise DomainError("even weight k >= 4 required")
    raw = _index_m_raw(k, m, Dmax)
    if not raw:
        return (), ()
    classes = _admissible_classes(m, 400)
    classes = [c for c in classes if c[0] <= Dmax]
    M = [[Fraction(t.data.get(c, 0)) for c in classes] for t in raw]
    # row-reduce the spanning set over Q, choosing pivots by increasing D
    rows = [list(r) for r in M]
    pivots = []
    basis_rows = []
    tabs = list(raw)
    used = [False] * len(rows)
    comb = [[Fraction(int(i == j)) for j in range(len(rows))] for i in range(len(rows))]
    for ci in range(len(classes)):
        p = next((i for i in range(len(rows)) if not used[i] and rows[i][ci] != 0), None)
        if p is None:
            continue
        used[p] = True
        pv = rows[p][ci]
        rows[p] = [x / pv for x in rows[p]]
        comb[p] = [x / pv for x in comb[p]]
        for i in range(len(rows)):
            if i != p and rows[i][ci] != 0:
                f = rows[i][ci]
                rows[i] = [a - f * b for a, b in zip(rows[i], rows[p])]
                comb[i] = [a - f * b for a, b in zip(comb[i], comb[p])]
        pivots.append((ci, p))
    out = []
    for ci, p in pivots:
        data = {}
        for coef, t in zip(comb[p], tabs):
            if coef:
                for key, v in t.data.items():
                    data[key] = data.get(key, 0) + coef * v
        data = {key: (int(v) if isinstance(v, Fraction) and v.denominator == 1 else v) for key, v in data.items() if v != 0}
        out.append(JacobiCoeffTable(k, m, Dmax, data))
    piv = tuple(classes[ci] for ci, _ in pivots)
    # order by pivot D
    order = sorted(range(len(piv)), key=lambda i: piv[i])
    return tuple(piv[i] for i in order), tuple(out[i] for i in order)


def jacobi_cusp_dim(k: int, m: int) -> int:
    """dim J^cusp_{k,m} for even k >= 4 from the classical dimension formula (oracle only)."""
    def dimM(w):
        if w < 0 or w % 2 or w == 2:
            return 0
        return w // 12 + (0 if w % 12 == 2 else 1)

    total = sum(dimM(k + 2 * j) - math.ceil(j * j / (4 * m)) for j in range(m + 1))
    eis = sum(1 for f in range(1, math.isqrt(m) + 1) if m % (f * f) == 0)
    return total - eis


# ============================================================================
# Evaluation of coefficient tables
# ============================================================================


def _table_terms(tables, Dmax: int | None = None, shift: int = 0):
    """All (n, r) with 0 < 4nm - r^2 <= Dmax and the coefficient matrix (forms x terms).

    ``shift`` >= max |y|/v widens the r-window: off the strip |y| <= v the
    dominant terms sit near r = -2 m y/v, where n is large but D is not.
    """
    tables = list(tables)
    m = tables[0].m
    Dmax = min(t.Dmax for t in tables) if Dmax is None else Dmax
    ns, rs, keys = [], [], []
    nmax = (Dmax + m * m) // (4 * m) + 1
    R = math.isqrt(4 * nmax * m) + 2 * m * shift
    for r in range(-R, R + 1):
        for n in range((r * r) // (4 * m) + 1, (Dmax + r * r) // (4 * m) + 1):
            D = 4 * n * m - r * r
            ns.append(n)
            rs.append(r)
            keys.append((D, _canon(r, m)))
    coef = np.array([[complex(t.data.get(key, 0)) for key in keys] for t in tables], dtype=complex)
    return np.array(ns, dtype=np.int64), np.array(rs, dtype=np.int64), coef


def _shift_of(vs, ys) -> int:
    ratio = np.max(np.abs(np.asarray(ys, dtype=float)) / np.asarray(vs, dtype=float), initial=0.0)
    return max(0, math.ceil(float(ratio)) - 1)


@njit(parallel=True)
def _forms_kernel(ns, rs, cre, cim, k_half, m, us, vs, xs, ys, out_re, out_im):
    # out[p, f] = sum_t c[f, t] exp(-2 pi (n v + r y) + k_half log v - 2 pi m y^2/v) e(n u + r x)
    nf = cre.shape[0]
    for p in prange(us.shape[0]):
        u, v, x, y = us[p], vs[p], xs[p], ys[p]
        base0 = k_half * math.log(v) - TWO_PI * m * y * y / v
        for t in range(ns.shape[0]):
            lg = base0 - TWO_PI * (ns[t] * v + rs[t] * y)
            if lg < -745.0:
                continue
            mag = math.exp(lg)
            ang = TWO_PI * ((ns[t] * u + rs[t] * x) % 1.0)
            er = mag * math.cos(ang)
            ei = mag * math.sin(ang)
            for f in range(nf):
                out_re[p, f] += cre[f, t] * er - cim[f, t] * ei
                out_im[p, f] += cre[f, t] * ei + cim[f, t] * er


def _forms_numpy(ns, rs, coef, k_half, m, us, vs, xs, ys):
    out = np.empty((us.size, coef.shape[0]), dtype=complex)
    for s in range(0, us.size, 256):
        sl = slice(s, s + 256)
        u, v, x, y = us[sl, None], vs[sl, None], xs[sl, None], ys[sl, None]
        lg = k_half * np.log(v) - TWO_PI * m * y * y / v - TWO_PI * (ns * v + rs * y)
        ang = TWO_PI * np.mod(ns * u + rs * x, 1.0)
        E = np.exp(np.maximum(lg, -745.0) + 1j * ang) * (lg >= -745.0)
        out[sl] = E @ coef.T
    return out


def _eval_forms(ns, rs, coef, k_half, m, us, vs, xs, ys) -> np.ndarray:
    us, vs, xs, ys = (np.ascontiguousarray(np.broadcast_to(np.asarray(a, dtype=float), np.broadcast(us, vs, xs, ys).shape)).ravel() for a in (us, vs, xs, ys))
    if NUMBA_AVAILABLE:
        ore = np.zeros((us.size, coef.shape[0]))
        oim = np.zeros_like(ore)
        _forms_kernel(ns, rs, np.ascontiguousarray(coef.real), np.ascontiguousarray(coef.imag), float(k_half), float(m), us, vs, xs, ys, ore, oim)
        return ore + 1j * oim
    return _forms_numpy(ns, rs, coef, float(k_half), float(m), us, vs, xs, ys)


def jacobi_eval(table: JacobiCoeffTable, p: JacobiPoint) -> complex:
    """phi(tau, z) from its coefficient table (no weight factor)."""
    ns, rs, coef = _table_terms([table], shift=_shift_of(p.v, p.y))
    return complex(_eval_forms(ns, rs, coef, 0.0, 0.0, p.u, p.v, p.x, p.y)[0, 0])


def _fourier_tail(tables, k: int, m: int, v: float, Dmax: int) -> float:
    """Extrapolated bound for the weighted terms beyond Dmax at height v.

    Cusp-form coefficients obey |c(D)| << D^(k/2 - 3/4 + eps); the growth
    constant is fitted on the stored range with exponent k/2 - 1/2 for margin.
    """
    e = k / 2 - 0.5
    worst = 0.0
    for t in tables:
        A = max((abs(complex(c)) / D**e for (D, _), c in t.data.items() if D > 0), default=0.0)
        worst = max(worst, A)
    if worst == 0:
        return 0.0
    gauss = 1 + 1 / math.sqrt(2 * m * v)
    s = 0.0
    D = Dmax + 1
    while True:
        term = 2 * (m + 1) * worst * math.exp(e * math.log(D) - math.pi * D * v / (2 * m) + (k / 2) * math.log(v)) * gauss
        s += term
        if D > Dmax + 10 and term < 1e-30 * max(s, 1e-300) or D > 100 * Dmax + 1000:
            break
        D += 1
    return s


# ============================================================================
# Poincare series
# ============================================================================


@dataclass(frozen=True)
class PoincareSpec:
    """Poincare series P^{n0,r0}_{k,m} with truncation radii and Fourier contour.

    ``cmax`` is the radius on |c tau + d| (it bounds |c| v as well) and
    ``lmax`` sets the Gaussian depth lmax^2 of the Heisenberg lambda-window.
    Both are raised automatically when the certified tail asks for it.
    """

    k: int
    m: int
    n0: int
    r0: int
    cmax: int = 30
    lmax: int = 0
    contour_v: float = 1.2

    def __post_init__(self):
        if self.k < 10 or self.k % 2:
            raise DomainError(f"Poincare series need even k >= 10, got {self.k}")
        if self.m < 1 or self.n0 < 1:
            raise DomainError("m >= 1 and n0 >= 1 required")
        if self.D0 <= 0:
            raise DomainError(f"4 n0 m - r0^2 = {self.D0} must be positive")
        if not self.contour_v > 1:
            raise DomainError("contour_v must exceed 1")
        if self.cmax < 1:
            raise DomainError("cmax >= 1")
        if self.lmax <= 0:
            object.__setattr__(self, "lmax", math.ceil(4 / math.sqrt(self.m * self.contour_v)) + 6)

    @property
    def D0(self) -> int:
        return 4 * self.n0 * self.m - self.r0 * self.r0

    @classmethod
    def of_class(cls, k: int, m: int, D: int, rho: int, **kw) -> "PoincareSpec":
        num = D + rho * rho
        if num % (4 * m):
            raise DomainError(f"({D}, {rho}) is not an admissible class for index {m}")
        return cls(k, m, num // (4 * m), rho, **kw)


@dataclass(frozen=True)
class PoincareNormalizer:
    """lambda with <phi, P^{n,r}> = lambda c_phi(n, r) for the measure in the module docstring.

    lambda = Gamma(k - 3/2) (pi D/m)^(3/2 - k) (4m)^(-1/2), D = 4nm - r^2.
    """

    k: int
    m: int
    n: int
    r: int

    @property
    def D(self) -> int:
        return 4 * self.n * self.m - self.r * self.r

    @property
    def log_value(self) -> float:
        if self.D <= 0:
            raise DomainError("normalizer needs a positive discriminant")
        ell = self.k - 1.5
        return math.lgamma(ell) - ell * math.log(math.pi * self.D / self.m) - 0.5 * math.log(4 * self.m)

    @property
    def value(self) -> float:
        return math.exp(self.log_value)

    @classmethod
    def of_spec(cls, spec: PoincareSpec) -> "PoincareNormalizer":
        return cls(spec.k, spec.m, spec.n0, spec.r0)


def _lattice_tail(k: int, v: float, diam: float, R: float, C1: float, C2: float) -> float:
    """Bound on sum over w in Z tau + Z, |w| > R, of C1 |w|^-k + C2 |w|^(1-k).

    Uses #{|w| <= s} <= pi (s + diam)^2 / v and summation by parts.
    """
    g = (math.pi / v) * (1 + diam / R) ** 2
    return g * (C1 * k * R ** (2 - k) / (k - 2) + C2 * (k - 1) * R ** (3 - k) / (k - 3))


def _cosets(R: float, umin: float, umax: float, vmin: float) -> np.ndarray:
    """Rows (a, b, c, d) of SL_2(Z) representatives mod +-1 with c >= 0 that can satisfy |c tau + d| <= R."""
    rows = [(1, 0, 0, 1)]
    for c in range(1, int(R / vmin) + 1):
        for d in range(math.floor(-R - c * umax), math.ceil(R - c * umin) + 1):
            if math.gcd(c, d) == 1:
                a = pow(d % c, -1, c) if c > 1 else 0
                b = (a * d - 1) // c
                rows.append((a, b, c, d))
    return np.array(rows, dtype=np.int64)


@njit(parallel=True)
def _poincare_kernel(k, m, n0, seeds, us, vs, xs, ys, cos_, R, L, logeps, out_re, out_im, out_abs, out_tail):
    for p in prange(us.shape[0]):
        u, v, x, y = us[p], vs[p], xs[p], ys[p]
        tau = complex(u, v)
        z = complex(x, y)
        D0 = 4.0 * n0 * m - seeds[0] * seeds[0]
        logscale = TWO_PI * m * y * y / v - math.pi * D0 * v / (2.0 * m)
        sre = 0.0
        sim = 0.0
        sab = 0.0
        tail = 0.0
        for i in range(cos_.shape[0]):
            a, b, c, d = cos_[i, 0], cos_[i, 1], cos_[i, 2], cos_[i, 3]
            w = c * tau + d
            aw = abs(w)
            if aw > R:
                continue
            tp = (a * tau + b) / w
            zp = z / w
            vp = tp.imag
            q = c * z * z / w
            lp = -k * math.log(aw) + TWO_PI * m * q.imag
            ph = -k * math.atan2(w.imag, w.real) - TWO_PI * m * (q.real % 1.0)
            logpeak = -k * math.log(aw) + TWO_PI * m * y * y / v - math.pi * D0 * vp / (2.0 * m)
            Lw = logpeak - logscale - logeps
            if Lw > L:
                Lw = L
            gfac = 2.0 + aw / math.sqrt(2.0 * m * v)
            if Lw <= 0.0:
                tail += 2.0 * math.exp(logpeak) * gfac
                continue
            tail += 2.0 * math.exp(logpeak - Lw) * gfac
            W = math.sqrt(Lw / (TWO_PI * m * vp))
            Q = cmath.exp(2j * math.pi * 2 * m * tp)
            for s in range(seeds.shape[0]):
                r0 = seeds[s]
                lamc = -(r0 / (2.0 * m) + zp.imag / vp)
                lo = math.ceil(lamc - W)
                hi = math.floor(lamc + W)
                if hi < lo:
                    continue
                lam0 = min(max(round(lamc), lo), hi)
                # consecutive terms differ by e((r0 +- m + 2 m lam) tau' + 2 m z'), itself geometric in lam
                n = n0 + r0 * lam0 + m * lam0 * lam0
                r = r0 + 2 * m * lam0
                lg = lp - TWO_PI * (n * vp + r * zp.imag)
                ang = ph + TWO_PI * ((n * tp.real + r * zp.real) % 1.0)
                T0 = cmath.exp(complex(lg, ang))
                acc = T0
                mag = abs(T0)
                T = T0
                rho = cmath.exp(2j * math.pi * ((r0 + m + 2 * m * lam0) * tp + 2 * m * zp))
                for lam in range(lam0 + 1, hi + 1):
                    T = T * rho
                    rho = rho * Q
                    acc += T
                    mag += abs(T)
                T = T0
                rho = cmath.exp(-2j * math.pi * ((r0 - m + 2 * m * lam0) * tp + 2 * m * zp))
                for lam in range(lam0 - 1, lo - 1, -1):
                    T = T * rho
                    rho = rho * Q
                    acc += T
                    mag += abs(T)
                sre += acc.real
                sim += acc.imag
                sab += mag
        out_re[p] = sre
        out_im[p] = sim
        out_abs[p] = sab
        out_tail[p] = tail


def _poincare_numpy(k, m, n0, seeds, us, vs, xs, ys, cos_, R, L, logeps):
    tau = us + 1j * vs
    z = xs + 1j * ys
    D0 = 4.0 * n0 * m - seeds[0] ** 2
    logscale = TWO_PI * m * ys * ys / vs - math.pi * D0 * vs / (2.0 * m)
    acc = np.zeros(us.size, dtype=complex)
    sab = np.zeros(us.size)
    tail = np.zeros(us.size)
    for a, b, c, d in cos_:
        w = c * tau + d
        aw = np.abs(w)
        live = aw <= R
        if not live.any():
            continue
        tp = (a * tau + b) / w
        zp = z / w
        vp = tp.imag
        q = c * z * z / w
        lp = -k * np.log(aw) + TWO_PI * m * q.imag
        ph = -k * np.angle(w) - TWO_PI * m * np.mod(q.real, 1.0)
        logpeak = -k * np.log(aw) + TWO_PI * m * ys * ys / vs - math.pi * D0 * vp / (2.0 * m)
        Lw = np.minimum(logpeak - logscale - logeps, L)
        gfac = 2.0 + aw / math.sqrt(2.0 * m) / np.sqrt(vs)
        skip = live & (Lw <= 0)
        tail += np.where(skip, 2.0 * np.exp(logpeak) * gfac, 0.0)
        run = live & (Lw > 0)
        if not run.any():
            continue
        tail += np.where(run, 2.0 * np.exp(logpeak - np.maximum(Lw, 0)) * gfac, 0.0)
        W = np.sqrt(np.maximum(Lw, 0) / (TWO_PI * m * vp))
        for r0 in seeds:
            lamc = -(r0 / (2.0 * m) + zp.imag / vp)
            lo = np.where(run, np.ceil(lamc - W), 1).astype(np.int64)
            hi = np.where(run, np.floor(lamc + W), 0).astype(np.int64)
            if not run.any() or hi.max(initial=-10**9) < lo.min(initial=10**9):
                continue
            for lam in range(int(lo[run].min()), int(hi[run].max()) + 1):
                sel = run & (lo <= lam) & (lam <= hi)
                if not sel.any():
                    continue
                n = n0 + r0 * lam + m * lam * lam
                r = r0 + 2 * m * lam
                lg = lp - TWO_PI * (n * vp + r * zp.imag)
                ok = sel & (lg >= -745.0)
                mag = np.exp(np.where(ok, lg, -745.0)) * ok
                ang = ph + TWO_PI * np.mod(n * tp.real + r * zp.real, 1.0)
                acc += mag * np.exp(1j * ang)
                sab += mag
    return acc, sab, tail


_POINCARE_TOL = 1e-13


def _poincare_samples(spec: PoincareSpec, us, vs, xs, ys, tol: float):
    """Values, accumulated magnitudes and certified tails at many points."""
    us, vs, xs, ys = (np.ascontiguousarray(np.asarray(a, dtype=float).ravel()) for a in (us, vs, xs, ys))
    if np.any(vs <= 0):
        raise DomainError("points need v > 0")
    k, m = spec.k, spec.m
    seeds = np.array([spec.r0, -spec.r0], dtype=np.int64)
    vmin = float(vs.min())
    diam = float(np.max(np.maximum(np.abs(us + 1j * vs + 1), np.abs(us + 1j * vs - 1))))
    ymax = float(np.max(ys * ys / vs))
    # smallest identity-coset peak sets the relative tail target
    logscale = float(np.min(TWO_PI * m * ys * ys / vs - math.pi * spec.D0 * vs / (2.0 * m)))
    pref = 2.0 * math.exp(TWO_PI * m * ymax)
    target = tol * math.exp(logscale) * 0.25
    R = float(spec.cmax)
    while _lattice_tail(k, vmin, diam, R, pref, pref / math.sqrt(2 * m * vmin)) > target:
        R *= 1.25
        if R > 64 * spec.cmax:
            raise TruncationError(
                f"Poincare radius would exceed {64 * spec.cmax}", achieved=_lattice_tail(k, vmin, diam, R, pref, pref)
            )
    latt = _lattice_tail(k, vmin, diam, R, pref, pref / math.sqrt(2 * m * vmin))
    cos_ = _cosets(R, float(us.min()), float(us.max()), vmin)
    L = float(spec.lmax) ** 2
    # per-coset window depth: neglected pieces stay far below the tail budget
    logeps = math.log(tol) - 15.0
    if NUMBA_AVAILABLE:
        ore, oim, oab, otl = (np.zeros(us.size) for _ in range(4))
        _poincare_kernel(float(k), float(m), spec.n0, seeds, us, vs, xs, ys, cos_, R, L, logeps, ore, oim, oab, otl)
        vals = ore + 1j * oim
    else:
        vals, oab, otl = _poincare_numpy(float(k), float(m), spec.n0, seeds, us, vs, xs, ys, cos_, R, L, logeps)
    tails = otl + latt
    return vals, oab, tails, R


def poincare_eval(spec: PoincareSpec, p: JacobiPoint, policy: PrecisionPolicy | None = None) -> LogComplex:
    """P^{n0,r0}_{k,m}(tau, z) with a certified truncation tail.

    The sum runs over coprime (c, d) mod +-1 with |c tau + d| <= R and both
    seeds r0 and -r0 (the -M terms).  Raises TruncationError when the tail
    exceeds ``policy.tail_tol`` times the accumulated absolute magnitude.
    """
    tol = policy.tail_tol if policy is not None else _POINCARE_TOL
    vals, mags, tails, R = _poincare_samples(spec, [p.u], [p.v], [p.x], [p.y], tol)
    if tails[0] > tol * mags[0]:
        raise TruncationError(f"Poincare tail {tails[0]:.3g} exceeds {tol:.3g} x {mags[0]:.3g}", achieved=float(tails[0] / mags[0]))
    return LogComplex.from_complex(complex(vals[0]))


def _sup_majorant(spec: PoincareSpec, v2: float = 1.0) -> float:
    """sup over u, x of |P| at height v2 on y = 0 (both seeds, every (c, d))."""
    k, m = spec.k, spec.m
    f = lambda s: s ** (-k) * (1 + s / math.sqrt(2 * m * v2))
    tot = 2 * (1 + 1 / math.sqrt(2 * m * v2))  # identity coset, both seeds
    # for fixed c >= 1 the values c u + d are spaced by 1: sum_d f <= 2 sum_j f(sqrt(c^2 v2^2 + j^2))
    C = 200
    for c in range(1, C + 1):
        s = 0.0
        for j in range(0, 400):
            s += f(math.hypot(c * v2, j))
        s += 399.0 ** (1 - k) / (k - 1) + 399.0 ** (2 - k) / ((k - 2) * math.sqrt(2 * m * v2))
        tot += 2 * 2 * s
    tot += 2 * _lattice_tail(k, v2, math.hypot(1, v2) + 1, C * v2, 1.0, 1 / math.sqrt(2 * m * v2))
    return tot


def _next_pow2(x: int) -> int:
    return 1 << max(3, (int(x) - 1).bit_length())


def poincare_fourier(spec: PoincareSpec, nmax: int, rmax: int | None = None, grid: int | None = None,
                     tol: float = 1e-12) -> JacobiCoeffTable:
    """C(n, r; P^{n0,r0}) for n <= nmax, |r| <= rmax by a 2-D DFT on u, x at v = contour_v, y = 0.

    The table stores the value at the smallest representative of each class;
    ``meta`` carries the per-class error bound (aliasing + truncation tails
    amplified by e^{2 pi n v}) and the spread between representatives.
    """
    m = spec.m
    rmax = m if rmax is None else rmax
    if nmax < 1 or rmax < m:
        raise DomainError("need nmax >= 1 and rmax >= m")
    G = _next_pow2(8 * (nmax + m * rmax)) if grid is None else int(grid)
    if G < 4 * (nmax + rmax):
        raise DomainError("grid too small")
    if G % 2:
        raise DomainError("grid must be even")
    v = spec.contour_v
    # on y = 0: P(u, -x) = P(u, x) for even k and P(-u, x) = conj P(u, x) for real coefficients,
    # so the quarter 0 <= u, x <= 1/2 determines the torus
    h = G // 2
    g = np.arange(h + 1) / G
    U, X = np.meshgrid(g, g, indexing="ij")
    q, mags, tails, R = _poincare_samples(spec, U.ravel(), np.full(U.size, v), X.ravel(), np.zeros(U.size), tol)
    if np.any(tails > tol * mags):
        raise TruncationError("Poincare tail budget exceeded on the Fourier grid", achieved=float(np.max(tails / mags)))
    q = q.reshape(h + 1, h + 1)
    vals = np.empty((G, G), dtype=complex)
    vals[: h + 1, : h + 1] = q
    vals[: h + 1, h + 1 :] = q[:, 1:h][:, ::-1]
    vals[h + 1 :, :] = np.conj(vals[1:h][::-1, :])
    F = np.fft.fft2(vals) / (G * G)
    B = _sup_majorant(spec, v / 2)
    samp_err = float(np.max(tails)) + 4e-16 * float(np.max(mags))
    out, err, spread, raw = {}, {}, {}, {}
    for n in range(1, nmax + 1):
        # aliases (n + aG, r + bG) with a >= 1; |c(n, r)| <= B e^{2 pi n v/2} from the height-v/2 majorant
        alias = 0.0
        nn = n + G
        while True:
            t = B * (4 * math.sqrt(m * nn) + 1) * math.exp(-TWO_PI * (v / 2) * nn)
            alias += t
            if t < 1e-30 * alias or nn > n + 200 * G:
                break
            nn += G
        amp = math.exp(TWO_PI * n * v)
        for r in range(-rmax, rmax + 1):
            D = 4 * n * m - r * r
            if D <= 0:
                continue
            c = complex(F[n % G, r % G]) * amp
            key = (D, _canon(r, m))
            raw[(n, r)] = c
            e = amp * (alias + samp_err)
            if key not in out or e < err[key]:
                if key in out:
                    spread[key] = max(spread.get(key, 0.0), abs(out[key] - c))
                out[key], err[key] = c, e
            else:
                spread[key] = max(spread.get(key, 0.0), abs(out[key] - c))
            if alias * amp > 1e-10 * max(abs(c), 1.0):
                raise TruncationError(f"aliasing budget exceeded at (n, r) = ({n}, {r})", achieved=alias * amp)
    Dmax = 4 * m * nmax - m * m
    data = {key: c for key, c in out.items() if key[0] <= Dmax}
    return JacobiCoeffTable(spec.k, m, Dmax, data, meta={"error": {key: err[key] for key in data}, "spread": spread, "grid": G, "radius": R, "raw": raw})


def delta_count(m: int, l: int, r: int, l2: int, r2: int) -> int:
    """#{(A, lam) in {+-1} x Z : [[l, r/2], [r/2, m]] transformed by [[A, 0], [lam, 1]] equals [[l2, r2/2], [r2/2, m]]}.

    The transform sends (l, r) to (l + A r lam + m lam^2, A r + 2 m lam).
    """
    if 4 * l * m - r * r <= 0 or 4 * l2 * m - r2 * r2 <= 0:
        raise DomainError("both index pairs need positive discriminant")
    if 4 * l * m - r * r != 4 * l2 * m - r2 * r2:
        return 0
    count = 0
    for A in (1, -1):
        num = r2 - A * r
        if num % (2 * m):
            continue
        lam = num // (2 * m)
        if l + A * r * lam + m * lam * lam == l2:
            count += 1
    return count


def petersson_trace(k: int, m: int, n1: int, r1: int, n2: int, r2: int, fourier: JacobiCoeffTable | None = None) -> complex:
    """sum over an orthonormal basis of c_phi(n1, r1) conj(c_phi(n2, r2)) = C(n1, r1; P^{n2,r2}) / lambda(n2, r2)."""
    if 4 * n1 * m - r1 * r1 <= 0 or 4 * n2 * m - r2 * r2 <= 0:
        raise DomainError("both index pairs need positive discriminant")
    if fourier is None:
        fourier = poincare_fourier(PoincareSpec(k, m, n2, r2), max(n1, 1), max(abs(r1), m))
    D1 = 4 * n1 * m - r1 * r1
    # the class table stops at 4 m nmax - m^2; the raw grid still holds (n1, r1)
    c = fourier.meta.get("raw", {}).get((n1, r1), fourier.data.get((D1, _canon(r1, m))))
    if c is None:
        raise DomainError("Fourier table does not reach the requested coefficient")
    return complex(c) / PoincareNormalizer(k, m, n2, r2).value


# ============================================================================
# Gram bases from the trace formula
# ============================================================================


@dataclass
class GramBasis:
    """Orthonormal basis of J^cusp_{k,m} assembled from Poincare series.

    ``gram[i][j] = <P_i, P_j>``; ``ortho[:, t]`` expresses the t-th orthonormal
    form as a combination of the P_i.  ``coeff_tables`` hold the orthonormal
    forms up to ``Dmax``, obtained by expanding each P_i in the exact echelon
    basis ``echelon`` (coefficient 1 at its pivot class, 0 at the others)
    through ``kernel[a][b] = sum_phi c_phi(a) conj c_phi(b)`` on pivot classes.
    """

    k: int
    m: int
    specs: list
    gram: np.ndarray
    rank: int
    ortho: np.ndarray
    coeff_tables: list
    pivots: tuple = ()
    echelon: tuple = ()
    kernel: np.ndarray | None = None
    lambdas: np.ndarray | None = None
    Dmax: int = 0
    diagnostics: dict = field(default_factory=dict)
    _terms: tuple | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return len(self.pivots)

    def terms(self, shift: int = 0):
        if self._terms is None:
            self._terms = {}
        if shift not in self._terms:
            self._terms[shift] = _table_terms(self.coeff_tables, self.Dmax, shift)
        return self._terms[shift]

    def values(self, us, vs, xs, ys) -> np.ndarray:
        """Weighted values v^{k/2} e^{-2 pi m y^2/v} psi_t(tau, z), shape (points, rank)."""
        ns, rs, coef = self.terms(_shift_of(vs, ys))
        return _eval_forms(ns, rs, coef, self.k / 2, self.m, us, vs, xs, ys)

    def mass(self, us, vs, xs, ys) -> np.ndarray:
        vals = self.values(us, vs, xs, ys)
        return np.sum(np.abs(vals) ** 2, axis=1)

    def tail_bound(self, v: float) -> float:
        return _fourier_tail(self.coeff_tables, self.k, self.m, v, self.Dmax)


def default_Dmax(k: int, m: int, vmin: float = 0.866, depth: float = 40.0) -> int:
    """Smallest D where D^{k/2} e^{-pi D v/(2m)} has fallen e^{-depth} below its peak."""
    f = lambda D: (k / 2) * math.log(D) - math.pi * D * vmin / (2 * m)
    Dpk = max(1.0, k * m / (math.pi * vmin))
    top = f(Dpk)
    D = int(Dpk) + 1
    while f(D) > top - depth:
        D += 1
    return D


def _spanning_classes(m: int, count: int) -> list:
    return _admissible_classes(m, count)[:count]


@lru_cache(maxsize=256)
def _class_fourier(k: int, m: int, D: int, rho: int, nmax: int, tol: float) -> dict:
    spec = PoincareSpec.of_class(k, m, D, rho)
    return poincare_fourier(spec, nmax=nmax, rmax=m, tol=tol).meta["raw"]


def _fourier_matrix(k: int, m: int, classes: list, tol: float) -> np.ndarray:
    """C[a, b] = C(class a; P^{class b}) from Fourier extraction.

    Only a <= b (by n) is extracted directly: a coefficient below the seed is
    read off with the seed's own size, so it keeps full relative accuracy.
    The rest follow from <P_a, P_b> = conj <P_b, P_a>.
    """
    lam = np.array([PoincareNormalizer(k, m, (D + r * r) // (4 * m), r).value for D, r in classes])
    n_of = [(D + r * r) // (4 * m) for D, r in classes]
    C = np.full((len(classes), len(classes)), np.nan, dtype=complex)
    for b, (Db, rb) in enumerate(classes):
        raw = _class_fourier(k, m, Db, rb, n_of[b], tol)
        for a, (Da, ra) in enumerate(classes):
            if n_of[a] <= n_of[b]:
                C[a, b] = raw[(n_of[a], ra)]
    for a in range(len(classes)):
        for b in range(len(classes)):
            if np.isnan(C[a, b]):
                # C(a; P_b)/lambda_b = conj(C(b; P_a))/lambda_a
                C[a, b] = np.conj(C[b, a]) * lam[b] / lam[a]
    return C


@lru_cache(maxsize=32)
def _gram_cached(k: int, m: int, classes: tuple, Dmax: int, rank_tol: float, tol: float):
    return _gram_build(k, m, list(classes), Dmax, rank_tol, tol)


def gram_orthobasis(k: int, m: int, specs: list | None = None, rank_tol: float = 1e-8,
                    Dmax: int | None = None, tol: float = 1e-10) -> GramBasis:
    """Orthonormal basis from the Gram matrix of Poincare series via the trace formula.

    ``specs`` defaults to the smallest admissible classes, twice the rank of
    the echelon basis, extended by two more while the numerical rank still grows.
    """
    if specs is not None:
        if not specs:
            raise DomainError("spec list must be non-empty")
        if any((s.k, s.m) != (k, m) for s in specs):
            raise DomainError("all specs must share (k, m)")
        classes = tuple(dict.fromkeys((s.D0, _canon(s.r0, m)) for s in specs))
    else:
        classes = None
    Dmax = default_Dmax(k, m) if Dmax is None else int(Dmax)
    if classes is None:
        piv, _ = jacobi_cusp_basis(k, m, Dmax)
        count = max(2 * len(piv), 1)
        while True:
            classes = tuple(_spanning_classes(m, count))
            gb = _gram_cached(k, m, classes, Dmax, rank_tol, tol)
            more = tuple(_spanning_classes(m, count + 2))
            gb2 = _gram_cached(k, m, more, Dmax, rank_tol, tol)
            if gb2.rank == gb.rank:
                break
            count += 2
        return gb
    return _gram_cached(k, m, classes, Dmax, rank_tol, tol)


def _gram_build(k: int, m: int, classes: list, Dmax: int, rank_tol: float, tol: float) -> GramBasis:
    piv, ech = jacobi_cusp_basis(k, m, Dmax)
    if not piv:
        raise DomainError(f"J^cusp_{{{k},{m}}} is zero")
    allc = list(dict.fromkeys(list(piv) + list(classes)))
    C = _fourier_matrix(k, m, allc, tol)
    lam = np.array([PoincareNormalizer(k, m, (D + r * r) // (4 * m), r).value for D, r in allc])
    # trace matrix T[a, b] = sum_phi c_phi(a) conj c_phi(b) = C(a; P_b)/lambda_b
    T = C / lam[None, :]
    asym = float(np.max(np.abs(T - T.conj().T)) / np.max(np.abs(T)))
    T = 0.5 * (T + T.conj().T)
    ip = [allc.index(c) for c in piv]
    K = T[np.ix_(ip, ip)]
    isp = [allc.index(c) for c in classes]
    # <P_i, P_j> = lambda_i lambda_j T[j, i]
    lam_s = lam[isp]
    G = (lam_s[:, None] * lam_s[None, :]) * T[np.ix_(isp, isp)].T
    # Poincare norms spread over many orders of magnitude (lambda ~ D^(3/2-k)), so the rank
    # is read off the unit-diagonal rescaling S G S, which has the same rank
    dg = np.sqrt(np.real(np.diag(G)))
    if np.any(dg <= 0):
        raise ContractError("Poincare series with non-positive norm")
    Gs = G / (dg[:, None] * dg[None, :])
    evals, evecs = np.linalg.eigh(Gs)
    top = float(np.max(np.abs(evals)))
    if np.any(evals < -rank_tol * top):
        raise ContractError(f"indefinite Gram matrix (min eigenvalue {evals.min():.3g}, radius {top:.3g})")
    keep = evals > rank_tol * top
    rank = int(np.sum(keep))
    ortho = (evecs[:, keep] / np.sqrt(evals[keep])[None, :]) / dg[:, None]
    # P_i = lambda_i sum_a K[a, i'] g_a where i' runs over pivots via c_{g_b}(class i)
    Kinv_rows = np.array([[complex(t.data.get(c, 0)) for t in ech] for c in classes])  # c_{g_b}(class i)
    P_in_g = lam_s[:, None] * (Kinv_rows.conj() @ K.T)  # row i: coefficients of P_i on g_a
    # check: pivot coefficients of P_i reproduce the extracted Fourier data
    recon = P_in_g @ np.array([[complex(t.data.get(c, 0)) for c in allc] for t in ech])
    direct = (lam_s[:, None] * T[:, isp].T)
    recon_err = float(np.max(np.abs(recon - direct)) / np.max(np.abs(direct)))
    psi_in_g = ortho.T @ P_in_g  # (rank, dim)
    keys = sorted({key for t in ech for key in t.data})
    mat = np.array([[float(t.data.get(key, 0)) for key in keys] for t in ech])
    coef = psi_in_g @ mat
    tables = [JacobiCoeffTable(k, m, Dmax, {key: complex(c) for key, c in zip(keys, row) if c != 0}) for row in coef]
    specs = [PoincareSpec.of_class(k, m, D, r) for D, r in classes]
    return GramBasis(
        k, m, specs, G, rank, ortho, tables, piv, ech, K, lam_s, Dmax,
        {"trace_asymmetry": asym, "reconstruction_error": recon_err, "eigenvalues": evals.tolist()},
    )


# ============================================================================
# Bergman kernels
# ============================================================================


def bergman_spectral(basis: GramBasis, p: JacobiPoint, tol: float = 1e-10) -> float:
    """log of v^k e^{-4 pi m y^2/v} sum_psi |psi(tau, z)|^2 over the orthonormal basis."""
    val = float(basis.mass(p.u, p.v, p.x, p.y)[0])
    tail = basis.tail_bound(p.v)
    if not val > 0:
        raise ContractError("non-positive spectral mass")
    # |psi|^2 error from a Fourier tail t on each form: 2 |psi| t + t^2
    err = basis.rank * (2 * math.sqrt(val) * tail + tail * tail)
    if err > tol * val:
        raise TruncationError(f"Fourier tail {err:.3g} too large at v = {p.v} for Dmax = {basis.Dmax}", achieved=err / val)
    return math.log(val)


def bergman_spectral_many(basis: GramBasis, us, vs, xs, ys) -> np.ndarray:
    """Vectorised log-mass (no per-point tail check; see ``GramBasis.tail_bound``)."""
    return np.log(basis.mass(us, vs, xs, ys))


def bergman_constant(k: int, m: int) -> complex:
    """c with c h(p, p0) the reproducing kernel, h = (tau - conj tau0)^-k e(-m (z - conj z0)^2/(tau - conj tau0))."""
    return (1j ** k) * 2.0 ** (k - 1) * m * (k - 1.5) / math.pi


@njit
def _egcd(a, b):
    x0, x1, y0, y1 = 1, 0, 0, 1
    while b != 0:
        q = a // b
        a, b = b, a - q * b
        x0, x1 = x1, x0 - q * x1
        y0, y1 = y1, y0 - q * y1
    return a, x0, y0


@njit
def _gauss_sum_bound(a):
    # sum_j exp(-a (j - c)^2) <= 1 + sqrt(pi/a)
    return 1.0 + math.sqrt(math.pi / a)


@njit
def _ray_sum(X, beta, s):
    # sum over t = X, X + 1, ... of (t^2 + beta^2)^{-s}; first term plus the smaller of two integral bounds
    Y2 = X * X + beta * beta
    first = Y2 ** (-s)
    gauss = Y2 ** (0.5 - s) * math.sqrt(math.pi) * math.exp(math.lgamma(s - 0.5) - math.lgamma(s)) / 2.0
    if X > 0.0:
        lin = Y2 ** (1.0 - s) / (2.0 * X * (s - 1.0))
        if lin < gauss:
            gauss = lin
    return first + gauss


@njit
def _bergman_geom_kernel(k, m, u, v, x, y, R, L):
    """Sum over SL_2(Z) x Z^2 of the weighted slashed kernel at the diagonal point.

    Returns (re, im, neglected bound within |c tau + d| <= R, term count, sum of |terms|);
    the constant c and the lattice tail beyond R are applied by the caller.
    """
    tau = complex(u, v)
    z = complex(x, y)
    taub = tau.conjugate()
    zb = z.conjugate()
    logw0 = k * math.log(v) - 4.0 * math.pi * m * y * y / v
    logcut = -k * math.log(2.0) - L
    sre = 0.0
    sim = 0.0
    neg = 0.0
    cnt = 0
    sab = 0.0
    cm = int(R / v) + 1
    for c in range(-cm, cm + 1):
        rad2 = R * R - (c * v) ** 2
        if rad2 < 0:
            continue
        rad = math.sqrt(rad2)
        for d in range(math.ceil(-c * u - rad), math.floor(-c * u + rad) + 1):
            if c == 0 and abs(d) != 1:
                continue
            g, s, t = _egcd(d, c)
            if abs(g) != 1:
                continue
            if g < 0:
                s, t = -s, -t
            a0, b0 = s, -t  # a0 d - b0 c = 1
            w = c * tau + d
            aw2 = w.real * w.real + w.imag * w.imag
            vp = v / aw2
            beta = v + vp
            t0 = (a0 * tau + b0) / w
            delta = t0.real - u
            jc = -delta
            al = 2.0 * math.pi * m * v * vp / beta
            glam = _gauss_sum_bound(al)
            # scan j outwards from the centre while the j-majorant can matter
            for sgn in range(2):
                j = round(jc) if sgn == 0 else round(jc) - 1
                while True:
                    A2 = (delta + j) ** 2 + beta * beta
                    lt = 0.5 * k * math.log(v * vp / A2)
                    gmu = 1.0 + math.sqrt(A2 / (2.0 * m * beta))
                    maj = lt + math.log(glam * gmu)
                    if maj < logcut:
                        # remaining j on this side, all with |delta + j| >= X
                        X = abs(delta + j)
                        neg += (v * vp) ** (0.5 * k) * glam * (
                            _ray_sum(X, beta, 0.5 * k) + _ray_sum(X, beta, 0.5 * (k - 1)) / math.sqrt(2.0 * m * beta)
                        )
                        break
                    a = a0 + j * c
                    b = b0 + j * d
                    tp = t0 + j
                    Acx = tp - taub
                    alpha = Acx.real
                    # Gaussian in the lattice z' = z/w + lam' tau' + mu'
                    zw = z / w
                    ystar = y * vp / v
                    lamstar = (ystar - zw.imag) / vp
                    Leff = max(lt - logcut, 0.0)
                    Wl = math.sqrt(Leff / al) + 1.0
                    amu = 2.0 * math.pi * m * beta / A2
                    Wm = math.sqrt(Leff / amu) + 1.0
                    neg += math.exp(lt - Leff) * (2.0 + math.sqrt(math.pi / al)) * (2.0 + math.sqrt(math.pi / amu)) * 2.0
                    for lp in range(math.ceil(lamstar - Wl), math.floor(lamstar + Wl) + 1):
                        yp = zw.imag + lp * vp
                        tt = yp + y
                        xc = x + alpha * tt / beta
                        mustar = xc - zw.real - lp * tp.real
                        for mp in range(math.ceil(mustar - Wm), math.floor(mustar + Wm) + 1):
                            zp = zw + lp * tp + mp
                            lam = lp * a + mp * c
                            mu = lp * b + mp * d
                            # automorphy factor J and kernel h at (tau', z'); weighted by v^k e^{-4 pi m y^2/v}
                            zl = z + lam * tau + mu
                            e1 = m * (lam * lam * tau + 2 * lam * z)
                            e2 = -m * c * zl * zl / w
                            e3 = -m * (zp - zb) ** 2 / Acx
                            lg = logw0 - k * math.log(math.sqrt(aw2)) - k * math.log(abs(Acx)) - TWO_PI * (e1.imag + e2.imag + e3.imag)
                            if lg < logcut - 30.0:
                                continue
                            ang = (-k * (math.atan2(w.imag, w.real) + math.atan2(Acx.imag, Acx.real))
                                   + TWO_PI * ((m * (lam * lam * u + 2 * lam * x)) % 1.0)
                                   + TWO_PI * (e2.real % 1.0) + TWO_PI * (e3.real % 1.0))
                            mag = math.exp(lg)
                            sre += mag * math.cos(ang)
                            sim += mag * math.sin(ang)
                            sab += mag
                            cnt += 1
                    j = j + 1 if sgn == 0 else j - 1
    return sre, sim, neg, cnt, sab


def _geom_lattice_tail(k: int, m: int, v: float, diam: float, R: float) -> float:
    """Bound on the weighted kernel sum over cosets with |c tau + d| > R (all j, lambda, mu)."""
    def T(s):
        return 2 * v ** (-2 * s) + v ** (1 - 2 * s) * math.sqrt(math.pi) * math.exp(math.lgamma(s - 0.5) - math.lgamma(s))
    br = T(k / 2) + T((k - 1) / 2) / math.sqrt(2 * m * v)
    C1 = v**k * br
    C2 = v**k * br / math.sqrt(m * v)
    return _lattice_tail(k, v, diam, R, C1, C2)


def bergman_geometric(k: int, m: int, p: JacobiPoint, cmax: float | None = None, lmax: float = 36.0,
                      tol: float = 1e-8) -> float:
    """log of the Bergman kernel on the diagonal from the kernel sum over the Jacobi group.

    ``cmax`` is the radius on |c tau + d|, ``lmax`` the depth (in nats below the
    identity term) at which (j, lambda, mu) scanning stops.  The result carries
    a certified relative error ``tol``.
    """
    if k < 10 or k % 2:
        raise DomainError("even k >= 10 required")
    red, _ = reduce_point(p)
    u, v, x, y = red.u, red.v, red.x, red.y
    diam = max(abs(complex(u + 1, v)), abs(complex(u - 1, v)))
    ident = m * (k - 1.5) / (2 * math.pi)
    cst = bergman_constant(k, m)
    target = tol * ident
    depth = max(float(lmax), -math.log(tol) + 24.0)
    for _ in range(4):
        R = 2.0 if cmax is None else float(cmax)
        while _geom_lattice_tail(k, m, v, diam, R) * abs(cst) > 0.25 * target:
            R *= 1.25
            if R > 1e4:
                raise TruncationError("geometric radius diverged", achieved=math.inf)
        sre, sim, neg, cnt, sab = _bergman_geom_kernel(float(k), float(m), u, v, x, y, R, depth)
        val = cst * complex(sre, sim)
        # floating-point summation and phase rounding
        rnd = 1e-15 * sab * math.sqrt(cnt + 1.0)
        err = abs(cst) * (neg + rnd + _geom_lattice_tail(k, m, v, diam, R))
        if rnd * abs(cst) > tol * abs(val.real):
            raise TruncationError(f"cancellation: rounding {rnd * abs(cst):.3g} vs value {val.real:.3g}", achieved=rnd * abs(cst) / abs(val.real))
        if val.real > 0 and err <= tol * val.real:
            break
        # cancellation below the identity term: deepen the scan and retry
        shrink = max(ident / max(val.real, 1e-300 * ident), err / max(tol * abs(val.real), 1e-300))
        target = tol * ident / shrink
        depth += math.log(shrink) + 2.0
    if val.real <= 0:
        raise ContractError("non-positive geometric kernel value")
    if err > tol * val.real:
        raise TruncationError(f"geometric kernel error {err:.3g} vs value {val.real:.3g}", achieved=err / val.real)
    if abs(val.imag) > 1e-8 * abs(val.real) + 1e-12 * ident + err:
        raise ContractError(f"geometric kernel not real: {val}")
    return math.log(val.real)


# ============================================================================
# Old-space operators: V_m, U_l and Hecke eigenforms of index 1
# ============================================================================


def _index1_values(table: JacobiCoeffTable, taus, zs) -> np.ndarray:
    taus = np.asarray(taus, dtype=complex)
    zs = np.asarray(zs, dtype=complex)
    ns, rs, coef = _table_terms([table], shift=_shift_of(taus.imag, zs.imag))
    return _eval_forms(ns, rs, coef, 0.0, 0.0, taus.real, taus.imag, zs.real, zs.imag)[:, 0]


def vm_slash_check(phi: JacobiCoeffTable, m: int, p: JacobiPoint) -> float:
    """Relative gap between V_m phi from upper-triangular representatives and from vm_apply.

    The first route is m^(k-1) sum_{ad = m} sum_{b mod d} d^-k phi((a tau + b)/d, a z).
    """
    if phi.m != 1:
        raise DomainError("vm_slash_check needs an index-1 table")
    if m == 1:
        return 0.0
    k = phi.k
    taus, zs, wts = [], [], []
    for a in divisors(m):
        d = m // a
        for b in range(d):
            taus.append((a * p.tau + b) / d)
            zs.append(a * p.z)
            wts.append(float(m) ** (k - 1) * float(d) ** (-k))
    lhs = complex(np.dot(wts, _index1_values(phi, taus, zs)))
    rhs = jacobi_eval(vm_apply(phi, m), p)
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)


def _psi(d: int) -> Fraction:
    out = Fraction(d)
    for q in {q for q in divisors(d) if q > 1 and all(q % s for s in range(2, math.isqrt(q) + 1))}:
        out *= Fraction(q + 1, q)
    return out


def vp_norm_factor(k: int, m: int, lam) -> float:
    """<V_m phi, V_m phi>/<phi, phi> = sum_{d | m} psi(d) d^(k-2) lambda(m/d), psi(t) = t prod_{p | t}(1 + 1/p).

    ``lam`` gives the classical weight 2k-2 Hecke eigenvalues: a callable
    n -> lambda(n) or an ``EigenformData`` (coefficients a(n)).
    """
    if isinstance(lam, EigenformData):
        f = lam
        lam = lambda n: float(f.a[n]) if n <= f.N else f.lam_any(n) * n ** ((f.weight - 1) / 2)
    return float(sum(float(_psi(d)) * float(d) ** (k - 2) * lam(m // d) for d in divisors(m)))


def jacobi_hecke(table: JacobiCoeffTable, ell: int, Dmax: int | None = None) -> JacobiCoeffTable:
    """T_ell on index 1 (ell prime): c*(D) = c(ell^2 D) + ell^(k-2) (-D/ell) c(D) + ell^(2k-3) c(D/ell^2)."""
    if table.m != 1:
        raise DomainError("Hecke operator implemented for index 1")
    k = table.k
    Dmax = table.Dmax // (ell * ell) if Dmax is None else Dmax
    if ell * ell * Dmax > table.Dmax:
        raise TruncationError("table too short for T_ell")
    data = {}
    for D in range(1, Dmax + 1):
        if D % 4 not in (0, 3):
            continue
        s = table(ell * ell * D) + ell ** (k - 2) * kronecker_chi(-D, ell) * table(D)
        if D % (ell * ell) == 0 and (D // (ell * ell)) % 4 in (0, 3):
            s += ell ** (2 * k - 3) * table(D // (ell * ell))
        if s:
            data[(D, D % 2)] = s
    return JacobiCoeffTable(k, 1, Dmax, data)


@dataclass
class JacobiEigenform:
    """Index-1 Hecke eigenform: coefficient table, T_2 eigenvalue and Petersson norm."""

    table: JacobiCoeffTable
    eigenvalue2: float
    norm: float

    def hecke_eigenvalue(self, ell: int) -> float:
        """Eigenvalue of T_ell read off at the first nonzero coefficient."""
        t = self.table
        lim = t.Dmax // (ell * ell)
        scale = max((abs(complex(c)) for (D, _), c in t.data.items() if D <= lim), default=0.0)
        for D in range(3, lim + 1):
            if D % 4 in (0, 3) and abs(complex(t(D))) > 1e-6 * scale:
                img = jacobi_hecke(t, ell, D)
                return float(np.real(complex(img(D)) / complex(t(D))))
        raise TruncationError("table too short to read the Hecke eigenvalue")


def hecke_eigenbasis(basis: GramBasis, Dmax: int | None = None) -> list:
    """Hecke eigenforms of J^cusp_{k,1} with norms from the trace-formula kernel.

    ``Dmax`` extends the exact echelon tables beyond those stored on the basis.
    """
    if basis.m != 1:
        raise DomainError("index 1 only")
    piv, ech = basis.pivots, basis.echelon
    if Dmax is not None and Dmax > basis.Dmax:
        piv2, ech = jacobi_cusp_basis(basis.k, 1, Dmax)
        if tuple(piv2) != tuple(piv):
            raise ContractError("echelon pivots changed with Dmax")
    Dtab = max(basis.Dmax, Dmax or 0)
    d = len(piv)
    need = 4 * max(D for D, _ in piv)
    if need > Dtab:
        raise TruncationError("echelon tables too short for T_2")
    M = np.zeros((d, d))
    for b, g in enumerate(ech):
        img = jacobi_hecke(g, 2, max(D for D, _ in piv))
        for a, (D, _) in enumerate(piv):
            M[a, b] = float(img(D))
    evals, evecs = np.linalg.eig(M)
    order = np.argsort(evals.real)
    Gm = np.linalg.inv(basis.kernel)
    out = []
    keys = sorted({key for t in ech for key in t.data})
    mat = np.array([[float(t.data.get(key, 0)) for key in keys] for t in ech])
    for i in order:
        x = np.real_if_close(evecs[:, i])
        x = np.real(x) / np.real(x[np.argmax(np.abs(x))])
        coef = x @ mat
        tab = JacobiCoeffTable(basis.k, 1, Dtab, {key: float(c) for key, c in zip(keys, coef) if c != 0})
        norm = float(np.real(x.conj() @ Gm @ x))
        out.append(JacobiEigenform(tab, float(evals[i].real), norm))
    return out


def _reduced_mass(basis: GramBasis, us, vs, xs, ys) -> np.ndarray:
    out = np.empty(len(us))
    for i, (u, v, x, y) in enumerate(zip(us, vs, xs, ys)):
        red, _ = reduce_point(JacobiPoint(u, v, x, y))
        out[i] = basis.mass(red.u, red.v, red.x, red.y)[0]
    return out


def mass_old_Ul(k: int, l: int, basis: GramBasis, p: JacobiPoint) -> float:
    """Mass of the U_l image of an orthonormal index-1 basis: v^k e^{-4 pi l^2 y^2/v} sum |phi(tau, l z)|^2.

    U_l preserves norms, so this equals the index-1 mass at (tau, l z).
    """
    if basis.m != 1 or basis.k != k:
        raise DomainError("basis must be the index-1 basis of weight k")
    q = JacobiPoint(p.u, p.v, l * p.x, l * p.y)
    return float(_reduced_mass(basis, [q.u], [q.v], [q.x], [q.y])[0])


def mass_old_Vp(k: int, p_prime: int, eigenforms: list, p: JacobiPoint) -> float:
    """sum_phi v^k e^{-4 pi p y^2/v} |V_p phi|^2 / <V_p phi, V_p phi> over index-1 Hecke eigenforms."""
    tot = 0.0
    for ef in eigenforms:
        if ef.table.k != k:
            raise DomainError("eigenform weight mismatch")
        img = vm_apply(ef.table, p_prime)
        lamp = ef.hecke_eigenvalue(p_prime)
        nf = vp_norm_factor(k, p_prime, lambda n: 1.0 if n == 1 else lamp) * ef.norm
        ns, rs, coef = _table_terms([img], shift=_shift_of(p.v, p.y))
        val = _eval_forms(ns, rs, coef, k / 2, p_prime, p.u, p.v, p.x, p.y)[0, 0]
        tot += abs(val) ** 2 / nf
    return tot


def vp_image_gram(k: int, p_prime: int, eigenforms: list, basis_p: GramBasis) -> np.ndarray:
    """Gram matrix of the V_p images, read through the index-p trace-formula kernel."""
    X = np.array([[complex(vm_apply(ef.table, p_prime, basis_p.Dmax).data.get(c, 0)) for ef in eigenforms] for c in basis_p.pivots])
    Gm = np.linalg.inv(basis_p.kernel)
    return X.conj().T @ Gm @ X


# ============================================================================
# Supremum scans
# ============================================================================


def _grid_points(k: int, grid: dict):
    nu, nv, nx, ny = (int(grid[key]) for key in ("nu", "nv", "nx", "ny"))
    us = np.arange(nu) / nu
    vs = np.exp(np.linspace(math.log(grid["v_lo"]), math.log(grid["v_hi"]), nv))
    xs = np.arange(nx) / nx
    ts = np.arange(ny) / ny
    U, V, X, T = np.meshgrid(us, vs, xs, ts, indexing="ij")
    return U.ravel(), V.ravel(), X.ravel(), (T * V).ravel()


def default_grid(k: int, density: float = 1.0) -> dict:
    s = max(density, 0.25)
    return {
        "nu": max(2, round(8 * s)),
        "nv": max(3, round(16 * s)),
        "nx": max(2, round(8 * s)),
        "ny": max(2, round(8 * s)),
        "v_lo": 0.866,
        "v_hi": float(k),
    }


def sup_scan(functional, k: int, grid: dict | None = None, name: str = "mass", refine: bool = True,
             truncation: dict | None = None) -> MassReport:
    """Grid maximum of a log-mass functional followed by coordinate-descent refinement.

    ``functional(us, vs, xs, ys)`` returns log-mass values on arrays of points.
    The grid covers u, x in [0, 1), v log-spaced in [v_lo, v_hi] and y in [0, v).
    """
    g = dict(default_grid(k))
    if grid:
        g.update(grid)
    U, V, X, Y = _grid_points(k, g)
    vals = np.asarray(functional(U, V, X, Y), dtype=float)
    i = int(np.argmax(vals))
    best = float(vals[i])
    u, v, x, t = float(U[i]), float(V[i]), float(X[i]), float(Y[i] / V[i])
    evals = vals.size
    if refine:
        lo_v, hi_v = math.log(g["v_lo"]), math.log(g["v_hi"])
        coords = [u, math.log(v), x, t]
        steps = [0.5 / g["nu"], (hi_v - lo_v) / max(g["nv"] - 1, 1) / 2, 0.5 / g["nx"], 0.5 / g["ny"]]
        bounds = [(-math.inf, math.inf), (lo_v, hi_v), (-math.inf, math.inf), (0.0, 0.999999)]

        def f(c):
            vv = math.exp(c[1])
            return float(np.asarray(functional(np.array([c[0]]), np.array([vv]), np.array([c[2]]), np.array([c[3] * vv])))[0])

        for _ in range(60):
            moved = False
            for j in range(4):
                for sgn in (1, -1):
                    c = list(coords)
                    c[j] = min(max(c[j] + sgn * steps[j], bounds[j][0]), bounds[j][1])
                    val = f(c)
                    evals += 1
                    if val > best:
                        best, coords, moved = val, c, True
                        break
            if not moved:
                steps = [s / 2 for s in steps]
                if max(steps) < 1e-5:
                    break
        u, v, x, t = coords[0] % 1.0, math.exp(coords[1]), coords[2] % 1.0, coords[3]
    return MassReport(
        functional=name,
        k=k,
        value_log=best,
        argmax={"u": u, "v": v, "x": x, "y": t * v},
        grid={**g, "evaluations": evals, "refined": bool(refine)},
        truncation=dict(truncation or {}),
    )


def jacobi_mass_functional(basis: GramBasis):
    """Vectorised log-mass of an orthonormal basis, suitable for ``sup_scan``."""
    return lambda us, vs, xs, ys: bergman_spectral_many(basis, us, vs, xs, ys)


def sup_jacobi(k: int, m: int = 1, grid: dict | None = None) -> MassReport:
    """sup over the fundamental domain of the J^cusp_{k,m} Bergman mass."""
    basis = gram_orthobasis(k, m)
    g = dict(default_grid(k))
    if grid:
        g.update(grid)
    tail = basis.tail_bound(g["v_lo"])
    return sup_scan(jacobi_mass_functional(basis), k, g, name=f"J_cusp_k{m}",
                    truncation={"Dmax": basis.Dmax, "tail_at_v_lo": tail, "rank": basis.rank})


def sup_old_Ul(k: int, l: int, grid: dict | None = None) -> MassReport:
    """sup of the U_l old-space mass; ``extra`` carries the value both as measured and divided by l."""
    basis = gram_orthobasis(k, 1)

    def f(us, vs, xs, ys):
        return np.log(np.maximum(_reduced_mass(basis, us, vs, l * np.asarray(xs), l * np.asarray(ys)), 1e-300))

    rep = sup_scan(f, k, grid, name=f"U{l}_J_cusp_k1", truncation={"Dmax": basis.Dmax, "rank": basis.rank})
    rep.extra = {"l": l, "value_log_per_l": rep.value_log - math.log(l)}
    return rep


def exponent_fit(points) -> tuple:
    """Least-squares slope of log(sup) against log(k): returns (slope, intercept, rms residual)."""
    pts = [(float(k), float(lv)) for k, lv in points]
    if len(pts) < 4:
        raise DomainError("exponent_fit needs at least 4 points")
    ks = [k for k, _ in pts]
    if any(b <= a for a, b in zip(ks, ks[1:])) or ks[0] <= 0:
        raise DomainError("k values must be positive and strictly increasing")
    x = np.log(ks)
    y = np.array([lv for _, lv in pts])
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - (slope * x + intercept)
    return float(slope), float(intercept), float(np.sqrt(np.mean(res**2)))
