"""Level-one elliptic modular forms, Petersson formulas and L-values.

Conventions
-----------
* ``kappa`` is the weight of an elliptic form; in the moment pipeline it is
  ``2k - 2`` for a Jacobi weight ``k``.
* Petersson norms are not normalised by covolume:
  ``<f, f> = int_F |f|^2 y^kappa dx dy / y^2``.
* ``a(n)`` is the classical coefficient and ``lam(n) = a(n) / n^((kappa-1)/2)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import gmpy2
import mpmath
import numpy as np
from scipy import special

from .errors import ContractError, DomainError, TruncationError
from .massreport import MassReport
from .numkernel import (
    Discriminant,
    PrecisionPolicy,
    bessel_j_array,
    divisors,
    factorint,
    is_prime,
    kloosterman_many,
    kronecker_chi,
    kronecker_table,
    mobius,
    num_divisors,
)

__all__ = [
    "QExpansion",
    "EigenformData",
    "ChebyshevTable",
    "CpValue",
    "DeltaStarResult",
    "dim_cusp",
    "eisenstein",
    "delta_qexp",
    "miller_basis",
    "eigenbasis",
    "petersson_norm_numeric",
    "petersson_delta",
    "chebyshev_table",
    "c_of_p",
    "Level1Spectrum",
    "delta_star",
    "dirichlet_L",
    "afe_weight",
    "afe_weight_gamma",
    "afe_gamma_tail",
    "central_L_twist",
    "sup_mass_Sk",
]


# ============================================================================
# q-expansions with exact coefficients
# ============================================================================


@dataclass(frozen=True)
class QExpansion:
    """Truncated q-expansion a(0..N) with exact integer or rational entries."""

    weight: int
    coeffs: tuple

    @property
    def N(self) -> int:
        return len(self.coeffs) - 1

    @property
    def is_cusp(self) -> bool:
        return self.coeffs[0] == 0

    def __getitem__(self, n):
        return self.coeffs[n]

    def _check(self, other: "QExpansion"):
        if self.N != other.N:
            raise DomainError("q-expansions truncated at different orders")

    def __add__(self, other: "QExpansion") -> "QExpansion":
        self._check(other)
        if self.weight != other.weight:
            raise DomainError("cannot add forms of different weight")
        return QExpansion(self.weight, tuple(a + b for a, b in zip(self.coeffs, other.coeffs)))

    def __sub__(self, other: "QExpansion") -> "QExpansion":
        return self + other.scale(-1)

    def scale(self, c) -> "QExpansion":
        return QExpansion(self.weight, tuple(c * a for a in self.coeffs))

    def __mul__(self, other):
        if not isinstance(other, QExpansion):
            return self.scale(other)
        self._check(other)
        prod = _convolve(self.coeffs, other.coeffs, self.N)
        return QExpansion(self.weight + other.weight, prod)

    def __pow__(self, e: int) -> "QExpansion":
        out = QExpansion(0, (1,) + (0,) * self.N)
        for _ in range(e):
            out = out * self
        return out

    def as_float(self) -> np.ndarray:
        return np.array([float(a) for a in self.coeffs])


def _pack(c, nbytes: int) -> gmpy2.mpz:
    return gmpy2.mpz(int.from_bytes(b"".join(int(x).to_bytes(nbytes, "little") for x in c), "little"))


def _kronecker_mul(a: list, b: list, N: int) -> list:
    """Exact product of integer polynomials mod q^(N+1) by Kronecker substitution.

    Signed coefficients are packed as a difference of two nonnegative
    integers; slots are read back with a borrow so negative entries survive.
    """
    ma = max(abs(x) for x in a) if a else 0
    mb = max(abs(x) for x in b) if b else 0
    if ma == 0 or mb == 0:
        return [0] * (N + 1)
    bits = int(ma).bit_length() + int(mb).bit_length() + (N + 1).bit_length() + 2
    nbytes = (bits + 7) // 8
    A = _pack([x if x > 0 else 0 for x in a], nbytes) - _pack([-x if x < 0 else 0 for x in a], nbytes)
    B = _pack([x if x > 0 else 0 for x in b], nbytes) - _pack([-x if x < 0 else 0 for x in b], nbytes)
    count = min(len(a) + len(b) - 1, N + 1)
    width = 8 * nbytes * count
    prod = (A * B) % (gmpy2.mpz(1) << width)
    raw = int(prod).to_bytes(nbytes * count, "little")
    half, full = 1 << (8 * nbytes - 1), 1 << (8 * nbytes)
    out = []
    borrow = 0
    for i in range(count):
        v = int.from_bytes(raw[i * nbytes : (i + 1) * nbytes], "little") + borrow
        if v >= half:
            v -= full
            borrow = 1
        else:
            borrow = 0
        out.append(v)
    return out + [0] * (N + 1 - count)


def _convolve(a, b, N: int) -> tuple:
    a, b = list(a[: N + 1]), list(b[: N + 1])
    if N < 64 or any(isinstance(x, Fraction) for x in a + b):
        x = np.array(a, dtype=object)
        y = np.array(b, dtype=object)
        return tuple(np.convolve(x, y)[: N + 1].tolist())
    return tuple(_kronecker_mul(a, b, N))


def _sigma_table(r: int, N: int) -> list:
    # int64 is exact while sigma_r(n) < 2^63
    if r * math.log2(max(N, 2)) + math.log2(1 + math.log(max(N, 2))) + 2 < 62:
        s = np.zeros(N + 1, dtype=np.int64)
        for d in range(1, N + 1):
            s[d::d] += d**r
        return [int(x) for x in s]
    s = [0] * (N + 1)
    for d in range(1, N + 1):
        dr = d**r
        for m in range(d, N + 1, d):
            s[m] += dr
    return s


@lru_cache(maxsize=None)
def _bernoulli(n: int) -> Fraction:
    return Fraction(mpmath.bernfrac(n)[0], mpmath.bernfrac(n)[1])


@lru_cache(maxsize=64)
def eisenstein(k: int, N: int) -> QExpansion:
    """Normalised Eisenstein series E_k = 1 - (2k/B_k) sum sigma_{k-1}(n) q^n."""
    if k < 4 or k % 2:
        raise DomainError("Eisenstein series need even k >= 4")
    c = Fraction(-2 * k) / _bernoulli(k)
    sig = _sigma_table(k - 1, N)
    if c.denominator == 1:
        ci = int(c)
        coeffs = [1] + [ci * sig[n] for n in range(1, N + 1)]
    else:
        coeffs = [Fraction(1)] + [c * sig[n] for n in range(1, N + 1)]
    return QExpansion(k, tuple(coeffs))


@lru_cache(maxsize=16)
def delta_qexp(N: int) -> QExpansion:
    """Delta = (E_4^3 - E_6^2) / 1728."""
    E4, E6 = eisenstein(4, N), eisenstein(6, N)
    diff = E4**3 - E6 * E6
    return QExpansion(12, tuple(int(x) // 1728 for x in diff.coeffs))


def dim_cusp(k: int) -> int:
    """Dimension of S_k(SL_2(Z)) for even k."""
    if k % 2 or k < 0:
        return 0
    if k < 12:
        return 0
    return k // 12 - (1 if k % 12 == 2 else 0)


def _eis_product(w: int, N: int) -> QExpansion:
    # a modular form of weight w (w = 0 or w >= 4 even) with constant term 1
    if w == 0:
        return QExpansion(0, (1,) + (0,) * N)
    for b in range(0, w // 6 + 1):
        rest = w - 6 * b
        if rest >= 0 and rest % 4 == 0:
            return eisenstein(4, N) ** (rest // 4) * eisenstein(6, N) ** b
    raise DomainError(f"no Eisenstein monomial of weight {w}")


@lru_cache(maxsize=64)
def miller_basis(k: int, N: int) -> tuple:
    """Echelonised integral basis of S_k with a_i(j) = delta_ij for 1 <= i, j <= d."""
    if k % 2 or k < 12 or k > 200:
        raise DomainError("miller_basis supports even 12 <= k <= 200")
    d = dim_cusp(k)
    if d == 0:
        return ()
    if N < d:
        raise DomainError(f"need N >= {d}")
    Dq = delta_qexp(N)
    forms = []
    Dpow = Dq
    for j in range(1, d + 1):
        forms.append(Dpow * _eis_product(k - 12 * j, N))
        Dpow = Dpow * Dq
    rows = [[Fraction(x) for x in f.coeffs] for f in forms]
    # Delta^j starts at q^j with coefficient 1, so the matrix is unitriangular;
    # back-substitution yields the reduced echelon form.
    for i in range(d - 1, -1, -1):
        for j in range(i + 1, d):
            c = rows[i][j + 1]
            if c:
                rows[i] = [a - c * b for a, b in zip(rows[i], rows[j])]
    out = []
    for r in rows:
        coeffs = tuple(int(a) if a.denominator == 1 else a for a in r)
        out.append(QExpansion(k, coeffs))
    return tuple(out)


# ============================================================================
# Hecke eigenforms
# ============================================================================


@dataclass
class EigenformData:
    """A normalised Hecke eigenform: classical coefficients a(0..N) and norm."""

    weight: int
    level: int
    a: np.ndarray
    norm: float = float("nan")
    norm_method: str = "none"
    exact: tuple | None = field(default=None, repr=False)

    @property
    def N(self) -> int:
        return len(self.a) - 1

    def lam(self, n: int) -> float:
        return float(self.a[n]) / n ** ((self.weight - 1) / 2)

    @property
    def lambdas(self) -> np.ndarray:
        n = np.arange(len(self.a), dtype=float)
        out = np.zeros_like(self.a, dtype=float)
        out[1:] = self.a[1:] / n[1:] ** ((self.weight - 1) / 2)
        return out

    def lam_prime_power(self, p: int, e: int) -> float:
        """lambda(p^e) from lambda(p) by the Hecke recurrence (level 1)."""
        x = self.lam(p)
        prev, cur = 1.0, x
        if e == 0:
            return 1.0
        for _ in range(e - 1):
            prev, cur = cur, x * cur - prev
        return cur

    def lam_any(self, n: int) -> float:
        """lambda(n) for arbitrary n via multiplicativity."""
        if n <= self.N:
            return self.lam(n)
        out = 1.0
        for q, e in factorint(n).items():
            if q > self.N:
                raise DomainError(f"need a({q}) but expansion stops at {self.N}")
            out *= self.lam_prime_power(q, e)
        return out

    def to_json(self) -> dict:
        return {
            "weight": self.weight,
            "level": self.level,
            "coeffs": [float(x) for x in self.a],
            "norm": self.norm,
            "norm_method": self.norm_method,
        }


@lru_cache(maxsize=64)
def eigenbasis(k: int, N: int, with_norms: bool = False) -> tuple:
    """Normalised Hecke eigenforms of S_k by diagonalising T_2 on the Miller basis."""
    d = dim_cusp(k)
    if d == 0:
        return ()
    M = max(N, 2 * d + 2)
    basis = miller_basis(k, M)

    dps = 80 + 2 * k  # T_2 entries and eigenvector conditioning grow with k
    with mpmath.workdps(dps):
        # Column i holds T_2 f_i in the echelon coordinates a(1..d).
        T = mpmath.matrix(d, d)
        for i, f in enumerate(basis):
            for n in range(1, d + 1):
                v = Fraction(f[2 * n])
                if n % 2 == 0:
                    v += Fraction(2 ** (k - 1)) * Fraction(f[n // 2])
                T[n - 1, i] = mpmath.mpf(v.numerator) / v.denominator
        ev, vecs = mpmath.eig(T)
        forms = []
        for j in range(d):
            vec = [vecs[i, j] for i in range(d)]
            res = mpmath.norm(T * mpmath.matrix(vec) - ev[j] * mpmath.matrix(vec))
            if res > mpmath.mpf(10) ** (-dps // 2) * mpmath.mnorm(T, 1) * mpmath.norm(mpmath.matrix(vec)):
                raise ContractError(f"T_2 eigenvector residual {res}")
            # normalise so that a(1) = 1; coordinate 0 is a(1)
            vec = [x / vec[0] for x in vec]
            if any(abs(mpmath.im(x)) > mpmath.mpf(10) ** (-dps // 2) * max(1, abs(x)) for x in vec):
                raise ContractError("complex T_2 eigenvector")
            # fixed-point combination keeps the big-integer products exact
            if d == 1:
                forms.append((float(mpmath.re(ev[j])), np.array([float(c) for c in basis[0].coeffs[: N + 1]])))
                continue
            P = 320
            fixed = [int(mpmath.nint(mpmath.re(x) * mpmath.mpf(2) ** P)) for x in vec]
            cols = [[int(c) if not isinstance(c, Fraction) else c for c in f.coeffs[: N + 1]] for f in basis]
            a = np.array([sum(w * col[n] for w, col in zip(fixed, cols)) / 2**P for n in range(N + 1)], dtype=float)
            forms.append((float(mpmath.re(ev[j])), a))
    forms.sort(key=lambda t: t[0])
    out = []
    for _, a in forms:
        ef = EigenformData(weight=k, level=1, a=a)
        if with_norms:
            ef.norm = petersson_norm_numeric(a, k)
            ef.norm_method = "quadrature"
        out.append(ef)
    return tuple(out)


# ============================================================================
# Petersson norm by quadrature
# ============================================================================


def petersson_norm_numeric(f, weight: int | None = None, tol: float = 1e-10, ymax: float | None = None) -> float:
    """int over the standard fundamental domain of |f|^2 y^(kappa-2) dx dy.

    The region y >= 1 spans a full period in x, so Parseval reduces it to
    one-dimensional incomplete-gamma integrals; the corner
    sqrt(3)/2 <= y < 1 uses Gauss-Legendre nodes, refined until two
    consecutive orders agree to ``tol``.  The part y > ymax is bounded and
    checked against ``tol``; by default ymax = max(12, 3 kappa/(4 pi)), three
    times the peak of y^kappa e^{-4 pi y}.
    """
    if isinstance(f, QExpansion):
        kappa = f.weight
        a = f.as_float()
    elif isinstance(f, EigenformData):
        kappa = f.weight
        a = np.asarray(f.a, dtype=float)
    else:
        if weight is None:
            raise DomainError("weight required for raw coefficient arrays")
        kappa = weight
        a = np.asarray(f, dtype=float)
    if a[0] != 0:
        raise DomainError("petersson_norm_numeric needs a cusp form")
    N = len(a) - 1
    n = np.arange(1, N + 1, dtype=float)
    y0 = math.sqrt(3) / 2
    # rescale so |a_n| e^{-2 pi n y0} peaks at 1; the norm picks up c^2
    c = float(np.max(np.abs(a[1:]) * np.exp(-2 * math.pi * n * y0)))
    an = a[1:] / c
    # truncation of the q-expansion at the lowest point of the domain
    qtail = abs(an[-1]) * math.exp(-2 * math.pi * N * y0)
    if qtail > tol * 1e-3:
        raise TruncationError(f"q-expansion too short for norm (tail {qtail:.3g})", achieved=qtail)
    if ymax is None:
        ymax = max(12.0, 3 * kappa / (4 * math.pi))
    s = kappa - 1  # exponent of y in y^(kappa-2) dy, as Gamma(s, .)

    def upper(x):
        return special.gammaincc(s, x) * math.exp(special.gammaln(s))

    # y in [1, ymax]: sum |a_n|^2 Gamma(s) (Q(s, r) - Q(s, r ymax)) / r^s, r = 4 pi n, in log form;
    # terms whose Q difference underflows are below 1e-300 of the n = 1 scale
    rate = 4 * math.pi * n
    dq = special.gammaincc(s, rate) - special.gammaincc(s, rate * ymax)
    keep = (dq > 0) & (an != 0)
    with np.errstate(divide="ignore"):
        logs = 2 * np.log(np.abs(an[keep])) + special.gammaln(s) + np.log(dq[keep]) - s * np.log(rate[keep])
    top = float(np.sum(np.exp(logs))) if logs.size else 0.0
    # tail y > ymax
    lead = float(np.sum(np.abs(an) * np.exp(-2 * math.pi * (n - 1) * ymax)))
    tail = lead**2 * math.exp(math.log(max(special.gammaincc(s, 4 * math.pi * ymax), 1e-300)) + special.gammaln(s) - s * math.log(4 * math.pi))

    def corner(order: int) -> float:
        # x outer on [0, 1/2], y inner on [sqrt(1-x^2), 1]: both limits smooth
        xg, wg = np.polynomial.legendre.leggauss(order)
        xs = 0.25 * (xg + 1)
        wx = 0.25 * wg
        lo = np.sqrt(1 - xs * xs)
        half = (1 - lo) / 2
        X = np.repeat(xs, order)
        Y = (lo[:, None] + half[:, None] * (xg[None, :] + 1)).ravel()
        W = (wx[:, None] * half[:, None] * wg[None, :]).ravel()
        acc = 0.0
        step = max(1, 2_000_000 // max(N, 1))
        for st in range(0, X.size, step):
            sl = slice(st, st + step)
            vals = np.exp(2j * math.pi * np.outer(X[sl], n) - 2 * math.pi * np.outer(Y[sl], n)) @ an
            acc += float(np.sum(W[sl] * np.abs(vals) ** 2 * Y[sl] ** (kappa - 2)))
        return 2 * acc

    prev = corner(24)
    order = 48
    while True:
        cur = corner(order)
        if abs(cur - prev) <= tol * (top + cur):
            break
        if order > 400:
            raise TruncationError("corner quadrature did not converge", achieved=abs(cur - prev))
        prev, order = cur, order * 2
    total = top + cur
    if tail > tol * total:
        raise TruncationError(f"y > {ymax} tail {tail:.3g} exceeds budget", achieved=tail)
    return total * c * c


# ============================================================================
# Petersson / Kloosterman formula
# ============================================================================


def _delta_tail_bound(kappa: int, mn: float, cstart: int) -> float:
    """Bound for 2 pi sum_{c > cstart} |S| c^-1 |J_{kappa-1}(4 pi sqrt(mn)/c)|.

    Uses |S(m,n;c)| <= c and |J_nu(x)| <= (x/2)^nu / Gamma(nu+1).
    """
    nu = kappa - 1
    A = 2 * math.pi * math.sqrt(mn)
    if cstart <= A:
        return math.inf
    logb = nu * math.log(A) - math.lgamma(nu + 1) + (1 - nu) * math.log(cstart) - math.log(nu - 1)
    return 2 * math.pi * math.exp(logb)


def petersson_delta_full(
    N: int,
    m: int,
    n: int,
    kappa: int,
    cmax: int | None = None,
    policy: PrecisionPolicy | None = None,
) -> tuple:
    """Delta_N(m, n) and its certified truncation bound as a pair."""
    policy = policy or PrecisionPolicy(bits=128, tail_tol=1e-15)
    if kappa % 2 or kappa < 4:
        raise DomainError("petersson_delta needs even kappa >= 4")
    if m < 1 or n < 1 or N < 1:
        raise DomainError("petersson_delta needs positive m, n, N")
    mn = float(m) * float(n)
    if cmax is None:
        # smallest multiple of N whose tail meets the target
        A = 2 * math.pi * math.sqrt(mn)
        c = max(N, N * math.ceil(A / N))
        while _delta_tail_bound(kappa, mn, c) > policy.tail_tol:
            c += N * max(1, c // (4 * N))
        cmax = c
    tail = _delta_tail_bound(kappa, mn, cmax)
    if tail > policy.tail_tol:
        raise TruncationError(f"Delta tail {tail:.3g} exceeds {policy.tail_tol:.3g}", achieved=tail)
    cs = np.arange(N, cmax + 1, N, dtype=np.int64)
    S = kloosterman_many(m, n, cs)
    x = 4 * math.pi * math.sqrt(mn) / cs
    J = bessel_j_array(kappa - 1, x, PrecisionPolicy(bits=max(policy.bits, 128), tail_tol=1e-18))
    sign = -1.0 if (kappa // 2) % 2 else 1.0  # i^{-kappa}
    total = 2 * math.pi * sign * math.fsum((S / cs) * J)
    delta = 1.0 if m == n else 0.0
    return delta + total, tail


def petersson_delta(
    N: int,
    m: int,
    n: int,
    kappa: int,
    cmax: int | None = None,
    policy: PrecisionPolicy | None = None,
) -> float:
    """Delta_N(m,n) = delta(m,n) + 2 pi i^-kappa sum_{N|c} S(m,n;c)/c J_{kappa-1}(4 pi sqrt(mn)/c)."""
    return petersson_delta_full(N, m, n, kappa, cmax, policy)[0]


# ============================================================================
# Tchebyshev coefficients and C(p)
# ============================================================================


@dataclass(frozen=True)
class ChebyshevTable:
    """Coefficients of X_t(x) = lambda(p^t) as a polynomial in x = lambda(p).

    ``c[j]`` is the coefficient attached to the p-power ``p^j``.
    """

    t: int
    c: dict

    def sum_squares(self) -> int:
        return sum(v * v for v in self.c.values())

    def sum_abs(self) -> int:
        return sum(abs(v) for v in self.c.values())


@lru_cache(maxsize=None)
def _chebyshev_poly(t: int) -> tuple:
    prev, cur = (1,), (0, 1)
    if t == 0:
        return prev
    for _ in range(t - 1):
        nxt = [0] * (len(cur) + 1)
        for j, a in enumerate(cur):
            nxt[j + 1] += a
        for j, a in enumerate(prev):
            nxt[j] -= a
        prev, cur = cur, tuple(nxt)
    return cur


def chebyshev_table(t: int) -> ChebyshevTable:
    """X_0 = 1, X_1 = x, X_{t+1} = x X_t - X_{t-1}; nonzero coefficients only."""
    if t < 0 or t > 64:
        raise DomainError("chebyshev_table supports 0 <= t <= 64")
    poly = _chebyshev_poly(t)
    return ChebyshevTable(t, {j: a for j, a in enumerate(poly) if a != 0})


def _fib(n: int) -> int:
    a, b = 0, 1
    for _ in range(n):
        a, b = b, a + b
    return a


@dataclass(frozen=True)
class CpValue:
    value: float
    tail_bound: float
    tmax: int
    growth_ratio: float

    def __float__(self) -> float:
        return self.value


def _cp_tail(p: int, tmax: int) -> float:
    # sum_d c_{p^t}(d)^2 <= (sum |c|)^2 = F_{t+1}^2 (the absolute coefficient
    # sums obey the Fibonacci recurrence), hence a geometric majorant.
    q = p / (p + 1) ** 2
    t = tmax + 1
    tail = 0.0
    term = q**t * _fib(t + 1) ** 2
    while True:
        tail += term
        t += 1
        term = q**t * _fib(t + 1) ** 2
        if term < 1e-18 * max(tail, 1e-300) or t > tmax + 5000:
            break
    return tail / (p + 1)


def c_of_p(p: int, tmax: int = 40, policy: PrecisionPolicy | None = None) -> CpValue:
    """C(p) = -1/(p+1) sum_t p^t/(p+1)^{2t} sum_d c_{p^t}(d)^2 with tail bound.

    ``tmax`` is raised until the tail bound meets ``policy.tail_tol``.
    """
    policy = policy or PrecisionPolicy(bits=128, tail_tol=1e-14)
    if p < 2 or not is_prime(p):
        raise DomainError(f"c_of_p needs a prime, got {p}")
    ratio = 1 + math.sqrt(2)  # limit of consecutive sum-of-squares ratios
    q = p / (p + 1) ** 2
    if _fib(80) ** 2 / _fib(79) ** 2 * q >= 1:
        raise TruncationError(f"C({p}) series majorant does not converge")
    while _cp_tail(p, tmax) > policy.tail_tol:
        tmax += 20
        if tmax > 2000:
            raise TruncationError(f"C({p}) tail not certified", achieved=_cp_tail(p, tmax))
    s = Fraction(0)
    sq = [chebyshev_table(t).sum_squares() for t in range(min(tmax, 64) + 1)]
    if tmax > 64:
        # beyond the table limit, extend the squared sums by the recurrence directly
        for t in range(65, tmax + 1):
            sq.append(sum(a * a for a in _chebyshev_poly(t)))
    for t in range(tmax + 1):
        s += Fraction(p**t, (p + 1) ** (2 * t)) * sq[t]
    val = -float(s) / (p + 1)
    measured = sq[-1] / sq[-2] if sq[-2] else ratio
    return CpValue(val, _cp_tail(p, tmax), tmax, measured)


# ============================================================================
# Level-one spectral data and the newform formula
# ============================================================================


class Level1Spectrum:
    """Harmonic weights of S_kappa(1) for the spectral form of Delta_1.

    ``Delta_1(a, b) = sum_f omega_f lambda_f(a) lambda_f(b)`` with
    ``omega_f = Gamma(kappa-1) / ((4 pi)^(kappa-1) <f, f>)``.  The weights are
    obtained by inverting the Kloosterman side on the first ``dim`` indices,
    which is independent of the quadrature norms; large arguments of
    Delta_1, where the Kloosterman-Bessel sum is impractical, are then
    evaluated spectrally.
    """

    def __init__(self, kappa: int, N: int = 600, geometric_limit: float = 400.0):
        self.kappa = kappa
        self.forms = eigenbasis(kappa, N)
        self.geometric_limit = geometric_limit
        d = len(self.forms)
        self.dim = d
        self._cache: dict = {}
        if d == 0:
            self.omega = np.zeros(0)
            return
        # Delta_1(1, n) for n = 1..d  =  sum_f omega_f lambda_f(n)
        A = np.array([[f.lam(n) for f in self.forms] for n in range(1, d + 1)])
        rhs = np.array([petersson_delta(1, 1, n, kappa) for n in range(1, d + 1)])
        self.omega = np.linalg.solve(A, rhs)

    def norms(self) -> np.ndarray:
        lg = math.lgamma(self.kappa - 1) - (self.kappa - 1) * math.log(4 * math.pi)
        return math.exp(lg) / self.omega

    def spectral(self, a: int, b: int) -> float:
        return float(sum(w * f.lam_any(a) * f.lam_any(b) for w, f in zip(self.omega, self.forms)))

    def delta(self, a: int, b: int) -> float:
        """Delta_1(a, b), geometric for small arguments, spectral otherwise."""
        key = (min(a, b), max(a, b))
        if key in self._cache:
            return self._cache[key]
        if 4 * math.pi * math.sqrt(a * b) <= self.geometric_limit:
            val = petersson_delta(1, a, b, self.kappa)
        else:
            val = (1.0 if a == b else 0.0) + (self.spectral(a, b) - (1.0 if a == b else 0.0))
        self._cache[key] = val
        return val

    def deligne_bound(self, a: int, b: int) -> float:
        """|Delta_1(a,b)| <= d(a) d(b) Delta_1(1,1) (positivity plus Deligne)."""
        return num_divisors(a) * num_divisors(b) * float(np.sum(self.omega))


@dataclass
class DeltaStarResult:
    """Delta*_p(1, n) split into its delta-only part and the Kloosterman part."""

    value: float
    main: float
    correction: float
    correction_bound: float
    tail_bound: float
    trunc: int

    @property
    def budget(self) -> float:
        return self.correction_bound + self.tail_bound

    def __float__(self) -> float:
        return self.value


def _nu(x: int, p: int) -> int:
    # completely multiplicative with nu(p) = p + 1 on p-powers
    e = 0
    while x % p == 0:
        x //= p
        e += 1
    return (p + 1) ** e


def _new_terms(p: int, n: int, trunc: int):
    """Yield (weight, level M, s, t) with Delta*_p(1,n) = sum weight * Delta_M(s, t)."""
    # L = 1, M = p
    yield Fraction(1), p, 1, n
    # L = p, M = 1
    for t in range(trunc + 1):
        tab = chebyshev_table(t).c
        w_t = Fraction(-1, p + 1) * Fraction(p**t, (p + 1) ** (2 * t))
        for j1, c1 in tab.items():
            for j2, c2 in tab.items():
                d1, d2 = p**j1, p**j2
                for v in (1, p):
                    if n % v:
                        continue
                    wv = Fraction(v * mobius(v), _nu(v, p))
                    for b in divisors(math.gcd(n // v, v)):
                        for e in divisors(math.gcd(d2, n // (b * b))) if n % (b * b) == 0 else []:
                            num = n * d2
                            den = e * e * b * b
                            if num % den:
                                continue
                            yield w_t * c1 * c2 * wv, 1, d1, num // den


def delta_star(
    p: int,
    n: int,
    kappa: int,
    trunc: int = 8,
    policy: PrecisionPolicy | None = None,
    spectrum: Level1Spectrum | None = None,
) -> DeltaStarResult:
    """Delta*_p(1, n) assembled from Delta_p and Delta_1 by the newform formula.

    The sum over ell = p^t is truncated at ``trunc``; the remainder is bounded
    through |Delta_1(a,b)| <= d(a) d(b) Delta_1(1,1) and the Fibonacci bound on
    the Tchebyshev coefficients.
    """
    if not is_prime(p):
        raise DomainError("delta_star needs p prime")
    policy = policy or PrecisionPolicy(bits=128, tail_tol=1e-15)
    spectrum = spectrum or Level1Spectrum(kappa)
    main = Fraction(0)
    corr = 0.0
    corr_bound = 0.0
    for w, M, s, t in _new_terms(p, n, trunc):
        dl = 1 if s == t else 0
        main += w * dl
        if M == 1:
            val = spectrum.delta(s, t)
            bound = spectrum.deligne_bound(s, t) + dl
        else:
            val, tl = petersson_delta_full(M, s, t, kappa, policy=policy)
            bound = _weil_bessel_bound(M, s, t, kappa) + tl
        corr += float(w) * (val - dl)
        corr_bound += abs(float(w)) * bound
    # remainder t > trunc: weight p^t/(p+1)^{2t+1}, at most F_{t+1}^2 coefficient
    # pairs, v/b/e sums contribute at most 2 * d(n)^2 terms each bounded by
    # d(p^t)^2 d(n) Delta_1(1,1) + 1.
    tail = 0.0
    om = spectrum.deligne_bound(1, 1)
    dn = num_divisors(n)
    t = trunc + 1
    while True:
        term = (p / (p + 1) ** 2) ** t / (p + 1) * _fib(t + 1) ** 2 * 2 * dn**2 * ((t + 1) ** 2 * dn * om * (t + 1) + 1)
        tail += term
        if term < 1e-16 * tail or t > trunc + 4000:
            break
        t += 1
    value = float(main) + corr
    return DeltaStarResult(value, float(main), corr, corr_bound, tail, trunc)


def _weil_bessel_bound(N: int, m: int, n: int, kappa: int) -> float:
    """Bound on |Delta_N(m,n) - delta| from |S| <= d(c) sqrt(gcd(m,n,c) c) and |J| <= min(1, (x/2)^nu/nu!)."""
    nu = kappa - 1
    A = 2 * math.pi * math.sqrt(m * n)
    total = 0.0
    c = N
    while True:
        x2 = A / c
        jb = min(1.0, math.exp(nu * math.log(x2) - math.lgamma(nu + 1))) if x2 > 0 else 0.0
        term = num_divisors(c) * math.sqrt(math.gcd(math.gcd(m, n), c) * c) / c * jb
        total += term
        if c > 2 * A and term < 1e-18:
            break
        c += N
    return 2 * math.pi * total


# ============================================================================
# L-functions
# ============================================================================


def _lfunction_lavrik(f: EigenformData, s: float, chi=None, q: int = 1, eps: int | None = None) -> float:
    """L(f [x chi], s) via the incomplete-gamma series of the completed L-function."""
    kappa = f.weight
    if eps is None:
        eps = -1 if (kappa // 2) % 2 else 1
    scale = 2 * math.pi / q
    total = 0.0
    lg_s = special.gammaln(s)
    lg_r = special.gammaln(kappa - s)
    for n in range(1, f.N + 1):
        c = float(f.a[n]) * (chi(n) if chi is not None else 1)
        x = scale * n
        if c != 0:
            t1 = math.exp(lg_s - s * math.log(x)) * special.gammaincc(s, x)
            if kappa - s > 0:
                t2 = math.exp(lg_r - (kappa - s) * math.log(x)) * special.gammaincc(kappa - s, x)
            else:
                # regularised Q is undefined for a <= 0; Gamma(a, x) itself is fine
                t2 = float(mpmath.gammainc(kappa - s, x)) * x ** (s - kappa)
            total += c * (t1 + eps * t2)
        if x > 60 + kappa and abs(f.a[n]) * math.exp(-x) < 1e-30:
            break
    else:
        raise TruncationError("q-expansion too short for the L-value series")
    # Lambda(s) = (q/2pi)^s Gamma(s) L(s)
    return total / math.exp(lg_s - s * math.log(scale))


def dirichlet_L(f: EigenformData, s: float, tol: float = 1e-12) -> float:
    """L(f, s) = sum a(n) n^-s for s > (kappa+1)/2.

    Direct summation uses the tail bound |a(n)| <= d(n) n^((kappa-1)/2) with
    d(n) <= 2 sqrt(n).  When that bound cannot reach ``tol`` within the
    available coefficients (near the edge of absolute convergence) the value
    is computed from the rapidly convergent incomplete-gamma series of the
    completed L-function, an exact rearrangement of the same Dirichlet series.
    """
    kappa = f.weight
    if s <= (kappa + 1) / 2:
        raise DomainError(f"s = {s} outside absolute convergence (> {(kappa + 1) / 2})")
    sigma = s - (kappa - 1) / 2
    N = f.N
    if sigma > 1.5:
        tail = 2 * N ** (1.5 - sigma) / (sigma - 1.5)
        if tail <= tol:
            n = np.arange(1, N + 1, dtype=float)
            terms = f.a[1:] * np.exp(-s * np.log(n))
            return math.fsum(terms)
    return _lfunction_lavrik(f, s)


def afe_weight(y, kappa: int) -> np.ndarray:
    """V(y) = (1/2 pi i) int_(3) Gamma(u + kappa/2)/Gamma(kappa/2) e^{u^2} y^-u du/u.

    The contour is moved to the abscissa that minimises the integrand size
    (left of 0 picks up the residue 1 at u = 0); trapezoidal quadrature on the
    vertical line is spectrally accurate because of the e^{u^2} factor.
    """
    ys = np.atleast_1d(np.asarray(y, dtype=float))
    if np.any(ys <= 0):
        raise DomainError("V(y) needs y > 0")
    ly = np.log(ys)
    g0 = special.gammaln(kappa / 2)
    sig_grid = np.concatenate([np.linspace(-kappa / 2 + 0.6, -0.5, 40), np.linspace(0.5, 6.0, 45)])
    base_size = special.gammaln(sig_grid + kappa / 2) - g0 + sig_grid**2 - np.log(np.abs(sig_grid))
    choice = np.argmin(base_size[None, :] - np.outer(ly, sig_grid), axis=1)
    out = np.empty_like(ys)
    for ci in np.unique(choice):
        sel = np.nonzero(choice == ci)[0]
        sigma = float(sig_grid[ci])
        omega = float(np.max(np.abs(ly[sel]))) + math.log(kappa) + 30.0
        h = min(0.1, 2 * math.pi / omega)
        t = np.arange(-14.0, 14.0 + h / 2, h)
        u = sigma + 1j * t
        base = special.loggamma(u + kappa / 2) - g0 + u * u - np.log(u)
        for start in range(0, len(sel), 4096):
            idx = sel[start : start + 4096]
            vals = np.exp(base[None, :] - np.outer(ly[idx], u)).sum(axis=1).real * h / (2 * math.pi)
            out[idx] = vals + (1.0 if sigma < 0 else 0.0)
    return out if np.ndim(y) else float(out[0])


def afe_weight_gamma(y, kappa: int):
    """V(y) with trivial smoothing G = 1: Gamma(kappa/2, y)/Gamma(kappa/2).

    Exponential decay past y ~ kappa/2 makes the tail of a smoothed sum
    certifiable in closed form (see ``afe_gamma_tail``).
    """
    ys = np.asarray(y, dtype=float)
    if np.any(ys <= 0):
        raise DomainError("V(y) needs y > 0")
    out = special.gammaincc(kappa / 2, ys)
    return out if np.ndim(y) else float(out)


def afe_gamma_tail(kappa: int, scale: float, N: int) -> float:
    """Upper bound for sum_{n > N} Q(kappa/2, scale n), Q the regularised upper incomplete gamma.

    Q is decreasing, so the sum is at most int_N^inf Q(a, scale x) dx
    = (a Q(a+1, Y) - Y Q(a, Y)) / scale with Y = scale N.
    """
    a = kappa / 2
    Y = scale * N
    val = (a * special.gammaincc(a + 1, Y) - Y * special.gammaincc(a, Y)) / scale
    return max(float(val), 0.0)


def root_number_level1(kappa: int, D: int) -> int:
    """Root number of f x chi_D for level-one f: i^kappa chi_D(-1)."""
    return (-1 if (kappa // 2) % 2 else 1) * (1 if D > 0 else -1)


def divisor_bound(n) -> np.ndarray:
    """Explicit d(n) <= n^(1.5379 log 2 / log log n) for n >= 3; exact small values below."""
    n = np.asarray(n, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        e = 1.5379 * math.log(2) / np.log(np.log(np.maximum(n, 3.0)))
    return np.where(n >= 3, np.exp(e * np.log(np.maximum(n, 1.0))), 2.0)


def _afe_length(kappa: int, scale: float, tol: float) -> int:
    """Smallest N with sum_{n > N} d(n) n^-1/2 |V(scale n)| <= tol (integral majorant)."""
    grid = np.unique(np.exp(np.linspace(0.0, math.log(1e8), 1200)).astype(np.int64))
    V = np.abs(afe_weight(scale * grid, kappa))
    g = divisor_bound(grid) * grid**0.5 * V  # integrand in d(log n)
    lg = np.log(grid.astype(float))
    seg = 0.5 * (g[1:] + g[:-1]) * np.diff(lg)
    tails = np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]])
    # V is decreasing past its plateau, so the integral dominates the sum up to a factor 2
    ok = np.nonzero(2 * tails <= tol)[0]
    if len(ok) == 0:
        raise TruncationError("smoothed sum length exceeds 1e8 terms")
    return int(grid[ok[0]])


def with_length(f: EigenformData, N: int) -> EigenformData:
    """The same level-one eigenform with at least N coefficients."""
    if f.N >= N:
        return f
    if f.level != 1:
        raise DomainError("only level-one forms can be extended")
    forms = eigenbasis(f.weight, N)
    best = min(forms, key=lambda g: abs(g.a[2] - f.a[2]) + abs(g.a[3] - f.a[3]))
    return EigenformData(f.weight, 1, best.a, f.norm, f.norm_method)


def central_L_twist(f: EigenformData, D, policy: PrecisionPolicy | None = None, tol: float = 1e-7) -> float:
    """L(kappa/2, f x chi_D) for level-one f by the approximate functional equation.

    Classical normalisation: sum a(n) chi_D(n) n^-s at s = kappa/2.  The
    conductor is D^2, so both halves coincide and carry (1 + eps).  The sum
    length makes the Deligne tail, with an explicit divisor bound, at most
    ``tol``; the q-expansion is extended as needed.
    """
    Dobj = D if isinstance(D, Discriminant) else Discriminant.of(int(D))
    if not Dobj.is_fundamental:
        raise DomainError("central_L_twist needs a fundamental discriminant")
    kappa = f.weight
    eps = root_number_level1(kappa, Dobj.D)
    if eps == -1:
        return 0.0
    scale = 2 * math.pi / abs(Dobj.D)
    N = _afe_length(kappa, scale, tol / 2)
    f = with_length(f, N)
    n = np.arange(1, N + 1)
    chi = np.array(kronecker_table(Dobj.D, N)[1:], dtype=float)
    lam = f.a[1 : N + 1] / n ** ((kappa - 1) / 2)
    terms = lam * chi * n**-0.5 * afe_weight(scale * n, kappa)
    return 2 * math.fsum(terms)


def central_L_twist_oracle(f: EigenformData, D) -> float:
    """Same central value from incomplete-gamma weights (the G = 1 smoothing)."""
    Dobj = D if isinstance(D, Discriminant) else Discriminant.of(int(D))
    kappa = f.weight
    if root_number_level1(kappa, Dobj.D) == -1:
        return 0.0
    q = abs(Dobj.D)
    # the series stops once 2 pi n/q passes kappa + 60 and |a(n)| e^{-2 pi n/q} < 1e-30
    f = with_length(f, int(q * (2 * kappa + 130) / (2 * math.pi)) + 1)
    return _lfunction_lavrik(f, kappa / 2, chi=lambda n: kronecker_chi(Dobj.D, n), q=q, eps=1)


# ============================================================================
# Sup of the level-one Bergman mass
# ============================================================================


def _sk_mass_values(forms, norms, u: np.ndarray, v: np.ndarray, kappa: int) -> np.ndarray:
    """log of sum_g v^kappa |g(tau)|^2/<g,g> on arrays of points."""
    N = min(f.N for f in forms)
    n = np.arange(1, N + 1, dtype=float)
    tot = np.zeros(u.shape)
    logscale = None
    vals = []
    for f, nm in zip(forms, norms):
        a = f.a[1 : N + 1]
        z = np.exp(2j * np.pi * np.multiply.outer(u, n) - 2 * np.pi * np.multiply.outer(v, n))
        g = z @ a
        vals.append(np.abs(g) ** 2 / nm)
    tot = np.sum(vals, axis=0)
    with np.errstate(divide="ignore"):
        return kappa * np.log(v) + np.log(tot)


def sup_mass_Sk(k: int, forms=None, grid: dict | None = None) -> MassReport:
    """Sup over a grid of the fundamental domain of sum_g v^k |g|^2 / <g,g>."""
    grid = dict(grid or {})
    if forms is None:
        forms = eigenbasis(k, max(120, 4 * k), True)
    if not forms:
        raise DomainError(f"S_{k} is zero")
    norms = [f.norm for f in forms]
    if any(not (nm > 0) for nm in norms):
        norms = [petersson_norm_numeric(f) for f in forms]
    nu = int(grid.get("nu", 41))
    nv = int(grid.get("nv", 60))
    vhi = float(grid.get("v_hi", max(2.0, k)))
    us = np.linspace(-0.5, 0.5, nu)
    vs = np.exp(np.linspace(math.log(math.sqrt(3) / 2), math.log(vhi), nv))
    U, V = np.meshgrid(us, vs, indexing="ij")
    inside = U**2 + V**2 >= 1 - 1e-12
    vals = np.full(U.shape, -np.inf)
    vals[inside] = _sk_mass_values(forms, norms, U[inside], V[inside], k)
    idx = np.unravel_index(int(np.argmax(vals)), vals.shape)
    best_u, best_v = float(U[idx]), float(V[idx])

    def f_at(uu, vv):
        if uu * uu + vv * vv < 1 or abs(uu) > 0.5 or vv <= 0:
            return -np.inf
        return float(_sk_mass_values(forms, norms, np.array([uu]), np.array([vv]), k)[0])

    best = f_at(best_u, best_v)
    step_u, step_v = 1.0 / (nu - 1), math.log(vhi / 0.866) / (nv - 1)
    for _ in range(40):
        improved = False
        for du, dv in ((step_u, 0), (-step_u, 0), (0, step_v), (0, -step_v)):
            cu, cv = best_u + du, best_v * math.exp(dv)
            val = f_at(cu, cv)
            if val > best:
                best, best_u, best_v, improved = val, cu, cv, True
        if not improved:
            step_u /= 2
            step_v /= 2
            if step_v < 1e-6:
                break
    return MassReport(
        functional="Sk_bergman",
        k=k,
        value_log=best,
        argmax={"u": best_u, "v": best_v},
        grid={"nu": nu, "nv": nv, "v_hi": vhi},
        truncation={"qexp_terms": min(f.N for f in forms)},
    )
