"""Special functions, arithmetic kernels and log-scale complex numbers.

Everything else in the package is built on this module: the log-domain
:class:`LogComplex` carries factors such as ``v**k`` with ``k`` near 60
without overflow, :func:`bessel_j` evaluates the ascending series at raised
precision with a certified error bound, and :func:`kloosterman` has a numba
kernel next to a pure numpy path.
"""
from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from functools import lru_cache

import gmpy2
import mpmath
import numpy as np
import sympy

from ._accel import NUMBA_AVAILABLE, njit
from .errors import DomainError, PrecisionExhausted

__all__ = [
    "LogComplex",
    "PrecisionPolicy",
    "Discriminant",
    "log_gamma",
    "bessel_j",
    "bessel_j_mp",
    "bessel_j_array",
    "kloosterman",
    "kloosterman_exact",
    "kloosterman_many",
    "kronecker_chi",
    "kronecker_table",
    "content",
    "divisors",
    "num_divisors",
    "mobius",
    "is_prime",
    "factorint",
]

MAX_BITS = 1024


# ============================================================================
# Log-domain complex numbers
# ============================================================================


def _wrap_phase(phi: float) -> float:
    """Reduce an angle to (-pi, pi]."""
    w = math.pi - math.fmod(math.pi - phi, 2.0 * math.pi)
    if w <= -math.pi:
        w += 2.0 * math.pi
    elif w > math.pi:
        w -= 2.0 * math.pi
    return w


@dataclass(frozen=True)
class LogComplex:
    """A complex number stored as ``exp(logmod) * exp(i*phase)``.

    ``logmod = -inf`` encodes zero.  Multiplication adds logs; addition
    rescales both operands by the larger modulus first, so no intermediate
    ever overflows.
    """

    logmod: float
    phase: float = 0.0

    def __post_init__(self):
        if math.isnan(self.logmod) or math.isnan(self.phase):
            raise DomainError("LogComplex components must not be NaN")
        if self.logmod == -math.inf:
            object.__setattr__(self, "phase", 0.0)
        else:
            object.__setattr__(self, "phase", _wrap_phase(float(self.phase)))

    @classmethod
    def zero(cls) -> "LogComplex":
        return cls(-math.inf, 0.0)

    @classmethod
    def one(cls) -> "LogComplex":
        return cls(0.0, 0.0)

    @classmethod
    def from_complex(cls, z: complex) -> "LogComplex":
        if z == 0:
            return cls.zero()
        return cls(math.log(abs(z)), cmath.phase(z))

    @classmethod
    def from_polar_log(cls, logmod: float, phase: float) -> "LogComplex":
        return cls(logmod, phase)

    @property
    def is_zero(self) -> bool:
        return self.logmod == -math.inf

    def to_complex(self) -> complex:
        if self.is_zero:
            return 0j
        return cmath.rect(math.exp(self.logmod), self.phase)

    def __complex__(self) -> complex:
        return self.to_complex()

    def abs(self) -> "LogComplex":
        return LogComplex(self.logmod, 0.0)

    def conj(self) -> "LogComplex":
        return LogComplex(self.logmod, -self.phase)

    def __neg__(self) -> "LogComplex":
        return LogComplex(self.logmod, self.phase + math.pi)

    def __mul__(self, other) -> "LogComplex":
        other = _as_logcomplex(other)
        if self.is_zero or other.is_zero:
            return LogComplex.zero()
        return LogComplex(self.logmod + other.logmod, self.phase + other.phase)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "LogComplex":
        other = _as_logcomplex(other)
        if other.is_zero:
            raise ZeroDivisionError("LogComplex division by zero")
        if self.is_zero:
            return LogComplex.zero()
        return LogComplex(self.logmod - other.logmod, self.phase - other.phase)

    def __pow__(self, e: float) -> "LogComplex":
        if self.is_zero:
            if e > 0:
                return LogComplex.zero()
            raise ZeroDivisionError("zero to a non-positive power")
        return LogComplex(self.logmod * e, self.phase * e)

    def __add__(self, other) -> "LogComplex":
        other = _as_logcomplex(other)
        if self.is_zero:
            return other
        if other.is_zero:
            return self
        top = max(self.logmod, other.logmod)
        w = cmath.rect(math.exp(self.logmod - top), self.phase) + cmath.rect(
            math.exp(other.logmod - top), other.phase
        )
        if w == 0:
            return LogComplex.zero()
        return LogComplex(top + math.log(abs(w)), cmath.phase(w))

    __radd__ = __add__

    def __sub__(self, other) -> "LogComplex":
        return self + (-_as_logcomplex(other))

    def isclose(self, other: "LogComplex", rel: float = 1e-12) -> bool:
        other = _as_logcomplex(other)
        if self.is_zero or other.is_zero:
            return self.is_zero and other.is_zero
        diff = self - other
        top = max(self.logmod, other.logmod)
        return diff.is_zero or diff.logmod - top <= math.log(rel)


def _as_logcomplex(x) -> LogComplex:
    if isinstance(x, LogComplex):
        return x
    return LogComplex.from_complex(complex(x))


def logsumexp_complex(logmods: np.ndarray, phases: np.ndarray) -> LogComplex:
    """Sum of ``exp(logmods + i*phases)`` without overflow."""
    logmods = np.asarray(logmods, dtype=float)
    phases = np.asarray(phases, dtype=float)
    if logmods.size == 0 or np.all(np.isneginf(logmods)):
        return LogComplex.zero()
    top = float(np.max(logmods))
    w = complex(np.sum(np.exp(logmods - top) * np.exp(1j * phases)))
    if w == 0:
        return LogComplex.zero()
    return LogComplex(top + math.log(abs(w)), cmath.phase(w))


# ============================================================================
# Precision policy and discriminants
# ============================================================================


@dataclass(frozen=True)
class PrecisionPolicy:
    """Working precision (bits) and certified absolute tail target."""

    bits: int = 128
    tail_tol: float = 1e-20

    def __post_init__(self):
        if int(self.bits) < 53:
            raise DomainError(f"bits must be >= 53, got {self.bits}")
        if not self.tail_tol > 0:
            raise DomainError(f"tail_tol must be positive, got {self.tail_tol}")


def _is_squarefree(n: int) -> bool:
    if n == 0:
        return False
    return all(e == 1 for e in sympy.factorint(abs(n)).values())


@dataclass(frozen=True)
class Discriminant:
    """A discriminant ``D = 0, 1 mod 4`` with its fundamentality flag."""

    D: int
    is_fundamental: bool

    @classmethod
    def of(cls, D: int) -> "Discriminant":
        D = int(D)
        if D % 4 not in (0, 1):
            raise DomainError(f"discriminant must be 0 or 1 mod 4, got {D}")
        return cls(D, is_fundamental_discriminant(D))

    def __post_init__(self):
        if self.D % 4 not in (0, 1):
            raise DomainError(f"discriminant must be 0 or 1 mod 4, got {self.D}")
        if self.is_fundamental != is_fundamental_discriminant(self.D):
            raise DomainError(f"fundamental flag inconsistent for D={self.D}")

    @property
    def sign(self) -> int:
        return 1 if self.D > 0 else -1

    def __int__(self) -> int:
        return self.D


def is_fundamental_discriminant(D: int) -> bool:
    if D in (0, 1):
        return False
    if D % 4 == 1:
        return _is_squarefree(D)
    if D % 4 == 0:
        m = D // 4
        return m % 4 in (2, 3) and _is_squarefree(m)
    return False


# ============================================================================
# Gamma and Bessel
# ============================================================================


def log_gamma(x: float) -> float:
    """Natural log of Gamma(x) for x > 0, correctly rounded to double."""
    x = float(x)
    if not x > 0 or math.isinf(x):
        raise DomainError(f"log_gamma needs x > 0, got {x}")
    with mpmath.workprec(96):
        return float(mpmath.loggamma(mpmath.mpf(x)))


def _bessel_series_mp(nu, x, bits: int):
    """Ascending series for J_nu(x) at ``bits`` precision.

    Returns (value, error_bound) as gmpy2 mpfr; the bound covers the
    truncated tail and accumulated rounding.
    """
    with gmpy2.context(gmpy2.get_context(), precision=bits):
        nu_m = gmpy2.mpfr(nu)
        xm = gmpy2.mpfr(x)
        h2 = (xm / 2) ** 2
        term = (xm / 2) ** nu_m / gmpy2.gamma(nu_m + 1)
        total = gmpy2.mpfr(0)
        abs_sum = gmpy2.mpfr(0)
        j = 0
        eps = gmpy2.mpfr(2) ** (-bits)
        while True:
            total += term
            abs_sum += abs(term) * (4 + 2 * j)
            ratio = h2 / ((j + 1) * (j + 1 + nu_m))
            nxt = term * ratio
            # Once ratio < 1 the series alternates with decreasing terms, so the
            # remainder is bounded by the first omitted term.
            if ratio < 1 and (abs(nxt) <= eps * abs(total) or nxt == 0):
                tail = abs(nxt)
                break
            term = -nxt
            j += 1
        err = tail + abs_sum * eps
        return total, err


def bessel_j_mp(nu: float, x: float, policy: PrecisionPolicy | None = None):
    """J_nu(x) as an mpf with absolute error at most ``policy.tail_tol``.

    Starts at ``policy.bits`` (raised to cover the largest series term) and
    doubles until the certified bound meets the target.
    """
    policy = policy or PrecisionPolicy()
    if nu < 0 or x < 0:
        raise DomainError("bessel_j needs nu >= 0 and x >= 0")
    if nu > 500 or x > 1e5:
        raise DomainError("bessel_j supports nu <= 500 and x <= 1e5")
    if x == 0:
        return mpmath.mpf(1) if nu == 0 else mpmath.mpf(0)
    # log2 of the largest series term, used to pick a starting precision
    # that absorbs the cancellation for x >~ nu.
    jstar = max(0.0, (-(nu + 1) + math.sqrt((nu + 1) ** 2 + x * x)) / 2)
    jstar = math.floor(jstar)
    logmax = (2 * jstar + nu) * math.log(x / 2) - math.lgamma(jstar + 1) - math.lgamma(jstar + nu + 1)
    need = int(max(0.0, logmax) / math.log(2)) + int(-math.log2(policy.tail_tol)) + 40
    bits = max(int(policy.bits), 53)
    cap = max(MAX_BITS, int(policy.bits))
    while bits < need and bits < cap:
        bits *= 2
    bits = min(bits, cap)
    while True:
        val, err = _bessel_series_mp(nu, x, bits)
        if err <= policy.tail_tol:
            with mpmath.workprec(bits):
                return mpmath.mpf(val)
        if bits >= cap:
            raise PrecisionExhausted(
                f"J_{nu}({x}): bound {float(err):.3g} > {policy.tail_tol:.3g} at {bits} bits",
                achieved=float(err),
            )
        bits = min(2 * bits, cap)


def bessel_j(nu: float, x: float, policy: PrecisionPolicy | None = None) -> float:
    """J_nu(x) rounded to double; the series itself is certified to tail_tol."""
    return float(bessel_j_mp(nu, x, policy))


@njit
def _bessel_small_kernel(nu, xs, lg_nu1, out):
    # Valid when (x/2)^2 < nu + 1: every term is smaller than the previous one
    # so the float sum carries only a few ulps of relative error.
    for i in range(xs.shape[0]):
        x = xs[i]
        if x == 0.0:
            out[i] = 1.0 if nu == 0.0 else 0.0
            continue
        h2 = 0.25 * x * x
        logt = nu * math.log(0.5 * x) - lg_nu1
        term = math.exp(logt)
        s = term
        j = 0
        while True:
            term = -term * h2 / ((j + 1.0) * (j + 1.0 + nu))
            s += term
            j += 1
            if abs(term) <= 1e-17 * abs(s) or j > 400:
                break
        out[i] = s


def bessel_j_array(nu: float, xs, policy: PrecisionPolicy | None = None) -> np.ndarray:
    """Vectorised J_nu on an array.

    Arguments with ``(x/2)**2 < nu + 1`` use a double-precision series whose
    terms decrease monotonically; larger arguments fall back to the certified
    extended-precision series.
    """
    xs = np.ascontiguousarray(np.asarray(xs, dtype=float))
    out = np.empty_like(xs)
    small = 0.25 * xs * xs < nu + 1.0
    if np.any(small):
        sub = np.ascontiguousarray(xs[small])
        res = np.empty_like(sub)
        _bessel_small_kernel(float(nu), sub, math.lgamma(nu + 1.0), res)
        out[small] = res
    big = ~small
    if np.any(big):
        pol = policy or PrecisionPolicy(bits=128, tail_tol=1e-18)
        out[big] = [bessel_j(nu, float(x), pol) for x in xs[big]]
    return out


# ============================================================================
# Kloosterman sums
# ============================================================================


@njit
def _modinv(a, c):
    # extended Euclid; assumes gcd(a, c) = 1
    r0, r1 = c, a % c
    s0, s1 = 0, 1
    while r1 != 0:
        q = r0 // r1
        r0, r1 = r1, r0 - q * r1
        s0, s1 = s1, s0 - q * s1
    return s0 % c


@njit
def _gcd(a, b):
    while b != 0:
        a, b = b, a % b
    return a


@njit
def _kloosterman_kernel(m, n, c):
    if c == 1:
        return 1.0
    total = 0.0
    mm = m % c
    nn = n % c
    for d in range(1, c):
        if _gcd(d, c) != 1:
            continue
        dbar = _modinv(d, c)
        total += math.cos(2.0 * math.pi * ((mm * d + nn * dbar) % c) / c)
    return total


def _kloosterman_numpy(m: int, n: int, c: int) -> float:
    if c == 1:
        return 1.0
    d = np.arange(1, c, dtype=np.int64)
    d = d[np.gcd(d, c) == 1]
    dbar = np.array([pow(int(t), -1, c) for t in d], dtype=np.int64)
    phase = ((m % c) * d + (n % c) * dbar) % c
    return float(np.sum(np.cos(2.0 * np.pi * phase / c)))


def kloosterman(m: int, n: int, c: int) -> float:
    """S(m, n; c) = sum over d mod c, gcd(d, c) = 1 of e((m d + n dbar)/c)."""
    c = int(c)
    if c < 1:
        raise DomainError(f"Kloosterman modulus must be >= 1, got {c}")
    if c > 2**31:
        raise DomainError("Kloosterman modulus exceeds 2**31")
    if NUMBA_AVAILABLE:
        return float(_kloosterman_kernel(int(m), int(n), c))
    return _kloosterman_numpy(int(m), int(n), c)


@lru_cache(maxsize=4096)
def _kloosterman_counts(m: int, n: int, c: int) -> tuple:
    if c == 1:
        return (1,)
    counts = [0] * c
    for d in range(1, c):
        if math.gcd(d, c) == 1:
            counts[(m * d + n * pow(d, -1, c)) % c] += 1
    return tuple(counts)


def kloosterman_exact(m: int, n: int, c: int) -> tuple:
    """Exact S(m,n;c) as the residue-count vector (N_0, ..., N_{c-1}).

    The sum equals sum_j N_j zeta_c^j, an exact element of Z[zeta_c]; two
    Kloosterman sums are equal whenever their count vectors agree.
    """
    if c < 1:
        raise DomainError(f"Kloosterman modulus must be >= 1, got {c}")
    return _kloosterman_counts(int(m) % c if c > 1 else 0, int(n) % c if c > 1 else 0, int(c))


def kloosterman_value_from_counts(counts) -> float:
    c = len(counts)
    return float(sum(N * math.cos(2 * math.pi * j / c) for j, N in enumerate(counts)))


@njit
def _kloosterman_many_kernel(m, n, cs, out):
    for i in range(cs.shape[0]):
        out[i] = _kloosterman_kernel(m, n, cs[i])


def kloosterman_many(m: int, n: int, cs) -> np.ndarray:
    cs = np.ascontiguousarray(np.asarray(cs, dtype=np.int64))
    out = np.empty(cs.shape[0], dtype=float)
    if NUMBA_AVAILABLE:
        _kloosterman_many_kernel(int(m), int(n), cs, out)
    else:
        for i, c in enumerate(cs):
            out[i] = _kloosterman_numpy(int(m), int(n), int(c))
    return out


# ============================================================================
# Kronecker symbol and small arithmetic helpers
# ============================================================================


def _jacobi(a: int, n: int) -> int:
    # n odd positive
    a %= n
    result = 1
    while a:
        while a % 2 == 0:
            a //= 2
            if n % 8 in (3, 5):
                result = -result
        a, n = n, a
        if a % 4 == 3 and n % 4 == 3:
            result = -result
        a %= n
    return result if n == 1 else 0


def kronecker_chi(D, n: int) -> int:
    """Kronecker symbol (D/n); D may be an int or a :class:`Discriminant`."""
    D = int(D.D) if isinstance(D, Discriminant) else int(D)
    n = int(n)
    if n == 0:
        return 1 if abs(D) == 1 else 0
    sign = 1
    if n < 0:
        n = -n
        if D < 0:
            sign = -1
    v = 0
    while n % 2 == 0:
        n //= 2
        v += 1
    if v:
        if D % 2 == 0:
            return 0
        if D % 8 in (3, 5) and v % 2 == 1:
            sign = -sign
    if n == 1:
        return sign
    return sign * _jacobi(D, n)


def kronecker_table(D, N: int) -> np.ndarray:
    """Array chi[0..N] with chi[n] = (D/n)."""
    d = D.D if isinstance(D, Discriminant) else int(D)
    period = abs(d)
    if d % 4 in (0, 1) and 0 < period <= N:
        # (D/.) is periodic mod |D| for discriminants
        base = np.array([kronecker_chi(d, n) for n in range(period)], dtype=np.int64)
        return np.resize(base, N + 1)
    return np.array([kronecker_chi(d, n) for n in range(N + 1)], dtype=np.int64)


def content(n: int, r: int, m: int) -> int:
    """gcd(n, r, m); the all-zero triple has no content."""
    if n == 0 and r == 0 and m == 0:
        raise DomainError("content(0, 0, 0) is undefined")
    return math.gcd(math.gcd(int(n), int(r)), int(m))


@lru_cache(maxsize=65536)
def factorint(n: int) -> dict:
    return dict(sympy.factorint(int(n)))


def divisors(n: int) -> list:
    return [int(d) for d in sympy.divisors(int(n))]


def num_divisors(n: int) -> int:
    out = 1
    for e in factorint(n).values():
        out *= e + 1
    return out


def mobius(n: int) -> int:
    f = factorint(n)
    if any(e > 1 for e in f.values()):
        return 0
    return -1 if len(f) % 2 else 1


def is_prime(n: int) -> bool:
    return bool(sympy.isprime(int(n)))
