"""Saito-Kurokawa lifts of index-1 Jacobi forms and the masses built from them.

A lift F of an index-1 Hecke eigenform phi has Fourier coefficients
a_F(T) = sum_{a | content(T)} a^(k-1) c_phi(det(2T)/a^2), with
T = [[n, r/2], [r/2, m]] and F(Z) = sum_T a_F(T) e(tr(TZ)).  Masses are
weighted by det(Y)^k and divided by Petersson norms, so they do not depend
on how the eigenforms are scaled.

Sup scans over the Siegel upper half-space use the slice Z = iY with
Y = [[v, y], [y, v']], v <= v' and 0 <= y <= v/2.  The scanned value is
therefore a restricted supremum.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .elliptic import EigenformData, central_L_twist, dim_cusp, dirichlet_L, eigenbasis, petersson_norm_numeric
from .errors import ContractError, DomainError, TruncationError
from .jacobi import (
    GramBasis,
    JacobiCoeffTable,
    JacobiEigenform,
    exponent_fit,
    gram_orthobasis,
    hecke_eigenbasis,
)
from .massreport import MassReport
from .numkernel import LogComplex, divisors, is_fundamental_discriminant

__all__ = [
    "HalfIntegralMatrix",
    "SiegelPoint",
    "SKLift",
    "MassReport",
    "sk_lifts",
    "default_sk_Dmax",
    "maass_coeff",
    "sk_eval",
    "sk_norms",
    "kohnen_zagier_check",
    "KZReport",
    "sk_mass",
    "sk_lower_bound_rhs",
    "pullback_coeffs",
    "pullback_eval",
    "pullback_mass_p",
    "tensor_diag_mass",
    "witt_sym_mass",
    "witt_norm",
    "inner_product_numeric",
    "lvalue_matrix_rank",
    "moment_2r",
    "sup_sk",
    "sup_pullback",
    "density",
    "sup_tensor",
    "sup_witt",
    "exponent_fit",
]

TWO_PI = 2 * math.pi


# ============================================================================
# Matrices and points
# ============================================================================


@dataclass(frozen=True)
class HalfIntegralMatrix:
    """T = [[n, r/2], [r/2, m]], positive definite."""

    n: int
    r: int
    m: int

    def __post_init__(self):
        if self.n <= 0 or 4 * self.n * self.m - self.r * self.r <= 0:
            raise DomainError(f"T = ({self.n}, {self.r}, {self.m}) is not positive definite")

    @property
    def det2T(self) -> int:
        return 4 * self.n * self.m - self.r * self.r

    @property
    def content(self) -> int:
        return math.gcd(math.gcd(self.n, self.r), self.m)

    def transform(self, U) -> "HalfIntegralMatrix":
        """U^t T U for U = (a, b, c, d) in GL_2(Z)."""
        a, b, c, d = U
        if abs(a * d - b * c) != 1:
            raise DomainError("U must be unimodular")
        n, r, m = self.n, self.r, self.m
        return HalfIntegralMatrix(
            a * a * n + a * c * r + c * c * m,
            2 * a * b * n + (a * d + b * c) * r + 2 * c * d * m,
            b * b * n + b * d * r + d * d * m,
        )


@dataclass(frozen=True)
class SiegelPoint:
    """Z = [[tau, z], [z, tau2]] with positive definite imaginary part."""

    tau: complex
    z: complex
    tau2: complex

    def __post_init__(self):
        if self.tau.imag <= 0 or self.det_Y <= 0:
            raise DomainError("Im Z must be positive definite")

    @property
    def Y(self) -> np.ndarray:
        return np.array([[self.tau.imag, self.z.imag], [self.z.imag, self.tau2.imag]])

    @property
    def det_Y(self) -> float:
        return self.tau.imag * self.tau2.imag - self.z.imag**2

    @property
    def lam_min(self) -> float:
        return float(np.linalg.eigvalsh(self.Y)[0])

    def transform(self, U) -> "SiegelPoint":
        """U^t Z U."""
        a, b, c, d = U
        t, z, t2 = self.tau, self.z, self.tau2
        return SiegelPoint(
            a * a * t + 2 * a * c * z + c * c * t2,
            a * b * t + (a * d + b * c) * z + c * d * t2,
            b * b * t + 2 * b * d * z + d * d * t2,
        )


# ============================================================================
# Lifts
# ============================================================================


@dataclass
class SKLift:
    """Lift of an index-1 eigenform phi; f is its weight 2k-2 partner."""

    k: int
    phi: JacobiCoeffTable
    f: EigenformData
    norm_F: float
    norm_phi: float
    L_k: float = float("nan")
    _cphi: np.ndarray = field(default=None, repr=False)

    @property
    def Dmax(self) -> int:
        return self.phi.Dmax

    @property
    def cphi(self) -> np.ndarray:
        """c_phi(D) as a float array indexed by D."""
        if self._cphi is None:
            arr = np.zeros(self.phi.Dmax + 1)
            for (D, _), c in self.phi.data.items():
                arr[D] = float(np.real(complex(c)))
            self._cphi = arr
        return self._cphi

    def scaled(self, s: float) -> "SKLift":
        """Lift of s*phi: every norm scales by s^2."""
        return SKLift(self.k, self.phi.scale(s), self.f, self.norm_F * s * s, self.norm_phi * s * s, self.L_k)


def sk_norms(phi: JacobiEigenform, f: EigenformData) -> tuple:
    """(<phi,phi>, <F,F>, <h,h>) from <F,F>/<phi,phi> = L(k,f) pi^-k / c_k and <phi,phi>/<h,h> = 2^(2k-3).

    c_k = 3 2^(2k+1)/Gamma(k).  L(k, f) is the classical Dirichlet series of
    the weight 2k-2 partner.  The equivalent form
    48 pi^k <F,F> = L(k,f) Gamma(k) <h,h> is checked to 1e-10.
    """
    k = phi.table.k
    if f.weight != 2 * k - 2:
        raise DomainError("partner must have weight 2k-2")
    L = dirichlet_L(f, k)
    log_ck = math.log(3) + (2 * k + 1) * math.log(2) - math.lgamma(k)
    norm_phi = phi.norm
    norm_F = norm_phi * L * math.exp(-k * math.log(math.pi) - log_ck)
    norm_h = norm_phi / 2.0 ** (2 * k - 3)
    lhs = 48 * math.exp(k * math.log(math.pi)) * norm_F
    rhs = L * math.exp(math.lgamma(k)) * norm_h
    if abs(lhs - rhs) > 1e-10 * abs(rhs):
        raise ContractError("Petersson norm relations disagree")
    return norm_phi, norm_F, norm_h


def default_sk_Dmax(k: int) -> int:
    """Table length for scans down to v = 0.866: T-sums with tr T <= max(40, 3k/2)."""
    return max(40, (3 * k) // 2) ** 2


@lru_cache(maxsize=32)
def sk_lifts(k: int, Dmax: int | None = None, N: int = 200) -> tuple:
    """Lifts of every index-1 Hecke eigenform of weight k, matched to S_{2k-2} by the T_2 eigenvalue."""
    if k % 2 or k < 10:
        raise DomainError("even k >= 10 required")
    Dmax = default_sk_Dmax(k) if Dmax is None else Dmax
    gb = gram_orthobasis(k, 1)
    efs = hecke_eigenbasis(gb, Dmax)
    fs = eigenbasis(2 * k - 2, N)
    out = []
    for ef in efs:
        f = min(fs, key=lambda g: abs(g.a[2] - ef.eigenvalue2))
        if abs(f.a[2] - ef.eigenvalue2) > 1e-6 * max(1.0, abs(f.a[2])):
            raise ContractError("no weight 2k-2 eigenform matches the Jacobi T_2 eigenvalue")
        norm_phi, norm_F, _ = sk_norms(ef, f)
        out.append(SKLift(k, ef.table, f, norm_F, norm_phi, dirichlet_L(f, k)))
    return tuple(out)


def maass_coeff(F: SKLift, T: HalfIntegralMatrix) -> complex:
    """a_F(T) = sum_{a | content(T)} a^(k-1) c_phi(det(2T)/a^2)."""
    D = T.det2T
    if D > F.phi.Dmax:
        raise TruncationError(f"det(2T) = {D} beyond the table (Dmax = {F.phi.Dmax})")
    return sum(a ** (F.k - 1) * F.phi(D // (a * a)) for a in divisors(T.content))


# ============================================================================
# Fourier evaluation
# ============================================================================


@lru_cache(maxsize=16)
def _T_list(S: int) -> tuple:
    """All (n, r, m) with n, m >= 1, n + m <= S and r^2 < 4nm."""
    ns, rs, ms = [], [], []
    for n in range(1, S):
        for m in range(1, S - n + 1):
            R = math.isqrt(4 * n * m - 1)
            r = np.arange(-R, R + 1)
            ns.append(np.full(r.size, n))
            rs.append(r)
            ms.append(np.full(r.size, m))
    return np.concatenate(ns), np.concatenate(rs), np.concatenate(ms)


def _coeff_vector(F: SKLift, n, r, m) -> np.ndarray:
    """a_F on arrays of T by the Maass relation."""
    D = 4 * n * m - r * r
    if D.max() > F.phi.Dmax:
        raise TruncationError("Jacobi table too short for the T-range")
    cont = np.gcd(np.gcd(n, np.abs(r)), m)
    c = F.cphi
    out = np.zeros(D.shape)
    for a in range(1, int(cont.max()) + 1):
        sel = cont % a == 0
        if sel.any():
            out[sel] += float(a) ** (F.k - 1) * c[D[sel] // (a * a)]
    return out


def _envelope(F: SKLift) -> tuple:
    """(C, beta) with |c_phi(D)| <= C D^beta on the upper half of the table, beta = k/2 - 3/4.

    C is calibrated from the computed coefficients with a safety factor 4.
    """
    beta = F.k / 2 - 0.75
    D = np.arange(max(3, F.Dmax // 2), F.Dmax + 1)
    c = np.abs(F.cphi[D])
    ok = c > 0
    logC = float(np.max(np.log(c[ok]) - beta * np.log(D[ok]))) + math.log(4)
    return logC, beta


def _log_tail(logC: float, beta: float, S: int, lam: np.ndarray) -> np.ndarray:
    """log of sum_{s > S} N(s) A(s) e^{-2 pi lam s}.

    N(s) <= (s - 1)(2s + 1) counts T with tr T = s; A(s) = C s^(2 beta + 3/2)
    bounds |a_F(T)| since det(2T) <= (tr T)^2 and sum_{a <= sqrt D} a^(1/2) <= D^(3/4).
    """
    lam = np.atleast_1d(lam)
    s = np.arange(S + 1, S + 4001, dtype=float)
    logs = np.log((s - 1) * (2 * s + 1)) + (2 * beta + 1.5) * np.log(s)
    terms = logs[None, :] - TWO_PI * np.outer(lam, s)
    mx = terms.max(axis=1)
    if np.any(terms[:, -1] > mx - 60):
        raise TruncationError("tail envelope not summable over the window")
    return logC + mx + np.log(np.exp(terms - mx[:, None]).sum(axis=1))


class _SKEvaluator:
    """Vectorised Fourier sums of several lifts on arrays of Siegel points."""

    def __init__(self, lifts, S: int | None = None):
        if not lifts:
            raise DomainError("no lifts")
        self.lifts = list(lifts)
        self.k = self.lifts[0].k
        Dmax = min(F.Dmax for F in self.lifts)
        self.S = math.isqrt(Dmax) if S is None else S
        if self.S * self.S > Dmax:
            raise TruncationError("S^2 exceeds the Jacobi table")
        self.n, self.r, self.m = _T_list(self.S)
        A = np.array([_coeff_vector(F, self.n, self.r, self.m) for F in self.lifts])
        amax = np.max(np.abs(A), axis=0)
        amax[amax == 0] = 1.0
        self.logamax = np.log(amax)
        self.Ahat = A / amax
        self.env = [_envelope(F) for F in self.lifts]
        self.lognorm = np.log([F.norm_F for F in self.lifts])

    def values(self, tau, z, tau2, chunk: int = 32):
        """(log|F|, phase, log tail ratio, log sum|terms|) per lift and point; arrays of shape (lifts, points)."""
        tau, z, tau2 = (np.atleast_1d(np.asarray(a, dtype=complex)) for a in (tau, z, tau2))
        P = tau.size
        nl = len(self.lifts)
        logmod = np.empty((nl, P))
        phase = np.empty((nl, P))
        logrel = np.empty((nl, P))
        logabs = np.empty((nl, P))
        lam = np.array(
            [np.linalg.eigvalsh(np.array([[a.imag, b.imag], [b.imag, c.imag]]))[0] for a, b, c in zip(tau, z, tau2)]
        )
        if np.any(lam <= 0):
            raise DomainError("Im Z must be positive definite")
        for s in range(0, P, chunk):
            sl = slice(s, s + chunk)
            E = 2j * np.pi * (
                np.outer(tau[sl], self.n) + np.outer(z[sl], self.r) + np.outer(tau2[sl], self.m)
            ) + self.logamax[None, :]
            off = E.real.max(axis=1)
            W = np.exp(E - off[:, None])
            vals = W @ self.Ahat.T
            absum = np.abs(W) @ np.abs(self.Ahat.T)
            with np.errstate(divide="ignore"):
                logmod[:, sl] = (np.log(np.abs(vals)) + off[:, None]).T
            phase[:, sl] = np.angle(vals).T
            logabs[:, sl] = (np.log(absum) + off[:, None]).T
            for i, (logC, beta) in enumerate(self.env):
                logrel[i, sl] = _log_tail(logC, beta, self.S, lam[sl]) - logabs[i, sl]
        return logmod, phase, logrel, logabs

    def log_mass(self, tau, z, tau2, tol: float = 1e-8, strict: bool = True, upper: bool = False):
        """log sum_F det(Y)^k |F|^2/<F,F> and the largest relative tail.

        With ``upper`` the mass bound using |F| + tail is returned as well.
        """
        logmod, _, logrel, logabs = self.values(tau, z, tau2)
        detY = np.atleast_1d(np.asarray(tau).imag * np.asarray(tau2).imag - np.asarray(z).imag ** 2)

        def combine(lmod):
            t = 2 * lmod - self.lognorm[:, None]
            mx = t.max(axis=0)
            return self.k * np.log(detY) + mx + np.log(np.exp(t - mx).sum(axis=0))

        with np.errstate(divide="ignore", invalid="ignore"):
            lm = combine(logmod)
        worst = logrel.max(axis=0)
        if strict and np.any(worst > math.log(tol)):
            raise TruncationError(f"Fourier tail {math.exp(worst.max()):.3g} above {tol:g}", achieved=math.exp(worst.max()))
        if upper:
            return lm, worst, combine(np.logaddexp(logmod, logrel + logabs))
        return lm, worst


def sk_eval(F: SKLift, Z: SiegelPoint, tol: float = 1e-10) -> LogComplex:
    """F(Z) by the Fourier sum over T with tr T <= S, S^2 <= Dmax; certified against the envelope tail."""
    ev = _SKEvaluator([F])
    logmod, phase, logrel, _ = ev.values([Z.tau], [Z.z], [Z.tau2])
    if logrel[0, 0] > math.log(tol):
        raise TruncationError(f"tail ratio {math.exp(logrel[0, 0]):.3g} above {tol:g}", achieved=math.exp(logrel[0, 0]))
    return LogComplex(float(logmod[0, 0]), float(phase[0, 0]))


def sk_mass(k: int, lifts, Z: SiegelPoint, tol: float = 1e-8) -> float:
    """log of sum_F det(Y)^k |F(Z)|^2/<F,F> over the lifts."""
    if any(F.k != k for F in lifts):
        raise DomainError("weight mismatch")
    lm, _ = _SKEvaluator(lifts).log_mass([Z.tau], [Z.z], [Z.tau2], tol)
    return float(lm[0])


def sk_lower_bound_rhs(k: int, lifts) -> float:
    """log of det(Y0)^k e^{-4 pi tr Y0} sum_F |a_F(I_2)|^2/<F,F> at Y0 = (k/4pi) I."""
    v0 = k / (4 * math.pi)
    T = HalfIntegralMatrix(1, 0, 1)
    s = sum(abs(complex(maass_coeff(F, T))) ** 2 / F.norm_F for F in lifts)
    return 2 * k * math.log(v0) - 8 * math.pi * v0 + math.log(s)


def moment_2r(k: int, lifts, r: int, Z: SiegelPoint) -> dict:
    """sum_F (det(Y)^k |F|^2/<F,F>)^r with the Hoelder bound (max single mass)^(r-1) x (r = 1 sum)."""
    if r not in (1, 2, 3):
        raise DomainError("r in {1, 2, 3}")
    ev = _SKEvaluator(lifts)
    logmod, _, _, _ = ev.values([Z.tau], [Z.z], [Z.tau2])
    single = k * math.log(Z.det_Y) + 2 * logmod[:, 0] - ev.lognorm
    mx = single.max()
    log_moment = r * mx + math.log(np.exp(r * (single - mx)).sum())
    log_m2 = mx + math.log(np.exp(single - mx).sum())
    log_bound = (r - 1) * mx + log_m2
    return {"log_moment": float(log_moment), "log_bound": float(log_bound), "holds": bool(log_moment <= log_bound + 1e-12)}


# ============================================================================
# Kohnen-Zagier
# ============================================================================


@dataclass
class KZReport:
    k: int
    D: int
    lhs: float
    rhs: float
    residual: float
    ratio_index_normalised: float
    details: dict


def kohnen_zagier_check(k: int, D: int, lift: SKLift | None = None) -> KZReport:
    """|c(|D|)|^2 against Gamma(k-1)/pi^(k-1) |D|^(k-3/2) L(k-1, f x chi_D) <h,h>/(6 <f,f>).

    <h,h> here is the unnormalised integral over Gamma_0(4)\\H, six times the
    index-normalised <phi,phi>/2^(2k-3) used in ``sk_norms``.  The ratio
    obtained with the index-normalised norm is reported alongside.
    """
    if D >= 0 or not is_fundamental_discriminant(D):
        raise DomainError("D must be a negative fundamental discriminant")
    if lift is None:
        lifts = sk_lifts(k)
        if len(lifts) != 1:
            raise DomainError("pass a lift explicitly when dim J^cusp_{k,1} > 1")
        lift = lifts[0]
    f = lift.f
    if not (f.norm > 0):
        f = EigenformData(f.weight, f.level, f.a, petersson_norm_numeric(f), "quadrature")
    c = abs(complex(lift.phi(abs(D))))
    L = central_L_twist(f, D)
    hh_normalised = lift.norm_phi / 2.0 ** (2 * k - 3)
    hh = 6 * hh_normalised
    rhs = math.exp(math.lgamma(k - 1) - (k - 1) * math.log(math.pi) + (k - 1.5) * math.log(abs(D))) * L * hh / (6 * f.norm)
    lhs = c * c
    return KZReport(
        k,
        D,
        lhs,
        rhs,
        abs(lhs - rhs) / abs(rhs),
        lhs / (rhs / 6),
        {"L_central": L, "norm_f": f.norm, "norm_h": hh, "norm_phi": lift.norm_phi},
    )


# ============================================================================
# Pullback to the diagonal and S_k tensor masses
# ============================================================================


def pullback_coeffs(F: SKLift, nmax: int) -> dict:
    """b(n, m) = sum_{r^2 < 4nm} a_F(n, r, m) for 1 <= n, m <= nmax."""
    if 4 * nmax * nmax > F.Dmax:
        raise TruncationError("Jacobi table too short for the pullback range")
    out = {}
    for n in range(1, nmax + 1):
        for m in range(n, nmax + 1):
            R = math.isqrt(4 * n * m - 1)
            r = np.arange(-R, R + 1)
            b = float(_coeff_vector(F, np.full(r.size, n), r, np.full(r.size, m)).sum())
            out[(n, m)] = b
            out[(m, n)] = b
    return out


def pullback_eval(F: SKLift, tau: complex, tau2: complex) -> complex:
    """F(tau, 0, tau2) from the pullback coefficients (tails certified through sk_eval's envelope)."""
    nmax = math.isqrt(F.Dmax // 4)
    b = pullback_coeffs(F, nmax)
    n = np.arange(1, nmax + 1)
    q1 = np.exp(2j * np.pi * n * tau)
    q2 = np.exp(2j * np.pi * n * tau2)
    B = np.array([[b[(i, j)] for j in n] for i in n])
    return complex(q1 @ B @ q2)


def pullback_mass_p(k: int, lifts, tau: complex, tau2: complex, tol: float = 1e-8) -> float:
    """log of sum_F (v v')^k |F(tau, 0, tau2)|^2/<F,F>."""
    lm, _ = _SKEvaluator(lifts).log_mass([tau], [0j], [tau2], tol)
    return float(lm[0])


def _form_values(forms, taus: np.ndarray) -> np.ndarray:
    """g(tau) for each eigenform on an array of points (rows: forms)."""
    N = min(f.N for f in forms)
    n = np.arange(1, N + 1)
    taus = np.asarray(taus, dtype=complex)
    if np.min(taus.imag) * 2 * np.pi * N < 60 + forms[0].weight * math.log(N):
        raise TruncationError("q-expansion too short for the lowest point")
    Q = np.exp(2j * np.pi * np.outer(taus, n))
    return np.array([Q @ f.a[1 : N + 1] for f in forms])


def _norms(forms) -> list:
    return [f.norm if f.norm > 0 else petersson_norm_numeric(f) for f in forms]


def tensor_diag_mass(k: int, forms, tau: complex, tau2: complex) -> float:
    """log of sum_g (v v')^k |g(tau) g(tau2)|^2/<g,g>^2."""
    g1 = _form_values(forms, [tau])[:, 0]
    g2 = _form_values(forms, [tau2])[:, 0]
    nr = np.array(_norms(forms))
    s = np.sum(np.abs(g1 * g2) ** 2 / nr**2)
    return k * math.log(tau.imag * tau2.imag) + math.log(s)


def witt_norm(norm_i: float, norm_j: float, same: bool) -> float:
    """||s(g_i, g_j)||^2 = 2 ||g_i||^2 ||g_j||^2 (1 + delta_ij) for s = g_i x g_j + g_j x g_i."""
    return 2 * norm_i * norm_j * (2 if same else 1)


def witt_sym_mass(k: int, forms, tau: complex, tau2: complex) -> float:
    """log of sum_{i <= j} (v v')^k |s(g_i, g_j)(tau, tau2)|^2/||s(g_i, g_j)||^2."""
    g1 = _form_values(forms, [tau])[:, 0]
    g2 = _form_values(forms, [tau2])[:, 0]
    nr = _norms(forms)
    s = 0.0
    for i in range(len(forms)):
        for j in range(i, len(forms)):
            val = g1[i] * g2[j] + g1[j] * g2[i]
            s += abs(val) ** 2 / witt_norm(nr[i], nr[j], i == j)
    return k * math.log(tau.imag * tau2.imag) + math.log(s)


def inner_product_numeric(f: EigenformData, g: EigenformData) -> float:
    """<f, g> for real-coefficient forms by polarisation of the quadrature norm."""
    if f.weight != g.weight:
        raise DomainError("weights differ")
    N = min(f.N, g.N)
    a, b = np.asarray(f.a[: N + 1], float), np.asarray(g.a[: N + 1], float)
    return (petersson_norm_numeric(a + b, f.weight) - petersson_norm_numeric(a - b, f.weight)) / 4


def lvalue_matrix_rank(k: int, lifts=None, forms=None, tol: float = 1e-8, nmax: int | None = None) -> dict:
    """Fit b_F(n, m) = sum_g c_{g,F} a_g(n) a_g(m) by least squares and return the rank of (c_{g,F}).

    Raises ContractError when the worst relative fit residual exceeds 1e-6.
    """
    lifts = sk_lifts(k) if lifts is None else lifts
    forms = eigenbasis(k, 60) if forms is None else forms
    if not forms:
        return {"rank": 0, "matrix": np.zeros((len(lifts), 0)), "residual": 0.0, "kernel_dim": len(lifts)}
    dmin = min(F.Dmax for F in lifts)
    nmax = min(math.isqrt(dmin // 4), 12) if nmax is None else nmax
    pairs = [(n, m) for n in range(1, nmax + 1) for m in range(n, nmax + 1)]
    A = np.array([[float(g.a[n]) * float(g.a[m]) for g in forms] for n, m in pairs])
    scale = np.array([max(float(n * m), 1.0) ** (-(k - 1) / 2) for n, m in pairs])
    C = np.zeros((len(lifts), len(forms)))
    worst = 0.0
    for i, F in enumerate(lifts):
        b = pullback_coeffs(F, nmax)
        rhs = np.array([b[p] for p in pairs])
        sol, *_ = np.linalg.lstsq(A * scale[:, None], rhs * scale, rcond=None)
        res = np.linalg.norm((A @ sol - rhs) * scale) / max(np.linalg.norm(rhs * scale), 1e-300)
        worst = max(worst, float(res))
        C[i] = sol / math.sqrt(F.norm_F)
    if worst > 1e-6:
        raise ContractError(f"pullback not in the diagonal tensor span (residual {worst:.3g})")
    sv = np.linalg.svd(C, compute_uv=False)
    rank = int(np.sum(sv > tol * sv[0])) if sv.size and sv[0] > 0 else 0
    return {"rank": rank, "matrix": C, "residual": worst, "singular_values": sv, "kernel_dim": len(lifts) - rank}


# ============================================================================
# Sup scans
# ============================================================================


def _ascend(f, x0: list, steps: list, bounds: list, best: float, min_step: float = 1e-5, rounds: int = 80):
    """Coordinate ascent with step halving; returns (best value, coordinates, evaluations)."""
    x = list(x0)
    evals = 0
    for _ in range(rounds):
        moved = False
        for j in range(len(x)):
            for sgn in (1, -1):
                c = list(x)
                c[j] = min(max(c[j] + sgn * steps[j], bounds[j][0]), bounds[j][1])
                if c == x:
                    continue
                val = f(c)
                evals += 1
                if val > best:
                    best, x, moved = val, c, True
                    break
        if not moved:
            steps = [s / 2 for s in steps]
            if max(steps) < min_step:
                break
    return best, x, evals


def _sk_grid(k: int, grid: dict | None) -> dict:
    g = {"nv": 10, "nt": 5, "v_lo": 0.866, "v_hi": float(k)}
    if grid:
        g.update(grid)
    return g


def sup_sk(k: int, lifts=None, grid: dict | None = None, tol: float = 1e-8) -> MassReport:
    """Restricted sup of the SK_k mass on Z = iY, Y = [[v, y], [y, v']], v <= v', 0 <= y <= v/2."""
    lifts = sk_lifts(k) if lifts is None else lifts
    ev = _SKEvaluator(lifts)
    g = _sk_grid(k, grid)
    lv = np.linspace(math.log(g["v_lo"]), math.log(g["v_hi"]), int(g["nv"]))
    ts = np.linspace(0, 0.5, int(g["nt"]))
    pts = [(a, b, t) for i, a in enumerate(lv) for b in lv[i:] for t in ts]
    A = np.array(pts)
    v, v2 = np.exp(A[:, 0]), np.exp(A[:, 1])
    y = A[:, 2] * v
    lm, worst, up = ev.log_mass(1j * v, 1j * y, 1j * v2, tol, strict=False, upper=True)
    i = int(np.argmax(np.where(worst <= math.log(tol), lm, -np.inf)))
    best = float(lm[i])
    # points whose tail is not certified are discarded only if even their upper bound loses
    bad = worst > math.log(tol)
    if np.any(up[bad] >= best):
        raise TruncationError("uncertified grid point could exceed the reported sup")

    def f(c):
        vv, vv2 = math.exp(c[0]), math.exp(c[1])
        if vv > vv2:
            return -math.inf
        val, w = ev.log_mass([1j * vv], [1j * c[2] * vv], [1j * vv2], tol, strict=False)
        return float(val[0]) if w[0] <= math.log(tol) else -math.inf

    step = (lv[-1] - lv[0]) / max(len(lv) - 1, 1) / 2
    best, x, evals = _ascend(f, list(A[i]), [step, step, 0.25 / max(len(ts) - 1, 1)],
                             [(lv[0], lv[-1]), (lv[0], lv[-1]), (0.0, 0.5)], best)
    vv, vv2 = math.exp(x[0]), math.exp(x[1])
    return MassReport(
        functional="SK_k",
        k=k,
        value_log=best,
        argmax={"tau": [0.0, vv], "z": [0.0, x[2] * vv], "tau2": [0.0, vv2]},
        grid={**g, "points": len(pts), "evaluations": len(pts) + evals, "slice": "Z = iY, v <= v', 0 <= y <= v/2"},
        truncation={"S": ev.S, "Dmax": min(F.Dmax for F in lifts), "uncertified_discarded": int(bad.sum()), "tail_tol": tol},
    )


def sup_pullback(k: int, lifts=None, grid: dict | None = None, tol: float = 1e-8) -> MassReport:
    """sup of the pullback mass on the y = 0 part of the SK slice (tau = iv, tau2 = iv')."""
    lifts = sk_lifts(k) if lifts is None else lifts
    ev = _SKEvaluator(lifts)
    g = _sk_grid(k, grid)
    lv = np.linspace(math.log(g["v_lo"]), math.log(g["v_hi"]), int(g["nv"]))
    A = np.array([(a, b) for i, a in enumerate(lv) for b in lv[i:]])
    v, v2 = np.exp(A[:, 0]), np.exp(A[:, 1])
    lm, worst = ev.log_mass(1j * v, 0 * v + 0j, 1j * v2, tol, strict=False)
    i = int(np.argmax(np.where(worst <= math.log(tol), lm, -np.inf)))

    def f(c):
        if c[0] > c[1]:
            return -math.inf
        val, w = ev.log_mass([1j * math.exp(c[0])], [0j], [1j * math.exp(c[1])], tol, strict=False)
        return float(val[0]) if w[0] <= math.log(tol) else -math.inf

    step = (lv[-1] - lv[0]) / max(len(lv) - 1, 1) / 2
    best, x, evals = _ascend(f, list(A[i]), [step, step], [(lv[0], lv[-1])] * 2, float(lm[i]))
    return MassReport(
        functional="SK_k_pullback",
        k=k,
        value_log=best,
        argmax={"tau": [0.0, math.exp(x[0])], "tau2": [0.0, math.exp(x[1])]},
        grid={**g, "points": len(A), "evaluations": len(A) + evals},
        truncation={"S": ev.S, "tail_tol": tol},
    )


def density(k: int, lifts=None, grid: dict | None = None) -> dict:
    """d = sup(pullback mass)/sup(SK mass) on matched grids; the pullback points belong to the SK domain."""
    sk = sup_sk(k, lifts, grid)
    pb = sup_pullback(k, lifts, grid)
    log_sk = max(sk.value_log, pb.value_log)
    return {"d": math.exp(pb.value_log - log_sk), "sk": sk, "pullback": pb}


def _tau_grid(k: int, nu: int, nv: int, v_hi: float) -> np.ndarray:
    us = np.linspace(-0.5, 0.5, nu)
    vs = np.exp(np.linspace(math.log(math.sqrt(3) / 2), math.log(v_hi), nv))
    U, V = np.meshgrid(us, vs, indexing="ij")
    keep = U**2 + V**2 >= 1 - 1e-12
    return (U + 1j * V)[keep]


def _pair_scan(k: int, forms, kind: str, grid: dict | None) -> MassReport:
    g = {"nu": 21, "nv": 30, "v_hi": float(k)}
    if grid:
        g.update(grid)
    forms = tuple(forms)
    nr = np.array(_norms(forms))
    pts = _tau_grid(k, int(g["nu"]), int(g["nv"]), g["v_hi"])
    G = _form_values(forms, pts)  # forms x points
    w = pts.imag ** (k / 2)

    def pair_log(G1, w1, G2, w2):
        if kind == "tensor":
            M = sum(np.outer(np.abs(G1[i] * w1) ** 2, np.abs(G2[i] * w2) ** 2) / nr[i] ** 2 for i in range(len(forms)))
        else:
            M = 0.0
            for i in range(len(forms)):
                for j in range(i, len(forms)):
                    S = np.outer(G1[i] * w1, G2[j] * w2) + np.outer(G1[j] * w1, G2[i] * w2)
                    M = M + np.abs(S) ** 2 / witt_norm(nr[i], nr[j], i == j)
        with np.errstate(divide="ignore"):
            return np.log(M)

    M = pair_log(G, w, G, w)
    a, b = np.unravel_index(int(np.argmax(M)), M.shape)
    best = float(M[a, b])

    def f(c):
        t1, t2 = complex(c[0], math.exp(c[1])), complex(c[2], math.exp(c[3]))
        for t in (t1, t2):
            if abs(t.real) > 0.5 or abs(t) < 1:
                return -math.inf
        G1 = _form_values(forms, [t1])
        G2 = _form_values(forms, [t2])
        return float(pair_log(G1, np.array([t1.imag ** (k / 2)]), G2, np.array([t2.imag ** (k / 2)]))[0, 0])

    du = 1.0 / (g["nu"] - 1) / 2
    dv = math.log(g["v_hi"] / (math.sqrt(3) / 2)) / (g["nv"] - 1) / 2
    x0 = [pts[a].real, math.log(pts[a].imag), pts[b].real, math.log(pts[b].imag)]
    bnd = [(-0.5, 0.5), (math.log(math.sqrt(3) / 2), math.log(g["v_hi"]))] * 2
    best, x, evals = _ascend(f, x0, [du, dv, du, dv], bnd, best)
    return MassReport(
        functional=f"{kind}_S{k}",
        k=k,
        value_log=best,
        argmax={"tau": [x[0], math.exp(x[1])], "tau2": [x[2], math.exp(x[3])]},
        grid={**g, "points": int(pts.size) ** 2, "evaluations": int(pts.size) ** 2 + evals},
        truncation={"qexp_terms": min(f.N for f in forms)},
    )


def sup_tensor(k: int, forms=None, grid: dict | None = None) -> MassReport:
    """sup over F x F of the diagonal tensor mass of S_k."""
    forms = eigenbasis(k, max(120, 4 * k), True) if forms is None else forms
    if not forms:
        raise DomainError(f"S_{k} is zero")
    return _pair_scan(k, forms, "tensor", grid)


def sup_witt(k: int, forms=None, grid: dict | None = None) -> MassReport:
    """sup over F x F of the symmetric-square (Witt image) mass of S_k."""
    forms = eigenbasis(k, max(120, 4 * k), True) if forms is None else forms
    if not forms:
        raise DomainError(f"S_{k} is zero")
    return _pair_scan(k, forms, "witt", grid)
