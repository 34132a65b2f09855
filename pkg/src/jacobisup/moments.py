"""First moment of twisted central values over level-p newforms.

The harmonic sum ``sum_f L(1/2, f x chi_D) / <f, f>`` over newforms of weight
``kappa = 2k - 2`` and prime level ``p`` is split by the approximate
functional equation into a direct sum ``S`` and a dual sum ``T``.  Both are
evaluated through the newform Petersson formula ``Delta*_p(1, n)``; the common
factor ``(4 pi)^(kappa-1) / Gamma(kappa-1)`` is divided out everywhere, so
every value here is in the Delta*-normalisation.

Conventions
-----------
* ``eta_p`` is the Atkin-Lehner sign of a newform at ``p``; for weight
  ``2k - 2`` its root number is ``eta_p (-1)^(k-1)``.
* The smoothing weight is ``V(y) = Gamma(kappa/2, y) / Gamma(kappa/2)`` at
  ``y = 2 pi n / sqrt(q)``, with ``q = p D^2`` when ``(p, D) = 1`` and
  ``q = D^2`` when ``p | D``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .elliptic import (
    Level1Spectrum,
    afe_gamma_tail,
    afe_weight_gamma,
    c_of_p,
    delta_star,
)
from .errors import DomainError, TruncationError
from .numkernel import (
    Discriminant,
    PrecisionPolicy,
    divisors,
    is_prime,
    kronecker_chi,
    kronecker_table,
    mobius,
)

__all__ = [
    "MomentConfig",
    "MomentReport",
    "VanishingClass",
    "ForcedVanishing",
    "root_number",
    "vanishing_classifier",
    "main_terms",
    "moment_S",
    "moment_T",
    "moment_terms",
    "telescope_sum",
    "telescope_check",
    "envelopes",
    "moment_report",
    "moretwist_moment",
    "nonfund_divisor_terms",
]

EPS = 0.01
ALPHA = 0.49
SLACK = 10.0
DSTAR_TOL = 1e-8
SLACK_NOTE = "slack is a measurement choice; the implied constants are not explicit"


# ============================================================================
# Configuration
# ============================================================================


def _disc(D) -> Discriminant:
    return D if isinstance(D, Discriminant) else Discriminant.of(int(D))


@dataclass(frozen=True)
class MomentConfig:
    """One moment run: prime level p, fundamental D, Jacobi weight k.

    ``trunc`` is the n-sum length; ``None`` selects ``ceil(sqrt(qq))`` with
    ``qq = k^2 q`` the analytic conductor.  ``policy.tail_tol`` is the
    per-term truncation target for Delta*.
    """

    p: int
    D: int
    k: int
    trunc: int | None = None
    policy: PrecisionPolicy = field(default_factory=lambda: PrecisionPolicy(bits=128, tail_tol=DSTAR_TOL))

    def __post_init__(self):
        if not is_prime(self.p):
            raise DomainError(f"p must be prime, got {self.p}")
        Dobj = _disc(self.D)
        if not Dobj.is_fundamental:
            raise DomainError(f"D must be fundamental, got {Dobj.D}")
        object.__setattr__(self, "D", Dobj.D)
        if self.k % 2 or self.k < 4:
            raise DomainError(f"k must be even and >= 4, got {self.k}")
        need = math.ceil(math.sqrt(self.qq))
        if self.trunc is None:
            object.__setattr__(self, "trunc", need)
        elif self.trunc < need:
            raise DomainError(f"trunc {self.trunc} below ceil(sqrt(k^2 q)) = {need}")

    @property
    def case(self) -> str:
        return "p|D" if self.D % self.p == 0 else "coprime"

    @property
    def kappa(self) -> int:
        return 2 * self.k - 2

    @property
    def q(self) -> int:
        return self.D**2 if self.case == "p|D" else self.p * self.D**2

    @property
    def qq(self) -> int:
        return self.k**2 * self.q

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "D": self.D,
            "k": self.k,
            "trunc": self.trunc,
            "case": self.case,
            "q": self.q,
            "precision_bits": self.policy.bits,
            "tail_tol": self.policy.tail_tol,
        }


# ============================================================================
# Root numbers
# ============================================================================


def root_number(p: int, D, k: int, eta_p: int) -> int:
    """Root number of f x chi_D for a newform of weight 2k-2, level p, Atkin-Lehner sign eta_p.

    (p, D) = 1: sgn(D) chi_D(p) eps_f with eps_f = eta_p (-1)^(k-1).
    p | D: (-1)^(k-1) sgn(D), independent of eta_p.
    """
    if eta_p not in (1, -1):
        raise DomainError("eta_p must be +1 or -1")
    Dobj = _disc(D)
    if not Dobj.is_fundamental:
        raise DomainError(f"D must be fundamental, got {Dobj.D}")
    sk = -1 if (k - 1) % 2 else 1
    if Dobj.D % p == 0:
        return sk * Dobj.sign
    return Dobj.sign * kronecker_chi(Dobj.D, p) * eta_p * sk


@dataclass(frozen=True)
class VanishingClass:
    """Atkin-Lehner classes whose central twisted values vanish by sign."""

    p: int
    D: int
    k: int
    case: str
    vanishing_eta: tuple

    @property
    def forced_all(self) -> bool:
        return len(self.vanishing_eta) == 2

    def to_dict(self) -> dict:
        return {**asdict(self), "forced_all": self.forced_all}


def vanishing_classifier(p: int, D, k: int) -> VanishingClass:
    Dobj = _disc(D)
    etas = tuple(e for e in (1, -1) if root_number(p, Dobj, k, e) == -1)
    case = "p|D" if Dobj.D % p == 0 else "coprime"
    return VanishingClass(p, Dobj.D, k, case, etas)


class ForcedVanishing(DomainError):
    """Every central value in the family vanishes for sign reasons."""

    def __init__(self, cls: VanishingClass):
        super().__init__(f"all central values vanish: p={cls.p}, D={cls.D}, k={cls.k} ({cls.case})")
        self.classifier = cls


# ============================================================================
# Main terms and envelopes
# ============================================================================


def main_terms(p: int, k: int, D) -> tuple:
    """(A_p, B_p) with A_p = 1 + p/(p+1) (1 + (-1)^(k-1) sgn D) C(p), B_p = 2 + 2 C(p)."""
    C = c_of_p(p).value
    s = (-1 if (k - 1) % 2 else 1) * _disc(D).sign
    return 1 + p / (p + 1) * (1 + s) * C, 2 + 2 * C


def envelopes(p: int, D: int, k: int, eps: float = EPS, alpha: float = ALPHA) -> dict:
    """Error envelopes (implied constant 1) in the Delta*-normalisation."""
    Da = abs(int(D))
    if int(D) % p == 0:
        q = Da**2
        S = k**-alpha * Da**-alpha + p ** (-5 / 4 + eps) * k ** (-13 / 12) * Da ** (7 / 8 + eps)
        total = Da ** (7 / 8 + eps) * k ** (-13 / 12) * p ** (-5 / 4 + eps)
        sym2 = Da ** (7 / 8 + eps) * k ** (-1 / 12) * p ** (-1 / 4 + eps)
        T = S
    else:
        q = p * Da**2
        S = k**-alpha * p ** (-alpha / 2) * Da**-alpha + p ** (-9 / 16 + eps) * k ** (-5 / 24) * Da ** (7 / 8 + eps)
        T = p**-0.5 * (k * k * q) ** (-alpha / 2) + p ** (-7 / 8 + eps) * k ** (-5 / 24 + eps) * q ** (7 / 16 + eps)
        total = Da ** (7 / 8 + eps) * k ** (-5 / 24 + eps) * p ** (-7 / 16 + eps)
        sym2 = Da ** (7 / 8 + eps) * k ** (19 / 24 + eps) * p ** (9 / 16 + eps)
    return {"S": S, "T": T, "total": total, "sym2": sym2}


# ============================================================================
# Delta* evaluations
# ============================================================================


@lru_cache(maxsize=8)
def _spectrum(kappa: int) -> Level1Spectrum:
    return Level1Spectrum(kappa)


@lru_cache(maxsize=200_000)
def _dstar(p: int, n: int, kappa: int, tol: float) -> tuple:
    """(value, tail) of Delta*_p(1, n), truncation raised until tail <= tol."""
    trunc = 12
    while True:
        r = delta_star(p, n, kappa, trunc=trunc, spectrum=_spectrum(kappa))
        if r.tail_bound <= tol:
            return r.value, r.tail_bound
        if trunc >= 96:
            raise TruncationError(f"Delta*_{p}(1,{n}) tail {r.tail_bound:.3g} above {tol:.3g}", achieved=r.tail_bound)
        trunc += 8


@dataclass
class _Sum:
    value: float
    trunc_bound: float
    terms: int


def _weighted_sum(p, kappa, chi_of, arg_of, scale, N, tol, dmax_ratio) -> _Sum:
    """sum_{n<=N} chi(n) n^-1/2 V(scale n) Delta*_p(1, arg(n)) plus certified tails.

    Terms with V below 1e-18 are moved into the tail majorant, which uses
    |Delta*_p(1, m)| <= d(m) Delta*_p(1, 1) and d(m) <= 2 sqrt(m).
    """
    n = np.arange(1, N + 1)
    V = afe_weight_gamma(scale * n, kappa)
    live = np.nonzero(V >= 1e-18)[0]
    Neff = int(live[-1]) + 1 if len(live) else 0
    d11, t11 = _dstar(p, 1, kappa, tol)
    vals, tails = [], []
    for i in range(Neff):
        c = chi_of(i + 1)
        if c == 0:
            continue
        v, t = _dstar(p, arg_of(i + 1), kappa, tol)
        w = c * V[i] / math.sqrt(i + 1)
        vals.append(w * v)
        tails.append(abs(w) * t)
    # n > Neff: |chi| n^-1/2 V(scale n) d(arg) Delta*(1,1) <= 2 sqrt(dmax_ratio) V(scale n) Delta*(1,1)
    afe_tail = 2 * math.sqrt(dmax_ratio) * (d11 + t11) * afe_gamma_tail(kappa, scale, Neff)
    return _Sum(math.fsum(vals), math.fsum(tails) + afe_tail, len(vals))


def _chi(D: int):
    return lambda n: kronecker_chi(D, n)


def moment_terms(cfg: MomentConfig, which: str = "S") -> dict:
    """Per-n ingredients of S or T: n, chi_D(n), V, and Delta*_p(1, n) or (1, pn)."""
    if which not in ("S", "T"):
        raise DomainError("which must be 'S' or 'T'")
    shift = cfg.p if which == "T" else 1
    n = np.arange(1, cfg.trunc + 1)
    scale = 2 * math.pi / math.sqrt(cfg.q)
    chi = np.asarray(kronecker_table(cfg.D, cfg.trunc)[1:], dtype=float)
    V = afe_weight_gamma(scale * n, cfg.kappa)
    ds = np.array([_dstar(cfg.p, shift * int(m), cfg.kappa, cfg.policy.tail_tol)[0] for m in n])
    return {"n": n, "chi": chi, "V": V, "delta_star": ds}


def _S(cfg: MomentConfig) -> _Sum:
    scale = 2 * math.pi / math.sqrt(cfg.q)
    return _weighted_sum(cfg.p, cfg.kappa, _chi(cfg.D), lambda n: n, scale, cfg.trunc, cfg.policy.tail_tol, 1)


def _T_sign(cfg: MomentConfig) -> float:
    # eps_{f x chi_D} = -(-1)^(k-1) sgn(D) chi_D(p) p^1/2 lambda_f(p) in the coprime case
    sk = -1 if (cfg.k - 1) % 2 else 1
    return -sk * (1 if cfg.D > 0 else -1) * kronecker_chi(cfg.D, cfg.p) * math.sqrt(cfg.p)


def _T(cfg: MomentConfig) -> _Sum:
    if cfg.case == "p|D":
        s = _S(cfg)
        eps = root_number(cfg.p, cfg.D, cfg.k, 1)
        return _Sum(eps * s.value, s.trunc_bound, s.terms)
    scale = 2 * math.pi / math.sqrt(cfg.q)
    p = cfg.p
    raw = _weighted_sum(p, cfg.kappa, _chi(cfg.D), lambda n: p * n, scale, cfg.trunc, cfg.policy.tail_tol, p)
    c = _T_sign(cfg)
    return _Sum(c * raw.value, abs(c) * raw.trunc_bound, raw.terms)


def moment_S(cfg: MomentConfig) -> float:
    """S = sum_n chi_D(n) n^-1/2 V(2 pi n / sqrt q) Delta*_p(1, n)."""
    return _S(cfg).value


def moment_T(cfg: MomentConfig) -> float:
    """Dual sum: the root-number weighted sum, Delta*_p(1, pn) in the coprime case."""
    return _T(cfg).value


# ============================================================================
# Telescoping identity for the p-power main term
# ============================================================================


def _F(p: int, d1: int, d2: int, j: int) -> Fraction:
    # p^-j sum_{e | (d2, p^2j)} delta(d1, p^2j d2 / e^2)
    hits = 0
    for e in divisors(math.gcd(d2, p ** (2 * j))):
        num = p ** (2 * j) * d2
        if num % (e * e) == 0 and num // (e * e) == d1:
            hits += 1
    return Fraction(hits, p**j)


def _check_ppower(p: int, d: int) -> None:
    x = d
    while x % p == 0:
        x //= p
    if x != 1:
        raise DomainError(f"{d} is not a power of {p}")


def telescope_sum(p: int, d1: int, d2: int, jmax: int) -> tuple:
    """(sum over 1 <= j <= jmax of the difference terms, boundary term at jmax), both exact."""
    if jmax < 3:
        raise DomainError("jmax must be >= 3")
    _check_ppower(p, d1)
    _check_ppower(p, d2)
    total = sum((_F(p, d1, d2, j) - _F(p, d1, d2, j - 1) for j in range(1, jmax + 1)), Fraction(0))
    return total, _F(p, d1, d2, jmax)


def telescope_check(p: int, d1: int, d2: int, jmax: int) -> Fraction:
    """|sum - (-delta(d1, d2) + boundary)| as an exact rational; the contract is 0."""
    total, boundary = telescope_sum(p, d1, d2, jmax)
    return abs(total - (-Fraction(int(d1 == d2)) + boundary))


# ============================================================================
# Reports
# ============================================================================


@dataclass
class MomentReport:
    """S + T against the main term; every value in the Delta*-normalisation."""

    S_value: float
    T_value: float
    main_term: float
    error_budget: float
    case: str
    passed: bool
    config: dict
    residual: float
    truncation_bound: float
    slack: float
    eps: float
    alpha: float
    components: dict = field(default_factory=dict)
    sym2: dict = field(default_factory=dict)
    log_gamma_factor: float = 0.0
    note: str = SLACK_NOTE

    @property
    def total(self) -> float:
        return self.S_value + self.T_value

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    CSV_HEADER = ("p", "D", "k", "case", "S_value", "T_value", "main_term", "residual", "error_budget", "passed")

    def csv_row(self) -> tuple:
        c = self.config
        return (c["p"], c["D"], c["k"], self.case, repr(self.S_value), repr(self.T_value), repr(self.main_term),
                repr(self.residual), repr(self.error_budget), self.passed)


def _log_gamma_factor(kappa: int) -> float:
    # log of (4 pi)^(kappa-1) / Gamma(kappa-1)
    return (kappa - 1) * math.log(4 * math.pi) - math.lgamma(kappa - 1)


def moment_report(cfg: MomentConfig, slack: float = SLACK, eps: float = EPS, alpha: float = ALPHA) -> MomentReport:
    """S + T checked against A_p (coprime) or B_p (p | D) within slack times the envelope."""
    cls = vanishing_classifier(cfg.p, cfg.D, cfg.k)
    if cls.forced_all:
        raise ForcedVanishing(cls)
    S, T = _S(cfg), _T(cfg)
    A, B = main_terms(cfg.p, cfg.k, cfg.D)
    C = c_of_p(cfg.p).value
    env = envelopes(cfg.p, cfg.D, cfg.k, eps, alpha)
    if cfg.case == "p|D":
        main, S_main, T_main = B, 1 + C, 1 + C
    else:
        sk = -1 if (cfg.k - 1) % 2 else 1
        sgn = 1 if cfg.D > 0 else -1
        main, S_main, T_main = A, 1 + cfg.p * C / (cfg.p + 1), sk * sgn * cfg.p * C / (cfg.p + 1)
    residual = abs(S.value + T.value - main)
    budget = env["total"]
    trunc_bound = S.trunc_bound + T.trunc_bound
    passed = residual + trunc_bound <= slack * budget
    # conversion to the L(1, sym^2)-weighted sum: 1/L(1,sym^2 f) = Gamma(kappa) p (4 pi)^(1-kappa) / (2 pi^2 <f,f>)
    conv_exact = (cfg.kappa - 1) * cfg.p / (2 * math.pi**2)
    conv_main = cfg.kappa * cfg.p / (2 * math.pi**2)
    sym2 = {
        "value": conv_exact * (S.value + T.value),
        "main": conv_main * main,
        "envelope": env["sym2"],
        "residual": abs(conv_exact * (S.value + T.value) - conv_main * main),
    }
    components = {
        "S_main": S_main,
        "T_main": T_main,
        "S_residual": abs(S.value - S_main),
        "T_residual": abs(T.value - T_main),
        "S_envelope": env["S"],
        "T_envelope": env["T"],
        "S_terms": S.terms,
        "T_terms": T.terms,
        "A_p": A,
        "B_p": B,
        "C_p": C,
    }
    return MomentReport(
        S_value=S.value,
        T_value=T.value,
        main_term=main,
        error_budget=budget,
        case=cfg.case,
        passed=bool(passed),
        config={**cfg.to_dict(), "slack": slack},
        residual=residual,
        truncation_bound=trunc_bound,
        slack=slack,
        eps=eps,
        alpha=alpha,
        components=components,
        sym2=sym2,
        log_gamma_factor=_log_gamma_factor(cfg.kappa),
    )


# ============================================================================
# The lambda(4)-twisted moment for D = -4p, p = 3 mod 4
# ============================================================================


def nonfund_divisor_terms(D: int, n: int, p: int) -> list:
    """Surviving (d, mu(d) (D/d)) in sum_{d | n, (d, p) = 1} mu(d) (D/d) d^(k-1) lambda_f(n/d)."""
    out = []
    for d in divisors(n):
        if math.gcd(d, p) != 1:
            continue
        c = mobius(d) * kronecker_chi(D, d)
        if c:
            out.append((d, c))
    return out


def moretwist_moment(p: int, k: int, trunc: int | None = None, slack: float = SLACK,
                     policy: PrecisionPolicy | None = None) -> MomentReport:
    """sum_f lambda_f(4) L(1/2, f x chi_{-p}) / <f,f> for p = 3 mod 4, against B_p / 2.

    The insertion is expanded as sum_{d | 4} chi_{-p}(4/d) d^1/2 / 2 times
    sum_n chi_{-p}(n) n^-1/2 V(4 y_n / d) Delta*_p(1, dn); the root number is
    +1, so the dual sum equals the direct one.
    """
    if p % 4 != 3 or not is_prime(p):
        raise DomainError("moretwist_moment needs a prime p = 3 mod 4")
    D0 = -p
    policy = policy or PrecisionPolicy(bits=128, tail_tol=DSTAR_TOL)
    kappa = 2 * k - 2
    if k % 2 or k < 4:
        raise DomainError(f"k must be even and >= 4, got {k}")
    q = p * p
    need = math.ceil(k * math.sqrt(q))
    trunc = need if trunc is None else trunc
    if trunc < need:
        raise DomainError(f"trunc {trunc} below ceil(sqrt(k^2 q)) = {need}")
    scale = 2 * math.pi / math.sqrt(q)
    branches, bounds = {}, {}
    for d in (1, 2, 4):
        coef = kronecker_chi(D0, 4 // d) * math.sqrt(d) / 2
        s = _weighted_sum(p, kappa, _chi(D0), lambda n, d=d: d * n, 4 * scale / d, trunc, policy.tail_tol, d)
        branches[d] = coef * s.value
        bounds[d] = abs(coef) * s.trunc_bound
    S = math.fsum(branches.values())
    eps_rn = root_number(p, D0, k, 1)
    T = eps_rn * S
    _, B = main_terms(p, k, D0)
    main = B / 2
    Dabs = 4 * p
    env_sym2 = Dabs ** (7 / 8 + EPS) * k ** (-1 / 12) * p ** (-1 / 4 + EPS)
    budget = env_sym2 * 2 * math.pi**2 / (kappa * p)
    residual = abs(S + T - main)
    trunc_bound = 2 * math.fsum(bounds.values())
    conv_exact = (kappa - 1) * p / (2 * math.pi**2)
    conv_main = kappa * p / (2 * math.pi**2)
    cfg = {"p": p, "D": -4 * p, "D0": D0, "k": k, "trunc": trunc, "case": "p|D", "q": q,
           "precision_bits": policy.bits, "tail_tol": policy.tail_tol, "slack": slack}
    return MomentReport(
        S_value=S,
        T_value=T,
        main_term=main,
        error_budget=budget,
        case="p|D",
        passed=bool(residual + trunc_bound <= slack * budget),
        config=cfg,
        residual=residual,
        truncation_bound=trunc_bound,
        slack=slack,
        eps=EPS,
        alpha=ALPHA,
        components={"branches": {str(d): v for d, v in branches.items()}, "B_p": B, "C_p": c_of_p(p).value},
        sym2={"value": conv_exact * (S + T), "main": conv_main * main, "envelope": env_sym2,
              "residual": abs(conv_exact * (S + T) - conv_main * main)},
        log_gamma_factor=_log_gamma_factor(kappa),
    )
