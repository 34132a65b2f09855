import json
import math
from fractions import Fraction
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jacobisup.elliptic import c_of_p
from jacobisup.errors import DomainError
from jacobisup.moments import (
    ForcedVanishing,
    MomentConfig,
    MomentReport,
    _dstar,
    _T_sign,
    envelopes,
    main_terms,
    moment_report,
    moment_S,
    moment_T,
    moment_terms,
    moretwist_moment,
    nonfund_divisor_terms,
    root_number,
    telescope_check,
    telescope_sum,
    vanishing_classifier,
)
from jacobisup.numkernel import is_fundamental_discriminant, kronecker_chi

PRIMES = (2, 3, 5, 7, 11, 13)


@lru_cache(maxsize=None)
def report(p, D, k):
    return moment_report(MomentConfig(p, D, k))


# ---------------------------------------------------------------- configuration


def test_config_case_and_conductor():
    a = MomentConfig(5, -4, 12)
    assert a.case == "coprime" and a.q == 5 * 16 and a.kappa == 22
    assert a.trunc == math.ceil(math.sqrt(144 * 80))
    b = MomentConfig(5, -20, 12)
    assert b.case == "p|D" and b.q == 400


def test_config_validation():
    with pytest.raises(DomainError):
        MomentConfig(6, -4, 12)
    with pytest.raises(DomainError):
        MomentConfig(5, -16, 12)
    with pytest.raises(DomainError):
        MomentConfig(5, -4, 11)
    with pytest.raises(DomainError):
        MomentConfig(5, -4, 12, trunc=10)


# ---------------------------------------------------------------- root numbers


def test_root_number_p_divides_D():
    for p, D in [(5, -20), (3, -3), (7, -7), (11, -11)]:
        for eta in (1, -1):
            assert root_number(p, D, 12, eta) == 1


def test_root_number_square_class():
    # D a square mod 4p: chi_D(p) = 1, so the sign is eta (k even, D < 0)
    for p, D in [(5, -4), (7, -3), (3, -8)]:
        assert kronecker_chi(D, p) == 1
        for eta in (1, -1):
            assert root_number(p, D, 12, eta) == eta


def test_root_number_domain():
    with pytest.raises(DomainError):
        root_number(5, -4, 12, 0)
    with pytest.raises(DomainError):
        root_number(5, -16, 12, 1)


def _oracle_sign(p, D, k, eta):
    # eps = chi_D(-r) mu(q') q'^1/2 lambda_f(q') eps_f with p = r q', q' = (p, D)
    eps_f = eta * (-1) ** (k - 1)
    sgn = 1 if D > 0 else -1
    if D % p:
        return sgn * kronecker_chi(D, p) * eps_f
    # r = 1, q' = p, mu(p) = -1, lambda_f(p) p^1/2 = -eta
    return sgn * (-1) * (-eta) * eps_f


def test_classifier_exhaustive():
    for p in PRIMES:
        for D in range(-100, 101):
            if not is_fundamental_discriminant(D):
                continue
            for k in (10, 12):
                expect = tuple(e for e in (1, -1) if _oracle_sign(p, D, k, e) == -1)
                cls = vanishing_classifier(p, D, k)
                assert cls.vanishing_eta == expect
                assert cls.case == ("p|D" if D % p == 0 else "coprime")
                assert cls.forced_all == (D % p == 0 and (-1) ** (k - 1) * (1 if D > 0 else -1) == -1)


def test_forced_vanishing_raises():
    with pytest.raises(ForcedVanishing) as info:
        moment_report(MomentConfig(5, 5, 12))
    assert info.value.classifier.forced_all
    assert json.loads(json.dumps(info.value.classifier.to_dict()))["forced_all"] is True


# ---------------------------------------------------------------- main terms and envelopes


def test_main_terms_k_even_negative_D():
    for p in (3, 5, 7, 11):
        C = c_of_p(p).value
        A, B = main_terms(p, 12, -4 if p != 2 else -3)
        assert A == pytest.approx(1 + 2 * p * C / (p + 1), rel=1e-15)
        assert B == pytest.approx(2 + 2 * C, rel=1e-15)
    # the other sign switches the C(p) part off
    A, _ = main_terms(5, 12, 8)
    assert A == 1.0


def test_B5():
    _, B = main_terms(5, 12, -20)
    assert B == pytest.approx(1.601, abs=1e-3)


def test_main_terms_large_p_limit():
    A, B = main_terms(10007, 12, -3)
    assert abs(A - 1) < 1e-3 and abs(B - 2) < 1e-3


def test_envelopes_positive():
    for p, D in [(5, -4), (5, -20), (7, 5)]:
        env = envelopes(p, D, 12)
        assert all(v > 0 for v in env.values())


# ---------------------------------------------------------------- telescoping


def test_telescope_exhaustive():
    for p in PRIMES:
        powers = [1, p, p * p, p**3]
        for d1 in powers:
            for d2 in powers:
                for jmax in range(3, 9):
                    assert telescope_check(p, d1, d2, jmax) == 0


def test_telescope_examples():
    for p in (2, 5, 13):
        for jmax in (3, 6):
            total, boundary = telescope_sum(p, 1, 1, jmax)
            assert total == -1 + boundary
            # only j = 0 has p^2j d2 / e^2 = 1, so the boundary vanishes
            assert boundary == 0 and total == -1
            assert telescope_sum(p, p, 1, jmax) == (0, 0)


def test_telescope_domain():
    with pytest.raises(DomainError):
        telescope_sum(5, 1, 1, 2)
    with pytest.raises(DomainError):
        telescope_check(5, 10, 1, 4)


# ---------------------------------------------------------------- S and T


def test_leading_diagonal():
    for p, D in [(5, -4), (7, -4)]:
        cfg = MomentConfig(p, D, 12)
        t = moment_terms(cfg, "S")
        first = t["chi"][0] * t["V"][0] * t["delta_star"][0]
        assert abs(t["V"][0] - 1) < 1e-8
        assert first == pytest.approx(1 + c_of_p(p).value, abs=5e-3)


def test_delta_star_consistency():
    # term-by-term rebuild of S and T from delta_star values
    cfg = MomentConfig(5, -4, 12)
    for which in ("S", "T"):
        t = moment_terms(cfg, which)
        raw = math.fsum(t["chi"] * t["V"] * t["delta_star"] / np.sqrt(t["n"]))
        if which == "S":
            assert moment_S(cfg) == pytest.approx(raw, abs=1e-12)
        else:
            assert moment_T(cfg) == pytest.approx(_T_sign(cfg) * raw, abs=1e-12)


def test_T_carries_sqrt_p():
    cfg = MomentConfig(5, -4, 12)
    assert abs(_T_sign(cfg)) == pytest.approx(math.sqrt(5), rel=1e-15)
    # dropping the p^1/2 moves T far outside the accumulation noise
    T = moment_T(cfg)
    assert abs(T - T / math.sqrt(5)) > 1e-3


def test_dstar_cache_tail():
    v, tail = _dstar(5, 1, 22, 1e-8)
    assert tail <= 1e-8 and v > 0


def test_S_T_real():
    r = report(5, -4, 12)
    assert isinstance(r.S_value, float) and isinstance(r.T_value, float)


def test_terms_domain():
    with pytest.raises(DomainError):
        moment_terms(MomentConfig(5, -4, 12), "U")


# ---------------------------------------------------------------- reports


def test_report_coprime_passes():
    r = report(5, -4, 12)
    assert r.case == "coprime" and r.passed
    assert r.main_term == r.components["A_p"]
    assert r.residual + r.truncation_bound <= r.slack * r.error_budget
    assert r.components["S_residual"] <= r.slack * r.components["S_envelope"]
    assert r.components["S_main"] == pytest.approx(1 + 5 * c_of_p(5).value / 6, rel=1e-15)


def test_report_p_divides_D_passes():
    r = report(5, -20, 12)
    assert r.case == "p|D" and r.passed
    assert r.main_term == r.components["B_p"]
    # the dual sum is the direct one times a root number of +1
    assert r.T_value == r.S_value
    assert r.components["S_residual"] <= r.slack * r.components["S_envelope"]


def test_report_json_and_csv():
    r = report(5, -20, 12)
    d = json.loads(r.to_json())
    assert d["passed"] is True and d["config"]["slack"] == 10
    assert "note" in d and d["log_gamma_factor"] == pytest.approx(21 * math.log(4 * math.pi) - math.lgamma(21))
    assert len(r.csv_row()) == len(MomentReport.CSV_HEADER)
    assert r.total == pytest.approx(r.S_value + r.T_value)


def test_T_main_sign_flip():
    a = report(7, -4, 12)
    b = report(7, 5, 12)
    assert a.passed and b.passed
    assert a.components["T_main"] == pytest.approx(-b.components["T_main"], rel=1e-15)
    assert a.components["T_main"] < 0


@pytest.mark.slow
def test_monotone_envelope_trend():
    lo = report(5, -4, 12)
    hi = report(5, -4, 16)
    assert hi.residual <= 1.5 * lo.residual


def test_sym2_conversion():
    r = report(5, -20, 12)
    kappa = 22
    assert r.sym2["value"] == pytest.approx((kappa - 1) * 5 / (2 * math.pi**2) * r.total, rel=1e-15)
    assert r.sym2["main"] == pytest.approx(kappa * 5 / (2 * math.pi**2) * r.main_term, rel=1e-15)


@given(st.sampled_from([3, 5, 7, 11, 13]), st.sampled_from([-3, -4, -7, -8, 5, 8, 12, 13]), st.sampled_from([10, 12, 14, 16]))
def test_main_term_matches_case(p, D, k):
    cls = vanishing_classifier(p, D, k)
    A, B = main_terms(p, k, D)
    assert A > 0 and B > 0
    if D % p == 0:
        assert cls.case == "p|D"
    assert root_number(p, D, k, 1) in (1, -1)


# ---------------------------------------------------------------- lambda(4) twist


def test_nonfund_divisor_terms():
    for p in (3, 7, 11):
        assert nonfund_divisor_terms(-4 * p, 2, p) == [(1, 1)]
    # an odd n keeps its squarefree divisors prime to p
    assert [d for d, _ in nonfund_divisor_terms(-4 * 7, 15, 7)] == [1, 3, 5, 15]


def test_moretwist_branches():
    r = moretwist_moment(7, 12)
    assert r.passed
    assert set(r.components["branches"]) == {"1", "2", "4"}
    assert r.S_value == pytest.approx(sum(r.components["branches"].values()), rel=1e-14)
    assert r.main_term == pytest.approx(main_terms(7, 12, -7)[1] / 2, rel=1e-15)
    # the d = 1 branch is half the untwisted sum up to the error budget
    S = moment_S(MomentConfig(7, -7, 12))
    assert abs(r.components["branches"]["1"] - S / 2) <= r.slack * r.error_budget


def test_moretwist_domain():
    with pytest.raises(DomainError):
        moretwist_moment(5, 12)
    with pytest.raises(DomainError):
        moretwist_moment(7, 11)
