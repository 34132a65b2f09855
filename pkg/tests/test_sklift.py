import cmath
import math
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jacobisup.elliptic import dim_cusp, eigenbasis
from jacobisup.errors import DomainError
from jacobisup.jacobi import PoincareSpec, gram_orthobasis, hecke_eigenbasis, vm_apply
from jacobisup.sklift import (
    HalfIntegralMatrix,
    SKLift,
    SiegelPoint,
    _SKEvaluator,
    density,
    inner_product_numeric,
    kohnen_zagier_check,
    lvalue_matrix_rank,
    maass_coeff,
    moment_2r,
    pullback_coeffs,
    pullback_eval,
    pullback_mass_p,
    sk_eval,
    sk_lifts,
    sk_lower_bound_rhs,
    sk_mass,
    sk_norms,
    tensor_diag_mass,
    witt_norm,
    witt_sym_mass,
)


@lru_cache(maxsize=None)
def lift(k):
    return sk_lifts(k)[0]


@lru_cache(maxsize=None)
def normed_forms(k):
    return eigenbasis(k, 200, True)


# a few generators of GL_2(Z) composed at random
_GENS = [(1, 1, 0, 1), (1, -1, 0, 1), (1, 0, 1, 1), (1, 0, -1, 1), (0, 1, 1, 0), (-1, 0, 0, 1)]


def _compose(word):
    a, b, c, d = 1, 0, 0, 1
    for g in word:
        e, f, h, i = _GENS[g]
        a, b, c, d = a * e + b * h, a * f + b * i, c * e + d * h, c * f + d * i
    return a, b, c, d


# ---------------------------------------------------------------- matrices and points


def test_half_integral_matrix():
    T = HalfIntegralMatrix(2, 2, 2)
    assert T.det2T == 12 and T.content == 2
    with pytest.raises(DomainError):
        HalfIntegralMatrix(1, 2, 1)
    with pytest.raises(DomainError):
        T.transform((1, 1, 1, 1))


def test_siegel_point_validation():
    with pytest.raises(DomainError):
        SiegelPoint(1j, 2j, 1j)
    Z = SiegelPoint(0.1 + 1.5j, 0.2 - 0.5j, -0.3 + 1.5j)
    assert Z.det_Y == pytest.approx(2.0)
    assert Z.transform((1, 1, 0, 1)).det_Y == pytest.approx(Z.det_Y)


# ---------------------------------------------------------------- Maass relation


def test_maass_examples():
    F = lift(12)
    c = F.phi
    assert maass_coeff(F, HalfIntegralMatrix(1, 0, 1)) == c(4)
    assert maass_coeff(F, HalfIntegralMatrix(1, 1, 1)) == c(3)
    assert maass_coeff(F, HalfIntegralMatrix(2, 2, 2)) == pytest.approx(c(12) + 2**11 * c(3), rel=1e-14)


@given(st.integers(1, 6), st.integers(-6, 6), st.integers(1, 6), st.lists(st.integers(0, 5), min_size=1, max_size=8))
def test_maass_gl2_invariance(n, r, m, word):
    if 4 * n * m - r * r <= 0:
        return
    F = lift(12)
    T = HalfIntegralMatrix(n, r, m)
    T2 = T.transform(_compose(word))
    assert T2.det2T == T.det2T and T2.content == T.content
    assert maass_coeff(F, T2) == maass_coeff(F, T)


def test_fourier_jacobi_coefficients_are_vm_images():
    # a_F(n, r, m) = c_{V_m phi}(n, r)
    F = lift(12)
    for m in (1, 2, 3, 5):
        vm = vm_apply(F.phi, m, 200)
        for n in range(1, 6):
            for r in range(-4, 5):
                if 4 * n * m - r * r > 0:
                    assert maass_coeff(F, HalfIntegralMatrix(n, r, m)) == pytest.approx(complex(vm.coeff(n, r)), rel=1e-12)


# ---------------------------------------------------------------- evaluation


def test_sk_eval_gl2_invariance():
    F = lift(12)
    Z = SiegelPoint(0.1 + 1.5j, 0.2 - 0.5j, -0.3 + 1.5j)
    a = sk_eval(F, Z).to_complex()
    b = sk_eval(F, Z.transform((1, 1, 0, 1))).to_complex()
    assert abs(a - b) <= 1e-8 * abs(a)
    c = sk_eval(F, Z.transform((0, 1, 1, 0))).to_complex()
    assert abs(a - c) <= 1e-8 * abs(a)


def test_sk_eval_translation_invariance():
    F = lift(12)
    Z = SiegelPoint(0.1 + 1.4j, 0.2 + 0.3j, -0.3 + 1.6j)
    a = sk_eval(F, Z).to_complex()
    b = sk_eval(F, SiegelPoint(Z.tau + 1, Z.z - 1, Z.tau2 + 2)).to_complex()
    assert abs(a - b) <= 1e-9 * abs(a)


def test_fourier_jacobi_regrouping():
    F = lift(12)
    ev = _SKEvaluator([F], S=12)
    tau, z, tau2 = 0.1 + 1.3j, 0.05 + 0.2j, -0.2 + 1.4j
    lm, ph, _, _ = ev.values([tau], [z], [tau2])
    direct = cmath.rect(math.exp(lm[0, 0]), ph[0, 0])
    # the same finite T-set summed layer by layer in m
    A = ev.Ahat[0] * np.exp(ev.logamax)
    tot = 0j
    for m in np.unique(ev.m):
        sel = ev.m == m
        inner = np.sum(A[sel] * np.exp(2j * np.pi * (ev.n[sel] * tau + ev.r[sel] * z)))
        tot += inner * cmath.exp(2j * math.pi * m * tau2)
    assert abs(tot - direct) <= 1e-12 * abs(direct)


def test_sk_eval_diagonal_matches_pullback():
    F = lift(12)
    tau, tau2 = 0.1 + 1.2j, 0.3 + 1.5j
    a = sk_eval(F, SiegelPoint(tau, 0j, tau2)).to_complex()
    b = pullback_eval(F, tau, tau2)
    assert abs(a - b) <= 1e-8 * abs(a)


def test_sk_eval_domain():
    with pytest.raises(DomainError):
        SiegelPoint(1j, 1j, 0.5j)


# ---------------------------------------------------------------- norms


def test_sk_norms_positive_and_scaling():
    F = lift(12)
    assert F.norm_F > 0 and F.norm_phi > 0
    gb = gram_orthobasis(12, 1)
    (ef,) = hecke_eigenbasis(gb, 400)
    nphi, nF, nh = sk_norms(ef, F.f)
    assert min(nphi, nF, nh) > 0
    assert nphi / nh == pytest.approx(2.0**21, rel=1e-14)
    G = F.scaled(2.0)
    assert G.norm_F == pytest.approx(4 * F.norm_F, rel=1e-15)
    Z = SiegelPoint(0.1 + 1.3j, 0.2j, 1.2j)
    assert sk_mass(12, [G], Z) == pytest.approx(sk_mass(12, [F], Z), abs=1e-12)


def test_sk_norms_relation():
    F = lift(12)
    ck = 3 * 2.0**25 / math.gamma(12)
    assert F.norm_F / F.norm_phi == pytest.approx(F.L_k * math.pi**-12 / ck, rel=1e-8)


def test_sk_norms_weight_mismatch():
    gb = gram_orthobasis(12, 1)
    (ef,) = hecke_eigenbasis(gb, 400)
    with pytest.raises(DomainError):
        sk_norms(ef, eigenbasis(12, 30)[0])


@pytest.mark.parametrize("D", [-3, -4, -7, -8])
def test_kohnen_zagier(D):
    rep = kohnen_zagier_check(12, D)
    assert rep.lhs > 0 and rep.rhs > 0
    assert rep.residual <= 1e-2
    assert rep.ratio_index_normalised == pytest.approx(6, rel=1e-2)


@pytest.mark.slow
def test_kohnen_zagier_weight10():
    rep = kohnen_zagier_check(10, -3)
    assert rep.residual <= 1e-2


def test_kohnen_zagier_domain():
    with pytest.raises(DomainError):
        kohnen_zagier_check(12, -12)
    with pytest.raises(DomainError):
        kohnen_zagier_check(12, 5)


# ---------------------------------------------------------------- masses


def test_sk_mass_lower_bound():
    k = 12
    lifts = sk_lifts(k)
    v0 = k / (4 * math.pi)
    val = sk_mass(k, lifts, SiegelPoint(1j * v0, 0j, 1j * v0))
    assert math.isfinite(val)
    assert val >= math.log(0.1) + sk_lower_bound_rhs(k, lifts)


def _lifts_from(gb, k):
    out = []
    fs = eigenbasis(2 * k - 2, 200)
    for ef in hecke_eigenbasis(gb, 1600):
        f = min(fs, key=lambda g: abs(g.a[2] - ef.eigenvalue2))
        nphi, nF, _ = sk_norms(ef, f)
        out.append(SKLift(k, ef.table, f, nF, nphi))
    return out


def test_sk_mass_basis_independent():
    k = 16
    a = _lifts_from(gram_orthobasis(k, 1), k)
    specs = [PoincareSpec.of_class(k, 1, D, r) for D, r in [(4, 0), (7, 1), (8, 0), (11, 1)]]
    b = _lifts_from(gram_orthobasis(k, 1, specs), k)
    pts = [
        SiegelPoint(0.1 + 1.3j, 0.2j, 1.2j),
        SiegelPoint(-0.2 + 1.1j, 0.1 + 0.3j, 0.4 + 1.5j),
        SiegelPoint(0.4 + 1.8j, 0j, 1.8j),
        SiegelPoint(0.0 + 1.27j, 0.5 + 0.1j, 0.25 + 1.27j),
        SiegelPoint(0.33 + 2.0j, -0.25 + 0.5j, -0.1 + 1.6j),
    ]
    for Z in pts:
        assert abs(sk_mass(k, a, Z) - sk_mass(k, b, Z)) <= 1e-6


@given(
    st.floats(-0.5, 0.5),
    st.floats(1.0, 2.5),
    st.floats(-0.5, 0.5),
    st.floats(-0.45, 0.45),
    st.floats(-0.5, 0.5),
    st.floats(1.0, 2.5),
)
def test_moment_holder_chain(u, v, x, t, u2, v2):
    y = t * min(v, v2)
    Z = SiegelPoint(complex(u, v), complex(x, y), complex(u2, v2))
    lifts = sk_lifts(16)
    for r in (1, 2, 3):
        rep = moment_2r(16, lifts, r, Z)
        assert rep["holds"]
    assert moment_2r(16, lifts, 1, Z)["log_moment"] == pytest.approx(sk_mass(16, lifts, Z, tol=1e-6), abs=1e-10)


def test_moment_domain():
    with pytest.raises(DomainError):
        moment_2r(12, sk_lifts(12), 4, SiegelPoint(1j, 0j, 1j))


# ---------------------------------------------------------------- pullback


def test_pullback_symmetry_and_b11():
    F = lift(12)
    b = pullback_coeffs(F, 6)
    for n in range(1, 7):
        for m in range(1, 7):
            assert b[(n, m)] == b[(m, n)]
    assert b[(1, 1)] == pytest.approx(2 * F.phi(3) + F.phi(4), rel=1e-14)


def test_pullback_mass_matches_direct():
    lifts = sk_lifts(12)
    tau, tau2 = 0.1 + 1.2j, -0.3 + 1.4j
    direct = sum((tau.imag * tau2.imag) ** 12 * abs(pullback_eval(F, tau, tau2)) ** 2 / F.norm_F for F in lifts)
    assert pullback_mass_p(12, lifts, tau, tau2) == pytest.approx(math.log(direct), abs=1e-8)


def test_density_bounds():
    d = density(12)
    assert 0.05 <= d["d"] <= 1 + 1e-9


# ---------------------------------------------------------------- tensor and Witt masses


def test_tensor_dim1_factorises():
    k = 12
    (g,) = normed_forms(k)
    tau, tau2 = 0.1 + 1.1j, -0.2 + 1.4j
    one = lambda t: k * math.log(t.imag) + 2 * math.log(abs(sum(g.a[n] * cmath.exp(2j * math.pi * n * t) for n in range(1, 150)))) - math.log(g.norm)
    assert tensor_diag_mass(k, [g], tau, tau2) == pytest.approx(one(tau) + one(tau2), abs=1e-10)


def test_witt_diagonal_term_equals_tensor():
    k = 12
    forms = normed_forms(k)
    tau, tau2 = 0.1 + 1.1j, -0.2 + 1.4j
    assert witt_sym_mass(k, forms, tau, tau2) == pytest.approx(tensor_diag_mass(k, forms, tau, tau2), abs=1e-12)
    assert witt_norm(2.0, 3.0, True) == 24.0 and witt_norm(2.0, 3.0, False) == 12.0


def test_witt_basis_orthogonality_k24():
    g1, g2 = normed_forms(24)
    cross = inner_product_numeric(g1, g2)
    assert abs(cross) <= 1e-3 * math.sqrt(g1.norm * g2.norm)
    # <s(g1,g2), s(g1,g1)> = 4 <g1,g1><g2,g1> relative to the norms
    ratio = 4 * g1.norm * cross / math.sqrt(witt_norm(g1.norm, g2.norm, False) * witt_norm(g1.norm, g1.norm, True))
    assert abs(ratio) <= 1e-3


def test_witt_dominates_tensor():
    k = 24
    forms = normed_forms(k)
    for tau, tau2 in [(0.1 + 1.1j, -0.2 + 1.4j), (0.0 + 2.0j, 0.5 + 1.0j)]:
        assert witt_sym_mass(k, forms, tau, tau2) >= tensor_diag_mass(k, forms, tau, tau2) - 1e-12


# ---------------------------------------------------------------- L-value matrix


@pytest.mark.parametrize("k", [16, 20])
def test_lvalue_matrix_rank(k):
    rep = lvalue_matrix_rank(k)
    assert rep["residual"] <= 1e-6
    assert rep["rank"] == dim_cusp(k)
    assert rep["kernel_dim"] == dim_cusp(2 * k - 2) - dim_cusp(k)
