import cmath
import math
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jacobisup.errors import DomainError
from jacobisup.jacobi import (
    JacobiCoeffTable,
    JacobiPoint,
    JacobiTransform,
    PoincareNormalizer,
    PoincareSpec,
    bergman_geometric,
    bergman_spectral,
    default_Dmax,
    delta_count,
    exponent_fit,
    gram_orthobasis,
    hecke_eigenbasis,
    jacobi_cusp_basis,
    jacobi_cusp_dim,
    jacobi_eval,
    mass_old_Ul,
    mass_old_Vp,
    petersson_trace,
    poincare_eval,
    poincare_fourier,
    reduce_point,
    sup_jacobi,
    sup_old_Ul,
    vm_apply,
    vm_slash_check,
    vp_image_gram,
    vp_norm_factor,
)

# classical coefficients of the index-1 weight-12 cusp form, normalised c(3) = 1
PHI12 = {3: 1, 4: 10, 7: -88, 8: -132, 11: 1275, 12: 736}


@lru_cache(maxsize=None)
def basis(k, m, Dmax=None):
    return gram_orthobasis(k, m, Dmax=Dmax)


@lru_cache(maxsize=None)
def phi_table(k, Dmax=400):
    _, ech = jacobi_cusp_basis(k, 1, Dmax)
    return ech[0]


# ---------------------------------------------------------------- reduction


def test_reduce_identity():
    red, g = reduce_point(JacobiPoint(0.0, 1.0))
    assert red == JacobiPoint(0.0, 1.0) and g.is_identity()


def test_reduce_translation():
    red, _ = reduce_point(JacobiPoint(5.0, 1.0))
    assert abs(red.u) < 1e-15 and red.v == 1.0


def test_reduce_inversion():
    red, g = reduce_point(JacobiPoint(0.0, 0.5))
    assert abs(red.tau - 2j) < 1e-15
    assert g.M in ((0, -1, 1, 0), (0, 1, -1, 0))


@given(st.floats(-3, 3), st.floats(0.05, 3), st.floats(-4, 4), st.floats(-4, 4))
def test_reduce_property(u, v, x, y):
    p = JacobiPoint(u, v, x, y)
    red, g = reduce_point(p)
    assert red.is_reduced(1e-9)
    back = g.inverse().apply(red)
    scale = max(1.0, abs(p.tau), abs(p.z))
    assert abs(back.tau - p.tau) < 1e-9 * scale and abs(back.z - p.z) < 1e-9 * scale
    fwd = g.apply(p)
    assert abs(fwd.tau - red.tau) < 1e-9 and abs(fwd.z - red.z) < 1e-9 * scale


# ---------------------------------------------------------------- Poincare series


def test_normalizer_closed_form():
    lam = PoincareNormalizer(12, 1, 1, 0)
    ref = math.gamma(10.5) * (4 * math.pi) ** -10.5 * 2**-1
    assert lam.value == pytest.approx(ref, rel=1e-13)
    assert lam.value > 0


def test_poincare_cmax_doubling():
    p = JacobiPoint(0.0, 1.2)
    a = poincare_eval(PoincareSpec(12, 1, 1, 0, cmax=30), p).to_complex()
    b = poincare_eval(PoincareSpec(12, 1, 1, 0, cmax=60), p).to_complex()
    assert abs(a - b) < 1e-12 * abs(a)
    assert abs(a - 0.0029115995422870564) < 1e-13


def test_poincare_parity():
    spec = PoincareSpec(12, 1, 1, 0)
    a = poincare_eval(spec, JacobiPoint(0.1, 1.3, 0.2, 0.1)).to_complex()
    b = poincare_eval(spec, JacobiPoint(0.1, 1.3, -0.2, -0.1)).to_complex()
    assert abs(a - b) <= 1e-13 * abs(a)


def test_poincare_high_point_matches_fourier():
    # at large v the value is carried by the first Fourier layer e(tau) (C(1,0) + 2 C(1,1) cos 2 pi x)
    spec = PoincareSpec(12, 1, 1, 0)
    F = poincare_fourier(spec, 4, 4)
    for v in (2.0, 3.0):
        q = JacobiPoint(0.3, v, 0.2, 0.1)
        val = poincare_eval(spec, q).to_complex()
        rec = sum(c * cmath.exp(2j * math.pi * (n * q.tau + r * q.z)) for (n, r), c in F.meta["raw"].items())
        assert abs(val - rec) < 1e-10 * abs(val)


def test_poincare_fourier_grid_doubling():
    spec = PoincareSpec(12, 1, 1, 0)
    F = poincare_fourier(spec, 2, 2)
    F2 = poincare_fourier(spec, 2, 2, grid=2 * F.meta["grid"])
    for key in F.meta["raw"]:
        assert abs(F.meta["raw"][key] - F2.meta["raw"][key]) < 1e-10


def test_poincare_fourier_table_symmetry():
    F = poincare_fourier(PoincareSpec(12, 1, 1, 0), 3, 3)
    raw = F.meta["raw"]
    for (n, r), c in raw.items():
        if (n, -r) in raw:
            assert abs(c - raw[(n, -r)]) < 1e-9 * max(1.0, abs(c))


def test_poincare_spec_validation():
    with pytest.raises(DomainError):
        PoincareSpec(11, 1, 1, 0)
    with pytest.raises(DomainError):
        PoincareSpec(12, 1, 1, 2)
    with pytest.raises(DomainError):
        PoincareSpec(12, 1, 1, 0, contour_v=1.0)


# ---------------------------------------------------------------- delta count


def test_delta_count_examples():
    assert delta_count(1, 1, 0, 1, 0) == 2
    assert delta_count(1, 1, 1, 1, -1) == 2
    assert delta_count(1, 1, 0, 1, 1) == 0
    assert delta_count(2, 1, 1, 2, 1) == 0  # 7 vs 15


@given(st.integers(1, 4), st.integers(1, 6), st.integers(-6, 6), st.integers(1, 6), st.integers(-6, 6))
def test_delta_count_brute_force(m, l, r, l2, r2):
    if 4 * l * m - r * r <= 0 or 4 * l2 * m - r2 * r2 <= 0:
        return
    brute = 0
    for A in (1, -1):
        for lam in range(-20, 21):
            if (l + A * r * lam + m * lam * lam, A * r + 2 * m * lam) == (l2, r2):
                brute += 1
    assert delta_count(m, l, r, l2, r2) == brute


# ---------------------------------------------------------------- trace formula and Gram bases


def test_petersson_trace_positive_diagonal():
    t = petersson_trace(12, 1, 1, 0, 1, 0)
    assert t.real > 0 and abs(t.imag) < 1e-9 * t.real


def test_petersson_trace_hermitian():
    a = petersson_trace(12, 1, 1, 0, 1, 1)
    b = petersson_trace(12, 1, 1, 1, 1, 0)
    assert abs(a - b.conjugate()) < 1e-9 * abs(a)
    # one-dimensional space: the ratio is c(4)/c(3) of the unique form
    assert (a / petersson_trace(12, 1, 1, 1, 1, 1)).real == pytest.approx(PHI12[4], rel=1e-9)


def test_echelon_basis_matches_classical_table():
    piv, ech = jacobi_cusp_basis(12, 1, 60)
    assert piv == ((3, 1),)
    for D, c in PHI12.items():
        assert ech[0](D) == c


@pytest.mark.parametrize("k, m", [(10, 1), (12, 1), (16, 1), (20, 1), (12, 2), (18, 3)])
def test_echelon_dimension_formula(k, m):
    piv, _ = jacobi_cusp_basis(k, m, default_Dmax(k, m))
    assert len(piv) == jacobi_cusp_dim(k, m)


def test_gram_rank_examples():
    three = [PoincareSpec(12, 1, 1, 0), PoincareSpec(12, 1, 1, 1), PoincareSpec(12, 1, 2, 0)]
    assert gram_orthobasis(12, 1, three).rank == 1
    assert gram_orthobasis(12, 1, three[:1]).rank == 1
    assert basis(12, 1).rank == 1


@pytest.mark.slow
def test_gram_rank_weight10():
    # weight 10 sits at the edge of absolute convergence, so the radius grows
    assert basis(10, 1).rank == 1


@pytest.mark.parametrize("k, m", [(12, 1), (16, 1), (12, 2)])
def test_gram_hermitian_psd(k, m):
    gb = basis(k, m)
    G = gb.gram
    assert np.max(np.abs(G - G.conj().T)) <= 1e-8 * np.max(np.abs(G))
    d = np.sqrt(np.real(np.diag(G)))
    ev = np.linalg.eigvalsh(G / np.outer(d, d))
    assert ev.min() >= -1e-8 * ev.max()
    assert gb.rank == jacobi_cusp_dim(k, m)


def test_gram_rank_saturates():
    classes = [(3, 1), (4, 0), (7, 1), (8, 0), (11, 1), (12, 0)]
    specs = [PoincareSpec.of_class(16, 1, D, r) for D, r in classes]
    ranks = [gram_orthobasis(16, 1, specs[:j]).rank for j in range(1, len(specs) + 1)]
    assert ranks == sorted(ranks)
    assert ranks[-1] == 2


def test_orthonormal_tables_reproduce_kernel():
    gb = basis(16, 1)
    # sum_psi |c_psi(D)|^2 equals the trace-formula kernel on pivot classes
    for a, cls in enumerate(gb.pivots):
        s = sum(abs(complex(t.data.get(cls, 0))) ** 2 for t in gb.coeff_tables)
        assert s == pytest.approx(gb.kernel[a, a].real, rel=1e-8)


def test_coefficient_symmetry_exact():
    gb = basis(12, 2)
    for t in gb.coeff_tables:
        for n in range(1, 6):
            for r in range(1, 6):
                if 4 * n * 2 - r * r > 0:
                    assert t.coeff(n, r) == t.coeff(n, -r)


def test_table_json_roundtrip():
    t = phi_table(12, 60)
    back = JacobiCoeffTable.from_json(t.to_json())
    assert back.entries == t.entries and back.Dmax == t.Dmax


# ---------------------------------------------------------------- Bergman kernels


def test_bergman_spectral_nonnegative():
    gb = basis(12, 1)
    vals = gb.mass(np.array([0.1, 0.3]), np.array([1.0, 2.0]), np.array([0.2, 0.7]), np.array([0.1, 1.5]))
    assert np.all(vals > 0)


def test_bergman_spectral_vs_geometric():
    gb = basis(12, 1)
    p = JacobiPoint(0.0, 12 / (4 * math.pi))
    s = bergman_spectral(gb, p)
    g = bergman_geometric(12, 1, p)
    assert abs(math.exp(s - g) - 1) <= 1e-4


_words = st.tuples(
    st.integers(-5, 5),  # u translation
    st.integers(-1, 1),  # lambda
    st.integers(-3, 3),  # mu
    st.booleans(),  # inversion
)


@given(st.floats(-0.5, 0.5), st.floats(0.9, 1.6), st.floats(0, 1), st.floats(0, 0.9), _words)
def test_bergman_invariance(u, v, x, t, word):
    if u * u + v * v < 1:
        return
    gb = basis(12, 1, default_Dmax(12, 1, vmin=0.3))
    p = JacobiPoint(u, v, x, t * v)
    n, lam, mu, inv = word
    M = (0, -1, 1, 0) if inv else (1, n, 0, 1)
    q = JacobiTransform(M, lam, mu).apply(p)
    ref = bergman_spectral(gb, p)
    # direct evaluation at the moved point and after reducing it again
    moved = float(np.log(gb.mass(q.u, q.v, q.x, q.y)[0]))
    red, _ = reduce_point(q)
    assert abs(moved - ref) < 1e-8
    assert abs(bergman_spectral(gb, red) - ref) < 1e-8


# ---------------------------------------------------------------- old-space operators


def test_vm_apply_identity():
    t = phi_table(12)
    assert vm_apply(t, 1).data == t.data


def test_vm_apply_examples():
    t = phi_table(12)
    v2 = vm_apply(t, 2)
    assert v2.coeff(1, 1) == t(7)
    assert v2.coeff(1, 0) == t(8)
    # (n, r) = (2, 2): a in {1, 2}, D = 12, D/4 = 3
    assert v2.coeff(2, 2) == t(12) + 2**11 * t(3)


@pytest.mark.parametrize("k", [10, 12])
@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_vm_slash_check(k, m):
    t = phi_table(k)
    assert vm_slash_check(t, m, JacobiPoint(0.1, 1.3, 0.2, 0.1)) <= 1e-8
    if m == 1:
        assert vm_slash_check(t, m, JacobiPoint(0.0, 1.3)) == 0.0


def test_vp_norm_factor():
    lam = {1: 1.0, 2: -3.0, 3: 5.0, 4: 7.0}.get
    assert vp_norm_factor(12, 1, lam) == 1.0
    assert vp_norm_factor(12, 3, lam) == pytest.approx(5.0 + 4 * 3.0**10)
    assert vp_norm_factor(12, 4, lam) == pytest.approx(7.0 + 3 * 2.0**10 * -3.0 + 6 * 4.0**10)


def test_mass_old_Ul_basics():
    gb = basis(12, 1)
    p = JacobiPoint(0.1, 1.2, 0.3, 0.2)
    assert mass_old_Ul(12, 1, gb, p) == pytest.approx(math.exp(bergman_spectral(gb, p)), rel=1e-12)
    q = JacobiPoint(0.2, 1.1)
    assert mass_old_Ul(12, 3, gb, q) == pytest.approx(float(gb.mass(0.2, 1.1, 0.0, 0.0)[0]), rel=1e-12)


def test_mass_old_Ul_sup_matches_index1():
    g = {"nu": 6, "nv": 10, "nx": 6, "ny": 6}
    a = sup_old_Ul(12, 2, g)
    b = sup_jacobi(12, 1, g)
    assert abs(a.value_log - b.value_log) < 1e-6


def test_mass_old_Vp_nonnegative_and_orthogonal():
    gb = basis(16, 1)
    efs = hecke_eigenbasis(gb, 400)
    assert len(efs) == 2
    for p in (JacobiPoint(0.1, 1.2, 0.3, 0.2), JacobiPoint(0.4, 2.0)):
        assert mass_old_Vp(16, 2, efs, p) > 0
    G = vp_image_gram(16, 2, efs, basis(16, 2))
    off = abs(G[0, 1]) / math.sqrt(abs(G[0, 0] * G[1, 1]))
    assert off < 1e-8


def test_hecke_eigenvalues_match_elliptic_partner():
    from jacobisup.elliptic import eigenbasis

    efs = hecke_eigenbasis(basis(16, 1), 400)
    fs = eigenbasis(30, 10)
    for ef, f in zip(efs, fs):
        assert ef.eigenvalue2 == pytest.approx(f.a[2], rel=1e-8)


# ---------------------------------------------------------------- sup scans and fits


def test_sup_scan_k12():
    rep = sup_jacobi(12, 1)
    vstar = 12 / (4 * math.pi)
    assert vstar / 3 <= rep.argmax["v"] <= 3 * vstar
    assert rep.argmax["y"] <= 0.1 * rep.argmax["v"] or abs(rep.argmax["y"] - rep.argmax["v"]) <= 0.1 * rep.argmax["v"]
    gb = basis(12, 1)
    a = rep.argmax
    assert abs(float(np.log(gb.mass(a["u"], a["v"], a["x"], a["y"])[0])) - rep.value_log) < 1e-10


def test_sup_scan_grid_doubling():
    a = sup_jacobi(12, 1)
    b = sup_jacobi(12, 1, {"nu": 16, "nv": 32, "nx": 16, "ny": 16})
    assert abs(math.exp(b.value_log - a.value_log) - 1) <= 0.02


def test_sup_scan_dominates_grid():
    from jacobisup.jacobi import _grid_points, default_grid

    gb = basis(12, 1)
    rep = sup_jacobi(12, 1)
    U, V, X, Y = _grid_points(12, default_grid(12))
    assert np.max(np.log(gb.mass(U, V, X, Y))) <= rep.value_log + 1e-12


def test_exponent_fit_synthetic():
    ks = [10, 14, 20, 30, 40]
    s, _, res = exponent_fit([(k, 2 * math.log(k)) for k in ks])
    assert abs(s - 2) < 1e-9 and res < 1e-9
    s, c, _ = exponent_fit([(k, math.log(7) + 2.5 * math.log(k)) for k in ks])
    assert abs(s - 2.5) < 1e-9 and abs(c - math.log(7)) < 1e-9


def test_exponent_fit_degenerate():
    with pytest.raises(DomainError):
        exponent_fit([(10, 1.0), (12, 2.0), (14, 3.0)])
    with pytest.raises(DomainError):
        exponent_fit([(10, 1.0), (12, 2.0), (12, 3.0), (14, 4.0)])
