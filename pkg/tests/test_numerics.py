import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from vortexlab.numerics import (
    ContourError,
    ContourSpec,
    DiscreteField,
    GridError,
    OperatorMatrix,
    SchurOperator,
    axis_corrected_weights,
    build_meridional_grid,
    build_radial_grid,
    contour_resolvent_projection,
    eigensolve,
    factor_sparse,
    fd_matrix,
    fd_weights,
    sobolev_norm,
    staggered_diff,
    trapezoid_weights,
    weighted_operator_norm,
)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-2.0, 2.0), min_size=5, max_size=7, unique=True),
       st.floats(-1.0, 1.0))
def test_fd_weights_exact_on_polynomials(nodes, x0):
    nodes = np.sort(np.array(nodes))
    if np.min(np.diff(nodes)) < 0.05:
        return
    n = len(nodes)
    w = fd_weights(x0, nodes, 2)
    coef = np.arange(1, n + 1, dtype=float)
    poly = np.polynomial.Polynomial(coef[: n - 1])
    for k in range(3):
        exact = poly.deriv(k)(x0) if k else poly(x0)
        scale = max(1.0, abs(exact)) * 10.0 ** (2 * k)
        assert abs(w[:, k] @ poly(nodes) - exact) <= 1e-9 * scale


def test_fd_matrix_convergence_order():
    errs = []
    for n in (41, 81):
        x = np.linspace(0.0, 2.0, n)
        d = fd_matrix(x, 1, 4)
        errs.append(np.max(np.abs(d @ np.sin(x) - np.cos(x))))
    assert np.log2(errs[0] / errs[1]) > 3.5


def test_fd_matrix_mirror_odd_function():
    h = 0.05
    x = h * (np.arange(60) + 0.5)
    d = fd_matrix(x, 1, 6, mirror_sign=-1)
    # sin is odd, so the mirrored stencil reproduces its derivative near zero too
    assert np.max(np.abs(d @ np.sin(x) - np.cos(x))[:10]) < 1e-8
    with pytest.raises(GridError):
        fd_matrix(np.linspace(0, 1, 4), 1, 6)


def test_staggered_diff_midpoints_and_sawtooth():
    x = np.linspace(0.0, 1.0, 41)
    mid, g = staggered_diff(x, 4)
    assert np.allclose(mid, 0.5 * (x[1:] + x[:-1]))
    assert np.max(np.abs(g @ x ** 2 - 2 * mid)) < 1e-10
    saw = (-1.0) ** np.arange(len(x))
    assert np.min(np.abs(g @ saw)[2:-2]) > 1.0
    with pytest.raises(GridError):
        staggered_diff(x, 3)


@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=30))
def test_trapezoid_weights_sum_to_length(steps):
    x = np.concatenate([[0.3], 0.3 + np.cumsum(steps)])
    w = trapezoid_weights(x)
    assert np.isclose(w.sum(), x[-1] - x[0])
    assert np.isclose(trapezoid_weights(x, mirror=True).sum(), x[-1])


@pytest.mark.parametrize("offset", [0.5, 1.0])
def test_axis_corrected_weights_gaussian_moment(offset):
    h = 0.1
    x = h * (np.arange(120) + offset)
    plain = trapezoid_weights(x, mirror=offset == 0.5) * x
    if offset == 1.0:
        plain = np.full_like(x, h) * x
    corrected = axis_corrected_weights(x, plain)
    f = np.exp(-x ** 2)
    exact = 0.5
    assert abs(corrected @ f - exact) < 1e-6
    assert abs(corrected @ f - exact) < 0.01 * abs(plain @ f - exact)


def test_axis_corrected_weights_leaves_other_layouts():
    x = np.array([0.0, 0.3, 0.5, 1.0, 2.0])
    w = np.ones(5)
    assert np.array_equal(axis_corrected_weights(x, w), w)


def test_radial_grid_quadrature_and_derivative():
    g = build_radial_grid(96, 32.0, tail_power=None)
    assert g.n == 96 and g.nodes[-1] == 32.0
    assert abs(g.integrate(np.exp(-g.nodes ** 2)) - 0.5) < 1e-10
    assert np.max(np.abs(g.diff1 @ np.exp(-g.nodes ** 2) + 2 * g.nodes * np.exp(-g.nodes ** 2))) < 1e-7


def test_radial_grid_tail_closure():
    # int_0^inf rho (1 + rho^2)^-2 d rho = 1/2, integrand ~ rho^-4
    g = build_radial_grid(128, 64.0, tail_power=4.0)
    f = (1.0 + g.nodes ** 2) ** -2
    assert abs(g.integrate(f) - 0.5) < 1e-6


def test_radial_grid_breaks_keep_kinks_resolved():
    g = build_radial_grid(96, 16.0, breaks=(1.0,), tail_power=None)
    f = np.where(g.nodes < 1.0, 1.0 - g.nodes ** 2, 0.0) ** 2
    exact = 1.0 / 6.0
    assert abs(g.integrate(f) - exact) < 1e-10
    assert g.jump1 is not None and len(g.interfaces) == 1


@pytest.mark.parametrize("kwargs", [dict(n=4, rho_max=1.0), dict(n=16, rho_max=-1.0),
                                    dict(n=16, rho_max=4.0, breaks=(5.0,))])
def test_radial_grid_rejects_bad_input(kwargs):
    with pytest.raises(GridError):
        build_radial_grid(**kwargs)


def test_meridional_grid_structure():
    g = build_meridional_grid(0.1, 4.0, 12.0, ell=6.0, r_kind="axis", growth=1.15)
    core = g.core_mask()
    assert core.sum() > 0
    d = np.diff(g.r_nodes)
    assert np.max(d) <= 1.15 ** 60 * 0.1
    # Gaussian tube around the ring: int 2 pi (ell + r) exp(-r^2 - z^2) dr dz = 2 pi^2 ell
    rr, zz = g.mesh()
    f = np.exp(-(rr ** 2 + zz ** 2))
    assert abs(np.sum(g.quad_3d * f) / (2 * np.pi ** 2 * g.ell) - 1) < 1e-8
    with pytest.raises(GridError):
        build_meridional_grid(0.1, 1.0, 0.5)


def test_factor_sparse_large_matches_direct():
    n = 60
    lap = sp.diags([np.full(n - 1, -1.0), np.full(n, 4.0), np.full(n - 1, -1.0)], [-1, 0, 1])
    a = (sp.kron(sp.identity(n), lap) + sp.kron(sp.diags([-1.0, -1.0], [-1, 1], shape=(n, n)),
                                                sp.identity(n))).tocsc()
    rhs = np.random.default_rng(5).standard_normal(n * n)
    lu = factor_sparse(a)
    assert lu.perm is not None
    x = lu.solve(rhs)
    assert np.linalg.norm(a @ x - rhs) < 1e-10 * np.linalg.norm(rhs)
    xt = lu.solve(rhs, trans="T")
    assert np.linalg.norm(a.T @ xt - rhs) < 1e-10 * np.linalg.norm(rhs)


def test_eigensolve_dense_sorted_by_real_part():
    a = np.diag([1.0, 3.0, -2.0, 0.5]) + 0j
    spec = eigensolve(a)
    assert np.allclose(spec.values, [3.0, 1.0, 0.5, -2.0])
    assert spec.abscissa == 3.0
    assert np.max(spec.residuals) < 1e-14


def test_eigensolve_shift_invert_tridiagonal():
    n = 400
    a = sp.diags([np.ones(n - 1), -2.0 * np.ones(n), np.ones(n - 1)], [-1, 0, 1], format="csr")
    exact = -2.0 + 2.0 * np.cos(np.pi * np.arange(1, n + 1) / (n + 1))
    spec = eigensolve(OperatorMatrix(a), ("shift_invert", -1.0, 3), tol=1e-12)
    for v in spec.values:
        assert np.min(np.abs(exact - v.real)) < 1e-10
        assert abs(v.imag) < 1e-10


def test_schur_operator_dense_and_shift():
    rng = np.random.default_rng(2)
    A = sp.csr_matrix(rng.standard_normal((6, 6)))
    B = sp.csr_matrix(rng.standard_normal((6, 4)))
    E = sp.csr_matrix(rng.standard_normal((4, 6)))
    C = sp.csc_matrix(rng.standard_normal((4, 4)) + 5 * np.eye(4))
    op = SchurOperator(A, B, E, C)
    direct = A.toarray() - B.toarray() @ np.linalg.solve(C.toarray(), E.toarray())
    assert np.allclose(op.dense(), direct)
    x = rng.standard_normal(6)
    sigma = 2.0 + 1.0j
    y = op.solve_shifted(sigma, x)
    assert np.allclose(sigma * y - direct @ y, x)


def test_contour_projection_counts_enclosed_eigenvalues():
    a = np.diag([1.0, 1.05, 3.0, -1.0]) + 0j
    res = contour_resolvent_projection(a, ContourSpec(1.0, 0.5))
    assert res.rank == 2
    assert res.idempotency <= 1e-6
    span = res.basis @ res.basis.conj().T
    assert np.allclose(np.diag(span).real, [1, 1, 0, 0], atol=1e-8)
    with pytest.raises(ContourError):
        contour_resolvent_projection(a, ContourSpec(2.0, 1.0, 4), max_resolvent=10.0)


def test_contour_projection_matrix_free_rank():
    n = 200
    vals = np.linspace(-5, -1, n)
    vals[0] = 0.4
    a = sp.diags(vals).tocsr()
    res = contour_resolvent_projection(OperatorMatrix(a), ContourSpec(0.4, 0.2), probe=5)
    assert res.rank == 1


def test_weighted_operator_norm_similarity():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((5, 5))
    w = rng.uniform(0.5, 2.0, 5)
    s = np.sqrt(w)
    assert np.isclose(weighted_operator_norm(m, w),
                      np.linalg.norm(s[:, None] * m / s[None, :], 2))
    assert np.isclose(weighted_operator_norm(m, None), np.linalg.norm(m, 2))


def test_sobolev_norm_radial_h0_is_l2():
    g = build_radial_grid(64, 16.0, tail_power=None)
    f = np.exp(-g.nodes ** 2)
    fld = DiscreteField(f, g)
    assert np.isclose(sobolev_norm(fld, 0), g.l2_norm(f))
    # ||f||^2 + ||f'||^2 with int rho exp(-2 rho^2) (1 + 4 rho^2) = 1/4 + 1/2
    assert abs(sobolev_norm(fld, 1) ** 2 - 0.75) < 1e-8
    with pytest.raises(ValueError):
        sobolev_norm(fld, -1)


def test_sobolev_norm_planar_gaussian():
    g = build_meridional_grid(0.05, 4.0, 10.0)
    rr, zz = g.mesh()
    f = np.exp(-(rr ** 2 + zz ** 2))
    fld = DiscreteField(f.ravel(), g)
    # int e^{-2|x|^2} = pi/2 and int |grad|^2 = int 4|x|^2 e^{-2|x|^2} = pi
    assert abs(sobolev_norm(fld, 0) ** 2 - np.pi / 2) < 1e-6
    assert abs(sobolev_norm(fld, 1) ** 2 - 1.5 * np.pi) < 1e-5
