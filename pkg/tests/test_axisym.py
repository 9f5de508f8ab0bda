import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from vortexlab.axisym import (
    AxisymError,
    GridSpec,
    WeightSpec,
    assemble_Lell,
    ell_continuation,
    fit_exponent,
    range_outside_mass,
    ring_laplacian,
    skew_transport,
    solve_stream_axisym,
    stream_convergence_study,
    sweep_csv,
    weighted_skew_ratio,
)
from vortexlab.numerics import fd_matrix
from vortexlab.profiles import divergence_correction, make_profile, truncate

RBAR = 3.0
TRUNC = truncate(make_profile("annulus", {"center": 1.0, "width": 0.2}, m=2), RBAR)
SPEC = GridSpec(h=0.2, far=64.0)


@pytest.fixture(scope="module")
def ring_op():
    grid = SPEC.build(RBAR, 24.0)
    corr = divergence_correction(TRUNC, 24.0, grid, rbar=RBAR)
    return assemble_Lell(TRUNC, corr, 24.0, WeightSpec(RBAR), grid)


@pytest.mark.parametrize("ell", [np.inf, 10.0])
def test_ring_laplacian_on_gaussian(ell):
    grid = GridSpec(h=0.05, far=16.0).build(2.0, ell)
    rr, zz = grid.mesh()
    g = np.exp(-(rr ** 2 + zz ** 2))
    lap = (4 * (rr ** 2 + zz ** 2) - 4) * g
    if np.isfinite(ell):
        m = np.where(rr + ell > 0, rr + ell, np.inf)
        lap = lap - 2 * rr * g / m - g / m ** 2
    out = (ring_laplacian(grid) @ g.ravel()).reshape(grid.shape)
    core = grid.core_mask()
    assert np.max(np.abs(out - lap)[core]) < 1e-6


def test_stream_solve_residual_and_divergence():
    grid = SPEC.build(RBAR, 24.0)
    rr, zz = grid.mesh()
    omega = TRUNC.omega(np.hypot(rr, zz))
    sol = solve_stream_axisym(omega, grid, rbar=RBAR)
    assert sol.residual < 1e-9
    assert sol.divergence < 1e-9 * np.max(np.abs(sol.uz))
    with pytest.raises(AxisymError):
        solve_stream_axisym(np.ones(grid.shape), grid)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_skew_transport_is_weighted_skew(seed):
    rng = np.random.default_rng(seed)
    x = np.linspace(0, 1, 12)
    g1 = fd_matrix(x, 1, 4)
    Gr = sp.kron(g1, sp.identity(12), format="csr")
    Gz = sp.kron(sp.identity(12), g1, format="csr")
    ar, az = rng.standard_normal(144), rng.standard_normal(144)
    w = rng.uniform(0.1, 2.0, 144)
    T = skew_transport(ar, az, Gr, Gz, w).toarray()
    W = np.diag(w)
    assert np.max(np.abs(W @ T + T.T @ W)) < 1e-12 * np.max(np.abs(W @ T))
    assert weighted_skew_ratio(sp.csr_matrix(T), w) < 1e-12


def test_ring_operator_parts(ring_op):
    assert ring_op.part_sum_gap() < 1e-10
    assert weighted_skew_ratio(ring_op.parts["M"], ring_op.weights) < 1e-8
    # the stretching part lives where the background does, up to stencil spill
    assert range_outside_mass(ring_op, "S", RBAR) < 1e-6


def test_assemble_rejects_small_offset():
    grid = SPEC.build(RBAR, 5.0)
    with pytest.raises((AxisymError, ValueError)):
        assemble_Lell(TRUNC, None, 5.0, WeightSpec(RBAR), grid)


def test_ell_continuation_approaches_planar():
    seed = 0.1171 - 0.5503j
    lam_inf, rows = ell_continuation(TRUNC, RBAR, [24.0, 48.0], SPEC, seed, with_rank=False)
    finite = [r for r in rows if np.isfinite(r.ell)]
    assert not any(r.error for r in finite)
    assert max(r.m_skew for r in finite) < 1e-8
    assert finite[1].distance < finite[0].distance
    assert finite[1].s_norm < finite[0].s_norm
    assert lam_inf.real > 0
    assert sweep_csv(rows).splitlines()[1].startswith("inf,")


def test_stream_convergence_shrinks():
    rows = stream_convergence_study(lambda r, z: TRUNC.omega(np.hypot(r, z)), RBAR,
                                    [24.0, 48.0], SPEC)
    assert rows[1].scaled_psi < rows[0].scaled_psi
    assert rows[1].grad_diff < rows[0].grad_diff


@given(st.floats(-3.0, 3.0), st.floats(0.1, 10.0))
def test_fit_exponent_recovers_power_law(p, c):
    x = np.array([24.0, 48.0, 96.0, 192.0])
    slope, icpt = fit_exponent(x, c * x ** p)
    assert abs(slope - p) < 1e-9
    assert abs(icpt - np.log(c)) < 1e-8
