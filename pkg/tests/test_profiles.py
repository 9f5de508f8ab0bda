import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from vortexlab.axisym import GridSpec
from vortexlab.numerics import build_radial_grid
from vortexlab.profiles import (
    CUTOFF_EDGE,
    ProfileError,
    TruncationError,
    corrected_velocity,
    cutoff,
    divergence_correction,
    export_profile,
    import_profile,
    make_profile,
    profile_certificate,
    ring_divergence,
    truncate,
    truncated_velocity,
)

ANNULUS = make_profile("annulus", {"center": 1.0, "width": 0.2}, m=2)
TABLE = make_profile("custom_table", {"rho": [0, 1, 1, 2], "omega": [1, 1, 0.5, 0]}, m=3)


@pytest.mark.parametrize("prof", [ANNULUS, make_profile("tail_p2"), TABLE])
def test_zeta_matches_quadrature(prof):
    for r in (0.1, 0.7, 1.0, 1.5, 3.0):
        pts = [1.0] if prof.family == "custom_table" else None
        flux = quad(lambda s: s * prof.omega(np.array([s]))[0], 0, r, points=pts,
                    epsabs=1e-14, epsrel=1e-12)[0]
        assert abs(prof.zeta(np.array([r]))[0] - flux / r ** 2) < 1e-10


def test_dzeta_and_domega_match_differences():
    r = np.array([0.1, 0.5, 0.9, 1.3, 2.0])
    h = 1e-5
    fd = (ANNULUS.zeta(r + h) - ANNULUS.zeta(r - h)) / (2 * h)
    assert np.allclose(ANNULUS.dzeta(r), fd, atol=1e-7)
    fd = (ANNULUS.omega(r + h) - ANNULUS.omega(r - h)) / (2 * h)
    assert np.allclose(ANNULUS.domega(r), fd, atol=1e-5)


def test_stream_derivative_is_rho_zeta():
    r = np.linspace(0.2, 3.0, 15)
    h = 1e-5
    fd = (ANNULUS.stream(r + h) - ANNULUS.stream(r - h)) / (2 * h)
    assert np.allclose(fd, r * ANNULUS.zeta(r), atol=1e-8)
    assert abs(ANNULUS.stream(np.array([0.0]))[0]) < 1e-14


def test_circulation_closed_form():
    total = 2 * np.pi * quad(lambda s: s * ANNULUS.omega(np.array([s]))[0], 0, 10)[0]
    assert np.isclose(ANNULUS.circulation(), total, rtol=1e-10)
    assert np.isclose(ANNULUS.circulation(10.0), total, rtol=1e-10)
    assert make_profile("tail_p2").circulation() == np.inf


@pytest.mark.parametrize("family,params,m", [
    ("bogus", {}, 2),
    ("annulus", {"center": 1.0, "width": -1.0}, 2),
    ("annulus", {}, 1),
    ("custom_table", {"rho": [0, 1], "omega": [1, 1]}, 2),
    ("custom_table", {"rho": [0.5, 1], "omega": [1, 0]}, 2),
])
def test_make_profile_rejects(family, params, m):
    with pytest.raises(ProfileError):
        make_profile(family, params, m=m)


@given(st.floats(0.0, 2.0))
def test_cutoff_bounded_and_flat(s):
    v = cutoff(np.array([s]))[0]
    assert 0.0 <= v <= 1.0
    if s <= 0.5:
        assert v == 1.0
    if s >= CUTOFF_EDGE:
        assert v == 0.0


@settings(max_examples=30)
@given(st.floats(0.52, CUTOFF_EDGE - 0.02))
def test_cutoff_derivatives_match_differences(s):
    h = 1e-6
    x = np.array([s - h, s, s + h])
    v = cutoff(x)
    assert abs(cutoff(x, 1)[1] - (v[2] - v[0]) / (2 * h)) < 1e-5
    d1 = cutoff(x, 1)
    assert abs(cutoff(x, 2)[1] - (d1[2] - d1[0]) / (2 * h)) < 1e-3


def test_truncated_vorticity_is_curl_of_truncated_velocity():
    tr = truncate(ANNULUS, 3.0)
    r = np.linspace(0.3, 3.0, 12)
    h = 1e-5
    circ = lambda x: x ** 2 * tr.zeta(x)
    curl = (circ(r + h) - circ(r - h)) / (2 * h) / r
    assert np.allclose(tr.omega(r), curl, atol=1e-8)
    assert np.allclose(tr.omega(r[r <= 1.5]), ANNULUS.omega(r[r <= 1.5]))
    assert np.all(tr.omega(np.array([tr.support_radius, 5.0])) == 0.0)
    fd = (tr.omega(r + h) - tr.omega(r - h)) / (2 * h)
    assert np.allclose(tr.domega(r), fd, atol=1e-5)


def test_truncate_checks_cutoff_resolution():
    grid = build_radial_grid(24, 64.0)
    with pytest.raises(TruncationError):
        truncate(ANNULUS, 0.5, grid=grid)
    with pytest.raises(TruncationError):
        truncate(ANNULUS, -1.0)


def test_export_import_round_trip():
    grid = build_radial_grid(32, 16.0)
    for prof in (ANNULUS, TABLE):
        text = export_profile(prof, grid)
        back, table = import_profile(text)
        assert back == prof
        assert table.shape == (32, 4)
        assert np.allclose(table[:, 1], prof.omega(grid.nodes))


def test_profile_certificate_finite_for_decaying_profile():
    cert = profile_certificate(make_profile("tail_p2"))
    # <rho>^2 (|omega| + rho |omega'|) = 1 + 2 rho^2 / (1 + rho^2) tends to 3
    assert 2.99 < cert["decay_certificate"] <= 3.0
    assert cert["amplitude"] == 1.0


def test_divergence_correction_closes_ring_divergence():
    rbar = 3.0
    tr = truncate(ANNULUS, rbar)
    grid = GridSpec(h=0.2, far=32.0).build(rbar, 24.0)
    corr = divergence_correction(tr, 24.0, grid, rbar=rbar)
    ur, uz = corrected_velocity(tr, corr)
    div = ring_divergence(grid, 24.0, ur, uz)
    interior = ~grid.boundary_mask()
    scale = np.max(np.hypot(ur, uz)) / grid.h
    assert np.max(np.abs(div[interior])) < 1e-8 * scale
    rr, zz = grid.mesh()
    outside = np.hypot(rr, zz) > rbar * (1 + 1e-9)
    assert np.all(corr.vr[outside] == 0) and np.all(corr.vz[outside] == 0)
    with pytest.raises(ValueError):
        divergence_correction(tr, 4.0, grid, rbar=rbar)


def test_truncated_velocity_is_planar_divergence_free():
    tr = truncate(ANNULUS, 3.0)
    grid = GridSpec(h=0.2, far=32.0).build(3.0, np.inf)
    ur, uz, psi = truncated_velocity(tr, grid)
    div = (grid.Dr() @ ur.ravel() + grid.Dz() @ uz.ravel())
    assert np.max(np.abs(div)) < 1e-10
    rr, zz = grid.mesh()
    assert np.all(psi[np.hypot(rr, zz) >= tr.support_radius] == 0)
