import numpy as np
import pytest

from vortexlab import physical as ph
from vortexlab.manifold import fixed_point, normalise_eigenvector
from vortexlab.numerics import EigenPair
from vortexlab.profiles import make_profile, truncate
from vortexlab.selfsim import (
    SelfSimGridSpec,
    assemble_Lvor,
    build_frame,
    lift_background,
    nearest_pair,
)

BETA, RBAR, ELL = 1000.0, 3.0, 24.0


@pytest.fixture(scope="module")
def setup():
    grid = SelfSimGridSpec(h=0.2, far=32.0).build(RBAR, ELL)
    frame = build_frame(grid)
    prof = make_profile("annulus", {"center": 1.0, "width": 0.2}, m=2)
    bg = lift_background(truncate(prof, RBAR), None, ELL, grid, rbar=RBAR)
    op = assemble_Lvor(bg, BETA, frame)
    raw = nearest_pair(op, 67.0 + 78.0j)
    pair = EigenPair(raw.value, normalise_eigenvector(frame, raw.vector), raw.residual)
    ubar = ph.background_velocity(bg, BETA)
    return frame, op, pair, ubar, ph.compute_force(frame, ubar)


@pytest.fixture(scope="module")
def fields(setup):
    frame, op, pair, ubar, _ = setup
    res = fixed_point(op, frame, pair, 0.0, 2e-3, window_efolds=6.0)
    times = res.window.times
    tau = times[2:-1:2]
    return ph.assemble_pair(frame, ubar, pair, times, res.per, tau, provenance={"run": "test"})


def test_vector_laplacian_on_gaussian_tube(setup):
    frame = setup[0]
    vc = ph.VectorCalculus(frame)
    s = vc.r - ELL
    g = np.exp(-(s ** 2 + vc.z ** 2))
    exact = (4 * (s ** 2 + vc.z ** 2) - 4) * g - 2 * s * g / vc.r
    near = np.hypot(s, vc.z) < 2.0
    assert np.max(np.abs(vc.scalar_laplacian(g) - exact)[near]) < 1e-3
    lr, lz = vc.laplacian((g, g))
    assert np.allclose(lr, lz - g / vc.r ** 2)


def test_curl_of_gradient_vanishes(setup):
    vc = ph.VectorCalculus(setup[0])
    p = np.exp(-((vc.r - ELL) ** 2 + vc.z ** 2)) * np.cos(vc.z)
    grad = (vc.Dr @ p, vc.Dz @ p)
    assert np.max(np.abs(vc.curl(grad))) < 1e-12 * np.max(np.abs(grad[0]))


def test_projection_removes_gradients(setup):
    vc = ph.VectorCalculus(setup[0])
    p = np.exp(-((vc.r - ELL) ** 2 + vc.z ** 2))
    grad = (vc.Dr @ p, vc.Dz @ p)
    left = vc.project(grad)
    # compact second differences versus composed first differences: truncation level only
    assert vc.norm(left) < 1e-3 * vc.norm(grad)


def test_zero_profile_has_zero_force(setup):
    frame = setup[0]
    zero = np.zeros(frame.grid.size)
    force = ph.compute_force(frame, (zero, zero))
    assert np.all(force.fr == 0) and np.all(force.fz == 0)
    assert force.outside_mass == 0.0


def test_force_scaling_in_time(setup):
    force = setup[4]
    assert force.outside_mass < 1e-12
    ratio = force.l2_at(0.01) / force.l2_at(0.1)
    assert ratio == pytest.approx(10 ** 0.75, rel=1e-12)
    errs = []
    for n in (400, 800):
        quad, closed = force.integrability(1.0, samples=n)
        errs.append(abs(quad / closed - 1))
    # trapezoid error for exp(tau / 4) is dtau^2 / 192
    assert errs[0] == pytest.approx((40.0 / 399) ** 2 / 192, rel=0.01)
    assert 3.9 < errs[0] / errs[1] < 4.1


def test_pure_background_pair(setup):
    frame, _, pair, ubar, force = setup
    zero = EigenPair(pair.value, np.zeros_like(pair.vector), 0.0)
    times = np.linspace(-0.2, 0.0, 11)
    bare = ph.assemble_pair(frame, ubar, zero, times, np.zeros((11, frame.n)), times[1:-1])
    for j in range(len(bare.tau)):
        u = bare.similarity(j)
        assert np.array_equal(u[0], ubar[0]) and np.array_equal(u[1], ubar[1])
    rows = ph.verify_residual(bare, force, "u", samples=[0])
    assert rows[0].relative < 1e-12


def test_assemble_rejects_bad_times(setup):
    frame, _, pair, ubar, _ = setup
    times = np.linspace(-0.2, 0.0, 11)
    states = np.zeros((11, frame.n))
    with pytest.raises(ph.PhysicalError):
        ph.assemble_pair(frame, ubar, pair, times, states, np.array([0.1]))
    with pytest.raises(ph.PhysicalError):
        ph.assemble_pair(frame, ubar, pair, times, states, np.array([-0.11]))
    with pytest.raises(ph.PhysicalError):
        ph.assemble_pair(frame, ubar, pair, times, states, times[:1])


def test_residual_small_and_negative_control_large(fields, setup):
    force = setup[4]
    good = ph.verify_residual(fields, force, "ubar", samples=[0])[0]
    bad = ph.verify_residual(fields, force, "ubar", force_scale=1.1, samples=[0])[0]
    assert good.relative < 1e-10
    assert bad.relative > 1e3 * max(good.relative, 1e-14)


def test_physical_scaling(fields):
    u_phys = fields.physical(0)
    u_sim = fields.similarity(0)
    assert np.allclose(u_phys[0], fields.t[0] ** -0.5 * u_sim[0])
    assert fields.provenance == {"run": "test"}


def test_energy_balance_of_background(fields, setup):
    rep = ph.energy_report(fields, setup[4], "ubar")
    # coarse grid: the gap sits below the recorded quadrature plus h^2 scale
    assert rep.relative_gap < rep.order_estimate
    assert rep.gap[0] == 0.0
    assert rep.csv().splitlines()[0] == "t,energy,dissipation,work,gap"


def test_lp_columns_constant_for_background(fields, setup):
    rows = ph.lp_bound_sweep(fields, setup[4])
    for name in ("ubar", "force"):
        for p in (2.0, 3.0, 6.0, np.inf):
            for k in (0, 1):
                assert ph.column_spread(rows, name, p, k) < 1e-10
    text = ph.lp_csv(rows)
    assert text.startswith("t,field,p,k,value\n")
    assert ",inf," in text
    with pytest.raises(ph.PhysicalError):
        ph.lp_bound_sweep(fields, setup[4], k_list=(2,))


def test_distinctness_exponent(fields, setup):
    pair = setup[2]
    dist = ph.distinctness(fields, pair.value)
    assert dist.expected == pytest.approx(pair.value.real + 0.25)
    assert dist.minimum > 0
    assert abs(dist.exponent - dist.expected) < 0.05


def test_initial_attainment_and_summary(fields):
    assert np.isfinite(ph.initial_attainment(fields))
    text = ph.summary_text({"b": 1.5, "a": "x"})
    assert text == "a = x\nb = 1.5000000000e+00\n"
