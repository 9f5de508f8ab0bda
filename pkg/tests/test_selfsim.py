import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from vortexlab.numerics import SchurOperator, build_meridional_grid
from vortexlab.profiles import make_profile, truncate
from vortexlab.selfsim import (
    CFLError,
    SelfSimError,
    SelfSimGridSpec,
    Stepper,
    assemble_Lvor,
    assemble_Tbeta,
    build_frame,
    energy_inequality_gap,
    fit_growth,
    free_operator,
    heat_ring_norm,
    heat_ring_vorticity,
    identity_gap,
    laplace_resolvent,
    laplacian_energy,
    lift_background,
    norm_ladder,
    period_exponent,
    propagate,
    random_probes,
    resolvent_apply,
    resolvent_norm,
    resolvent_part,
    skew_defect,
    sobolev_norm,
    tilde_from_lambda,
)

RBAR, ELL = 3.0, 24.0


@pytest.fixture(scope="module")
def setup():
    spec = SelfSimGridSpec(h=0.2, far=32.0)
    grid = spec.build(RBAR, ELL)
    frame = build_frame(grid)
    prof = make_profile("annulus", {"center": 1.0, "width": 0.2}, m=2)
    bg = lift_background(truncate(prof, RBAR), None, ELL, grid, rbar=RBAR)
    return frame, bg


@pytest.fixture(scope="module")
def free_frame():
    return build_frame(SelfSimGridSpec(h=0.2, far=30.0).build_centered(8.0))


def test_frame_operators_have_the_right_symmetry(setup):
    frame, _ = setup
    assert skew_defect(frame.drift, frame.weights) < 1e-12
    wl = sp.diags(frame.weights) @ frame.lap
    assert abs(wl - wl.T).max() < 1e-12 * abs(wl).max()
    x = np.random.default_rng(0).standard_normal(frame.n)
    energy = laplacian_energy(frame, x)
    assert energy > 0
    assert np.isclose(-frame.inner(frame.lap @ x, x).real, energy, rtol=1e-10)


def test_background_certificate(setup):
    _, bg = setup
    assert bg.certificate["div_max"] < 1e-8
    assert bg.certificate["outside_fraction"] < 1e-6
    assert bg.scaled(2.0).max_speed() == pytest.approx(2 * bg.max_speed())


@pytest.mark.parametrize("beta", [10.0, 1000.0])
def test_identity_between_scalings(setup, beta):
    frame, bg = setup
    op = assemble_Tbeta(bg, beta, frame, with_mu=False)
    assert identity_gap(op, assemble_Lvor(bg, beta, frame)) < 1e-12
    assert op.part_sum_gap() < 1e-10
    assert tilde_from_lambda(beta, 0.5 + 1j) == beta * (0.5 + 1j) + 0.25


def test_operator_argument_checks(setup):
    frame, bg = setup
    with pytest.raises(SelfSimError):
        assemble_Tbeta(bg, 0.0, frame)
    with pytest.raises(SelfSimError):
        assemble_Lvor(bg, np.inf, frame)
    with pytest.raises(SelfSimError):
        build_frame(build_meridional_grid(0.2, 2.0, 16.0))


def test_resolvent_bound_on_energy_part(setup):
    frame, bg = setup
    op = assemble_Tbeta(bg, 100.0, frame)
    part = resolvent_part(op)
    for lam in (op.mu + 0.5, op.mu + 2.0 + 1.0j):
        assert resolvent_norm(part, lam) <= (1 + 1e-6) / (lam.real - op.mu)


def test_resolvent_apply_solves(setup):
    frame, bg = setup
    op = assemble_Tbeta(bg, 100.0, frame, with_mu=False).total
    w = random_probes(frame, 1, seed=3)[:, 0]
    lam = 3.0 + 0.5j
    x = resolvent_apply(op, lam, w)
    assert np.linalg.norm(lam * x - op.matvec(x) - w) < 1e-9 * np.linalg.norm(w)


def _diagonal_op(vals):
    n = len(vals)
    return SchurOperator(sp.diags(vals), sp.csr_matrix((n, 1)), sp.csr_matrix((1, n)),
                         sp.identity(1, format="csc"))


def test_stepper_is_second_order_with_forcing():
    op = _diagonal_op(np.array([-1.0, -3.0]))
    forcing = lambda t: np.array([np.cos(t), 0.0])
    exact = lambda t: np.array([0.5 * (np.cos(t) + np.sin(t)) + 0.5 * np.exp(-t), np.exp(-3 * t)])
    errs = []
    for dt in (0.02, 0.01):
        st_ = Stepper(op, dt)
        x = np.array([1.0, 1.0])
        steps = int(round(1.0 / dt))
        for k in range(steps):
            x = st_.step(x, k * dt, forcing)
        errs.append(np.max(np.abs(x - exact(1.0))))
    assert 3.5 < errs[0] / errs[1] < 4.5
    with pytest.raises(SelfSimError):
        Stepper(op, 0.0)


def test_propagate_guards(setup):
    frame, bg = setup
    op = free_operator(frame)
    with pytest.raises(CFLError):
        propagate(op, frame, np.zeros(frame.n), 0.1, 0.01, cfl=5.0)
    with pytest.raises(SelfSimError):
        propagate(_diagonal_op(np.array([200.0])), None, np.ones(1), 5.0, 0.01,
                  with_norms=False, guard=1e20)


def test_heat_oracle_on_coarse_grid(free_frame):
    op = free_operator(free_frame)
    traj = propagate(op, free_frame, heat_ring_vorticity(free_frame), 1.0, 0.01, save_every=20)
    err = np.abs(traj.norms[:, 0] / heat_ring_norm(traj.times) - 1)
    assert err.max() < 1e-3


def test_laplace_resolvent_matches_direct_solve(free_frame):
    op = free_operator(free_frame)
    w = heat_ring_vorticity(free_frame)
    lam = 2.0
    integral = laplace_resolvent(op, free_frame, lam, w, s_max=8.0, dt=0.02)
    direct = resolvent_apply(op, lam, w)
    assert free_frame.norm(integral - direct) < 1e-3 * free_frame.norm(direct)


def test_norm_ladder_ordering(setup):
    frame, _ = setup
    probes = random_probes(frame, 3, seed=1)
    lad = norm_ladder(frame, probes)
    assert np.allclose(lad[0], 1.0)
    assert np.all(lad[0] <= lad[1]) and np.all(lad[1] <= lad[2])
    col = probes[:, 0]
    assert sobolev_norm(frame, col, 0) == pytest.approx(1.0)
    assert sobolev_norm(frame, col, 2) == pytest.approx(lad[2, 0])
    rough = random_probes(frame, 2, rough=True, seed=1)
    assert np.allclose(norm_ladder(frame, rough)[0], 1.0)


def test_energy_inequality_holds(setup):
    frame, bg = setup
    op = assemble_Tbeta(bg, 100.0, frame)
    probe = random_probes(frame, 1, seed=2)[:, 0]
    # K is not part of the energy estimate, so evolve with D / beta + M + S only
    traj = propagate(resolvent_part(op), frame, probe, 0.5, 0.005, with_norms=False)
    assert energy_inequality_gap(op, traj) <= 1e-6


@settings(max_examples=40, deadline=None)
@given(st.floats(-5.0, 80.0), st.floats(0.0, 0.9), st.floats(0.0, 2 * np.pi),
       st.floats(0.01, 0.2))
def test_period_exponent_removes_oscillation(rate, depth, phase, period):
    times = np.arange(0, 401) * period / 50
    values = np.exp(rate * times) * (1 + depth * np.cos(2 * np.pi * times / period + phase))
    assert abs(period_exponent(times, values, period) - rate) < 1e-9


def test_period_exponent_rejects_short_or_nonpositive():
    t = np.linspace(0, 1, 11)
    with pytest.raises(SelfSimError):
        period_exponent(t, np.ones(11), 2.0)
    with pytest.raises(SelfSimError):
        period_exponent(t, np.zeros(11), 0.2)


def test_fit_growth_line_and_period():
    t = np.linspace(1.0, 2.0, 201)
    v = 3.0 * np.exp(0.7 * t)
    fit = fit_growth(t, v, (1.0, 2.0))
    assert fit.exponent == pytest.approx(0.7, abs=1e-12)
    assert fit.prefactor == pytest.approx(3.0, rel=1e-10)
    wavy = v * (1 + 0.5 * np.cos(2 * np.pi * t / 0.1))
    assert fit_growth(t, wavy, (1.0, 2.0), period=0.1).exponent == pytest.approx(0.7, abs=1e-9)
    with pytest.raises(SelfSimError):
        fit_growth(t - 0.5, v, (0.5, 1.5))
