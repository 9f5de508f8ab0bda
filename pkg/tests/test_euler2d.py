import numpy as np
import pytest

from vortexlab.euler2d import (
    ModeError,
    assemble_mode_operator,
    eigenfunction_table,
    empirical_r0,
    gamma_weight,
    green_stream,
    mode_spectrum_sweep,
    normalize_eigenvector,
    operator_norm_convergence,
    outside_mass,
    parallel_sweep,
    plancherel_norms,
    skew_defect,
    solve_stream_mode,
    sweep_csv,
    truncation_continuation,
    unstable_eigenvalue,
)
from vortexlab.numerics import build_radial_grid, eigensolve
from vortexlab.profiles import make_profile

PROFILE = make_profile("annulus", {"center": 1.0, "width": 0.2}, m=2)


@pytest.fixture(scope="module")
def grid():
    return build_radial_grid(128, 32.0)


@pytest.mark.parametrize("n", [1, 2, 3, 5])
def test_stream_solve_matches_green_representation(grid, n):
    g_func = lambda s: s ** n * np.exp(-s ** 2)
    sol = solve_stream_mode(n, g_func(grid.nodes), grid)
    rho = grid.nodes[::8]
    oracle = green_stream(n, g_func, rho)
    assert np.max(np.abs(sol.f[::8] - oracle)) < 1e-8
    assert sol.residual < 1e-8


def test_stream_solve_rejects_trivial_and_nondecaying(grid):
    with pytest.raises(ModeError):
        solve_stream_mode(0, np.exp(-grid.nodes ** 2), grid)
    with pytest.raises(ModeError):
        solve_stream_mode(2, np.ones(grid.n), grid)


def test_zero_mode_operator_vanishes(grid):
    mode = assemble_mode_operator(PROFILE, 0, grid)
    assert np.max(np.abs(mode.matrix)) == 0.0
    assert mode.op.part_sum_gap() == 0.0


def test_negative_mode_is_conjugate(grid):
    plus = assemble_mode_operator(PROFILE, 4, grid)
    minus = assemble_mode_operator(PROFILE, -4, grid)
    assert np.allclose(minus.matrix, plus.matrix.conj(), atol=1e-13)
    vp = np.sort_complex(eigensolve(plus.op).values)
    vm = np.sort_complex(eigensolve(minus.op).values.conj())
    assert np.max(np.abs(vp - vm)) < 1e-8


def test_advection_part_is_skew(grid):
    mode = assemble_mode_operator(PROFILE, 3, grid)
    adv = mode.op.parts["advection"]
    assert skew_defect(adv, grid.quad) < 1e-14
    assert mode.op.part_sum_gap() < 1e-12


def test_annulus_has_unstable_mode(grid):
    lam, vec, res = unstable_eigenvalue(PROFILE, 4, grid)
    assert lam.real > 0.05
    assert res < 1e-8
    g = normalize_eigenvector(grid, vec)
    assert np.isclose(grid.l2_norm(g), 1.0)
    k = np.argmax(np.abs(g))
    assert abs(g[k].imag) < 1e-14 and g[k].real > 0
    assert outside_mass(grid, g, 8.0) < 1e-6


def test_truncation_continuation_converges(grid):
    lam_inf, rows = truncation_continuation(PROFILE, 4, [4.0, 8.0], grid)
    dist = [r.distance for r in rows]
    assert dist[1] < dist[0]
    assert all(r.rank >= 1 for r in rows)
    assert empirical_r0(rows, 1e-2) is not None
    norms = operator_norm_convergence(PROFILE, 4, [4.0, 8.0], grid)
    assert norms[1].norm < norms[0].norm


def test_sweep_is_deterministic_across_workers(grid):
    serial = mode_spectrum_sweep(PROFILE, [2, 4], grid)
    threaded = parallel_sweep(PROFILE, [2, 4], grid, workers=2)
    assert sweep_csv(serial) == sweep_csv(threaded)
    assert sweep_csv(serial).startswith("m,n,R,re_lambda")


def test_gamma_weight_is_one_inside_ball():
    rho = np.linspace(0, 3, 7)
    assert np.all(gamma_weight(rho, 3.0) == 1.0)
    assert gamma_weight(np.array([6.0]), 3.0)[0] == pytest.approx(37.0 ** 50, rel=1e-10)


def test_plancherel_identity(grid):
    rng = np.random.default_rng(1)
    coeffs = {k: rng.standard_normal(grid.n) * np.exp(-grid.nodes ** 2) for k in (-2, 0, 2, 4)}
    modes, full = plancherel_norms(grid, coeffs)
    assert np.isclose(modes, full, rtol=1e-12)


def test_eigenfunction_table_format(grid):
    text = eigenfunction_table(grid, np.ones(grid.n), {"n": 4})
    lines = text.splitlines()
    assert lines[0] == "# n = 4"
    assert len(lines) == grid.n + 2
