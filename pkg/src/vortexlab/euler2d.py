"""Per-mode linearized 2D Euler operators around radial vortices.

For a perturbation ``omega = g(rho) e^{i n phi}`` the linearization around
``u = zeta(rho) x_perp`` acts as

    A g = -i n zeta g + (i n / rho) f omega',

where ``f`` solves the mode stream equation
``f'' + f'/rho - n^2 f / rho^2 = g`` with ``f ~ rho^-|n|`` at the outer edge.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .numerics import (ContourSpec, EigenSolveError, OperatorMatrix, RadialGrid, Spectrum,
                       build_radial_grid, contour_resolvent_projection, eigensolve)
from .profiles import TruncatedProfile, VortexProfile, cutoff


class ModeError(ValueError):
    """Raised for invalid mode problems."""


# ---------------------------------------------------------------------------
# stream equation


def stream_matrix(grid: RadialGrid, n: int) -> np.ndarray:
    """Collocation matrix of the mode stream problem with the Robin closure row.

    Rows 0..N-2 apply ``d^2 + d/rho - n^2/rho^2``; the last row imposes
    ``f' + |n| f / rho = 0`` at ``rho_max``. On element grids the rows of
    shared nodes instead make ``f'`` continuous.
    """
    rho = grid.nodes
    lap = grid.diff2 + grid.diff1 / rho[:, None] - np.diag(n ** 2 / rho ** 2)
    lap = lap.copy()
    lap[-1, :] = grid.diff1[-1, :]
    lap[-1, -1] += abs(n) / rho[-1]
    for k, i in enumerate(grid.interfaces):
        lap[i, :] = grid.jump1[k]
    return lap


def _constraint_rows(grid: RadialGrid) -> list[int]:
    return list(grid.interfaces) + [grid.n - 1]


def stream_inverse(grid: RadialGrid, n: int) -> np.ndarray:
    """Matrix mapping ``g`` on the nodes to the stream function ``f``."""
    if n == 0:
        raise ModeError("the n = 0 stream problem is not used (operator is trivial)")
    lap = stream_matrix(grid, n)
    rhs = np.eye(grid.n)
    for i in _constraint_rows(grid):
        rhs[i, i] = 0.0
    return np.linalg.solve(lap, rhs)


@dataclass
class StreamSolution:
    f: np.ndarray
    residual: float


def solve_stream_mode(n: int, g: np.ndarray, grid: RadialGrid,
                      decay_tol: float = 1e-6) -> StreamSolution:
    """Solve ``f'' + f'/rho - n^2 f/rho^2 = g`` on the radial grid.

    The residual is the discrete ``L^2(rho d rho)`` norm of the equation on
    the collocation rows plus the closure row.
    """
    if n == 0:
        raise ModeError("mode n = 0 has a trivial operator; no stream solve")
    g = np.asarray(g)
    scale = max(np.max(np.abs(g)), 1e-300)
    if abs(g[-1]) > decay_tol * scale:
        raise ModeError("g does not decay at the outer edge of the grid")
    lap = stream_matrix(grid, n)
    rhs = g.astype(complex if np.iscomplexobj(g) else float).copy()
    cons = _constraint_rows(grid)
    rhs[cons] = 0.0
    f = np.linalg.solve(lap, rhs)
    res = lap @ f - rhs
    ode = np.ones(grid.n, dtype=bool)
    ode[cons] = False
    total = grid.quad[ode] @ np.abs(res[ode]) ** 2 + np.sum(np.abs(res[cons]) ** 2)
    return StreamSolution(f, float(np.sqrt(total)))


def green_stream(n: int, g_func, rho: np.ndarray, breakpoints=(), upper: float = np.inf) -> np.ndarray:
    """Stream function from the Green's representation, by adaptive quadrature.

    ``f(rho) = -(1/2n) [rho^-n int_0^rho s^{n+1} g ds + rho^n int_rho^inf s^{1-n} g ds]``.
    Serves as an independent oracle for the collocation solver.
    """
    from scipy.integrate import quad
    n = abs(n)
    out = np.empty(len(rho))
    for i, r in enumerate(rho):
        pts = [b for b in breakpoints if 0 < b < r]
        inner = quad(lambda s: s ** (n + 1) * g_func(s), 0.0, r, points=pts or None,
                     epsabs=1e-14, epsrel=1e-13, limit=200)[0]
        pts = [b for b in breakpoints if r < b < upper]
        if np.isfinite(upper):
            outer = quad(lambda s: s ** (1 - n) * g_func(s), r, upper, points=pts or None,
                         epsabs=1e-14, epsrel=1e-13, limit=200)[0]
        else:
            outer = quad(lambda s: s ** (1 - n) * g_func(s), r, np.inf,
                         epsabs=1e-14, epsrel=1e-13, limit=200)[0]
        out[i] = -(r ** (-n) * inner + r ** n * outer) / (2 * n)
    return out


# ---------------------------------------------------------------------------
# weights


def gamma_weight(rho: np.ndarray, rbar: float, power: float = 100.0) -> np.ndarray:
    """Weight equal to 1 on ``B_rbar`` and ``<x>^power`` beyond ``2 rbar``.

    The exponent ramps smoothly on ``[rbar, 2 rbar]``.
    """
    rho = np.abs(np.asarray(rho, dtype=float))
    ramp = 1.0 - cutoff(0.5 + (CUT_RAMP * (rho - rbar) / rbar))
    return np.exp(ramp * 0.5 * power * np.log1p(rho ** 2))


# maps [rbar, 2 rbar] onto the cutoff transition [1/2, CUTOFF_EDGE]
from .profiles import CUTOFF_EDGE as _EDGE  # noqa: E402

CUT_RAMP = _EDGE - 0.5


# ---------------------------------------------------------------------------
# mode operators


@dataclass
class ModeOperator:
    """Discretized ``A^(n)`` on the radial grid with its parts.

    Parts: ``advection`` (multiplication by ``-i n zeta``) and ``coupling``
    (the ``omega'`` term through the stream solve).
    """

    n: int
    op: OperatorMatrix
    grid: RadialGrid
    profile: VortexProfile | TruncatedProfile
    weighted: bool = False

    @property
    def matrix(self) -> np.ndarray:
        return self.op.dense()


def _fields(profile, rho):
    return profile.zeta(rho), profile.domega(rho)


def assemble_mode_operator(profile: VortexProfile | TruncatedProfile, n: int, grid: RadialGrid,
                           R: float | None = None, rbar: float | None = None,
                           min_cutoff_nodes: int = 8) -> ModeOperator:
    """Assemble ``A^(n)`` (or ``A_R^(n)`` when ``R`` is given).

    ``rbar`` switches the inner product to the ``gamma`` weight; the matrix
    itself does not depend on the inner product.
    """
    if R is not None:
        if isinstance(profile, TruncatedProfile):
            raise ModeError("profile is already truncated")
        from .profiles import truncate
        profile = truncate(profile, R, grid=grid, min_nodes=min_cutoff_nodes)
    rho = grid.nodes
    weights = grid.quad.copy()
    if rbar is not None:
        weights = weights * gamma_weight(rho, rbar)
    N = grid.n
    if n == 0:
        zero = np.zeros((N, N), dtype=complex)
        op = OperatorMatrix(zero, {"advection": zero.copy(), "coupling": zero.copy()},
                            weights, label="A^(0)")
        return ModeOperator(0, op, grid, profile, rbar is not None)
    zeta, dom = _fields(profile, rho)
    adv = np.diag(-1j * n * zeta)
    sinv = stream_inverse(grid, n)
    coup = (1j * n * dom / rho)[:, None] * sinv
    op = OperatorMatrix(adv + coup, {"advection": adv, "coupling": coup}, weights,
                        label=f"A^({n})")
    return ModeOperator(n, op, grid, profile, rbar is not None)


def skew_defect(mat: np.ndarray, weights: np.ndarray) -> float:
    """``||M + M*|| / ||M||`` with ``M*`` the adjoint in the weighted inner product."""
    s = np.sqrt(weights)
    a = s[:, None] * mat / s[None, :]
    num = np.linalg.norm(a + a.conj().T, 2)
    den = np.linalg.norm(a, 2)
    return float(num / den) if den else 0.0


# ---------------------------------------------------------------------------
# spectra and sweeps


@dataclass
class SweepRow:
    m: int
    n: int
    R: float
    value: complex
    residual: float
    error: str = ""


def rightmost_pair(mode: ModeOperator, count: int = 6) -> Spectrum:
    spec = eigensolve(mode.op, "dense")
    spec.pairs = spec.pairs[:count]
    return spec


def mode_spectrum_sweep(profile: VortexProfile, n_list, grid: RadialGrid,
                        R_list=None, count: int = 1) -> list[SweepRow]:
    """Rightmost eigenvalues of ``A^(n)`` (and ``A_R^(n)``) for each requested pair.

    Eigensolver failures are recorded in the row's ``error`` field and the
    sweep continues.
    """
    rows = []
    R_values = [np.inf] + list(R_list or [])
    for n in n_list:
        for R in R_values:
            try:
                mode = assemble_mode_operator(profile, n, grid,
                                              R=None if not np.isfinite(R) else R)
                spec = eigensolve(mode.op, "dense")
                for pair in spec.pairs[:count]:
                    rows.append(SweepRow(profile.m, n, R, pair.value, pair.residual))
            except (EigenSolveError, np.linalg.LinAlgError, ValueError) as exc:
                rows.append(SweepRow(profile.m, n, R, complex(np.nan, np.nan), np.nan, str(exc)))
    return rows


def sweep_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["m", "n", "R", "re_lambda", "im_lambda", "residual"])
    for r in rows:
        w.writerow([r.m, r.n, "inf" if not np.isfinite(r.R) else f"{r.R:g}",
                    f"{r.value.real:.12e}", f"{r.value.imag:.12e}", f"{r.residual:.3e}"])
    return buf.getvalue()


def unstable_eigenvalue(profile, n: int, grid: RadialGrid, R: float | None = None) -> tuple[complex, np.ndarray, float]:
    """Rightmost eigenvalue of ``A^(n)`` (optionally truncated) with eigenvector and residual."""
    mode = assemble_mode_operator(profile, n, grid, R=R)
    spec = eigensolve(mode.op, "dense")
    p = spec.pairs[0]
    return p.value, p.vector, p.residual


@dataclass
class ContinuationRow:
    R: float
    value: complex
    distance: float
    rank: int
    residual: float


def truncation_continuation(profile: VortexProfile, n: int, R_list, grid: RadialGrid,
                            ref_grid: RadialGrid | None = None,
                            contour_radius: float | None = None) -> tuple[complex, list[ContinuationRow]]:
    """Track the unstable eigenvalue of ``A_R^(n)`` toward the untruncated one.

    ``lambda_inf`` comes from the untruncated operator on ``ref_grid``
    (defaults to ``grid``). Each row records ``|lambda_R - lambda_inf|`` and
    the rank of the Riesz projection on a circle around ``lambda_inf``.
    """
    ref_grid = ref_grid or grid
    lam_inf, _, _ = unstable_eigenvalue(profile, n, ref_grid)
    rad = contour_radius or 0.25 * lam_inf.real
    rows = []
    for R in R_list:
        mode = assemble_mode_operator(profile, n, grid, R=R)
        spec = eigensolve(mode.op, "dense")
        near = min(spec.pairs, key=lambda p: abs(p.value - lam_inf))
        proj = contour_resolvent_projection(mode.op, ContourSpec(lam_inf, rad, 32))
        rows.append(ContinuationRow(R, near.value, abs(near.value - lam_inf), proj.rank,
                                    near.residual))
    return lam_inf, rows


@dataclass
class NormRow:
    R: float
    norm: float


def operator_norm_convergence(profile: VortexProfile, n: int, R_list,
                              grid: RadialGrid) -> list[NormRow]:
    """``||A_R^(n) - A^(n)||`` in ``L^2(rho d rho)`` for each ``R``."""
    full = assemble_mode_operator(profile, n, grid)
    rows = []
    for R in R_list:
        trunc = assemble_mode_operator(profile, n, grid, R=R)
        diff = trunc.matrix - full.matrix
        s = np.sqrt(grid.quad)
        rows.append(NormRow(R, float(np.linalg.norm(s[:, None] * diff / s[None, :], 2))))
    return rows


def instability_search(grid: RadialGrid, preset: dict | None = None,
                       n_max_factor: int = 4) -> list[dict]:
    """Scan the annulus family for unstable modes.

    For each parameter set and symmetry index ``m`` the modes ``n = m k``
    with ``|n| <= n_max_factor * m`` are examined; entries are returned sorted
    by decreasing growth rate.
    """
    from .profiles import ANNULUS_SEARCH_PRESET, make_profile
    preset = preset or ANNULUS_SEARCH_PRESET
    found = []
    for c in preset["center"]:
        for w in preset["width"]:
            for amp in preset["amp"]:
                for m in preset["m"]:
                    prof = make_profile("annulus", {"center": c, "width": w}, m=m, amp=amp)
                    best = None
                    for k in range(1, n_max_factor + 1):
                        lam, _, res = unstable_eigenvalue(prof, m * k, grid)
                        if best is None or lam.real > best[0].real:
                            best = (lam, m * k, res)
                    found.append({"center": c, "width": w, "amp": amp, "m": m,
                                  "n": best[1], "lambda": best[0], "residual": best[2]})
    found.sort(key=lambda d: -d["lambda"].real)
    return found


def plancherel_norms(grid: RadialGrid, coeffs: dict[int, np.ndarray], n_theta: int = 64):
    """Sum of per-mode norms versus the synthesized 2D norm (divided by 2 pi)."""
    theta = 2 * np.pi * np.arange(n_theta) / n_theta
    field2d = np.zeros((grid.n, n_theta), dtype=complex)
    for k, g in coeffs.items():
        field2d += np.outer(g, np.exp(1j * k * theta))
    full = np.sum(grid.quad[:, None] * np.abs(field2d) ** 2) * (2 * np.pi / n_theta)
    modes = sum(grid.quad @ np.abs(g) ** 2 for g in coeffs.values())
    return float(modes), float(full / (2 * np.pi))


def outside_mass(grid: RadialGrid, g: np.ndarray, radius: float) -> float:
    """Fraction of ``||g||^2`` (``rho d rho``) carried by nodes beyond ``radius``."""
    w = grid.quad * np.abs(g) ** 2
    total = w.sum()
    return float(w[grid.nodes > radius].sum() / total) if total > 0 else 0.0


def empirical_r0(rows: list[ContinuationRow], eps: float) -> float | None:
    """Smallest tabulated ``R`` beyond which every row has rank >= 1 and distance < ``eps``."""
    r0 = None
    for row in sorted(rows, key=lambda r: r.R, reverse=True):
        if row.rank >= 1 and row.distance < eps:
            r0 = row.R
        else:
            break
    return r0


def eigenfunction_table(grid: RadialGrid, g: np.ndarray, meta: dict | None = None) -> str:
    """Columnar radial table (rho, Re g, Im g, |g|) with ``# key = value`` headers."""
    buf = io.StringIO()
    for k, v in sorted((meta or {}).items()):
        buf.write(f"# {k} = {v}\n")
    buf.write("# rho re_g im_g abs_g\n")
    for r, val in zip(grid.nodes, np.asarray(g, dtype=complex)):
        buf.write(f"{r:.15e} {val.real:.15e} {val.imag:.15e} {abs(val):.15e}\n")
    return buf.getvalue()


def normalize_eigenvector(grid: RadialGrid, g: np.ndarray) -> np.ndarray:
    """Unit ``L^2(rho d rho)`` norm with the phase fixed so the largest entry is real positive."""
    g = np.asarray(g, dtype=complex)
    k = int(np.argmax(np.abs(g)))
    g = g * (abs(g[k]) / g[k])
    return g / grid.l2_norm(g)


def parallel_sweep(profile: VortexProfile, n_list, grid: RadialGrid, R_list=None,
                   workers: int = 1, count: int = 1) -> list[SweepRow]:
    """``mode_spectrum_sweep`` split over ``n`` across a thread pool; row order is fixed."""
    if workers <= 1 or len(n_list) <= 1:
        return mode_spectrum_sweep(profile, n_list, grid, R_list, count)
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=workers) as pool:
        chunks = list(pool.map(lambda n: mode_spectrum_sweep(profile, [n], grid, R_list, count),
                               list(n_list)))
    return [row for chunk in chunks for row in chunk]
