"""Axisymmetric-without-swirl linearization around a displaced vortex.

The truncated planar vortex is placed in the meridional half plane at
distance ``ell`` from the symmetry axis. In the offset variable
``r = r' - ell`` the linearized operator splits as ``L = M + K + S``:
``M`` is transport by the corrected background (skew in the weighted inner
product), ``K`` the compact Biot-Savart coupling and ``S`` the terms that
vanish as ``ell`` grows.

Perturbations live on the uniform core box around the vortex, which holds
every eigenfunction with nonzero eigenvalue; the stream function is solved
on the full stretched grid out to the wall at ``r = -ell``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .euler2d import gamma_weight
from .numerics import (ContourError, ContourSpec, EigenSolveError, MeridionalGrid, SchurOperator,
                       build_meridional_grid, contour_resolvent_projection, eigensolve,
                       factor_sparse)
from .profiles import (DivergenceCorrection, TruncatedProfile, divergence_correction,
                       truncated_velocity)


class AxisymError(ValueError):
    """Invalid axisymmetric setup."""


@dataclass(frozen=True)
class WeightSpec:
    """Weight ``gamma`` equal to 1 on ``B_rbar`` and comparable to ``<(r, z)>^power`` far out."""

    rbar: float
    power: float = 100.0

    def gamma(self, grid: MeridionalGrid) -> np.ndarray:
        rr, zz = grid.mesh()
        return gamma_weight(np.hypot(rr, zz), self.rbar, self.power)

    def log_ratio_bounds(self, grid: MeridionalGrid) -> tuple[float, float]:
        """Min and max of ``log(gamma / <x>^power)`` on the grid."""
        rr, zz = grid.mesh()
        rho = np.hypot(rr, zz)
        with np.errstate(over="ignore"):
            lg = np.log(self.gamma(grid))
        ratio = lg - 0.5 * self.power * np.log1p(rho ** 2)
        return float(ratio.min()), float(ratio.max())


@dataclass(frozen=True)
class GridSpec:
    """Resolution of the meridional grids used for one sweep."""

    h: float = 0.075
    margin: float = 0.3
    far: float = 256.0
    growth: float = 1.15
    order: int = 6

    def core(self, rbar: float) -> float:
        return rbar + self.margin

    def build(self, rbar: float, ell: float) -> MeridionalGrid:
        far = max(self.far, 4.0 * ell) if np.isfinite(ell) else self.far
        return build_meridional_grid(self.h, self.core(rbar), far, ell=ell,
                                     growth=self.growth, order=self.order)


# ---------------------------------------------------------------------------
# stream function


def ring_laplacian(grid: MeridionalGrid) -> sp.csc_matrix:
    """Sparse ``d_rr + d_r/(r+ell) - 1/(r+ell)^2 + d_zz`` with boundary rows.

    Far boundaries carry ``psi = 0``; the wall ``r = -ell`` carries the
    Neumann row ``d_r psi = 0``. For ``ell = inf`` this is the planar Laplacian.
    """
    n = grid.size
    lap = grid.Drr() + grid.Dzz()
    if np.isfinite(grid.ell):
        m = grid.radius.ravel()
        inv = np.zeros(n)
        pos = m > 0
        inv[pos] = 1.0 / m[pos]
        lap = lap + sp.diags(inv) @ grid.Dr() - sp.diags(inv ** 2)
    lap = lap.tocsr()
    bmask = grid.boundary_mask().ravel()
    eye = sp.identity(n, format="csr")
    wall = np.zeros(grid.shape, dtype=bool)
    if grid.r_kind == "wall":
        wall[0, :] = True
    wall = wall.ravel()
    Dr = grid.Dr()
    keep = sp.diags((~bmask).astype(float)) @ lap
    dirichlet = sp.diags((bmask & ~wall).astype(float)) @ eye
    neumann = sp.diags(wall.astype(float)) @ Dr
    return (keep + dirichlet + neumann).tocsc()


@dataclass
class StreamResult:
    psi: np.ndarray
    ur: np.ndarray
    uz: np.ndarray
    residual: float
    divergence: float


def ring_velocity(grid: MeridionalGrid, psi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``u = (-d_z psi, d_r((r+ell) psi)/(r+ell))``; planar ``(-d_z psi, d_r psi)`` for ``ell = inf``."""
    flat = psi.ravel()
    ur = -(grid.Dz() @ flat)
    if np.isfinite(grid.ell):
        m = grid.radius.ravel()
        uz = (grid.Dr() @ (m * flat)) / np.where(m > 0, m, np.inf)
    else:
        uz = grid.Dr() @ flat
    return ur.reshape(grid.shape), uz.reshape(grid.shape)


def _ring_divergence(grid: MeridionalGrid, ur, uz) -> np.ndarray:
    if np.isfinite(grid.ell):
        m = grid.radius.ravel()
        flux = grid.Dr() @ (m * ur.ravel()) + grid.Dz() @ (m * uz.ravel())
        return flux / np.where(m > 0, m, np.inf)
    return grid.Dr() @ ur.ravel() + grid.Dz() @ uz.ravel()


_LAPLACIAN_CACHE: dict = {}


def _factor_laplacian(grid: MeridionalGrid):
    key = (id(grid), grid.ell)
    hit = _LAPLACIAN_CACHE.get(key)
    if hit is not None and hit[0] is grid:
        return hit[1], hit[2]
    lap = ring_laplacian(grid)
    lu = factor_sparse(lap)
    _LAPLACIAN_CACHE.clear()
    _LAPLACIAN_CACHE[key] = (grid, lap, lu)
    return lap, lu


def solve_stream_axisym(omega: np.ndarray, grid: MeridionalGrid, rbar: float | None = None) -> StreamResult:
    """Solve the offset-ring stream problem for vorticity ``omega`` (grid shaped).

    ``rbar`` enables the precondition check that the wall stays outside the
    vorticity support (``ell >= rbar``).
    """
    omega = np.asarray(omega, dtype=float).reshape(grid.shape)
    if rbar is not None and np.isfinite(grid.ell) and grid.ell < rbar:
        raise AxisymError(f"wall at distance {grid.ell} lies inside the support radius {rbar}")
    lap, lu = _factor_laplacian(grid)
    rhs = omega.ravel().copy()
    bmask = grid.boundary_mask().ravel()
    if np.any(np.abs(rhs[bmask]) > 1e-12 * max(np.max(np.abs(rhs)), 1e-300)):
        raise AxisymError("vorticity does not vanish on the grid boundary")
    rhs[bmask] = 0.0
    psi = lu.solve(rhs)
    res = lap @ psi - rhs
    ur, uz = ring_velocity(grid, psi.reshape(grid.shape))
    interior = ~bmask
    w = grid.quad_2d.ravel()
    resid = float(np.sqrt(np.sum(w[interior] * res[interior] ** 2)) + np.max(np.abs(res[bmask]), initial=0))
    div = _ring_divergence(grid, ur, uz)
    inner = interior & grid.core_mask().ravel()
    divn = float(np.max(np.abs(div[inner]))) if inner.any() else 0.0
    return StreamResult(psi.reshape(grid.shape), ur, uz, resid, divn)


@dataclass
class StreamRow:
    ell: float
    grad_diff: float
    scaled_psi: float


def stream_convergence_study(omega_func, rbar: float, ell_list, spec: GridSpec) -> list[StreamRow]:
    """``||grad(psi_ell - psi)||_{L2(B_rbar)}`` and ``||psi_ell/(r+ell)||_{L2(B_rbar)}`` per ``ell``.

    ``omega_func(r, z)`` gives the vorticity in offset coordinates. Gradient
    differences are taken on the shared core box, where all grids coincide.
    """
    ref_grid = spec.build(rbar, np.inf)
    ref = solve_stream_axisym(omega_func(*ref_grid.mesh()), ref_grid)
    ref_core = _core_values(ref_grid, ref.psi)
    rows = []
    for ell in ell_list:
        g = spec.build(rbar, ell)
        sol = solve_stream_axisym(omega_func(*g.mesh()), g, rbar=rbar)
        ball = g.ball_mask(rbar).ravel()
        w = g.quad_2d.ravel()
        core_psi = _core_values(g, sol.psi)
        dr_ref, dz_ref = ref_core
        dr_l, dz_l = core_psi
        diff2 = (dr_l - dr_ref) ** 2 + (dz_l - dz_ref) ** 2
        cmask = _core_ball(g, rbar)
        grad = float(np.sqrt(np.sum(_core_weights(g)[cmask] * diff2[cmask])))
        scaled = sol.psi.ravel()[ball] / g.radius.ravel()[ball]
        rows.append(StreamRow(ell, grad, float(np.sqrt(np.sum(w[ball] * scaled ** 2)))))
    return rows


def _core_index(grid: MeridionalGrid) -> np.ndarray:
    return np.flatnonzero(grid.core_mask().ravel())


def _core_values(grid: MeridionalGrid, psi: np.ndarray):
    idx = _core_index(grid)
    flat = psi.ravel()
    return (grid.Dr() @ flat)[idx], (grid.Dz() @ flat)[idx]


def _core_ball(grid: MeridionalGrid, rbar: float) -> np.ndarray:
    return grid.ball_mask(rbar).ravel()[_core_index(grid)]


def _core_weights(grid: MeridionalGrid) -> np.ndarray:
    return grid.quad_2d.ravel()[_core_index(grid)]


# ---------------------------------------------------------------------------
# operator assembly


def skew_transport(ar: np.ndarray, az: np.ndarray, Gr: sp.spmatrix, Gz: sp.spmatrix,
                   weights: np.ndarray) -> sp.csr_matrix:
    """Skew form ``1/2 (a . grad - W^-1 (a . grad)^T W)`` of ``a . grad + (div a)/2``.

    ``T + W^-1 T^T W = 0`` holds exactly, so ``T`` is skew-adjoint in the
    ``W``-weighted inner product whatever the stencils are.
    """
    A_r, A_z = sp.diags(ar), sp.diags(az)
    W, Winv = sp.diags(weights), sp.diags(1.0 / weights)
    fwd = A_r @ Gr + A_z @ Gz
    bwd = Winv @ (Gr.T @ W @ A_r + Gz.T @ W @ A_z)
    return (0.5 * (fwd - bwd)).tocsr()


def weighted_skew_ratio(mat: sp.spmatrix, weights: np.ndarray) -> float:
    """``||M + M*|| / ||M||`` with the adjoint taken in the weighted inner product."""
    s = np.sqrt(weights)
    a = sp.diags(s) @ mat @ sp.diags(1.0 / s)
    sym = a + a.T.conj()
    top = _sparse_norm2(a)
    return float(_sparse_norm2(sym) / top) if top > 0 else 0.0


def _sparse_norm2(a: sp.spmatrix) -> float:
    if a.nnz == 0:
        return 0.0
    n = a.shape[0]
    if n <= 600:
        return float(np.linalg.norm(a.toarray(), 2))
    v0 = np.random.default_rng(3).standard_normal(n)
    return float(spla.svds(a, k=1, return_singular_vectors=False, v0=v0, tol=1e-10)[0])


@dataclass
class AxisymOperator:
    """``L_ell`` on the core box with its parts.

    ``total`` is the Schur operator ``A - B C^-1 E`` with ``A = M + S_loc`` and
    the Biot-Savart couplings in ``B``; ``parts`` hold ``M`` (sparse),
    ``K`` and ``S`` (Schur operators). ``weights`` is ``gamma dr dz`` on the box.
    """

    ell: float
    grid: MeridionalGrid
    total: SchurOperator
    parts: dict
    weights: np.ndarray
    state_index: np.ndarray
    background: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.state_index)

    def part_sum_gap(self, probes: int = 3, seed: int = 11) -> float:
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(probes):
            x = rng.standard_normal(self.n)
            tot = self.total.matvec(x)
            acc = self.parts["M"] @ x + self.parts["K"].matvec(x) + self.parts["S"].matvec(x)
            worst = max(worst, float(np.max(np.abs(tot - acc)) / max(np.max(np.abs(tot)), 1e-300)))
        return worst

    def part_norm(self, name: str) -> float:
        """Weighted operator norm ``L2_gamma -> L2_gamma`` of a part."""
        return schur_weighted_norm(self.parts[name], self.weights)


def schur_weighted_norm(op, weights: np.ndarray, tol: float = 1e-8) -> float:
    """Largest singular value of ``W^1/2 op W^-1/2`` for a sparse or Schur operator."""
    s = np.sqrt(weights)
    n = len(weights)
    if sp.issparse(op):
        return _sparse_norm2(sp.diags(s) @ op @ sp.diags(1.0 / s))

    def mv(x):
        return s * op.matvec(np.ravel(x) / s)

    def rmv(y):
        return schur_rmatvec(op, s * np.ravel(y)) / s

    lin = spla.LinearOperator((n, n), matvec=mv, rmatvec=rmv, dtype=float)
    v0 = np.random.default_rng(5).standard_normal(n)
    return float(spla.svds(lin, k=1, return_singular_vectors=False, v0=v0, tol=tol)[0])


def schur_rmatvec(op: SchurOperator, y: np.ndarray) -> np.ndarray:
    """Transpose action ``(A - B C^-1 E)^T y`` using the transposed elliptic solve."""
    lu = op._elliptic()
    t = op.B.T @ y
    return op.A.T @ y - op.E.T @ lu.solve(np.asarray(t, dtype=float), trans="T")


def assemble_Lell(trunc: TruncatedProfile, corr: DivergenceCorrection | None, ell: float,
                  weight: WeightSpec, grid: MeridionalGrid, padded: bool = False) -> AxisymOperator:
    """Assemble ``L_ell = M + K + S`` (``ell = inf`` gives the planar ``L_inf``).

    ``corr`` must be the divergence correction for the same ``ell`` and grid
    (``None`` for ``ell = inf``, where no correction is needed). The state
    normally lives on the uniform core box; ``padded=True`` uses every
    non-boundary node instead, which is the check that the restriction loses
    no nonzero spectrum.
    """
    finite = np.isfinite(ell)
    if finite and ell < 2.0 * weight.rbar:
        raise AxisymError(f"ell = {ell} below 2 * rbar = {2 * weight.rbar}")
    if grid.ell != ell and not (not finite and not np.isfinite(grid.ell)):
        raise AxisymError("grid offset does not match ell")
    if finite:
        if corr is None or corr.ell != ell:
            raise AxisymError("divergence correction missing or built for another ell")
        if corr.grid is not grid:
            raise AxisymError("divergence correction built on another grid")
    idx = np.flatnonzero(~grid.boundary_mask().ravel()) if padded else _core_index(grid)
    rr, zz = grid.mesh()
    rho = np.hypot(rr, zz).ravel()
    ur, uz, _ = truncated_velocity(trunc, grid)
    ur, uz = ur.ravel(), uz.ravel()
    if finite:
        vr, vz = corr.vr.ravel(), corr.vz.ravel()
        metric = grid.radius.ravel()
    else:
        vr = vz = np.zeros_like(ur)
        metric = np.full(grid.size, np.inf)
    bur, buz = ur + vr, uz + vz
    Dr, Dz = grid.Dr(), grid.Dz()
    Gr, Gz = Dr[idx][:, idx], Dz[idx][:, idx]
    gam = weight.gamma(grid).ravel()[idx]
    wts = grid.quad_2d.ravel()[idx] * gam
    # background vorticity and gradient (analytic, ell independent)
    wt = trunc.omega(rho)
    dwt = trunc.domega(rho)
    with np.errstate(invalid="ignore", divide="ignore"):
        er, ez = np.where(rho > 0, rr.ravel() / rho, 0.0), np.where(rho > 0, zz.ravel() / rho, 0.0)
    gr, gz = dwt * er, dwt * ez
    M = -skew_transport(bur[idx], buz[idx], Gr, Gz, wts)
    # the wall node r = -ell has zero metric; its rows never reach the core
    inv = np.divide(1.0, metric, out=np.zeros_like(metric), where=metric > 0)
    if finite:
        div_v = Dr @ vr + Dz @ vz
        s_loc = inv[idx] * bur[idx] + 0.5 * div_v[idx]
    else:
        s_loc = np.zeros(len(idx))
    S_loc = sp.diags(s_loc)
    # psi -> (K, S) couplings through u = BS[omega]
    n_full = grid.size
    P = sp.csr_matrix((np.ones(len(idx)), (np.arange(len(idx)), idx)), shape=(len(idx), n_full))
    Ur = -Dz
    if finite:
        Uz = sp.diags(inv) @ Dr @ sp.diags(metric)
    else:
        Uz = Dr
    K_psi = -(P @ (sp.diags(gr) @ Ur + sp.diags(gz) @ Uz))
    S_psi = P @ (sp.diags(inv * wt) @ Ur) if finite else sp.csr_matrix((len(idx), n_full))
    C = ring_laplacian(grid)
    bmask = grid.boundary_mask().ravel()
    if np.any(bmask[idx]):
        raise AxisymError("core box touches the grid boundary")
    E = P.T.tocsr()
    zero = sp.csr_matrix((len(idx), len(idx)))
    # L = A - B C^-1 E, so B carries minus the psi couplings
    total = SchurOperator(M + S_loc, -(K_psi + S_psi), E, C, weights=wts, label=f"L_ell({ell})")
    K = SchurOperator(zero, -K_psi, E, C, weights=wts, label="K")
    S = SchurOperator(S_loc, -S_psi, E, C, weights=wts, label="S")
    # share one elliptic factorization
    K._c_lu = S._c_lu = total._elliptic()
    bg = {"ur": bur[idx], "uz": buz[idx], "omega": wt[idx], "s_loc": s_loc}
    return AxisymOperator(ell, grid, total, {"M": M, "K": K, "S": S}, wts, idx, bg)


def range_outside_mass(op: AxisymOperator, name: str, rbar: float, probes: int = 3,
                       seed: int = 13) -> float:
    """Largest fraction of ``||part x||^2`` falling outside ``B_rbar`` over random probes."""
    rng = np.random.default_rng(seed)
    rr, zz = op.grid.mesh()
    outside = (np.hypot(rr, zz).ravel()[op.state_index] > rbar * (1 + 1e-12))
    part = op.parts[name]
    worst = 0.0
    for _ in range(probes):
        x = rng.standard_normal(op.n)
        y = part @ x if sp.issparse(part) else part.matvec(x)
        tot = np.sum(op.weights * y ** 2)
        if tot > 0:
            worst = max(worst, float(np.sum((op.weights * y ** 2)[outside]) / tot))
    return worst


# ---------------------------------------------------------------------------
# spectra and continuation


@dataclass
class EllRow:
    ell: float
    value: complex
    distance: float
    residual: float
    s_norm: float
    rank: int | None
    error: str = ""
    m_skew: float = 0.0      # weighted skew-adjointness defect of the transport part


def nearest_eigenpair(op: AxisymOperator, target: complex, count: int = 1):
    """Eigenpair of ``L_ell`` nearest ``target`` by shift-invert Arnoldi.

    Keep ``count`` small: beyond the isolated eigenvalue the spectrum is a
    dense cluster along the imaginary axis, where Arnoldi converges slowly.
    """
    spec = eigensolve(op.total, ("shift_invert", target, count), tol=1e-13)
    return min(spec.pairs, key=lambda p: abs(p.value - target))


def riesz_rank(op: AxisymOperator, center: complex, radius: float, nodes: int = 8) -> int:
    res = contour_resolvent_projection(op.total, ContourSpec(center, radius, nodes),
                                       max_doublings=3, probe=6)
    return res.rank


def ell_continuation(trunc: TruncatedProfile, rbar: float, ell_list, spec: GridSpec,
                     seed: complex, radius_factor: float = 0.1,
                     with_rank: bool = True, with_norm: bool = True) -> tuple[complex, list[EllRow]]:
    """Track the unstable eigenvalue of ``L_ell`` toward ``L_inf``.

    ``seed`` is an estimate of the planar eigenvalue (for instance from the
    per-mode operator); ``lambda_inf`` is recomputed on the planar meridional
    grid so all rows share one discretization. The contour radius is
    ``radius_factor * Re(lambda_inf)``; on a contour failure it is halved once.
    """
    weight = WeightSpec(rbar)
    g_inf = spec.build(rbar, np.inf)
    op_inf = assemble_Lell(trunc, None, np.inf, weight, g_inf)
    lam_inf = nearest_eigenpair(op_inf, seed).value
    radius = radius_factor * lam_inf.real
    rows = [EllRow(np.inf, lam_inf, 0.0, 0.0, 0.0,
                   riesz_rank(op_inf, lam_inf, radius) if with_rank else None)]
    del op_inf
    for ell in ell_list:
        try:
            g = spec.build(rbar, ell)
            corr = divergence_correction(trunc, ell, g, rbar=rbar)
            op = assemble_Lell(trunc, corr, ell, weight, g)
            pair = nearest_eigenpair(op, lam_inf)
            s_norm = op.part_norm("S") if with_norm else float("nan")
            rank = None
            if with_rank:
                try:
                    rank = riesz_rank(op, lam_inf, radius)
                except ContourError:
                    rank = riesz_rank(op, lam_inf, 0.5 * radius)
            rows.append(EllRow(ell, pair.value, abs(pair.value - lam_inf), pair.residual,
                               s_norm, rank, m_skew=weighted_skew_ratio(op.parts["M"], op.weights)))
        except (EigenSolveError, ContourError, AxisymError) as exc:
            rows.append(EllRow(ell, complex(np.nan, np.nan), np.nan, np.nan, np.nan, None, str(exc)))
    return lam_inf, rows


def empirical_ell0(rows: list[EllRow], eps: float) -> float | None:
    """Smallest tabulated finite ``ell`` beyond which every row has rank >= 1 and distance < ``eps``."""
    ell0 = None
    for row in sorted((r for r in rows if np.isfinite(r.ell)), key=lambda r: r.ell, reverse=True):
        if (row.rank is None or row.rank >= 1) and row.distance < eps:
            ell0 = row.ell
        else:
            break
    return ell0


def sweep_csv(rows: list[EllRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["ell", "re_lambda", "im_lambda", "distance", "s_norm", "rank"])
    for r in rows:
        w.writerow(["inf" if not np.isfinite(r.ell) else f"{r.ell:g}", f"{r.value.real:.12e}",
                    f"{r.value.imag:.12e}", f"{r.distance:.6e}", f"{r.s_norm:.6e}",
                    "" if r.rank is None else r.rank])
    return buf.getvalue()


def fit_exponent(x, y) -> tuple[float, float]:
    """Least-squares slope and intercept of ``log y`` against ``log x``."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    slope, icpt = np.polyfit(lx, ly, 1)
    return float(slope), float(icpt)


def compact_singular_decay(op: AxisymOperator, k: int = 40) -> np.ndarray:
    """Leading singular values of ``K`` in the weighted norm (descending)."""
    s = np.sqrt(op.weights)
    K = op.parts["K"]
    n = op.n

    def mv(x):
        return s * K.matvec(x / s)

    def rmv(y):
        return schur_rmatvec(K, s * y) / s

    lin = spla.LinearOperator((n, n), matvec=mv, rmatvec=rmv, dtype=float)
    v0 = np.random.default_rng(9).standard_normal(n)
    vals = spla.svds(lin, k=min(k, n - 2), return_singular_vectors=False, v0=v0)
    return np.sort(vals)[::-1]
