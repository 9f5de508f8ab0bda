"""Radial vortex profiles, smooth truncation and the axisymmetric divergence correction."""
from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize as sopt
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import erf

from .numerics import MeridionalGrid, RadialGrid

FAMILIES = ("tail_p2", "annulus", "custom_table")

# The cutoff is identically one on [0, 1/2] and vanishes from CUTOFF_EDGE on.
# Ending the transition before 1 keeps finite-difference stencils of truncated
# fields inside the unit ball.
CUTOFF_EDGE = 0.9

# Parameter box scanned by the instability search over the annulus family.
ANNULUS_SEARCH_PRESET = {
    "center": (1.0,),
    "width": (0.15, 0.2, 0.25, 0.3),
    "amp": (1.0,),
    "m": (2, 3, 4, 5, 6),
}


class ProfileError(ValueError):
    """Raised for parameters outside a family's admissible range."""


# ---------------------------------------------------------------------------
# smooth cutoff


def _step(t: np.ndarray, order: int = 0) -> np.ndarray:
    """Smooth 0 -> 1 step on [0, 1] built from exp(-1/x), with derivatives."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    inner = (t > 0) & (t < 1)
    ti = t[inner]
    q = 1.0 / ti - 1.0 / (1.0 - ti)
    # S = 1/(1+e^q) and S(1-S) written to avoid overflow
    e = np.exp(-np.abs(q))
    s = np.where(q > 0, e / (1.0 + e), 1.0 / (1.0 + e))
    s1s = e / (1.0 + e) ** 2
    if order == 0:
        out[inner] = s
        out[t >= 1] = 1.0
        return out
    dq = -1.0 / ti ** 2 - 1.0 / (1.0 - ti) ** 2
    ds = -s1s * dq
    if order == 1:
        out[inner] = ds
        return out
    d2q = 2.0 / ti ** 3 - 2.0 / (1.0 - ti) ** 3
    out[inner] = -ds * (1.0 - 2.0 * s) * dq - s1s * d2q
    if order == 2:
        return out
    raise ValueError("derivative order must be 0, 1 or 2")


def cutoff(s: np.ndarray, order: int = 0) -> np.ndarray:
    """Radial cutoff ``phi(s)`` (or its derivatives): 1 for s <= 1/2, 0 from CUTOFF_EDGE."""
    width = CUTOFF_EDGE - 0.5
    t = (np.asarray(s, dtype=float) - 0.5) / width
    if order == 0:
        return 1.0 - _step(t)
    return -_step(t, order) / width ** order


# ---------------------------------------------------------------------------
# profiles

_GL_X, _GL_W = np.polynomial.legendre.leggauss(48)
_GL_U = 0.5 * (_GL_X + 1.0)
_GL_WU = 0.5 * _GL_W


@dataclass(frozen=True)
class VortexProfile:
    """Radially symmetric vortex ``u = zeta(rho) x_perp`` with vorticity ``omega(rho)``.

    ``amp`` multiplies the base shape of the family; ``m`` is the symmetry
    index of the perturbations studied around it.
    """

    family: str
    params: tuple
    m: int = 2
    amp: float = 1.0

    @property
    def param_dict(self) -> dict:
        return dict(self.params)

    # base shape (amp = 1) ------------------------------------------------
    def _base_omega(self, rho):
        p = self.param_dict
        if self.family == "tail_p2":
            return 1.0 / (1.0 + rho ** 2)
        if self.family == "annulus":
            c, w = p["center"], p["width"]
            return np.exp(-((rho - c) / w) ** 2) + np.exp(-((rho + c) / w) ** 2)
        return _table_eval(p["rho"], p["omega"], rho)[0]

    def _base_domega(self, rho):
        p = self.param_dict
        if self.family == "tail_p2":
            return -2.0 * rho / (1.0 + rho ** 2) ** 2
        if self.family == "annulus":
            c, w = p["center"], p["width"]
            return (-2.0 * (rho - c) / w ** 2 * np.exp(-((rho - c) / w) ** 2)
                    - 2.0 * (rho + c) / w ** 2 * np.exp(-((rho + c) / w) ** 2))
        return _table_eval(p["rho"], p["omega"], rho)[1]

    def _base_flux(self, rho):
        """``int_0^rho s omega(s) ds`` for the base shape."""
        p = self.param_dict
        if self.family == "tail_p2":
            return 0.5 * np.log1p(rho ** 2)
        if self.family == "annulus":
            c, w = p["center"], p["width"]
            sp_ = np.sqrt(np.pi)
            a = (w * c * sp_ / 2.0 * (erf((rho - c) / w) + erf(c / w))
                 - w ** 2 / 2.0 * (np.exp(-((rho - c) / w) ** 2) - np.exp(-(c / w) ** 2)))
            b = (-w * c * sp_ / 2.0 * (erf((rho + c) / w) - erf(c / w))
                 - w ** 2 / 2.0 * (np.exp(-((rho + c) / w) ** 2) - np.exp(-(c / w) ** 2)))
            return a + b
        return _table_flux(p["rho"], p["omega"], rho)

    # public evaluators ---------------------------------------------------
    def omega(self, rho) -> np.ndarray:
        rho = np.abs(np.asarray(rho, dtype=float))
        return self.amp * self._base_omega(rho)

    def domega(self, rho) -> np.ndarray:
        rho = np.abs(np.asarray(rho, dtype=float))
        return self.amp * self._base_domega(rho)

    def zeta(self, rho) -> np.ndarray:
        """Angular velocity ``rho^-2 int_0^rho s omega(s) ds``."""
        rho = np.abs(np.asarray(rho, dtype=float))
        out = np.empty_like(rho)
        small = rho < 0.25
        rs = rho[small]
        # zeta = int_0^1 u omega(rho u) du, exact for small radii
        out[small] = (self._base_omega(np.outer(rs, _GL_U)) @ (_GL_U * _GL_WU))
        rl = rho[~small]
        out[~small] = self._base_flux(rl) / rl ** 2
        return self.amp * out

    def dzeta(self, rho) -> np.ndarray:
        rho = np.abs(np.asarray(rho, dtype=float))
        out = np.empty_like(rho)
        small = rho < 0.25
        rs = rho[small]
        out[small] = self._base_domega(np.outer(rs, _GL_U)) @ (_GL_U ** 2 * _GL_WU) * self.amp
        rl = rho[~small]
        out[~small] = (self.omega(rl) - 2.0 * self.zeta(rl)) / rl
        return out

    def stream(self, rho) -> np.ndarray:
        """Stream function ``Psi`` with ``Psi' = rho zeta`` and ``Psi(0) = 0``."""
        return _cumulative_integral(lambda s: s * self.zeta(s), rho)

    def circulation(self, rho_max: float = np.inf) -> float:
        """``2 pi int_0^rho_max s omega ds`` (the limit of ``2 pi rho^2 zeta``)."""
        if np.isfinite(rho_max):
            return float(2.0 * np.pi * rho_max ** 2 * self.zeta(np.array([rho_max]))[0])
        if self.family == "tail_p2":
            return np.inf if self.amp else 0.0
        if self.family == "annulus":
            p = self.param_dict
            c, w = p["center"], p["width"]
            base = w * c * np.sqrt(np.pi) * erf(c / w) + w ** 2 * np.exp(-(c / w) ** 2)
            return float(2.0 * np.pi * self.amp * base)
        p = self.param_dict
        return float(2.0 * np.pi * self.amp * _table_flux(p["rho"], p["omega"],
                                                          np.array([p["rho"][-1]]))[0])

    def scaled(self, factor: float) -> "VortexProfile":
        return VortexProfile(self.family, self.params, self.m, self.amp * factor)

    def with_m(self, m: int) -> "VortexProfile":
        return make_profile(self.family, self.param_dict, m=m, amp=self.amp)


def _table_eval(rk, wk, rho):
    """Piecewise-linear table with jumps at repeated abscissae; zero beyond the end."""
    rk = np.asarray(rk, dtype=float)
    wk = np.asarray(wk, dtype=float)
    rho = np.asarray(rho, dtype=float)
    val = np.zeros_like(rho)
    der = np.zeros_like(rho)
    for a, b, ya, yb in zip(rk[:-1], rk[1:], wk[:-1], wk[1:]):
        if b <= a:
            continue
        inside = (rho >= a) & (rho < b)
        slope = (yb - ya) / (b - a)
        val[inside] = ya + slope * (rho[inside] - a)
        der[inside] = slope
    return val, der


def _table_flux(rk, wk, rho):
    """Exact ``int_0^rho s omega(s) ds`` for the piecewise-linear table."""
    rk = np.asarray(rk, dtype=float)
    wk = np.asarray(wk, dtype=float)
    rho = np.asarray(rho, dtype=float)
    out = np.zeros_like(rho)

    def seg(a, ya, slope, x):
        # int_a^x s (ya + slope (s - a)) ds
        return (ya - slope * a) * (x ** 2 - a ** 2) / 2.0 + slope * (x ** 3 - a ** 3) / 3.0

    for a, b, ya, yb in zip(rk[:-1], rk[1:], wk[:-1], wk[1:]):
        if b <= a:
            continue
        slope = (yb - ya) / (b - a)
        x = np.clip(rho, a, b)
        out += np.where(rho > a, seg(a, ya, slope, x), 0.0)
    return out


def _cumulative_integral(func, rho, panels_per_unit: float = 8.0):
    """``int_0^rho func(s) ds`` for an array of radii by composite Gauss-Legendre."""
    rho = np.abs(np.asarray(rho, dtype=float))
    flat = rho.ravel()
    order = np.argsort(flat)
    knots = np.concatenate([[0.0], flat[order]])
    out = np.zeros_like(knots)
    xg, wg = np.polynomial.legendre.leggauss(16)
    acc = 0.0
    for i in range(1, len(knots)):
        a, b = knots[i - 1], knots[i]
        if b > a:
            npan = max(1, int(np.ceil((b - a) * panels_per_unit)))
            edges = np.linspace(a, b, npan + 1)
            mid = 0.5 * (edges[1:] + edges[:-1])
            half = 0.5 * (edges[1:] - edges[:-1])
            s = (mid[:, None] + half[:, None] * xg[None, :]).ravel()
            acc += float(np.sum(func(s).reshape(npan, -1) * wg[None, :] * half[:, None]))
        out[i] = acc
    res = np.empty_like(flat)
    res[order] = out[1:]
    return res.reshape(rho.shape)


def make_profile(family: str, params: dict | None = None, m: int = 2,
                 amp: float = 1.0) -> VortexProfile:
    """Construct a profile from one of the supported families.

    Families:
        ``tail_p2``: ``omega = amp / (1 + rho^2)`` (exact ``<rho>^-2`` tail).
        ``annulus``: even Gaussian ring, params ``center`` and ``width``.
        ``custom_table``: piecewise-linear table, params ``rho`` and ``omega``
        (repeated abscissae encode jumps; the last value must be zero).
    """
    params = dict(params or {})
    if family not in FAMILIES:
        raise ProfileError(f"unknown profile family {family!r}")
    if int(m) != m or m < 2:
        raise ProfileError(f"symmetry index m must be an integer >= 2, got {m}")
    if not np.isfinite(amp):
        raise ProfileError("amplitude must be finite")
    if family == "annulus":
        c = float(params.get("center", 1.0))
        w = float(params.get("width", 0.25))
        if not (c >= 0 and w > 0):
            raise ProfileError("annulus needs center >= 0 and width > 0")
        items = (("center", c), ("width", w))
    elif family == "tail_p2":
        items = ()
    else:
        rk = tuple(float(x) for x in params["rho"])
        wk = tuple(float(x) for x in params["omega"])
        if len(rk) != len(wk) or len(rk) < 2:
            raise ProfileError("table needs matching rho and omega columns")
        if rk[0] != 0.0 or np.any(np.diff(rk) < 0):
            raise ProfileError("table radii must start at 0 and be non-decreasing")
        if not np.all(np.isfinite(wk)):
            raise ProfileError("table values must be finite")
        if wk[-1] != 0.0:
            raise ProfileError("table profile does not decay (last value nonzero)")
        items = (("rho", rk), ("omega", wk))
    return VortexProfile(family, items, int(m), float(amp))


def profile_certificate(profile: VortexProfile, rho_max: float = 64.0,
                        samples: int = 4001) -> dict:
    """Decay certificate ``sup <rho>^2 (|omega| + rho |omega'|)`` on ``[0, rho_max]``.

    Also reports the circulation up to ``rho_max`` and the amplitude.
    """
    def g(r):
        r = np.asarray(r, dtype=float)
        return (1.0 + r ** 2) * (np.abs(profile.omega(r)) + r * np.abs(profile.domega(r)))

    grid = np.unique(np.concatenate([np.linspace(0.0, rho_max, samples),
                                     np.geomspace(1e-3, rho_max, samples)]))
    vals = g(grid)
    i = int(np.argmax(vals))
    best = float(vals[i])
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    if hi > lo:
        res = sopt.minimize_scalar(lambda r: -float(g(np.array([r]))[0]), bounds=(lo, hi),
                                   method="bounded", options={"xatol": 1e-12})
        best = max(best, -float(res.fun))
    return {
        "decay_certificate": best,
        "circulation": profile.circulation(rho_max) if profile.amp else 0.0,
        "amplitude": profile.amp,
        "rho_max": rho_max,
    }


# ---------------------------------------------------------------------------
# columnar text import / export


def export_profile(profile: VortexProfile, grid: RadialGrid) -> str:
    rho = grid.nodes
    buf = io.StringIO()
    buf.write(f"# family = {profile.family}\n")
    buf.write(f"# params = {_params_text(profile)}\n")
    buf.write(f"# m = {profile.m}\n# amp = {profile.amp!r}\n")
    buf.write("# rho omega domega zeta\n")
    data = np.column_stack([rho, profile.omega(rho), profile.domega(rho), profile.zeta(rho)])
    np.savetxt(buf, data, fmt="%.17e")
    return buf.getvalue()


def _params_text(profile: VortexProfile) -> str:
    parts = []
    for k, v in profile.params:
        if isinstance(v, tuple):
            parts.append(f"{k}:" + ",".join(repr(x) for x in v))
        else:
            parts.append(f"{k}:{v!r}")
    return ";".join(parts)


def import_profile(text: str) -> tuple[VortexProfile, np.ndarray]:
    """Parse text written by ``export_profile``; returns the profile and the table."""
    meta = {}
    rows = []
    for line in text.splitlines():
        if line.startswith("#"):
            if "=" in line:
                k, v = line[1:].split("=", 1)
                meta[k.strip()] = v.strip()
        elif line.strip():
            rows.append([float(x) for x in line.split()])
    params = {}
    if meta.get("params"):
        for item in meta["params"].split(";"):
            k, v = item.split(":", 1)
            params[k] = [float(x) for x in v.split(",")] if "," in v else float(v)
    prof = make_profile(meta["family"], params, m=int(meta["m"]), amp=float(meta["amp"]))
    return prof, np.asarray(rows)


# ---------------------------------------------------------------------------
# truncation


class TruncationError(ValueError):
    """Raised when the cutoff layer is not resolved."""


@dataclass(frozen=True)
class TruncatedProfile:
    """Truncated vortex ``u_R = phi_R u`` with vorticity ``omega_R = curl u_R``."""

    parent: VortexProfile
    R: float

    def phi(self, rho, order: int = 0):
        return cutoff(np.abs(np.asarray(rho, dtype=float)) / self.R, order) / self.R ** order

    def zeta(self, rho):
        return self.phi(rho) * self.parent.zeta(rho)

    def omega(self, rho):
        rho = np.abs(np.asarray(rho, dtype=float))
        return self.phi(rho) * self.parent.omega(rho) + rho * self.phi(rho, 1) * self.parent.zeta(rho)

    def domega(self, rho):
        rho = np.abs(np.asarray(rho, dtype=float))
        p = self.parent
        f0, f1, f2 = self.phi(rho), self.phi(rho, 1), self.phi(rho, 2)
        w, dw, z, dz = p.omega(rho), p.domega(rho), p.zeta(rho), p.dzeta(rho)
        return f1 * w + f0 * dw + f1 * z + rho * f2 * z + rho * f1 * dz

    def stream(self, rho):
        return _cumulative_integral(lambda s: s * self.zeta(s), rho)

    @property
    def support_radius(self) -> float:
        return CUTOFF_EDGE * self.R

    @property
    def m(self) -> int:
        return self.parent.m

    @property
    def amp(self) -> float:
        return self.parent.amp

    def scaled(self, factor: float) -> "TruncatedProfile":
        return TruncatedProfile(self.parent.scaled(factor), self.R)


def truncate(profile: VortexProfile, R: float, grid: RadialGrid | None = None,
             min_nodes: int = 8) -> TruncatedProfile:
    """Smoothly truncate ``profile`` at radius ``R``.

    When ``grid`` is given it must place at least ``min_nodes`` nodes in the
    cutoff layer ``[R/2, R]``.
    """
    if not R > 0:
        raise TruncationError(f"truncation radius must be positive, got {R}")
    if grid is not None:
        nodes = np.asarray(grid.nodes)
        count = int(np.sum((nodes >= R / 2) & (nodes <= R)))
        if count < min_nodes:
            raise TruncationError(
                f"cutoff layer [{R / 2}, {R}] holds {count} nodes, need {min_nodes}")
    return TruncatedProfile(profile, float(R))


# ---------------------------------------------------------------------------
# divergence correction in the offset meridional plane


def truncated_velocity(trunc: TruncatedProfile, grid: MeridionalGrid):
    """Planar velocity of the truncated vortex on the meridional grid.

    The velocity is the discrete perpendicular gradient of the stream
    function, so its discrete planar divergence vanishes identically.
    Returns ``(u_r, u_z, psi)`` as arrays of the grid shape.
    """
    rr, zz = grid.mesh()
    rho = np.hypot(rr, zz)
    psi = trunc.stream(rho)
    psi = psi - trunc.stream(np.array([trunc.support_radius]))[0]
    psi[rho >= trunc.support_radius] = 0.0
    flat = psi.ravel()
    ur = -(grid.Dz() @ flat).reshape(grid.shape)
    uz = (grid.Dr() @ flat).reshape(grid.shape)
    return ur, uz, psi


@dataclass
class DivergenceCorrection:
    """Correction ``v_ell`` making ``u_R + v_ell`` divergence free in the ring metric.

    ``wr, wz`` hold the offset-independent flux ``w = (r + ell) v_ell``.
    """

    ell: float
    grid: MeridionalGrid
    wr: np.ndarray
    wz: np.ndarray
    residual: float
    support_radius: float
    mean_rhs: float

    @property
    def vr(self) -> np.ndarray:
        return self._over_metric(self.wr)

    @property
    def vz(self) -> np.ndarray:
        return self._over_metric(self.wz)

    def _metric(self) -> np.ndarray:
        rr, _ = self.grid.mesh()
        return rr + self.ell

    def _over_metric(self, w: np.ndarray) -> np.ndarray:
        # w vanishes near the wall, where the metric hits zero
        m = self._metric()
        return np.divide(w, m, out=np.zeros_like(w, dtype=float), where=m > 0)

    def max_v(self) -> float:
        return float(np.max(np.hypot(self.vr, self.vz)))


_CORRECTION_CACHE: dict = {}


def divergence_correction(trunc: TruncatedProfile, ell: float, grid: MeridionalGrid,
                          rbar: float | None = None, tol: float = 1e-8) -> DivergenceCorrection:
    """Solve ``(d_r, d_z) . [(r + ell) v] = -u_R^r`` with ``v`` supported in ``B_rbar``.

    The solution is the closed-form radial flux ``w = (0, -int_rho^inf s zeta_R ds)``
    followed by the minimum-norm discrete correction supported in the ball,
    so the discrete residual matches the grid operators to ``tol``. The flux
    ``w`` does not depend on ``ell``; only ``v = w / (r + ell)`` does.
    """
    rbar = trunc.R if rbar is None else rbar
    if np.isfinite(ell) and ell < 2.0 * rbar:
        raise ValueError(f"ring offset {ell} below 2 * R = {2 * rbar}")
    key = (_grid_key(grid), trunc, rbar, tol)
    if key in _CORRECTION_CACHE:
        wr, wz, res, mean = _CORRECTION_CACHE[key]
        return DivergenceCorrection(ell, grid, wr, wz, res, rbar, mean)
    rr, zz = grid.mesh()
    rho = np.hypot(rr, zz)
    ur, uz, _ = truncated_velocity(trunc, grid)
    Dr, Dz = grid.Dr(), grid.Dz()
    # ell-independent part of (r+ell) div_ell(u_R): d_r(r u^r) + d_z(r u^z)
    rhs = -(Dr @ (rr * ur).ravel() + Dz @ (rr * uz).ravel())
    mean = float(np.sum(grid.quad_2d.ravel() * rhs))
    scale = max(float(np.max(np.abs(rhs))), 1e-300)
    if abs(mean) > 1e-8 * scale * float(np.sum(grid.quad_2d[rho <= rbar])):
        raise ValueError(f"right-hand side has nonzero mean {mean:.3e}")
    # closed-form flux
    edge = trunc.support_radius
    total = trunc.stream(np.array([edge]))[0]
    wz = -(total - trunc.stream(rho))
    wz[rho >= edge] = 0.0
    wr = np.zeros_like(wz)
    resid = rhs - (Dr @ wr.ravel() + Dz @ wz.ravel())
    # minimum-norm correction supported on the ball nodes
    free = (rho <= rbar * (1 + 1e-12)).ravel()
    if np.max(np.abs(resid)) > 0:
        A = sp.hstack([Dr[:, free], Dz[:, free]]).tocsr()
        active = np.flatnonzero(np.asarray(abs(A).sum(axis=1)).ravel() > 0)
        Aa = A[active]
        y = spla.spsolve((Aa @ Aa.T).tocsc(), resid[active])
        sol = Aa.T @ y
        if np.max(np.abs(Aa @ sol - resid[active])) > tol * scale:
            sol = spla.lsqr(Aa, resid[active], atol=1e-16, btol=1e-16, iter_lim=50000,
                            x0=sol)[0]
        k = int(free.sum())
        wr_f = wr.ravel().copy()
        wz_f = wz.ravel().copy()
        wr_f[free] += sol[:k]
        wz_f[free] += sol[k:]
        wr, wz = wr_f.reshape(grid.shape), wz_f.reshape(grid.shape)
    final = rhs - (Dr @ wr.ravel() + Dz @ wz.ravel())
    res = float(np.max(np.abs(final)))
    for arr in (wr, wz):
        arr.setflags(write=False)
    _CORRECTION_CACHE[key] = (wr, wz, res, mean)
    return DivergenceCorrection(ell, grid, wr, wz, res, rbar, mean)


def corrected_velocity(trunc: TruncatedProfile, corr: DivergenceCorrection):
    """Corrected background ``u_ell = u_R + v_ell`` on the correction's grid."""
    ur, uz, _ = truncated_velocity(trunc, corr.grid)
    return ur + corr.vr, uz + corr.vz


def ring_divergence(grid: MeridionalGrid, ell: float, ur: np.ndarray, uz: np.ndarray) -> np.ndarray:
    """Discrete ``(r + ell)^{-1} (d_r, d_z) . [(r + ell) u]``."""
    rr, _ = grid.mesh()
    m = rr + ell
    flux = grid.Dr() @ (m * ur).ravel() + grid.Dz() @ (m * uz).ravel()
    # the wall node r = -ell has zero metric; report zero there
    return np.divide(flux.reshape(grid.shape), m, out=np.zeros(grid.shape), where=m > 0)


def _grid_key(grid: MeridionalGrid) -> str:
    h = hashlib.sha1()
    for arr in (grid.r_nodes, grid.z_nodes):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(f"{grid.order}{grid.r_kind}".encode())
    return h.hexdigest()
