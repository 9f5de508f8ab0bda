"""The two physical solutions, their common force, and the checks run on them.

Physical fields follow ``u(x, t) = t^{-1/2} U(x / sqrt(t), log t)`` and
``f(x, t) = t^{-3/2} F(x / sqrt(t))``. Every time sample reuses the similarity
grid transported to ``x = sqrt(t) xi``, so norms pick up Jacobian factors and
no interpolation happens. Fields are axisymmetric without swirl and are stored
as meridional components ``(u_r, u_z)`` on the full grid.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .numerics import factor_sparse
from .selfsim import Background, Frame, period_exponent


class PhysicalError(ValueError):
    """Raised for mismatched time ranges or failed elliptic solves."""


# ---------------------------------------------------------------------------
# meridional vector calculus on the full grid


class VectorCalculus:
    """Collocated operators for axisymmetric swirl-free vector fields."""

    def __init__(self, frame: Frame):
        grid = frame.grid
        self.frame = frame
        self.Dr, self.Dz = frame.Dr, frame.Dz
        self.Drr, self.Dzz = grid.Drr(), grid.Dzz()
        self.r = frame.radius
        self.z = np.tile(np.asarray(grid.z_nodes, dtype=float), grid.shape[0])
        self.w = frame.weights_full
        self.interior = ~grid.boundary_mask().ravel()
        self._pressure_lu = None

    def scalar_laplacian(self, f: np.ndarray) -> np.ndarray:
        return self.Drr @ f + (self.Dr @ f) / self.r + self.Dzz @ f

    def laplacian(self, u):
        ur, uz = u
        return self.scalar_laplacian(ur) - ur / self.r ** 2, self.scalar_laplacian(uz)

    def dilation(self, u):
        """``(1 + xi . grad) u``."""
        ur, uz = u
        return (ur + self.r * (self.Dr @ ur) + self.z * (self.Dz @ ur),
                uz + self.r * (self.Dr @ uz) + self.z * (self.Dz @ uz))

    def advection(self, u, v):
        """``(u . grad) v``."""
        ur, uz = u
        vr, vz = v
        return (ur * (self.Dr @ vr) + uz * (self.Dz @ vr),
                ur * (self.Dr @ vz) + uz * (self.Dz @ vz))

    def divergence(self, u, conservative: bool = False) -> np.ndarray:
        """``div u``; the conservative form ``(d_r(r u_r) + d_z(r u_z)) / r`` is exact
        for the lifted profile, the expanded form for Biot-Savart velocities."""
        ur, uz = u
        if conservative:
            return (self.Dr @ (self.r * ur) + self.Dz @ (self.r * uz)) / self.r
        return self.Dr @ ur + ur / self.r + self.Dz @ uz

    def curl(self, u) -> np.ndarray:
        ur, uz = u
        return self.Dr @ uz - self.Dz @ ur

    def grad_density(self, u) -> np.ndarray:
        """Pointwise ``|grad u|^2`` including the hoop component ``u_r / r``."""
        ur, uz = u
        return ((self.Dr @ ur) ** 2 + (self.Dz @ ur) ** 2 + (self.Dr @ uz) ** 2
                + (self.Dz @ uz) ** 2 + (ur / self.r) ** 2)

    def inner(self, u, v) -> float:
        return float(self.w @ (u[0] * v[0] + u[1] * v[1]))

    def norm(self, u) -> float:
        return float(np.sqrt(max(self.inner(u, u), 0.0)))

    def lp_norm(self, density: np.ndarray, p: float) -> float:
        """``L^p`` norm of a non-negative pointwise magnitude."""
        if np.isinf(p):
            return float(np.max(density))
        return float((self.w @ density ** p) ** (1.0 / p))

    def pressure(self, g) -> np.ndarray:
        """``p`` with ``Laplacian p = div g`` and ``p = 0`` on the outer boundary."""
        if self._pressure_lu is None:
            keep = sp.diags(self.interior.astype(float))
            mat = (sp.diags(1.0 / self.r) @ self.Dr + self.Drr + self.Dzz).tocsr()
            mat = (keep @ mat + sp.diags((~self.interior).astype(float))).tocsc()
            try:
                self._pressure_lu = factor_sparse(mat)
            except RuntimeError as exc:
                raise PhysicalError(f"pressure factorization failed: {exc}") from exc
        rhs = np.where(self.interior, self.divergence(g), 0.0)
        p = self._pressure_lu.solve(np.ascontiguousarray(rhs))
        if not np.all(np.isfinite(p)):
            raise PhysicalError("pressure solve produced non-finite values")
        return p

    def project(self, g):
        """Remove the gradient part of ``g`` with the pressure solve."""
        p = self.pressure(g)
        return g[0] - self.Dr @ p, g[1] - self.Dz @ p


def _sub(u, v):
    return u[0] - v[0], u[1] - v[1]


def _add(*fields):
    return sum(f[0] for f in fields), sum(f[1] for f in fields)


def _scale(c, u):
    return c * u[0], c * u[1]


# ---------------------------------------------------------------------------
# force


@dataclass
class ForceField:
    """Similarity force profile; ``f(x, t) = t^{-3/2} F(x / sqrt(t))``."""

    fr: np.ndarray
    fz: np.ndarray
    frame: Frame = field(repr=False)
    support_radius: float = np.inf
    outside_mass: float = 0.0

    def profile(self):
        return self.fr, self.fz

    def at(self, t: float):
        return _scale(t ** -1.5, (self.fr, self.fz))

    def l2_at(self, t: float) -> float:
        """Physical ``||f(., t)||_{L^2}`` with the transported-grid Jacobian."""
        vc = VectorCalculus(self.frame)
        fr, fz = self.at(t)
        return float(np.sqrt(t ** 1.5 * (vc.w @ (fr ** 2 + fz ** 2))))

    def integrability(self, t_end: float, samples: int = 400) -> tuple[float, float]:
        """``int_0^t_end ||f||_{L^2} dt`` by quadrature in ``log t`` and in closed form."""
        vc = VectorCalculus(self.frame)
        prof = vc.norm((self.fr, self.fz))
        tau = np.linspace(np.log(t_end) - 40.0, np.log(t_end), samples)
        vals = np.array([self.l2_at(np.exp(s)) for s in tau]) * np.exp(tau)
        head = 4.0 * np.exp(tau[0] / 4.0) * prof
        quad = float(np.trapezoid(vals, tau) + head)
        return quad, float(4.0 * t_end ** 0.25 * prof)


def background_velocity(bg: Background, beta: float):
    return beta * bg.ur, beta * bg.uz


def compute_force(frame: Frame, ubar) -> ForceField:
    """``F = -(1/2)(1 + xi . grad) U - Laplacian U + U . grad U`` for a steady profile."""
    vc = VectorCalculus(frame)
    ubar = (np.asarray(ubar[0], dtype=float), np.asarray(ubar[1], dtype=float))
    fr, fz = _add(_scale(-0.5, vc.dilation(ubar)), _scale(-1.0, vc.laplacian(ubar)),
                  vc.advection(ubar, ubar))
    fr = np.where(vc.interior, fr, 0.0)
    fz = np.where(vc.interior, fz, 0.0)
    # support: ball around the ring centre enclosing the profile plus one stencil width
    speed = np.hypot(*ubar)
    ring = np.hypot(vc.r - frame.grid.ell, vc.z)
    live = speed > 0
    radius = float(ring[live].max()) if live.any() else 0.0
    radius += frame.grid.h * 4
    out = ring > radius
    mass = float(vc.w @ (fr ** 2 + fz ** 2))
    out_mass = float(vc.w[out] @ (fr[out] ** 2 + fz[out] ** 2))
    return ForceField(fr, fz, frame, radius, out_mass / mass if mass > 0 else 0.0)


# ---------------------------------------------------------------------------
# the pair


@dataclass
class PhysicalSolutionPair:
    """``u_bar`` and ``u = u_bar + u^lin + u^per`` at times ``t_j = e^{tau_j}``."""

    tau: np.ndarray
    ubar: tuple[np.ndarray, np.ndarray]          # similarity profile on the full grid
    pert: np.ndarray                             # (samples, 2, grid size) similarity velocity
    pert_rate: np.ndarray                        # d/dtau of ``pert``
    frame: Frame = field(repr=False)
    provenance: dict = field(default_factory=dict)

    @property
    def t(self) -> np.ndarray:
        return np.exp(self.tau)

    def similarity(self, j: int, which: str = "u"):
        if which == "ubar":
            return self.ubar
        return self.ubar[0] + self.pert[j, 0], self.ubar[1] + self.pert[j, 1]

    def physical(self, j: int, which: str = "u"):
        """Values of the physical field at the transported nodes ``sqrt(t_j) xi``."""
        return _scale(self.t[j] ** -0.5, self.similarity(j, which))


def assemble_pair(frame: Frame, ubar, lin_pair, per_times: np.ndarray, per_states: np.ndarray,
                  tau: np.ndarray | None = None, provenance: dict | None = None) -> PhysicalSolutionPair:
    """Build the pair from the perturbation vorticity trajectory.

    ``lin_pair`` is the normalised eigenpair (``value``, ``vector``) and
    ``per_states`` holds ``U^per`` vorticities at ``per_times``; ``tau``
    selects sample times inside that range (default: all of them).
    ``per_states = None`` gives the linear perturbation only.
    """
    per_times = np.asarray(per_times, dtype=float)
    tau = per_times if tau is None else np.asarray(tau, dtype=float)
    if tau.min() < per_times[0] - 1e-12 or tau.max() > per_times[-1] + 1e-12:
        raise PhysicalError("requested times outside the trajectory range")
    lam = complex(lin_pair.value)
    ur_eta, uz_eta, _ = frame.velocity(np.asarray(lin_pair.vector, dtype=complex))
    size = frame.grid.size
    pert = np.zeros((len(tau), 2, size))
    rate = np.zeros_like(pert)
    for j, s in enumerate(tau):
        ph = np.exp(lam * s)
        pert[j, 0], pert[j, 1] = np.real(ph * ur_eta), np.real(ph * uz_eta)
        rate[j, 0], rate[j, 1] = np.real(lam * ph * ur_eta), np.real(lam * ph * uz_eta)
        if per_states is None:
            continue
        k = int(np.argmin(np.abs(per_times - s)))
        if abs(per_times[k] - s) > 1e-9 * max(1.0, abs(s)):
            raise PhysicalError("sample times must coincide with trajectory nodes")
        if k == 0 or k == len(per_times) - 1:
            raise PhysicalError("sample times must be interior trajectory nodes")
        omega = per_states[k]
        ur, uz, _ = frame.velocity(omega)
        pert[j, 0] += ur
        pert[j, 1] += uz
        # centred difference on a possibly uneven stencil
        h1, h2 = per_times[k] - per_times[k - 1], per_times[k + 1] - per_times[k]
        d = (-(h2 / (h1 * (h1 + h2))) * per_states[k - 1]
             + ((h2 - h1) / (h1 * h2)) * omega
             + (h1 / (h2 * (h1 + h2))) * per_states[k + 1])
        dr, dz, _ = frame.velocity(d)
        rate[j, 0] += dr
        rate[j, 1] += dz
    return PhysicalSolutionPair(tau, (np.asarray(ubar[0]), np.asarray(ubar[1])), pert, rate,
                                frame, dict(provenance or {}))


# ---------------------------------------------------------------------------
# residual


@dataclass
class ResidualRow:
    t: float
    which: str
    residual: float          # physical L^2 norm after the pressure correction
    scale: float             # physical L^2 norm of the force
    divergence: float        # max |div u| relative to max |grad u|

    @property
    def relative(self) -> float:
        return self.residual / self.scale if self.scale > 0 else self.residual


def _similarity_residual(vc: VectorCalculus, U, rate, force):
    """``dU/dtau - (1/2)(1 + xi.grad) U - Laplacian U + U.grad U - F`` before the pressure."""
    return _add(rate, _scale(-0.5, vc.dilation(U)), _scale(-1.0, vc.laplacian(U)),
                vc.advection(U, U), _scale(-1.0, force))


def verify_residual(pair: PhysicalSolutionPair, force: ForceField, which: str = "u",
                    force_scale: float = 1.0, samples=None) -> list[ResidualRow]:
    """Residual of the Navier-Stokes system in physical variables.

    At ``x = sqrt(t) xi`` the physical residual equals ``t^{-3/2}`` times the
    similarity residual; its ``L^2`` norm then carries ``t^{3/4}``. The
    pressure comes from ``Laplacian p = -div(residual)`` on the grid box.
    """
    vc = VectorCalculus(pair.frame)
    F = _scale(force_scale, force.profile())
    rows = []
    idx = range(len(pair.tau)) if samples is None else samples
    mask = vc.interior
    for j in idx:
        U = pair.similarity(j, which)
        rate = (np.zeros_like(U[0]), np.zeros_like(U[1])) if which == "ubar" else \
            (pair.pert_rate[j, 0], pair.pert_rate[j, 1])
        raw = _similarity_residual(vc, U, rate, F)
        raw = (np.where(mask, raw[0], 0.0), np.where(mask, raw[1], 0.0))
        res = vc.project(raw)
        t = float(pair.t[j])
        # field scale t^{-3/2} times t^{3/4} from the volume element
        jac = t ** -0.75
        div = np.max(np.abs(vc.divergence(pair.ubar, conservative=True)[mask]))
        if which != "ubar":
            div += np.max(np.abs(vc.divergence((pair.pert[j, 0], pair.pert[j, 1]))[mask]))
        grad = np.sqrt(np.max(vc.grad_density(U)))
        rows.append(ResidualRow(t, which, jac * vc.norm(res), jac * vc.norm(F),
                                float(div / grad) if grad > 0 else 0.0))
    return rows


# ---------------------------------------------------------------------------
# energy


@dataclass
class EnergyReport:
    """Energy balance ``E(t) - E(t0) + dissipation - work`` on ``[t0, t]``."""

    which: str
    t: np.ndarray
    energy: np.ndarray
    dissipation: np.ndarray
    work: np.ndarray
    gap: np.ndarray
    relative_gap: float
    order_estimate: float    # quadrature and grid error scale recorded with the gap

    def csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,energy,dissipation,work,gap\n")
        for row in zip(self.t, self.energy, self.dissipation, self.work, self.gap):
            buf.write(",".join(f"{v:.12e}" for v in row) + "\n")
        return buf.getvalue()


def energy_report(pair: PhysicalSolutionPair, force: ForceField, which: str = "u") -> EnergyReport:
    """Kinetic energy, cumulative dissipation and force work in physical units.

    With the transported grid ``int |u|^2 dx = t^{1/2} ||U||^2`` and
    ``int |grad u|^2 dx = t^{-1/2} ||grad U||^2``; the time integrals run in
    ``tau`` with ``dt = t dtau`` and the trapezoid rule on the sample times.
    """
    vc = VectorCalculus(pair.frame)
    t = pair.t
    F = force.profile()
    e, d, w = [], [], []
    for j in range(len(t)):
        U = pair.similarity(j, which)
        e.append(0.5 * np.sqrt(t[j]) * vc.inner(U, U))
        d.append(np.sqrt(t[j]) * float(vc.w @ vc.grad_density(U)))
        w.append(np.sqrt(t[j]) * vc.inner(F, U))
    e, d, w = map(np.asarray, (e, d, w))
    cum = lambda y: np.concatenate([[0.0], np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(pair.tau))])
    diss, work = cum(d), cum(w)
    gap = e - e[0] + diss - work
    scale = max(np.max(np.abs(e)), np.max(np.abs(diss)), np.max(np.abs(work)))
    rel = float(np.max(np.abs(gap)) / scale) if scale > 0 else 0.0
    dtau = float(np.max(np.diff(pair.tau))) if len(t) > 1 else 0.0
    est = dtau ** 2 / 12.0 + pair.frame.grid.h ** 2
    return EnergyReport(which, t, e, diss, work, gap, rel, est)


# ---------------------------------------------------------------------------
# scaling tables


@dataclass
class LpRow:
    t: float
    field: str
    p: float
    k: int
    value: float             # normalised by the self-similar rate


def _gradient_magnitude(vc: VectorCalculus, u, k: int) -> np.ndarray:
    if k == 0:
        return np.hypot(u[0], u[1])
    if k == 1:
        return np.sqrt(vc.grad_density(u))
    raise PhysicalError(f"derivative order {k} not supported")


def lp_bound_sweep(pair: PhysicalSolutionPair, force: ForceField, p_list=(2, 3, 6, np.inf),
                   k_list=(0, 1)) -> list[LpRow]:
    """``t^{k/2} ||grad^k .||_{L^p} t^{-(3/p - 1)/2}`` for both solutions and the force.

    Norms are taken in physical variables: physical derivative ``t^{-1/2}
    d/dxi`` and volume element ``t^{3/2} dxi`` on the transported grid. The
    force uses the exponent ``(3/p - 3)/2``.
    """
    vc = VectorCalculus(pair.frame)
    rows = []
    for j, t in enumerate(pair.t):
        t = float(t)
        for name in ("ubar", "u", "force"):
            if name == "force":
                sim, amp, rate = force.profile(), t ** -1.5, 3.0
            else:
                sim, amp, rate = pair.similarity(j, name), t ** -0.5, 1.0
            for k in k_list:
                dens = amp * t ** (-0.5 * k) * _gradient_magnitude(vc, sim, k)
                for p in p_list:
                    vol = 1.0 if np.isinf(p) else t ** (1.5 / p)
                    phys = vol * vc.lp_norm(dens, p)
                    expo = 0.5 * ((0.0 if np.isinf(p) else 3.0 / p) - rate)
                    rows.append(LpRow(t, name, float(p), k, t ** (0.5 * k) * phys * t ** -expo))
    return rows


def column_spread(rows: list[LpRow], field_name: str, p: float, k: int) -> float:
    """``max / min - 1`` of one normalised column over the time samples."""
    vals = np.array([r.value for r in rows if r.field == field_name and r.p == p and r.k == k])
    return float(vals.max() / vals.min() - 1.0)


def lp_csv(rows: list[LpRow]) -> str:
    buf = io.StringIO()
    buf.write("t,field,p,k,value\n")
    for r in rows:
        buf.write(f"{r.t:.12e},{r.field},{r.p:g},{r.k},{r.value:.12e}\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# distinctness


@dataclass
class Distinctness:
    t: np.ndarray
    difference: np.ndarray    # ||u - u_bar||_{L^2}(t)
    exponent: float
    expected: float

    @property
    def minimum(self) -> float:
        return float(self.difference.min())


def distinctness(pair: PhysicalSolutionPair, lam: complex) -> Distinctness:
    """Exponent of ``||u - u_bar||_{L^2}`` in ``t``; expected ``a + 1/4``.

    The difference is dominated by ``U^lin``, whose norm oscillates with
    period ``pi / Im(lambda)`` in ``log t``; the exponent averages log-ratios
    one period apart, which cancels that oscillation.
    """
    vc = VectorCalculus(pair.frame)
    diff = np.array([np.sqrt(np.sqrt(t)) * vc.norm((pair.pert[j, 0], pair.pert[j, 1]))
                     for j, t in enumerate(pair.t)])
    b = abs(complex(lam).imag)
    period = np.pi / b if b > 0 else 0.5 * (pair.tau[-1] - pair.tau[0])
    expo = period_exponent(pair.tau, diff, period)
    return Distinctness(pair.t, diff, expo, complex(lam).real + 0.25)


def initial_attainment(pair: PhysicalSolutionPair) -> float:
    """Largest ``||u(t)||_{L^2} t^{-1/4}`` over the samples (finite means ``u -> 0``)."""
    vc = VectorCalculus(pair.frame)
    return float(max(vc.norm(pair.similarity(j, "u")) for j in range(len(pair.tau))))


def summary_text(items: dict) -> str:
    """Structured ``key = value`` text with sorted keys."""
    lines = []
    for key in sorted(items):
        v = items[key]
        if isinstance(v, float):
            v = f"{v:.10e}"
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"
