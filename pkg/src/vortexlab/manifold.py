"""Unstable-manifold trajectory of the self-similar flow on a finite time window.

The perturbation of the self-similar profile is split as ``U^lin + U^per``
with ``U^lin(tau) = Re(exp(tau lambda) eta)`` built from the rightmost
eigenpair of ``L_ss``. ``U^per`` is the fixed point of

    U = G + L U + B(U, U),

where every term is a Duhamel integral ``-int_{-inf}^tau e^{(tau-s) L_ss} P[...] ds``.
The integral starts at a finite ``tau0`` and each Duhamel term is evaluated as
the solution of the forced linear equation ``V' = L_ss V + F`` from ``V(tau0) = 0``.
Fields are pure-swirl vorticities; velocities come from the Biot-Savart solve,
which is the Leray projection within this symmetry class.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import EigenPair
from .selfsim import Frame, SchurOperator, Stepper, period_exponent, sobolev_norm


class ManifoldError(RuntimeError):
    """Raised for inadmissible parameters or a fixed point that cannot be reached."""


# ---------------------------------------------------------------------------
# weighted trajectories


@dataclass
class WeightedTrajectory:
    """Vorticity snapshots with their ``H^N`` velocity norms and the X-norm weight."""

    times: np.ndarray
    states: np.ndarray          # (snapshots, n)
    weight: float               # a + eps0
    order: int                  # Sobolev index N
    norms: np.ndarray
    frame: Frame = field(repr=False)

    def x_norm(self) -> float:
        return float(np.max(np.exp(-self.weight * self.times) * self.norms))

    def recompute_norms(self) -> np.ndarray:
        return np.array([sobolev_norm(self.frame, s, self.order) for s in self.states])


def weighted(frame: Frame, times: np.ndarray, states: np.ndarray, weight: float,
             order: int = 3, stride: int = 1) -> WeightedTrajectory:
    """Wrap snapshots (every ``stride``-th one, always keeping the last)."""
    if order < 3:
        raise ManifoldError(f"Sobolev index must exceed 5/2, got {order}")
    keep = np.unique(np.r_[np.arange(0, len(times), stride), len(times) - 1])
    t, s = np.asarray(times)[keep], np.asarray(states)[keep]
    norms = np.array([sobolev_norm(frame, x, order) for x in s])
    return WeightedTrajectory(t, s, float(weight), order, norms, frame)


def x_distance(frame: Frame, times: np.ndarray, a: np.ndarray, b: np.ndarray, weight: float,
               order: int = 3, stride: int = 1) -> float:
    return weighted(frame, times, np.asarray(a) - np.asarray(b), weight, order, stride).x_norm()


# ---------------------------------------------------------------------------
# linear part


def normalise_eigenvector(frame: Frame, eta: np.ndarray, order: int = 3) -> np.ndarray:
    """Scale ``eta`` to unit complex ``H^N`` norm with a deterministic phase."""
    eta = np.asarray(eta, dtype=complex)
    k = int(np.argmax(np.abs(eta)))
    eta = eta * np.exp(-1j * np.angle(eta[k]))
    size = np.hypot(sobolev_norm(frame, eta.real, order), sobolev_norm(frame, eta.imag, order))
    if size == 0:
        raise ManifoldError("zero eigenvector")
    return eta / size


def build_Ulin(frame: Frame, pair: EigenPair, times: np.ndarray, eps0: float | None = None,
               order: int = 3, max_residual: float = 1e-6) -> WeightedTrajectory:
    """``U^lin(tau) = Re(exp(tau lambda) eta)`` on ``times``.

    ``pair.vector`` must already be normalised (see ``normalise_eigenvector``).
    The weight defaults to ``a + a/2``.
    """
    lam = complex(pair.value)
    if not lam.real > 0:
        raise ManifoldError(f"growth rate must be positive, got {lam.real}")
    scale = max(abs(lam), 1.0) * float(np.sqrt(np.sum(frame.weights * np.abs(pair.vector) ** 2)))
    if pair.residual > max_residual * scale:
        raise ManifoldError(f"eigenpair residual {pair.residual:.3g} too large")
    eps0 = 0.5 * lam.real if eps0 is None else eps0
    times = np.asarray(times, dtype=float)
    states = np.real(np.exp(lam * times)[:, None] * pair.vector[None, :])
    return weighted(frame, times, states, lam.real + eps0, order)


def envelope_ratios(frame: Frame, pair: EigenPair, times: np.ndarray, order: int) -> np.ndarray:
    """``||exp(tau lambda) eta||_{H^k} exp(-a tau)`` for the complex trajectory."""
    lam = complex(pair.value)
    out = []
    for t in np.asarray(times, dtype=float):
        z = np.exp(lam * t) * pair.vector
        size = np.hypot(sobolev_norm(frame, z.real, order), sobolev_norm(frame, z.imag, order))
        out.append(size * np.exp(-lam.real * t))
    return np.asarray(out)


# ---------------------------------------------------------------------------
# nonlinearity


def advection_curl(frame: Frame, u: tuple[np.ndarray, np.ndarray],
                   v: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    """Swirl vorticity of ``(U . grad) V`` for meridional velocities on the full grid."""
    ur, uz = u
    vr, vz = v
    Dr, Dz = frame.Dr, frame.Dz
    wr = ur * (Dr @ vr) + uz * (Dz @ vr)
    wz = ur * (Dr @ vz) + uz * (Dz @ vz)
    return (Dr @ wz - Dz @ wr)[frame.idx]


def velocity(frame: Frame, omega: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ur, uz, _ = frame.velocity(omega)
    return ur, uz


# ---------------------------------------------------------------------------
# Duhamel terms on a window


class DuhamelWindow:
    """Duhamel integrals on ``[tau0, T]`` with the TR-BDF2 propagator of ``L_ss``.

    Forcing is sampled at the step times and interpolated linearly to the
    stage times, which keeps the scheme second order.
    """

    def __init__(self, op: SchurOperator, frame: Frame, pair: EigenPair, tau0: float, T: float,
                 dt: float, stepper: Stepper | None = None):
        if not T > tau0:
            raise ManifoldError("window end must exceed its start")
        steps = max(2, int(np.ceil((T - tau0) / dt - 1e-9)))
        self.op, self.frame, self.pair = op, frame, pair
        self.tau0, self.T = float(tau0), float(T)
        self.dt = (self.T - self.tau0) / steps
        self.times = self.tau0 + self.dt * np.arange(steps + 1)
        if stepper is not None and abs(stepper.dt - self.dt) <= 1e-12 * self.dt:
            self.stepper = stepper
        else:
            self.stepper = Stepper(op, self.dt)
        ur, uz, _ = frame.velocity(np.asarray(pair.vector, dtype=complex))
        self._eta_velocity = (ur, uz)
        self.propagations = 0

    # U^lin
    def lin_state(self, j: int) -> np.ndarray:
        return np.real(np.exp(self.pair.value * self.times[j]) * self.pair.vector)

    def lin_states(self) -> np.ndarray:
        return np.real(np.exp(self.pair.value * self.times)[:, None] * self.pair.vector[None, :])

    def lin_velocity(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        phase = np.exp(self.pair.value * self.times[j])
        return np.real(phase * self._eta_velocity[0]), np.real(phase * self._eta_velocity[1])

    # forcing samples
    def forcing_full(self, U: np.ndarray | None) -> np.ndarray:
        """``-curl[(U^lin + U) . grad (U^lin + U)]`` at every step time."""
        out = np.empty((len(self.times), self.frame.n))
        for j in range(len(self.times)):
            ur, uz = self.lin_velocity(j)
            if U is not None:
                pr, pz = velocity(self.frame, U[j])
                ur, uz = ur + pr, uz + pz
            out[j] = -advection_curl(self.frame, (ur, uz), (ur, uz))
        return out

    def forcing_G(self) -> np.ndarray:
        return self.forcing_full(None)

    def forcing_L(self, U: np.ndarray) -> np.ndarray:
        out = np.empty((len(self.times), self.frame.n))
        for j in range(len(self.times)):
            lin = self.lin_velocity(j)
            u = velocity(self.frame, U[j])
            out[j] = -(advection_curl(self.frame, lin, u) + advection_curl(self.frame, u, lin))
        return out

    def forcing_B(self, U: np.ndarray, V: np.ndarray) -> np.ndarray:
        out = np.empty((len(self.times), self.frame.n))
        for j in range(len(self.times)):
            out[j] = -advection_curl(self.frame, velocity(self.frame, U[j]), velocity(self.frame, V[j]))
        return out

    # propagation
    def solve(self, samples: np.ndarray) -> np.ndarray:
        """``V(tau) = int_{tau0}^tau e^{(tau - s) L} F(s) ds`` at every step time."""
        samples = np.asarray(samples)
        tau0, dt, last = self.tau0, self.dt, len(self.times) - 1

        def forcing(tau: float) -> np.ndarray:
            s = (tau - tau0) / dt
            j = min(max(int(np.floor(s + 1e-9)), 0), last - 1)
            theta = min(max(s - j, 0.0), 1.0)
            return (1.0 - theta) * samples[j] + theta * samples[j + 1]

        out = np.zeros_like(samples)
        x = np.zeros(samples.shape[1])
        for k in range(last):
            x = self.stepper.step(x, self.times[k], forcing)
            out[k + 1] = x
        self.propagations += 1
        return out

    def G(self) -> np.ndarray:
        return self.solve(self.forcing_G())

    def L(self, U: np.ndarray) -> np.ndarray:
        return self.solve(self.forcing_L(U))

    def B(self, U: np.ndarray, V: np.ndarray) -> np.ndarray:
        return self.solve(self.forcing_B(U, V))

    def apply_map(self, U: np.ndarray | None) -> np.ndarray:
        """``B(U, U) + L U + G`` as a single forced solve."""
        return self.solve(self.forcing_full(U))


def duhamel_restarted(window: DuhamelWindow, samples: np.ndarray, stride: int) -> np.ndarray:
    """Oracle for ``window.solve``: restart the free propagator from each quadrature node.

    Composite trapezoid in ``s`` on every ``stride``-th step time, each node's
    integrand propagated to ``T`` separately. Returns ``V(T)``.
    """
    times = window.times
    nodes = np.arange(0, len(times), stride)
    if nodes[-1] != len(times) - 1:
        raise ManifoldError("stride must divide the number of steps")
    hs = stride * window.dt
    total = np.zeros(window.frame.n)
    for i, j in enumerate(nodes):
        w = hs * (0.5 if i in (0, len(nodes) - 1) else 1.0)
        x = np.array(samples[j], dtype=float)
        for _ in range(len(times) - 1 - j):
            x = window.stepper.step(x, 0.0)
        total += w * x
    return total


# ---------------------------------------------------------------------------
# fixed point


@dataclass
class Surrogates:
    G: float
    L: float
    B: float

    @property
    def total(self) -> float:
        return self.L + 2.0 * self.B + self.G


@dataclass
class FixedPointReport:
    T: float
    tau0: float
    eps0: float
    delta: float
    dt: float
    x_norms: list[float]
    differences: list[float]
    ratios: list[float]
    residual: float
    converged: bool
    surrogates: Surrogates
    tail_bound: float
    attempts: list[tuple[float, float]]      # (T, surrogate total) per attempt

    def table(self) -> str:
        """Iteration table; row ``k`` holds iterate ``k`` and its distance to iterate ``k - 1``."""
        lines = [f"T = {self.T:.6g}  tau0 = {self.tau0:.6g}  eps0 = {self.eps0:.6g}  "
                 f"delta = {self.delta:.6g}  dt = {self.dt:.3g}",
                 f"surrogates: G = {self.surrogates.G:.4e}  L = {self.surrogates.L:.4e}  "
                 f"B = {self.surrogates.B:.4e}  sum = {self.surrogates.total:.4e}",
                 f"tail bound = {self.tail_bound:.4e}",
                 "iter  x_norm  difference  ratio"]
        for k, xn in enumerate(self.x_norms):
            d = f"{self.differences[k - 1]:.6e}" if k >= 1 else "-"
            r = f"{self.ratios[k - 2]:.4e}" if k >= 2 else "-"
            lines.append(f"{k + 1:4d}  {xn:.6e}  {d}  {r}")
        lines.append(f"residual = {self.residual:.3e}  converged = {self.converged}")
        return "\n".join(lines) + "\n"


@dataclass
class FixedPointResult:
    window: DuhamelWindow
    per: np.ndarray                 # U^per at every step time
    per_weighted: WeightedTrajectory
    report: FixedPointReport


def measure_surrogates(window: DuhamelWindow, weight: float, order: int = 3,
                       stride: int = 1) -> tuple[Surrogates, np.ndarray]:
    """X-norm surrogates ``||G||_X``, ``||L||`` and ``||B||`` probed along ``G``."""
    frame, times = window.frame, window.times
    g = window.G()
    gx = weighted(frame, times, g, weight, order, stride).x_norm()
    if gx == 0:
        return Surrogates(0.0, 0.0, 0.0), g
    lg = weighted(frame, times, window.L(g), weight, order, stride).x_norm()
    bg = weighted(frame, times, window.B(g, g), weight, order, stride).x_norm()
    return Surrogates(gx, lg / gx, bg / gx ** 2), g


def tail_bound(window: DuhamelWindow, g_first: np.ndarray, weight: float, delta: float,
               order: int = 3) -> float:
    """Bound on the X-norm of the neglected ``int_{-inf}^{tau0}`` part.

    The forcing decays like ``C_F e^{2 a s}`` and the semigroup grows at most
    like ``e^{(a + delta)(tau - s)}``; ``C_F`` is measured from the window's
    first forcing samples.
    """
    a = window.pair.value.real
    frame, times = window.frame, window.times
    head = slice(0, max(2, len(times) // 10))
    cf = max(sobolev_norm(frame, f, order) * np.exp(-2 * a * t)
             for f, t in zip(g_first[head], times[head]))
    # sup_tau e^{-w tau} e^{(a+delta) tau} e^{(a-delta) tau0} / (a - delta) at tau = T
    return float(cf * np.exp((a + delta - weight) * window.T + (a - delta) * window.tau0) / (a - delta))


def fixed_point(op: SchurOperator, frame: Frame, pair: EigenPair, T: float, dt: float,
                order: int = 3, eps0: float | None = None, delta: float | None = None,
                window_efolds: float = 10.0, max_iter: int = 12, tol: float = 1e-10,
                max_retries: int = 8, ratio_target: float = 0.5, stride: int = 1,
                stepper: Stepper | None = None) -> FixedPointResult:
    """Contraction iteration ``U_{k+1} = B(U_k, U_k) + L U_k + G`` with ``T`` tuning.

    ``tau0 = T - window_efolds / a``. If the surrogate sum is at least one, or
    the measured difference ratios exceed ``ratio_target``, ``T`` moves down
    and the run restarts (at most ``max_retries`` times).
    """
    a = complex(pair.value).real
    if not a > 0:
        raise ManifoldError("fixed point needs a positive growth rate")
    if order < 3:
        raise ManifoldError(f"Sobolev index must exceed 5/2, got {order}")
    eps0 = 0.5 * a if eps0 is None else eps0
    delta = 0.5 * eps0 if delta is None else delta
    if not delta < a:
        raise ManifoldError("delta must be below a")
    weight = a + eps0
    attempts = []
    for _ in range(max_retries + 1):
        tau0 = T - window_efolds / a
        window = DuhamelWindow(op, frame, pair, tau0, T, dt, stepper=stepper)
        stepper = window.stepper
        sur, g = measure_surrogates(window, weight, order, stride)
        attempts.append((float(T), sur.total))
        if sur.total >= 1.0:
            T -= max(1.0, np.log(sur.total / 0.25)) / (a - eps0)
            continue
        U = g
        x_norms = [weighted(frame, window.times, U, weight, order, stride).x_norm()]
        diffs, ratios = [], []
        converged = False
        for _ in range(max_iter):
            U_new = window.apply_map(U)
            d = x_distance(frame, window.times, U_new, U, weight, order, stride)
            U = U_new
            x_norms.append(weighted(frame, window.times, U, weight, order, stride).x_norm())
            if diffs:
                ratios.append(d / diffs[-1] if diffs[-1] > 0 else 0.0)
            diffs.append(d)
            if d <= tol * max(x_norms[-1], 1e-300):
                converged = True
                break
        if ratios and max(ratios) > ratio_target:
            T -= np.log(2.0) / (a - eps0)
            continue
        wt = weighted(frame, window.times, U, weight, order, stride)
        report = FixedPointReport(float(T), float(tau0), float(eps0), float(delta), window.dt,
                                  x_norms, diffs, ratios, diffs[-1] if diffs else 0.0, converged,
                                  sur, tail_bound(window, window.forcing_G(), weight, delta, order),
                                  attempts)
        return FixedPointResult(window, U, wt, report)
    raise ManifoldError(f"no admissible T after {max_retries} retries: {attempts}")


# ---------------------------------------------------------------------------
# checks


@dataclass
class RefinedDecay:
    sup_scaled: float               # max_tau e^{-2 a tau} ||U^per||_{H^N}
    exponent: float
    window: tuple[float, float]
    per_over_lin: np.ndarray        # ||U^per|| / ||U^lin|| on the fit window


def refined_decay_check(result: FixedPointResult, lin: WeightedTrajectory,
                        fit_from: float = 0.5) -> RefinedDecay:
    """Decay exponent of ``||U^per(tau)||`` and the scaled sup.

    The exponent uses the last ``1 - fit_from`` of the window, away from the
    start-up layer at ``tau0``; the period is that of ``|U^lin|^2``.
    """
    a = result.window.pair.value.real
    b = abs(result.window.pair.value.imag)
    per = result.per_weighted
    scaled = float(np.max(np.exp(-2 * a * per.times) * per.norms))
    t0 = per.times[0] + fit_from * (per.times[-1] - per.times[0])
    l2 = np.array([sobolev_norm(per.frame, s, 0) for s in per.states])
    if not np.any(l2 > 0):
        return RefinedDecay(0.0, -np.inf, (float(t0), float(per.times[-1])), np.zeros(0))
    period = np.pi / b if b > 0 else (per.times[-1] - t0) / 2
    # short windows: widen the fit to 1.5 periods but never include tau0, where U^per = 0
    t0 = max(min(t0, per.times[-1] - 1.5 * period), per.times[1])
    expo = period_exponent(per.times, l2, period, start=t0)
    lin_l2 = np.interp(per.times, lin.times, [sobolev_norm(lin.frame, s, 0) for s in lin.states])
    sel = per.times >= t0
    return RefinedDecay(scaled, expo, (float(t0), float(per.times[-1])), l2[sel] / lin_l2[sel])


def duhamel_consistency(window: DuhamelWindow, per: np.ndarray, indices) -> np.ndarray:
    """Relative residual of ``dU/dtau = L_ss U - curl[(U^lin+U).grad(U^lin+U)] + curl[lin.grad lin]``.

    Central differences of the stored trajectory at the given step indices;
    at a converged fixed point this equals the forced-equation residual.
    """
    frame, dt = window.frame, window.dt
    out = []
    for j in indices:
        if not 0 < j < len(window.times) - 1:
            raise ManifoldError("consistency needs interior snapshots")
        ddt = (per[j + 1] - per[j - 1]) / (2 * dt)
        lin = window.lin_velocity(j)
        pr, pz = velocity(frame, per[j])
        full = (lin[0] + pr, lin[1] + pz)
        rhs = (window.op @ per[j]) - advection_curl(frame, full, full)
        # U^lin solves the linear equation, so only the perturbation's own forcing remains
        out.append(float(frame.norm(ddt - rhs) / max(frame.norm(ddt), 1e-300)))
    return np.asarray(out)


def consistency_order(op: SchurOperator, frame: Frame, pair: EigenPair, result: FixedPointResult,
                      taus, **kwargs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Duhamel/PDE residuals at ``dt`` and ``dt / 2`` at the step times nearest ``taus``.

    The half-step run reuses ``T`` and the window of ``result`` (no retuning).
    Returns the two residual arrays and their ratios; a second-order stepper
    gives ratios near 4.
    """
    rep = result.report
    a = pair.value.real
    efolds = (rep.T - rep.tau0) * a
    fine = fixed_point(op, frame, pair, rep.T, 0.5 * rep.dt, order=result.per_weighted.order,
                       eps0=rep.eps0, delta=rep.delta, window_efolds=efolds, max_retries=0, **kwargs)
    coarse_idx = [int(np.argmin(np.abs(result.window.times - t))) for t in taus]
    fine_idx = [int(np.argmin(np.abs(fine.window.times - result.window.times[j]))) for j in coarse_idx]
    r1 = duhamel_consistency(result.window, result.per, coarse_idx)
    r2 = duhamel_consistency(fine.window, fine.per, fine_idx)
    return r1, r2, r1 / r2


def growth_exponent(window: DuhamelWindow, states: np.ndarray, fit_from: float = 0.0) -> float:
    """Exponent of ``||V(tau)||_{L^2}`` over the window, oscillation removed."""
    frame, times = window.frame, window.times
    b = abs(window.pair.value.imag)
    norms = np.array([sobolev_norm(frame, s, 0) for s in states])
    t0 = times[0] + fit_from * (times[-1] - times[0])
    period = np.pi / b if b > 0 else 0.5 * (times[-1] - t0)
    return period_exponent(times, norms, period, start=t0)
