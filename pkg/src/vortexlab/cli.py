"""Command-line front end and pipeline orchestration.

Every stage writes its tables plus a ``<stage>.cert`` file of ``key = value``
lines. Later stages read those certificates instead of recomputing, as long
as the certificate carries the current config hash.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import io
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .profiles import ProfileError

log = logging.getLogger("vortexlab")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_NUMERIC = 0, 2, 3, 4

STAGES = ("search2d", "truncate", "axisym-sweep", "beta-sweep", "semigroup", "manifold", "verify")
COMMANDS = STAGES + ("full-pipeline",)

# keys that do not influence results and stay out of the hash
_UNHASHED = {("run", "out"), ("run", "workers")}

DEFAULTS: dict[str, dict[str, str]] = {
    "profile": {"family": "annulus", "center": "1.0", "width": "0.2", "m": "2", "amp": "1.0",
                "n": "4", "harmonics": "4"},
    "radial": {"points": "256", "extent": "64.0"},
    "truncate": {"R_list": "8, 16, 32"},
    "axisym": {"rbar": "3.0", "ell_list": "24, 48, 96, 192", "h": "0.1", "far": "128.0",
               "rank": "false"},
    "selfsim": {"ell": "24.0", "h": "0.1", "margin": "0.3", "far": "64.0", "growth": "1.15",
                "order": "6", "beta_list": "10, 100, 1000, 10000", "beta": "1000.0",
                "identity_tol": "1e-8"},
    "semigroup": {"ritz_tau": "0.6", "ritz_dt": "5e-4", "probes": "10", "fit_start": "1.0",
                  "fit_end": "1.1", "dt": "5e-4", "coarse_dt": "2e-3", "seed": "0",
                  "exponent_tol": "0.05"},
    "manifold": {"T": "0.0", "N": "3", "eps0_factor": "0.5", "delta_factor": "0.25",
                 "dt": "2e-4", "window_efolds": "10.0", "max_iter": "12", "tol": "1e-10",
                 "max_retries": "8", "stride": "5"},
    "physical": {"sample_stride": "25", "refine_check": "true", "energy_tol": "1e-3",
                 "residual_tol": "1e-10", "exponent_tol": "0.05"},
    "run": {"out": "out", "seed": "0", "workers": "1"},
}


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration (exit code 2)."""


class StageFailure(RuntimeError):
    """A stage certificate failed (exit code 3)."""

    def __init__(self, stage: str, reason: str):
        super().__init__(f"{stage}: {reason}")
        self.stage, self.reason = stage, reason


# ---------------------------------------------------------------------------
# configuration


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(",", " ").split()]


@dataclass
class RunConfig:
    """Flat sectioned ``key = value`` configuration."""

    sections: dict[str, dict[str, str]]

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unreadable config: {exc}") from exc
        sections = {s: dict(v) for s, v in DEFAULTS.items()}
        for sec in parser.sections():
            if sec not in DEFAULTS:
                raise ConfigError(f"unknown section [{sec}]")
            for key, val in parser.items(sec):
                if key not in DEFAULTS[sec]:
                    raise ConfigError(f"unknown key {sec}.{key}")
                sections[sec][key] = val.strip()
        cfg = cls(sections)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)

    def to_text(self, placement: bool = True) -> str:
        """Serialise every key; ``placement=False`` drops the output directory and worker count."""
        out = io.StringIO()
        for sec in DEFAULTS:
            out.write(f"[{sec}]\n")
            for key in DEFAULTS[sec]:
                if placement or (sec, key) not in _UNHASHED:
                    out.write(f"{key} = {self.sections[sec][key]}\n")
            out.write("\n")
        return out.getvalue()

    def hash(self) -> str:
        lines = [f"{s}.{k}={self.sections[s][k]}" for s in DEFAULTS for k in DEFAULTS[s]
                 if (s, k) not in _UNHASHED]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]

    # typed access
    def get(self, sec: str, key: str) -> str:
        return self.sections[sec][key]

    def f(self, sec: str, key: str) -> float:
        try:
            return float(self.get(sec, key))
        except ValueError as exc:
            raise ConfigError(f"{sec}.{key} is not a number") from exc

    def i(self, sec: str, key: str) -> int:
        val = self.f(sec, key)
        if val != int(val):
            raise ConfigError(f"{sec}.{key} must be an integer")
        return int(val)

    def b(self, sec: str, key: str) -> bool:
        val = self.get(sec, key).lower()
        if val not in ("true", "false"):
            raise ConfigError(f"{sec}.{key} must be true or false")
        return val == "true"

    def floats(self, sec: str, key: str) -> list[float]:
        try:
            vals = _floats(self.get(sec, key))
        except ValueError as exc:
            raise ConfigError(f"{sec}.{key} must be a list of numbers") from exc
        if not vals:
            raise ConfigError(f"{sec}.{key} must not be empty")
        return vals

    def validate(self) -> None:
        for sec, key in (("truncate", "R_list"), ("axisym", "ell_list"), ("selfsim", "beta_list")):
            vals = self.floats(sec, key)
            if any(v <= 0 for v in vals):
                raise ConfigError(f"{sec}.{key} entries must be positive")
        for sec, key in (("selfsim", "identity_tol"), ("semigroup", "exponent_tol"),
                         ("manifold", "tol"), ("manifold", "dt"), ("semigroup", "dt"),
                         ("semigroup", "ritz_dt"), ("selfsim", "h"), ("axisym", "h"),
                         ("physical", "energy_tol"), ("physical", "residual_tol"),
                         ("physical", "exponent_tol")):
            if not self.f(sec, key) > 0:
                raise ConfigError(f"{sec}.{key} must be positive")
        if self.i("manifold", "N") < 3:
            raise ConfigError("manifold.N must be at least 3")
        if self.i("run", "workers") < 1:
            raise ConfigError("run.workers must be at least 1")
        for sec, key in (("axisym", "rank"), ("physical", "refine_check")):
            self.b(sec, key)
        self.i("profile", "m")
        self.i("profile", "n")


# ---------------------------------------------------------------------------
# output helpers


def provenance_header(cfg: RunConfig) -> str:
    return (f"# vortexlab {__version__} numpy {np.__version__} scipy {scipy.__version__} "
            f"config {cfg.hash()}\n")


def emit_plotdata(kind: str, data) -> str:
    """Columnar text for ``spectrum-cloud``, ``sweep-curve`` or ``norm-ladder``.

    ``spectrum-cloud`` takes eigenvalues; ``sweep-curve`` takes
    ``(parameter, value, distance)`` triples with ``value`` complex;
    ``norm-ladder`` takes ``(times, norms)`` with one column per norm.
    """
    buf = io.StringIO()
    if kind == "spectrum-cloud":
        buf.write("re_lambda im_lambda\n")
        for v in np.asarray(data, dtype=complex).ravel():
            buf.write(f"{v.real:.12e} {v.imag:.12e}\n")
    elif kind == "sweep-curve":
        buf.write("parameter re_lambda distance\n")
        for p, v, d in data:
            buf.write(f"{p:.12g} {complex(v).real:.12e} {d:.12e}\n")
    elif kind == "norm-ladder":
        times, norms = data
        norms = np.asarray(norms, dtype=float)
        norms = norms[:, None] if norms.ndim == 1 else norms
        buf.write("tau " + " ".join(f"log_norm_{j}" for j in range(norms.shape[1])) + "\n")
        with np.errstate(divide="ignore"):
            logs = np.log(norms)
        for t, row in zip(times, logs):
            buf.write(f"{t:.12e} " + " ".join(f"{x:.12e}" for x in row) + "\n")
    else:
        raise ValueError(f"unknown plot kind {kind!r}")
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (complex, np.complexfloating)):
        return f"{complex(v).real!r} {complex(v).imag!r}"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(_fmt(x) for x in v)
    return str(v)


@dataclass
class Certificate:
    stage: str
    passed: bool
    values: dict = field(default_factory=dict)
    reason: str = ""

    def text(self, cfg_hash: str) -> str:
        lines = [f"stage = {self.stage}", f"config = {cfg_hash}", f"passed = {_fmt(self.passed)}"]
        if self.reason:
            lines.append(f"reason = {self.reason}")
        lines += [f"{k} = {_fmt(v)}" for k, v in self.values.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> tuple[str, "Certificate"]:
        kv = {}
        for line in text.splitlines():
            if " = " in line:
                k, v = line.split(" = ", 1)
                kv[k] = v
        stage, cfg_hash = kv.pop("stage"), kv.pop("config")
        passed = kv.pop("passed") == "true"
        reason = kv.pop("reason", "")
        return cfg_hash, cls(stage, passed, kv, reason)

    def complex(self, key: str) -> complex:
        re, im = self.values[key].split()
        return complex(float(re), float(im))

    def float(self, key: str) -> float:
        return float(self.values[key])


# ---------------------------------------------------------------------------
# pipeline


class Pipeline:
    """Runs stages on demand and caches their certificates in the output directory."""

    def __init__(self, cfg: RunConfig, out: Path, workers: int = 1):
        self.cfg, self.out, self.workers = cfg, Path(out), workers
        self.out.mkdir(parents=True, exist_ok=True)
        self.certs: dict[str, Certificate] = {}
        self._cache: dict = {}

    # files
    def write(self, name: str, body: str) -> None:
        (self.out / name).write_text(provenance_header(self.cfg) + body)

    def need(self, stage: str) -> Certificate:
        if stage in self.certs:
            return self.certs[stage]
        path = self.out / f"{stage}.cert"
        if path.exists():
            try:
                cfg_hash, cert = Certificate.parse(path.read_text())
            except (KeyError, ValueError):
                cfg_hash, cert = None, None
            if cfg_hash == self.cfg.hash() and cert.passed and self._artifacts_present(stage):
                self.certs[stage] = cert
                return cert
        return self.run(stage)

    def _artifacts_present(self, stage: str) -> bool:
        if stage == "manifold":
            return (self.out / "manifold_per.npy").exists()
        return True

    def run(self, stage: str) -> Certificate:
        log.info("stage %s", stage)
        fn = getattr(self, "stage_" + stage.replace("-", "_"))
        text = fn().text(self.cfg.hash())
        (self.out / f"{stage}.cert").write_text(text)
        # keep the parsed form so fresh and cached certificates behave alike
        _, cert = Certificate.parse(text)
        self.certs[stage] = cert
        if not cert.passed:
            raise StageFailure(stage, cert.reason)
        return cert

    # shared objects
    def profile(self):
        from .profiles import make_profile
        c = self.cfg
        params = {"center": c.f("profile", "center"), "width": c.f("profile", "width")} \
            if c.get("profile", "family") == "annulus" else {}
        return make_profile(c.get("profile", "family"), params, m=c.i("profile", "m"),
                            amp=c.f("profile", "amp"))

    def radial_grid(self):
        from .numerics import build_radial_grid
        return build_radial_grid(self.cfg.i("radial", "points"), self.cfg.f("radial", "extent"))

    def selfsim_setup(self):
        if "selfsim" not in self._cache:
            from .profiles import truncate
            from .selfsim import SelfSimGridSpec, build_frame, lift_background
            c = self.cfg
            rbar, ell = c.f("axisym", "rbar"), c.f("selfsim", "ell")
            spec = SelfSimGridSpec(h=c.f("selfsim", "h"), margin=c.f("selfsim", "margin"),
                                   far=c.f("selfsim", "far"), growth=c.f("selfsim", "growth"),
                                   order=c.i("selfsim", "order"))
            grid = spec.build(rbar, ell)
            frame = build_frame(grid)
            bg = lift_background(truncate(self.profile(), rbar), None, ell, grid, rbar=rbar)
            self._cache["selfsim"] = (spec, frame, bg)
        return self._cache["selfsim"]

    def lss(self):
        if "lss" not in self._cache:
            from .selfsim import assemble_Lvor
            _, frame, bg = self.selfsim_setup()
            self._cache["lss"] = assemble_Lvor(bg, self.cfg.f("selfsim", "beta"), frame)
        return self._cache["lss"]

    def eigenpair(self):
        from .manifold import normalise_eigenvector
        from .numerics import EigenPair
        from .selfsim import nearest_pair
        if "pair" not in self._cache:
            cert = self.need("semigroup")
            _, frame, _ = self.selfsim_setup()
            pr = nearest_pair(self.lss(), cert.complex("lambda"))
            eta = normalise_eigenvector(frame, pr.vector, self.cfg.i("manifold", "N"))
            scale = float(frame.norm(eta) / frame.norm(pr.vector))
            self._cache["pair"] = EigenPair(pr.value, eta, pr.residual * scale)
        return self._cache["pair"]

    # stages
    def stage_search2d(self) -> Certificate:
        from .euler2d import assemble_mode_operator, parallel_sweep, sweep_csv
        from .numerics import eigensolve
        c = self.cfg
        prof, grid = self.profile(), self.radial_grid()
        m = c.i("profile", "m")
        n_list = [m * k for k in range(1, c.i("profile", "harmonics") + 1)]
        rows = parallel_sweep(prof, n_list, grid, workers=self.workers)
        self.write("search2d.csv", sweep_csv(rows))
        n = c.i("profile", "n")
        mode = assemble_mode_operator(prof, n, grid)
        cloud = [p.value for p in eigensolve(mode.op, "dense").pairs]
        self.write("spectrum_cloud.dat", emit_plotdata("spectrum-cloud", cloud))
        unstable = [r for r in rows if np.isfinite(r.value.real) and r.value.real > 1e-8]
        chosen = [r for r in rows if r.n == n and np.isfinite(r.value.real)]
        if not unstable or not chosen or chosen[0].value.real <= 1e-8:
            return Certificate("search2d", False, {"n": n}, "no unstable eigenvalue")
        best = chosen[0]
        return Certificate("search2d", True, {"n": n, "lambda": best.value, "residual": best.residual,
                                              "unstable_modes": len(unstable)})

    def stage_truncate(self) -> Certificate:
        from .euler2d import truncation_continuation
        c = self.cfg
        self.need("search2d")
        R_list = c.floats("truncate", "R_list")
        lam_inf, rows = truncation_continuation(self.profile(), c.i("profile", "n"), R_list,
                                                self.radial_grid())
        lines = ["R,re_lambda,im_lambda,distance,rank,residual"]
        lines += [f"{r.R:g},{r.value.real:.12e},{r.value.imag:.12e},{r.distance:.6e},{r.rank},"
                  f"{r.residual:.3e}" for r in rows]
        self.write("truncate.csv", "\n".join(lines) + "\n")
        self.write("truncate_curve.dat",
                   emit_plotdata("sweep-curve", [(r.R, r.value, r.distance) for r in rows]))
        dist = [r.distance for r in rows]
        monotone = all(b < a for a, b in zip(dist, dist[1:]))
        ranks_ok = all(r.rank >= 1 for r in rows)
        vals = {"lambda_inf": lam_inf, "distances": dist, "ranks": [r.rank for r in rows]}
        if not (monotone and ranks_ok):
            return Certificate("truncate", False, vals,
                               "distance not decreasing" if not monotone else "Riesz rank zero")
        return Certificate("truncate", True, vals)

    def stage_axisym_sweep(self) -> Certificate:
        from .axisym import GridSpec, ell_continuation, fit_exponent, stream_convergence_study
        from .profiles import truncate
        c = self.cfg
        seed = self.need("search2d").complex("lambda")
        rbar = c.f("axisym", "rbar")
        trunc = truncate(self.profile(), rbar)
        spec = GridSpec(h=c.f("axisym", "h"), far=c.f("axisym", "far"))
        ells = c.floats("axisym", "ell_list")
        lam_inf, rows = ell_continuation(trunc, rbar, ells, spec, seed,
                                         with_rank=c.b("axisym", "rank"))
        finite = [r for r in rows if np.isfinite(r.ell)]
        lines = ["ell,re_lambda,im_lambda,distance,residual,s_norm,m_skew,rank,error"]
        lines += [f"{r.ell:g},{r.value.real:.12e},{r.value.imag:.12e},{r.distance:.6e},"
                  f"{r.residual:.3e},{r.s_norm:.6e},{r.m_skew:.3e},{r.rank},{r.error}" for r in rows]
        self.write("axisym.csv", "\n".join(lines) + "\n")
        self.write("axisym_curve.dat",
                   emit_plotdata("sweep-curve", [(r.ell, r.value, r.distance) for r in finite]))
        stream = stream_convergence_study(lambda r, z: trunc.omega(np.hypot(r, z)), rbar, ells, spec)
        self.write("stream.csv", "ell,grad_diff,scaled_psi\n" + "".join(
            f"{s.ell:g},{s.grad_diff:.6e},{s.scaled_psi:.6e}\n" for s in stream))
        if any(r.error for r in finite):
            return Certificate("axisym-sweep", False, {}, "eigensolver failure in ell sweep")
        s_exp = fit_exponent([r.ell for r in finite], [r.s_norm for r in finite])[0]
        psi_exp = fit_exponent([s.ell for s in stream], [s.scaled_psi for s in stream])[0]
        dist = [r.distance for r in finite]
        vals = {"lambda_inf": lam_inf, "distances": dist, "s_exponent": s_exp,
                "psi_exponent": psi_exp, "m_skew_max": max(r.m_skew for r in finite)}
        if not all(b < a for a, b in zip(dist, dist[1:])):
            return Certificate("axisym-sweep", False, vals, "distance not decreasing")
        return Certificate("axisym-sweep", True, vals)

    def stage_beta_sweep(self) -> Certificate:
        from .selfsim import beta_continuation, beta_sweep_csv
        c = self.cfg
        seed = self.need("axisym-sweep").complex("lambda_inf")
        _, frame, bg = self.selfsim_setup()
        lam_inf, rows = beta_continuation(bg, c.floats("selfsim", "beta_list"), seed, frame)
        self.write("beta_sweep.csv", beta_sweep_csv(rows))
        self.write("beta_curve.dat",
                   emit_plotdata("sweep-curve", [(r.beta, r.value, r.distance) for r in rows]))
        gaps = [r.gap for r in rows]
        dist = [r.distance for r in rows]
        vals = {"lambda_inf": lam_inf, "gaps": gaps, "distances": dist}
        if any(r.error for r in rows):
            return Certificate("beta-sweep", False, vals, "eigensolver failure in beta sweep")
        if not max(gaps) <= c.f("selfsim", "identity_tol"):
            return Certificate("beta-sweep", False, vals, "beta-layer identity gap above tolerance")
        if not all(b < a for a, b in zip(dist, dist[1:])):
            return Certificate("beta-sweep", False, vals, "distance not decreasing")
        return Certificate("beta-sweep", True, vals)

    def stage_semigroup(self) -> Certificate:
        from .selfsim import measure_growth_and_smoothing, random_probes, semigroup_mode
        c = self.cfg
        self.need("beta-sweep")
        _, frame, bg = self.selfsim_setup()
        beta = c.f("selfsim", "beta")
        mode = semigroup_mode(bg, beta, frame, c.f("semigroup", "ritz_tau"),
                              c.f("semigroup", "ritz_dt"), seed=c.i("run", "seed"))
        a = mode.tilde.real
        if not a > 0:
            return Certificate("semigroup", False, {"lambda": mode.tilde}, "no growing mode")
        probes = random_probes(frame, c.i("semigroup", "probes"), seed=c.i("semigroup", "seed"))
        window = (c.f("semigroup", "fit_start"), c.f("semigroup", "fit_end"))
        period = np.pi / abs(mode.tilde.imag) if mode.tilde.imag != 0 else None
        rep = measure_growth_and_smoothing(self.lss(), frame, probes, window, c.f("semigroup", "dt"),
                                           coarse_dt=c.f("semigroup", "coarse_dt"), short=0.05,
                                           damping=1.25 * a, period=period)
        expo = [f.exponent for f in rep.fits]
        traj = rep.trajectory
        ladder = np.sqrt(np.mean(traj.norms[:, 0, :] ** 2, axis=1))
        self.write("norm_ladder.dat", emit_plotdata("norm-ladder", (traj.times, traj.norms[:, :, 0])))
        self.write("growth.csv", "probe,exponent,residual\n" + "".join(
            f"{j},{f.exponent:.10e},{f.residual:.3e}\n" for j, f in enumerate(rep.fits)))
        worst = float(max(abs(e - a) for e in expo))
        vals = {"lambda": mode.tilde, "a": a, "lambda_beta": mode.value, "gap": mode.gap,
                "worst_exponent_error": worst, "final_rms_norm": float(ladder[-1]),
                "max_smoothing": float(np.max(rep.smoothing))}
        if worst > c.f("semigroup", "exponent_tol"):
            return Certificate("semigroup", False, vals, "growth exponent differs from spectral a")
        return Certificate("semigroup", True, vals)

    def stage_manifold(self) -> Certificate:
        from .manifold import build_Ulin, fixed_point, refined_decay_check
        c = self.cfg
        _, frame, _ = self.selfsim_setup()
        pair = self.eigenpair()
        a = pair.value.real
        N = c.i("manifold", "N")
        res = fixed_point(self.lss(), frame, pair, c.f("manifold", "T"), c.f("manifold", "dt"),
                          order=N, eps0=c.f("manifold", "eps0_factor") * a,
                          delta=c.f("manifold", "delta_factor") * a,
                          window_efolds=c.f("manifold", "window_efolds"),
                          max_iter=c.i("manifold", "max_iter"), tol=c.f("manifold", "tol"),
                          max_retries=c.i("manifold", "max_retries"),
                          stride=c.i("manifold", "stride"))
        rep = res.report
        lin = build_Ulin(frame, pair, res.per_weighted.times, eps0=rep.eps0, order=N)
        refined = refined_decay_check(res, lin)
        self.write("fixed_point.txt", rep.table())
        pw = res.per_weighted
        bound = np.exp((a + rep.eps0) * pw.times)
        self.write("manifold_norms.csv", "tau,per_HN,lin_HN,bound\n" + "".join(
            f"{t:.10e},{p:.10e},{q:.10e},{b:.10e}\n"
            for t, p, q, b in zip(pw.times, pw.norms, lin.norms, bound)))
        with open(self.out / "manifold_per.npy", "wb") as fh:
            np.save(fh, res.per)
        np.save(self.out / "manifold_times.npy", res.window.times)
        ratios_ok = all(r <= 0.5 for r in rep.ratios)
        vals = {"T": rep.T, "tau0": rep.tau0, "dt": rep.dt, "converged": rep.converged,
                "max_ratio": max(rep.ratios) if rep.ratios else 0.0,
                "x_norm": rep.x_norms[-1], "surrogate_sum": rep.surrogates.total,
                "tail_bound": rep.tail_bound, "bound_margin": float(np.max(pw.norms / bound)),
                "refined_exponent": refined.exponent, "refined_sup": refined.sup_scaled}
        self._cache["fixed_point"] = res
        if not rep.converged:
            raise ArithmeticError("fixed-point iteration did not converge")
        if not ratios_ok or vals["bound_margin"] > 1.0:
            return Certificate("manifold", False, vals, "contraction or bound check failed")
        return Certificate("manifold", True, vals)

    def stage_verify(self) -> Certificate:
        from . import physical as ph
        from .selfsim import SelfSimGridSpec, build_frame, lift_background
        from .profiles import truncate
        c = self.cfg
        self.need("manifold")
        spec, frame, bg = self.selfsim_setup()
        pair = self.eigenpair()
        beta = c.f("selfsim", "beta")
        per = np.load(self.out / "manifold_per.npy")
        times = np.load(self.out / "manifold_times.npy")
        stride = c.i("physical", "sample_stride")
        tau = times[stride:-1:stride]
        ubar = ph.background_velocity(bg, beta)
        force = ph.compute_force(frame, ubar)
        pair_fields = ph.assemble_pair(frame, ubar, pair, times, per, tau,
                                       provenance={"config": self.cfg.hash()})
        res_bar = ph.verify_residual(pair_fields, force, "ubar", samples=[0, len(tau) - 1])
        res_u = ph.verify_residual(pair_fields, force, "u", samples=[0, len(tau) // 2, len(tau) - 1])
        wrong = ph.verify_residual(pair_fields, force, "ubar", force_scale=1.1, samples=[0])
        e_bar = ph.energy_report(pair_fields, force, "ubar")
        e_u = ph.energy_report(pair_fields, force, "u")
        lp = ph.lp_bound_sweep(pair_fields, force)
        dist = ph.distinctness(pair_fields, pair.value)
        self.write("residual.csv", "t,field,residual,scale,divergence\n" + "".join(
            f"{r.t:.10e},{r.which},{r.residual:.6e},{r.scale:.6e},{r.divergence:.3e}\n"
            for r in res_bar + res_u))
        self.write("energy_ubar.csv", e_bar.csv())
        self.write("energy_u.csv", e_u.csv())
        self.write("lp_bounds.csv", ph.lp_csv(lp))
        self.write("distinctness.csv", "t,difference\n" + "".join(
            f"{t:.10e},{d:.10e}\n" for t, d in zip(dist.t, dist.difference)))
        vals = {"residual_ubar": max(r.relative for r in res_bar),
                "residual_u": max(r.relative for r in res_u),
                "negative_control": wrong[0].relative,
                "energy_gap_ubar": e_bar.relative_gap, "energy_gap_u": e_u.relative_gap,
                "ubar_l2_spread": ph.column_spread(lp, "ubar", 2.0, 0),
                "force_l2_spread": ph.column_spread(lp, "force", 2.0, 0),
                "distinctness_exponent": dist.exponent, "distinctness_expected": dist.expected,
                "distinctness_min": dist.minimum,
                "force_outside_mass": force.outside_mass}
        if c.b("physical", "refine_check"):
            fine_spec = SelfSimGridSpec(h=0.5 * spec.h, margin=spec.margin, far=spec.far,
                                        growth=spec.growth, order=spec.order)
            rbar, ell = c.f("axisym", "rbar"), c.f("selfsim", "ell")
            g2 = fine_spec.build(rbar, ell)
            fr2 = build_frame(g2)
            bg2 = lift_background(truncate(self.profile(), rbar), None, ell, g2, rbar=rbar)
            ub2 = ph.background_velocity(bg2, beta)
            tau2 = np.linspace(tau[0], tau[-1], 2 * len(tau) - 1)
            zero = np.zeros((len(tau2), 2, g2.size))
            fine_pair = ph.PhysicalSolutionPair(tau2, ub2, zero, zero, fr2)
            vals["energy_gap_ubar_fine"] = ph.energy_report(fine_pair, ph.compute_force(fr2, ub2),
                                                            "ubar").relative_gap
        self.write("verify_summary.txt", ph.summary_text(vals))
        ok = (vals["residual_ubar"] <= c.f("physical", "residual_tol")
              and vals["energy_gap_ubar"] <= c.f("physical", "energy_tol")
              and abs(dist.exponent - dist.expected) <= c.f("physical", "exponent_tol")
              and dist.minimum > 0)
        if "energy_gap_ubar_fine" in vals:
            ok = ok and vals["energy_gap_ubar_fine"] * 2 <= vals["energy_gap_ubar"]
        return Certificate("verify", ok, vals, "" if ok else "physical verification failed")

    def full(self, stop: str | None = None) -> list[tuple[str, str]]:
        report = []
        try:
            for stage in STAGES:
                self.need(stage)
                report.append((stage, "passed"))
                if stage == stop:
                    break
        finally:
            done = {s for s, _ in report}
            failed = [s for s in STAGES if s in self.certs and s not in done]
            for s in failed:
                report.append((s, f"failed: {self.certs[s].reason}"))
            self.write("stage_report.txt", "".join(f"{s} = {st}\n" for s, st in report))
        return report


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vortexlab", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="sectioned key = value file; defaults apply when omitted")
    p.add_argument("--stage", choices=STAGES, help="last stage of full-pipeline")
    p.add_argument("--workers", type=int, help="worker pool size for sweeps")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.from_file(args.config) if args.config else RunConfig.from_text("")
        if args.out:
            cfg.sections["run"]["out"] = args.out
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError("--workers must be at least 1")
            cfg.sections["run"]["workers"] = str(args.workers)
        if args.stage and args.command != "full-pipeline":
            raise ConfigError("--stage only applies to full-pipeline")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    pipe = Pipeline(cfg, Path(cfg.get("run", "out")), cfg.i("run", "workers"))
    (pipe.out / "config.ini").write_text(provenance_header(cfg) + cfg.to_text(placement=False))
    try:
        if args.command == "full-pipeline":
            pipe.full(args.stage)
        else:
            pipe.run(args.command)
    except StageFailure as exc:
        (pipe.out / "stage_failure.txt").write_text(
            provenance_header(cfg) + f"stage = {exc.stage}\nreason = {exc.reason}\n")
        print(f"stage failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (ConfigError, ProfileError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, ValueError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
