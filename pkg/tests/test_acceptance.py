"""Acceptance criteria 1 to 9 on the default configuration.

One default pipeline run is shared by the whole module; criteria read its
certificates and tables and add the checks that are not part of a stage.
Each test records a PASS/FAIL line that is printed in the terminal summary.
"""
import csv
import time
from pathlib import Path

import numpy as np
import pytest

from vortexlab.cli import STAGES, Certificate, Pipeline, RunConfig, StageFailure, main
from vortexlab.euler2d import assemble_mode_operator, green_stream, solve_stream_mode
from vortexlab.manifold import consistency_order
from vortexlab.numerics import eigensolve
from vortexlab.selfsim import (
    SelfSimGridSpec,
    assemble_Tbeta,
    build_frame,
    free_operator,
    heat_ring_norm,
    heat_ring_vorticity,
    propagate,
    random_probes,
    resolvent_norm,
    resolvent_part,
    short_time_smoothing,
)

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.ini"
# sharp constant of sup tau^{1/2} ||grad e^{tau Lap} f|| / ||f|| for the heat semigroup
HEAT_SMOOTHING = (2 * np.e) ** -0.5


class Run:
    def __init__(self, out: Path):
        self.pipe = Pipeline(RunConfig.from_text(""), out)
        self.seconds: dict[str, float] = {}
        self.failure: str | None = None
        for stage in STAGES:
            start = time.perf_counter()
            try:
                self.pipe.need(stage)
            except (StageFailure, ArithmeticError, ValueError, RuntimeError) as exc:
                self.failure = f"{stage}: {exc}"
                break
            finally:
                self.seconds[stage] = time.perf_counter() - start

    def cert(self, stage: str) -> Certificate:
        if stage not in self.pipe.certs:
            pytest.fail(f"stage {stage} did not complete ({self.failure})")
        return self.pipe.certs[stage]

    def floats(self, stage: str, key: str) -> list[float]:
        return [float(x) for x in self.cert(stage).values[key].split()]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    return Run(tmp_path_factory.mktemp("default"))


def _table(path: Path) -> list[dict]:
    """Rows of a pipeline CSV; the first line is the provenance comment."""
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# vortexlab")
    return list(csv.DictReader(lines[1:]))


def _decreasing(values) -> bool:
    return all(b < a for a, b in zip(values, values[1:]))


def test_criterion_1_mode_operators(run, acceptance_record):
    start = time.perf_counter()
    pipe = run.pipe
    prof, grid = pipe.profile(), pipe.radial_grid()
    zero = np.max(np.abs(assemble_mode_operator(prof, 0, grid).matrix))
    plus = np.sort_complex(eigensolve(assemble_mode_operator(prof, 4, grid).op).values)
    minus = np.sort_complex(eigensolve(assemble_mode_operator(prof, -4, grid).op).values.conj())
    conj_gap = float(np.max(np.abs(plus - minus)))
    green = 0.0
    for n in (1, 2, 3):
        g = lambda s, n=n: s ** n * np.exp(-s ** 2)
        sol = solve_stream_mode(n, g(grid.nodes), grid)
        sample = slice(None, None, 8)
        green = max(green, float(np.max(np.abs(sol.f[sample] - green_stream(n, g, grid.nodes[sample])))))
    seconds = time.perf_counter() - start
    ok = zero == 0.0 and conj_gap <= 1e-8 and green <= 1e-6 and seconds < 60
    acceptance_record(1, ok, f"|A0|={zero:.1e} conj_gap={conj_gap:.2e} green_err={green:.2e} "
                             f"time={seconds:.0f}s")
    assert ok


def test_criterion_2_truncation(run, acceptance_record):
    dist = run.floats("truncate", "distances")
    ranks = [int(x) for x in run.cert("truncate").values["ranks"].split()]
    seconds = run.seconds["search2d"] + run.seconds["truncate"]
    ok = len(dist) == 3 and _decreasing(dist) and min(ranks) >= 1 and seconds < 600
    acceptance_record(2, ok, f"distances={['%.2e' % d for d in dist]} ranks={ranks} time={seconds:.0f}s")
    assert ok


def test_criterion_3_axisym_smallness(run, acceptance_record):
    cert = run.cert("axisym-sweep")
    expo = cert.float("s_exponent")
    dist = run.floats("axisym-sweep", "distances")
    skew = cert.float("m_skew_max")
    seconds = run.seconds["axisym-sweep"]
    ok = expo <= -1 / 3 + 0.05 and _decreasing(dist) and skew <= 1e-8 and seconds < 1800
    acceptance_record(3, ok, f"s_exponent={expo:.3f} distances={['%.2e' % d for d in dist]} "
                             f"m_skew={skew:.1e} time={seconds:.0f}s")
    assert ok


def test_criterion_4_stream_convergence(run, acceptance_record):
    expo = run.cert("axisym-sweep").float("psi_exponent")
    table = _table(run.pipe.out / "stream.csv")
    ok = expo <= -1 / 6 + 0.05 and len(table) == 4 and run.seconds["axisym-sweep"] < 1800
    acceptance_record(4, ok, f"psi_exponent={expo:.3f}")
    assert ok


def test_criterion_5_beta_layer(run, acceptance_record):
    cert = run.cert("beta-sweep")
    gaps = run.floats("beta-sweep", "gaps")
    dist = run.floats("beta-sweep", "distances")
    start = time.perf_counter()
    _, frame, bg = run.pipe.selfsim_setup()
    op = assemble_Tbeta(bg, run.pipe.cfg.f("selfsim", "beta"), frame)
    part = resolvent_part(op)
    margins = []
    for lam in (op.mu + 0.5, op.mu + 2.0 + 1.0j):
        margins.append(resolvent_norm(part, lam) * (lam.real - op.mu))
    seconds = run.seconds["beta-sweep"] + time.perf_counter() - start
    ok = (len(gaps) == 4 and max(gaps) <= 1e-8 and _decreasing(dist)
          and max(margins) <= 1 + 1e-6 and seconds < 1800)
    acceptance_record(5, ok, f"max_gap={max(gaps):.1e} distances={['%.2e' % d for d in dist]} "
                             f"resolvent_margin={max(margins):.6f} time={seconds:.0f}s")
    assert ok and cert.passed


def test_criterion_6_semigroup(run, acceptance_record):
    cert = run.cert("semigroup")
    start = time.perf_counter()
    free = build_frame(SelfSimGridSpec(h=0.1, far=30.0).build_centered(8.0))
    traj = propagate(free_operator(free), free, heat_ring_vorticity(free), 2.0, 0.005, save_every=20)
    heat_err = float(np.max(np.abs(traj.norms[:, 0] / heat_ring_norm(traj.times) - 1)))
    _, frame, _ = run.pipe.selfsim_setup()
    a = cert.float("a")
    probes = random_probes(frame, 5, rough=True, seed=run.pipe.cfg.i("semigroup", "seed"))
    smooth = short_time_smoothing(run.pipe.lss(), frame, probes, 0.05, run.pipe.cfg.f("semigroup", "dt"),
                                  damping=1.25 * a)
    worst = cert.float("worst_exponent_error")
    seconds = run.seconds["semigroup"] + time.perf_counter() - start
    ok = (heat_err <= 1e-4 and worst <= 0.05 and np.all(np.isfinite(smooth))
          and smooth.max() <= HEAT_SMOOTHING and seconds < 1200)
    acceptance_record(6, ok, f"heat_err={heat_err:.1e} exponent_err={worst:.4f} "
                             f"max_smoothing={smooth.max():.3f} time={seconds:.0f}s")
    assert ok


def test_criterion_7_fixed_point(run, acceptance_record):
    cert = run.cert("manifold")
    res = run.pipe._cache.get("fixed_point")
    if res is None:
        pytest.fail("fixed-point result not available in this session")
    pair = run.pipe.eigenpair()
    a = pair.value.real
    rep = res.report
    start = time.perf_counter()
    w = res.window.times
    taus = [w[len(w) // 4], w[len(w) // 2], w[3 * len(w) // 4]]
    r1, r2, ratios = consistency_order(run.pipe.lss(), res.window.frame, pair, res, taus,
                                       stride=run.pipe.cfg.i("manifold", "stride"))
    orders = np.log2(ratios)
    seconds = run.seconds["manifold"] + time.perf_counter() - start
    ok = (rep.eps0 == pytest.approx(a / 2) and rep.delta == pytest.approx(a / 4)
          and cert.float("max_ratio") <= 0.5 and cert.float("bound_margin") <= 1.0
          and cert.float("refined_exponent") >= 2 * a - 0.1
          and np.all(np.abs(orders - 2.0) <= 0.25) and seconds < 7200)
    acceptance_record(7, ok, f"max_ratio={cert.float('max_ratio'):.1e} "
                             f"bound_margin={cert.float('bound_margin'):.2e} "
                             f"refined={cert.float('refined_exponent'):.3f} (2a={2 * a:.3f}) "
                             f"orders={np.round(orders, 2).tolist()} time={seconds:.0f}s")
    assert ok


def test_criterion_8_physical(run, acceptance_record):
    cert = run.cert("verify")
    columns: dict[tuple, list[float]] = {}
    for row in _table(run.pipe.out / "lp_bounds.csv"):
        if row["field"] in ("ubar", "force"):
            columns.setdefault((row["field"], row["p"], row["k"]), []).append(float(row["value"]))
    spread = max(max(c) / min(c) - 1 for c in columns.values())
    residual = cert.float("residual_ubar")
    control = cert.float("negative_control")
    gap, fine = cert.float("energy_gap_ubar"), cert.float("energy_gap_ubar_fine")
    expo, expected = cert.float("distinctness_exponent"), cert.float("distinctness_expected")
    seconds = run.seconds["verify"]
    ok = (residual <= run.pipe.cfg.f("physical", "residual_tol") and control > 1e3 * max(residual, 1e-13)
          and gap <= 1e-3 and 2 * fine <= gap and spread <= 1e-6
          and abs(expo - expected) <= 0.05 and seconds < 1800)
    acceptance_record(8, ok, f"residual={residual:.1e} control={control:.1e} energy_gap={gap:.1e} "
                             f"fine={fine:.1e} spread={spread:.1e} exponent={expo:.4f} "
                             f"(a+1/4={expected:.4f}) time={seconds:.0f}s")
    assert ok


def _snapshot(directory: Path) -> dict[str, bytes]:
    return {p.relative_to(directory).as_posix(): p.read_bytes()
            for p in sorted(directory.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(tmp_path, acceptance_record):
    outs = [tmp_path / "first", tmp_path / "second"]
    codes = [main(["full-pipeline", "--config", str(SMOKE), "--out", str(o)]) for o in outs]
    first, second = (_snapshot(o) for o in outs)
    differing = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    ok = codes == [0, 0] and not differing and len(first) > 10
    acceptance_record(9, ok, f"exit={codes} files={len(first)} differing={differing}")
    assert ok
