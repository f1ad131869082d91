"""Verification harnesses driven by an :class:`ExperimentConfig`.

Every harness writes its CSV tables (and SVG charts) into the output
directory and returns a :class:`Summary` whose checks are also written to
``summary_<name>.csv``, so each reported number traces to a CSV row.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import report
from .bbflow import recovery_sequence, w2_distance
from .config import vanishing_regularization_ok
from .density import SpacetimeDensity, gaussian_blob, jump_blobs, moving_blob
from .errors import ConfigError
from .forward import bin_events, simulate_listmode
from .geometry import PartitionHierarchy, ProductPartition
from .ppp import RATE_COLUMNS, IntensityMeasure, flat_upper_bound, rate_experiment, sample_independent
from .reconstruct import ReconProblem, SolverParams, energy_limit, minimize_map
from .rng import stream

log = logging.getLogger(__name__)

EXPERIMENTS = ("ppp-rate", "flat-rate", "recovery", "simulate", "reconstruct", "gamma-study")

RECOVERY_COLUMNS = ("n", "delta", "k", "eps", "S", "S_times_delta", "w2", "w2_over_delta16", "S_grid")
FLAT_COLUMNS = ("n", "q", "K", "s", "seed", "flat_bound")
SIMULATE_COLUMNS = ("seed", "q", "events", "expected")
TRACE_COLUMNS = ("iter", "total", "mass", "data", "reg")
RECON_COLUMNS = ("seed", "q", "beta", "u", "N", "M", "total", "mass", "data", "reg",
                 "iterations", "stalled", "stationarity", "rel_l1", "w2")
GAMMA_COLUMNS = ("n", "q", "beta", "u", "N", "M", "seed", "energy", "limit_energy", "gap",
                 "w2", "rel_l1", "iterations", "stalled")
SUMMARY_COLUMNS = ("check", "passed", "value", "threshold")


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def __post_init__(self):
        self.passed = bool(self.passed)
        self.value = float(self.value)
        self.threshold = float(self.threshold)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.detail}"


@dataclass
class Summary:
    which: str
    checks: list = field(default_factory=list)
    artifacts: list = field(default_factory=list)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def lines(self):
        return [c.line() for c in self.checks]


def _pmap(fn, tasks, workers):
    """Ordered map, fanned out to processes when ``workers > 1``."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, tasks))


def _median_by(rows, key, value):
    keys = sorted({r[key] for r in rows})
    return keys, [float(np.median([r[value] for r in rows if r[key] == k])) for k in keys]


def _strictly_decreasing(v):
    return bool(np.all(np.diff(v) < 0))


def _finish(summary, out):
    rows = [{"check": c.name, "passed": c.passed, "value": c.value, "threshold": c.threshold}
            for c in summary.checks]
    summary.artifacts.append(str(report.write_csv(out / f"summary_{summary.which}.csv", rows, SUMMARY_COLUMNS)))
    return summary


def ground_truth(cfg, geometry=None):
    geometry = cfg.geometry.build() if geometry is None else geometry
    gt = cfg.ground_truth
    grid = geometry.grid()
    if gt.kind == "moving_blob":
        return moving_blob(grid, geometry.nt, gt.start, gt.end, gt.sigma, geometry.T_horizon, gt.mass)
    if gt.kind == "static_blob":
        f = gt.mass * gaussian_blob(grid, gt.start, gt.sigma)
        return SpacetimeDensity(np.repeat(f[None], geometry.nt + 1, axis=0), grid, geometry.T_horizon)
    return jump_blobs(grid, geometry.nt, gt.start, gt.end, gt.sigma, gt.t_jump * geometry.T_horizon,
                      geometry.T_horizon, gt.mass)


# -- PPP rates --------------------------------------------------------------------

def run_ppp_rate(cfg, out):
    qs = cfg.sequences.get("q")
    n_levels = len(qs) if qs is not None else 10
    ns = list(range(1, n_levels + 1))
    qs = qs or [4.0 ** n for n in ns]
    rs = cfg.sequences.get("r") or [n * 2.0 ** (-n / 2) for n in ns]
    if len(rs) != len(qs):
        raise ConfigError("r must have the same length as q", "sequences.r")
    lam = IntensityMeasure.lebesgue()
    parts = [ProductPartition((np.linspace(0.0, 1.0, 2 ** n + 1),)) for n in ns]
    regime = cfg.partitions.regime
    rows = rate_experiment(lam, qs, parts, rs, cfg.seeds, regime=regime, ns=ns)
    s = Summary("ppp-rate")
    s.artifacts.append(str(report.write_csv(out / "rate.csv", rows, RATE_COLUMNS)))
    n_keys, med = _median_by(rows, "n", "Z_over_r")
    _, medZ = _median_by(rows, "n", "Z")
    s.artifacts.append(str(report.svg_loglog(out / "rate.svg", {"median Z": (qs, medZ), "median Z/r": (qs, med)},
                                             "Partition discrepancy", "q", "Z")))
    tail = [m for n, m in zip(n_keys, med) if n >= min(4, n_keys[-1])]
    dec = _strictly_decreasing(tail)
    s.checks.append(Check("median Z/r strictly decreasing for n >= 4", dec, float(len(tail)), 0.0,
                          "medians " + ", ".join(f"{m:.4g}" for m in tail)))
    s.checks.append(Check("final median Z/r < 1", med[-1] < 1.0, med[-1], 1.0, f"{med[-1]:.4g} < 1"))
    slope = report.loglog_slope(qs, medZ)
    s.checks.append(Check("fitted slope of median Z against q", np.isfinite(slope), slope, 0.0, f"{slope:.4f}"))
    return _finish(s, out)


def run_flat_rate(cfg, out):
    a = cfg.assouad_a
    qs = cfg.sequences.get("q") or [10.0 ** n for n in range(2, 7)]
    lam = IntensityMeasure.lebesgue()
    rows = []
    for seed in cfg.seeds:
        for n, q in enumerate(qs, start=1):
            s_n = q ** (-1.0 / (a + 2))
            K = int(np.ceil(1.0 / s_n))
            part = ProductPartition((np.linspace(0.0, 1.0, K + 1),))
            E = sample_independent(lam, q, seed, "flat", n)
            rows.append({"n": n, "q": float(q), "K": K, "s": 1.0 / K, "seed": seed,
                         "flat_bound": flat_upper_bound(E, q, lam, part)})
    s = Summary("flat-rate")
    s.artifacts.append(str(report.write_csv(out / "flat.csv", rows, FLAT_COLUMNS)))
    _, med = _median_by(rows, "n", "flat_bound")
    qv = sorted({r["q"] for r in rows})
    slope = report.loglog_slope(qv, med)
    target = -1.0 / (a + 2)
    s.artifacts.append(str(report.svg_loglog(out / "flat.svg", {"median bound": (qv, med),
                                                               "q^(-1/(a+2))": (qv, [q ** target for q in qv])},
                                             "Flat distance bound", "q", "bound")))
    s.checks.append(Check("flat-rate slope", slope <= target + 0.05, slope, target + 0.05,
                          f"slope {slope:.4f} <= {target + 0.05:.4f}"))
    return _finish(s, out)


# -- recovery sequence ---------------------------------------------------------------

def run_recovery(cfg, out):
    geo = cfg.geometry.build()
    rho = ground_truth(cfg, geo)
    deltas = cfg.sequences.get("delta") or [10.0 ** -n for n in range(1, 7)]
    entries = recovery_sequence(rho, deltas)
    rows = []
    for n, e in enumerate(entries, start=1):
        rows.append({"n": n, "delta": e.delta, "k": e.k, "eps": e.eps, "S": e.S, "S_times_delta": e.S * e.delta,
                     "w2": e.w2, "w2_over_delta16": e.w2 / e.delta ** (1 / 6), "S_grid": e.S_grid})
    s = Summary("recovery")
    s.artifacts.append(str(report.write_csv(out / "recovery.csv", rows, RECOVERY_COLUMNS)))
    d = [r["delta"] for r in rows]
    s.artifacts.append(str(report.svg_loglog(out / "recovery.svg",
                                             {"S delta": (d, [r["S_times_delta"] for r in rows]),
                                              "w2": (d, [r["w2"] for r in rows])},
                                             "Recovery sequence", "delta", "value")))
    worst = max(r["S_times_delta"] for r in rows)
    s.checks.append(Check("S_n delta_n <= 1.05", worst <= 1.05, worst, 1.05, f"max {worst:.4g}"))
    C = rows[0]["w2_over_delta16"]
    ratio = max(r["w2_over_delta16"] for r in rows[1:]) / C if len(rows) > 1 and C > 0 else 1.0
    s.checks.append(Check("w2_n <= 2 C delta_n^(1/6)", ratio <= 2.0, ratio, 2.0,
                          f"C = {C:.4g}, worst ratio {ratio:.4g}"))
    return _finish(s, out)


# -- simulation and reconstruction ---------------------------------------------------

def _simulate(rho, q, geo, probs, seed, *keys):
    return simulate_listmode(rho, q, geo, probs, stream(seed, "simulate", *keys))


def run_simulate(cfg, out):
    geo = cfg.geometry.build()
    probs = cfg.probabilities.build()
    rho = ground_truth(cfg, geo)
    q = (cfg.sequences.get("q") or [1e3])[0]
    expected = q * probs.observed * rho.total_mass
    rows = []
    s = Summary("simulate")
    for seed in cfg.seeds:
        ev = _simulate(rho, q, geo, probs, seed)
        s.artifacts.append(str(report.write_listmode(out / f"listmode_seed{seed}.csv", ev)))
        rows.append({"seed": seed, "q": q, "events": len(ev), "expected": expected})
    s.artifacts.append(str(report.write_csv(out / "simulate.csv", rows, SIMULATE_COLUMNS)))
    mean = float(np.mean([r["events"] for r in rows]))
    sd = np.sqrt(expected / len(rows))
    z = abs(mean - expected) / sd
    s.checks.append(Check("mean event count within 3 sigma of q (p_s + p_d) |rho|", z <= 3.0, z, 3.0,
                          f"mean {mean:.1f}, expected {expected:.1f}, z = {z:.2f}"))
    return _finish(s, out)


def _levels(cfg, n_levels):
    p = cfg.partitions
    geo = cfg.geometry
    h = PartitionHierarchy.dyadic(geo.T_horizon, geo.R_scan, n_levels, p.n_time0, p.n_arc0,
                                  refine_time=p.case in ("C", "D"), refine_arcs=p.case in ("B", "D"))
    return [h.level(n) for n in range(n_levels)]


def _solver_params(cfg):
    sp = cfg.solver
    return SolverParams(max_iter=sp.max_iter, rtol=sp.rtol, window=sp.window, check_every=sp.check_every)


def slice_w2(grid, a, b):
    """Mean ``W_2`` between unit-mass normalizations of matching node slices."""
    vals = []
    for x, y in zip(a.slices, b.slices):
        mx, my = grid.mass(x), grid.mass(y)
        vals.append(w2_distance(grid, x / mx, y / my) if mx > 0 and my > 0 else np.inf)
    return float(np.mean(vals))


def rel_l1(a, b):
    return float(np.abs(a.slices - b.slices).sum() / np.abs(b.slices).sum())


def _reconstruct_task(task):
    cfg, seed, n, q, beta, u, level = task
    geo = cfg.geometry.build()
    probs = cfg.probabilities.build()
    rho = ground_truth(cfg, geo)
    ev = _simulate(rho, q, geo, probs, seed, n)
    counts = bin_events(ev, level)
    prob = ReconProblem(counts, q, u, beta, level, geo, probs)
    res = minimize_map(prob, params=_solver_params(cfg))
    return res, rel_l1(res.rho, rho), slice_w2(geo.grid(), res.rho, rho)


def run_reconstruct(cfg, out):
    q = (cfg.sequences.get("q") or [1e5])[0]
    beta = (cfg.sequences.get("beta") or [1e-2])[0]
    u = (cfg.sequences.get("u") or [1.0])[0]
    level = _levels(cfg, cfg.partitions.levels)[-1]
    tasks = [(cfg, seed, 0, q, beta, u, level) for seed in cfg.seeds]
    results = _pmap(_reconstruct_task, tasks, cfg.workers)
    rows = []
    s = Summary("reconstruct")
    for seed, (res, l1, w2) in zip(cfg.seeds, results):
        s.artifacts.append(str(report.write_csv(out / f"trace_seed{seed}.csv", res.trace, TRACE_COLUMNS)))
        s.artifacts.append(str(report.write_density(out / f"density_seed{seed}.csv", res.rho.slices)))
        rows.append({"seed": seed, "q": q, "beta": beta, "u": u, "N": level.N, "M": level.M,
                     **res.energy.as_row(), "iterations": res.iterations, "stalled": res.stalled,
                     "stationarity": res.stationarity, "rel_l1": l1, "w2": w2})
    s.artifacts.append(str(report.write_csv(out / "reconstruct.csv", rows, RECON_COLUMNS)))
    stalled = sum(r["stalled"] for r in rows)
    s.checks.append(Check("solver converged for every seed", stalled == 0, float(stalled), 0.0,
                          f"{stalled} of {len(rows)} stalled"))
    return _finish(s, out)


def run_gamma_study(cfg, out):
    qs = cfg.sequences.get("q") or [1e3, 1e4, 1e5]
    n_levels = len(qs)
    betas = cfg.sequences.get("beta") or [q ** -0.5 for q in qs]
    us = cfg.sequences.get("u") or [1.0] * n_levels
    if not len(betas) == len(us) == n_levels:
        raise ConfigError("beta and u must have the same length as q", "sequences")
    levels = _levels(cfg, n_levels)
    vanishing_regularization_ok(qs, betas, [lv.N for lv in levels])
    geo = cfg.geometry.build()
    probs = cfg.probabilities.build()
    rho = ground_truth(cfg, geo)
    limit = energy_limit(rho, rho, 1.0, cfg.partitions.case, levels[-1], geo, probs).total
    tasks = [(cfg, seed, n, qs[n], betas[n], us[n], levels[n]) for n in range(n_levels) for seed in cfg.seeds]
    results = _pmap(_reconstruct_task, tasks, cfg.workers)
    rows = []
    for (c, seed, n, q, beta, u, lv), (res, l1, w2) in zip(tasks, results):
        e = res.energy.total
        rows.append({"n": n + 1, "q": q, "beta": beta, "u": u, "N": lv.N, "M": lv.M, "seed": seed,
                     "energy": e, "limit_energy": limit, "gap": abs(e - limit), "w2": w2, "rel_l1": l1,
                     "iterations": res.iterations, "stalled": res.stalled})
    rows.sort(key=lambda r: (r["seed"], r["n"]))
    s = Summary("gamma-study")
    s.artifacts.append(str(report.write_csv(out / "gamma.csv", rows, GAMMA_COLUMNS)))
    _, w2m = _median_by(rows, "n", "w2")
    _, gapm = _median_by(rows, "n", "gap")
    s.artifacts.append(str(report.svg_loglog(out / "gamma.svg", {"median W2": (qs, w2m), "median gap": (qs, gapm)},
                                             "Minimizers against the ground truth", "q", "value")))
    s.checks.append(Check("median slice W2 strictly decreasing", _strictly_decreasing(w2m), w2m[-1], w2m[0],
                          "medians " + ", ".join(f"{v:.4g}" for v in w2m)))
    s.checks.append(Check("median energy gap strictly decreasing", _strictly_decreasing(gapm), gapm[-1], gapm[0],
                          "medians " + ", ".join(f"{v:.4g}" for v in gapm)))
    return _finish(s, out)


_RUNNERS = {
    "ppp-rate": run_ppp_rate,
    "flat-rate": run_flat_rate,
    "recovery": run_recovery,
    "simulate": run_simulate,
    "reconstruct": run_reconstruct,
    "gamma-study": run_gamma_study,
}


def run_experiment(cfg, which, out=None, seeds=None):
    """Run one harness; ``out`` and ``seeds`` override the config."""
    if which not in _RUNNERS:
        raise ConfigError(f"unknown experiment {which!r}; choose from {', '.join(EXPERIMENTS)}", "which")
    if seeds is not None:
        if not seeds:
            raise ConfigError("at least one seed is required", "seeds")
        cfg = cfg.model_copy(update={"seeds": list(seeds)})
    out = Path(out if out is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    log.info("running %s into %s", which, out)
    return _RUNNERS[which](cfg, out)
