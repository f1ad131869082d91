"""Fast self-check of every module on cases with known answers.

Runs in a few seconds, draws randomness only from fixed seeds and reports
no timings, so two runs give byte-identical reports.
"""
import tempfile
from pathlib import Path

import numpy as np

from . import report
from .bbflow import Momentum, bb_energy, continuity_residual, min_momentum, w2_distance
from .config import parse_config
from .density import SpacetimeDensity, gaussian_blob
from .errors import ConfigError
from .experiments import SUMMARY_COLUMNS, Check, Summary, run_experiment
from .forward import (Probabilities, binned_forward, estimate_g, forward_detect_pairs,
                      kernel_for, positron_convolve, xray_transform)
from .geometry import (GeometryConfig, Level, ProductPartition, chord_endpoints,
                       chord_params, dyadic_refine, locate)
from .ppp import (CoupledSamplerState, IntensityMeasure, PointMeasure, coupled_extend,
                  discrepancy_Z, flat_upper_bound, sample_independent)
from .reconstruct import (ReconProblem, energy_discrete, energy_limit, equicoercivity_bound,
                          expected_counts, injectivity_matrix)

PI = np.pi
GEO = GeometryConfig(grid_n=16, nt=2)


def _close(a, b, tol):
    return bool(np.all(np.abs(np.asarray(a, float) - np.asarray(b, float)) <= tol))


def _static(geo, center=(0.1, 0.0), sigma=0.15):
    f = gaussian_blob(geo.grid(), center, sigma)
    return SpacetimeDensity(np.repeat(f[None], geo.nt + 1, axis=0), geo.grid(), geo.T_horizon)


# -- geometry ---------------------------------------------------------------------

def _diameter():
    a, b = chord_endpoints(np.zeros(2), np.array([1.0, 0.0]), 1.0)
    return _close([a, b], [PI, 0.0], 1e-12)


def _off_centre():
    a, b = chord_endpoints(np.array([0.0, 0.5]), np.array([1.0, 0.0]), 1.0)
    pa = np.array([np.cos(a), np.sin(a)])
    pb = np.array([np.cos(b), np.sin(b)])
    return _close([pa, pb], [[-np.sqrt(0.75), 0.5], [np.sqrt(0.75), 0.5]], 1e-12)


def _chord_params():
    h = chord_params(PI, 0.0, 1.0)
    v = chord_params(PI / 2, 3 * PI / 2, 1.0)
    return (_close(h.theta, [1.0, 0.0], 1e-12) and _close(h.s, [0.0, 0.0], 1e-12)
            and _close(v.theta, [0.0, -1.0], 1e-12) and _close(v.s, [0.0, 0.0], 1e-12))


def _dyadic():
    e = np.array([0.0, 1.0])
    first = dyadic_refine(e)
    for _ in range(10):
        e = dyadic_refine(e)
    return _close(first, [0.0, 0.5, 1.0], 0) and len(e) == 1025 and _close(np.diff(e), 2.0 ** -10, 1e-15)


def _half_open():
    edges = np.array([0.0, 0.25, 0.5, 1.0])
    return int(locate(0.0, edges)) == 0 and int(locate(0.25, edges)) == 1


# -- ppp --------------------------------------------------------------------------

def _zero_intensity():
    lam = IntensityMeasure(ProductPartition((np.array([0.0, 1.0]),)), np.array([0.0]))
    return len(sample_independent(lam, 100.0, 0)) == 0


def _coupled():
    st = CoupledSamplerState(IntensityMeasure.lebesgue(), seed=3)
    small = coupled_extend(st, 1e3).points.copy()
    same = coupled_extend(st, 1e3).points
    big = coupled_extend(st, 1e4).points
    return np.array_equal(small, same) and np.array_equal(big[:len(small)], small)


def _exact_counts():
    part = ProductPartition((np.linspace(0.0, 1.0, 5),))
    lam = IntensityMeasure.lebesgue()
    E = PointMeasure(np.repeat([0.125, 0.375, 0.625, 0.875], 2))
    empty = PointMeasure(np.zeros((0, 1)))
    s = part.max_diameter()
    return (discrepancy_Z(E, 8.0, lam, part) == 0.0
            and flat_upper_bound(E, 8.0, lam, part) == s
            and discrepancy_Z(empty, 8.0, lam, part) == 1.0
            and flat_upper_bound(empty, 8.0, lam, part) == s + 1.0)


# -- forward ----------------------------------------------------------------------

def _convolution():
    grid = GEO.grid()
    kern = kernel_for(GEO)
    f = gaussian_blob(grid, (0.1, -0.1), 0.1)
    out = positron_convolve(grid, f, kern)
    zero = positron_convolve(grid, np.zeros_like(f), kern)
    return not zero.any() and abs(grid.mass(out) - grid.mass(f)) <= 1e-6 * grid.mass(f)


def _chord_length():
    grid = GeometryConfig(grid_n=128).grid()
    f = (grid.radius <= grid.R_dom).astype(float)
    through = float(xray_transform(grid, f, np.array([1.0, 0.0]), np.zeros(2)))
    miss = float(xray_transform(grid, f, np.array([1.0, 0.0]), np.array([0.0, 0.84])))
    return abs(through - 2 * grid.R_dom) <= 0.01 * 2 * grid.R_dom and miss == 0.0


def _pairs_mass():
    grid = GEO.grid()
    arcs = np.linspace(0.0, 2 * PI, 17)
    f = gaussian_blob(grid, (0.0, 0.1), 0.12)
    out = forward_detect_pairs(grid, f, arcs, kernel_for(GEO), GEO.R_scan)
    zero = forward_detect_pairs(grid, np.zeros_like(f), arcs, kernel_for(GEO), GEO.R_scan)
    return not zero.any() and abs(out.sum() - grid.mass(f)) <= 1e-3


def _zero_forward():
    level = Level(np.linspace(0, 1, 3), np.linspace(0, 2 * PI, 9), GEO.R_scan)
    rho = _static(GEO).scaled(0.0)
    return not binned_forward(rho, level, 1.0, Probabilities(), GEO).values.any()


def _gtable_cache():
    # a damaged cache file is rebuilt on load
    g = estimate_g(GEO, resolution=16, n_samples=2 ** 14, seed=0)
    return bool(np.all(np.isfinite(g.values))) and g.max_value > 0


# -- bbflow -----------------------------------------------------------------------

def _static_flow():
    rho = _static(GEO)
    n = GEO.grid_n
    eta = Momentum.zeros(GEO.nt, n)
    _, res = continuity_residual(rho, eta)
    mm = min_momentum(rho)
    return res == 0.0 and bb_energy(rho, eta).value == 0.0 and mm.value <= 1e-12


def _bb_scaling():
    grid = GEO.grid()
    a = gaussian_blob(grid, (-0.1, 0.0), 0.12)
    b = gaussian_blob(grid, (0.1, 0.0), 0.12)
    rho = SpacetimeDensity(np.stack([a, 0.5 * (a + b), b]), grid)
    eta = min_momentum(rho).momentum
    e1 = bb_energy(rho, eta).value
    e2 = bb_energy(rho, eta.scaled(2.0)).value
    return np.isfinite(e1) and e1 > 0 and abs(e2 - 4 * e1) <= 1e-12 * e2


def _w2():
    grid = GEO.grid()
    mu = gaussian_blob(grid, (0.0, 0.0), 0.12)
    a = np.zeros((grid.n, grid.n))
    b = np.zeros((grid.n, grid.n))
    a[5, 8] = b[10, 8] = 1.0 / grid.cell_area
    return w2_distance(grid, mu, mu) <= 1e-9 and abs(w2_distance(grid, a, b) - 5 * grid.h) <= 1e-9


# -- reconstruct ------------------------------------------------------------------

def _level():
    return Level(np.linspace(0, 1, 3), np.linspace(0, 2 * PI, 9), GEO.R_scan)


def _zero_counts():
    level = _level()
    rho = _static(GEO)
    pr = Probabilities()
    prob = ReconProblem(np.zeros((level.N, level.M, level.M)), 10.0, 1.0, 0.5, level, GEO, pr)
    e = energy_discrete(rho, prob)
    return abs(e.total - pr.observed * rho.total_mass) <= 1e-12 and e.data_term == 0.0


def _homogeneity():
    level = _level()
    rho = _static(GEO)
    E = expected_counts(rho, level, GEO, Probabilities(), q=100.0)
    one = energy_discrete(rho, ReconProblem(E, 100.0, 1.0, 0.0, level, GEO))
    two = energy_discrete(rho, ReconProblem(2 * E, 200.0, 1.0, 0.0, level, GEO))
    return abs(one.data_term - two.data_term) <= 1e-12 * abs(one.data_term)


def _not_conserving():
    rho = _static(GEO)
    s = rho.slices.copy()
    s[-1] *= 1.5
    return np.isinf(energy_limit(SpacetimeDensity(s, rho.grid), rho, 1.0, "D", _level(), GEO, refine=0).total)


def _empty_coercive():
    level = _level()
    prob = ReconProblem(np.zeros((level.N, level.M, level.M)), 1.0, 1.0, 0.0, level, GEO)
    kappa = equicoercivity_bound(prob)
    rho = _static(GEO).scaled(3.0)
    return kappa == max(1.0 / prob.probs.observed, prob.operator.scatter_constant) and \
        energy_discrete(rho, prob).total >= rho.total_mass / kappa


def _single_cell():
    A = injectivity_matrix(GEO, np.linspace(0, 2 * PI, 17)).tocsc()
    return float(np.linalg.norm(A[:, A.shape[1] // 2].toarray())) > 0


# -- cli --------------------------------------------------------------------------

def _empty_seeds():
    try:
        parse_config({"seeds": []})
    except ConfigError as e:
        return e.path == "seeds"
    return False


def _ppp_rows():
    with tempfile.TemporaryDirectory() as tmp:
        cfg = parse_config({"seeds": [0, 1]})
        s = run_experiment(cfg, "ppp-rate", out=tmp)
        rows = report.read_csv(Path(tmp) / "rate.csv")
        return len(rows) == 10 * 2 and any("slope" in c.name for c in s.checks)


CHECKS = (
    ("geometry: diameter through the centre", _diameter),
    ("geometry: off-centre chord endpoints", _off_centre),
    ("geometry: chord parameters of diameters", _chord_params),
    ("geometry: dyadic refinement", _dyadic),
    ("geometry: half-open cells", _half_open),
    ("ppp: zero intensity gives no points", _zero_intensity),
    ("ppp: coupled samples are nested", _coupled),
    ("ppp: exact and empty counts", _exact_counts),
    ("forward: convolution keeps mass", _convolution),
    ("forward: chord length through the disk", _chord_length),
    ("forward: pair masses sum to slice mass", _pairs_mass),
    ("forward: zero density, zero bins", _zero_forward),
    ("forward: g-table cache", _gtable_cache),
    ("bbflow: static density has zero action", _static_flow),
    ("bbflow: action is quadratic in momentum", _bb_scaling),
    ("bbflow: W2 of point masses", _w2),
    ("reconstruct: empty data energy", _zero_counts),
    ("reconstruct: count and intensity homogeneity", _homogeneity),
    ("reconstruct: non-conserving density is infeasible", _not_conserving),
    ("reconstruct: coercivity without data", _empty_coercive),
    ("reconstruct: single cell is seen", _single_cell),
    ("cli: empty seed list rejected", _empty_seeds),
    ("cli: ppp-rate table shape", _ppp_rows),
)


def selftest(out=None):
    """Run all checks; failures and exceptions are listed, never raised."""
    s = Summary("selftest")
    for name, fn in CHECKS:
        try:
            ok, detail = bool(fn()), ""
        except Exception as exc:  # noqa: BLE001 - reported as a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        s.checks.append(Check(name, ok, float(ok), 1.0, detail or ("ok" if ok else "failed")))
    if out is not None:
        rows = [{"check": c.name, "passed": c.passed, "value": c.value, "threshold": c.threshold}
                for c in s.checks]
        s.artifacts.append(str(report.write_csv(Path(out) / "summary_selftest.csv", rows, SUMMARY_COLUMNS)))
    return s
