"""PET forward operator: positron range, X-ray transform and detector binning.

A tracer slice ``rho_t`` on ``D`` is blurred by the positron kernel ``G``,
emitted along lines with uniformly distributed direction and registered at
the two points where the line leaves the scanner.  Scattered pairs are spread
homogeneously over all detector pairs.  Everything is two-dimensional.
"""
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage, signal, sparse
from scipy.stats import qmc

from .errors import ConfigError, SupportViolation
from .geometry import TWO_PI, angular_gap, chord_endpoints, chord_params, locate, wrap_angle

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Probabilities:
    """Attenuation, scatter and detection probabilities (summing to one)."""

    p_a: float = 0.2
    p_s: float = 0.2
    p_d: float = 0.6

    def __post_init__(self):
        vals = (self.p_a, self.p_s, self.p_d)
        if min(vals) < 0 or abs(sum(vals) - 1.0) > 1e-12:
            raise ConfigError("p_a + p_s + p_d must equal 1 with all entries >= 0", "probabilities")
        if not self.p_s > 0:
            raise ConfigError("p_s must be positive", "probabilities.p_s")

    @property
    def observed(self):
        return self.p_s + self.p_d


# -- positron range ------------------------------------------------------------

@dataclass(frozen=True)
class PositronKernel:
    """Radial bump ``(4 / (pi r0^2)) (1 - (r/r0)^2)^3`` supported on ``r <= r0``."""

    radius: float

    @property
    def normalization(self):
        return 4.0 / (np.pi * self.radius ** 2)

    def __call__(self, r):
        z = np.clip(1.0 - (np.asarray(r, dtype=float) / self.radius) ** 2, 0.0, None)
        return self.normalization * z ** 3

    @property
    def max_value(self):
        return self.normalization

    def stencil(self, h):
        """Cell weights (summing to one) of the kernel sampled at spacing ``h``."""
        K = int(np.floor(self.radius / h))
        off = np.arange(-K, K + 1) * h
        X, Y = np.meshgrid(off, off, indexing="ij")
        w = self(np.hypot(X, Y))
        return w / w.sum()


def kernel_for(geometry):
    return PositronKernel(0.5 * geometry.delta)


def check_support(grid, density, tol=1e-12):
    outside = np.abs(density[..., ~grid.mask_D]).sum() * grid.cell_area
    if outside > tol:
        raise SupportViolation(f"mass {outside:.3g} outside the tracer domain")


def positron_convolve(grid, density, kernel):
    """``G * lambda`` on the padded grid; mass is preserved exactly."""
    density = np.asarray(density, dtype=float)
    check_support(grid, density)
    # direct summation keeps exact zeros away from the support
    out = signal.convolve(density, kernel.stencil(grid.h), mode="same", method="direct")
    return np.clip(out, 0.0, None)


@lru_cache(maxsize=16)
def _convolution_matrix(n, half_width, R_dom, radius):
    from .geometry import Grid
    grid = Grid(n, half_width, R_dom)
    st = PositronKernel(radius).stencil(grid.h)
    K = st.shape[0] // 2
    src = np.flatnonzero(grid.mask_D.ravel())
    si, sj = np.unravel_index(src, (n, n))
    di, dj = np.nonzero(st > 0)
    w = st[di, dj]
    ti = si[:, None] + (di - K)[None, :]
    tj = sj[:, None] + (dj - K)[None, :]
    ok = (ti >= 0) & (ti < n) & (tj >= 0) & (tj < n)
    rows = (ti * n + tj)[ok]
    cols = np.broadcast_to(np.arange(len(src))[:, None], ti.shape)[ok]
    vals = np.broadcast_to(w[None, :], ti.shape)[ok]
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n * n, len(src)))


def convolution_matrix(grid, kernel):
    """Sparse map from masses of ``D`` cells to masses of all grid cells."""
    return _convolution_matrix(grid.n, grid.half_width, grid.R_dom, kernel.radius)


# -- X-ray transform -----------------------------------------------------------

def canonical_direction(theta):
    """Representative of ``{theta, -theta}`` used for evaluation."""
    theta = np.asarray(theta, dtype=float)
    flip = (theta[..., 1] < 0) | ((theta[..., 1] == 0) & (theta[..., 0] < 0))
    return np.where(flip[..., None], -theta, theta)


def _line_nodes(grid, theta, s, refine=1):
    """Midpoint nodes and step of every line clipped to the padded disk."""
    theta = canonical_direction(np.atleast_2d(theta))
    s = np.atleast_2d(np.asarray(s, dtype=float))
    L = grid.half_width
    p2 = np.sum(s * s, axis=-1)
    half = np.sqrt(np.clip(L * L - p2, 0.0, None))
    nseg = max(1, int(np.ceil(2 * L / (0.5 * grid.h / refine))))
    step = 2 * half / nseg
    frac = (np.arange(nseg) + 0.5) / nseg
    t = -half[:, None] + 2 * half[:, None] * frac[None, :]
    pts = s[:, None, :] + t[..., None] * theta[:, None, :]
    return pts, step


def _interp(grid, f, pts):
    coords = (pts + grid.half_width) / grid.h - 0.5
    flat = coords.reshape(-1, 2).T
    vals = ndimage.map_coordinates(f, flat, order=1, mode="constant", cval=0.0)
    return vals.reshape(pts.shape[:-1])


def xray_transform(grid, f, theta, s, refine=1, chunk=4096):
    """Line integrals of the bilinear interpolant of ``f``.

    Composite midpoint rule with step at most ``h / (2 refine)`` over the chord
    of the padded disk.  ``theta`` and ``-theta`` give identical results.
    """
    theta = np.asarray(theta, dtype=float)
    s = np.asarray(s, dtype=float)
    scalar = theta.ndim == 1
    theta = np.atleast_2d(theta)
    s = np.atleast_2d(s)
    out = np.empty(len(theta))
    for lo in range(0, len(theta), chunk):
        pts, step = _line_nodes(grid, theta[lo:lo + chunk], s[lo:lo + chunk], refine)
        out[lo:lo + chunk] = _interp(grid, f, pts).sum(axis=1) * step
    return out[0] if scalar else out


# -- geometric factor g ----------------------------------------------------------

def g_analytic(a, b, R_scan):
    """Closed-form density of detected pairs per unit line integral.

    For a circular scanner, lines parameterized by boundary angles have
    Jacobian ``R |sin((b - a)/2)| / 2`` against (direction, offset); with the
    uniform direction law ``dphi / 2 pi`` and arclength measure this gives
    ``|sin((b - a)/2)| / (4 pi R)``.
    """
    return np.abs(np.sin(0.5 * (np.asarray(b) - np.asarray(a)))) / (4.0 * np.pi * R_scan)


@dataclass(frozen=True)
class GTable:
    """Bin averages of ``g`` on a ``resolution x resolution`` angle grid.

    ``valid`` marks bins hit by at least one sampled line; unhit bins are
    geometrically unreachable from the padded disk and hold zero.  When
    ``exact`` is set, point evaluation uses the closed form instead.
    """

    values: np.ndarray
    valid: np.ndarray
    R_scan: float
    n_samples: int = 0
    exact: bool = False

    @property
    def resolution(self):
        return self.values.shape[0]

    @classmethod
    def analytic(cls, geometry, resolution=256, sub=8):
        e = np.linspace(0.0, TWO_PI, resolution + 1)
        w = e[1] - e[0]
        sp = e[:-1, None] + (np.arange(sub) + 0.5)[None, :] * w / sub
        vals = g_analytic(sp[:, None, :, None], sp[None, :, None, :], geometry.R_scan).mean(axis=(2, 3))
        return cls(vals, np.ones_like(vals, dtype=bool), geometry.R_scan, 0, True)

    def __call__(self, a, b):
        if self.exact:
            return g_analytic(a, b, self.R_scan)
        res = self.resolution
        j = np.minimum((wrap_angle(a) / TWO_PI * res).astype(int), res - 1)
        k = np.minimum((wrap_angle(b) / TWO_PI * res).astype(int), res - 1)
        return self.values[j, k]

    @property
    def max_value(self):
        return float(self.values[self.valid].max())


def _cache_dir():
    return Path(os.environ.get("PETGAMMA_CACHE", Path.home() / ".cache" / "petgamma"))


def _cache_key(geometry, resolution, n_samples, seed):
    blob = json.dumps({"geometry": geometry.to_dict(), "resolution": resolution,
                       "n_samples": n_samples, "seed": seed, "v": 1}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:24]


def _sample_g(geometry, resolution, n_samples, seed):
    R = geometry.R_scan
    L = geometry.padded_radius
    area = np.pi * L * L
    # scrambled Sobol points keep the histogram noise far below plain MC
    sob = qmc.Sobol(3, scramble=True, seed=seed)
    m = int(np.ceil(np.log2(max(n_samples, 2))))
    total = 2 ** m
    acc = np.zeros(resolution * resolution)
    hits = np.zeros(resolution * resolution, dtype=np.int64)
    chunk = 2 ** min(m, 20)
    for _ in range(total // chunk):
        u = sob.random(chunk)
        r = L * np.sqrt(u[:, 0])
        phi = TWO_PI * u[:, 1]
        x = np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1)
        psi = TWO_PI * u[:, 2]
        v = np.stack([np.cos(psi), np.sin(psi)], axis=1)
        a, b = chord_endpoints(x, v, R)
        p = x[:, 0] * v[:, 1] - x[:, 1] * v[:, 0]
        chord = 2.0 * np.sqrt(np.clip(L * L - p * p, 1e-300, None))
        w = area / chord
        j = np.minimum((a / TWO_PI * resolution).astype(int), resolution - 1)
        k = np.minimum((b / TWO_PI * resolution).astype(int), resolution - 1)
        # antithetic direction -v records the reversed pair with the same weight
        for idx in (j * resolution + k, k * resolution + j):
            acc += np.bincount(idx, weights=0.5 * w, minlength=acc.size)
            hits += np.bincount(idx, minlength=acc.size)
    bin_arc = TWO_PI * R / resolution
    vals = (acc / total / bin_arc ** 2).reshape(resolution, resolution)
    valid = (hits > 0).reshape(resolution, resolution)
    return vals, valid, total


def estimate_g(geometry, resolution=128, n_samples=10**7, seed=0, cache=True):
    """Monte-Carlo table of ``g`` from lines through the padded disk.

    Lines are drawn with ``x`` uniform on the padded disk and a uniform
    direction; each is weighted by the inverse of its chord length so that
    the weighted histogram of boundary pairs estimates the bin averages of
    ``g``.  Results are cached on disk; a damaged cache file is rebuilt.
    """
    path = _cache_dir() / f"gtable-{_cache_key(geometry, resolution, n_samples, seed)}.npz"
    if cache and path.exists():
        try:
            with np.load(path) as z:
                vals, valid, total = z["values"], z["valid"], int(z["n_samples"])
            if vals.shape == (resolution, resolution) and np.all(np.isfinite(vals)):
                return GTable(vals, valid, geometry.R_scan, total)
        except Exception as exc:  # noqa: BLE001 - any unreadable cache is regenerated
            log.warning("regenerating damaged g-table cache %s (%s)", path, exc)
    vals, valid, total = _sample_g(geometry, resolution, n_samples, seed)
    if cache:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp.npz")
        np.savez(tmp, values=vals, valid=valid, n_samples=total)
        os.replace(tmp, path)
    return GTable(vals, valid, geometry.R_scan, total)


def forward_density_point(grid, rho_t, a, b, g, kernel, refine=1):
    """Detection density ``g(a, b) P[G * rho_t](theta(a, b), s(a, b))``."""
    cp = chord_params(a, b, g.R_scan)
    f = positron_convolve(grid, rho_t, kernel)
    return g(a, b) * xray_transform(grid, f, cp.theta, cp.s, refine)


# -- direct detection by (x, v) quadrature --------------------------------------

@lru_cache(maxsize=16)
def _pairs_matrix(n, half_width, R_dom, R_scan, arc_key, n_ang):
    from .geometry import Grid
    grid = Grid(n, half_width, R_dom)
    edges = np.frombuffer(arc_key)
    M = len(edges) - 1
    sub = subsamples(grid.h, edges, R_scan)
    cells = np.flatnonzero(grid.mask_padded.ravel())
    X, Y = grid.mesh
    centre = np.stack([X.ravel()[cells], Y.ravel()[cells]], axis=1)
    off = ((np.arange(sub) + 0.5) / sub - 0.5) * grid.h
    n_half = n_ang // 2
    weight = 1.0 / (n_ang * sub * sub)
    rows, cols = [], []
    for dx, dy in ((dx, dy) for dx in off for dy in off):
        x = centre + [dx, dy]
        phi = (np.arange(n_half) + 0.5) * np.pi / n_half
        for lo in range(0, n_half, 16):
            v = np.stack([np.cos(phi[lo:lo + 16]), np.sin(phi[lo:lo + 16])], axis=1)
            a, b = chord_endpoints(x[:, None, :], v[None, :, :], R_scan)
            j = locate(a, edges, "angle")
            k = locate(b, edges, "angle")
            c = np.broadcast_to(cells[:, None], j.shape)
            rows += [(j * M + k).ravel(), (k * M + j).ravel()]
            cols += [c.ravel(), c.ravel()]
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.full(len(rows), weight)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(M * M, n * n))


def subsamples(h, arc_edges, R_scan, per_bin=4):
    """Points per cell side so that ``per_bin`` points span the narrowest
    detector arc; cell centres alone bias the binning once arcs are not much
    wider than cells."""
    width = float(np.min(np.diff(arc_edges))) * R_scan
    return max(1, int(np.ceil(per_bin * h / width)))


def pairs_matrix(grid, arc_edges, R_scan, n_ang=512):
    """Sparse map from cell masses (after blurring) to detector-pair masses.

    Each cell is represented by a ``sub x sub`` lattice of points (see
    :func:`subsamples`), directions by ``n_ang`` equispaced angles; both
    orientations of a line are recorded so every column sums to exactly one.
    """
    key = np.ascontiguousarray(arc_edges, dtype=float).tobytes()
    return _pairs_matrix(grid.n, grid.half_width, grid.R_dom, R_scan, key, n_ang)


@lru_cache(maxsize=16)
def _detection_matrix(n, half_width, R_dom, radius, R_scan, arc_key, n_ang):
    from .geometry import Grid
    grid = Grid(n, half_width, R_dom)
    P = pairs_matrix(grid, np.frombuffer(arc_key), R_scan, n_ang)
    C = convolution_matrix(grid, PositronKernel(radius))
    return (P @ C).tocsr()


def detection_matrix(grid, arc_edges, kernel, R_scan, n_ang=512):
    """Map from masses of ``D`` cells to detected masses per detector pair."""
    key = np.ascontiguousarray(arc_edges, dtype=float).tobytes()
    return _detection_matrix(grid.n, grid.half_width, grid.R_dom, kernel.radius, R_scan, key, n_ang)


def forward_detect_pairs(grid, lam_t, arc_edges, kernel, R_scan, n_ang=512):
    """Detected mass of the slice ``lam_t`` on every detector pair, ``(M, M)``."""
    lam_t = np.asarray(lam_t, dtype=float)
    check_support(grid, lam_t)
    M = len(arc_edges) - 1
    A = detection_matrix(grid, arc_edges, kernel, R_scan, n_ang)
    return (A @ (lam_t[grid.mask_D] * grid.cell_area)).reshape(M, M)


# -- binned operator ---------------------------------------------------------------

@dataclass(frozen=True)
class BinnedForward:
    """Bin averages of the weighted forward density against ``nu``."""

    values: np.ndarray
    level: object
    u: float
    probs: Probabilities

    def bin_masses(self):
        return self.values * self.level.nu


def scatter_density(level, slice_masses_weighted, R_scan):
    """Scatter part per bin before weighting: homogeneous over detector pairs."""
    per_time = slice_masses_weighted / level.tau_lengths
    return np.broadcast_to(per_time[:, None, None] / (TWO_PI * R_scan) ** 2,
                           (level.N, level.M, level.M)).copy()


def scatter_floor(level, total_mass, T, u, probs, R_scan):
    """Lower bound on every bin of the binned forward for time-constant mass."""
    return u * probs.p_s * total_mass / (T * (TWO_PI * R_scan) ** 2)


def binned_forward(rho, level, u, probs, geometry, method="pairs", g=None, n_ang=512, quad=2,
                   exact_mass=False):
    """Binned forward ``B^u rho`` of a :class:`SpacetimeDensity`.

    ``method="pairs"`` bins the direct (x, v) quadrature; ``method="xray"``
    averages ``g P[G * rho_t]`` over ``quad`` subpoints per angle and per
    time bin.  With ``exact_mass`` the xray detections of every time bin are
    rescaled to the mass of ``rho`` in that bin, removing the quadrature
    error in the total.
    """
    grid = rho.grid
    kernel = kernel_for(geometry)
    R = geometry.R_scan
    for sl in rho.slices:
        check_support(grid, sl)
    W = rho.time_weights(level.time_edges)
    scat = scatter_density(level, W @ rho.slice_masses, R)
    if method == "pairs":
        A = detection_matrix(grid, level.arc_edges, kernel, R, n_ang)
        det_nodes = A @ (rho.slices[:, grid.mask_D].T * grid.cell_area)
        det = (det_nodes @ W.T).T.reshape(level.N, level.M, level.M) / level.nu
    elif method == "xray":
        g = GTable.analytic(geometry) if g is None else g
        det = xray_bin_averages(rho, level, g, kernel, quad)
        if exact_mass:
            have = (det * level.nu).sum(axis=(1, 2))
            want = W @ rho.slice_masses
            det *= np.divide(want, have, out=np.zeros_like(want), where=have > 0)[:, None, None]
    else:
        raise ConfigError(f"unknown forward method {method!r}", "method")
    return BinnedForward(u * probs.p_s * scat + probs.p_d * det, level, u, probs)


def _subpoints(edges, quad):
    w = np.diff(edges)
    return (edges[:-1, None] + (np.arange(quad) + 0.5)[None, :] / quad * w[:, None]).ravel()


def detection_field(grid, slices, alpha, g, kernel, refine=1):
    """Pointwise detection density on the angle grid ``alpha x alpha`` for
    every slice: array ``(len(slices), len(alpha), len(alpha))``."""
    A, B = np.meshgrid(alpha, alpha, indexing="ij")
    ok = angular_gap(A, B) > 1e-9
    cp = chord_params(A[ok], B[ok], g.R_scan)
    gv = g(A[ok], B[ok])
    out = np.zeros((len(slices),) + A.shape)
    for k, sl in enumerate(slices):
        f = positron_convolve(grid, sl, kernel)
        out[k][ok] = gv * xray_transform(grid, f, cp.theta, cp.s, refine)
    return out


def xray_bin_averages(rho, level, g, kernel, quad=2):
    """Bin averages of the detection density by subpoint quadrature."""
    alpha = _subpoints(level.arc_edges, quad)
    nodes = detection_field(rho.grid, rho.slices, alpha, g, kernel)
    W = rho.time_weights(level.time_edges) / level.tau_lengths[:, None]
    per_bin = np.tensordot(W, nodes, axes=(1, 0))
    M = level.M
    return per_bin.reshape(level.N, M, quad, M, quad).mean(axis=(2, 4))


def refinement_consistency(rho, levels, geometry, u=1.0, probs=None, g=None, quad=2, relative=True):
    """L2(nu) distances between bin averages at each level and the pointwise
    forward density.

    The pointwise density is evaluated on a quadrature grid ``quad`` times
    finer than the finest level; the bin averages at every level are taken on
    the same grid, so nested levels give nonincreasing distances.
    """
    probs = Probabilities() if probs is None else probs
    g = GTable.analytic(geometry) if g is None else g
    kernel = kernel_for(geometry)
    finest = levels[-1]
    for coarse in levels[:-1]:
        if not finest.partition().is_refinement_of(coarse.partition()):
            raise ConfigError("levels must be nested", "levels")
    t_edges = np.unique(np.concatenate([finest.time_edges, rho.times]))
    tq = _subpoints(t_edges, quad)
    aq = _subpoints(finest.arc_edges, quad)
    wt = np.repeat(np.diff(t_edges) / quad, quad)
    wa = np.repeat(np.diff(finest.arc_edges) * geometry.R_scan / quad, quad)
    nodes = detection_field(rho.grid, rho.slices, aq, g, kernel)
    # node slices are linear in time, so the field is too
    x = tq / rho.dt
    k = np.minimum(np.floor(x).astype(int), rho.nt - 1)
    s = (x - k)[:, None, None]
    det = (1 - s) * nodes[k] + s * nodes[k + 1]
    masses = np.interp(tq, rho.times, rho.slice_masses)
    field = u * probs.p_s * masses[:, None, None] / (TWO_PI * geometry.R_scan) ** 2 + probs.p_d * det
    w = wt[:, None, None] * wa[None, :, None] * wa[None, None, :]
    norm = np.sqrt(np.sum(w * field ** 2)) if relative else 1.0
    out = []
    for lev in levels:
        it = locate(tq, lev.time_edges)
        ia = locate(aq, lev.arc_edges)
        idx = (it[:, None, None] * lev.M + ia[None, :, None]) * lev.M + ia[None, None, :]
        idx = np.broadcast_to(idx, field.shape).ravel()
        n_bins = lev.N * lev.M * lev.M
        avg = np.bincount(idx, weights=(w * field).ravel(), minlength=n_bins) / \
            np.maximum(np.bincount(idx, weights=w.ravel(), minlength=n_bins), 1e-300)
        out.append(float(np.sqrt(np.sum(w.ravel() * (field.ravel() - avg[idx]) ** 2)) / norm))
    return out



def time_holder_ratio(rho, arc_edges, geometry, action, n_ang=512):
    """Largest detection-bin change between node slices relative to
    ``|t - s|^(1/2) (|rho| S)^(1/2)``.

    Bin changes are divided by the product of arc lengths, as a density on
    pairs of detector arcs.  ``action`` is the kinetic action ``S`` of any
    momentum transporting ``rho``.  Returns 0 for static densities.
    """
    grid = rho.grid
    A = detection_matrix(grid, arc_edges, kernel_for(geometry), geometry.R_scan, n_ang)
    ell = np.diff(arc_edges) * geometry.R_scan
    dens = (A @ (rho.slices[:, grid.mask_D].T * grid.cell_area)).T / np.outer(ell, ell).ravel()
    scale = np.sqrt(rho.total_mass * action)
    worst = 0.0
    for i in range(rho.nt):
        diff = np.abs(dens[i + 1:] - dens[i]).max(axis=1)
        gaps = np.sqrt(rho.times[i + 1:] - rho.times[i])
        if scale > 0:
            worst = max(worst, float(np.max(diff / gaps)) / scale)
        elif np.any(diff > 0):
            return np.inf
    return worst

# -- listmode simulation -------------------------------------------------------

def sample_kernel_offsets(kernel, n, rng):
    """Draws from the positron kernel: ``(r/r0)^2`` is Beta(1, 4) distributed."""
    r = kernel.radius * np.sqrt(rng.beta(1.0, 4.0, n))
    phi = rng.uniform(0.0, TWO_PI, n)
    return r[:, None] * np.stack([np.cos(phi), np.sin(phi)], axis=1)


def simulate_listmode(rho, q, geometry, probs, rng):
    """Listmode measurement: a Poisson process with intensity ``q A rho``.

    Decays are drawn from ``rho`` (piecewise linear in time, uniform inside
    cells), displaced by the positron kernel and emitted along a uniform
    direction.  Each pair is absorbed, scattered onto a uniform detector pair
    or detected at the chord endpoints.  Returns an ``(n, 3)`` array of
    ``(t, a, b)`` rows.
    """
    if not q > 0:
        raise ConfigError("q must be positive", "q")
    grid = rho.grid
    for sl in rho.slices:
        check_support(grid, sl)
    m = rho.slice_masses
    dt = rho.dt
    n_dec = rng.poisson(q * rho.total_mass)
    # interval, then node slice of the linear mixture, then time inside
    w_int = 0.5 * (m[:-1] + m[1:])
    k = rng.choice(rho.nt, n_dec, p=w_int / w_int.sum())
    upper = rng.random(n_dec) < m[k + 1] / np.maximum(m[k] + m[k + 1], 1e-300)
    s = np.sqrt(rng.random(n_dec))
    t = np.minimum((k + np.where(upper, s, 1.0 - s)) * dt, np.nextafter(rho.T, 0.0))
    node = k + upper
    cells = np.flatnonzero(grid.mask_D.ravel())
    x = np.empty((n_dec, 2))
    for j in np.unique(node):
        sel = np.flatnonzero(node == j)
        p = rho.slices[j].ravel()[cells]
        c = cells[rng.choice(len(cells), len(sel), p=p / p.sum())]
        ci, cj = np.unravel_index(c, (grid.n, grid.n))
        x[sel, 0] = grid.centers[ci] + (rng.random(len(sel)) - 0.5) * grid.h
        x[sel, 1] = grid.centers[cj] + (rng.random(len(sel)) - 0.5) * grid.h
    x += sample_kernel_offsets(kernel_for(geometry), n_dec, rng)
    phi = rng.uniform(0.0, TWO_PI, n_dec)
    a, b = chord_endpoints(x, np.stack([np.cos(phi), np.sin(phi)], axis=1), geometry.R_scan)
    fate = rng.choice(3, n_dec, p=[probs.p_a, probs.p_s, probs.p_d])
    scat = fate == 1
    a[scat] = rng.uniform(0.0, TWO_PI, scat.sum())
    b[scat] = rng.uniform(0.0, TWO_PI, scat.sum())
    keep = fate > 0
    events = np.stack([t[keep], a[keep], b[keep]], axis=1)
    return events[np.argsort(events[:, 0], kind="stable")]


def bin_events(events, level):
    """Counts ``(N, M, M)`` of listmode events on a level."""
    from .geometry import locate_bin
    counts = np.zeros((level.N, level.M, level.M), dtype=np.int64)
    if len(events) == 0:
        return counts
    i, j, k = locate_bin(events[:, 0], events[:, 1], events[:, 2], level)
    np.add.at(counts, (i, j, k), 1)
    return counts
