"""Benamou-Brenier energy on a staggered grid, minimal momenta, W2 and the
recovery-sequence construction.

Densities live on cell centres at time nodes ``t_k``; momenta live on cell
faces at time midpoints ``t_{k+1/2}``.  Only faces between two cells of ``D``
carry flux, so the discrete continuity equation has no flux through the
domain boundary.
"""
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import spsolve

from .density import SpacetimeDensity
from .errors import ConfigError, MassMismatch, SolverStall


@dataclass(frozen=True)
class Momentum:
    """Face fluxes ``mx`` (nt, n+1, n) and ``my`` (nt, n, n+1)."""

    mx: np.ndarray
    my: np.ndarray

    @classmethod
    def zeros(cls, nt, n):
        return cls(np.zeros((nt, n + 1, n)), np.zeros((nt, n, n + 1)))

    def scaled(self, c):
        return Momentum(c * self.mx, c * self.my)

    def __add__(self, other):
        return Momentum(self.mx + other.mx, self.my + other.my)


@dataclass(frozen=True)
class BBValue:
    value: float
    feasible: bool
    residual: float


class Staggered:
    """Index bookkeeping for cells of ``D`` and their interior faces."""

    def __init__(self, grid):
        self.grid = grid
        n = grid.n
        self.n = n
        mask = grid.mask_D
        self.cells = np.flatnonzero(mask.ravel())
        self.n_cells = len(self.cells)
        pos = -np.ones(n * n, dtype=int)
        pos[self.cells] = np.arange(self.n_cells)
        self.cell_pos = pos
        # x-face (i, j) sits between cells (i-1, j) and (i, j)
        xi, xj = np.nonzero(mask[:-1, :] & mask[1:, :])
        self.xface = (xi + 1, xj)
        self.xpair = (pos[xi * n + xj], pos[(xi + 1) * n + xj])
        yi, yj = np.nonzero(mask[:, :-1] & mask[:, 1:])
        self.yface = (yi, yj + 1)
        self.ypair = (pos[yi * n + yj], pos[yi * n + yj + 1])
        self.n_x = len(xi)
        self.n_faces = self.n_x + len(yi)

    @cached_property
    def pairs(self):
        return (np.concatenate([self.xpair[0], self.ypair[0]]),
                np.concatenate([self.xpair[1], self.ypair[1]]))

    @cached_property
    def div(self):
        """Divergence: face fluxes to cell values, ``(n_cells, n_faces)``."""
        lo, hi = self.pairs
        f = np.arange(self.n_faces)
        h = self.grid.h
        # flux along +x (+y) leaves the lower cell and enters the upper one
        rows = np.concatenate([lo, hi])
        cols = np.concatenate([f, f])
        vals = np.concatenate([np.full(self.n_faces, 1.0 / h), np.full(self.n_faces, -1.0 / h)])
        return sparse.csr_matrix((vals, (rows, cols)), shape=(self.n_cells, self.n_faces))

    @cached_property
    def face_avg(self):
        """Average of the two adjacent cells, ``(n_faces, n_cells)``."""
        lo, hi = self.pairs
        f = np.arange(self.n_faces)
        return sparse.csr_matrix((np.full(2 * self.n_faces, 0.5), (np.concatenate([f, f]), np.concatenate([lo, hi]))),
                                 shape=(self.n_faces, self.n_cells))

    def to_vector(self, mom):
        """Face values of active faces, ``(nt, n_faces)``."""
        return np.concatenate([mom.mx[:, self.xface[0], self.xface[1]],
                               mom.my[:, self.yface[0], self.yface[1]]], axis=1)

    def from_vector(self, vec):
        vec = np.atleast_2d(vec)
        m = Momentum.zeros(vec.shape[0], self.n)
        m.mx[:, self.xface[0], self.xface[1]] = vec[:, :self.n_x]
        m.my[:, self.yface[0], self.yface[1]] = vec[:, self.n_x:]
        return m

    def cell_values(self, slices):
        return slices.reshape(slices.shape[0], -1)[:, self.cells]

    def face_density(self, slices):
        """Face densities per time interval: mean of two cells at two times."""
        c = self.cell_values(slices)
        mid = 0.5 * (c[:-1] + c[1:])
        return (self.face_avg @ mid.T).T


_STAGGERED = {}


def staggered(grid):
    key = (grid.n, grid.half_width, grid.R_dom)
    if key not in _STAGGERED:
        _STAGGERED[key] = Staggered(grid)
    return _STAGGERED[key]


def _check_pair(rho, eta):
    n = rho.grid.n
    if eta.mx.shape != (rho.nt, n + 1, n) or eta.my.shape != (rho.nt, n, n + 1):
        raise ConfigError("momentum grid does not match the density grid", "eta")


def divergence(grid, eta):
    h = grid.h
    return (eta.mx[:, 1:, :] - eta.mx[:, :-1, :]) / h + (eta.my[:, :, 1:] - eta.my[:, :, :-1]) / h


def continuity_residual(rho, eta):
    """``(rho_{k+1} - rho_k)/dt + div m_k`` per cell and its max norm.

    Flux through inactive faces (touching a cell outside ``D`` or the grid
    boundary) counts in the residual, so no-flux violations show up.
    """
    _check_pair(rho, eta)
    r = np.diff(rho.slices, axis=0) / rho.dt + divergence(rho.grid, eta)
    return r, float(np.max(np.abs(r))) if r.size else 0.0


def _perspective(m2, rb):
    """Sum of ``m2 / rb`` with ``0/0 = 0`` and ``m2/0 = inf`` for ``m2 > 0``."""
    pos = rb > 0
    if np.any(m2[~pos] > 0):
        return np.inf
    return float(np.sum(m2[pos] / rb[pos]))


def bb_energy(rho, eta, tol=1e-8):
    """Discrete kinetic action ``sum dt h^2 |m|^2 / rho_face``.

    Face densities average the two neighbouring cells at the two bounding
    time nodes.  ``feasible`` reports whether the continuity residual is
    below ``tol`` relative to the density scale.
    """
    _check_pair(rho, eta)
    s = rho.slices
    rbx = 0.25 * (s[:-1, 1:, :] + s[:-1, :-1, :] + s[1:, 1:, :] + s[1:, :-1, :])
    rby = 0.25 * (s[:-1, :, 1:] + s[:-1, :, :-1] + s[1:, :, 1:] + s[1:, :, :-1])
    interior_x = eta.mx[:, 1:-1, :]
    interior_y = eta.my[:, :, 1:-1]
    boundary = (np.abs(eta.mx[:, [0, -1], :]).sum() + np.abs(eta.my[:, :, [0, -1]]).sum())
    val = np.inf if boundary > 0 else \
        _perspective(interior_x ** 2, rbx) + _perspective(interior_y ** 2, rby)
    val *= rho.dt * rho.grid.cell_area
    _, res = continuity_residual(rho, eta)
    scale = max(float(np.max(np.abs(s))), 1e-300) / rho.dt
    return BBValue(float(val), bool(res <= tol * scale), res)


@dataclass(frozen=True)
class MinMomentum:
    momentum: Momentum
    value: float
    potentials: np.ndarray
    residual: float
    stalled: bool = False


def min_momentum(rho, floor=1e-12, rtol=1e-8, mass_rtol=1e-6, strict=True):
    """Minimal-action momentum for ``rho`` under the discrete continuity equation.

    Each time interval is an independent weighted Poisson problem
    ``L phi = (rho_{k+1} - rho_k)/dt`` with the graph Laplacian whose face
    weights are ``rho_face / h^2``; then ``m = rho_face grad phi``.  Cells
    whose time-averaged density is below ``floor`` times the mean are cut out
    of the stencil.  Components whose net mass change cannot be balanced give
    an infinite value.
    """
    masses = rho.slice_masses
    scale = max(float(np.max(np.abs(masses))), 1e-300)
    if np.ptp(masses) > mass_rtol * scale:
        raise MassMismatch(f"slice masses vary by {np.ptp(masses) / scale:.3g} (relative)")
    st = staggered(rho.grid)
    h = rho.grid.h
    c = st.cell_values(rho.slices)
    if np.any(np.abs(rho.slices.reshape(rho.nt + 1, -1)).sum(axis=1) * rho.grid.cell_area
              - np.abs(c).sum(axis=1) * rho.grid.cell_area > 1e-12 * scale):
        return MinMomentum(Momentum.zeros(rho.nt, rho.grid.n), np.inf, None, np.inf)
    rb_all = st.face_density(rho.slices)
    lo, hi = st.pairs
    vec = np.zeros((rho.nt, st.n_faces))
    phis = np.zeros((rho.nt, st.n_cells))
    worst = 0.0
    mean = max(float(c.mean()), 1e-300)
    for k in range(rho.nt):
        d = (c[k + 1] - c[k]) / rho.dt
        avg = 0.5 * (c[k] + c[k + 1])
        keep = avg > floor * mean
        rb = rb_all[k]
        w = np.where(keep[lo] & keep[hi] & (rb > floor * mean), rb, 0.0) / (h * h)
        tol_mass = mass_rtol * scale / (rho.dt * rho.grid.cell_area)
        if np.abs(d[~keep]).sum() > tol_mass:
            return MinMomentum(Momentum.zeros(rho.nt, rho.grid.n), np.inf, None, np.inf)
        act = w > 0
        A = sparse.csr_matrix((w[act], (lo[act], hi[act])), shape=(st.n_cells, st.n_cells))
        A = A + A.T
        L = sparse.diags(np.asarray(A.sum(axis=1)).ravel()) - A
        n_comp, labels = csgraph.connected_components(A, directed=False)
        labels = np.where(keep, labels, -1)
        rhs = np.where(keep, d, 0.0)
        for comp in range(n_comp):
            sel = labels == comp
            if not np.any(sel):
                continue
            net = rhs[sel].sum()
            if abs(net) > tol_mass:
                return MinMomentum(Momentum.zeros(rho.nt, rho.grid.n), np.inf, None, np.inf)
            rhs[sel] -= net / sel.sum()
        free = np.ones(st.n_cells, dtype=bool)
        free[~keep] = False
        for comp in range(n_comp):
            idx = np.flatnonzero(labels == comp)
            if idx.size:
                free[idx[0]] = False
        phi = np.zeros(st.n_cells)
        if np.any(free):
            Lf = L[free][:, free].tocsc()
            phi[free] = spsolve(Lf, rhs[free])
        r = L @ phi - rhs
        rel = np.linalg.norm(r) / max(np.linalg.norm(rhs), 1e-300)
        worst = max(worst, rel if np.linalg.norm(rhs) > 0 else 0.0)
        # m = rho_face grad phi gives div m = -L phi = -(rho_{k+1} - rho_k)/dt
        vec[k] = w * h * (phi[hi] - phi[lo])
        phis[k] = phi
    mom = st.from_vector(vec)
    stalled = worst > rtol
    if stalled and strict:
        raise SolverStall(f"elliptic residual {worst:.3g} above {rtol:g}")
    val = bb_energy(rho, mom).value
    return MinMomentum(mom, val, phis, worst, stalled)


# -- Wasserstein-2 ---------------------------------------------------------------

def _support(points, masses, tiny):
    keep = masses > tiny
    return points[keep], masses[keep]


def ot_plan(x, a, y, b):
    """Exact discrete optimal plan for squared Euclidean cost.

    Returns ``(i, j, mass, cost)`` of the nonzero plan entries and the total
    transport cost ``W2^2``.  ``a`` and ``b`` must have equal sums.
    """
    import ot

    if len(a) == 0 or len(b) == 0:
        return np.zeros(0, int), np.zeros(0, int), np.zeros(0), 0.0
    total = a.sum()
    C = ot.dist(x, y, metric="sqeuclidean")
    G = ot.emd(a / total, b / b.sum(), C, numItermax=10**7)
    i, j = np.nonzero(G > 0)
    m = G[i, j] * total
    return i, j, m, float(np.sum(m * C[i, j]))


def grid_points(grid):
    X, Y = grid.mesh
    return np.stack([X.ravel(), Y.ravel()], axis=1)


def w2_distance(grid, mu, nu, rtol=1e-6):
    """Exact W2 between two cell densities (masses at cell centres)."""
    a = np.asarray(mu, dtype=float).ravel() * grid.cell_area
    b = np.asarray(nu, dtype=float).ravel() * grid.cell_area
    ma, mb = a.sum(), b.sum()
    if abs(ma - mb) > rtol * max(abs(ma), abs(mb), 1e-300):
        raise MassMismatch(f"masses {ma:.6g} and {mb:.6g} differ")
    if ma <= 0:
        return 0.0
    pts = grid_points(grid)
    tiny = 1e-14 * ma
    x, a = _support(pts, a, tiny)
    y, b = _support(pts, b, tiny)
    return float(np.sqrt(max(ot_plan(x, a, y, b * (a.sum() / b.sum()))[3], 0.0)))


# -- recovery sequence -------------------------------------------------------------

def bump(t):
    """Unnormalized ``exp(1/(t^2 - 1))`` on ``|t| < 1``, zero elsewhere."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    inside = np.abs(t) < 1
    out[inside] = np.exp(1.0 / (t[inside] ** 2 - 1.0))
    return out


_BUMP_MASS = None


def bump_mass():
    global _BUMP_MASS
    if _BUMP_MASS is None:
        x, w = np.polynomial.legendre.leggauss(400)
        _BUMP_MASS = float(np.sum(w * bump(x)))
    return _BUMP_MASS


def reflect_time(s, T):
    s = np.asarray(s, dtype=float)
    return np.where(s < 0, -s, np.where(s > T, 2 * T - s, s))


def temporal_weights(times, t, eps, T, n_quad=512):
    """Weights ``c_j`` with ``rho_eps(t) = sum_j c_j rho(t_j)``.

    The curve through the node slices is linear in time and reflected at
    both ends of ``[0, T]`` before mollification.
    """
    x, w = np.polynomial.legendre.leggauss(n_quad)
    s = t + eps * x
    kern = bump(x) / bump_mass() * w
    r = reflect_time(s, T)
    nt = len(times) - 1
    dt = T / nt
    pos = np.clip(r / dt, 0, nt)
    k = np.minimum(np.floor(pos).astype(int), nt - 1)
    frac = pos - k
    c = np.zeros(nt + 1)
    np.add.at(c, k, kern * (1 - frac))
    np.add.at(c, k + 1, kern * frac)
    return c / c.sum()


def spatial_stencil(radius, h):
    """Even radial bump on ``B_radius`` sampled on the lattice ``h Z^2``."""
    K = int(np.floor(radius / h))
    off = np.arange(-K, K + 1) * h
    X, Y = np.meshgrid(off, off, indexing="ij")
    w = bump(np.hypot(X, Y) / radius) if K > 0 else np.ones((1, 1))
    return w / w.sum(), K


def splat(grid, points, masses):
    """Cloud-in-cell deposit of point masses as cell densities on ``D``.

    Mass landing on cells outside ``D`` is moved to the nearest cell of ``D``.
    """
    n = grid.n
    h = grid.h
    u = (points + grid.half_width) / h - 0.5
    i0 = np.floor(u).astype(int)
    f = u - i0
    out = np.zeros(n * n)
    for di in (0, 1):
        for dj in (0, 1):
            w = (f[:, 0] if di else 1 - f[:, 0]) * (f[:, 1] if dj else 1 - f[:, 1])
            ii = np.clip(i0[:, 0] + di, 0, n - 1)
            jj = np.clip(i0[:, 1] + dj, 0, n - 1)
            np.add.at(out, ii * n + jj, masses * w)
    out = out.reshape(n, n)
    outside = ~grid.mask_D & (out != 0)
    if np.any(outside):
        X, Y = grid.mesh
        d_cells = np.flatnonzero(grid.mask_D.ravel())
        dpts = np.stack([X.ravel()[d_cells], Y.ravel()[d_cells]], axis=1)
        for i, j in zip(*np.nonzero(outside)):
            near = d_cells[np.argmin(np.sum((dpts - [X[i, j], Y[i, j]]) ** 2, axis=1))]
            out.ravel()[near] += out[i, j]
            out[i, j] = 0.0
    return out / grid.cell_area


def _mollified_particles(grid, density, radius):
    """Spatially mollified slice as point masses on an extended lattice."""
    st, K = spatial_stencil(radius, grid.h)
    from scipy.signal import convolve

    padded = np.pad(density * grid.cell_area, K)
    mass = convolve(padded, st, mode="same")
    n = padded.shape[0]
    c = -grid.half_width - K * grid.h + (np.arange(n) + 0.5) * grid.h
    X, Y = np.meshgrid(c, c, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    m = mass.ravel()
    keep = m > 1e-14 * max(m.sum(), 1e-300)
    return pts[keep], m[keep]


@dataclass(frozen=True)
class RecoveryEntry:
    delta: float
    k: int
    eps: float
    rho: SpacetimeDensity
    S: float
    w2: float
    S_grid: float


def recovery_sequence(rho, deltas, R_inner=None, with_grid_energy=True):
    """Regularized approximations of a mass-conserving ``rho``.

    For each ``delta`` with ``k = ceil(delta^(-2/3))`` and
    ``eps = sqrt(k delta)``: mollify in time (reflected extension), take
    ``k + 1`` coarse slices, mollify them in space at radius ``1/k``, join
    consecutive slices by displacement interpolation along exact optimal
    plans and shrink space by ``c_k = 1/(1 + 1/(m k))``.

    ``S`` is the kinetic action of this construction, ``c_k^2 (k/T) sum W2^2``
    over consecutive coarse slices.  When ``k`` exceeds the number of time
    steps the coarse slices are the node slices and the curve is linear in
    between (mixtures), whose action is bounded the same way.  ``w2`` is the
    time-sliced bound ``int W2(rho_n(t), rho(t)) dt`` (trapezoid over
    nodes).  ``S_grid`` is the minimal discrete action on the node grid.
    """
    masses = rho.slice_masses
    if np.ptp(masses) > 1e-6 * max(np.max(np.abs(masses)), 1e-300):
        raise MassMismatch("recovery needs a mass-conserving density")
    grid = rho.grid
    m_in = grid.R_dom if R_inner is None else R_inner
    T = rho.T
    times = rho.times
    out = []
    for delta in deltas:
        k = int(np.ceil(delta ** (-2.0 / 3.0)))
        eps = float(np.sqrt(k * delta))
        ck = 1.0 / (1.0 + 1.0 / (m_in * k))
        if k > rho.nt:
            coarse_t = times
            kin_scale = k / T
        else:
            coarse_t = np.linspace(0.0, T, k + 1)
            kin_scale = k / T
        coarse = []
        for t in coarse_t:
            c = temporal_weights(times, t, eps, T)
            coarse.append(_mollified_particles(grid, np.tensordot(c, rho.slices, axes=1), 1.0 / k))
        plans = []
        kin = 0.0
        for (x, a), (y, b) in zip(coarse[:-1], coarse[1:]):
            i, j, mm, cost = ot_plan(x, a, y, b)
            plans.append((i, j, mm))
            kin += cost
        S = ck * ck * kin_scale * kin
        slices = np.empty_like(rho.slices)
        for q, t in enumerate(times):
            if k > rho.nt:
                x, a = coarse[q]
                slices[q] = splat(grid, ck * x, a)
                continue
            seg = min(int(np.floor(t / T * k)), k - 1)
            s = t / T * k - seg
            x, _ = coarse[seg]
            y, _ = coarse[seg + 1]
            i, j, mm = plans[seg]
            slices[q] = splat(grid, ck * ((1 - s) * x[i] + s * y[j]), mm)
        # the splat can only redistribute mass, but keep slice masses identical
        target = masses.mean()
        got = grid.mass(slices)
        slices *= (target / np.where(got > 0, got, 1.0))[:, None, None]
        rho_n = SpacetimeDensity(slices, grid, T)
        d = np.array([w2_distance(grid, slices[q], rho.slices[q]) for q in range(len(times))])
        w2 = float(rho.dt * (d.sum() - 0.5 * (d[0] + d[-1])))
        S_grid = min_momentum(rho_n, strict=False).value if with_grid_energy else float("nan")
        out.append(RecoveryEntry(float(delta), k, eps, rho_n, float(S), w2, float(S_grid)))
    return out
