"""Spacetime densities sampled at time nodes, piecewise linear in time."""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class SpacetimeDensity:
    """Cell densities ``slices[k]`` at ``t_k = k T / nt`` for ``k = 0..nt``.

    Between nodes the density is linear in time, so ``dt x rho_t`` has total
    mass ``int_0^T |rho_t| dt``.
    """

    slices: np.ndarray
    grid: object
    T: float = 1.0

    def __post_init__(self):
        s = np.asarray(self.slices, dtype=float)
        if s.ndim != 3 or s.shape[1:] != (self.grid.n, self.grid.n) or s.shape[0] < 2:
            raise ConfigError(f"slices must have shape (nt+1, {self.grid.n}, {self.grid.n})", "rho")
        object.__setattr__(self, "slices", s)

    @property
    def nt(self):
        return self.slices.shape[0] - 1

    @property
    def dt(self):
        return self.T / self.nt

    @property
    def times(self):
        return np.linspace(0.0, self.T, self.nt + 1)

    @property
    def slice_masses(self):
        return self.grid.mass(self.slices)

    @property
    def total_mass(self):
        """Spacetime mass ``int |rho_t| dt`` (exact for linear interpolation)."""
        m = self.slice_masses
        return float(self.dt * (m.sum() - 0.5 * (m[0] + m[-1])))

    def is_mass_conserving(self, rtol=1e-9):
        m = self.slice_masses
        scale = max(np.max(np.abs(m)), np.finfo(float).tiny)
        return bool(np.ptp(m) <= rtol * scale)

    def at(self, t):
        """Interpolated slice at time ``t``."""
        x = np.clip(float(t) / self.dt, 0.0, self.nt)
        k = min(int(np.floor(x)), self.nt - 1)
        w = x - k
        return (1.0 - w) * self.slices[k] + w * self.slices[k + 1]

    def time_weights(self, edges):
        """Exact integrals ``W[i, k] = int_{tau_i} phi_k dt`` of the hat functions."""
        return hat_integrals(self.times, edges)

    def scaled(self, c):
        return SpacetimeDensity(c * self.slices, self.grid, self.T)

    def __add__(self, other):
        return SpacetimeDensity(self.slices + other.slices, self.grid, self.T)


def hat_integrals(nodes, edges):
    """Integrals of piecewise-linear hat functions over the intervals ``edges``."""
    nodes = np.asarray(nodes, dtype=float)
    edges = np.asarray(edges, dtype=float)
    W = np.zeros((len(edges) - 1, len(nodes)))
    for k in range(len(nodes) - 1):
        t0, t1 = nodes[k], nodes[k + 1]
        L = t1 - t0
        lo = np.clip(edges[:-1], t0, t1)
        hi = np.clip(edges[1:], t0, t1)
        # int_lo^hi (t1 - t)/L dt and int_lo^hi (t - t0)/L dt
        W[:, k] += ((t1 - lo) ** 2 - (t1 - hi) ** 2) / (2 * L)
        W[:, k + 1] += ((hi - t0) ** 2 - (lo - t0) ** 2) / (2 * L)
    return W


def gaussian_blob(grid, center, sigma):
    """Unit-mass Gaussian bump restricted to ``D``."""
    X, Y = grid.mesh
    f = np.exp(-((X - center[0]) ** 2 + (Y - center[1]) ** 2) / (2.0 * sigma ** 2)) * grid.mask_D
    m = grid.mass(f)
    if not m > 0:
        raise ConfigError("blob has no mass inside the domain", "ground_truth")
    return f / m


def moving_blob(grid, nt, start, end, sigma, T=1.0, mass=1.0):
    """Blob whose centre moves linearly from ``start`` to ``end``."""
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    s = np.linspace(0.0, 1.0, nt + 1)
    slices = [mass * gaussian_blob(grid, (1 - w) * start + w * end, sigma) for w in s]
    return SpacetimeDensity(np.array(slices), grid, T)


def jump_blobs(grid, nt, first, second, sigma, t_jump=0.5, T=1.0, mass=1.0):
    """Blob at ``first`` before ``t_jump`` and at ``second`` afterwards."""
    a = mass * gaussian_blob(grid, first, sigma)
    b = mass * gaussian_blob(grid, second, sigma)
    times = np.linspace(0.0, T, nt + 1)
    return SpacetimeDensity(np.array([a if t < t_jump else b for t in times]), grid, T)
