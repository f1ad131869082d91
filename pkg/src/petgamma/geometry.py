"""Scanner geometry, chord maps and nested partitions.

The scanner is two-dimensional: the tracer lives in the disk ``D`` of radius
``R_dom``, detectors sit on the circle of radius ``R_scan``, and detector
positions are stored as polar angles in ``[0, 2*pi)``.
"""
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigError, DegenerateChord, OutOfRange

TWO_PI = 2.0 * np.pi


def wrap_angle(a):
    """Map angles into ``[0, 2*pi)``."""
    w = np.mod(a, TWO_PI)
    return np.where(w >= TWO_PI, 0.0, w)


@dataclass(frozen=True)
class GeometryConfig:
    R_dom: float = 0.7
    R_scan: float = 1.0
    T_horizon: float = 1.0
    grid_n: int = 64
    nt: int = 8

    def __post_init__(self):
        if not self.R_dom > 0:
            raise ConfigError("must be positive", "geometry.R_dom")
        if not self.R_scan > self.R_dom:
            raise ConfigError("must exceed R_dom", "geometry.R_scan")
        if not self.T_horizon > 0:
            raise ConfigError("must be positive", "geometry.T_horizon")
        if self.grid_n < 2:
            raise ConfigError("need at least 2 cells per axis", "geometry.grid_n")
        if self.nt < 1:
            raise ConfigError("need at least one time step", "geometry.nt")

    @property
    def delta(self):
        return self.R_scan - self.R_dom

    @property
    def padded_radius(self):
        """Radius of ``D`` grown by the positron range ``delta/2``."""
        return self.R_dom + 0.5 * self.delta

    def grid(self, n=None):
        return Grid(self.grid_n if n is None else n, self.padded_radius, self.R_dom)

    def to_dict(self):
        return {"R_dom": self.R_dom, "R_scan": self.R_scan, "T_horizon": self.T_horizon,
                "grid_n": self.grid_n, "nt": self.nt}


@dataclass(frozen=True)
class Grid:
    """Square cell grid covering ``[-half_width, half_width]^2``.

    Arrays are indexed ``[i, j]`` with ``i`` along x and ``j`` along y.
    """

    n: int
    half_width: float
    R_dom: float

    @property
    def h(self):
        return 2.0 * self.half_width / self.n

    @property
    def cell_area(self):
        return self.h * self.h

    @cached_property
    def centers(self):
        return -self.half_width + (np.arange(self.n) + 0.5) * self.h

    @cached_property
    def mesh(self):
        return np.meshgrid(self.centers, self.centers, indexing="ij")

    @cached_property
    def radius(self):
        X, Y = self.mesh
        return np.hypot(X, Y)

    @cached_property
    def mask_D(self):
        """Cells whose centre lies in the tracer domain."""
        return self.radius <= self.R_dom

    @cached_property
    def mask_padded(self):
        return self.radius <= self.half_width

    def mass(self, density):
        """Total mass of cell densities (last two axes are space)."""
        return np.sum(density, axis=(-2, -1)) * self.cell_area


def chord_endpoints(x, v, R_scan):
    """Boundary angles ``(a, b)`` where the line ``x + t v`` meets the circle.

    ``a`` is reached in direction ``-v``, ``b`` in direction ``+v``.  Inputs may
    be single points ``(2,)`` or stacks ``(..., 2)``.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    xv = np.sum(x * v, axis=-1)
    disc = np.sqrt(np.maximum(xv * xv - np.sum(x * x, axis=-1) + R_scan * R_scan, 0.0))
    t_minus = -xv - disc
    t_plus = -xv + disc
    pa = x + t_minus[..., None] * v
    pb = x + t_plus[..., None] * v
    a = wrap_angle(np.arctan2(pa[..., 1], pa[..., 0]))
    b = wrap_angle(np.arctan2(pb[..., 1], pb[..., 0]))
    return a, b


def boundary_point(angle, R_scan):
    angle = np.asarray(angle, dtype=float)
    return R_scan * np.stack([np.cos(angle), np.sin(angle)], axis=-1)


@dataclass(frozen=True)
class ChordParams:
    theta: np.ndarray
    s: np.ndarray


def angular_gap(a, b):
    """Unsigned angular distance on the circle, in ``[0, pi]``."""
    d = np.abs(wrap_angle(np.asarray(b, dtype=float) - np.asarray(a, dtype=float)))
    return np.minimum(d, TWO_PI - d)


def chord_params(a, b, R_scan):
    """Direction ``theta = (b-a)/|b-a|`` and foot point ``s`` of the chord."""
    if np.any(angular_gap(a, b) < 1e-12):
        raise DegenerateChord("detector positions coincide")
    pa = boundary_point(a, R_scan)
    pb = boundary_point(b, R_scan)
    d = pb - pa
    theta = d / np.linalg.norm(d, axis=-1, keepdims=True)
    s = pa - np.sum(pa * theta, axis=-1, keepdims=True) * theta
    return ChordParams(theta, s)


# -- partitions --------------------------------------------------------------

def dyadic_refine(edges):
    """Split every cell of a 1-D partition into two equal halves."""
    edges = np.asarray(edges, dtype=float)
    mids = 0.5 * (edges[:-1] + edges[1:])
    out = np.empty(2 * len(edges) - 1)
    out[0::2] = edges
    out[1::2] = mids
    return out


def locate(values, edges, what="value"):
    """Half-open cell index of each value: ``edges[i] <= v < edges[i+1]``."""
    values = np.asarray(values, dtype=float)
    if np.any(values < edges[0]) or np.any(values >= edges[-1]):
        raise OutOfRange(f"{what} outside [{edges[0]}, {edges[-1]})")
    edges = np.asarray(edges, dtype=float)
    n = len(edges) - 1
    w = (edges[-1] - edges[0]) / n
    if values.size > 4 * n and np.allclose(np.diff(edges), w, rtol=1e-12, atol=0):
        # equal widths: guess by division, then settle rounding at the edges
        i = np.clip(((values - edges[0]) / w).astype(np.int64), 0, n - 1)
        i -= values < edges[i]
        i += values >= edges[i + 1]
        return i
    return np.searchsorted(edges, values, side="right") - 1


def is_refinement(fine, coarse):
    """True if every coarse edge is also a fine edge (fine nests in coarse)."""
    fine = np.asarray(fine)
    coarse = np.asarray(coarse)
    if fine[0] != coarse[0] or fine[-1] != coarse[-1]:
        return False
    idx = np.searchsorted(fine, coarse)
    return bool(np.all(idx < len(fine)) and np.array_equal(fine[np.minimum(idx, len(fine) - 1)], coarse))


def parent_map(fine, coarse):
    """Index of the coarse cell containing each fine cell."""
    if not is_refinement(fine, coarse):
        raise ConfigError("partitions are not nested")
    return np.searchsorted(coarse, np.asarray(fine)[:-1], side="right") - 1


def overlap_fractions(target_edges, source_edges):
    """``O[i, j] = |target_i & source_j| / |source_j|`` for 1-D cells."""
    t = np.asarray(target_edges, dtype=float)
    s = np.asarray(source_edges, dtype=float)
    lo = np.maximum(t[:-1, None], s[None, :-1])
    hi = np.minimum(t[1:, None], s[None, 1:])
    return np.clip(hi - lo, 0.0, None) / np.diff(s)[None, :]


@dataclass(frozen=True)
class ProductPartition:
    """Tensor product of 1-D half-open partitions.

    ``scales`` converts each coordinate to length units (``R_scan`` for
    angles) when cell diameters are needed.
    """

    edges: tuple
    scales: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(np.asarray(e, dtype=float) for e in self.edges))
        if self.scales is None:
            object.__setattr__(self, "scales", (1.0,) * len(self.edges))

    @property
    def ndim(self):
        return len(self.edges)

    @property
    def shape(self):
        return tuple(len(e) - 1 for e in self.edges)

    @property
    def n_cells(self):
        return int(np.prod(self.shape))

    def widths(self):
        return [np.diff(e) for e in self.edges]

    def volumes(self):
        vol = np.ones(())
        for w, sc in zip(self.widths(), self.scales):
            vol = np.multiply.outer(vol, w * sc)
        return vol

    def max_diameter(self):
        return float(np.sqrt(sum((np.max(w) * sc) ** 2 for w, sc in zip(self.widths(), self.scales))))

    def locate(self, points):
        """Flat cell index of every point in an ``(n, ndim)`` array."""
        points = np.asarray(points, dtype=float).reshape(-1, self.ndim)
        idx = [locate(points[:, d], e, f"coordinate {d}") for d, e in enumerate(self.edges)]
        return np.ravel_multi_index(idx, self.shape) if idx else np.zeros(0, int)

    def counts(self, points):
        flat = self.locate(points)
        return np.bincount(flat, minlength=self.n_cells).reshape(self.shape)

    def aggregate(self, masses, source):
        """Masses of this partition's cells for a measure that is uniform on
        the cells of ``source`` with the given ``masses``."""
        out = np.asarray(masses, dtype=float)
        for d in range(self.ndim):
            O = overlap_fractions(self.edges[d], source.edges[d])
            out = np.moveaxis(np.tensordot(O, out, axes=([1], [d])), 0, d)
        return out

    def is_refinement_of(self, other):
        return all(is_refinement(f, c) for f, c in zip(self.edges, other.edges))


@dataclass(frozen=True)
class Level:
    """One level of the measurement partition: time bins and detector arcs."""

    time_edges: np.ndarray
    arc_edges: np.ndarray
    R_scan: float

    @property
    def N(self):
        return len(self.time_edges) - 1

    @property
    def M(self):
        return len(self.arc_edges) - 1

    @property
    def tau_lengths(self):
        return np.diff(self.time_edges)

    @property
    def arc_lengths(self):
        return np.diff(self.arc_edges) * self.R_scan

    @property
    def nu(self):
        """``nu``-measure ``L(tau_i) H(Gamma_j) H(Gamma_k)`` of every bin."""
        ell = self.arc_lengths
        return self.tau_lengths[:, None, None] * ell[None, :, None] * ell[None, None, :]

    def partition(self):
        return ProductPartition((self.time_edges, self.arc_edges, self.arc_edges),
                                (1.0, self.R_scan, self.R_scan))


def locate_bin(t, a, b, level):
    """Bin indices ``(i, j, k)`` of events ``(t, a, b)`` at ``level``."""
    i = locate(t, level.time_edges, "time")
    j = locate(wrap_angle(a), level.arc_edges, "angle")
    k = locate(wrap_angle(b), level.arc_edges, "angle")
    return i, j, k


@dataclass
class PartitionHierarchy:
    """Nested partitions of ``[0, T)`` and of the detector circle."""

    T: float
    R_scan: float
    time_levels: list = field(default_factory=list)
    arc_levels: list = field(default_factory=list)

    @classmethod
    def dyadic(cls, T, R_scan, n_levels, n_time0=1, n_arc0=8, refine_time=True, refine_arcs=True):
        """Dyadic hierarchy; either coordinate may be held fixed (cases A-D)."""
        t = np.linspace(0.0, T, n_time0 + 1)
        arcs = np.linspace(0.0, TWO_PI, n_arc0 + 1)
        h = cls(T, R_scan)
        for _ in range(n_levels):
            h.time_levels.append(t)
            h.arc_levels.append(arcs)
            t = dyadic_refine(t) if refine_time else t
            arcs = dyadic_refine(arcs) if refine_arcs else arcs
        return h

    @property
    def n_levels(self):
        return len(self.time_levels)

    def level(self, n):
        return Level(self.time_levels[n], self.arc_levels[n], self.R_scan)

    def refine(self):
        """Append a dyadic refinement of the finest level."""
        self.time_levels.append(dyadic_refine(self.time_levels[-1]))
        self.arc_levels.append(dyadic_refine(self.arc_levels[-1]))
        return self

    def is_nested(self):
        pairs = zip(self.time_levels[1:], self.time_levels[:-1])
        arcs = zip(self.arc_levels[1:], self.arc_levels[:-1])
        return all(is_refinement(f, c) for f, c in pairs) and all(is_refinement(f, c) for f, c in arcs)

    def quasiuniformity(self):
        """Bounds ``(c', c)`` on ``N_n |tau|`` and ``M_n |Gamma|`` over all levels."""
        vals = []
        for t in self.time_levels:
            vals.append((len(t) - 1) * np.diff(t) / self.T)
        for a in self.arc_levels:
            vals.append((len(a) - 1) * np.diff(a) / TWO_PI)
        allv = np.concatenate(vals)
        return float(allv.min()), float(allv.max())
