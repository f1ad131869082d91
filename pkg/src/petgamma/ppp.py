"""Poisson point processes, partition discrepancies and rate harnesses."""
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShrinkNotAllowed
from .geometry import ProductPartition
from .rng import stream


@dataclass(frozen=True)
class IntensityMeasure:
    """Finite atomless measure, uniform inside the cells of ``partition``."""

    partition: ProductPartition
    cell_masses: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.cell_masses, dtype=float).reshape(self.partition.shape)
        if np.any(m < 0) or not np.all(np.isfinite(m)):
            raise ConfigError("cell masses must be finite and nonnegative", "intensity")
        object.__setattr__(self, "cell_masses", m)

    @classmethod
    def lebesgue(cls, lo=0.0, hi=1.0):
        edges = np.array([lo, hi], dtype=float)
        return cls(ProductPartition((edges,)), np.array([hi - lo]))

    @property
    def total_mass(self):
        return float(self.cell_masses.sum())

    def masses_on(self, partition):
        """Masses of the cells of another product partition."""
        return partition.aggregate(self.cell_masses, self.partition)


@dataclass(frozen=True)
class PointMeasure:
    """Finite sum of unit Dirac masses at the rows of ``points``."""

    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        object.__setattr__(self, "points", p)

    def __len__(self):
        return len(self.points)

    def counts(self, partition):
        if len(self) == 0:
            return np.zeros(partition.shape, dtype=np.int64)
        return partition.counts(self.points)


def _place_uniform(rng, partition, counts):
    """Scatter ``counts[c]`` uniform points in each cell ``c``, cell by cell."""
    flat = counts.ravel()
    total = int(flat.sum())
    u = rng.random((total, partition.ndim))
    pts = np.empty((total, partition.ndim))
    cell_index = np.indices(partition.shape).reshape(partition.ndim, -1)
    for d, e in enumerate(partition.edges):
        lo = e[:-1][cell_index[d]]
        hi = e[1:][cell_index[d]]
        # keep points strictly inside the half-open cell
        top = np.repeat(np.nextafter(hi, lo), flat)
        lo, width = np.repeat(lo, flat), np.repeat(hi - lo, flat)
        pts[:, d] = np.minimum(lo + u[:, d] * width, top)
    return pts


def sample_poisson(lam, q, rng):
    counts = rng.poisson(q * lam.cell_masses)
    return PointMeasure(_place_uniform(rng, lam.partition, counts))


def sample_independent(lam, q, seed, *keys):
    """Poisson process with intensity ``q * lam``, deterministic in ``(seed, keys)``."""
    if not q > 0:
        raise ConfigError("intensity scale must be positive", "q")
    return sample_poisson(lam, q, stream(seed, "independent", *keys))


@dataclass
class CoupledSamplerState:
    """Nested family of samples: growing ``q`` only ever appends points."""

    lam: IntensityMeasure
    seed: int
    current_q: float = 0.0
    accumulated: PointMeasure = None
    step: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.accumulated is None:
            self.accumulated = PointMeasure(np.zeros((0, self.lam.partition.ndim)))


def coupled_extend(state, q_new):
    """Extend ``state`` to scale ``q_new`` and return the accumulated sample.

    The increment on ``(current_q, q_new]`` is an independent Poisson process
    with intensity ``(q_new - current_q) * lam``.
    """
    if q_new < state.current_q:
        raise ShrinkNotAllowed(f"cannot shrink from q={state.current_q} to q={q_new}")
    if q_new == state.current_q:
        return state.accumulated
    rng = stream(state.seed, "coupled", state.step)
    inc = sample_poisson(state.lam, q_new - state.current_q, rng)
    state.accumulated = PointMeasure(np.concatenate([state.accumulated.points, inc.points]))
    state.history.append((q_new, len(state.accumulated)))
    state.current_q = q_new
    state.step += 1
    return state.accumulated


def discrepancy_Z(E, q, lam, partition):
    """``sum_C |E(C)/q - lam(C)|`` over the cells of ``partition``."""
    return float(np.abs(E.counts(partition) / q - lam.masses_on(partition)).sum())


def flat_upper_bound(E, q, lam, partition):
    """Upper bound on the flat distance between ``lam`` and ``E/q``:
    largest cell diameter times ``|lam|`` plus the partition discrepancy."""
    return partition.max_diameter() * lam.total_mass + discrepancy_Z(E, q, lam, partition)


RATE_COLUMNS = ("n", "q", "K", "r", "seed", "Z", "Z_over_r", "flat_bound")


def rate_experiment(lam, qs, partitions, rs, seeds, regime="a", ns=None):
    """Discrepancy along a schedule ``(q_n, partition_n, r_n)`` for every seed.

    Regime ``"a"`` draws an independent sample per level; regime ``"b"``
    extends one coupled sample per seed and requires nested partitions.
    Returns a list of row dicts with keys ``RATE_COLUMNS``.
    """
    if not len(qs) == len(partitions) == len(rs):
        raise ConfigError("schedules must have equal length", "sequences")
    if not seeds:
        raise ConfigError("at least one seed is required", "seeds")
    if np.any(np.diff(qs) < 0):
        raise ConfigError("q_n must be nondecreasing", "sequences.q")
    if regime == "b":
        for fine, coarse in zip(partitions[1:], partitions[:-1]):
            if not fine.is_refinement_of(coarse):
                raise ConfigError("coupled regime needs nested partitions", "partitions")
    elif regime != "a":
        raise ConfigError(f"unknown regime {regime!r}", "regime")
    ns = list(range(1, len(qs) + 1)) if ns is None else list(ns)
    rows = []
    for seed in seeds:
        state = CoupledSamplerState(lam, seed) if regime == "b" else None
        for n, q, part, r in zip(ns, qs, partitions, rs):
            if regime == "a":
                E = sample_independent(lam, q, seed, n)
            else:
                E = coupled_extend(state, q)
            Z = discrepancy_Z(E, q, lam, part)
            rows.append({"n": n, "q": float(q), "K": part.n_cells, "r": float(r), "seed": seed,
                         "Z": Z, "Z_over_r": Z / r, "flat_bound": flat_upper_bound(E, q, lam, part)})
    return rows
