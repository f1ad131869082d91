"""Experiment configuration: one JSON document validated with pydantic."""
import json
import logging
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError
from .forward import Probabilities
from .geometry import GeometryConfig

log = logging.getLogger(__name__)


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GeometryModel(_Model):
    R_dom: float = 0.7
    R_scan: float = 1.0
    T_horizon: float = 1.0
    grid_n: int = 32
    nt: int = 8

    def build(self):
        return GeometryConfig(self.R_dom, self.R_scan, self.T_horizon, self.grid_n, self.nt)


class ProbabilitiesModel(_Model):
    p_a: float = 0.2
    p_s: float = 0.2
    p_d: float = 0.6

    @model_validator(mode="after")
    def _check(self):
        if min(self.p_a, self.p_s, self.p_d) < 0 or abs(self.p_a + self.p_s + self.p_d - 1.0) > 1e-12:
            raise ValueError("p_a + p_s + p_d must equal 1 with nonnegative entries")
        if not self.p_s > 0:
            raise ValueError("p_s must be positive")
        return self

    def build(self):
        return Probabilities(self.p_a, self.p_s, self.p_d)


class Generator(_Model):
    """Schedule ``base * ratio**i`` (geometric) or ``base + step*i`` (linear)."""

    generator: Literal["geometric", "linear", "constant"]
    base: float
    ratio: float = 1.0
    step: float = 0.0
    count: int = Field(ge=1)

    def values(self):
        i = np.arange(self.count)
        if self.generator == "geometric":
            return list(self.base * self.ratio ** i)
        if self.generator == "linear":
            return list(self.base + self.step * i)
        return [self.base] * self.count


Schedule = Union[list[float], Generator]


def expand(schedule):
    if schedule is None:
        return None
    if isinstance(schedule, Generator):
        return [float(v) for v in schedule.values()]
    return [float(v) for v in schedule]


class SequencesModel(_Model):
    q: Optional[Schedule] = None
    beta: Optional[Schedule] = None
    u: Optional[Schedule] = None
    delta: Optional[Schedule] = None
    r: Optional[Schedule] = None

    def get(self, name):
        return expand(getattr(self, name))

    @model_validator(mode="after")
    def _check(self):
        q = self.get("q")
        if q is not None:
            if any(v <= 0 for v in q):
                raise ValueError("q: entries must be positive")
            if any(b < a for a, b in zip(q, q[1:])):
                raise ValueError("q: must be nondecreasing")
        for name in ("beta", "u", "delta", "r"):
            vals = self.get(name)
            if vals is not None and any(v < 0 for v in vals):
                raise ValueError(f"{name}: entries must be nonnegative")
        u = self.get("u")
        if u is not None and any(v <= 0 for v in u):
            raise ValueError("u: entries must be positive")
        delta = self.get("delta")
        if delta is not None and any(v <= 0 for v in delta):
            raise ValueError("delta: entries must be positive")
        return self


class PartitionsModel(_Model):
    case: Literal["A", "B", "C", "D"] = "D"
    regime: Literal["a", "b"] = "a"
    n_time0: int = Field(2, ge=1)
    n_arc0: int = Field(16, ge=2)
    levels: int = Field(3, ge=1)


class GroundTruthModel(_Model):
    kind: Literal["moving_blob", "static_blob", "jump"] = "moving_blob"
    start: tuple[float, float] = (-0.2, 0.05)
    end: tuple[float, float] = (0.2, 0.05)
    sigma: float = Field(0.12, gt=0)
    mass: float = Field(1.0, gt=0)
    t_jump: float = 0.5


class SolverModel(_Model):
    max_iter: int = Field(20000, ge=1)
    rtol: float = Field(1e-7, ge=0)
    window: int = Field(50, ge=1)
    check_every: int = Field(10, ge=1)


class ExperimentConfig(_Model):
    geometry: GeometryModel = GeometryModel()
    probabilities: ProbabilitiesModel = ProbabilitiesModel()
    partitions: PartitionsModel = PartitionsModel()
    sequences: SequencesModel = SequencesModel()
    seeds: list[int] = [0]
    assouad_a: float = Field(1.0, gt=0)
    output_dir: str = "out"
    ground_truth: GroundTruthModel = GroundTruthModel()
    solver: SolverModel = SolverModel()
    workers: int = Field(1, ge=1)

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v:
            raise ValueError("at least one seed is required")
        return v

    @model_validator(mode="after")
    def _geometry(self):
        try:
            self.geometry.build()
        except ConfigError as e:
            raise ValueError(f"{e.path}: {e.message}") from None
        return self


def parse_config(data):
    """Validate a config mapping; errors become :class:`ConfigError` with a field path."""
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        err = e.errors()[0]
        loc = [str(p) for p in err["loc"]]
        msg = err["msg"]
        # validators report the offending field first in the message
        if msg.startswith("Value error, "):
            msg = msg[len("Value error, "):]
            head, sep, rest = msg.partition(": ")
            if sep and " " not in head:
                loc.append(head)
                msg = rest
        path = ".".join(loc) or "config"
        raise ConfigError(msg, path) from None


def load_config(path):
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"no such file: {p}", "config") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e}", "config") from None
    return parse_config(data)


def vanishing_regularization_ok(qs, betas=None, Ns=None):
    """Finite-sample proxy for ``1/beta_(n+1) = o(q_n)`` or ``N_n = o(q_n)``:
    ``q_n beta_(n+1)`` or ``q_n / N_n`` strictly increasing along the schedule.
    Logs a warning and returns False when neither holds."""
    qs = np.asarray(qs, dtype=float)
    ok = False
    if betas is not None and len(qs) >= 2:
        prod = qs[:-1] * np.asarray(betas, dtype=float)[1:]
        ok = len(prod) < 2 or bool(np.all(np.diff(prod) > 0))
    if not ok and Ns is not None and len(qs) >= 2:
        ok = bool(np.all(np.diff(qs / np.asarray(Ns, dtype=float)) > 0))
    if not ok:
        log.warning("neither q_n beta_(n+1) nor q_n / N_n grows along the schedule")
    return ok
