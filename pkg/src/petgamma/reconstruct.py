"""MAP reconstruction with Benamou-Brenier regularization.

The discrete functional is

    E(rho) = |A rho| - (1/q) sum_b E_b log(B rho)_b + beta min_eta S(rho, eta)

over nonnegative spacetime densities that satisfy the discrete continuity
equation together with a momentum.  It is minimized jointly in density and
momentum by a diagonally preconditioned primal-dual (Chambolle-Pock) scheme.
"""
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .bbflow import min_momentum, staggered
from .density import SpacetimeDensity, hat_integrals
from .errors import ConfigError, SolverStall
from .forward import GTable, Probabilities, binned_forward, detection_matrix, kernel_for
from .geometry import TWO_PI, Level, dyadic_refine

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-300

# Step ratios relative to the magnitude balance at the initial point,
# calibrated on the moving-blob problems of the test suite.
DATA_RATIO = 10.0
REG_RATIO = 3.0
ACTIVE_RTOL = 1e-6


# -- discretized forward operator ----------------------------------------------

class LevelOperator:
    """``B^u`` as a linear map from node-slice cell densities on ``D`` to bin
    values, with the symmetric pairs ``(j, k)`` and ``(k, j)`` merged.

    Inputs have shape ``(nt + 1, n_cells)``; outputs ``(N, n_pairs)`` where the
    pairs are ``j <= k``.
    """

    def __init__(self, geometry, level, u, probs, nt, n_ang=512):
        self.geometry = geometry
        self.level = level
        self.u = float(u)
        self.probs = probs
        self.nt = nt
        self.grid = geometry.grid()
        self.st = staggered(self.grid)
        M = level.M
        self.M = M
        self.ju, self.ku = np.triu_indices(M)
        full = detection_matrix(self.grid, level.arc_edges, kernel_for(geometry), geometry.R_scan, n_ang)
        rows = self.ju * M + self.ku
        self.D = full[rows].tocsr()
        self.DT = self.D.T.tocsr()
        times = np.linspace(0.0, geometry.T_horizon, nt + 1)
        self.W = hat_integrals(times, level.time_edges)
        self.tau = level.tau_lengths
        ell = level.arc_lengths
        self.pair_area = ell[self.ju] * ell[self.ku]
        self.nu = self.tau[:, None] * self.pair_area[None, :]
        self.h2 = self.grid.cell_area
        self.scat = u * probs.p_s / (TWO_PI * geometry.R_scan) ** 2
        # spacetime mass of node cell (k, c): trapezoid weight times cell area
        w = np.full(nt + 1, geometry.T_horizon / nt)
        w[[0, -1]] *= 0.5
        self.mass_weights = w[:, None] * self.h2 * np.ones((1, self.st.n_cells))

    @property
    def shape_in(self):
        return (self.nt + 1, self.st.n_cells)

    @property
    def shape_out(self):
        return (self.level.N, len(self.ju))

    def apply(self, R):
        m = R * self.h2
        det = (self.D @ m.T) @ self.W.T
        scat = (self.W @ m.sum(axis=1)) / self.tau
        return self.scat * scat[:, None] + self.probs.p_d * det.T / self.nu

    def adjoint(self, Y):
        Yn = Y / self.nu
        det = (self.DT @ Yn.T) @ self.W
        s = (self.scat * Y.sum(axis=1) / self.tau) @ self.W
        return self.h2 * (self.probs.p_d * det.T + s[:, None])

    def merge_counts(self, counts):
        """Fold ``(N, M, M)`` counts onto the pairs ``j <= k``."""
        c = np.asarray(counts, dtype=float)
        sym = c + np.swapaxes(c, 1, 2)
        diag = self.ju == self.ku
        out = sym[:, self.ju, self.ku]
        out[:, diag] = c[:, self.ju[diag], self.ku[diag]]
        return out

    def unmerge(self, Y):
        """Expand pair values to a symmetric ``(N, M, M)`` array."""
        out = np.zeros((Y.shape[0], self.M, self.M))
        out[:, self.ju, self.ku] = Y
        out[:, self.ku, self.ju] = Y
        return out

    @cached_property
    def abs_row_sums(self):
        return self.apply(np.ones(self.shape_in))

    @cached_property
    def abs_col_sums(self):
        return self.adjoint(np.ones(self.shape_out))

    @cached_property
    def scatter_constant(self):
        """Upper bound on bin values per unit spacetime mass, ``max K_bj / w_j``."""
        w = self.mass_weights[:, 0] / self.h2
        per_time = float(np.max((self.W / self.tau[:, None]).max(axis=0) / w))
        det = 0.0
        if self.probs.p_d > 0 and self.D.nnz:
            det = self.probs.p_d * float(self.D.multiply(1.0 / self.pair_area[:, None]).max())
        return per_time * (self.scat + det)


_OPS = {}


def level_operator(geometry, level, u, probs, nt, n_ang=512):
    key = (geometry, level.time_edges.tobytes(), level.arc_edges.tobytes(), float(u), probs, nt, n_ang)
    if key not in _OPS:
        if len(_OPS) > 8:
            _OPS.clear()
        _OPS[key] = LevelOperator(geometry, level, u, probs, nt, n_ang)
    return _OPS[key]


# -- problem and energies ----------------------------------------------------------

@dataclass
class ReconProblem:
    """Binned measurement plus model parameters.

    ``counts`` has shape ``(N, M, M)``.  Integer counts are a listmode
    measurement; real values are allowed for the noiseless expected-count
    surrogate ``q * A rho``.
    """

    counts: np.ndarray
    q: float
    u: float
    beta: float
    level: Level
    geometry: object
    probs: Probabilities = field(default_factory=Probabilities)
    n_ang: int = 512

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=float)
        if self.counts.shape != (self.level.N, self.level.M, self.level.M):
            raise ConfigError("counts must have shape (N, M, M)", "counts")
        if np.any(self.counts < 0):
            raise ConfigError("counts must be nonnegative", "counts")
        if not self.q > 0:
            raise ConfigError("q must be positive", "q")
        if not self.u > 0:
            raise ConfigError("u must be positive", "u")
        if self.beta < 0:
            raise ConfigError("beta must be nonnegative", "beta")

    @property
    def nt(self):
        return self.geometry.nt

    @property
    def operator(self):
        return level_operator(self.geometry, self.level, self.u, self.probs, self.nt, self.n_ang)

    @property
    def data_mass(self):
        """``|E / q|``."""
        return float(self.counts.sum() / self.q)


@dataclass(frozen=True)
class EnergyBreakdown:
    mass_term: float
    data_term: float
    reg_term: float
    total: float

    def as_row(self):
        return {"total": self.total, "mass": self.mass_term, "data": self.data_term, "reg": self.reg_term}


def _infinite(mass=np.inf):
    return EnergyBreakdown(mass, np.inf, np.inf, np.inf)


def _cells(rho, st):
    outside = np.abs(rho.slices).sum() - np.abs(st.cell_values(rho.slices)).sum()
    return st.cell_values(rho.slices), outside * rho.grid.cell_area


def energy_discrete(rho, problem, mc_rtol=1e-9):
    """Energy terms of ``rho``; infinite outside the mass-conserving class."""
    op = problem.operator
    R, outside = _cells(rho, op.st)
    mass = problem.probs.observed * rho.total_mass
    if outside > 1e-12 or np.any(R < 0) or not rho.is_mass_conserving(mc_rtol):
        return _infinite(mass)
    B = op.apply(R)
    data = -float(np.sum(op.merge_counts(problem.counts) * np.log(np.maximum(B, LOG_FLOOR)))) / problem.q
    reg = 0.0
    if problem.beta > 0:
        reg = problem.beta * min_momentum(rho, mass_rtol=max(mc_rtol, 1e-12), strict=False).value
    return EnergyBreakdown(mass, data, reg, mass + data + reg)


CASES = ("A", "B", "C", "D")


def limit_level(level, case, refine=2):
    """Quadrature level for the limit functional: the refined coordinates of
    ``case`` are subdivided ``refine`` more times."""
    if case not in CASES:
        raise ConfigError(f"case must be one of {CASES}", "partitions.case")
    t, a = level.time_edges, level.arc_edges
    for _ in range(refine):
        if case in ("C", "D"):
            t = dyadic_refine(t)
        if case in ("B", "D"):
            a = dyadic_refine(a)
    return Level(t, a, level.R_scan)


def expected_counts(rho, level, geometry, probs, q=1.0, n_ang=512):
    """``q A rho`` binned on ``level`` (mean of the Poisson measurement)."""
    op = level_operator(geometry, level, 1.0, probs, rho.nt, n_ang)
    R = op.st.cell_values(rho.slices)
    return q * op.unmerge(op.apply(R) * op.nu)


def energy_limit(rho, rho_dagger, u, case, level, geometry, probs=None, beta=0.0, refine=2, g=None,
                 method="xray"):
    """Limit functional with expected data ``A rho_dagger``.

    Refined coordinates are resolved on a quadrature level ``refine`` dyadic
    steps finer than ``level``, where bin averages stand in for pointwise
    densities; non-refined coordinates keep the bins of ``level``.  Both the
    model and the data go through the line-integral forward, which converges
    under refinement where the cell-centre pair binning does not.  Detections
    carry the exact mass of every time bin, so at ``u = 1`` the data part is a
    Kullback-Leibler divergence up to a constant and ``rho_dagger`` minimizes
    it.  ``method="pairs"`` uses the pair binning of :func:`energy_discrete`
    instead, so that in case ``"A"`` the two energies coincide.
    """
    probs = Probabilities() if probs is None else probs
    ql = limit_level(level, case, refine)
    mass = probs.observed * rho.total_mass
    if not rho.is_mass_conserving(1e-9) or np.any(rho.slices < 0):
        return _infinite(mass)
    if method == "xray":
        g = GTable.analytic(geometry) if g is None else g
        opts = dict(method="xray", g=g, exact_mass=True)
    else:
        opts = dict(method=method)
    B = binned_forward(rho, ql, u, probs, geometry, **opts).values
    m = binned_forward(rho_dagger, ql, 1.0, probs, geometry, **opts).bin_masses()
    data = -float(np.sum(m * np.log(np.maximum(B, LOG_FLOOR))))
    reg = 0.0
    if beta > 0:
        reg = beta * min_momentum(rho, strict=False).value
    return EnergyBreakdown(mass, data, reg, mass + data + reg)


def equicoercivity_bound(problem):
    """``kappa`` with ``E(rho) >= |rho|/kappa - kappa`` for all ``rho``.

    With ``C`` bounding both ``1/(p_s + p_d)`` and the bin values per unit
    mass, ``E >= |rho|/C - e log(C |rho|) >= |rho|/(2C) - 2 C^2 e^2`` where
    ``e = |E/q|``.
    """
    C = max(1.0 / problem.probs.observed, problem.operator.scatter_constant)
    e = problem.data_mass
    if e == 0:
        return C
    return max(2.0 * C, 2.0 * C * C * e * e)


# -- injectivity ---------------------------------------------------------------------

def injectivity_matrix(geometry, arc_edges, n_ang=512):
    """Rows: detected pair masses per unit cell mass, scaled by
    ``1/sqrt(|G_j||G_k|)`` so that refining detectors never lowers the
    smallest singular value."""
    grid = geometry.grid()
    A = detection_matrix(grid, arc_edges, kernel_for(geometry), geometry.R_scan, n_ang)
    ell = np.diff(arc_edges) * geometry.R_scan
    scale = 1.0 / np.sqrt(np.outer(ell, ell).ravel())
    return sparse.diags(scale) @ A


def injectivity_smin(geometry, arc_edges, n_ang=512, tol=1e-6, max_iter=10000):
    """Smallest singular value of the detection map by inverse power iteration."""
    A = injectivity_matrix(geometry, arc_edges, n_ang)
    N = (A.T @ A).toarray()
    try:
        L = np.linalg.cholesky(N)
    except np.linalg.LinAlgError:
        return 0.0
    from scipy.linalg import cho_solve
    rng = np.random.default_rng(0)
    x = rng.standard_normal(N.shape[0])
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = cho_solve((L, True), x)
        new = 1.0 / np.linalg.norm(y)
        x = y * new
        if abs(new - lam) <= tol * new:
            lam = new
            break
        lam = new
    return float(np.sqrt(lam))


# -- primal-dual solver ------------------------------------------------------------

@dataclass
class SolverParams:
    max_iter: int = 20000
    rtol: float = 1e-7
    window: int = 50
    check_every: int = 10
    strict: bool = False
    gamma: float = None


@dataclass
class ReconResult:
    rho: SpacetimeDensity
    eta: object
    energy: EnergyBreakdown
    trace: list
    iterations: int
    stalled: bool
    stationarity: float = np.nan


def _project_parabola(a, b, c):
    """Project ``(a, b)`` onto ``{a + b^2/(4c) <= 0}`` elementwise."""
    a = a.copy()
    b = b.copy()
    out = a + b * b / (4 * c) > 0
    if not np.any(out):
        return a, b
    A = a[out]
    Bv = b[out]
    # boundary point (-s^2/(4c), s) closest to (A, B): s^3 + p s + r = 0
    p = 4 * c * A + 8 * c * c
    r = -8 * c * c * Bv
    disc = (r / 2) ** 2 + (p / 3) ** 3
    s = np.empty_like(A)
    one = disc >= 0
    if np.any(one):
        sq = np.sqrt(disc[one])
        s[one] = np.cbrt(-r[one] / 2 + sq) + np.cbrt(-r[one] / 2 - sq)
    three = ~one
    if np.any(three):
        pp, rr = p[three], r[three]
        m = 2 * np.sqrt(-pp / 3)
        arg = np.clip(3 * rr / (pp * m), -1.0, 1.0)
        th = np.arccos(arg) / 3
        roots = np.stack([m * np.cos(th - 2 * np.pi * j / 3) for j in range(3)])
        d = (-roots ** 2 / (4 * c) - A[three]) ** 2 + (roots - Bv[three]) ** 2
        s[three] = roots[np.argmin(d, axis=0), np.arange(roots.shape[1])]
    a[out] = -s * s / (4 * c)
    b[out] = s
    return a, b


class _Solver:
    """Chambolle-Pock iteration with blockwise diagonal preconditioning.

    Each dual block ``i`` gets its own step ratio ``gamma_i``; with row sums
    ``r_i`` and entries ``K_ij`` the steps ``sigma_i = 1/(gamma_i r_i)`` and
    ``tau_j = 1/sum_i(|K_ij|/gamma_i)`` keep the preconditioned operator
    norm at most one.
    """

    def __init__(self, problem, init, gamma=None):
        self.problem = problem
        op = problem.operator
        self.op = op
        st = op.st
        self.st = st
        nt = problem.nt
        self.nt = nt
        self.dt = problem.geometry.T_horizon / nt
        nc, nf = st.n_cells, st.n_faces
        self.nc, self.nf = nc, nf
        self.c_data = op.merge_counts(problem.counts) / problem.q
        self.use_reg = problem.beta > 0
        self.creg = problem.beta * self.dt * op.h2
        # face density of interval k from node slices k and k + 1
        F1 = 0.5 * st.face_avg
        self.F1 = F1.tocsr()
        self.F1T = F1.T.tocsr()
        # linear cost of the mass term
        self.a = problem.probs.observed * op.mass_weights
        g_data = DATA_RATIO * self.balance(init) if gamma is None else float(gamma)
        self.sig_d = 1.0 / (g_data * op.abs_row_sums)
        self.sig_p = np.full((nt + 1, nc), 1.0 / g_data)
        inv = op.abs_col_sums / g_data + 1.0 / g_data
        if self.use_reg:
            # the perspective duals are about 2 c m / rho_face, so momenta and
            # duals differ by a factor of order rho / (2 c)
            g_reg = REG_RATIO * float(np.mean(init)) / (2.0 * self.creg)
            frow = np.asarray(abs(self.F1).sum(axis=1)).ravel()
            fcol = np.asarray(abs(self.F1).sum(axis=0)).ravel()
            self.sig_a = np.broadcast_to(1.0 / (2.0 * frow * g_reg), (nt, nf)).copy()
            self.sig_b = np.full((nt, nf), 1.0 / g_reg)
            reg_col = np.zeros((nt + 1, nc))
            reg_col[:-1] += fcol
            reg_col[1:] += fcol
            inv = inv + reg_col / g_reg
            self.tau_m = np.full((nt, nf), g_reg)
        self.tau_r = 1.0 / inv
        if not self.use_reg:
            # momenta only enter the continuity constraint
            h = problem.geometry.grid().h
            self.tau_m = np.full((nt, nf), float(np.mean(self.tau_r)) * (h / self.dt) ** 2)
        self._build_projection()

    def sigmas(self):
        out = [self.sig_d, self.sig_p]
        if self.use_reg:
            out += [self.sig_a, self.sig_b]
        return out

    def balance(self, R):
        """Step ratio of the data block that equalizes primal and dual
        magnitudes at ``R``.

        At the optimum the data dual is ``-c / (B rho)``; comparing its size
        with that of ``R`` in the preconditioned norms gives the ratio.
        """
        op = self.op
        y = self.c_data / np.maximum(op.apply(R), LOG_FLOOR)
        px = np.sqrt(np.sum(R * R * op.abs_col_sums))
        py = np.sqrt(np.sum(y * y * op.abs_row_sums))
        return float(px / py) if px > 0 and py > 0 else 1.0

    def _build_projection(self):
        nt, nc, nf = self.nt, self.nc, self.nf
        dt = self.dt
        I = sparse.identity(nc, format="csr")
        blocks_r = sparse.lil_matrix((nt, nt + 1))
        for k in range(nt):
            blocks_r[k, k] = -1.0 / dt
            blocks_r[k, k + 1] = 1.0 / dt
        Cr = sparse.kron(blocks_r.tocsr(), I)
        Cm = sparse.kron(sparse.identity(nt), self.st.div)
        self.C = sparse.hstack([Cr, Cm]).tocsr()
        self.Tvec = np.concatenate([self.tau_r.ravel(), self.tau_m.ravel()])
        CT = self.C.multiply(self.Tvec[None, :]).tocsr()
        self.lu = splu((CT @ self.C.T).tocsc())
        self.CT = CT

    def project(self, x):
        lam = self.lu.solve(self.C @ x)
        return x - self.CT.T @ lam

    def split(self, x):
        n_r = (self.nt + 1) * self.nc
        return x[:n_r].reshape(self.nt + 1, self.nc), x[n_r:].reshape(self.nt, self.nf)

    def face(self, R):
        return (self.F1 @ (R[:-1] + R[1:]).T).T

    def face_T(self, Y):
        Z = (self.F1T @ Y.T).T
        out = np.zeros((self.nt + 1, self.nc))
        out[:-1] += Z
        out[1:] += Z
        return out

    def rounded(self, R):
        """Nearest-ish point of the mass-conserving class: clip, equalize masses."""
        R = np.clip(R, 0.0, None)
        m = R.sum(axis=1)
        target = m.mean()
        R = R * (target / np.where(m > 0, m, 1.0))[:, None]
        return R

    def density(self, R):
        grid = self.op.grid
        sl = np.zeros((self.nt + 1, grid.n * grid.n))
        sl[:, self.st.cells] = R
        return SpacetimeDensity(sl.reshape(self.nt + 1, grid.n, grid.n), grid, self.problem.geometry.T_horizon)

    def K(self, R, Mv):
        out = [self.op.apply(R), R]
        if self.use_reg:
            out += [self.face(R), Mv]
        return out

    def run(self, init, params):
        p = self.problem
        x = self.project(np.concatenate([init.ravel(), np.zeros(self.nt * self.nf)]))
        R, Mv = self.split(x)
        Kx = self.K(R, Mv)
        Kxb = Kx
        ys = [np.zeros_like(k) for k in Kx]
        best = None
        trace = []
        history = []
        it = 0
        converged = False
        for it in range(1, params.max_iter + 1):
            sig = self.sigmas()
            # dual steps
            v = ys[0] + sig[0] * Kxb[0]
            yn = [0.5 * (v - np.sqrt(v * v + 4 * sig[0] * self.c_data)),
                  np.minimum(ys[1] + sig[1] * Kxb[1], 0.0)]
            if self.use_reg:
                yn += list(_project_parabola(ys[2] + sig[2] * Kxb[2], ys[3] + sig[3] * Kxb[3], self.creg))
            # primal step
            gR = self.op.adjoint(yn[0]) + yn[1] + self.a
            gM = np.zeros_like(Mv)
            if self.use_reg:
                gR = gR + self.face_T(yn[2])
                gM = yn[3]
            tr, tm = self.tau_r, self.tau_m
            Rn, Mn = self.split(self.project(np.concatenate([(R - tr * gR).ravel(), (Mv - tm * gM).ravel()])))
            Kxn = self.K(Rn, Mn)
            Kxb = [2 * a_ - b_ for a_, b_ in zip(Kxn, Kx)]
            Kx, ys, R, Mv = Kxn, yn, Rn, Mn
            if it % params.check_every == 0 or it == params.max_iter:
                Rr = self.rounded(R)
                e = energy_discrete(self.density(Rr), p, mc_rtol=1e-9)
                if best is None or e.total < best[0].total:
                    best = (e, Rr, it)
                trace.append({"iter": it, **best[0].as_row()})
                history.append((best[0].total, e.total))
                lag = params.window // params.check_every
                if len(history) > lag:
                    (old, cur_old), (new, cur) = history[-1 - lag], history[-1]
                    tol = params.rtol * max(abs(new), 1e-300)
                    # the iterates must have settled too, not merely oscillate above the best
                    if np.isfinite(new) and old - new <= tol and abs(cur - cur_old) <= tol:
                        converged = True
                        break
        e, Rr, _ = best
        rho = self.density(Rr)
        eta = None
        if p.beta > 0:
            eta = min_momentum(rho, strict=False).momentum
        result = ReconResult(rho, eta, e, trace, it, not converged)
        result.stationarity = stationarity(rho, p)
        return result


def initial_density(problem):
    """Uniform density on ``D`` with mass ``|E/q| / (p_s + p_d)`` overall."""
    op = problem.operator
    total = problem.data_mass / problem.probs.observed
    per_slice = total / problem.geometry.T_horizon
    return np.full(op.shape_in, per_slice / (op.st.n_cells * op.h2))


def minimize_map(problem, init=None, params=None):
    """Minimize the discrete energy over (rho, eta) with the continuity
    equation as a hard constraint.

    Stops when the best energy improved by less than ``rtol`` (relative) over
    the last ``window`` iterations, or at ``max_iter``; the latter marks the
    result as stalled and raises :class:`SolverStall` when ``strict``.
    """
    params = SolverParams() if params is None else params
    if problem.counts.sum() == 0:
        raise ConfigError("empty measurement: the minimizer is zero", "counts")
    R0 = initial_density(problem) if init is None else problem.operator.st.cell_values(init.slices)
    solver = _Solver(problem, R0, params.gamma)
    res = solver.run(R0, params)
    if res.stalled and params.strict:
        raise SolverStall(f"no convergence in {params.max_iter} iterations", res)
    return res


def stationarity(rho, problem):
    """Relative norm of the projected gradient of the energy at ``rho``.

    The gradient is taken with respect to spacetime cell masses and projected
    onto the tangent cone of nonnegative mass-conserving densities.
    """
    op = problem.operator
    R = op.st.cell_values(rho.slices)
    B = op.apply(R)
    c = op.merge_counts(problem.counts) / problem.q
    g = problem.probs.observed * op.mass_weights - op.adjoint(c / np.maximum(B, LOG_FLOOR))
    if problem.beta > 0:
        mm = min_momentum(rho, strict=False)
        if not np.isfinite(mm.value):
            return np.inf
        g = g + problem.beta * _bb_gradient(rho, mm, op)
    gm = g / op.mass_weights
    # cells below this relative level count as sitting on the bound
    active = R <= ACTIVE_RTOL * max(float(R.max()), 0.0)
    # remove per-slice constants (normal directions of equal slice masses)
    mu = np.zeros(gm.shape[0])
    for _ in range(5):
        free = ~active | (gm - mu[:, None] < 0)
        cnt = np.maximum(free.sum(axis=1), 1)
        mu = np.where(free, gm, 0.0).sum(axis=1) / cnt
        wts = op.mass_weights[:, 0]
        mu -= np.sum(mu * wts) / np.sum(wts)
    r = gm - mu[:, None]
    r = np.where(active, np.minimum(r, 0.0), r)
    total = energy_discrete(rho, problem).total
    return float(np.max(np.abs(r)) / (1.0 + abs(total)))


def _bb_gradient(rho, mm, op):
    """Derivative of ``min_eta S`` w.r.t. node cell densities (envelope formula)."""
    st = op.st
    dt = rho.dt
    h2 = rho.grid.cell_area
    vec = st.to_vector(mm.momentum)
    rb = st.face_density(rho.slices)
    ratio = np.where(rb > 0, vec / np.where(rb > 0, rb, 1.0), 0.0)
    per_face = -dt * h2 * ratio ** 2
    Z = (0.25 * (st.face_avg.T @ per_face.T)).T * 2.0
    g = np.zeros((rho.nt + 1, st.n_cells))
    g[:-1] += Z
    g[1:] += Z
    # multipliers of the continuity constraint
    lam = 2.0 * dt * h2 * mm.potentials
    g[:-1] -= lam / dt
    g[1:] += lam / dt
    return g
