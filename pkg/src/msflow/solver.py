"""Trajectory-splitting solver: Gauss-Seidel backward sweeps, alternating
minimization, the single-shooting baseline, and complexity accounting.

The trajectory objective over shooting points X = [x_0, ..., x_K] with the
terminal variable x* held fixed is

    J(X) = (alpha/2) ||x* - x_K||^2 + lam * R(x_0)
         + (gamma/2) sum_{k=1..K} ||x_k - F_{k-1,k}(x_{k-1})||^2,

where F_{k,k+1}(x) = x + Delta_k v(x, t_k) is the one-step explicit Euler
segment map (composed over ``substeps`` sub-steps when configured). A backward
sweep updates x_K, then x_{K-1} ... x_1, then x_0, each by a gradient step
that consumes the freshest later-index neighbor (Gauss-Seidel order) and the
previous iterate's earlier-index neighbor. Exact mode applies the segment
Jacobian J_F = I + Delta_k J_v via one VJP per interior/initial block;
Jacobian-free mode replaces J_F by the identity and performs no VJPs.

Segment evaluations during a sweep are interleaved so that at most one
recorded activation tape is alive at any instant while still charging exactly
K forwards per sweep: the tape recorded when producing the consistency target
z_{k+1} = F(x_k^old) is exactly the tape block k's VJP needs, and it is closed
before the next segment forward opens.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from .counting import counters
from .errors import (
    ContractViolationError,
    NumericError,
    UnsupportedCombinationError,
)
from .flow import TimeGrid, integrate
from .linesearch import armijo_backtrack
from .operators import Observation, psnr
from .priors import (
    InnerSchedule,
    RadialPrior,
    data_update_iterative,
    prox_one_norm,
    prox_quadratic,
    radial_grad,
    radial_value,
)

GRAD_MODES = ("exact", "jacobian_free", "full_gd")
LINE_SEARCH_MODES = ("off", "armijo")
INIT_ANCHORS = ("adjoint", "observation", "gaussian")


@dataclass
class SolverConfig:
    """All solver hyperparameters; validated on construction."""

    alpha: float = 1.0            # terminal coupling weight
    gamma: float = 1.0            # trajectory-consistency penalty
    lam: float = 0.0              # radial prior weight
    eta: float = 0.1              # sweep step size
    num_segments: int = 6         # K shooting segments (= n_t for single shooting)
    inner_sweeps: int = 1         # L sweeps per outer iteration
    outer_iters: int = 100
    grad_mode: str = "jacobian_free"
    line_search: str = "off"
    armijo_c1: float = 1e-4
    armijo_max_halvings: int = 30
    init_beta: float = 0.5
    init_anchor: str = "adjoint"
    substeps: int = 1
    seed: int = 0
    early_stop_tol: float | None = None
    inner_steps: int = 50         # latent data-consistency inner GD steps
    inner_step_size: float = 0.1

    def __post_init__(self):
        if self.alpha <= 0 or self.gamma <= 0:
            raise ContractViolationError("alpha and gamma must be positive")
        if self.lam < 0:
            raise ContractViolationError("lam must be non-negative")
        if self.eta <= 0:
            raise ContractViolationError("eta must be positive")
        if self.num_segments < 1 or self.inner_sweeps < 1 or self.substeps < 1:
            raise ContractViolationError("num_segments, inner_sweeps, substeps must be >= 1")
        if self.outer_iters < 0:
            raise ContractViolationError("outer_iters must be non-negative")
        if self.grad_mode not in GRAD_MODES:
            raise ContractViolationError(f"grad_mode must be one of {GRAD_MODES}")
        if self.line_search not in LINE_SEARCH_MODES:
            raise ContractViolationError(f"line_search must be one of {LINE_SEARCH_MODES}")
        if not 0.0 <= self.init_beta <= 1.0:
            raise ContractViolationError("init_beta must lie in [0, 1]")
        if self.init_anchor not in INIT_ANCHORS:
            raise ContractViolationError(f"init_anchor must be one of {INIT_ANCHORS}")


@dataclass
class Trajectory:
    """Shooting points (K+1, d), their time grid, and the terminal variable."""

    points: np.ndarray
    grid: TimeGrid
    x_star: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.x_star = np.asarray(self.x_star, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] != self.grid.num_segments + 1:
            raise ContractViolationError(
                f"expected {self.grid.num_segments + 1} shooting points, got {self.points.shape}"
            )
        if not np.all(np.isfinite(self.points)) or not np.all(np.isfinite(self.x_star)):
            raise NumericError("trajectory contains non-finite values")

    @property
    def num_segments(self) -> int:
        return self.grid.num_segments

    @property
    def dim(self) -> int:
        return self.points.shape[1]


# ---------------------------------------------------------------------------
# segment maps (explicit Euler, optionally composed over substeps)
# ---------------------------------------------------------------------------

def _seg_forward(field, x, k, grid, substeps):
    """Recorded segment map evaluation; returns (F(x), tapes)."""
    t0, dt = grid.nodes[k], grid.deltas[k]
    sub = dt / substeps
    tapes = []
    z = x
    for j in range(substeps):
        v, tape = field.forward(z, t0 + j * sub)
        tapes.append(tape)
        z = z + sub * v
    return z, tapes


def _seg_value(field, x, k, grid, substeps):
    t0, dt = grid.nodes[k], grid.deltas[k]
    sub = dt / substeps
    z = x
    for j in range(substeps):
        z = z + sub * field.value(z, t0 + j * sub)
    return z


def _seg_vjp(field, tapes, w, k, grid, substeps):
    """J_F(x)^T w through the composed Euler map (tapes stay open)."""
    sub = grid.deltas[k] / substeps
    for tape in reversed(tapes):
        w = w + sub * field.vjp_input(tape, w)
    return w


def _close(tapes):
    for tape in tapes:
        tape.close()


# ---------------------------------------------------------------------------
# objective and block gradients
# ---------------------------------------------------------------------------

def trajectory_objective(traj: Trajectory, x_star, field, prior: RadialPrior, cfg: SolverConfig) -> float:
    """J(X) for fixed x*; charges K * substeps forward evaluations."""
    X = traj.points
    K = traj.num_segments
    x_star = np.asarray(x_star, dtype=np.float64)
    diff = x_star - X[K]
    J = 0.5 * cfg.alpha * float(diff @ diff)
    if cfg.lam != 0.0:
        J += cfg.lam * radial_value(prior, X[0])
    for k in range(1, K + 1):
        z = _seg_value(field, X[k - 1], k - 1, traj.grid, cfg.substeps)
        r = X[k] - z
        term = 0.5 * cfg.gamma * float(r @ r)
        if not np.isfinite(term):
            raise NumericError(f"non-finite trajectory penalty on segment {k}")
        J += term
    return J


def _block_objective(field, prior, cfg, grid, X, x_star, k):
    """phi_k(u): the terms of J that depend on block k, as a callable."""
    K = grid.num_segments

    if k == K:
        z = _seg_value(field, X[K - 1], K - 1, grid, cfg.substeps)

        def phi(u):
            a = x_star - u
            b = u - z
            return 0.5 * cfg.alpha * float(a @ a) + 0.5 * cfg.gamma * float(b @ b)

        return phi

    if k == 0:
        def phi(u):
            r = X[1] - _seg_value(field, u, 0, grid, cfg.substeps)
            val = 0.5 * cfg.gamma * float(r @ r)
            if cfg.lam != 0.0:
                val += cfg.lam * radial_value(prior, u)
            return val

        return phi

    z = _seg_value(field, X[k - 1], k - 1, grid, cfg.substeps)

    def phi(u):
        r = X[k + 1] - _seg_value(field, u, k, grid, cfg.substeps)
        b = u - z
        return 0.5 * cfg.gamma * float(b @ b) + 0.5 * cfg.gamma * float(r @ r)

    return phi


def _block_grad_at(field, prior, cfg, grid, X, x_star, k, u):
    """Exact gradient of J with respect to block k, evaluated at u."""
    K = grid.num_segments
    if k == K:
        z = _seg_value(field, X[K - 1], K - 1, grid, cfg.substeps)
        return -cfg.alpha * (x_star - u) + cfg.gamma * (u - z)
    z_next, tapes = _seg_forward(field, u, k, grid, cfg.substeps)
    w = X[k + 1] - z_next
    jt = _seg_vjp(field, tapes, w, k, grid, cfg.substeps)
    _close(tapes)
    if k == 0:
        g = -cfg.gamma * jt
        if cfg.lam != 0.0:
            g = g + cfg.lam * radial_grad(prior, u)
        return g
    z = _seg_value(field, X[k - 1], k - 1, grid, cfg.substeps)
    return cfg.gamma * (u - z) - cfg.gamma * jt


# ---------------------------------------------------------------------------
# backward sweep (Gauss-Seidel) and the full-gradient reference step
# ---------------------------------------------------------------------------

@dataclass
class BlockStep:
    block: int
    accepted: bool
    step_size: float
    f_old: float
    f_new: float
    decrement: float        # required Armijo decrease c1 * eta * ||g||^2


@dataclass
class SweepInfo:
    step_norm_sq: float = 0.0
    line_search_failures: int = 0
    block_steps: list = dc_field(default_factory=list)


def _take_block_step(x_old, g, eta_k, phi, cfg, info, k):
    """One block update: fixed step or Armijo backtracking on phi."""
    if cfg.line_search == "armijo":
        res = armijo_backtrack(
            phi, x_old, g, eta_k, c1=cfg.armijo_c1, max_halvings=cfg.armijo_max_halvings
        )
        info.block_steps.append(
            BlockStep(k, res.accepted, res.step_size, res.f_old, res.f_new, res.decrement)
        )
        if not res.accepted:
            info.line_search_failures += 1
        return res.x
    return x_old - eta_k * g


def backward_sweep(traj: Trajectory, x_star, field, prior: RadialPrior, cfg: SolverConfig,
                   eta_blocks=None):
    """One Gauss-Seidel backward sweep over all blocks; returns (new trajectory, info).

    Consistency targets z_k = F_{k-1,k}(x_{k-1}) are always evaluated at the
    pre-sweep points; block k's update uses the already-updated x_{k+1}. Exact
    mode charges one VJP per interior/initial block, Jacobian-free none.
    """
    if cfg.grad_mode == "full_gd":
        return full_gradient_step(traj, x_star, field, prior, cfg, eta_blocks)
    exact = cfg.grad_mode == "exact"
    X = traj.points.copy()
    grid = traj.grid
    K = traj.num_segments
    x_star = np.asarray(x_star, dtype=np.float64)
    info = SweepInfo()

    def eta_for(k):
        return cfg.eta if eta_blocks is None else float(eta_blocks[k])

    # terminal block: z_K with its tape (recorded at x_{K-1}^old, kept for block K-1)
    z_next, tapes = _seg_forward(field, X[K - 1], K - 1, grid, cfg.substeps)
    g = -cfg.alpha * (x_star - X[K]) + cfg.gamma * (X[K] - z_next)
    phi = _phi_terminal(x_star, z_next, cfg) if cfg.line_search == "armijo" else None
    old = X[K].copy()
    X[K] = _take_block_step(X[K], g, eta_for(K), phi, cfg, info, K)
    info.step_norm_sq += float(np.sum((X[K] - old) ** 2))

    for k in range(K - 1, 0, -1):
        w = X[k + 1] - z_next
        jt = _seg_vjp(field, tapes, w, k, grid, cfg.substeps) if exact else w
        _close(tapes)
        z_k, tapes = _seg_forward(field, X[k - 1], k - 1, grid, cfg.substeps)
        g = cfg.gamma * (X[k] - z_k) - cfg.gamma * jt
        phi = None
        if cfg.line_search == "armijo":
            phi = _phi_interior(field, cfg, grid, X, z_k, k)
        old = X[k].copy()
        X[k] = _take_block_step(X[k], g, eta_for(k), phi, cfg, info, k)
        info.step_norm_sq += float(np.sum((X[k] - old) ** 2))
        z_next = z_k

    # initial block: VJP through segment 0 via the carried tape
    w = X[1] - z_next
    jt = _seg_vjp(field, tapes, w, 0, grid, cfg.substeps) if exact else w
    _close(tapes)
    g = -cfg.gamma * jt
    if cfg.lam != 0.0:
        g = g + cfg.lam * radial_grad(prior, X[0])
    phi = None
    if cfg.line_search == "armijo":
        phi = _phi_initial(field, prior, cfg, grid, X)
    old = X[0].copy()
    X[0] = _take_block_step(X[0], g, eta_for(0), phi, cfg, info, 0)
    info.step_norm_sq += float(np.sum((X[0] - old) ** 2))

    return Trajectory(X, grid, traj.x_star.copy()), info


def _phi_terminal(x_star, z, cfg):
    def phi(u):
        a = x_star - u
        b = u - z
        return 0.5 * cfg.alpha * float(a @ a) + 0.5 * cfg.gamma * float(b @ b)
    return phi


def _phi_interior(field, cfg, grid, X, z_k, k):
    def phi(u):
        r = X[k + 1] - _seg_value(field, u, k, grid, cfg.substeps)
        b = u - z_k
        return 0.5 * cfg.gamma * float(b @ b) + 0.5 * cfg.gamma * float(r @ r)
    return phi


def _phi_initial(field, prior, cfg, grid, X):
    def phi(u):
        r = X[1] - _seg_value(field, u, 0, grid, cfg.substeps)
        val = 0.5 * cfg.gamma * float(r @ r)
        if cfg.lam != 0.0:
            val += cfg.lam * radial_value(prior, u)
        return val
    return phi


def full_gradient_step(traj: Trajectory, x_star, field, prior: RadialPrior, cfg: SolverConfig,
                       eta_blocks=None):
    """Simultaneous (Jacobi) exact-gradient step on all blocks, the reference
    full-gradient-descent mode for the three-way comparison."""
    X = traj.points
    grid = traj.grid
    K = traj.num_segments
    x_star = np.asarray(x_star, dtype=np.float64)
    info = SweepInfo()
    grads = np.zeros_like(X)
    for k in range(K):
        z, tapes = _seg_forward(field, X[k], k, grid, cfg.substeps)
        w = X[k + 1] - z
        grads[k + 1] += cfg.gamma * (X[k + 1] - z)
        grads[k] += -cfg.gamma * _seg_vjp(field, tapes, w, k, grid, cfg.substeps)
        _close(tapes)
    grads[K] += -cfg.alpha * (x_star - X[K])
    if cfg.lam != 0.0:
        grads[0] += cfg.lam * radial_grad(prior, X[0])

    if eta_blocks is not None:
        direction = grads * np.asarray(eta_blocks, dtype=np.float64)[:, None]
        eta0 = 1.0
    else:
        direction = grads
        eta0 = cfg.eta

    if cfg.line_search == "armijo":
        def J_of(u_flat):
            cand = Trajectory(u_flat.reshape(X.shape), grid, traj.x_star.copy())
            return trajectory_objective(cand, x_star, field, prior, cfg)

        res = armijo_backtrack(
            J_of, X.ravel(), direction.ravel(), eta0,
            c1=cfg.armijo_c1, max_halvings=cfg.armijo_max_halvings,
        )
        info.block_steps.append(BlockStep(-1, res.accepted, res.step_size, res.f_old, res.f_new, res.decrement))
        if not res.accepted:
            info.line_search_failures += 1
        X_new = res.x.reshape(X.shape)
    else:
        X_new = X - eta0 * direction
    info.step_norm_sq = float(np.sum((X_new - X) ** 2))
    return Trajectory(X_new, grid, traj.x_star.copy()), info


def full_gradient(traj: Trajectory, x_star, field, prior: RadialPrior, cfg: SolverConfig) -> np.ndarray:
    """Exact gradient of J with respect to every block, at the current points."""
    X = traj.points
    return np.stack(
        [_block_grad_at(field, prior, cfg, traj.grid, X, np.asarray(x_star, dtype=np.float64), k, X[k])
         for k in range(traj.num_segments + 1)]
    )


# ---------------------------------------------------------------------------
# block Lipschitz estimation (power iteration on finite-differenced gradients)
# ---------------------------------------------------------------------------

def estimate_block_lipschitz(traj: Trajectory, field, prior: RadialPrior, cfg: SolverConfig,
                             max_iters=100, rel_tol=1e-6, fd_eps=1e-5, seed=0):
    """Largest-curvature estimates L_k per block via power iteration on
    central finite differences of the exact block gradient.

    Returns (estimates, converged flags); a False flag means the iteration hit
    ``max_iters`` and the latest value is a best effort.
    """
    X = traj.points
    x_star = traj.x_star
    K = traj.num_segments
    rng = np.random.default_rng(seed)
    out = np.zeros(K + 1)
    flags = np.zeros(K + 1, dtype=bool)
    for k in range(K + 1):
        v = rng.standard_normal(traj.dim)
        v /= np.linalg.norm(v)
        eps = fd_eps * (1.0 + float(np.linalg.norm(X[k])))
        lam_prev = 0.0
        converged = False
        lam = 0.0
        for _ in range(max_iters):
            gp = _block_grad_at(field, prior, cfg, traj.grid, X, x_star, k, X[k] + eps * v)
            gm = _block_grad_at(field, prior, cfg, traj.grid, X, x_star, k, X[k] - eps * v)
            hv = (gp - gm) / (2.0 * eps)
            lam = float(np.linalg.norm(hv))
            if lam == 0.0:
                converged = True
                break
            v = hv / lam
            if abs(lam - lam_prev) <= rel_tol * max(1.0, lam):
                converged = True
                break
            lam_prev = lam
        out[k] = lam
        flags[k] = converged
    return out, flags


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _anchor_vector(observation: Observation, cfg: SolverConfig, dim, rng):
    if cfg.init_anchor == "adjoint":
        return observation.operator.apply_adjoint(observation.y)
    if cfg.init_anchor == "observation":
        if observation.y.shape != (dim,):
            raise ContractViolationError(
                "anchor 'observation' needs a square operator (m == n)"
            )
        return observation.y.copy()
    return rng.standard_normal(dim)


def _init_x0(observation: Observation, field, grid: TimeGrid, cfg: SolverConfig, rng):
    """Data-anchored start x_0 = sqrt(beta) w(0) + sqrt(1-beta) z.

    w(0) is obtained by integrating the flow backward from the anchor
    (negated Euler steps from t=1 down to t=0, K forward evaluations)."""
    w = _anchor_vector(observation, cfg, field.dim, rng)
    x = np.asarray(w, dtype=np.float64).copy()
    for k in range(grid.num_segments, 0, -1):
        x = x - grid.deltas[k - 1] * field.value(x, grid.nodes[k])
    z = rng.standard_normal(field.dim)
    return np.sqrt(cfg.init_beta) * x + np.sqrt(1.0 - cfg.init_beta) * z


def init_trajectory(observation: Observation, field, cfg: SolverConfig) -> Trajectory:
    """Anchored initialization: backward-integrated, beta-mixed x_0, interior
    points linearly interpolated to the forward endpoint, x* at the endpoint."""
    grid = TimeGrid.uniform(cfg.num_segments)
    rng = np.random.default_rng(cfg.seed)
    x0 = _init_x0(observation, field, grid, cfg, rng)
    endpoint = integrate(field, x0, grid, substeps=cfg.substeps)[-1]
    K = grid.num_segments
    ks = np.arange(K + 1)[:, None] / K
    points = x0[None, :] + ks * (endpoint - x0)[None, :]
    counters.set_trajectory_states(K + 1)
    return Trajectory(points, grid, endpoint.copy())


# ---------------------------------------------------------------------------
# solve drivers
# ---------------------------------------------------------------------------

@dataclass
class IterationRecord:
    """One log row; ``sweep`` is 1..L for sweep rows, 0 for the row written
    after the iteration's data-consistency update (and for the init row)."""

    outer_iter: int
    sweep: int
    J: float
    phi: float
    residual: float
    psnr: float
    n_forward: int
    n_vjp: int
    peak_live_tapes: int
    step_norm: float


@dataclass
class SolveResult:
    x_star: np.ndarray
    trajectory: Trajectory | None
    log: list
    sweep_infos: list
    x0: np.ndarray | None = None


def _data_consistency_update(fit, x_k, cfg: SolverConfig):
    if fit.variant == "quadratic":
        return prox_quadratic(fit, x_k, cfg.alpha)
    if fit.variant == "one_norm":
        return prox_one_norm(fit, x_k, cfg.alpha)
    if fit.variant == "latent":
        z, _ = data_update_iterative(
            fit, x_k, cfg.alpha, InnerSchedule(cfg.inner_steps, cfg.inner_step_size)
        )
        return z
    raise UnsupportedCombinationError(f"unknown data-fit variant {fit.variant!r}")


def _metrics(x_star, observation, fit, x_true, data_range):
    recon = x_star
    if fit.variant == "latent":
        recon = fit.decoder.decode(x_star)
    r = observation.operator.apply(recon) - observation.y
    residual = float(np.linalg.norm(r))
    phi = fit.value(x_star)
    p = float("nan")
    if x_true is not None:
        p = psnr(recon, x_true, data_range)
    return phi, residual, p


def ms_flow_solve(observation: Observation, field, prior: RadialPrior, fit, cfg: SolverConfig,
                  x_true=None, data_range=1.0, eta_blocks=None) -> SolveResult:
    """Alternating minimization: L backward sweeps, then the data-consistency
    update matching the fit variant, for ``outer_iters`` rounds.

    Diagnostics (objective traces, residuals, PSNR) are computed with counting
    paused, so logged counter columns reflect algorithm work only.
    """
    traj = init_trajectory(observation, field, cfg)
    x_star = traj.x_star.copy()
    log = []
    infos = []

    def snap_row(outer, sweep, step_norm):
        with counters.paused():
            J = trajectory_objective(traj, x_star, field, prior, cfg)
            phi, residual, p = _metrics(x_star, observation, fit, x_true, data_range)
        s = counters.snapshot()
        log.append(IterationRecord(outer, sweep, J, phi, residual, p,
                                   s.n_forward, s.n_vjp, counters.span_peak(), step_norm))

    counters.begin_span()
    snap_row(0, 0, float("nan"))

    prev_J = log[-1].J
    for it in range(1, cfg.outer_iters + 1):
        counters.begin_span()
        for ell in range(1, cfg.inner_sweeps + 1):
            traj, info = backward_sweep(traj, x_star, field, prior, cfg, eta_blocks)
            infos.append(info)
            snap_row(it, ell, float(np.sqrt(info.step_norm_sq)))
        x_old = x_star
        x_star = _data_consistency_update(fit, traj.points[-1], cfg)
        traj = replace(traj, x_star=x_star.copy())
        snap_row(it, 0, float(np.linalg.norm(x_star - x_old)))
        if cfg.early_stop_tol is not None:
            if abs(prev_J - log[-1].J) < cfg.early_stop_tol:
                break
            prev_J = log[-1].J
    return SolveResult(x_star, traj, log, infos, x0=traj.points[0].copy())


def d_flow_solve(observation: Observation, field, prior: RadialPrior, fit, cfg: SolverConfig,
                 x_true=None, data_range=1.0) -> SolveResult:
    """Single-shooting baseline: gradient descent on Phi(x(1)) + lam R(x_0),
    differentiated by a reverse VJP sweep through all retained segment tapes.

    Per iteration this charges exactly n_t forwards and n_t VJPs and retains
    n_t tapes simultaneously (the memory cost multiple shooting removes).
    """
    grid = TimeGrid.uniform(cfg.num_segments)
    rng = np.random.default_rng(cfg.seed)
    x0 = _init_x0(observation, field, grid, cfg, rng)
    counters.set_trajectory_states(1)
    log = []
    infos = []

    def objective(u):
        x = u
        for k in range(grid.num_segments):
            x = _seg_value(field, x, k, grid, cfg.substeps)
        val = fit.value(x)
        if cfg.lam != 0.0:
            val += cfg.lam * radial_value(prior, u)
        return val

    def snap_row(outer, step_norm):
        with counters.paused():
            x1 = x0
            for k in range(grid.num_segments):
                x1 = _seg_value(field, x1, k, grid, cfg.substeps)
            J = fit.value(x1) + (cfg.lam * radial_value(prior, x0) if cfg.lam != 0.0 else 0.0)
            phi, residual, p = _metrics(x1, observation, fit, x_true, data_range)
        s = counters.snapshot()
        log.append(IterationRecord(outer, 0, J, phi, residual, p,
                                   s.n_forward, s.n_vjp, counters.span_peak(), step_norm))
        return x1

    counters.begin_span()
    x1 = snap_row(0, float("nan"))

    for it in range(1, cfg.outer_iters + 1):
        counters.begin_span()
        # forward pass retaining every segment's tapes
        all_tapes = []
        x = x0
        for k in range(grid.num_segments):
            x, tapes = _seg_forward(field, x, k, grid, cfg.substeps)
            all_tapes.append(tapes)
        x1 = x
        # reverse sweep, consuming tapes from the last segment backwards
        w = fit.grad(x1)
        for k in range(grid.num_segments - 1, -1, -1):
            w = _seg_vjp(field, all_tapes[k], w, k, grid, cfg.substeps)
            _close(all_tapes[k])
        g = w
        if cfg.lam != 0.0:
            g = g + cfg.lam * radial_grad(prior, x0)
        if cfg.line_search == "armijo":
            res = armijo_backtrack(objective, x0, g, cfg.eta,
                                   c1=cfg.armijo_c1, max_halvings=cfg.armijo_max_halvings)
            info = SweepInfo(step_norm_sq=float(np.sum((res.x - x0) ** 2)),
                             line_search_failures=0 if res.accepted else 1,
                             block_steps=[BlockStep(0, res.accepted, res.step_size,
                                                    res.f_old, res.f_new, res.decrement)])
            x0 = res.x
        else:
            x0 = x0 - cfg.eta * g
            info = SweepInfo(step_norm_sq=float(cfg.eta ** 2 * (g @ g)))
        if not np.all(np.isfinite(x0)):
            raise NumericError(f"single-shooting iterate diverged at iteration {it}")
        infos.append(info)
        x1 = snap_row(it, float(np.sqrt(info.step_norm_sq)))
    return SolveResult(x1, None, log, infos, x0=x0.copy())


# ---------------------------------------------------------------------------
# complexity model
# ---------------------------------------------------------------------------

def expected_iteration_cost(method: str, cfg: SolverConfig):
    """(n_forward, n_vjp, peak_live_tapes) predicted per outer iteration."""
    K = cfg.num_segments
    s = cfg.substeps
    L = cfg.inner_sweeps
    if method == "d_flow":
        return K * s, K * s, K * s
    if method == "ms_flow":
        if cfg.grad_mode == "jacobian_free":
            return L * K * s, 0, s
        return L * K * s, L * K * s, s
    if method == "ms_flow_gd":
        return L * K * s, L * K * s, s
    raise ContractViolationError(f"unknown method {method!r}")


def counter_report(log, method: str, cfg: SolverConfig):
    """Validate per-iteration counter deltas against the complexity model.

    Only fixed-step runs are checked (a line search adds objective evaluations
    by design). Returns a report dict with the per-iteration deltas; raises
    :class:`CounterModelError` naming the first deviating counter otherwise.
    """
    from .errors import CounterModelError

    if cfg.line_search != "off":
        raise UnsupportedCombinationError(
            "counter model applies to fixed-step runs; disable the line search"
        )
    exp_fwd, exp_vjp, exp_peak = expected_iteration_cost(method, cfg)
    # iteration boundaries: rows with sweep == 0 (init row, then one per iteration)
    bounds = [r for r in log if r.sweep == 0]
    if len(bounds) < 2:
        raise ContractViolationError("log contains no completed iterations")
    deltas = []
    for prev, cur in zip(bounds[:-1], bounds[1:]):
        d_fwd = cur.n_forward - prev.n_forward
        d_vjp = cur.n_vjp - prev.n_vjp
        deltas.append((cur.outer_iter, d_fwd, d_vjp, cur.peak_live_tapes))
        if d_fwd != exp_fwd:
            raise CounterModelError(
                f"n_forward delta {d_fwd} != expected {exp_fwd} at iteration {cur.outer_iter}"
            )
        if d_vjp != exp_vjp:
            raise CounterModelError(
                f"n_vjp delta {d_vjp} != expected {exp_vjp} at iteration {cur.outer_iter}"
            )
        if cur.peak_live_tapes != exp_peak:
            raise CounterModelError(
                f"peak_live_tapes {cur.peak_live_tapes} != expected {exp_peak} "
                f"at iteration {cur.outer_iter}"
            )
    return {
        "method": method,
        "expected_per_iteration": {"n_forward": exp_fwd, "n_vjp": exp_vjp, "peak_live_tapes": exp_peak},
        "iterations": deltas,
    }
