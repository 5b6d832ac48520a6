"""Flow-matching training, explicit-Euler integration, and synthetic data.

A vector field is either a ``LearnedField`` wrapping a :class:`VelocityNet` or
an ``AnalyticField`` with a closed-form rule and a declared Lipschitz constant
(used by the sensitivity checks). Both charge the global operation counters on
every evaluation, so solver-level complexity accounting is uniform across
field kinds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .counting import counters
from .errors import ContractViolationError, NumericError, TrainingDivergedError
from .net import VelocityNet, net_forward, net_value, net_vjp_input


# ---------------------------------------------------------------------------
# time grids
# ---------------------------------------------------------------------------

class TimeGrid:
    """Strictly increasing nodes t_0 = 0 < ... < t_K = 1."""

    def __init__(self, nodes):
        nodes = np.asarray(nodes, dtype=np.float64)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ContractViolationError("time grid needs at least two nodes")
        if nodes[0] != 0.0 or nodes[-1] != 1.0:
            raise ContractViolationError("time grid must start at 0 and end at 1")
        deltas = np.diff(nodes)
        if np.any(deltas <= 0):
            raise ContractViolationError("time grid nodes must be strictly increasing")
        if abs(deltas.sum() - 1.0) > 1e-15:
            raise ContractViolationError("segment lengths must sum to 1")
        self.nodes = nodes
        self.deltas = deltas

    @classmethod
    def uniform(cls, num_segments: int) -> "TimeGrid":
        if num_segments < 1:
            raise ContractViolationError("need at least one segment")
        return cls(np.linspace(0.0, 1.0, num_segments + 1))

    @property
    def num_segments(self) -> int:
        return self.nodes.size - 1

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.nodes, other.nodes)


# ---------------------------------------------------------------------------
# vector fields
# ---------------------------------------------------------------------------

class _AnalyticTape:
    """Evaluation-point record for closed-form Jacobians; counted like a tape."""

    __slots__ = ("field", "x", "t", "_closed")

    def __init__(self, field, x, t):
        self.field = field
        self.x = x
        self.t = t
        self._closed = False
        counters.tape_opened()

    def close(self):
        if not self._closed:
            self._closed = True
            counters.tape_closed()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


class AnalyticField:
    """Closed-form velocity field with an exact input-Jacobian rule."""

    def __init__(self, dim, fn, vjp, lipschitz, tag):
        self.dim = dim
        self._fn = fn
        self._vjp = vjp
        self.lipschitz = lipschitz
        self.tag = tag

    def value(self, x, t):
        counters.charge_forward()
        return self._fn(np.asarray(x, dtype=np.float64), t)

    def forward(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        counters.charge_forward()
        return self._fn(x, t), _AnalyticTape(self, x.copy(), t)

    def vjp_input(self, tape, w):
        if tape.field is not self:
            raise ContractViolationError("tape was not produced by this field")
        counters.charge_vjp()
        return self._vjp(tape.x, tape.t, np.asarray(w, dtype=np.float64))


class LearnedField:
    """Velocity field backed by a trained :class:`VelocityNet`."""

    def __init__(self, net: VelocityNet):
        self.net = net
        self.dim = net.dim
        self.lipschitz = None
        self.tag = "learned"

    def value(self, x, t):
        return net_value(self.net, x, t)

    def forward(self, x, t):
        return net_forward(self.net, x, t)

    def vjp_input(self, tape, w):
        return net_vjp_input(self.net, tape, w)


def zero_field(dim) -> AnalyticField:
    return AnalyticField(
        dim,
        fn=lambda x, t: np.zeros_like(x),
        vjp=lambda x, t, w: np.zeros_like(w),
        lipschitz=0.0,
        tag="zero",
    )


def linear_field(matrix) -> AnalyticField:
    M = np.asarray(matrix, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ContractViolationError("linear field needs a square matrix")
    L = float(np.linalg.norm(M, 2))
    return AnalyticField(
        M.shape[0],
        fn=lambda x, t: M @ x,
        vjp=lambda x, t, w: M.T @ w,
        lipschitz=L,
        tag="linear",
    )


def rotation_field_2d() -> AnalyticField:
    f = linear_field(np.array([[0.0, -1.0], [1.0, 0.0]]))
    f.tag = "rotation"
    return f


def tanh_field(matrix) -> AnalyticField:
    """Smooth nonlinear test field v(x) = tanh(Mx); Lipschitz constant ||M||_2."""
    M = np.asarray(matrix, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ContractViolationError("tanh field needs a square matrix")

    def vjp(x, t, w):
        s = np.tanh(M @ x)
        return M.T @ (w * (1.0 - s ** 2))

    return AnalyticField(
        M.shape[0],
        fn=lambda x, t: np.tanh(M @ x),
        vjp=vjp,
        lipschitz=float(np.linalg.norm(M, 2)),
        tag="tanh",
    )


# ---------------------------------------------------------------------------
# explicit Euler integration
# ---------------------------------------------------------------------------

def euler_step(field, x, t_k, delta_k, segment=None) -> np.ndarray:
    """One explicit Euler step x + delta_k * v(x, t_k). Charges one forward."""
    if delta_k <= 0:
        raise ContractViolationError(f"step size must be positive, got {delta_k}")
    out = x + delta_k * field.value(x, t_k)
    if not np.all(np.isfinite(out)):
        where = f" on segment {segment}" if segment is not None else ""
        raise NumericError(f"Euler step produced non-finite state at t={t_k}{where}")
    return out


def integrate(field, x0, grid: TimeGrid, substeps: int = 1) -> np.ndarray:
    """States at all grid nodes, one Euler step per segment (``substeps`` to refine).

    Returns an array of shape (K+1, d) with row k the state at t_k.
    """
    if substeps < 1:
        raise ContractViolationError("substeps must be >= 1")
    x = np.asarray(x0, dtype=np.float64).copy()
    states = np.empty((grid.num_segments + 1, x.size))
    states[0] = x
    for k in range(grid.num_segments):
        t, dt = grid.nodes[k], grid.deltas[k]
        sub = dt / substeps
        for j in range(substeps):
            x = euler_step(field, x, t + j * sub, sub, segment=k)
        states[k + 1] = x
    return states


def sample(field, n: int, grid: TimeGrid, seed) -> np.ndarray:
    """Draw n base samples from N(0, I) and integrate each to t = 1."""
    if n < 0:
        raise ContractViolationError("sample count must be non-negative")
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((n, field.dim))
    out = np.empty_like(x0)
    for i in range(n):
        out[i] = integrate(field, x0[i], grid)[-1]
    return out


def gronwall_check(field: AnalyticField, x1, x2, t_horizon: float, steps: int):
    """Measured amplification ||x(t;x1) - x(t;x2)|| / ||x1 - x2|| and the bound e^{Lt}.

    The flow-map sensitivity of an L-Lipschitz field is bounded by exp(L t);
    this integrates both starting points on a fine uniform grid and returns
    (measured ratio, bound).
    """
    if field.lipschitz is None:
        raise ContractViolationError("Gronwall check needs a field with a declared Lipschitz constant")
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    base = np.linalg.norm(x1 - x2)
    if base == 0.0:
        raise ContractViolationError("starting points must differ")
    dt = t_horizon / steps
    a, b = x1.copy(), x2.copy()
    for k in range(steps):
        t = k * dt
        a = a + dt * field.value(a, t)
        b = b + dt * field.value(b, t)
    ratio = float(np.linalg.norm(a - b) / base)
    return ratio, float(np.exp(field.lipschitz * t_horizon))


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------

_GMM_MEANS = np.array([[-2.0, 0.0], [2.0, 0.0]])
_GMM_STD = 0.5

_DATASET_DIMS = {"gauss2d": 2, "gmm2d": 2, "two_moons": 2, "blobs64": 64}


@dataclass
class SyntheticDataset:
    """Seeded generator for the desk-scale target distributions."""

    kind: str
    seed: int = 0
    size: int = 10000

    def __post_init__(self):
        if self.kind not in _DATASET_DIMS:
            raise ContractViolationError(
                f"unknown dataset kind {self.kind!r}; expected one of {sorted(_DATASET_DIMS)}"
            )

    @property
    def dim(self) -> int:
        return _DATASET_DIMS[self.kind]

    def sample(self, n: int, rng=None) -> np.ndarray:
        if rng is None:
            rng = np.random.default_rng(self.seed)
        elif not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        if self.kind == "gauss2d":
            return rng.standard_normal((n, 2))
        if self.kind == "gmm2d":
            comp = rng.integers(0, len(_GMM_MEANS), size=n)
            return _GMM_MEANS[comp] + _GMM_STD * rng.standard_normal((n, 2))
        if self.kind == "two_moons":
            half = rng.integers(0, 2, size=n)
            theta = rng.uniform(0.0, np.pi, size=n)
            x = np.where(half == 0, np.cos(theta), 1.0 - np.cos(theta))
            y = np.where(half == 0, np.sin(theta), 0.5 - np.sin(theta))
            pts = np.stack([x, y], axis=1)
            return pts + 0.05 * rng.standard_normal((n, 2))
        # blobs64: one Gaussian bump per 8x8 image, random center/width/height
        side = 8
        yy, xx = np.mgrid[0:side, 0:side]
        out = np.empty((n, side * side))
        cx = rng.uniform(1.5, 5.5, size=n)
        cy = rng.uniform(1.5, 5.5, size=n)
        width = rng.uniform(0.8, 2.0, size=n)
        amp = rng.uniform(0.5, 1.0, size=n)
        for i in range(n):
            img = amp[i] * np.exp(-(((xx - cx[i]) ** 2 + (yy - cy[i]) ** 2) / (2 * width[i] ** 2)))
            out[i] = img.ravel()
        return out


# ---------------------------------------------------------------------------
# conditional flow-matching training
# ---------------------------------------------------------------------------

def _forward_batch(net, X):
    A = [X]
    H = X
    L = net.n_layers
    for l in range(L):
        Z = H @ net.weight(l).T + net.bias(l)
        H = np.tanh(Z) if l < L - 1 else Z
        A.append(H)
    return H, A

def _backward_batch(net, A, G):
    grad = np.zeros_like(net.params)
    delta = G
    L = net.n_layers
    for l in range(L - 1, -1, -1):
        if l < L - 1:
            delta = delta * (1.0 - A[l + 1] ** 2)
        w0, b0, e = net._offsets[l]
        grad[w0:b0] = (delta.T @ A[l]).ravel()
        grad[b0:e] = delta.sum(axis=0)
        if l > 0:
            delta = delta @ net.weight(l)
    return grad


def cfm_loss(net: VelocityNet, x0, x1, t):
    """Conditional flow-matching loss on the straight-line path and its gradient.

    Interpolates x_t = (1-t) x0 + t x1, regresses v(x_t, t) onto the constant
    path velocity x1 - x0, and returns (mean squared residual, packed parameter
    gradient). The batched backward pass equals the mean of the per-sample
    ``net_vjp_params`` cotangents.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if x0.shape[0] == 0:
        raise ContractViolationError("empty training batch")
    if x0.shape != x1.shape or t.shape[0] != x0.shape[0]:
        raise ContractViolationError("batch arrays must have matching leading dimension")
    B = x0.shape[0]
    xt = (1.0 - t[:, None]) * x0 + t[:, None] * x1
    X = np.concatenate([xt, t[:, None]], axis=1)
    v, A = _forward_batch(net, X)
    counters.charge_forward(B)
    resid = v - (x1 - x0)
    loss = float(np.mean(np.sum(resid ** 2, axis=1)))
    grad = _backward_batch(net, A, 2.0 * resid / B)
    counters.charge_vjp(B)
    return loss, grad


@dataclass
class TrainSchedule:
    steps: int
    step_size: float
    batch_size: int
    seed: int = 0


def train_flow(dataset: SyntheticDataset, net: VelocityNet, schedule: TrainSchedule):
    """SGD on the conditional flow-matching objective.

    Returns (net, trace) where trace is a list of (step, loss) pairs; the net
    is updated in place. On divergence the last finite parameter vector is
    attached to the raised :class:`TrainingDivergedError`.
    """
    if dataset.dim != net.dim:
        raise ContractViolationError(
            f"dataset dim {dataset.dim} does not match net dim {net.dim}"
        )
    rng = np.random.default_rng(schedule.seed)
    trace = []
    last_finite = net.params.copy()
    for step in range(schedule.steps):
        x1 = dataset.sample(schedule.batch_size, rng)
        x0 = rng.standard_normal(x1.shape)
        t = rng.uniform(0.0, 1.0, size=x1.shape[0])
        loss, grad = cfm_loss(net, x0, x1, t)
        if not np.isfinite(loss):
            raise TrainingDivergedError(
                f"loss became non-finite at step {step}", last_params=last_finite, step=step
            )
        net.params -= schedule.step_size * grad
        if np.all(np.isfinite(net.params)):
            last_finite = net.params.copy()
        else:
            raise TrainingDivergedError(
                f"parameters became non-finite at step {step}",
                last_params=last_finite,
                step=step,
            )
        trace.append((step, loss))
    return net, trace
