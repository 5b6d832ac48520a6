"""Latent prior and data-consistency subproblem solvers.

The radial Gaussian prior penalizes distance from the typical-set sphere
||x|| = sqrt(d-1) rather than pulling toward the origin:

    R(x) = ||x||^2 / 2 - (d - 1) log ||x||

Its gradient x - (d-1) x / ||x||^2 vanishes exactly on that sphere.

Data-consistency updates solve min_x phi(x) + (alpha/2) ||x - v||^2 for the
three supported phi variants: quadratic (closed form via an SPD solve),
one-norm with identity operator (soft thresholding), and a decoder-composed
quadratic solved by damped gradient descent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import (
    ContractViolationError,
    NumericError,
    SingularityError,
    SolverError,
    UnsupportedCombinationError,
)
from .linesearch import armijo_backtrack
from .net import Mlp
from .operators import LinearOperator

RADIAL_EPS = 1e-8
DIRECT_SOLVE_MAX = 4096
PROX_RESIDUAL_RTOL = 1e-10


@dataclass
class RadialPrior:
    """Radial Gaussian latent prior; ``weight`` is carried for configuration,
    the solver applies its own lambda from the solver config."""

    dim: int
    weight: float = 1.0

    def __post_init__(self):
        if self.dim < 2:
            raise ContractViolationError("radial prior needs dimension >= 2")
        if self.weight < 0:
            raise ContractViolationError("prior weight must be non-negative")


def _radial_norm(x0):
    x0 = np.asarray(x0, dtype=np.float64)
    r = float(np.linalg.norm(x0))
    if r <= RADIAL_EPS:
        raise SingularityError(f"radial prior evaluated at ||x|| = {r} <= {RADIAL_EPS}")
    return x0, r


def radial_value(prior: RadialPrior, x0) -> float:
    x0, r = _radial_norm(x0)
    return 0.5 * r * r - (prior.dim - 1) * np.log(r)


def radial_grad(prior: RadialPrior, x0) -> np.ndarray:
    x0, r = _radial_norm(x0)
    return x0 - (prior.dim - 1) * x0 / (r * r)


# ---------------------------------------------------------------------------
# decoders
# ---------------------------------------------------------------------------

class ToyDecoder(Mlp):
    """Small feedforward decoder z -> x (no time channel); reuses the MLP
    kernels for forward and VJP. Decoder work is not charged to the flow
    counters (data-consistency cost sits outside the complexity model)."""

    @property
    def dim_in(self):
        return self.layer_widths[0]

    @property
    def dim_out(self):
        return self.layer_widths[-1]

    def decode(self, z):
        return self.raw_value(np.asarray(z, dtype=np.float64))

    def decode_with_tape(self, z):
        out, acts, _ = self.raw_forward(np.asarray(z, dtype=np.float64))
        return out, acts

    def vjp(self, acts, w):
        return self.raw_vjp_input(acts, w)


def identity_decoder(dim) -> ToyDecoder:
    dec = ToyDecoder([dim, dim])
    dec.params[:] = 0.0
    dec.weight(0)[np.diag_indices(dim)] = 1.0
    return dec


# ---------------------------------------------------------------------------
# data-fit variants
# ---------------------------------------------------------------------------

class QuadraticFit:
    """phi(x) = 1/2 ||A x - y||^2."""

    variant = "quadratic"

    def __init__(self, op: LinearOperator, y):
        self.op = op
        self.y = np.asarray(y, dtype=np.float64)
        if self.y.shape != (op.shape[0],):
            raise ContractViolationError("observation length does not match the operator")
        self._ata = None
        self._aty = None
        self._cho = {}

    def value(self, x) -> float:
        r = self.op.apply(x) - self.y
        return 0.5 * float(r @ r)

    def grad(self, x) -> np.ndarray:
        return self.op.apply_adjoint(self.op.apply(x) - self.y)

    def _normal_parts(self):
        if self._ata is None:
            A = self.op.matrix
            self._ata = A.T @ A
            self._aty = A.T @ self.y
        return self._ata, self._aty


class OneNormFit:
    """phi(x) = ||x - y||_1 (identity forward operator only)."""

    variant = "one_norm"

    def __init__(self, y, op: LinearOperator | None = None):
        self.y = np.asarray(y, dtype=np.float64)
        if op is not None:
            m, n = op.shape
            if m != n or not np.array_equal(op.matrix, np.eye(n)):
                raise UnsupportedCombinationError(
                    "one-norm data fit supports only the identity operator"
                )
        self.op = op

    def value(self, x) -> float:
        return float(np.sum(np.abs(np.asarray(x) - self.y)))

    def grad(self, x):
        raise UnsupportedCombinationError("one-norm data fit has no smooth gradient")


class LatentFit:
    """phi(z) = 1/2 ||A D(z) - y||^2 with a decoder network D."""

    variant = "latent"

    def __init__(self, op: LinearOperator, y, decoder: ToyDecoder):
        self.op = op
        self.y = np.asarray(y, dtype=np.float64)
        self.decoder = decoder
        if op.shape[1] != decoder.dim_out:
            raise ContractViolationError("operator input dim must match decoder output dim")
        if self.y.shape != (op.shape[0],):
            raise ContractViolationError("observation length does not match the operator")

    def value(self, z) -> float:
        r = self.op.apply(self.decoder.decode(z)) - self.y
        return 0.5 * float(r @ r)

    def grad(self, z) -> np.ndarray:
        x, acts = self.decoder.decode_with_tape(z)
        r = self.op.apply(x) - self.y
        return self.decoder.vjp(acts, self.op.apply_adjoint(r))


# ---------------------------------------------------------------------------
# subproblem solvers
# ---------------------------------------------------------------------------

def prox_quadratic(fit: QuadraticFit, x_k, alpha) -> np.ndarray:
    """Exact minimizer of phi(x) + (alpha/2) ||x - x_k||^2 for quadratic phi:

        x = (A^T A + alpha I)^{-1} (A^T y + alpha x_k)

    Solved directly (Cholesky) up to DIRECT_SOLVE_MAX unknowns, by conjugate
    gradients above; the relative residual must reach 1e-10.
    """
    if alpha <= 0:
        raise ContractViolationError("coupling weight alpha must be positive")
    x_k = np.asarray(x_k, dtype=np.float64)
    ata, aty = fit._normal_parts()
    n = ata.shape[0]
    rhs = aty + alpha * x_k
    if n <= DIRECT_SOLVE_MAX:
        key = float(alpha)
        if key not in fit._cho:
            fit._cho[key] = scipy.linalg.cho_factor(ata + alpha * np.eye(n))
        cho = fit._cho[key]
        x = scipy.linalg.cho_solve(cho, rhs)
        # one refinement step keeps the residual at working precision
        r = rhs - (ata @ x + alpha * x)
        x = x + scipy.linalg.cho_solve(cho, r)
    else:
        import scipy.sparse.linalg as sla

        M = ata + alpha * np.eye(n)
        x, info = sla.cg(M, rhs, rtol=1e-12, atol=0.0, maxiter=10 * n)
        if info != 0:
            res = float(np.linalg.norm(M @ x - rhs))
            raise SolverError(f"conjugate gradient did not converge (info={info})", residual=res)
    res = float(np.linalg.norm(ata @ x + alpha * x - rhs))
    bound = PROX_RESIDUAL_RTOL * float(np.linalg.norm(rhs))
    if res > max(bound, 1e-300):
        raise SolverError("prox solve residual above tolerance", residual=res)
    return x


def soft_threshold(v, tau) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)


def prox_one_norm(fit: OneNormFit, x_k, alpha) -> np.ndarray:
    """Componentwise shrink of x_k toward y by 1/alpha, clipped at y."""
    if alpha <= 0:
        raise ContractViolationError("coupling weight alpha must be positive")
    x_k = np.asarray(x_k, dtype=np.float64)
    return fit.y + soft_threshold(x_k - fit.y, 1.0 / alpha)


@dataclass
class InnerSchedule:
    steps: int
    step_size: float
    armijo: bool = True


def data_update_iterative(fit, z_k, alpha, inner: InnerSchedule):
    """Damped gradient descent on phi(z) + (alpha/2) ||z - z_k||^2 from z_k.

    Works for the latent and quadratic variants (any fit with a smooth
    ``grad``). With Armijo on (the default) the objective trace is
    non-increasing. Returns (z_star, objective trace).
    """
    if alpha <= 0:
        raise ContractViolationError("coupling weight alpha must be positive")
    z = np.asarray(z_k, dtype=np.float64).copy()
    z_ref = z.copy()

    def objective(u):
        d = u - z_ref
        return fit.value(u) + 0.5 * alpha * float(d @ d)

    f = objective(z)
    if not np.isfinite(f):
        raise NumericError("non-finite data-consistency objective at the starting point")
    trace = [f]
    for _ in range(inner.steps):
        g = fit.grad(z) + alpha * (z - z_ref)
        if inner.armijo:
            res = armijo_backtrack(objective, z, g, inner.step_size, f0=f)
            z, f = res.x, res.f_new
        else:
            z = z - inner.step_size * g
            f = objective(z)
        if not np.isfinite(f):
            raise NumericError("data-consistency objective became non-finite")
        trace.append(f)
    return z, trace
