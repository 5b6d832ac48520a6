"""Linear forward operators, the Gaussian noise model, and PSNR.

All operators are materialized as dense matrices (desk scale, n <= 4096), so
the adjoint is exactly the transpose and the data-consistency update can use a
direct solve. Operator applications are not charged to the complexity
counters; only velocity-field work is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolationError


class LinearOperator:
    """Dense m x n matrix with its adjoint; ``kind`` records the construction."""

    def __init__(self, matrix, kind="dense", meta=None):
        M = np.asarray(matrix, dtype=np.float64)
        if M.ndim != 2:
            raise ContractViolationError("operator matrix must be 2-D")
        self.matrix = M
        self.kind = kind
        self.meta = dict(meta or {})

    @property
    def shape(self):
        return self.matrix.shape

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.matrix.shape[1],):
            raise ContractViolationError(
                f"operator expects input of shape ({self.matrix.shape[1]},), got {x.shape}"
            )
        return self.matrix @ x

    def apply_adjoint(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (self.matrix.shape[0],):
            raise ContractViolationError(
                f"adjoint expects input of shape ({self.matrix.shape[0],}), got {y.shape}"
            )
        return self.matrix.T @ y


def mask_operator(indices, n) -> LinearOperator:
    """Keep the listed coordinates: A x = x[indices]."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0 or np.any(indices < 0) or np.any(indices >= n):
        raise ContractViolationError("mask indices out of range")
    if np.unique(indices).size != indices.size:
        raise ContractViolationError("mask indices must be distinct")
    M = np.zeros((indices.size, n))
    M[np.arange(indices.size), indices] = 1.0
    return LinearOperator(M, kind="mask", meta={"indices": indices.tolist(), "n": int(n)})


def gaussian_kernel(sigma, size) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ContractViolationError("kernel size must be a positive odd integer")
    if sigma <= 0:
        raise ContractViolationError("kernel sigma must be positive")
    r = np.arange(size) - size // 2
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def blur_operator(sigma, size, n, ndim=1) -> LinearOperator:
    """Discrete Gaussian blur with zero padding, as an explicit dense matrix.

    For ndim=2, n must be a perfect square and the blur is applied separably
    on the 2-D image (Kronecker product of the 1-D matrices).
    """
    k = gaussian_kernel(sigma, size)
    half = size // 2

    def conv_matrix(length):
        B = np.zeros((length, length))
        for i in range(length):
            for j, kv in enumerate(k):
                src = i + j - half
                if 0 <= src < length:
                    B[i, src] += kv
        return B

    if ndim == 1:
        M = conv_matrix(n)
    elif ndim == 2:
        side = int(round(np.sqrt(n)))
        if side * side != n:
            raise ContractViolationError("2-D blur needs a square image length")
        B = conv_matrix(side)
        M = np.kron(B, B)
    else:
        raise ContractViolationError("blur supports ndim 1 or 2")
    return LinearOperator(
        M, kind="blur", meta={"sigma": float(sigma), "size": int(size), "n": int(n), "ndim": int(ndim)}
    )


def subsample_operator(factor, n, ndim=1) -> LinearOperator:
    """Block-average downsampling by an integer factor (1-D runs or 2-D tiles)."""
    factor = int(factor)
    if factor < 1:
        raise ContractViolationError("subsample factor must be >= 1")
    if ndim == 1:
        if n % factor != 0:
            raise ContractViolationError("length must be divisible by the factor")
        m = n // factor
        M = np.zeros((m, n))
        for i in range(m):
            M[i, i * factor : (i + 1) * factor] = 1.0 / factor
    elif ndim == 2:
        side = int(round(np.sqrt(n)))
        if side * side != n or side % factor != 0:
            raise ContractViolationError("2-D subsampling needs a square image divisible by the factor")
        ms = side // factor
        M = np.zeros((ms * ms, n))
        for bi in range(ms):
            for bj in range(ms):
                row = bi * ms + bj
                for di in range(factor):
                    for dj in range(factor):
                        col = (bi * factor + di) * side + (bj * factor + dj)
                        M[row, col] = 1.0 / factor ** 2
    else:
        raise ContractViolationError("subsample supports ndim 1 or 2")
    return LinearOperator(
        M, kind="subsample", meta={"factor": factor, "n": int(n), "ndim": int(ndim)}
    )


def dense_operator(matrix) -> LinearOperator:
    return LinearOperator(matrix, kind="dense")


@dataclass
class Observation:
    """Measurement y = A x + noise, with the generating metadata."""

    y: np.ndarray
    noise_sigma: float
    operator: LinearOperator
    seed: int


def make_observation(op: LinearOperator, x_true, noise_sigma, seed) -> Observation:
    if noise_sigma < 0:
        raise ContractViolationError("noise sigma must be non-negative")
    clean = op.apply(x_true)
    rng = np.random.default_rng(seed)
    y = clean + noise_sigma * rng.standard_normal(clean.shape)
    return Observation(y=y, noise_sigma=float(noise_sigma), operator=op, seed=int(seed))


PSNR_CAP_DB = 200.0


def psnr(x, x_ref, data_range) -> float:
    """10 log10(data_range^2 / MSE), capped at 200 dB for exact matches."""
    x = np.asarray(x, dtype=np.float64)
    x_ref = np.asarray(x_ref, dtype=np.float64)
    if x.shape != x_ref.shape:
        raise ContractViolationError("PSNR inputs must have equal shapes")
    if data_range <= 0:
        raise ContractViolationError("data_range must be positive")
    mse = float(np.mean((x - x_ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(data_range ** 2 / mse))
