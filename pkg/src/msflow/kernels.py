"""Hot per-sample MLP kernels: forward, value-only forward, and VJPs.

Parameters are packed into one flat float64 vector, per layer ``W`` row-major
followed by ``b``. Hidden layers use tanh, the output layer is linear. The
numba-compiled kernels are the default; set ``MSFLOW_NUMBA=0`` to select the
pure-numpy fallback (same math, BLAS-backed). ``benchmarks/bench_kernels.py``
compares the two paths.

Buffer layout for one recorded forward pass:
  acts: [a_0 | a_1 | ... | a_L]  with a_0 the input, a_l the post-activation
        output of layer l-1 (length sum(widths))
  pres: [z_1 | ... | z_L]        pre-activations (length sum(widths[1:]))
"""

from __future__ import annotations

import os

import numpy as np

_env = os.environ.get("MSFLOW_NUMBA", "1").strip().lower()
USE_NUMBA = _env not in ("0", "false", "off", "no")
if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover
        USE_NUMBA = False

BACKEND = "numba" if USE_NUMBA else "numpy"


def param_count(widths) -> int:
    return int(sum(widths[l + 1] * (widths[l] + 1) for l in range(len(widths) - 1)))


def layer_offsets(widths):
    """(w_start, b_start, end) triples into the packed parameter vector."""
    offs = []
    o = 0
    for l in range(len(widths) - 1):
        m, n = widths[l + 1], widths[l]
        offs.append((o, o + m * n, o + m * n + m))
        o += m * n + m
    return offs


# ---------------------------------------------------------------------------
# numpy fallback path
# ---------------------------------------------------------------------------

def forward_numpy(params, widths, xin, acts, pres):
    n_layers = len(widths) - 1
    acts[: widths[0]] = xin
    a_off = 0
    z_off = 0
    p = 0
    for l in range(n_layers):
        n_in, n_out = int(widths[l]), int(widths[l + 1])
        W = params[p : p + n_out * n_in].reshape(n_out, n_in)
        b = params[p + n_out * n_in : p + n_out * n_in + n_out]
        z = W @ acts[a_off : a_off + n_in] + b
        pres[z_off : z_off + n_out] = z
        nxt = a_off + n_in
        acts[nxt : nxt + n_out] = np.tanh(z) if l < n_layers - 1 else z
        p += n_out * n_in + n_out
        a_off = nxt
        z_off += n_out


def value_numpy(params, widths, xin):
    n_layers = len(widths) - 1
    a = xin
    p = 0
    for l in range(n_layers):
        n_in, n_out = int(widths[l]), int(widths[l + 1])
        W = params[p : p + n_out * n_in].reshape(n_out, n_in)
        b = params[p + n_out * n_in : p + n_out * n_in + n_out]
        z = W @ a + b
        a = np.tanh(z) if l < n_layers - 1 else z
        p += n_out * n_in + n_out
    return a


def vjp_input_numpy(params, widths, acts, w):
    n_layers = len(widths) - 1
    offs = layer_offsets(widths)
    a_ends = np.cumsum(widths)
    delta = w.astype(np.float64, copy=True)
    for l in range(n_layers - 1, -1, -1):
        n_in, n_out = int(widths[l]), int(widths[l + 1])
        if l < n_layers - 1:
            a_next = acts[a_ends[l + 1] - n_out : a_ends[l + 1]]
            delta = delta * (1.0 - a_next ** 2)
        w0, b0, _ = offs[l]
        W = params[w0:b0].reshape(n_out, n_in)
        delta = W.T @ delta
    return delta


def vjp_params_numpy(params, widths, acts, w):
    n_layers = len(widths) - 1
    offs = layer_offsets(widths)
    a_ends = np.cumsum(widths)
    grad = np.zeros_like(params)
    delta = w.astype(np.float64, copy=True)
    for l in range(n_layers - 1, -1, -1):
        n_in, n_out = int(widths[l]), int(widths[l + 1])
        if l < n_layers - 1:
            a_next = acts[a_ends[l + 1] - n_out : a_ends[l + 1]]
            delta = delta * (1.0 - a_next ** 2)
        a_in = acts[a_ends[l] - n_in : a_ends[l]]
        w0, b0, e0 = offs[l]
        grad[w0:b0] = np.outer(delta, a_in).ravel()
        grad[b0:e0] = delta
        W = params[w0:b0].reshape(n_out, n_in)
        if l > 0:
            delta = W.T @ delta
    return grad


# ---------------------------------------------------------------------------
# numba path (same math, offsets computed inline)
# ---------------------------------------------------------------------------

def _forward_jit(params, widths, xin, acts, pres):
    n_layers = widths.shape[0] - 1
    for i in range(widths[0]):
        acts[i] = xin[i]
    a_off = 0
    z_off = 0
    p = 0
    a = xin.copy()
    for l in range(n_layers):
        n_in = widths[l]
        n_out = widths[l + 1]
        nxt = a_off + n_in
        W = params[p : p + n_out * n_in].reshape(n_out, n_in)
        z = np.dot(W, a)
        a = np.empty(n_out)
        for i in range(n_out):
            s = z[i] + params[p + n_out * n_in + i]
            pres[z_off + i] = s
            if l < n_layers - 1:
                a[i] = np.tanh(s)
            else:
                a[i] = s
            acts[nxt + i] = a[i]
        p += n_out * n_in + n_out
        a_off = nxt
        z_off += n_out


def _value_jit(params, widths, xin):
    n_layers = widths.shape[0] - 1
    a = xin.copy()
    p = 0
    for l in range(n_layers):
        n_in = widths[l]
        n_out = widths[l + 1]
        W = params[p : p + n_out * n_in].reshape(n_out, n_in)
        z = np.dot(W, a)
        a = np.empty(n_out)
        for i in range(n_out):
            s = z[i] + params[p + n_out * n_in + i]
            a[i] = np.tanh(s) if l < n_layers - 1 else s
        p += n_out * n_in + n_out
    return a


def _vjp_input_jit(params, widths, acts, w):
    n_layers = widths.shape[0] - 1
    # offset of the last layer's parameter block and activation segment
    p_end = 0
    a_end = widths[0]
    for l in range(n_layers):
        p_end += widths[l + 1] * widths[l] + widths[l + 1]
        a_end += widths[l + 1]
    delta = w.copy()
    p = p_end
    a_off = a_end
    for l in range(n_layers - 1, -1, -1):
        n_in = widths[l]
        n_out = widths[l + 1]
        p -= n_out * n_in + n_out
        if l < n_layers - 1:
            for i in range(n_out):
                a = acts[a_off - n_out + i]
                delta[i] = delta[i] * (1.0 - a * a)
        nxt = np.zeros(n_in)
        for i in range(n_out):
            di = delta[i]
            base = p + i * n_in
            for j in range(n_in):
                nxt[j] += params[base + j] * di
        delta = nxt
        a_off -= n_out
    return delta


def _vjp_params_jit(params, widths, acts, w):
    n_layers = widths.shape[0] - 1
    p_end = 0
    a_end = widths[0]
    for l in range(n_layers):
        p_end += widths[l + 1] * widths[l] + widths[l + 1]
        a_end += widths[l + 1]
    grad = np.zeros_like(params)
    delta = w.copy()
    p = p_end
    a_off = a_end
    for l in range(n_layers - 1, -1, -1):
        n_in = widths[l]
        n_out = widths[l + 1]
        p -= n_out * n_in + n_out
        if l < n_layers - 1:
            for i in range(n_out):
                a = acts[a_off - n_out + i]
                delta[i] = delta[i] * (1.0 - a * a)
        a_in = a_off - n_out - n_in
        for i in range(n_out):
            di = delta[i]
            base = p + i * n_in
            for j in range(n_in):
                grad[base + j] = di * acts[a_in + j]
            grad[p + n_out * n_in + i] = di
        if l > 0:
            nxt = np.zeros(n_in)
            for i in range(n_out):
                di = delta[i]
                base = p + i * n_in
                for j in range(n_in):
                    nxt[j] += params[base + j] * di
            delta = nxt
        a_off -= n_out
    return grad


if USE_NUMBA:
    forward_numba = njit(cache=True)(_forward_jit)
    value_numba = njit(cache=True)(_value_jit)
    vjp_input_numba = njit(cache=True)(_vjp_input_jit)
    vjp_params_numba = njit(cache=True)(_vjp_params_jit)
    forward = forward_numba
    value = value_numba
    vjp_input = vjp_input_numba
    vjp_params = vjp_params_numba
else:
    forward = forward_numpy
    value = value_numpy
    vjp_input = vjp_input_numpy
    vjp_params = vjp_params_numpy
