"""Minimal feedforward network with exact reverse-mode VJPs.

``Mlp`` is the raw machinery (packed float64 parameters, tanh hidden layers,
linear output). ``VelocityNet`` specializes it as a time-conditioned velocity
field: the scalar time is concatenated to the state, so the input width is
``d + 1`` and the output width is ``d``.

The module-level operations ``net_forward`` / ``net_vjp_input`` /
``net_vjp_params`` are the instrumented entry points: they charge the global
operation counters and manage :class:`ActivationTape` lifetimes. ``net_value``
is the value-only evaluation (no tape is retained) used by line searches.
"""

from __future__ import annotations

import json

import numpy as np

from . import kernels
from .counting import counters
from .errors import ContractViolationError, NumericError

_CKPT_MAGIC = b"MSFLOW-NET v1\n"


class Mlp:
    """Fully connected net over a packed parameter vector.

    Layer l maps width ``layer_widths[l]`` to ``layer_widths[l+1]`` via
    ``W_l x + b_l``; tanh on all but the last layer. Parameters live in
    ``self.params`` (flat, per layer W row-major then b); ``weights`` and
    ``biases`` are views into it.
    """

    def __init__(self, layer_widths, seed=None, params=None, activation="tanh"):
        widths = [int(w) for w in layer_widths]
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ContractViolationError(f"invalid layer widths {layer_widths}")
        if activation != "tanh":
            raise ContractViolationError(f"unsupported activation {activation!r}")
        self.layer_widths = tuple(widths)
        self.activation = activation
        self._widths_arr = np.asarray(widths, dtype=np.int64)
        self._offsets = kernels.layer_offsets(widths)
        n = kernels.param_count(widths)
        if params is not None:
            params = np.asarray(params, dtype=np.float64)
            if params.shape != (n,):
                raise ContractViolationError(
                    f"expected {n} packed parameters, got shape {params.shape}"
                )
            self.params = params.copy()
        else:
            # scaled-uniform init, U(-1/sqrt(n_in), 1/sqrt(n_in)), zero biases
            rng = np.random.default_rng(0 if seed is None else seed)
            self.params = np.zeros(n)
            for l, (w0, b0, _) in enumerate(self._offsets):
                n_in = widths[l]
                bound = 1.0 / np.sqrt(n_in)
                self.params[w0:b0] = rng.uniform(-bound, bound, size=b0 - w0)

    @property
    def n_params(self) -> int:
        return self.params.size

    def weight(self, l) -> np.ndarray:
        w0, b0, _ = self._offsets[l]
        n_out, n_in = self.layer_widths[l + 1], self.layer_widths[l]
        return self.params[w0:b0].reshape(n_out, n_in)

    def bias(self, l) -> np.ndarray:
        _, b0, e = self._offsets[l]
        return self.params[b0:e]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    def raw_forward(self, xin):
        """Recorded forward pass; returns (out, acts, pres). No counters."""
        acts = np.empty(sum(self.layer_widths))
        pres = np.empty(sum(self.layer_widths[1:]))
        kernels.forward(self.params, self._widths_arr, xin, acts, pres)
        return acts[-self.layer_widths[-1]:], acts, pres

    def raw_value(self, xin):
        return kernels.value(self.params, self._widths_arr, np.asarray(xin, dtype=np.float64))

    def raw_vjp_input(self, acts, w):
        return kernels.vjp_input(self.params, self._widths_arr, acts, w)

    def raw_vjp_params(self, acts, w):
        return kernels.vjp_params(self.params, self._widths_arr, acts, w)

    def assert_finite(self):
        if not np.all(np.isfinite(self.params)):
            raise NumericError("network parameters contain non-finite values")


class VelocityNet(Mlp):
    """Time-conditioned velocity field v(x, t): input [x; t], output dim(x)."""

    def __init__(self, layer_widths, seed=None, params=None, activation="tanh"):
        super().__init__(layer_widths, seed=seed, params=params, activation=activation)
        if self.layer_widths[0] != self.layer_widths[-1] + 1:
            raise ContractViolationError(
                "velocity net needs input width = state dim + 1 (time channel); "
                f"got widths {self.layer_widths}"
            )
        self.dim = self.layer_widths[-1]


class ActivationTape:
    """Intermediates of one recorded forward pass.

    ``pre`` holds the per-layer pre-activations, ``post`` the input followed by
    each layer's post-activation output. A tape registers with the global
    counters when opened under instrumentation and must be closed once
    consumed; closing is idempotent.
    """

    __slots__ = ("net", "xin", "post", "pre", "_registered", "_closed")

    def __init__(self, net, xin, post, pre, registered=False):
        self.net = net
        self.xin = xin
        self.post = post
        self.pre = pre
        self._registered = registered
        self._closed = False
        if registered:
            counters.tape_opened()

    def close(self):
        if not self._closed:
            self._closed = True
            if self._registered:
                counters.tape_closed()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def _augment(net, x, t):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.dim,):
        raise ContractViolationError(f"state has shape {x.shape}, expected ({net.dim},)")
    if not np.all(np.isfinite(x)) or not np.isfinite(t):
        raise NumericError("non-finite input to velocity net")
    if not 0.0 <= t <= 1.0:
        raise ContractViolationError(f"time {t} outside [0, 1]")
    xin = np.empty(net.dim + 1)
    xin[:-1] = x
    xin[-1] = t
    return xin


def net_forward(net: VelocityNet, x, t) -> tuple[np.ndarray, ActivationTape]:
    """Evaluate v(x, t) with a recorded tape. Charges one forward."""
    xin = _augment(net, x, t)
    out, acts, pres = net.raw_forward(xin)
    counters.charge_forward()
    return out.copy(), ActivationTape(net, xin, acts, pres, registered=True)


def net_value(net: VelocityNet, x, t) -> np.ndarray:
    """Evaluate v(x, t) without retaining a tape. Charges one forward."""
    xin = _augment(net, x, t)
    counters.charge_forward()
    return net.raw_value(xin)


def net_vjp_input(net: VelocityNet, tape: ActivationTape, w) -> np.ndarray:
    """J_v(x, t)^T w restricted to the state block (time channel dropped).

    Charges one VJP. The tape must come from ``net_forward`` on this net.
    """
    if tape.net is not net:
        raise ContractViolationError("tape was not produced by this net")
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (net.dim,):
        raise ContractViolationError(f"cotangent has shape {w.shape}, expected ({net.dim},)")
    counters.charge_vjp()
    return net.raw_vjp_input(tape.post, w)[: net.dim]


def net_vjp_params(net: VelocityNet, tape: ActivationTape, w) -> np.ndarray:
    """Gradient of <w, v(x, t)> with respect to the packed parameters."""
    if tape.net is not net:
        raise ContractViolationError("tape was not produced by this net")
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (net.dim,):
        raise ContractViolationError(f"cotangent has shape {w.shape}, expected ({net.dim},)")
    counters.charge_vjp()
    return net.raw_vjp_params(tape.post, w)


# ---------------------------------------------------------------------------
# checkpoint format (v1)
#
#   line 1: b"MSFLOW-NET v1\n"
#   line 2: JSON header {"layer_widths": [...], "activation": "tanh"} + "\n"
#   rest:   packed parameters as little-endian float64 (per layer W row-major,
#           then b), exactly param_count(layer_widths) values
# ---------------------------------------------------------------------------

def save_checkpoint(net: Mlp, path):
    header = json.dumps(
        {"layer_widths": list(net.layer_widths), "activation": net.activation},
        sort_keys=True,
    )
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(header.encode("ascii") + b"\n")
        f.write(net.params.astype("<f8").tobytes())


def load_checkpoint(path, cls=VelocityNet) -> Mlp:
    with open(path, "rb") as f:
        magic = f.readline()
        if magic != _CKPT_MAGIC:
            raise ContractViolationError(f"unrecognized checkpoint header {magic!r}")
        header = json.loads(f.readline().decode("ascii"))
        widths = header["layer_widths"]
        params = np.frombuffer(f.read(), dtype="<f8").astype(np.float64)
    expected = kernels.param_count(widths)
    if params.size != expected:
        raise ContractViolationError(
            f"checkpoint has {params.size} parameters, expected {expected}"
        )
    return cls(widths, params=params, activation=header["activation"])
