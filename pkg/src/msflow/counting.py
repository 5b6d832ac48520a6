"""Operation counters for the complexity instrumentation.

Counts velocity-field forward evaluations, vector-Jacobian products, and the
number of activation tapes retained simultaneously. ``counters`` is the
module-level instance charged by the evaluation primitives; solvers snapshot
it around iterations to report exact per-iteration costs.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass


@dataclass(frozen=True)
class CounterSnapshot:
    n_forward: int
    n_vjp: int
    peak_live_tapes: int
    trajectory_state_count: int


class OpCounters:
    """Thread-safe accumulator for forward / VJP / tape-lifetime counts.

    ``peak_live_tapes`` is monotone over the life of the object. ``begin_span``
    starts a secondary peak that can be read per solver iteration without
    resetting the global one. ``paused`` suspends charging so that diagnostics
    (objective traces, residual logging) do not perturb the measured counts.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._paused = 0
        self.reset()

    def reset(self):
        with getattr(self, "_lock", threading.Lock()):
            self.n_forward = 0
            self.n_vjp = 0
            self.live_tapes = 0
            self.peak_live_tapes = 0
            self.span_peak_live_tapes = 0
            self.trajectory_state_count = 0

    # -- charging ---------------------------------------------------------

    def charge_forward(self, n=1):
        with self._lock:
            if not self._paused:
                self.n_forward += n

    def charge_vjp(self, n=1):
        with self._lock:
            if not self._paused:
                self.n_vjp += n

    def tape_opened(self):
        with self._lock:
            if not self._paused:
                self.live_tapes += 1
                if self.live_tapes > self.peak_live_tapes:
                    self.peak_live_tapes = self.live_tapes
                if self.live_tapes > self.span_peak_live_tapes:
                    self.span_peak_live_tapes = self.live_tapes

    def tape_closed(self):
        with self._lock:
            if not self._paused:
                self.live_tapes -= 1

    def set_trajectory_states(self, n):
        with self._lock:
            if n > self.trajectory_state_count:
                self.trajectory_state_count = n

    # -- reading ----------------------------------------------------------

    def begin_span(self):
        with self._lock:
            self.span_peak_live_tapes = self.live_tapes

    def snapshot(self) -> CounterSnapshot:
        with self._lock:
            return CounterSnapshot(
                self.n_forward, self.n_vjp, self.peak_live_tapes, self.trajectory_state_count
            )

    def span_peak(self) -> int:
        with self._lock:
            return self.span_peak_live_tapes

    # -- diagnostics suspension --------------------------------------------

    def paused(self):
        return _Paused(self)


class _Paused:
    def __init__(self, c: OpCounters):
        self._c = c

    def __enter__(self):
        with self._c._lock:
            self._c._paused += 1
        return self._c

    def __exit__(self, *exc):
        with self._c._lock:
            self._c._paused -= 1
        return False


counters = OpCounters()
"""Global counter instance used by all evaluation primitives."""
