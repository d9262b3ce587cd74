"""Central finite-difference gradient checks."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward, record_detached, replay_detached, reset_tape


def numeric_grad(f, x: np.ndarray, h: float = 1e-5, entries=None) -> np.ndarray:
    """Central differences of scalar ``f(x)`` w.r.t. entries of ``x`` (perturbed in place).

    ``entries`` restricts the flat indices visited; the rest stay zero.
    """
    g = np.zeros_like(x, dtype=float)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in (range(flat.size) if entries is None else entries):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(floor, np.max(np.abs(a)), np.max(np.abs(b))))


def check(fn, inputs: "list[Tensor]", h: float = 1e-5, replay: bool = True,
          max_entries: int | None = None, seed: int = 0, floor: float = 1e-8):
    """Compare tape gradients of scalar ``fn(*inputs)`` with finite differences.

    With ``replay`` the perturbed evaluations reuse the stop-gradient values of
    the reference pass, so detached paths and discrete choices stay fixed.
    ``max_entries`` checks a random subset of that many entries per input.
    ``floor`` bounds the denominator of the relative error from below.
    Returns the worst relative error over all inputs.
    """
    reset_tape()
    for t in inputs:
        t.grad = None
    with record_detached() as log:
        out = fn(*inputs)
    backward(out)
    analytic = [np.array(t.grad if t.grad is not None else np.zeros_like(t.data)) for t in inputs]

    def f():
        reset_tape()
        if replay:
            with replay_detached(log):
                return float(fn(*inputs).data)
        return float(fn(*inputs).data)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        entries = None
        if max_entries is not None and t.data.size > max_entries:
            entries = np.sort(rng.choice(t.data.size, max_entries, replace=False))
        gn = numeric_grad(f, t.data, h, entries)
        if entries is not None:
            ga = ga.reshape(-1)[entries]
            gn = gn.reshape(-1)[entries]
        worst = max(worst, rel_error(ga, gn, floor))
    reset_tape()
    return worst
