"""Dense tensor with tape-based reverse-mode differentiation.

Every op whose inputs track gradients appends one entry to the current
thread's :class:`GradTape`. :func:`backward` replays that tape in reverse and
then marks it consumed; a fresh tape is installed for the next forward pass.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

_DEFAULT_DTYPE = [np.float64]


class ShapeMismatch(ValueError):
    pass


class NotScalar(ValueError):
    pass


class TapeConsumed(RuntimeError):
    pass


class MissingGrad(RuntimeError):
    pass


def set_default_dtype(dtype) -> None:
    _DEFAULT_DTYPE[0] = np.dtype(dtype).type


def get_default_dtype():
    return _DEFAULT_DTYPE[0]


class GradTape:
    __slots__ = ("entries", "consumed")

    def __init__(self):
        self.entries: list = []
        self.consumed = False

    def __len__(self):
        return len(self.entries)


class _State(threading.local):
    def __init__(self):
        self.tape = GradTape()
        self.enabled = True
        self.detach_log = None
        self.detach_replay = None


_state = _State()


def current_tape() -> GradTape:
    return _state.tape


def reset_tape() -> GradTape:
    _state.tape = GradTape()
    return _state.tape


@contextmanager
def no_grad():
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def grad_enabled() -> bool:
    return _state.enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_default_dtype())
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        self._leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        g = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{g})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    # operator sugar; implementations live in ops
    def __add__(self, o):
        from . import ops
        return ops.add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        from . import ops
        return ops.sub(self, o)

    def __rsub__(self, o):
        from . import ops
        return ops.sub(o, self)

    def __mul__(self, o):
        from . import ops
        return ops.mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        from . import ops
        return ops.div(self, o)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, o):
        from . import ops
        return ops.matmul(self, o)

    def __getitem__(self, idx):
        from . import ops
        return ops.index(self, idx)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(out_data, parents, backward_fn) -> Tensor:
    """Wrap ``out_data`` and, when any parent tracks gradients, log the op.

    ``backward_fn(g)`` must return one gradient (or ``None``) per parent.
    """
    out = Tensor(out_data, dtype=out_data.dtype if isinstance(out_data, np.ndarray) else None)
    if _state.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._leaf = False
        tape = _state.tape
        out._tape = tape
        tape.entries.append((out, tuple(parents), backward_fn))
    return out


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ValueError("loss does not depend on any tracked tensor")
    if tape.consumed:
        raise TapeConsumed("tape already consumed; run a new forward pass first")
    grads = {id(loss): np.ones_like(loss.data)}
    for out, parents, fn in reversed(tape.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        pgrads = fn(g)
        for p, gp in zip(parents, pgrads):
            if gp is None or not p.requires_grad:
                continue
            if gp.shape != p.data.shape:
                gp = np.broadcast_to(gp, p.data.shape)
            if p._leaf:
                if p.grad is None:
                    p.grad = np.array(gp, dtype=p.data.dtype)
                else:
                    p.grad = p.grad + gp
            else:
                k = id(p)
                prev = grads.get(k)
                grads[k] = gp if prev is None else prev + gp
    tape.entries.clear()
    tape.consumed = True
    if _state.tape is tape:
        _state.tape = GradTape()


# -- stop-gradient with optional replay ------------------------------------

def detach(x):
    """Return a constant copy of ``x`` as an ndarray.

    Inside :func:`record_detached` every detached value is logged; inside
    :func:`replay_detached` the logged values are returned instead, in order,
    so a perturbed forward pass sees exactly the same stop-gradient constants
    (and the same discrete decisions) as the reference pass.
    """
    val = x.data if isinstance(x, Tensor) else np.asarray(x)
    if _state.detach_replay is not None:
        return _state.detach_replay.pop(0)
    val = np.array(val, copy=True)
    if _state.detach_log is not None:
        _state.detach_log.append(val)
    return val


@contextmanager
def record_detached():
    log: list = []
    prev = _state.detach_log
    _state.detach_log = log
    try:
        yield log
    finally:
        _state.detach_log = prev


@contextmanager
def replay_detached(log: list):
    prev = _state.detach_replay
    _state.detach_replay = list(log)
    try:
        yield
    finally:
        _state.detach_replay = prev
