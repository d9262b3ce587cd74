"""Named parameter registry and initialisers."""
from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from .tensor import Parameter, get_default_dtype


class ParamStore:
    """Ordered ``name -> Parameter`` mapping; names are unique."""

    def __init__(self, seed: int = 0, dtype=None):
        self._params: "OrderedDict[str, Parameter]" = OrderedDict()
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype or get_default_dtype()

    def __getitem__(self, name) -> Parameter:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def add(self, name: str, value) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(np.asarray(value, dtype=self.dtype), name=name)
        self._params[name] = p
        return p

    def xavier(self, name, fan_in, fan_out, shape=None, gain=1.0) -> Parameter:
        bound = gain * math.sqrt(6.0 / (fan_in + fan_out))
        shape = shape or (fan_in, fan_out)
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def kaiming(self, name, fan_in, shape) -> Parameter:
        return self.add(name, self.rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape))

    def zeros(self, name, shape) -> Parameter:
        return self.add(name, np.zeros(shape))

    def ones(self, name, shape) -> Parameter:
        return self.add(name, np.ones(shape))

    def normal(self, name, shape, std=1.0) -> Parameter:
        return self.add(name, self.rng.normal(0.0, std, size=shape))

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def count(self) -> int:
        return int(sum(p.size for p in self._params.values()))

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data) for k, p in self._params.items())

    def load_state(self, state, strict: bool = True):
        missing = [k for k in self._params if k not in state]
        extra = [k for k in state if k not in self._params]
        if strict and (missing or extra):
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for k, p in self._params.items():
            if k in state:
                v = np.asarray(state[k], dtype=p.data.dtype)
                if v.shape != p.shape:
                    raise ValueError(f"{k}: shape {v.shape} vs {p.shape}")
                p.data = v.copy()
