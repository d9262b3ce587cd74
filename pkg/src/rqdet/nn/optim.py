"""AdamW with linear warm-up and step decay."""
from __future__ import annotations

import numpy as np

from .tensor import MissingGrad


class AdamW:
    """Decoupled weight decay Adam.

    Each step: ``p -= lr*wd*p``, then the usual bias-corrected Adam move.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is None:
                raise MissingGrad(f"parameter {p.name!r} has no gradient")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.step_count
        c2 = 1 - b2 ** self.step_count
        for p in self.params:
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay:
                p.data = p.data * (1 - lr * self.weight_decay)
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state(self) -> dict:
        out = {}
        for p in self.params:
            out[f"optim.m/{p.name}"] = self.m[p.name]
            out[f"optim.v/{p.name}"] = self.v[p.name]
        return out

    def load_state(self, state: dict, step_count: int):
        for p in self.params:
            self.m[p.name] = np.array(state[f"optim.m/{p.name}"], dtype=p.data.dtype)
            self.v[p.name] = np.array(state[f"optim.v/{p.name}"], dtype=p.data.dtype)
        self.step_count = int(step_count)


def adamw_step(params, lr, betas=(0.9, 0.999), weight_decay=1e-4, eps=1e-8, state=None):
    """Functional AdamW update; ``state`` carries moments between calls."""
    if state is None:
        state = {}
    opt = state.get("opt")
    if opt is None:
        opt = state["opt"] = AdamW(params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
    opt.step(lr)
    return state


def lr_at(step: int, base_lr: float, total_steps: int, warmup: int = 500,
          milestones=(2 / 3, 11 / 12), gamma: float = 0.1) -> float:
    """Linear warm-up for ``warmup`` steps, then 10x drops at fractional milestones."""
    lr = base_lr
    for frac in milestones:
        if step >= int(round(frac * total_steps)):
            lr *= gamma
    if warmup > 0 and step < warmup:
        lr *= (step + 1) / warmup
    return lr


def clip_grad_norm(params, max_norm: float) -> float:
    total = float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None)))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total
