"""Adam with an inverse-square-root warmup schedule, plus plain SGD."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .params import ParamSnapshot, read_snapshot, write_snapshot


class MissingGradient(RuntimeError):
    pass


def scheduled_lr(step, base_lr, warmup_steps):
    """Learning rate at 1-based ``step``; peaks at ``base_lr`` when step == warmup."""
    if step < 1:
        raise ValueError("schedule is defined for step >= 1")
    if warmup_steps <= 0:
        return base_lr
    return base_lr * warmup_steps ** 0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)


@dataclass
class AdamState:
    base_lr: float = 1e-3
    warmup_steps: int = 4000
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr(self, step=None):
        return scheduled_lr(self.step if step is None else step, self.base_lr, self.warmup_steps)

    def save(self, prefix):
        prefix = Path(prefix)
        meta = {k: getattr(self, k) for k in ("base_lr", "warmup_steps", "beta1", "beta2", "eps", "step")}
        prefix.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True) + "\n")
        moments = ParamSnapshot()
        for name in sorted(self.m):
            moments["m/" + name] = self.m[name]
            moments["v/" + name] = self.v[name]
        write_snapshot(moments, prefix.with_suffix(".bin"))

    @classmethod
    def load(cls, prefix):
        prefix = Path(prefix)
        state = cls(**json.loads(prefix.with_suffix(".json").read_text()))
        for key, value in read_snapshot(prefix.with_suffix(".bin")).items():
            kind, name = key.split("/", 1)
            (state.m if kind == "m" else state.v)[name] = value
        return state


def adam_step(params, state, names=None):
    """Update ``params`` in place from their ``.grad`` buffers, then clear them.

    ``names`` restricts the update to a subset of paths; every one of them
    must carry a gradient.
    """
    names = list(params) if names is None else list(names)
    missing = [n for n in names if params[n].grad is None]
    if missing:
        raise MissingGradient(f"no gradient for: {', '.join(missing)}")
    state.step += 1
    lr = state.lr()
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in names:
        p = params[name]
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.zero_grad()
    return lr


def sgd_step(params, lr):
    """In-place ``p -= lr * grad`` for every parameter holding a gradient."""
    if lr == 0.0:
        params.zero_grad()
        return
    for _, p in params.items():
        if p.grad is not None:
            p.data = p.data - lr * p.grad
    params.zero_grad()
