"""AdamW with decoupled weight decay, operating on a ParamStore in place."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import FreezeError


@dataclass
class OptimState:
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(store, grads, state):
    """One AdamW update of every learnable entry of ``store``.

    ``grads`` must cover exactly the learnable names. Frozen entries are never
    touched; supplying a gradient for one raises FreezeError.
    """
    learnable = store.learnable_names()
    frozen_given = [n for n in grads if n in store and store.is_frozen(n)]
    if frozen_given:
        raise FreezeError(f"gradient supplied for frozen parameter(s): {frozen_given}")
    unknown = sorted(set(grads) - set(store.names()))
    if unknown:
        raise KeyError(f"gradient for unknown parameter(s): {unknown}")
    missing = sorted(set(learnable) - set(grads))
    if missing:
        raise KeyError(f"missing gradient for learnable parameter(s): {missing}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name in learnable:
        p = store[name]
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        data = p.data
        if state.weight_decay:
            data = data - (state.lr * state.weight_decay) * data
        p.data = (data - state.lr * update).astype(p.dtype, copy=False)
    return store, state
