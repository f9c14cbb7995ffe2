"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .params import gradients


class NondeterministicLossError(RuntimeError):
    pass


def relative_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(loss_fn, store, h=1e-5, per_param=False):
    """Compare reverse-mode gradients with central differences.

    ``loss_fn(store)`` must return a scalar Tensor and be deterministic. Every
    scalar entry of every learnable parameter is perturbed by +-h. Returns the
    max relative error, or ``(max_error, {name: max_error})`` with ``per_param``.
    """
    for name, t in store.items():
        if t.dtype != np.float64:
            raise TypeError(f"finite differences need float64 parameters; {name!r} is {t.dtype}")
    loss = loss_fn(store)
    base = float(loss.data.reshape(-1)[0])
    again = float(loss_fn(store).data.reshape(-1)[0])
    if base != again:
        raise NondeterministicLossError(f"loss changed between identical calls: {base!r} vs {again!r}")
    analytic = gradients(loss, store)

    errors = {}
    for name in store.learnable_names():
        p = store[name]
        flat = p.data.reshape(-1)
        numeric = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn(store).data.reshape(-1)[0])
            flat[i] = orig - h
            down = float(loss_fn(store).data.reshape(-1)[0])
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * h)
        err = relative_error(analytic[name].reshape(-1), numeric)
        errors[name] = float(err.max()) if err.size else 0.0
    worst = max(errors.values(), default=0.0)
    return (worst, errors) if per_param else worst
