"""Adam parameter updates applied in place to a Model."""

from __future__ import annotations

import numpy as np

from .model import Model

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def adam_step(model: Model, grads: dict[str, np.ndarray], lr: float) -> Model:
    """One bias-corrected Adam update; mutates the model, returns it.

    Moments are created lazily on the first step. Non-finite gradients abort
    with the offending parameter's name; the model must not be mutated
    concurrently.
    """
    params = model.named_parameters()
    if set(grads) != set(params):
        missing = set(params) ^ set(grads)
        raise ValueError(f"gradients do not align with parameters: {sorted(missing)}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")

    model.adam_t += 1
    t = model.adam_t
    bc1 = 1.0 - BETA1 ** t
    bc2 = 1.0 - BETA2 ** t
    for name, p in params.items():
        g = grads[name]
        m = model.adam_m.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
            model.adam_m[name] = m
            model.adam_v[name] = v
        else:
            v = model.adam_v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + EPS)
        p -= lr * update
    return model
