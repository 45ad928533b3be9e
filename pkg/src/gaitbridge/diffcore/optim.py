"""Adam with bias correction over named parameter dicts."""

from __future__ import annotations

import numpy as np

from gaitbridge.diffcore.tape import NonFiniteGradientError


class AdamState:
    """First/second moment accumulators (float64) plus the shared step count."""

    def __init__(self, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {}
        self.v = {}


def adam_step(net, grads, state: AdamState):
    """Apply one Adam update to net.params in place.

    Validates every gradient before touching any state, so a non-finite
    gradient leaves parameters, moments, and the step count unchanged.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
        if name not in net.params:
            raise KeyError(f"gradient for unknown parameter {name!r}")

    state.step_count += 1
    t = state.step_count
    # fold the bias corrections into scalars so the per-parameter work is
    # four in-place vector ops plus one scratch chain
    step_scale = state.lr / (1.0 - state.beta1 ** t)
    inv_bc2 = 1.0 / (1.0 - state.beta2 ** t)
    for name, param in net.params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = np.zeros(param.shape, dtype=np.float64)
            state.m[name] = m
            state.v[name] = np.zeros(param.shape, dtype=np.float64)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = v * inv_bc2
        np.sqrt(denom, out=denom)
        denom += state.eps
        np.divide(m, denom, out=denom)
        denom *= step_scale
        p64 = param.astype(np.float64)
        p64 -= denom
        param[...] = p64
    net.invalidate_cache()
