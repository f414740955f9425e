from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ManifestError, ParameterSet


@dataclass(frozen=True)
class AdamState:
    m: ParameterSet
    v: ParameterSet
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: ParameterSet) -> AdamState:
        return cls(params.zeros_like(), params.zeros_like(), 0)


def adam_step(
    params: ParameterSet, grads, state: AdamState, lr: float
) -> tuple[ParameterSet, AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    params.check_manifest(grads, "adam_step params/grads")
    params.check_manifest(state.m, "adam_step params/state")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        step = lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        new_p[name] = (p - step).astype(p.dtype, copy=False)
        new_m[name], new_v[name] = m, v
    return ParameterSet(new_p), AdamState(ParameterSet(new_m), ParameterSet(new_v), t, b1, b2, state.eps)


__all__ = ["AdamState", "ManifestError", "adam_step"]
