"""Finite-difference verification of every training loss on miniature models."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import learning as L
from . import tensor as T

TOLERANCE = 1e-4
STEP = 1e-5
FLOOR = 1e-5

LOSSES = ("recon", "id_positive", "id_negative", "cls", "joint")


@dataclass
class Instance:
    params: dict[str, np.ndarray]
    x: np.ndarray
    x_masked: np.ndarray
    y: np.ndarray
    perm: np.ndarray


def make_instance(rng: np.random.Generator) -> Instance:
    dims = L.ModelDims(
        d=int(rng.integers(3, 7)),
        classes=int(rng.integers(2, 5)),
        k_cs=int(rng.integers(1, 4)),
        k_g=int(rng.integers(1, 4)),
        hidden=(int(rng.integers(3, 6)),),
        idm_hidden=(4, 4, 4),
    )
    params: dict[str, np.ndarray] = {}
    for comp in (L.CLIENT_ENCODER, L.GENERATOR, L.GLOBAL_ENCODER, L.DISTILLER, L.HEAD):
        ps = L.init_component(comp, dims, rng, dtype=np.float64)
        for k, v in ps.items():
            # nonzero biases so relu kinks are not aligned across units
            params[k] = v + (0.1 * rng.standard_normal(v.shape) if k.endswith("bias") else 0.0)
    b = int(rng.integers(3, 6))
    x = rng.uniform(0.0, 1.0, size=(b, dims.d))
    x_masked, _ = L.mask_input(x, L.MaskSpec(0.5), rng)
    y = rng.integers(0, dims.classes, size=b)
    perm = rng.permutation(b)
    return Instance(params, x, x_masked, y, perm)


def _comp(p: Mapping, name: str) -> dict:
    return {k: v for k, v in p.items() if k.startswith(name + ".")}


def _negative_term(dist, f_cs, f_g, perm):
    mean, log_var = L.distiller_outputs(dist, f_cs)
    return T.mean_all(T.gaussian_log_density(T.take_rows(f_g, perm), mean, log_var))


def loss_fn(kind: str, inst: Instance) -> Callable[[Mapping[str, T.Tensor | np.ndarray]], T.Tensor]:
    def f(p):
        if kind == "recon":
            f_cs = L.mlp(_comp(p, L.CLIENT_ENCODER), L.CLIENT_ENCODER, inst.x_masked)
            return L.recon_loss(L.mlp(_comp(p, L.GENERATOR), L.GENERATOR, f_cs), inst.x)
        f_cs = L.mlp(_comp(p, L.CLIENT_ENCODER), L.CLIENT_ENCODER, inst.x)
        f_g = L.mlp(_comp(p, L.GLOBAL_ENCODER), L.GLOBAL_ENCODER, inst.x)
        dist = _comp(p, L.DISTILLER)
        if kind == "id_positive":
            return L.idm_loglik(dist, f_cs, f_g)
        if kind == "id_negative":
            return _negative_term(dist, f_cs, f_g, inst.perm)
        l_cls = L.cls_loss(L.classify(_comp(p, L.HEAD), f_cs, f_g), inst.y)
        if kind == "cls":
            return l_cls
        if kind == "joint":
            return L.vclub_estimate(dist, f_cs, f_g, perm=inst.perm) + l_cls
        raise KeyError(kind)

    return f


def check_loss(kind: str, inst: Instance, h: float = STEP) -> float:
    """Max relative error between backward and central differences for one loss.

    Coordinates whose gradient is below ``FLOOR * max(1, |loss|)`` are compared
    against that floor instead, since differencing noise scales with the loss.
    """
    f = loss_fn(kind, inst)
    lv = {k: T.Tensor(v, requires_grad=True, name=k) for k, v in inst.params.items()}
    value = f(lv)
    value.backward()
    analytic = L.grads_of(lv)
    numeric = T.finite_difference_gradient(lambda p: f(p).item(), inst.params, h)
    floor = FLOOR * max(1.0, abs(value.item()))
    return max(T.max_relative_error(analytic[k], numeric[k], floor) for k in inst.params)


def run(seed: int = 0, instances: int = 20) -> dict[str, float]:
    """Worst relative error per loss over ``instances`` random models."""
    rng = np.random.default_rng(seed)
    worst = dict.fromkeys(LOSSES, 0.0)
    for _ in range(instances):
        inst = make_instance(rng)
        for kind in LOSSES:
            worst[kind] = max(worst[kind], check_loss(kind, inst))
    return worst


__all__ = ["LOSSES", "TOLERANCE", "Instance", "check_loss", "make_instance", "run"]
