"""Model components, losses and the two-stage local update of FedRIR.

Every client owns five parameter sets, each stored under its own name
prefix so that a manifest audit can tell them apart:

``client_encoder``  private feature extractor for client-specific features
``generator``       private decoder reconstructing the input
``global_encoder``  shared extractor, the only set that leaves the client
``distiller``       conditional Gaussian q(f_g | f_cs) for the vCLUB bound
``head``            private classifier over [f_g, f_cs]
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import tensor as T
from .optim import AdamState, adam_step
from .params import ParameterSet
from .rng import round_half_up
from .tensor import Tensor

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0

CLIENT_ENCODER = "client_encoder"
GENERATOR = "generator"
GLOBAL_ENCODER = "global_encoder"
DISTILLER = "distiller"
HEAD = "head"
GLOBAL_HEAD = "global_head"  # fedavg's shared classifier

PRIVATE_COMPONENTS = (CLIENT_ENCODER, GENERATOR, DISTILLER, HEAD)

ABLATIONS = ("none", "r0", "no_mcsl", "no_id")
IDM_MODES = ("alternating", "joint")


class FreezeViolation(RuntimeError):
    """The client-specific encoder received a gradient during the ID stage."""


@dataclass(frozen=True)
class ModelDims:
    d: int = 64
    classes: int = 6
    k_cs: int = 32
    k_g: int = 32
    hidden: tuple[int, ...] = (128, 128)
    idm_hidden: tuple[int, ...] = (64, 64, 64)

    def layer_sizes(self, component: str) -> list[int]:
        if component == CLIENT_ENCODER:
            return [self.d, *self.hidden, self.k_cs]
        if component == GLOBAL_ENCODER:
            return [self.d, *self.hidden, self.k_g]
        if component == GENERATOR:
            return [self.k_cs, *reversed(self.hidden), self.d]
        if component == DISTILLER:
            return [self.k_cs, *self.idm_hidden, 2 * self.k_g]
        if component == HEAD:
            return [self.k_g + self.k_cs, self.classes]
        if component == GLOBAL_HEAD:
            return [self.k_g, self.classes]
        raise KeyError(component)

    def param_count(self, component: str) -> int:
        sizes = self.layer_sizes(component)
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def init_component(component: str, dims: ModelDims, rng: np.random.Generator, dtype=None) -> ParameterSet:
    """He-normal weights for relu layers, zero biases."""
    dtype = dtype or T.default_dtype()
    sizes = dims.layer_sizes(component)
    arrays = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        std = math.sqrt((1.0 if last else 2.0) / fan_in)
        arrays[f"{component}.{i}.weight"] = (rng.standard_normal((fan_in, fan_out)) * std).astype(dtype)
        arrays[f"{component}.{i}.bias"] = np.zeros(fan_out, dtype=dtype)
    return ParameterSet(arrays)


def mlp(params: Mapping[str, Tensor | np.ndarray], component: str, x) -> Tensor:
    """Fully connected stack with relu between layers and a linear output."""
    n = sum(1 for k in params if k.startswith(component + ".") and k.endswith(".weight"))
    if n == 0:
        raise KeyError(f"no layers for component {component!r}")
    h = T.as_tensor(x)
    for i in range(n):
        h = T.bias_add(h @ T.as_tensor(params[f"{component}.{i}.weight"]), params[f"{component}.{i}.bias"])
        if i < n - 1:
            h = T.relu(h)
    return h


def leaves(params: ParameterSet, trainable: bool) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=trainable, name=k) for k, v in params.items()}


def grads_of(leaf_map: Mapping[str, Tensor]) -> ParameterSet:
    return ParameterSet(
        {k: t.grad if t.grad is not None else np.zeros_like(t.data) for k, t in leaf_map.items()}
    )


# ---------------------------------------------------------------------------
# masking


@dataclass(frozen=True)
class MaskSpec:
    ratio: float = 0.6
    mode: str = "elementwise"
    patch: int = 2

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError(f"mask ratio must lie in [0, 1), got {self.ratio}")
        if self.mode not in ("elementwise", "patch"):
            raise ValueError(f"unknown mask mode {self.mode!r}")


def mask_input(x: np.ndarray, spec: MaskSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Zero a random subset of each sample's coordinates.

    Returns the masked batch and the 0/1 indicator of kept coordinates.
    """
    x = np.asarray(x)
    b, d = x.shape
    if spec.mode == "elementwise":
        n_masked = round_half_up(spec.ratio * d)
        keep = np.ones((b, d), dtype=x.dtype)
        if n_masked:
            order = np.argsort(rng.random((b, d)), axis=1)
            np.put_along_axis(keep, order[:, :n_masked], 0.0, axis=1)
        return x * keep, keep

    side = math.isqrt(d)
    p = spec.patch
    if side * side != d or p <= 0 or side % p:
        raise ValueError(f"patch masking needs a square input whose side is divisible by {p}; got d={d}")
    grid = side // p
    n_patches = grid * grid
    n_masked = round_half_up(spec.ratio * n_patches)
    patch_keep = np.ones((b, n_patches), dtype=x.dtype)
    if n_masked:
        order = np.argsort(rng.random((b, n_patches)), axis=1)
        np.put_along_axis(patch_keep, order[:, :n_masked], 0.0, axis=1)
    keep = (
        patch_keep.reshape(b, grid, 1, grid, 1)
        .repeat(p, axis=2)
        .repeat(p, axis=4)
        .reshape(b, d)
    )
    return x * keep, keep


# ---------------------------------------------------------------------------
# losses


def recon_loss(x_hat, x) -> Tensor:
    """Per-sample mean squared error, averaged over the batch."""
    return T.squared_error_mean(x_hat, x)


def distiller_outputs(distiller: Mapping[str, Tensor | np.ndarray], f_cs) -> tuple[Tensor, Tensor]:
    out = mlp(distiller, DISTILLER, f_cs)
    k = out.shape[1] // 2
    mean, raw_log_var = T.split_columns(out, k)
    return mean, T.clamp(raw_log_var, LOG_VAR_MIN, LOG_VAR_MAX)


def idm_loglik(distiller, f_cs, f_g) -> Tensor:
    """Mean log q(f_g | f_cs) over paired rows."""
    f_g = T.as_tensor(f_g)
    if T.as_tensor(f_cs).shape[0] != f_g.shape[0]:
        raise T.ShapeError("f_cs and f_g batches differ in size")
    mean, log_var = distiller_outputs(distiller, f_cs)
    return T.mean_all(T.gaussian_log_density(f_g, mean, log_var))


def vclub_estimate(
    distiller,
    f_cs,
    f_g,
    rng: np.random.Generator | None = None,
    perm: np.ndarray | None = None,
) -> Tensor:
    """Sampled vCLUB bound: positive-pair minus shuffled-pair mean log-density.

    One uniform permutation per call; self pairs are allowed.
    """
    f_g = T.as_tensor(f_g)
    b = f_g.shape[0]
    if b < 2:
        raise ValueError("vclub_estimate needs a batch of at least 2")
    if perm is None:
        if rng is None:
            raise ValueError("either rng or perm is required")
        perm = rng.permutation(b)
    mean, log_var = distiller_outputs(distiller, f_cs)
    positive = T.mean_all(T.gaussian_log_density(f_g, mean, log_var))
    negative = T.mean_all(T.gaussian_log_density(T.take_rows(f_g, perm), mean, log_var))
    return positive - negative


def classify(head, f_cs, f_g) -> Tensor:
    """Logits of the personalized head over concat(f_g, f_cs)."""
    f_cs, f_g = T.as_tensor(f_cs), T.as_tensor(f_g)
    w = T.as_tensor(head[f"{HEAD}.0.weight"])
    if f_g.shape[1] + f_cs.shape[1] != w.shape[0]:
        raise T.ShapeError(
            f"head expects {w.shape[0]} features, got k_g={f_g.shape[1]} + k_cs={f_cs.shape[1]}"
        )
    return mlp(head, HEAD, T.concat([f_g, f_cs], axis=1))


def cls_loss(logits, labels) -> Tensor:
    return T.softmax_cross_entropy(logits, labels)


# ---------------------------------------------------------------------------
# client state and local updates


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 100
    local_epochs: int = 1
    mask: MaskSpec = field(default_factory=MaskSpec)
    idm_mode: str = "alternating"
    ablation: str = "none"

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        if self.idm_mode not in IDM_MODES:
            raise ValueError(f"unknown idm mode {self.idm_mode!r}")

    @property
    def effective_mask(self) -> MaskSpec:
        return replace(self.mask, ratio=0.0) if self.ablation == "r0" else self.mask


@dataclass(frozen=True)
class ClientState:
    client_id: int
    params: dict[str, ParameterSet]
    opt: dict[str, AdamState]

    def with_params(self, **updates: ParameterSet) -> ClientState:
        return replace(self, params={**self.params, **updates})

    def all_params(self) -> ParameterSet:
        out: dict[str, np.ndarray] = {}
        for component in sorted(self.params):
            out.update(self.params[component])
        return ParameterSet(out)


def init_client(
    client_id: int,
    dims: ModelDims,
    rng: np.random.Generator,
    global_params: ParameterSet,
    algorithm: str = "fedrir",
) -> ClientState:
    if algorithm == "fedavg":
        params = {GLOBAL_ENCODER: global_params.with_prefix(GLOBAL_ENCODER + "."),
                  GLOBAL_HEAD: global_params.with_prefix(GLOBAL_HEAD + ".")}
    else:
        params = {c: init_component(c, dims, rng) for c in (CLIENT_ENCODER, GENERATOR, DISTILLER, HEAD)}
        params[GLOBAL_ENCODER] = global_params.copy()
    return ClientState(client_id, params, {k: AdamState.zeros(v) for k, v in params.items()})


def _apply(state: ClientState, grads: Mapping[str, ParameterSet], lr: float) -> ClientState:
    params, opt = dict(state.params), dict(state.opt)
    for component, g in grads.items():
        params[component], opt[component] = adam_step(params[component], g, opt[component], lr)
    return replace(state, params=params, opt=opt)


def local_update_mcsl(
    state: ClientState, x: np.ndarray, spec: MaskSpec, rng: np.random.Generator, lr: float
) -> tuple[ClientState, float]:
    """One Adam step on the private encoder and generator against masked reconstruction."""
    if len(x) == 0:
        raise ValueError("empty batch")
    x_masked, _ = mask_input(x, spec, rng)
    enc = leaves(state.params[CLIENT_ENCODER], True)
    gen = leaves(state.params[GENERATOR], True)
    loss = recon_loss(mlp(gen, GENERATOR, mlp(enc, CLIENT_ENCODER, x_masked)), x)
    loss.backward()
    new = _apply(state, {CLIENT_ENCODER: grads_of(enc), GENERATOR: grads_of(gen)}, lr)
    return new, loss.item()


def id_stage_losses(
    state: ClientState,
    x: np.ndarray,
    y: np.ndarray,
    perm: np.ndarray | None,
    trainable: frozenset[str],
    ablation: str = "none",
) -> tuple[dict[str, Tensor], Tensor, Tensor | None, Tensor]:
    """Build the ID-stage graph. Returns (leaves by component, L_cls, L_id, total)."""
    comps = (CLIENT_ENCODER, GLOBAL_ENCODER, HEAD) + (() if ablation == "no_id" else (DISTILLER,))
    lv = {c: leaves(state.params[c], c in trainable) for c in comps}
    f_cs = mlp(lv[CLIENT_ENCODER], CLIENT_ENCODER, x)
    f_g = mlp(lv[GLOBAL_ENCODER], GLOBAL_ENCODER, x)
    l_cls = cls_loss(classify(lv[HEAD], f_cs, f_g), y)
    l_id = None
    if ablation != "no_id" and perm is not None:
        l_id = vclub_estimate(lv[DISTILLER], f_cs, f_g, perm=perm)
    total = l_cls if l_id is None else l_id + l_cls
    return lv, l_cls, l_id, total


def local_update_id(
    state: ClientState,
    x: np.ndarray,
    y: np.ndarray,
    rng: np.random.Generator,
    lr: float,
    mode: str = "alternating",
    ablation: str = "none",
) -> tuple[ClientState, float, float]:
    """ID-stage update. Returns the new state, L_id and L_cls.

    The client encoder stays frozen except under the ``no_mcsl`` ablation,
    where it has no other training signal.
    """
    if mode not in IDM_MODES:
        raise ValueError(f"unknown idm mode {mode!r}")
    use_id = ablation != "no_id" and len(x) >= 2
    perm = rng.permutation(len(x)) if use_id else None
    new = state

    if use_id and mode == "alternating":
        # fit q(f_g | f_cs) on positive pairs with both encoders held fixed
        f_cs = mlp(state.params[CLIENT_ENCODER], CLIENT_ENCODER, x).data
        f_g = mlp(state.params[GLOBAL_ENCODER], GLOBAL_ENCODER, x).data
        dist = leaves(state.params[DISTILLER], True)
        nll = -idm_loglik(dist, f_cs, f_g)
        nll.backward()
        new = _apply(new, {DISTILLER: grads_of(dist)}, lr)

    trainable = {GLOBAL_ENCODER, HEAD}
    if ablation == "no_mcsl":
        trainable.add(CLIENT_ENCODER)
    if use_id and mode == "joint":
        trainable.add(DISTILLER)
    lv, l_cls, l_id, total = id_stage_losses(new, x, y, perm, frozenset(trainable), ablation)
    total.backward()
    if CLIENT_ENCODER not in trainable and any(t.grad is not None for t in lv[CLIENT_ENCODER].values()):
        raise FreezeViolation("client encoder received a gradient in the ID stage")
    new = _apply(new, {c: grads_of(lv[c]) for c in sorted(trainable)}, lr)
    return new, (l_id.item() if l_id is not None else 0.0), l_cls.item()


def local_update_ce(
    state: ClientState, x: np.ndarray, y: np.ndarray, lr: float
) -> tuple[ClientState, float]:
    """FedAvg local step: cross-entropy through the shared encoder and shared head."""
    enc = leaves(state.params[GLOBAL_ENCODER], True)
    head = leaves(state.params[GLOBAL_HEAD], True)
    loss = cls_loss(mlp(head, GLOBAL_HEAD, mlp(enc, GLOBAL_ENCODER, x)), y)
    loss.backward()
    new = _apply(state, {GLOBAL_ENCODER: grads_of(enc), GLOBAL_HEAD: grads_of(head)}, lr)
    return new, loss.item()


def iter_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo : lo + batch_size]


@dataclass
class LocalLosses:
    recon: float = float("nan")
    id: float = float("nan")
    cls: float = float("nan")


def local_training(
    state: ClientState,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
    algorithm: str = "fedrir",
) -> tuple[ClientState, LocalLosses]:
    """All local epochs of one round: MCSL epochs first, then ID epochs."""
    out = LocalLosses()
    if len(x) == 0:
        return state, out
    if algorithm == "fedavg":
        vals = []
        for _ in range(cfg.local_epochs):
            for idx in iter_batches(len(x), cfg.batch_size, rng):
                state, l = local_update_ce(state, x[idx], y[idx], cfg.lr)
                vals.append(l)
        out.cls = float(np.mean(vals))
        return state, out

    if cfg.ablation != "no_mcsl":
        vals = []
        spec = cfg.effective_mask
        for _ in range(cfg.local_epochs):
            for idx in iter_batches(len(x), cfg.batch_size, rng):
                state, l = local_update_mcsl(state, x[idx], spec, rng, cfg.lr)
                vals.append(l)
        out.recon = float(np.mean(vals))

    ids, clss = [], []
    for _ in range(cfg.local_epochs):
        for idx in iter_batches(len(x), cfg.batch_size, rng):
            state, l_id, l_cls = local_update_id(state, x[idx], y[idx], rng, cfg.lr, cfg.idm_mode, cfg.ablation)
            ids.append(l_id)
            clss.append(l_cls)
    if cfg.ablation != "no_id":
        out.id = float(np.mean(ids))
    out.cls = float(np.mean(clss))
    return state, out


def predict(params: Mapping[str, ParameterSet], x: np.ndarray, algorithm: str = "fedrir") -> np.ndarray:
    """Class predictions; pure."""
    f_g = mlp(params[GLOBAL_ENCODER], GLOBAL_ENCODER, x)
    if algorithm == "fedavg":
        logits = mlp(params[GLOBAL_HEAD], GLOBAL_HEAD, f_g)
    else:
        logits = classify(params[HEAD], mlp(params[CLIENT_ENCODER], CLIENT_ENCODER, x), f_g)
    return np.argmax(logits.data, axis=1)


def features(params: Mapping[str, ParameterSet], x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(f_g, f_cs) for a batch."""
    return (
        mlp(params[GLOBAL_ENCODER], GLOBAL_ENCODER, x).data,
        mlp(params[CLIENT_ENCODER], CLIENT_ENCODER, x).data,
    )
