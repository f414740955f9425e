"""Round orchestration: sampling, broadcast, local training, aggregation, evaluation."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import learning as L
from . import params as P
from .data import ClientDataset
from .learning import ClientState, LocalLosses, ModelDims, TrainConfig
from .optim import AdamState
from .params import ManifestError, ParameterSet
from .rng import round_half_up, stream

log = logging.getLogger(__name__)

ALGORITHMS = ("fedrir", "fedavg", "local")
METRICS_COLUMNS = [
    "round", "client_id", "split", "accuracy",
    "loss_recon", "loss_id", "loss_cls", "comm_up", "comm_down",
]


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 20
    join_ratio: tuple[float, float] = (1.0, 1.0)
    rounds: int = 50
    algorithm: str = "fedrir"
    train: TrainConfig = field(default_factory=TrainConfig)
    dims: ModelDims = field(default_factory=ModelDims)
    seed: int = 0
    workers: int = 1
    reset_opt_on_broadcast: bool = False

    def __post_init__(self):
        lo, hi = self.join_ratio
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"join ratio must satisfy 0 < lo <= hi <= 1, got {self.join_ratio}")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class ClientMetrics:
    client_id: int
    participated: bool
    losses: LocalLosses
    train_acc: float
    test_acc: float
    test_count: int
    comm_up: int = 0
    comm_down: int = 0


@dataclass
class RoundReport:
    round: int
    participants: list[int]
    clients: list[ClientMetrics]
    mean_test_acc: float
    weighted_test_acc: float
    uplink: int
    downlink: int
    aggregation_weights: list[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# server primitives


def sample_clients(num_clients: int, join_ratio: tuple[float, float], rng: np.random.Generator) -> np.ndarray:
    """Sorted ids of this round's participants; at least one client."""
    lo, hi = join_ratio
    rho = lo if lo == hi else rng.uniform(lo, hi)
    k = min(num_clients, max(1, round_half_up(rho * num_clients)))
    return np.sort(rng.choice(num_clients, size=k, replace=False))


def aggregation_weights(sizes: Sequence[int]) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    if len(sizes) == 0:
        raise ValueError("nothing to aggregate")
    if np.any(sizes <= 0):
        raise ValueError("aggregation weights must be positive")
    return sizes / sizes.sum()


def aggregate(param_sets: Sequence[ParameterSet], sizes: Sequence[int]) -> ParameterSet:
    """Sample-size weighted coordinate-wise mean of parameter sets.

    Inputs are summed in a canonical order so the result does not depend on
    the order of ``param_sets``.
    """
    if not param_sets:
        raise ValueError("nothing to aggregate")
    if len(param_sets) != len(sizes):
        raise ValueError("one size per parameter set required")
    first = param_sets[0]
    for ps in param_sets[1:]:
        first.check_manifest(ps, "aggregate")
    weights = aggregation_weights(sizes)
    keyed = sorted(
        zip(weights, param_sets),
        key=lambda wp: (wp[0], b"".join(a.tobytes() for a in wp[1].values())),
    )
    if len(keyed) == 1:
        return keyed[0][1].copy()
    out = {}
    for name in first:
        acc = np.zeros(first[name].shape, dtype=np.float64)
        for w, ps in keyed:
            acc += w * ps[name]
        out[name] = acc.astype(first[name].dtype)
    return ParameterSet(out)


def aggregate_exact(param_sets: Sequence[ParameterSet], sizes: Sequence[int]) -> ParameterSet:
    """Rational-arithmetic reference for ``aggregate`` (slow, test oracle)."""
    total = sum(int(s) for s in sizes)
    out = {}
    for name in param_sets[0]:
        flat = [ps[name].reshape(-1) for ps in param_sets]
        vals = [
            float(sum(Fraction(int(s), total) * Fraction(float(f[i])) for s, f in zip(sizes, flat)))
            for i in range(flat[0].size)
        ]
        out[name] = np.array(vals).reshape(param_sets[0][name].shape)
    return ParameterSet(out)


def broadcast(
    global_params: ParameterSet,
    clients: Sequence[ClientState],
    selected: Sequence[int],
    component: str = L.GLOBAL_ENCODER,
    reset_opt: bool = False,
) -> list[ClientState]:
    """Replace ``component`` on the selected clients; others are returned unchanged."""
    chosen = set(int(i) for i in selected)
    out = []
    for c in clients:
        if c.client_id in chosen:
            c.params[component].check_manifest(global_params, "broadcast")
            c = c.with_params(**{component: global_params.copy()})
            if reset_opt:
                c = replace(c, opt={**c.opt, component: AdamState.zeros(global_params)})
        out.append(c)
    return out


def shared_components(algorithm: str) -> tuple[str, ...]:
    if algorithm == "fedrir":
        return (L.GLOBAL_ENCODER,)
    if algorithm == "fedavg":
        return (L.GLOBAL_ENCODER, L.GLOBAL_HEAD)
    return ()


def count_comm_params(dims: ModelDims, algorithm: str) -> int:
    """Scalars sent per participant per direction."""
    return sum(dims.param_count(c) for c in shared_components(algorithm))


def accuracy(params, x: np.ndarray, y: np.ndarray, algorithm: str) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(L.predict(params, x, algorithm) == y))


# ---------------------------------------------------------------------------
# federation


class Federation:
    """Server plus simulated clients for one experiment."""

    def __init__(self, config: FederationConfig, client_data: Sequence[ClientDataset]):
        if len(client_data) != config.num_clients:
            raise ValueError(f"config has {config.num_clients} clients but {len(client_data)} datasets given")
        self.config = config
        self.data = list(client_data)
        dims = config.dims
        g_rng = stream(config.seed, "global_init")
        global_sets = [L.init_component(L.GLOBAL_ENCODER, dims, g_rng)]
        if config.algorithm == "fedavg":
            global_sets.append(L.init_component(L.GLOBAL_HEAD, dims, g_rng))
        init = ParameterSet({k: v for s in global_sets for k, v in s.items()})
        self.clients = [
            L.init_client(i, dims, stream(config.seed, "client_init", i), init, config.algorithm)
            for i in range(config.num_clients)
        ]
        self.shared = shared_components(config.algorithm)
        self.global_params = {c: init.with_prefix(c + ".") for c in self.shared}
        self.message_log: list[tuple[str, int, int, list[str]]] = []  # (direction, round, client, names)

    # messages -----------------------------------------------------------

    def _uplink(self, t: int, client: ClientState) -> dict[str, ParameterSet]:
        payload = ParameterSet({k: v for c in self.shared for k, v in client.params[c].items()})
        blob = P.to_bytes(payload)
        received = P.from_bytes(blob)
        self.message_log.append(("up", t, client.client_id, list(received)))
        return {c: received.with_prefix(c + ".") for c in self.shared}

    def _downlink(self, t: int, client_id: int) -> dict[str, ParameterSet]:
        payload = ParameterSet({k: v for c in self.shared for k, v in self.global_params[c].items()})
        received = P.from_bytes(P.to_bytes(payload))
        self.message_log.append(("down", t, client_id, list(received)))
        return {c: received.with_prefix(c + ".") for c in self.shared}

    # round --------------------------------------------------------------

    def _train_one(self, t: int, cid: int) -> tuple[ClientState, LocalLosses]:
        d = self.data[cid]
        rng = stream(self.config.seed, "client_round", cid, t)
        return L.local_training(self.clients[cid], d.x_train, d.y_train, self.config.train, rng, self.config.algorithm)

    def eval_params(self, cid: int) -> dict[str, ParameterSet]:
        """Parameters used to evaluate client ``cid``: its private sets plus the current global sets."""
        return {**self.clients[cid].params, **self.global_params}

    def evaluate_clients(self) -> list[tuple[float, float]]:
        """(train acc, test acc) per client; pure."""
        out = []
        for cid, d in enumerate(self.data):
            params = self.eval_params(cid)
            if len(d.y_test) == 0:
                log.warning("client %d has no test samples; skipped in test accuracy", cid)
            out.append((accuracy(params, d.x_train, d.y_train, self.config.algorithm),
                        accuracy(params, d.x_test, d.y_test, self.config.algorithm)))
        return out

    def run_round(self, t: int) -> RoundReport:
        cfg = self.config
        participants = [int(i) for i in sample_clients(cfg.num_clients, cfg.join_ratio, stream(cfg.seed, "server", t))]
        per_msg = count_comm_params(cfg.dims, cfg.algorithm)

        if self.shared:
            for cid in participants:
                received = self._downlink(t, cid)
                for comp, ps in received.items():
                    self.clients = broadcast(ps, self.clients, [cid], comp, cfg.reset_opt_on_broadcast)

        if cfg.workers > 1 and len(participants) > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                results = list(pool.map(lambda cid: self._train_one(t, cid), participants))
        else:
            results = [self._train_one(t, cid) for cid in participants]
        losses = {}
        for cid, (state, l) in zip(participants, results):
            self.clients[cid] = state
            losses[cid] = l

        weights: list[float] = []
        if self.shared:
            collected = [self._uplink(t, self.clients[cid]) for cid in participants]
            sizes = [self.data[cid].size for cid in participants]
            weights = [float(w) for w in aggregation_weights(sizes)]
            for comp in self.shared:
                self.global_params[comp] = aggregate([m[comp] for m in collected], sizes)

        accs = self.evaluate_clients()
        chosen = set(participants)
        metrics = [
            ClientMetrics(
                cid,
                cid in chosen,
                losses.get(cid, LocalLosses()),
                tr,
                te,
                len(self.data[cid].y_test),
                per_msg if cid in chosen else 0,
                per_msg if cid in chosen else 0,
            )
            for cid, (tr, te) in enumerate(accs)
        ]
        scored = [m for m in metrics if m.test_count > 0]
        mean_acc = float(np.mean([m.test_acc for m in scored])) if scored else float("nan")
        total = sum(m.test_count for m in scored)
        weighted = sum(m.test_acc * m.test_count for m in scored) / total if total else float("nan")
        return RoundReport(
            t, participants, metrics, mean_acc, float(weighted),
            per_msg * len(participants), per_msg * len(participants), weights,
        )

    def checkpoints(self) -> dict[str, ParameterSet]:
        """Final parameter sets keyed by file stem."""
        out = {f"client_{c.client_id:03d}": c.all_params() for c in self.clients}
        if self.shared:
            out["server"] = ParameterSet({k: v for c in self.shared for k, v in self.global_params[c].items()})
        return out


@dataclass
class TrainingResult:
    reports: list[RoundReport]
    federation: Federation


def run_training(config: FederationConfig, client_data: Sequence[ClientDataset]) -> TrainingResult:
    fed = Federation(config, client_data)
    reports = []
    for t in range(config.rounds):
        rep = fed.run_round(t)
        log.info("round %d: weighted test acc %.4f", t, rep.weighted_test_acc)
        reports.append(rep)
    return TrainingResult(reports, fed)


# ---------------------------------------------------------------------------
# output


def _fmt(x: float) -> str:
    return "" if x != x else repr(float(x))


def metrics_csv(reports: Sequence[RoundReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for rep in reports:
        for m in rep.clients:
            for split, acc in (("train", m.train_acc), ("test", m.test_acc)):
                w.writerow([
                    rep.round, m.client_id, split, _fmt(acc),
                    _fmt(m.losses.recon), _fmt(m.losses.id), _fmt(m.losses.cls),
                    m.comm_up, m.comm_down,
                ])
    return buf.getvalue()


__all__ = [
    "ALGORITHMS", "ClientMetrics", "Federation", "FederationConfig", "ManifestError", "RoundReport",
    "TrainingResult", "aggregate", "aggregate_exact", "aggregation_weights", "broadcast",
    "count_comm_params", "metrics_csv", "run_training", "sample_clients",
]
