"""Federated, centralized and client-local training loops.

One communication round:

1. the server broadcasts the shared tensors (global adapters and, with
   ``head_scope="shared"``, the head); each client overwrites its copies and
   keeps its private local adapters;
2. every client runs one local epoch of AdamW over its training split;
3. every client serializes its shared tensors (the uplink payload);
4. the server replaces each shared tensor by the ``n_i / n`` weighted mean;
5. each client is scored on its validation split with the new global tensors
   composed with its own local adapters, and the ``n_i``-weighted validation
   loss drives early stopping.

Clients are processed in ascending id order, so a run is bitwise reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import adaptation as lora
from . import autodiff as ad
from .autodiff import Tensor
from .data import ClientData, FederationDataset, batch_iterator
from .errors import ConfigError, NumericalError, ProtocolError
from .evaluation import ClientMetrics, MetricsReport, compute_metrics
from .model import Backbone, ClassifierModel
from .optim import AdamW

DEFAULT_LR = {"head_only": 1e-2, "lora": 1e-3, "dual_lora": 1e-3, "full_ft": 1e-4}
FEDERATED_MODES = ("head_only", "lora", "dual_lora")
CENTRALIZED_MODES = ("full_ft", "head_only", "lora", "dual_lora")


@dataclass(frozen=True)
class TrainConfig:
    lr: float | None = None  # None -> DEFAULT_LR[mode]
    weight_decay: float = 1e-2
    batch_size: int = 32
    max_epochs: int = 500  # epochs (centralized) or rounds (federated)
    patience: int = 20
    min_delta: float = 0.0
    rank: int = 4
    alpha: float = 8.0
    adapted_blocks: tuple[int, ...] | None = None  # None -> all blocks
    head_scope: str = "shared"
    reset_global_moments: bool = True

    def __post_init__(self):
        if self.head_scope not in ("shared", "local"):
            raise ConfigError(f"head_scope must be 'shared' or 'local', got {self.head_scope!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("max_epochs must be >= 0 and patience >= 1")

    def lr_for(self, mode: str) -> float:
        return DEFAULT_LR[mode] if self.lr is None else self.lr


# --------------------------------------------------------------------------
# clients
# --------------------------------------------------------------------------

@dataclass
class ClientState:
    client_id: int
    data: ClientData
    model: ClassifierModel
    optimizer: AdamW
    history: list[dict] = field(default_factory=list)
    _features: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def name(self) -> str:
        return self.data.name

    @property
    def n(self) -> int:
        """Training-set size, the aggregation weight numerator."""
        return self.data.n("train")

    def features(self, split: str) -> np.ndarray:
        if split not in self._features:
            self._features[split] = self.model.prefix_features(self.data.X(split))
        return self._features[split]


def make_client(
    client_id: int,
    data: ClientData,
    backbone: Backbone,
    mode: str,
    hyper: TrainConfig,
    seed: int,
) -> ClientState:
    model = ClassifierModel(
        backbone,
        mode=mode,
        adapted_blocks=hyper.adapted_blocks,
        rank=hyper.rank,
        alpha=hyper.alpha,
        seed=seed,
        client_id=client_id,
    )
    opt = AdamW(model.trainable_parameters(), lr=hyper.lr_for(mode), weight_decay=hyper.weight_decay)
    return ClientState(client_id, data, model, opt)


def local_train_epoch(client: ClientState, hyper: TrainConfig, seed: int, epoch: int) -> float:
    """One pass of AdamW over the client's training split; returns the mean batch loss."""
    F = client.features("train")
    y = client.data.y("train")
    losses = []
    for idx in batch_iterator(len(y), hyper.batch_size, seed, epoch, stream=client.client_id):
        ad.reset_tape()
        client.optimizer.zero_grad()
        try:
            loss = ad.cross_entropy(client.model.forward_from(F[idx]), y[idx])
            ad.backward(loss)
        except NumericalError as exc:
            raise NumericalError(f"client {client.name} epoch {epoch}: {exc}") from exc
        client.optimizer.step()
        losses.append(loss.item())
    ad.reset_tape()
    return float(np.mean(losses))


def evaluate_split(model: ClassifierModel, F: np.ndarray, y: np.ndarray) -> tuple[float, ClientMetrics]:
    """Cross-entropy and metrics of ``model`` on cached prefix features ``F``."""
    with ad.no_grad():
        logits = model.forward_from(F)
        loss = ad.cross_entropy(logits, y).item()
    return loss, compute_metrics(np.argmax(logits.data, axis=1), y)


# --------------------------------------------------------------------------
# payloads and aggregation
# --------------------------------------------------------------------------

def shared_names(model: ClassifierModel, head_scope: str = "shared") -> list[str]:
    """Trainable tensors that cross the client/server boundary, in trainable order."""
    out = []
    for name, _ in model.trainable_parameters():
        if ".local." in name:
            continue
        if name.startswith("head.") and head_scope == "local":
            continue
        out.append(name)
    return out


def private_names(model: ClassifierModel, head_scope: str = "shared") -> list[str]:
    shared = set(shared_names(model, head_scope))
    return [n for n, _ in model.trainable_parameters() if n not in shared]


@dataclass
class Payload:
    """One client's uplink: the tensors as held in memory plus their wire encoding."""

    client_id: int
    names: list[str]
    arrays: list[np.ndarray]
    wire: bytes

    @property
    def data_bytes(self) -> int:
        return 4 * sum(a.size for a in self.arrays)

    @property
    def header_bytes(self) -> int:
        return len(self.wire) - self.data_bytes


def encode_shared(model: ClassifierModel, names: list[str]) -> bytes:
    """Wire encoding of the named shared tensors: adapter records, then head records."""
    wanted = set(names)
    parts = []
    for (b, p), layer in model.layers.items():
        if f"blocks.{b}.{p}.global.A" in wanted:
            parts.append(lora.encode_adapter(layer.global_adapter, "global"))
    if "head.weight" in wanted:
        parts.append(lora.encode_tensor(lora.KIND_HEAD_WEIGHT, model.head_w.data))
    if "head.bias" in wanted:
        parts.append(lora.encode_tensor(lora.KIND_HEAD_BIAS, model.head_b.data))
    return b"".join(parts)


def make_payload(client: ClientState, names: list[str]) -> Payload:
    params = client.model.parameter_dict()
    arrays = [params[n].data.copy() for n in names]
    return Payload(client.client_id, list(names), arrays, encode_shared(client.model, names))


def decode_payload(wire: bytes) -> list[tuple[int, tuple[np.ndarray, ...]]]:
    return lora.decode_records(wire)


def aggregation_weights(sizes) -> np.ndarray:
    n = np.asarray(sizes, dtype=np.float64)
    if n.size == 0:
        raise ConfigError("no clients to aggregate")
    if (n <= 0).any():
        raise ProtocolError("aggregation weights must be positive")
    return n / n.sum()


def aggregate(payloads: list[Payload], sizes) -> list[np.ndarray]:
    """Size-weighted elementwise mean of index-aligned payloads.

    Computed as ``x_0 + sum_i w_i (x_i - x_0)`` with ``x_0`` the lowest-id
    client's tensor, which equals ``sum_i w_i x_i`` but returns identical
    uploads (and a single upload) bit for bit.
    """
    if not payloads:
        raise ConfigError("no payloads to aggregate")
    order = np.argsort([p.client_id for p in payloads], kind="stable")
    payloads = [payloads[i] for i in order]
    w = aggregation_weights([sizes[i] for i in order])
    ref = payloads[0]
    for p in payloads[1:]:
        if p.names != ref.names:
            raise ProtocolError(f"client {p.client_id}: payload tensor names differ from client {ref.client_id}")
        for name, a, b in zip(p.names, p.arrays, ref.arrays):
            if a.shape != b.shape:
                raise ProtocolError(
                    f"client {p.client_id}: tensor {name} has shape {a.shape}, expected {b.shape}"
                )
    out = []
    for j in range(len(ref.names)):
        base = ref.arrays[j]
        acc = np.zeros_like(base)
        for wi, p in zip(w, payloads):
            acc += wi * (p.arrays[j] - base)
        merged = base + acc
        still = acc == 0.0
        merged[still] = base[still]
        out.append(merged)
    return out


def install(client: ClientState, names: list[str], arrays: list[np.ndarray]) -> None:
    params = client.model.parameter_dict()
    for n, a in zip(names, arrays):
        params[n].data[...] = a


# --------------------------------------------------------------------------
# records
# --------------------------------------------------------------------------

@dataclass
class RoundRecord:
    round: int
    uplink_bytes: int
    uplink_header_bytes: int
    downlink_bytes: int
    downlink_header_bytes: int
    train_loss: dict[str, float]
    val_loss: dict[str, float]
    val_metrics: dict[str, dict[str, float]]
    weighted_val_loss: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "round": self.round,
                "uplink_bytes": self.uplink_bytes,
                "uplink_header_bytes": self.uplink_header_bytes,
                "downlink_bytes": self.downlink_bytes,
                "downlink_header_bytes": self.downlink_header_bytes,
                "train_loss": self.train_loss,
                "val_loss": self.val_loss,
                "val_metrics": self.val_metrics,
                "weighted_val_loss": self.weighted_val_loss,
            },
            sort_keys=True,
        )


@dataclass
class ServerState:
    names: list[str]
    arrays: list[np.ndarray]
    round: int = 0
    best_round: int = -1
    best_loss: float = float("inf")
    patience_counter: int = 0
    best_arrays: list[np.ndarray] | None = None


@dataclass
class FederatedResult:
    mode: str
    clients: list[ClientState]
    server: ServerState
    rounds: list[RoundRecord]
    uplinks: list[list[Payload]] = field(default_factory=list)  # only when keep_payloads=True

    @property
    def best_round(self) -> int:
        return self.server.best_round

    def models(self) -> dict[str, ClassifierModel]:
        return {c.name: c.model for c in self.clients}


def run_federated(
    mode: str,
    fed: FederationDataset,
    backbone: Backbone,
    hyper: TrainConfig = TrainConfig(),
    seed: int = 0,
    log_path: str | Path | None = None,
    keep_payloads: bool = False,
    on_round: Callable[[RoundRecord], None] | None = None,
) -> FederatedResult:
    """FedAvg over the shared tensors of ``mode``; local adapters never leave their client."""
    if mode not in FEDERATED_MODES:
        raise ConfigError(f"federated mode must be one of {FEDERATED_MODES}, got {mode!r}")
    if not fed.clients:
        raise ConfigError("federation has no clients")
    clients = [make_client(i, c, backbone, mode, hyper, seed) for i, c in enumerate(fed.clients)]
    names = shared_names(clients[0].model, hyper.head_scope)
    private = private_names(clients[0].model, hyper.head_scope)
    sizes = [c.n for c in clients]
    weights = aggregation_weights(sizes)
    server = ServerState(names, make_payload(clients[0], names).arrays)
    log = open(log_path, "a") if log_path is not None else None

    best_private: dict[int, list[np.ndarray]] = {}

    def snapshot():
        server.best_arrays = [a.copy() for a in server.arrays]
        for c in clients:
            params = c.model.parameter_dict()
            best_private[c.client_id] = [params[n].data.copy() for n in private]

    snapshot()
    rounds: list[RoundRecord] = []
    uplinks: list[list[Payload]] = []
    try:
        for r in range(hyper.max_epochs):
            for c in clients:
                install(c, names, server.arrays)
                if hyper.reset_global_moments:
                    c.optimizer.reset(names)
            down_wire = encode_shared(clients[0].model, names)
            train_loss = {c.name: local_train_epoch(c, hyper, seed, r) for c in clients}

            payloads = [make_payload(c, names) for c in clients]
            if keep_payloads:
                uplinks.append(payloads)
            server.arrays = aggregate(payloads, sizes)
            server.round = r + 1

            val_loss, val_metrics = {}, {}
            for c in clients:
                install(c, names, server.arrays)
                loss, met = evaluate_split(c.model, c.features("val"), c.data.y("val"))
                val_loss[c.name] = loss
                val_metrics[c.name] = met.as_dict()
            wloss = float(sum(w * val_loss[c.name] for w, c in zip(weights, clients)))
            data_down = 4 * sum(a.size for a in server.arrays)
            rec = RoundRecord(
                round=r,
                uplink_bytes=sum(p.data_bytes for p in payloads),
                uplink_header_bytes=sum(p.header_bytes for p in payloads),
                downlink_bytes=len(clients) * data_down,
                downlink_header_bytes=len(clients) * (len(down_wire) - data_down),
                train_loss=train_loss,
                val_loss=val_loss,
                val_metrics=val_metrics,
                weighted_val_loss=wloss,
            )
            rounds.append(rec)
            if log is not None:
                log.write(rec.to_json() + "\n")
            if on_round is not None:
                on_round(rec)

            if wloss < server.best_loss - hyper.min_delta:
                server.best_loss = wloss
                server.best_round = r
                server.patience_counter = 0
                snapshot()
            else:
                server.patience_counter += 1
                if server.patience_counter >= hyper.patience:
                    break
    finally:
        if log is not None:
            log.close()

    server.arrays = [a.copy() for a in server.best_arrays]
    for c in clients:
        install(c, names, server.arrays)
        install(c, private, best_private[c.client_id])
    return FederatedResult(mode, clients, server, rounds, uplinks)


# --------------------------------------------------------------------------
# centralized and client-local training
# --------------------------------------------------------------------------

@dataclass
class CentralizedResult:
    mode: str
    model: ClassifierModel
    history: list[dict]
    best_epoch: int


def _train_single(
    mode: str,
    data: ClientData,
    backbone: Backbone,
    hyper: TrainConfig,
    seed: int,
) -> CentralizedResult:
    client = make_client(0, data, backbone, mode, hyper, seed)
    params = client.model.trainable_parameters()
    best = {n: t.data.copy() for n, t in params}
    best_loss, best_epoch, patience = float("inf"), -1, 0
    for epoch in range(hyper.max_epochs):
        train_loss = local_train_epoch(client, hyper, seed, epoch)
        val_loss, met = evaluate_split(client.model, client.features("val"), data.y("val"))
        client.history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, **met.as_dict()})
        if val_loss < best_loss - hyper.min_delta:
            best_loss, best_epoch, patience = val_loss, epoch, 0
            best = {n: t.data.copy() for n, t in params}
        else:
            patience += 1
            if patience >= hyper.patience:
                break
    client.model.load_state(best)
    return CentralizedResult(mode, client.model, client.history, best_epoch)


def pooled_client(fed: FederationDataset) -> ClientData:
    """All clients' splits concatenated in client order, as one pseudo-client."""
    from .data import ClientSpec, SPLITS

    splits = {s: fed.pooled(s) for s in SPLITS}
    counts = {s: (int((splits[s][1] == 1).sum()), int((splits[s][1] == 0).sum())) for s in SPLITS}
    spec = ClientSpec(name="pooled", counts=counts)
    return ClientData(spec, np.zeros(fed.geometry.input_dim), splits)


def run_centralized(
    mode: str,
    fed: FederationDataset,
    backbone: Backbone,
    hyper: TrainConfig = TrainConfig(),
    seed: int = 0,
) -> CentralizedResult:
    """Train one model on the pooled splits with early stopping on pooled validation loss."""
    if mode not in CENTRALIZED_MODES:
        raise ConfigError(f"centralized mode must be one of {CENTRALIZED_MODES}, got {mode!r}")
    data = fed.clients[0] if len(fed.clients) == 1 else pooled_client(fed)
    return _train_single(mode, data, backbone, hyper, seed)


def run_client_local(
    fed: FederationDataset,
    backbone: Backbone,
    hyper: TrainConfig = TrainConfig(),
    seed: int = 0,
    mode: str = "lora",
) -> dict[str, CentralizedResult]:
    """Independent training per client on its own data only; nothing is communicated."""
    return {
        c.name: _train_single(mode, c, backbone, hyper, seed)
        for c in fed.clients
    }


# --------------------------------------------------------------------------
# test-set reports
# --------------------------------------------------------------------------

def evaluate_models(
    models: dict[str, ClassifierModel] | ClassifierModel,
    fed: FederationDataset,
    split: str = "test",
    seed: int | None = None,
    scenario: str = "",
) -> MetricsReport:
    """Score each client's test split with its own model (or one shared model)."""
    per_client, sizes = {}, {}
    for c in fed.clients:
        model = models if isinstance(models, ClassifierModel) else models[c.name]
        X, y = c.X(split), c.y(split)
        if len(y) == 0:
            continue
        per_client[c.name] = compute_metrics(model.predict(X), y)
        sizes[c.name] = len(y)
    return MetricsReport(per_client, sizes, seed, scenario)


def with_blocks(hyper: TrainConfig, blocks: tuple[int, ...]) -> TrainConfig:
    return replace(hyper, adapted_blocks=tuple(blocks))
