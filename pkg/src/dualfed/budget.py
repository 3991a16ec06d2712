"""Communication accounting and the bytes-vs-accuracy Pareto frontier.

Per client and round, the transmitted parameter count is::

    L * sum_p r (d_p + m_p)  (+ head parameters when the head is shared)

over the ``L`` adapted blocks and the ``P`` wrapped projections of each block.
Only the global adapter of a dual layer is counted: the local one is never sent.
Bytes are parameters times the wire precision (4 bytes, float32); the fixed
16-byte record headers are reported separately as overhead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adaptation import HEADER_BYTES
from .data import FederationDataset
from .errors import ConfigError
from .evaluation import summarize
from .federation import TrainConfig, evaluate_models, run_federated, with_blocks
from .model import PROJECTIONS, Backbone, BackboneConfig, first_blocks, last_blocks

MB = 1024 * 1024


@dataclass(frozen=True)
class CommSpec:
    adapted_blocks: int
    projection_dims: tuple[tuple[int, int], ...]  # (d, m) per wrapped projection; P = len
    rank: int
    head_dims: tuple[int, int] = (2, 32)  # (classes, hidden)
    head_included: bool = True
    precision_bytes: int = 4

    def __post_init__(self):
        if self.adapted_blocks < 0 or self.rank < 1 or self.precision_bytes < 1:
            raise ConfigError("adapted_blocks >= 0, rank >= 1 and precision_bytes >= 1 required")
        if any(d < 1 or m < 1 for d, m in self.projection_dims):
            raise ConfigError("projection dimensions must be positive")

    @property
    def P(self) -> int:
        return len(self.projection_dims)


def adapter_params(spec: CommSpec) -> int:
    return spec.adapted_blocks * sum(spec.rank * (d + m) for d, m in spec.projection_dims)


def head_params(spec: CommSpec) -> int:
    d, m = spec.head_dims
    return d * m + d if spec.head_included else 0


def comm_params(spec: CommSpec) -> int:
    return adapter_params(spec) + head_params(spec)


def comm_bytes(spec: CommSpec) -> int:
    """Predicted uplink payload per client per round, headers excluded."""
    return comm_params(spec) * spec.precision_bytes


def header_bytes(spec: CommSpec) -> int:
    """Wire overhead: one 16-byte header per adapter record and per head tensor."""
    records = spec.adapted_blocks * spec.P + (2 if spec.head_included else 0)
    return HEADER_BYTES * records


def comm_spec_for(
    mode: str,
    config: BackboneConfig,
    hyper: TrainConfig = TrainConfig(),
) -> CommSpec:
    """Communication spec of a federated scenario on the given architecture."""
    if mode == "head_only":
        blocks = 0
    elif mode in ("lora", "dual_lora"):
        blocks = config.num_blocks if hyper.adapted_blocks is None else len(set(hyper.adapted_blocks))
    else:
        raise ConfigError(f"{mode!r} is not a federated mode")
    return CommSpec(
        adapted_blocks=blocks,
        projection_dims=tuple(config.projection_shape(p) for p in PROJECTIONS),
        rank=hyper.rank,
        head_dims=(config.num_classes, config.hidden_dim),
        head_included=hyper.head_scope == "shared",
    )


# --------------------------------------------------------------------------
# Pareto frontier
# --------------------------------------------------------------------------

@dataclass
class FrontierPoint:
    label: str
    bytes_per_round: int
    balanced_accuracy: float
    balanced_accuracy_std: float | None = None
    blocks: int = 0
    params: int = 0
    measured_bytes: list[int] = field(default_factory=list)
    on_frontier: bool = False

    def __post_init__(self):
        if self.bytes_per_round <= 0:
            raise ConfigError(f"{self.label}: bytes_per_round must be positive")


def pareto_frontier(points: Sequence[FrontierPoint]) -> list[FrontierPoint]:
    """Points not dominated in (fewer bytes, higher accuracy); exact ties are all kept.

    ``q`` dominates ``p`` when ``q.bytes <= p.bytes`` and ``q.acc >= p.acc`` with
    at least one strict inequality. Returned in input order; ``on_frontier`` is set.
    """
    if not points:
        raise ConfigError("pareto_frontier needs at least one point")
    order = sorted(range(len(points)), key=lambda i: (points[i].bytes_per_round, -points[i].balanced_accuracy))
    keep = set()
    best_prev = -np.inf  # best accuracy among strictly cheaper points
    i = 0
    while i < len(order):
        j = i
        b = points[order[i]].bytes_per_round
        while j < len(order) and points[order[j]].bytes_per_round == b:
            j += 1
        group = order[i:j]
        top = points[group[0]].balanced_accuracy
        if top > best_prev:
            keep.update(k for k in group if points[k].balanced_accuracy == top)
        best_prev = max(best_prev, top)
        i = j
    for k, p in enumerate(points):
        p.on_frontier = k in keep
    return [p for k, p in enumerate(points) if k in keep]


def frontier_tsv(points: Sequence[FrontierPoint]) -> str:
    pareto_frontier(points)
    cols = ["label", "k", "params", "bytes", "bytes_MB", "balanced_acc_mean", "balanced_acc_std", "on_frontier"]
    lines = ["\t".join(cols)]
    for p in points:
        std = "" if p.balanced_accuracy_std is None else repr(p.balanced_accuracy_std)
        lines.append(
            "\t".join(
                [
                    p.label,
                    str(p.blocks),
                    str(p.params),
                    str(p.bytes_per_round),
                    f"{p.bytes_per_round / MB:.6f}",
                    repr(p.balanced_accuracy),
                    std,
                    "1" if p.on_frontier else "0",
                ]
            )
        )
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# block-count ablation
# --------------------------------------------------------------------------

def placement_blocks(num_blocks: int, k: int, placement: str = "last") -> tuple[int, ...]:
    if placement == "last":
        return last_blocks(num_blocks, k)
    if placement == "first":
        return first_blocks(num_blocks, k)
    raise ConfigError(f"placement must be 'last' or 'first', got {placement!r}")


def ablation_sweep(
    blocks_list: Sequence[int],
    mode: str,
    fed: FederationDataset,
    backbone: Backbone,
    hyper: TrainConfig = TrainConfig(),
    seeds: Sequence[int] = (0, 1, 2),
    placement: str = "last",
    label: str | None = None,
    results: dict | None = None,
) -> list[FrontierPoint]:
    """Federated runs per adapted-block count; one point per count with seed-averaged accuracy.

    ``results`` (optional) receives ``{(k, seed): FederatedResult}``.
    """
    cfg = backbone.config
    label = label or mode
    points = []
    for k in blocks_list:
        if not 1 <= k <= cfg.num_blocks:
            raise ConfigError(f"block count {k} outside 1..{cfg.num_blocks}")
        h = with_blocks(hyper, placement_blocks(cfg.num_blocks, k, placement))
        spec = comm_spec_for(mode, cfg, h)
        accs, measured = [], []
        for seed in seeds:
            res = run_federated(mode, fed, backbone, h, seed)
            accs.append(evaluate_models(res.models(), fed, seed=seed).weighted()["balanced_accuracy"])
            measured.extend(r.uplink_bytes for r in res.rounds)
            if results is not None:
                results[(k, seed)] = res
        s = summarize(accs)
        points.append(
            FrontierPoint(
                label=f"{label}@{k}",
                bytes_per_round=len(fed.clients) * comm_bytes(spec),
                balanced_accuracy=s.mean,
                balanced_accuracy_std=s.std,
                blocks=k,
                params=comm_params(spec),
                measured_bytes=measured,
            )
        )
    return points
