"""Communication cost per round and the accuracy/bytes frontier.

First prints the per-client uplink for the default 12-block architecture as
the number of adapted blocks grows. Then runs a short block ablation on a
small pretrained backbone and marks which configurations sit on the Pareto
frontier. ``python3 demos/communication_frontier.py`` takes under a minute.
"""

from dataclasses import replace

from dualfed.budget import (
    FrontierPoint,
    ablation_sweep,
    comm_bytes,
    comm_params,
    comm_spec_for,
    frontier_tsv,
    pareto_frontier,
    placement_blocks,
)
from dualfed.config import ExperimentConfig
from dualfed.experiment import build_backbone, build_dataset
from dualfed.federation import TrainConfig, evaluate_models, run_federated
from dualfed.model import BackboneConfig


def byte_table():
    arch = BackboneConfig()
    print("adapted blocks  params/client  bytes/client  vs 12 blocks")
    full = comm_bytes(comm_spec_for("dual_lora", arch, TrainConfig(adapted_blocks=placement_blocks(12, 12))))
    head = comm_spec_for("head_only", arch)
    print(f"{'head only':>14s}  {comm_params(head):13d}  {comm_bytes(head):12d}  {comm_bytes(head) / full:11.1%}")
    for k in (1, 2, 4, 6, 8, 10, 12):
        spec = comm_spec_for("dual_lora", arch, TrainConfig(adapted_blocks=placement_blocks(12, k)))
        print(f"{k:14d}  {comm_params(spec):13d}  {comm_bytes(spec):12d}  {comm_bytes(spec) / full:11.1%}")


def small_ablation():
    cfg = ExperimentConfig()
    cfg = replace(cfg, data=replace(cfg.data, input_dim=32),
                  model=replace(cfg.model, num_blocks=4, hidden_dim=16, num_heads=2, pretrain_steps=150),
                  train=replace(cfg.train, max_epochs=60))
    fed = build_dataset(cfg)
    backbone = build_backbone(cfg, fed)
    hyper = cfg.train_config()
    points = ablation_sweep([1, 2, 4], "dual_lora", fed, backbone, hyper, seeds=(0,))
    head = run_federated("head_only", fed, backbone, hyper, seed=0)
    ba = evaluate_models(head.models(), fed, seed=0).weighted()["balanced_accuracy"]
    spec = comm_spec_for("head_only", backbone.config)
    points.append(FrontierPoint("head_only", len(fed.clients) * comm_bytes(spec), ba, params=comm_params(spec)))
    pareto_frontier(points)
    print("\nshort ablation on a 4-block backbone, one seed")
    print(frontier_tsv(points))


if __name__ == "__main__":
    byte_table()
    small_ablation()
