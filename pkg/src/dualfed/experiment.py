"""Scenario runner: builds data and backbone from a config, trains every seed, writes results.

Layout of an output directory::

    manifest.txt                 resolved config, version, file list, duration
    summary.tsv / summary.txt    seed mean and std per scenario, stars vs the reference
    frontier.tsv                 sweeps only
    <scenario>/seed<i>-<seed>.json     per-seed test metrics
    <scenario>/rounds<i>-<seed>.ndjson per-round (federated) or per-epoch log

Only ``summary.*``, ``frontier.tsv`` and the per-seed files are expected to be
bitwise reproducible; the manifest records wall-clock time.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import __version__
from .budget import FrontierPoint, comm_bytes, comm_params, comm_spec_for, frontier_tsv
from .config import SCENARIOS, ExperimentConfig, to_ini
from .data import FederationDataset, TaskGeometry, build_federation, default_specs, pretext_split
from .evaluation import MetricsReport, Summary, format_table, format_tsv, seed_summary, summarize
from .federation import evaluate_models, run_centralized, run_client_local, run_federated
from .model import Backbone, pretrain_backbone

OUTPUT_ROOT_ENV = "DUALFED_OUTPUT_ROOT"

_BACKBONES: dict[tuple, Backbone] = {}


def resolve_output(path: str | Path) -> Path:
    """Relative output paths are placed under ``$DUALFED_OUTPUT_ROOT`` when it is set."""
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def build_dataset(cfg: ExperimentConfig) -> FederationDataset:
    d = cfg.data
    geometry = TaskGeometry(
        d.input_dim, d.num_tokens, d.target_balanced_accuracy, d.seed,
        d.offset_alignment, d.common_share, d.offset_signs,
    )
    specs = default_specs(d.seed, shifts=dict(d.shifts), sigmas=dict(d.sigmas))
    return build_federation(specs, geometry, d.shift_scale)


def build_backbone(cfg: ExperimentConfig, fed: FederationDataset) -> Backbone:
    """Pretrained frozen backbone; memoized per (architecture, data, pretraining) key."""
    m = cfg.model
    key = (cfg.backbone_config().architecture(), cfg.data, m)
    if key not in _BACKBONES:
        X, y = pretext_split(fed, m.pretext_samples, m.pretrain_seed)
        _BACKBONES[key] = pretrain_backbone(
            cfg.backbone_config(), X, y, steps=m.pretrain_steps, seed=m.pretrain_seed, lr=m.pretrain_lr
        )
    return _BACKBONES[key]


def run_seed(
    scenario: str,
    cfg: ExperimentConfig,
    fed: FederationDataset,
    backbone: Backbone,
    seed: int,
    log_path: Path | None = None,
    k: int | None = None,
):
    """Train one scenario for one seed; returns ``(MetricsReport, measured uplink bytes per round)``."""
    kind, mode = SCENARIOS[scenario]
    hyper = cfg.train_config(k)
    uplink: list[int] = []
    if kind == "federated":
        if log_path is not None and log_path.exists():
            log_path.unlink()
        res = run_federated(mode, fed, backbone, hyper, seed, log_path=log_path)
        uplink = [r.uplink_bytes for r in res.rounds]
        report = evaluate_models(res.models(), fed, seed=seed, scenario=scenario)
    elif kind == "centralized":
        res = run_centralized(mode, fed, backbone, hyper, seed)
        _write_history(log_path, res.history)
        report = evaluate_models(res.model, fed, seed=seed, scenario=scenario)
    else:
        results = run_client_local(fed, backbone, hyper, seed, mode=mode)
        _write_history(log_path, [dict(client=n, **h) for n, r in results.items() for h in r.history])
        report = evaluate_models({n: r.model for n, r in results.items()}, fed, seed=seed, scenario=scenario)
    return report, uplink


def _write_history(path: Path | None, rows: list[dict]) -> None:
    if path is None:
        return
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


@dataclass
class RunManifest:
    config_text: str
    version: str
    files: list[str] = field(default_factory=list)
    duration_s: float = 0.0

    def render(self) -> str:
        lines = [
            f"dualfed {self.version}",
            f"duration_s {self.duration_s:.3f}",
            "files",
            *[f"  {f}" for f in self.files],
            "config",
            self.config_text,
        ]
        return "\n".join(lines)

    def write(self, out: Path) -> Path:
        path = out / "manifest.txt"
        path.write_text(self.render())
        return path


def _progress(quiet: bool) -> Callable[[str], None]:
    return (lambda msg: None) if quiet else (lambda msg: print(msg, flush=True))


def run_experiment(cfg: ExperimentConfig, quiet: bool = False) -> tuple[RunManifest, dict[str, dict[str, Summary]]]:
    """Every configured scenario for every seed, then the seed summary in fixed order."""
    t0 = time.perf_counter()
    say = _progress(quiet)
    out = resolve_output(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    fed = build_dataset(cfg)
    backbone = build_backbone(cfg, fed)
    manifest = RunManifest(to_ini(cfg), __version__)

    reports: dict[str, list[MetricsReport]] = {}
    for scenario in cfg.scenarios:
        sub = out / scenario
        sub.mkdir(exist_ok=True)
        reports[scenario] = []
        for i, seed in enumerate(cfg.seeds):
            log = sub / f"rounds{i}-{seed}.ndjson"
            report, _ = run_seed(scenario, cfg, fed, backbone, seed, log)
            path = sub / f"seed{i}-{seed}.json"
            path.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
            manifest.files += [str(path.relative_to(out)), str(log.relative_to(out))]
            reports[scenario].append(report)
            w = report.weighted()
            say(f"{scenario} seed {seed}: balanced accuracy {w['balanced_accuracy']:.3f}")

    summaries = {s: seed_summary(r) for s, r in reports.items()}
    (out / "summary.tsv").write_text(format_tsv(summaries, cfg.reference))
    (out / "summary.txt").write_text(format_table(summaries, cfg.reference) + "\n")
    manifest.files += ["summary.tsv", "summary.txt"]
    manifest.duration_s = time.perf_counter() - t0
    manifest.write(out)
    say(format_table(summaries, cfg.reference))
    return manifest, summaries


def run_sweep(cfg: ExperimentConfig, quiet: bool = False) -> tuple[RunManifest, list[FrontierPoint]]:
    """Block-count ablation for each sweep scenario; writes ``frontier.tsv``."""
    t0 = time.perf_counter()
    say = _progress(quiet)
    out = resolve_output(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    fed = build_dataset(cfg)
    backbone = build_backbone(cfg, fed)
    manifest = RunManifest(to_ini(cfg), __version__)
    arch = cfg.backbone_config()

    points = []
    for scenario in cfg.sweep.scenarios:
        _, mode = SCENARIOS[scenario]
        for k in cfg.sweep.blocks:
            spec = comm_spec_for(mode, arch, cfg.train_config(k))
            sub = out / f"{scenario}-k{k}"
            sub.mkdir(exist_ok=True)
            accs, measured = [], []
            for i, seed in enumerate(cfg.seeds):
                log = sub / f"rounds{i}-{seed}.ndjson"
                report, uplink = run_seed(scenario, cfg, fed, backbone, seed, log, k=k)
                path = sub / f"seed{i}-{seed}.json"
                path.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
                manifest.files += [str(path.relative_to(out)), str(log.relative_to(out))]
                accs.append(report.weighted()["balanced_accuracy"])
                measured.extend(uplink)
            s = summarize(accs)
            points.append(
                FrontierPoint(
                    label=f"{scenario}@{k}",
                    bytes_per_round=len(fed.clients) * comm_bytes(spec),
                    balanced_accuracy=s.mean,
                    balanced_accuracy_std=s.std,
                    blocks=k,
                    params=comm_params(spec),
                    measured_bytes=measured,
                )
            )
            say(f"{scenario} k={k}: {s} at {points[-1].bytes_per_round} bytes/round")

    (out / "frontier.tsv").write_text(frontier_tsv(points))
    manifest.files.append("frontier.tsv")
    manifest.duration_s = time.perf_counter() - t0
    manifest.write(out)
    return manifest, points
