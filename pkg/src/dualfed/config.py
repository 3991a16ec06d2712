"""Experiment configuration: one INI-style file with fixed sections and keys.

Every key has a default, so an empty file is a valid config. Unknown
sections or keys are rejected with a :class:`ConfigError` naming them.
See ``configs/`` for examples and the README for the full key list.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import DEFAULT_SHIFTS, DEFAULT_SIGMAS, TABLE1_COUNTS
from .errors import ConfigError
from .federation import TrainConfig
from .model import BackboneConfig, first_blocks, last_blocks

SCENARIOS = {
    "centralized_full": ("centralized", "full_ft"),
    "centralized_head": ("centralized", "head_only"),
    "centralized_lora": ("centralized", "lora"),
    "fed_head": ("federated", "head_only"),
    "fed_lora": ("federated", "lora"),
    "fed_dual_lora": ("federated", "dual_lora"),
    "client_local": ("local", "lora"),
}
GRID = "grid"  # every scenario above, in this order


@dataclass(frozen=True)
class DataSection:
    seed: int = 0
    shift_scale: float = 1.0
    target_balanced_accuracy: float = 0.85
    offset_alignment: float = 1.0
    common_share: float = 0.7
    offset_signs: str = "alternate"
    input_dim: int = 64
    num_tokens: int = 4
    shifts: tuple[tuple[str, float], ...] = tuple(DEFAULT_SHIFTS.items())
    sigmas: tuple[tuple[str, float], ...] = tuple(DEFAULT_SIGMAS.items())


@dataclass(frozen=True)
class ModelSection:
    num_blocks: int = 12
    hidden_dim: int = 32
    num_heads: int = 4
    mlp_ratio: int = 4
    pretrain_steps: int = 300
    pretrain_seed: int = 0
    pretrain_lr: float = 1e-3
    pretext_samples: int = 1024


@dataclass(frozen=True)
class LoraSection:
    rank: int = 4
    alpha: float = 8.0
    blocks: int | None = None  # None -> every block
    placement: str = "last"
    block_indices: tuple[int, ...] | None = None  # explicit set, overrides blocks/placement


@dataclass(frozen=True)
class SweepSection:
    blocks: tuple[int, ...] = (2, 4, 6, 8, 10, 12)
    scenarios: tuple[str, ...] = ("fed_dual_lora",)


@dataclass(frozen=True)
class TrainSection:
    lr: float | None = None
    weight_decay: float = 1e-2
    batch_size: int = 32
    max_epochs: int = 500
    patience: int = 20
    min_delta: float = 0.0
    head_scope: str = "shared"
    reset_global_moments: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "fed_dual_lora"
    seeds: tuple[int, ...] = (0, 1, 2)
    output: str = "results"
    reference: str = "fed_dual_lora"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    lora: LoraSection = field(default_factory=LoraSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def __post_init__(self):
        if self.scenario != GRID and self.scenario not in SCENARIOS:
            raise ConfigError(f"experiment.scenario: unknown scenario {self.scenario!r}")
        if self.reference not in SCENARIOS:
            raise ConfigError(f"experiment.reference: unknown scenario {self.reference!r}")
        if not self.seeds:
            raise ConfigError("experiment.seeds: at least one seed required")
        for s in self.sweep.scenarios:
            if SCENARIOS.get(s, ("",))[0] != "federated" or s == "fed_head":
                raise ConfigError(f"sweep.scenarios: {s!r} is not an adapter-based federated scenario")
        if self.lora.placement not in ("last", "first"):
            raise ConfigError(f"lora.placement: must be 'last' or 'first', got {self.lora.placement!r}")
        names = set(TABLE1_COUNTS)
        for key, pairs in (("shifts", self.data.shifts), ("sigmas", self.data.sigmas)):
            for name, _ in pairs:
                if name not in names:
                    raise ConfigError(f"{key}.{name}: no such client")
        self.backbone_config()  # validates the architecture
        self.train_config()

    @property
    def scenarios(self) -> tuple[str, ...]:
        return tuple(SCENARIOS) if self.scenario == GRID else (self.scenario,)

    def backbone_config(self) -> BackboneConfig:
        m = self.model
        return BackboneConfig(
            num_blocks=m.num_blocks,
            hidden_dim=m.hidden_dim,
            num_heads=m.num_heads,
            mlp_ratio=m.mlp_ratio,
            input_dim=self.data.input_dim,
            num_tokens=self.data.num_tokens,
        )

    def adapted_blocks(self, k: int | None = None) -> tuple[int, ...] | None:
        """Adapted block indices; ``k`` overrides the configured block count."""
        L = self.model.num_blocks
        if k is None and self.lora.block_indices is not None:
            blocks = tuple(sorted(set(self.lora.block_indices)))
            if any(not 0 <= b < L for b in blocks):
                raise ConfigError(f"lora.block_indices: indices must lie in 0..{L - 1}")
            return blocks
        k = self.lora.blocks if k is None else k
        if k is None:
            return None
        if not 1 <= k <= L:
            raise ConfigError(f"lora.blocks: {k} outside 1..{L}")
        return last_blocks(L, k) if self.lora.placement == "last" else first_blocks(L, k)

    def train_config(self, k: int | None = None) -> TrainConfig:
        t = self.train
        try:
            return TrainConfig(
                lr=t.lr,
                weight_decay=t.weight_decay,
                batch_size=t.batch_size,
                max_epochs=t.max_epochs,
                patience=t.patience,
                min_delta=t.min_delta,
                rank=self.lora.rank,
                alpha=self.lora.alpha,
                adapted_blocks=self.adapted_blocks(k),
                head_scope=t.head_scope,
                reset_global_moments=t.reset_global_moments,
            )
        except ConfigError as exc:
            raise ConfigError(f"train: {exc}") from exc

    def with_seeds(self, seeds) -> ExperimentConfig:
        return replace(self, seeds=tuple(seeds))

    def with_output(self, output: str) -> ExperimentConfig:
        return replace(self, output=str(output))


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------

def _int(s: str) -> int:
    return int(s)


def _float(s: str) -> float:
    return float(s)


def _opt(conv):
    def parse(s: str):
        return None if s.strip().lower() in ("", "none", "default", "all") else conv(s)

    return parse


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.replace(",", " ").split())


def _strs(s: str) -> tuple[str, ...]:
    return tuple(x for x in s.replace(",", " ").split())


_KEYS = {
    "experiment": {"scenario": str, "seeds": _ints, "output": str, "reference": str},
    "data": {
        "seed": _int,
        "shift_scale": _float,
        "target_balanced_accuracy": _float,
        "offset_alignment": _float,
        "common_share": _float,
        "offset_signs": str,
        "input_dim": _int,
        "num_tokens": _int,
    },
    "model": {
        "num_blocks": _int,
        "hidden_dim": _int,
        "num_heads": _int,
        "mlp_ratio": _int,
        "pretrain_steps": _int,
        "pretrain_seed": _int,
        "pretrain_lr": _float,
        "pretext_samples": _int,
    },
    "train": {
        "lr": _opt(_float),
        "weight_decay": _float,
        "batch_size": _int,
        "max_epochs": _int,
        "patience": _int,
        "min_delta": _float,
        "head_scope": str,
        "reset_global_moments": _bool,
    },
    "lora": {
        "rank": _int,
        "alpha": _float,
        "blocks": _opt(_int),
        "placement": str,
        "block_indices": _opt(_ints),
    },
    "sweep": {"blocks": _ints, "scenarios": _strs},
}
_CLIENT_SECTIONS = ("shifts", "sigmas")


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(
        inline_comment_prefixes=("#", ";"), interpolation=None, default_section="\0"
    )
    parser.optionxform = str  # keep client names case-sensitive
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc

    values: dict[str, dict] = {}
    for section in parser.sections():
        if section in _CLIENT_SECTIONS:
            pairs = []
            for key, raw in parser[section].items():
                try:
                    pairs.append((key, float(raw)))
                except ValueError:
                    raise ConfigError(f"{section}.{key}: expected a number, got {raw!r}") from None
            values[section] = dict(pairs)
            continue
        if section not in _KEYS:
            raise ConfigError(f"unknown section [{section}]")
        values[section] = {}
        for key, raw in parser[section].items():
            conv = _KEYS[section].get(key)
            if conv is None:
                raise ConfigError(f"{section}.{key}: unknown key")
            try:
                values[section][key] = conv(raw.strip())
            except ValueError as exc:
                raise ConfigError(f"{section}.{key}: {exc}") from None

    data = dict(values.get("data", {}))
    shifts = dict(DEFAULT_SHIFTS)
    shifts.update(values.get("shifts", {}))
    sigmas = dict(DEFAULT_SIGMAS)
    sigmas.update(values.get("sigmas", {}))
    extra = [f"{s}.{n}" for s in _CLIENT_SECTIONS for n in values.get(s, {}) if n not in TABLE1_COUNTS]
    if extra:
        raise ConfigError(f"{extra[0]}: no such client")
    data["shifts"] = tuple(shifts.items())
    data["sigmas"] = tuple(sigmas.items())
    try:
        return ExperimentConfig(
            **values.get("experiment", {}),
            data=DataSection(**data),
            model=ModelSection(**values.get("model", {})),
            train=TrainSection(**values.get("train", {})),
            lora=LoraSection(**values.get("lora", {})),
            sweep=SweepSection(**values.get("sweep", {})),
        )
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), str(p))


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_ini(cfg: ExperimentConfig) -> str:
    """Fully resolved config; parsing it back yields an equal ``ExperimentConfig``."""
    lines = ["[experiment]"]
    for key in _KEYS["experiment"]:
        lines.append(f"{key} = {_fmt(getattr(cfg, key))}")
    for section in ("data", "model", "train", "lora", "sweep"):
        obj = getattr(cfg, section)
        lines += ["", f"[{section}]"]
        for key in _KEYS[section]:
            lines.append(f"{key} = {_fmt(getattr(obj, key))}")
    for section in _CLIENT_SECTIONS:
        lines += ["", f"[{section}]"]
        for name, v in getattr(cfg.data, section):
            lines.append(f"{name} = {v!r}")
    return "\n".join(lines) + "\n"
