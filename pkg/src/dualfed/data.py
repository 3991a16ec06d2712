"""Synthetic non-IID, class-imbalanced federation with fixed per-client splits.

Features are ``input_dim`` floats viewed as ``num_tokens`` equal chunks. Class
``c`` of client ``k`` is drawn from ``N(mu_c + delta_k, sigma_k^2 I)``. The
class means differ along a unit axis ``u`` that mixes a *contrast* pattern
(chunk 0 minus chunk 1, the analogue of a change between two cardiac phases)
with a *common-mode* pattern repeated in every chunk. ``delta_k`` is a
per-client offset whose length is the client's shift magnitude times a global
knob; a share of it lies along ``u`` with alternating (or random) sign, so
vendors disagree on where the decision threshold sits.

The class separation is solved so that the Bayes-optimal single threshold on
``u``, applied to the pooled federation, reaches a target balanced accuracy.

Label 1 is the diseased (positive) class.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

from .errors import ConfigError

SPLITS = ("train", "val", "test")
DATASET_MAGIC = b"DFDS"

# (DIS, NOR) per split; mirrors the five-site layout of the reference study
TABLE1_COUNTS = {
    "Canon": {"train": (28, 7), "val": (3, 4), "test": (5, 3)},
    "GE": {"train": (53, 20), "val": (14, 1), "test": (15, 2)},
    "Philips": {"train": (78, 26), "val": (15, 7), "test": (19, 4)},
    "Siemens": {"train": (151, 16), "val": (32, 3), "test": (34, 3)},
    "ACDC": {"train": (72, 18), "val": (8, 2), "test": (40, 10)},
}

# relative offset length and noise scale per client; Canon is the most shifted
DEFAULT_SHIFTS = {"Canon": 3.0, "GE": 1.5, "Philips": 1.125, "Siemens": 0.75, "ACDC": 1.875}
DEFAULT_SIGMAS = {"Canon": 1.25, "GE": 1.0, "Philips": 1.0, "Siemens": 1.0, "ACDC": 1.0}


@dataclass
class ClientSpec:
    name: str
    counts: dict[str, tuple[int, int]]
    shift: float = 1.0
    sigma: float = 1.0
    seed: int = 0
    offset: np.ndarray | None = None  # explicit delta_k; overrides shift when given

    def __post_init__(self):
        for split in SPLITS:
            dis, nor = self.counts.get(split, (0, 0))
            if dis < 0 or nor < 0:
                raise ConfigError(f"{self.name}: negative count in {split} split")
        if sum(self.counts.get("train", (0, 0))) < 1:
            raise ConfigError(f"{self.name}: needs at least one training sample")
        if self.sigma <= 0:
            raise ConfigError(f"{self.name}: sigma must be positive")

    def size(self, split: str) -> int:
        return sum(self.counts.get(split, (0, 0)))


@dataclass(frozen=True)
class TaskGeometry:
    """Class-mean direction and separation shared by all clients.

    ``separation`` is normally left ``None`` and solved by :func:`build_federation`
    so that the pooled federation hits ``target_balanced_accuracy``.
    """

    input_dim: int = 64
    num_tokens: int = 4
    target_balanced_accuracy: float = 0.85
    seed: int = 0
    offset_alignment: float = 1.0  # share of each client offset along the class axis
    common_share: float = 0.7  # weight of the common-mode pattern in the class axis
    offset_signs: str = "alternate"  # "alternate": client i gets (-1)^i along u; "random": coin flip
    separation: float | None = None  # class-mean distance in noise-std units

    def __post_init__(self):
        if self.input_dim % self.num_tokens or self.num_tokens < 2:
            raise ConfigError("input_dim must split into at least two equal chunks")
        if not 0.5 < self.target_balanced_accuracy < 1.0:
            raise ConfigError("target balanced accuracy must lie in (0.5, 1)")
        if not 0.0 <= self.offset_alignment <= 1.0:
            raise ConfigError("offset_alignment must lie in [0, 1]")
        if not 0.0 <= self.common_share < 1.0:
            raise ConfigError("common_share must lie in [0, 1)")
        if self.offset_signs not in ("alternate", "random"):
            raise ConfigError(f"offset_signs must be 'alternate' or 'random', got {self.offset_signs!r}")
        if self.separation is not None and not self.separation > 0:
            raise ConfigError("separation must be positive")

    def direction(self) -> np.ndarray:
        """Unit class axis: ``sqrt(1 - c^2)`` contrast plus ``c`` common-mode."""
        td = self.input_dim // self.num_tokens
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xD1]))
        w = rng.normal(size=td)
        w /= np.linalg.norm(w)
        contrast = np.zeros(self.input_dim)
        contrast[:td] = w
        contrast[td:2 * td] = -w
        contrast /= np.linalg.norm(contrast)
        v = rng.normal(size=td)
        common = np.tile(v / np.linalg.norm(v), self.num_tokens)
        common /= np.linalg.norm(common)
        c = self.common_share
        u = np.sqrt(1.0 - c * c) * contrast + c * common
        return u / np.linalg.norm(u)

    def class_means(self) -> tuple[np.ndarray, np.ndarray]:
        """(mu_NOR, mu_DIS)."""
        if self.separation is None:
            raise ConfigError("separation not resolved; build the geometry through build_federation")
        half = 0.5 * self.separation * self.direction()
        return -half, half


_GRID = np.linspace(-60.0, 60.0, 24001)


def pooled_balanced_accuracy(
    separation: float,
    axis_offsets: Sequence[float],
    sigmas: Sequence[float],
    dis_weights: Sequence[float],
    nor_weights: Sequence[float],
) -> float:
    """Bayes-optimal balanced accuracy of the pooled mixture projected on the class axis.

    Equals ``(1 + TV) / 2`` with TV the total-variation distance between the
    pooled DIS and NOR densities of ``x . u``. Client identity is not observed.
    """
    pd = np.zeros_like(_GRID)
    pn = np.zeros_like(_GRID)
    for o, sd, wd, wn in zip(axis_offsets, sigmas, dis_weights, nor_weights):
        pd += wd * norm.pdf(_GRID, o + 0.5 * separation, sd)
        pn += wn * norm.pdf(_GRID, o - 0.5 * separation, sd)
    tv = 0.5 * float(np.trapezoid(np.abs(pd - pn), _GRID))
    return 0.5 * (1.0 + tv)


def solve_separation(target: float, axis_offsets, sigmas, dis_weights, nor_weights) -> float:
    """Class-mean separation at which the pooled Bayes balanced accuracy equals ``target``."""
    wd = np.asarray(dis_weights, dtype=np.float64)
    wn = np.asarray(nor_weights, dtype=np.float64)
    wd = wd / wd.sum() if wd.sum() > 0 else np.full(len(wd), 1.0 / len(wd))
    wn = wn / wn.sum() if wn.sum() > 0 else np.full(len(wn), 1.0 / len(wn))

    def gap(s):
        return pooled_balanced_accuracy(s, axis_offsets, sigmas, wd, wn) - target

    return float(brentq(gap, 1e-6, 40.0, xtol=1e-12))


@dataclass
class ClientData:
    spec: ClientSpec
    offset: np.ndarray
    splits: dict[str, tuple[np.ndarray, np.ndarray]]

    @property
    def name(self) -> str:
        return self.spec.name

    def X(self, split: str) -> np.ndarray:
        return self.splits[split][0]

    def y(self, split: str) -> np.ndarray:
        return self.splits[split][1]

    def n(self, split: str = "train") -> int:
        return len(self.splits[split][1])


@dataclass
class FederationDataset:
    clients: list[ClientData]
    geometry: TaskGeometry
    shift_scale: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.clients]

    def pooled(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        Xs = [c.X(split) for c in self.clients if c.n(split)]
        ys = [c.y(split) for c in self.clients if c.n(split)]
        if not Xs:
            return np.empty((0, self.geometry.input_dim)), np.empty(0, dtype=np.int64)
        return np.concatenate(Xs), np.concatenate(ys)

    def subset(self, names) -> FederationDataset:
        keep = [c for c in self.clients if c.name in set(names)]
        return FederationDataset(keep, self.geometry, self.shift_scale, dict(self.meta))

    def counts(self) -> dict[str, dict[str, tuple[int, int]]]:
        out = {}
        for c in self.clients:
            out[c.name] = {
                s: (int((c.y(s) == 1).sum()), int((c.y(s) == 0).sum())) for s in SPLITS
            }
        return out


def client_offset(spec: ClientSpec, geometry: TaskGeometry, shift_scale: float, index: int) -> np.ndarray:
    if spec.offset is not None:
        off = np.asarray(spec.offset, dtype=np.float64)
        if off.shape != (geometry.input_dim,):
            raise ConfigError(f"{spec.name}: offset must have length {geometry.input_dim}")
        return off * shift_scale
    rng = np.random.default_rng(np.random.SeedSequence([geometry.seed, 0x0FF, index]))
    d = rng.normal(size=geometry.input_dim)
    u = geometry.direction()
    coin = rng.random()
    if geometry.offset_signs == "alternate":
        sign = -1.0 if index % 2 else 1.0
    else:
        sign = 1.0 if coin < 0.5 else -1.0
    d -= (d @ u) * u
    d /= np.linalg.norm(d)
    a = geometry.offset_alignment
    return shift_scale * spec.shift * (a * sign * u + np.sqrt(1.0 - a * a) * d)


def generate_client(
    spec: ClientSpec, geometry: TaskGeometry, offset: np.ndarray
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Draw every split of one client; deterministic in ``spec.seed``."""
    mu_nor, mu_dis = geometry.class_means()
    splits = {}
    for code, split in enumerate(SPLITS):
        dis, nor = spec.counts.get(split, (0, 0))
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, code]))
        y = np.concatenate([np.ones(dis, dtype=np.int64), np.zeros(nor, dtype=np.int64)])
        y = y[rng.permutation(len(y))]
        means = np.where(y[:, None] == 1, mu_dis, mu_nor) + offset
        X = means + spec.sigma * rng.normal(size=(len(y), geometry.input_dim))
        splits[split] = (X, y)
    return splits


def build_federation(
    specs: list[ClientSpec], geometry: TaskGeometry, shift_scale: float = 1.0
) -> FederationDataset:
    offsets = [client_offset(spec, geometry, shift_scale, i) for i, spec in enumerate(specs)]
    if geometry.separation is None:
        u = geometry.direction()
        totals = [[sum(spec.counts.get(sp, (0, 0))[c] for sp in SPLITS) for spec in specs] for c in (0, 1)]
        sep = solve_separation(
            geometry.target_balanced_accuracy,
            [off @ u for off in offsets],
            [spec.sigma for spec in specs],
            totals[0],
            totals[1],
        )
        geometry = replace(geometry, separation=sep)
    clients = [
        ClientData(spec, off, generate_client(spec, geometry, off)) for spec, off in zip(specs, offsets)
    ]
    return FederationDataset(clients, geometry, shift_scale)


def default_specs(seed: int = 0, counts=None, shifts=None, sigmas=None) -> list[ClientSpec]:
    counts = TABLE1_COUNTS if counts is None else counts
    shifts = DEFAULT_SHIFTS if shifts is None else shifts
    sigmas = DEFAULT_SIGMAS if sigmas is None else sigmas
    return [
        ClientSpec(
            name=name,
            counts=dict(c),
            shift=shifts.get(name, 1.0),
            sigma=sigmas.get(name, 1.0),
            seed=int(np.random.SeedSequence([seed, i]).generate_state(1)[0]),
        )
        for i, (name, c) in enumerate(counts.items())
    ]


def default_federation(
    seed: int = 0,
    shift_scale: float = 1.0,
    target_balanced_accuracy: float = 0.85,
    input_dim: int = 64,
    num_tokens: int = 4,
    offset_alignment: float = 1.0,
    common_share: float = 0.7,
    offset_signs: str = "alternate",
) -> FederationDataset:
    """Five clients with the reference per-split class counts and per-client shifts."""
    geometry = TaskGeometry(
        input_dim, num_tokens, target_balanced_accuracy, seed, offset_alignment, common_share, offset_signs
    )
    return build_federation(default_specs(seed), geometry, shift_scale)


def pretext_split(fed: FederationDataset, n: int = 1024, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Unlabeled draws from the pooled client mixture, labeled by a disease-unrelated rule.

    The pretext label is the sign of a random projection of the chunk average
    (a common-mode feature), so pretraining shapes generic representations
    without ever seeing the diagnostic contrast.
    """
    g = fed.geometry
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E7E]))
    sizes = np.array([c.n("train") for c in fed.clients], dtype=np.float64)
    who = rng.choice(len(fed.clients), size=n, p=sizes / sizes.sum())
    _, ys = fed.pooled("train")
    prior = ys.mean()
    cls = (rng.random(n) < prior).astype(np.int64)
    mu_nor, mu_dis = g.class_means()
    X = np.empty((n, g.input_dim))
    for i, (k, c) in enumerate(zip(who, cls)):
        cl = fed.clients[k]
        X[i] = (mu_dis if c else mu_nor) + cl.offset + cl.spec.sigma * rng.normal(size=g.input_dim)
    td = g.input_dim // g.num_tokens
    v = rng.normal(size=td)
    common = X.reshape(n, g.num_tokens, td).mean(axis=1) @ v
    y = (common > np.median(common)).astype(np.int64)
    return X, y


def batch_iterator(n: int, batch_size: int, seed: int, epoch: int, stream: int = 0) -> list[np.ndarray]:
    """Shuffled index batches for one epoch; the last partial batch is kept."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if n < 1:
        raise ConfigError("cannot iterate over an empty split")
    rng = np.random.default_rng(np.random.SeedSequence([seed, stream, epoch, 0xBA7C]))
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


# --------------------------------------------------------------------------
# dump / load / summary
# --------------------------------------------------------------------------

def dump_dataset(fed: FederationDataset, path) -> None:
    """Magic, uint32 header length, JSON header, then per client/split float64 X and int8 y."""
    g = fed.geometry
    header = {
        "geometry": {
            "input_dim": g.input_dim,
            "num_tokens": g.num_tokens,
            "target_balanced_accuracy": g.target_balanced_accuracy,
            "seed": g.seed,
            "offset_alignment": g.offset_alignment,
            "common_share": g.common_share,
            "offset_signs": g.offset_signs,
            "separation": g.separation,
        },
        "shift_scale": fed.shift_scale,
        "clients": [
            {
                "name": c.name,
                "counts": {s: list(c.spec.counts.get(s, (0, 0))) for s in SPLITS},
                "shift": c.spec.shift,
                "sigma": c.spec.sigma,
                "seed": c.spec.seed,
                "sizes": {s: c.n(s) for s in SPLITS},
            }
            for c in fed.clients
        ],
    }
    raw = json.dumps(header, sort_keys=True).encode()
    parts = [DATASET_MAGIC, struct.pack("<I", len(raw)), raw]
    for c in fed.clients:
        parts.append(c.offset.astype("<f8").tobytes())
        for s in SPLITS:
            parts.append(c.X(s).astype("<f8").tobytes())
            parts.append(c.y(s).astype("i1").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path) -> FederationDataset:
    buf = Path(path).read_bytes()
    if buf[:4] != DATASET_MAGIC:
        raise ConfigError(f"{path} is not a dataset dump")
    (n,) = struct.unpack_from("<I", buf, 4)
    header = json.loads(buf[8:8 + n])
    g = TaskGeometry(**header["geometry"])
    pos = 8 + n
    clients = []
    for ch in header["clients"]:
        spec = ClientSpec(
            name=ch["name"],
            counts={s: tuple(v) for s, v in ch["counts"].items()},
            shift=ch["shift"],
            sigma=ch["sigma"],
            seed=ch["seed"],
        )
        off = np.frombuffer(buf, "<f8", g.input_dim, pos).astype(np.float64)
        pos += 8 * g.input_dim
        splits = {}
        for s in SPLITS:
            k = ch["sizes"][s]
            X = np.frombuffer(buf, "<f8", k * g.input_dim, pos).astype(np.float64).reshape(k, g.input_dim)
            pos += 8 * k * g.input_dim
            y = np.frombuffer(buf, "i1", k, pos).astype(np.int64)
            pos += k
            splits[s] = (X, y)
        clients.append(ClientData(spec, off, splits))
    return FederationDataset(clients, g, header["shift_scale"])


def summary_table(fed: FederationDataset) -> str:
    """Per-client DIS/NOR counts per split, plus a total row."""
    counts = fed.counts()
    names = list(counts) + ["Total"]
    totals = {s: (sum(counts[c][s][0] for c in counts), sum(counts[c][s][1] for c in counts)) for s in SPLITS}
    counts["Total"] = totals
    width = max(len(n) for n in names) + 2
    lines = [f"{'client':<{width}}" + "".join(f"{s + ' DIS':>10}{s + ' NOR':>10}" for s in SPLITS)]
    for name in names:
        row = counts[name]
        lines.append(f"{name:<{width}}" + "".join(f"{row[s][0]:>10}{row[s][1]:>10}" for s in SPLITS))
    return "\n".join(lines)
