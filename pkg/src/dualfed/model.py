"""Tiny pre-norm transformer encoder classifier with optional (dual) LoRA wrappers.

The input feature vector is split into ``num_tokens`` equal chunks; a shared
frozen projection plus a frozen positional table turns them into a short token
sequence. Each block is ``x + attn(ln(x))`` then ``x + mlp(ln(x))``; the final
hidden states are layer-normalized, mean-pooled over tokens, and fed to a
trainable linear head.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import adaptation as lora
from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .optim import AdamW

PROJECTIONS = ("q", "k", "v", "o", "up", "down")
MODES = ("full_ft", "head_only", "lora", "dual_lora")
CHECKPOINT_MAGIC = b"DFCK"
HEAD_INIT_STD = 0.1  # head weights ~ N(0, (HEAD_INIT_STD / sqrt(h))^2)


@dataclass(frozen=True)
class BackboneConfig:
    num_blocks: int = 12
    hidden_dim: int = 32
    num_heads: int = 4
    mlp_ratio: int = 4
    input_dim: int = 64
    num_tokens: int = 4
    num_classes: int = 2
    # None means every block
    adapted_blocks: tuple[int, ...] | None = None
    projections: tuple[str, ...] = field(default=PROJECTIONS)

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.input_dim % self.num_tokens:
            raise ConfigError(f"input_dim {self.input_dim} not divisible by num_tokens {self.num_tokens}")
        if self.num_classes != 2:
            raise ConfigError("only binary classification is supported")
        if self.adapted_blocks is not None:
            bad = [b for b in self.adapted_blocks if not 0 <= b < self.num_blocks]
            if bad:
                raise ConfigError(f"adapted_blocks {bad} outside 0..{self.num_blocks - 1}")
        if tuple(self.projections) != PROJECTIONS:
            raise ConfigError(f"projections must be {PROJECTIONS}")

    @property
    def P(self) -> int:
        return len(self.projections)

    @property
    def token_dim(self) -> int:
        return self.input_dim // self.num_tokens

    @property
    def mlp_dim(self) -> int:
        return self.hidden_dim * self.mlp_ratio

    def blocks_adapted(self) -> tuple[int, ...]:
        if self.adapted_blocks is None:
            return tuple(range(self.num_blocks))
        return tuple(sorted(set(self.adapted_blocks)))

    def architecture(self) -> BackboneConfig:
        """Same config with the adapter placement dropped (pretraining cache key)."""
        return replace(self, adapted_blocks=None)

    def projection_shape(self, proj: str) -> tuple[int, int]:
        """(d, m) of a projection weight."""
        h, f = self.hidden_dim, self.mlp_dim
        return {"q": (h, h), "k": (h, h), "v": (h, h), "o": (h, h), "up": (f, h), "down": (h, f)}[proj]


def last_blocks(num_blocks: int, k: int) -> tuple[int, ...]:
    """Indices of the ``k`` blocks closest to the head."""
    if not 0 <= k <= num_blocks:
        raise ConfigError(f"cannot adapt {k} of {num_blocks} blocks")
    return tuple(range(num_blocks - k, num_blocks))


def first_blocks(num_blocks: int, k: int) -> tuple[int, ...]:
    if not 0 <= k <= num_blocks:
        raise ConfigError(f"cannot adapt {k} of {num_blocks} blocks")
    return tuple(range(k))


class Backbone:
    """Named backbone tensors plus the architecture they belong to."""

    def __init__(self, config: BackboneConfig, tensors: dict[str, Tensor]):
        self.config = config.architecture()
        self.tensors = tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def frozen(self) -> bool:
        return not any(t.requires_grad for t in self.tensors.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def trainable_copy(self) -> Backbone:
        return Backbone(
            self.config,
            {k: Tensor(t.data, requires_grad=True, name=k) for k, t in self.tensors.items()},
        )

    def frozen_copy(self) -> Backbone:
        return Backbone(self.config, {k: Tensor(t.data, name=k) for k, t in self.tensors.items()})


def backbone_tensor_names(config: BackboneConfig) -> list[str]:
    names = ["embed.weight", "embed.bias", "pos"]
    for b in range(config.num_blocks):
        for p in PROJECTIONS:
            names += [f"blocks.{b}.{p}.weight", f"blocks.{b}.{p}.bias"]
    return names


def init_backbone(config: BackboneConfig, seed: int) -> Backbone:
    """Random (untrained) backbone; weights N(0, 1/fan_in), residual outputs shrunk by sqrt(2L)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB0]))
    h, td, T = config.hidden_dim, config.token_dim, config.num_tokens
    out_scale = 1.0 / math.sqrt(2 * config.num_blocks)
    t = {
        "embed.weight": rng.normal(0, 1 / math.sqrt(td), (h, td)),
        "embed.bias": np.zeros(h),
        "pos": rng.normal(0, 0.5, (T, h)),
    }
    for b in range(config.num_blocks):
        for p in PROJECTIONS:
            d, m = config.projection_shape(p)
            w = rng.normal(0, 1 / math.sqrt(m), (d, m))
            if p in ("o", "down"):
                w *= out_scale
            t[f"blocks.{b}.{p}.weight"] = w
            t[f"blocks.{b}.{p}.bias"] = np.zeros(d)
    return Backbone(config, {k: Tensor(v, name=k) for k, v in t.items()})


class ClassifierModel:
    """Backbone + per-projection adapter wrappers + trainable head.

    ``mode`` selects what is trainable:

    * ``full_ft``   -- every backbone tensor and the head (backbone is copied)
    * ``head_only`` -- the head only
    * ``lora``      -- one adapter per wrapped projection in ``adapted_blocks``, plus the head
    * ``dual_lora`` -- a global and a local adapter per wrapped projection, plus the head

    Adapter seeds come from ``(seed, client_id, block * P + projection, kind)``;
    global adapters always use ``client_id=-1`` so every participant starts from
    the same global initialization.
    """

    def __init__(
        self,
        backbone: Backbone,
        mode: str = "dual_lora",
        adapted_blocks: tuple[int, ...] | None = None,
        rank: int = 4,
        alpha: float = 8.0,
        seed: int = 0,
        client_id: int = 0,
    ):
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
        cfg = backbone.config
        if adapted_blocks is None:
            adapted_blocks = tuple(range(cfg.num_blocks))
        self.config = replace(cfg, adapted_blocks=tuple(sorted(set(adapted_blocks))))
        self.mode = mode
        self.rank = rank
        self.alpha = alpha
        self.seed = seed
        self.client_id = client_id
        self.backbone = backbone.trainable_copy() if mode == "full_ft" else backbone
        if mode != "full_ft" and not backbone.frozen:
            raise ConfigError("adapter and head-only modes need a frozen backbone")

        self.layers: dict[tuple[int, str], lora.DualLoraLayer] = {}
        if mode in ("lora", "dual_lora"):
            for b in self.config.blocks_adapted():
                for j, p in enumerate(PROJECTIONS):
                    d, m = cfg.projection_shape(p)
                    layer_id = b * len(PROJECTIONS) + j
                    g = lora.init_adapter(rank, d, m, lora.adapter_seed(seed, -1, layer_id, "global"), alpha)
                    loc = None
                    if mode == "dual_lora":
                        loc = lora.init_adapter(
                            rank, d, m, lora.adapter_seed(seed, client_id, layer_id, "local"), alpha
                        )
                    self.layers[(b, p)] = lora.DualLoraLayer(
                        W=self.backbone.tensors[f"blocks.{b}.{p}.weight"],
                        global_adapter=g,
                        local_adapter=loc,
                        bias=self.backbone.tensors[f"blocks.{b}.{p}.bias"],
                    )

        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4EAD]))
        h = cfg.hidden_dim
        self.head_w = Tensor(rng.normal(0, HEAD_INIT_STD / math.sqrt(h), (cfg.num_classes, h)), requires_grad=True)
        self.head_b = Tensor(np.zeros(cfg.num_classes), requires_grad=True)

    # -- parameters ---------------------------------------------------------

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        """Deterministic order: backbone (full_ft only), adapters by block/projection/kind, head."""
        out: list[tuple[str, Tensor]] = []
        if self.mode == "full_ft":
            out += list(self.backbone.tensors.items())
        for (b, p), layer in self.layers.items():
            kinds = [("global", layer.global_adapter)]
            if layer.local_adapter is not None:
                kinds.append(("local", layer.local_adapter))
            for kind, adapter in kinds:
                out.append((f"blocks.{b}.{p}.{kind}.A", adapter.A))
                out.append((f"blocks.{b}.{p}.{kind}.B", adapter.B))
        out.append(("head.weight", self.head_w))
        out.append(("head.bias", self.head_b))
        return out

    def parameter_dict(self) -> dict[str, Tensor]:
        return dict(self.trainable_parameters())

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.trainable_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameter_dict()
        for k, v in state.items():
            if params[k].shape != v.shape:
                raise DimensionError(f"{k}: expected {params[k].shape}, got {v.shape}")
            params[k].data[...] = v

    def trainable_param_count(self) -> int:
        return sum(t.data.size for _, t in self.trainable_parameters())

    # -- forward ------------------------------------------------------------

    @property
    def frozen_prefix(self) -> int:
        """Number of leading blocks with no trainable tensor (their output can be cached)."""
        if self.mode == "full_ft":
            return 0
        if self.mode == "head_only" or not self.layers:
            return self.config.num_blocks
        return min(b for b, _ in self.layers)

    def _proj(self, b: int, p: str, x: Tensor) -> Tensor:
        layer = self.layers.get((b, p))
        if layer is not None:
            return lora.layer_forward(layer, x)
        t = self.backbone.tensors
        return ad.linear(x, t[f"blocks.{b}.{p}.weight"], t[f"blocks.{b}.{p}.bias"])

    def embed(self, x: Tensor) -> Tensor:
        cfg = self.config
        if x.ndim != 2 or x.shape[1] != cfg.input_dim:
            raise ConfigError(f"expected input (n, {cfg.input_dim}), got {x.shape}")
        t = self.backbone.tensors
        tok = ad.reshape(x, (x.shape[0], cfg.num_tokens, cfg.token_dim))
        return ad.add(ad.linear(tok, t["embed.weight"], t["embed.bias"]), t["pos"])

    def block(self, b: int, h: Tensor) -> Tensor:
        cfg = self.config
        H = cfg.num_heads
        a = ad.layernorm(h)
        q = ad.split_heads(self._proj(b, "q", a), H)
        k = ad.split_heads(self._proj(b, "k", a), H)
        v = ad.split_heads(self._proj(b, "v", a), H)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(cfg.hidden_dim // H))
        att = ad.merge_heads(ad.matmul(ad.softmax_rows(scores), v), H)
        h = ad.add(h, self._proj(b, "o", att))
        a = ad.layernorm(h)
        return ad.add(h, self._proj(b, "down", ad.gelu(self._proj(b, "up", a))))

    def run_blocks(self, h: Tensor, start: int = 0, stop: int | None = None) -> Tensor:
        stop = self.config.num_blocks if stop is None else stop
        for b in range(start, stop):
            h = self.block(b, h)
        return h

    def readout(self, h: Tensor) -> Tensor:
        pooled = ad.mean(ad.layernorm(h), axis=1)
        return ad.linear(pooled, self.head_w, self.head_b)

    def forward(self, x) -> Tensor:
        """Logits (n, 2) for a batch of flat feature vectors."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[0] < 1:
            raise ConfigError("empty batch")
        return self.readout(self.run_blocks(self.embed(x)))

    __call__ = forward

    def prefix_features(self, X: np.ndarray) -> np.ndarray:
        """Hidden states after the frozen prefix; feed them to :meth:`forward_from`.

        In full_ft mode nothing is frozen and the raw inputs are returned.
        """
        if self.mode == "full_ft":
            return np.asarray(X, dtype=np.float64)
        with ad.no_grad():
            return self.run_blocks(self.embed(Tensor(X)), 0, self.frozen_prefix).data

    def forward_from(self, H: np.ndarray) -> Tensor:
        if self.mode == "full_ft":
            return self.forward(Tensor(H))
        return self.readout(self.run_blocks(Tensor(H), self.frozen_prefix))

    def predict(self, X: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return np.argmax(self.forward(Tensor(X)).data, axis=1)


# --------------------------------------------------------------------------
# pretraining stand-in for the foundation model
# --------------------------------------------------------------------------

def pretrain_backbone(
    config: BackboneConfig,
    X: np.ndarray,
    y: np.ndarray,
    steps: int = 300,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 64,
) -> Backbone:
    """Full-parameter training on a pretext task for a fixed step budget, then freeze.

    The pretext head is discarded; only the frozen backbone is returned.
    """
    config = config.architecture()
    model = ClassifierModel(init_backbone(config, seed), mode="full_ft", seed=seed)
    opt = AdamW(model.trainable_parameters(), lr=lr, weight_decay=0.0)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E7]))
    order = np.empty(0, dtype=np.int64)
    for _ in range(steps):
        if order.size < batch_size:
            order = np.concatenate([order, rng.permutation(len(X))])
        idx, order = order[:batch_size], order[batch_size:]
        ad.reset_tape()
        opt.zero_grad()
        ad.backward(ad.cross_entropy(model.forward(Tensor(X[idx])), y[idx]))
        opt.step()
    ad.reset_tape()
    return model.backbone.frozen_copy()


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(model: ClassifierModel, path) -> None:
    """Magic, uint32 header length, JSON header, then wire records (float32)."""
    cfg = asdict(model.config)
    header = {
        "config": cfg,
        "mode": model.mode,
        "rank": model.rank,
        "alpha": model.alpha,
        "seed": model.seed,
        "client_id": model.client_id,
    }
    body = bytearray()
    if model.mode == "full_ft":
        for _, t in model.backbone.tensors.items():
            body += lora.encode_tensor(lora.KIND_TENSOR, t.data)
    for layer in model.layers.values():
        body += lora.encode_adapter(layer.global_adapter, "global")
        if layer.local_adapter is not None:
            body += lora.encode_adapter(layer.local_adapter, "local")
    body += lora.encode_tensor(lora.KIND_HEAD_WEIGHT, model.head_w.data)
    body += lora.encode_tensor(lora.KIND_HEAD_BIAS, model.head_b.data)
    raw = json.dumps(header, sort_keys=True).encode()
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(raw)) + raw + bytes(body))


def load_checkpoint(path, backbone: Backbone) -> ClassifierModel:
    """Rebuild a model on ``backbone`` and install the stored (float32-rounded) tensors."""
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path} is not a checkpoint")
    (n,) = struct.unpack_from("<I", buf, 4)
    header = json.loads(buf[8:8 + n])
    cfg = header["config"]
    model = ClassifierModel(
        backbone,
        mode=header["mode"],
        adapted_blocks=tuple(cfg["adapted_blocks"]),
        rank=header["rank"],
        alpha=header["alpha"],
        seed=header["seed"],
        client_id=header["client_id"],
    )
    records = lora.decode_records(buf[8 + n:])
    values: list[np.ndarray] = []
    for _, arrays in records:
        values.extend(arrays)
    params = model.trainable_parameters()
    if len(values) != len(params):
        raise ConfigError(f"checkpoint holds {len(values)} tensors, model expects {len(params)}")
    for (name, t), v in zip(params, values):
        if t.shape != v.shape:
            raise DimensionError(f"{name}: checkpoint shape {v.shape} != {t.shape}")
        t.data[...] = v
    return model
