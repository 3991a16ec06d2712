"""Low-rank adapters and the dual (global + local) adapted linear layer.

For a frozen projection ``W`` (d x m) a dual layer computes::

    f(x) = W x + (alpha / r) B_g A_g x + (alpha / r) B_l A_l x

The global pair is the one exchanged with the server; the local pair never
leaves its client. Adapters are never merged into ``W``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, ProtocolError

KIND_GLOBAL = 1
KIND_LOCAL = 2
KIND_HEAD_WEIGHT = 3
KIND_HEAD_BIAS = 4
KIND_TENSOR = 5
KIND_CODES = {"global": KIND_GLOBAL, "local": KIND_LOCAL}

HEADER = struct.Struct("<4I")
HEADER_BYTES = HEADER.size  # 16
WIRE_DTYPE = np.dtype("<f4")


@dataclass
class LoraAdapter:
    A: Tensor  # (r, m)
    B: Tensor  # (d, r)
    rank: int
    alpha: float

    def __post_init__(self):
        r = self.rank
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[0] != r or self.B.shape[1] != r:
            raise DimensionError(
                f"adapter of rank {r} needs A (r, m) and B (d, r), got {self.A.shape} and {self.B.shape}"
            )
        if r > min(self.d, self.m):
            raise ConfigError(f"rank {r} exceeds min(d={self.d}, m={self.m})")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")

    @property
    def d(self) -> int:
        return self.B.shape[0]

    @property
    def m(self) -> int:
        return self.A.shape[1]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def param_count(self) -> int:
        return self.rank * (self.d + self.m)

    def tensors(self) -> tuple[Tensor, Tensor]:
        return self.A, self.B


@dataclass
class DualLoraLayer:
    """Frozen projection with a global adapter and, in dual mode, a private local one.

    ``local_adapter=None`` gives the single-adapter (standard LoRA) layer.
    """

    W: Tensor
    global_adapter: LoraAdapter
    local_adapter: LoraAdapter | None = None
    bias: Tensor | None = None

    def __post_init__(self):
        g = self.global_adapter
        if (g.d, g.m) != self.W.shape:
            raise DimensionError(f"adapter dims {(g.d, g.m)} do not match W {self.W.shape}")
        loc = self.local_adapter
        if loc is not None:
            if loc.A.shape != g.A.shape or loc.B.shape != g.B.shape:
                raise DimensionError("global and local adapters must have identical shapes")
            if (loc.rank, loc.alpha) != (g.rank, g.alpha):
                raise ConfigError("global and local adapters must share rank and alpha")

    @property
    def dual(self) -> bool:
        return self.local_adapter is not None

    @property
    def trainable_param_count(self) -> int:
        d, m = self.W.shape
        return adapter_param_count(self.global_adapter.rank, d, m, dual=self.dual)


def adapter_term(adapter: LoraAdapter, x: Tensor) -> Tensor:
    """``(alpha / r) * B (A x)`` for x of shape (..., m)."""
    return ad.scale(ad.linear(ad.linear(x, adapter.A), adapter.B), adapter.scale)


def frozen_forward(W: Tensor, x: Tensor, bias: Tensor | None = None) -> Tensor:
    return ad.linear(x, W, bias)


def _as_batch(x: Tensor, m: int) -> tuple[Tensor, bool]:
    if x.ndim == 0 or x.shape[-1] != m:
        raise DimensionError(f"input last dimension {x.shape[-1:]} does not match m={m}")
    if x.ndim == 1:
        return ad.reshape(x, (1, m)), True
    return x, False


def single_forward(W: Tensor, adapter: LoraAdapter, x: Tensor, bias: Tensor | None = None) -> Tensor:
    """Standard LoRA: ``W x + (alpha / r) B A x``."""
    if (adapter.d, adapter.m) != W.shape:
        raise DimensionError(f"adapter dims {(adapter.d, adapter.m)} do not match W {W.shape}")
    xb, squeeze = _as_batch(x, W.shape[1])
    out = ad.add(frozen_forward(W, xb, bias), adapter_term(adapter, xb))
    return ad.reshape(out, (W.shape[0],)) if squeeze else out


def dual_forward(layer: DualLoraLayer, x: Tensor) -> Tensor:
    """Frozen projection plus global and local adapter terms, added in that order."""
    if layer.local_adapter is None:
        raise ConfigError("dual_forward needs a layer with a local adapter")
    xb, squeeze = _as_batch(x, layer.W.shape[1])
    out = ad.add(frozen_forward(layer.W, xb, layer.bias), adapter_term(layer.global_adapter, xb))
    out = ad.add(out, adapter_term(layer.local_adapter, xb))
    return ad.reshape(out, (layer.W.shape[0],)) if squeeze else out


def layer_forward(layer: DualLoraLayer, x: Tensor) -> Tensor:
    if layer.dual:
        return dual_forward(layer, x)
    return single_forward(layer.W, layer.global_adapter, x, layer.bias)


def adapter_param_count(r: int, d: int, m: int, dual: bool) -> int:
    n = r * (d + m)
    return 2 * n if dual else n


def adapter_seed(base_seed: int, client_id: int, layer_id: int, kind: str) -> np.random.SeedSequence:
    """Independent stream per (seed, client, layer, adapter kind); client_id -1 is the server."""
    return np.random.SeedSequence([base_seed, client_id + 1, layer_id, KIND_CODES[kind]])


def init_adapter(r: int, d: int, m: int, seed, alpha: float = 8.0) -> LoraAdapter:
    """A ~ N(0, 1/r) elementwise, B = 0, so the adapter starts as an exact no-op."""
    if r < 1 or r > min(d, m):
        raise ConfigError(f"rank {r} must satisfy 1 <= r <= min(d={d}, m={m})")
    rng = np.random.default_rng(seed)
    A = rng.normal(0.0, 1.0 / np.sqrt(r), size=(r, m))
    return LoraAdapter(
        A=Tensor(A, requires_grad=True),
        B=Tensor(np.zeros((d, r)), requires_grad=True),
        rank=r,
        alpha=alpha,
    )


# --------------------------------------------------------------------------
# wire format
# --------------------------------------------------------------------------

def encode_header(a: int, b: int, c: int, kind: int) -> bytes:
    """Four little-endian uint32 words; the record kind is always the last."""
    return HEADER.pack(a, b, c, kind)


def encode_adapter(adapter: LoraAdapter, kind: str = "global") -> bytes:
    """Header (r, d, m, kind) as little-endian uint32, then A and B row-major as float32."""
    head = encode_header(adapter.rank, adapter.d, adapter.m, KIND_CODES[kind])
    return (
        head
        + adapter.A.data.astype(WIRE_DTYPE).tobytes()
        + adapter.B.data.astype(WIRE_DTYPE).tobytes()
    )


def decode_adapter(buf: bytes, offset: int = 0) -> tuple[int, np.ndarray, np.ndarray, int]:
    """Return ``(kind, A, B, next_offset)`` for the adapter record at ``offset``."""
    if len(buf) - offset < HEADER_BYTES:
        raise ProtocolError("truncated adapter header")
    r, d, m, kind = HEADER.unpack_from(buf, offset)
    if kind not in (KIND_GLOBAL, KIND_LOCAL):
        raise ProtocolError(f"record kind {kind} is not an adapter")
    offset += HEADER_BYTES
    na, nb = r * m, d * r
    end = offset + 4 * (na + nb)
    if end > len(buf):
        raise ProtocolError("truncated adapter body")
    flat = np.frombuffer(buf, dtype=WIRE_DTYPE, count=na + nb, offset=offset).astype(np.float64)
    return kind, flat[:na].reshape(r, m), flat[na:].reshape(d, r), end


def encode_tensor(kind: int, arr: np.ndarray) -> bytes:
    """Non-adapter record: header (ndim, dim0, dim1, kind), then float32 values row-major."""
    if arr.ndim not in (1, 2):
        raise DimensionError(f"wire records hold rank 1-2 tensors, got shape {arr.shape}")
    d0 = arr.shape[0]
    d1 = arr.shape[1] if arr.ndim == 2 else 0
    return encode_header(arr.ndim, d0, d1, kind) + arr.astype(WIRE_DTYPE).tobytes()


def decode_records(buf: bytes) -> list[tuple[int, tuple[np.ndarray, ...]]]:
    """Split a byte stream into ``(kind, arrays)`` records.

    Adapter records yield ``(A, B)``; every other record yields a single array.
    """
    records = []
    offset = 0
    while offset < len(buf):
        if len(buf) - offset < HEADER_BYTES:
            raise ProtocolError(f"trailing {len(buf) - offset} bytes do not form a header")
        kind = HEADER.unpack_from(buf, offset)[3]
        if kind in (KIND_GLOBAL, KIND_LOCAL):
            kind, A, B, offset = decode_adapter(buf, offset)
            records.append((kind, (A, B)))
            continue
        if kind not in (KIND_HEAD_WEIGHT, KIND_HEAD_BIAS, KIND_TENSOR):
            raise ProtocolError(f"unknown record kind {kind} at byte {offset}")
        ndim, d0, d1, _ = HEADER.unpack_from(buf, offset)
        shape = (d0,) if ndim == 1 else (d0, d1)
        count = int(np.prod(shape))
        offset += HEADER_BYTES
        if offset + 4 * count > len(buf):
            raise ProtocolError("truncated tensor record")
        arr = np.frombuffer(buf, dtype=WIRE_DTYPE, count=count, offset=offset)
        records.append((kind, (arr.astype(np.float64).reshape(shape),)))
        offset += 4 * count
    return records
