"""Invariant self-tests behind ``dualfed check``.

Each check returns a :class:`CheckResult`; none of them touches the filesystem.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .budget import comm_bytes, comm_spec_for, header_bytes
from .data import ClientSpec, TaskGeometry, build_federation
from .federation import Payload, TrainConfig, aggregate, run_federated
from .model import BackboneConfig, ClassifierModel, init_backbone

SMALL = BackboneConfig(num_blocks=2, hidden_dim=8, num_heads=2, mlp_ratio=4, input_dim=16, num_tokens=4)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _probe(t: Tensor, rng: np.random.Generator) -> Tensor:
    """Scalar ``<t, v>`` for a fixed random ``v``; gives every element a distinct weight."""
    flat = ad.reshape(t, (t.data.size,))
    return ad.matmul(flat, Tensor(rng.normal(size=t.data.size)))


def op_cases(seed: int = 0) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    """(name, scalar loss closure, parameters) for every differentiable op."""
    rng = np.random.default_rng(seed)

    def p(*shape, lo=None):
        x = rng.normal(size=shape)
        if lo is not None:  # keep kinked ops away from their kink
            x = np.sign(x) * (np.abs(x) + lo)
        return Tensor(x, requires_grad=True)

    probe_seed = int(np.random.default_rng(seed + 1).integers(1 << 30))
    cases = []

    def case(name, op, *params, reduce=True):
        def fn():
            out = op(*params)
            return _probe(out, np.random.default_rng(probe_seed)) if reduce else out

        cases.append((name, fn, list(params)))

    case("add", ad.add, p(3, 4), p(4))
    case("scale", lambda a: ad.scale(a, -1.7), p(2, 3))
    case("matmul 2x2", ad.matmul, p(3, 4), p(4, 5))
    case("matmul 1x2", ad.matmul, p(4), p(4, 3))
    case("matmul 2x1", ad.matmul, p(3, 4), p(4))
    case("matmul batched", ad.matmul, p(2, 3, 4), p(2, 4, 3))
    case("matmul 3x2", ad.matmul, p(2, 3, 4), p(4, 2))
    case("linear", ad.linear, p(2, 3, 4), p(5, 4), p(5))
    case("transpose", lambda a: ad.transpose(a, (1, 0, 2)), p(2, 3, 4))
    case("reshape", lambda a: ad.reshape(a, (3, 4)), p(2, 6))
    case("split_heads", lambda a: ad.split_heads(a, 2), p(2, 3, 8))
    case("merge_heads", lambda a: ad.merge_heads(a, 2), p(4, 3, 4))
    case("gelu", ad.gelu, p(3, 5))
    case("relu", ad.relu, p(3, 5, lo=0.1))
    case("layernorm", ad.layernorm, p(2, 3, 6))
    case("softmax_rows", ad.softmax_rows, p(2, 3, 4))
    case("mean", lambda a: ad.mean(a, axis=1), p(2, 3, 4))
    case("sum", lambda a: ad.scale(ad.sum(a), 0.3), p(3, 4), reduce=False)
    labels = rng.integers(0, 2, size=6)
    case("cross_entropy", lambda z: ad.cross_entropy(z, labels), p(6, 2), reduce=False)
    return cases


def model_cases(seed: int = 0) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    """Full transformer losses at h=8, L=2: dual adapters with nonzero B, and full fine-tuning."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(5, SMALL.input_dim))
    y = rng.integers(0, 2, size=5)
    backbone = init_backbone(SMALL, seed)

    dual = ClassifierModel(backbone, mode="dual_lora", seed=seed)
    for name, t in dual.trainable_parameters():
        if name.endswith(".B"):
            t.data[...] = rng.normal(scale=0.3, size=t.shape)
    full = ClassifierModel(backbone.trainable_copy(), mode="full_ft", seed=seed)
    return [
        ("dual_lora model", lambda: ad.cross_entropy(dual.forward(Tensor(X)), y),
         [t for _, t in dual.trainable_parameters()]),
        ("full_ft model", lambda: ad.cross_entropy(full.forward(Tensor(X)), y),
         [t for _, t in full.trainable_parameters()]),
    ]


def check_gradients(tolerance: float = 1e-4, seed: int = 0) -> list[CheckResult]:
    out = []
    for name, fn, params in op_cases(seed) + model_cases(seed):
        errs = ad.gradient_check(fn, params, eps=1e-5)
        worst = max(errs)
        out.append(CheckResult(f"grad {name}", worst <= tolerance, f"max rel err {worst:.2e}"))
    return out


def check_aggregation(trials: int = 20, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    identity = True
    for _ in range(trials):
        k = int(rng.integers(1, 6))
        shapes = [(int(rng.integers(1, 5)), int(rng.integers(1, 5))) for _ in range(3)]
        arrays = [[rng.normal(size=s) for s in shapes] for _ in range(k)]
        sizes = rng.uniform(0.1, 10.0, size=k)
        payloads = [Payload(i, ["t0", "t1", "t2"], arrays[i], b"") for i in range(k)]
        got = aggregate(payloads, sizes)
        for j in range(len(shapes)):
            want = sum(sizes[i] * arrays[i][j] for i in range(k)) / sizes.sum()
            worst = max(worst, float(np.abs(got[j] - want).max()))
        if k == 1:
            identity &= all(np.array_equal(g, a) for g, a in zip(got, arrays[0]))
    ok = worst <= 1e-12 and identity
    return CheckResult("aggregation oracle", ok, f"max abs err {worst:.1e}, single-client identity {identity}")


def check_bytes(seed: int = 0) -> CheckResult:
    geometry = TaskGeometry(input_dim=SMALL.input_dim, num_tokens=SMALL.num_tokens, seed=seed)
    specs = [
        ClientSpec(f"c{i}", {"train": (6, 3), "val": (2, 2), "test": (2, 1)}, shift=0.5, seed=i)
        for i in range(3)
    ]
    fed = build_federation(specs, geometry)
    backbone = init_backbone(SMALL, seed).frozen_copy()
    problems = []
    for mode in ("head_only", "lora", "dual_lora"):
        for blocks in ((1,), (0, 1)):
            hyper = TrainConfig(max_epochs=2, adapted_blocks=blocks)
            res = run_federated(mode, fed, backbone, hyper, seed, keep_payloads=True)
            spec = comm_spec_for(mode, SMALL, hyper)
            for round_payloads in res.uplinks:
                for pl in round_payloads:
                    if pl.data_bytes != comm_bytes(spec) or pl.header_bytes != header_bytes(spec):
                        problems.append(f"{mode}{blocks}: {pl.data_bytes}+{pl.header_bytes} bytes")
                    if any(".local." in n for n in pl.names):
                        problems.append(f"{mode}{blocks}: local tensor in payload")
    return CheckResult("byte accounting", not problems, "; ".join(problems[:3]) or "predicted == measured")


def run_checks(tolerance: float = 1e-4, trials: int = 20, seed: int = 0) -> list[CheckResult]:
    return check_gradients(tolerance, seed) + [check_aggregation(trials, seed), check_bytes(seed)]
