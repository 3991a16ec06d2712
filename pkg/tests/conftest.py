import numpy as np
import pytest

from dualfed.data import ClientSpec, TaskGeometry, build_federation
from dualfed.model import BackboneConfig, init_backbone

TINY = BackboneConfig(num_blocks=2, hidden_dim=8, num_heads=2, mlp_ratio=4, input_dim=16, num_tokens=4)


def numeric_grad(f, arrays, eps=1e-5):
    """Central differences of the scalar ``f()`` with respect to each array, perturbed in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def rel_err(a, b, floor=1e-7):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def tiny_federation(num_clients=3, seed=0, counts=None, shift=0.5):
    counts = counts or {"train": (8, 4), "val": (3, 2), "test": (3, 2)}
    geometry = TaskGeometry(input_dim=TINY.input_dim, num_tokens=TINY.num_tokens, seed=seed)
    specs = [ClientSpec(f"c{i}", dict(counts), shift=shift, seed=100 * seed + i) for i in range(num_clients)]
    return build_federation(specs, geometry)


@pytest.fixture
def tiny_backbone():
    return init_backbone(TINY, 0).frozen_copy()


@pytest.fixture
def tiny_fed():
    return tiny_federation()


# -- default desk-scale federation, shared across the slow experiment tests ------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def default_setup():
    from dualfed.config import ExperimentConfig
    from dualfed.experiment import build_backbone, build_dataset

    cfg = ExperimentConfig()
    fed = build_dataset(cfg)
    return cfg, fed, build_backbone(cfg, fed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
