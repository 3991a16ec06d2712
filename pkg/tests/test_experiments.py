"""Qualitative checks on the default desk-scale federation (pretrained 12-block backbone)."""

import numpy as np
import pytest

from dualfed import autodiff as ad
from dualfed.autodiff import Tensor
from dualfed.evaluation import compute_metrics
from dualfed.federation import evaluate_models, run_centralized, run_client_local
from dualfed.model import ClassifierModel

pytestmark = pytest.mark.slow


def pooled_readout_features(backbone, X):
    model = ClassifierModel(backbone, "head_only")
    with ad.no_grad():
        H = model.run_blocks(model.embed(Tensor(X)))
        return ad.mean(ad.layernorm(H), axis=1).data


def test_linear_probe_beats_chance(default_setup):
    _, fed, backbone = default_setup
    Xt, yt = fed.pooled("train")
    Xv, yv = fed.pooled("val")
    Ft = np.c_[pooled_readout_features(backbone, Xt), np.ones(len(yt))]
    Fv = np.c_[pooled_readout_features(backbone, Xv), np.ones(len(yv))]
    # class-balanced ridge regression onto +-1 targets
    w = np.where(yt == 1, 0.5 / yt.sum(), 0.5 / (1 - yt).sum())
    target = np.where(yt == 1, 1.0, -1.0)
    coef = np.linalg.solve(Ft.T @ (Ft * w[:, None]) + 1e-3 * np.eye(Ft.shape[1]), Ft.T @ (w * target))
    ba = compute_metrics((Fv @ coef > 0).astype(int), yv).balanced_accuracy
    assert ba > 0.5


def test_single_vendor_model_degrades_on_another_vendor(default_setup):
    cfg, fed, backbone = default_setup
    own, other = [], []
    for seed in range(3):
        model = run_centralized("lora", fed.subset(["Siemens"]), backbone, cfg.train_config(), seed).model
        rep = evaluate_models(model, fed, seed=seed)
        own.append(rep.per_client["Siemens"].balanced_accuracy)
        other.append(rep.per_client["Canon"].balanced_accuracy)
    assert np.mean(other) < np.mean(own)


def test_smallest_most_shifted_client_has_lowest_local_specificity(default_setup):
    cfg, fed, backbone = default_setup
    canon, siemens = [], []
    for seed in range(3):
        res = run_client_local(fed, backbone, cfg.train_config(), seed)
        rep = evaluate_models({n: r.model for n, r in res.items()}, fed, seed=seed)
        canon.append(rep.per_client["Canon"].specificity)
        siemens.append(rep.per_client["Siemens"].specificity)
    assert np.mean(canon) < np.mean(siemens)
