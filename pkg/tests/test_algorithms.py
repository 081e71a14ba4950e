import json
import math

import numpy as np
import pytest
import torch

from tsuda.algorithms import (ALGORITHM_SPECS, UDAModel, build_model, compute_losses,
                              default_hparams, predict, train)
from tsuda.datamodel import ALGORITHMS, HyperParams
from tsuda.nets import load_checkpoint

FAST = {"width_mult": 0.5, "depth": 1, "batch_size": 32, "sinkhorn_iters": 20}


def fast_hp(alg, **kw):
    return default_hparams(alg, **{**FAST, **kw})


def test_every_algorithm_has_a_spec():
    assert set(ALGORITHM_SPECS) == set(ALGORITHMS)
    assert ALGORITHM_SPECS["SourceOnly"].backbone == "Inception"
    assert ALGORITHM_SPECS["CoDATS"] == ALGORITHM_SPECS["CoDATS"].__class__("CNN1D", "dann")


@pytest.mark.parametrize("alg", ALGORITHMS)
def test_one_epoch_trains_and_reports_components(alg, tiny_scenario):
    trained = train(alg, tiny_scenario, fast_hp(alg), seed=0, epoch_budget=1)
    assert not trained.failed, trained.error
    assert len(trained.trace) == 1 and math.isfinite(trained.trace[0])
    losses = trained.checkpoints[0].losses
    assert "total" in losses and "L_C" in losses
    probs = predict(trained.model, tiny_scenario.target.test)
    assert probs.shape == (tiny_scenario.target.test.n, 3)
    assert np.allclose(probs.sum(1), 1.0)


def test_training_is_deterministic(tiny_scenario):
    a = train("CoDATS", tiny_scenario, fast_hp("CoDATS"), 3, 2)
    b = train("CoDATS", tiny_scenario, fast_hp("CoDATS"), 3, 2)
    assert a.trace == b.trace
    c = train("CoDATS", tiny_scenario, fast_hp("CoDATS"), 4, 2)
    assert c.trace != a.trace


def test_source_only_never_reads_target(tiny_scenario, monkeypatch):
    calls = []
    original = type(tiny_scenario.target).view

    def spy(self, split, **kw):
        if self.role == "target":
            calls.append(split)
        return original(self, split, **kw)

    monkeypatch.setattr(type(tiny_scenario.target), "view", spy)
    train("SourceOnly", tiny_scenario, fast_hp("SourceOnly"), 0, 1)
    assert calls == []


def test_divergent_learning_rate_is_reported_as_failure(tiny_scenario):
    trained = train("CoDATS", tiny_scenario, fast_hp("CoDATS", lr=1e30), 0, 3)
    assert trained.failed and "non-finite" in trained.error


def test_wall_budget_stops_early(tiny_scenario):
    trained = train("CoDATS", tiny_scenario, fast_hp("CoDATS"), 0, 50, wall_budget=1e-9)
    assert len(trained.trace) == 1


def test_criterion_is_called_each_epoch(tiny_scenario):
    seen = []
    trained = train("CoDATS", tiny_scenario, fast_hp("CoDATS"), 0, 3,
                    criterion=lambda m: seen.append(m.training) or len(seen) * 1.0)
    assert trained.trace == [1.0, 2.0, 3.0] and seen == [False] * 3


def test_load_epoch_restores_weights(tiny_scenario):
    trained = train("CoDATS", tiny_scenario, fast_hp("CoDATS"), 0, 3)
    x = tiny_scenario.source.test
    p0 = predict(trained.load_epoch(0), x)
    p2 = predict(trained.load_epoch(2), x)
    assert not np.allclose(p0, p2)
    assert np.array_equal(predict(trained.load_epoch(0), x), p0)


def test_save_writes_checkpoints_and_manifest(tiny_scenario, tmp_path):
    trained = train("CoDATS", tiny_scenario, fast_hp("CoDATS"), 0, 2)
    trained.save(tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["criterion_trace"] == trained.trace
    state, spec = load_checkpoint(tmp_path / "epoch_001")
    assert spec["algorithm_id"] == "CoDATS"
    model = build_model("CoDATS", tiny_scenario, trained.hparams, 0)
    model.load_state_dict(state)
    assert np.allclose(predict(model, tiny_scenario.source.test),
                       predict(trained.load_epoch(1), tiny_scenario.source.test), atol=1e-6)


def test_hparams_for_wrong_algorithm_rejected(tiny_scenario):
    with pytest.raises(ValueError):
        train("CoDATS", tiny_scenario, fast_hp("VRADA"), 0, 1)


def test_predict_checks_channels(tiny_scenario):
    model = build_model("CoDATS", tiny_scenario, fast_hp("CoDATS"), 0)
    with pytest.raises(ValueError):
        predict(model, np.zeros((2, 5, 32), dtype=np.float32))


def test_width_multiplier_scales_capacity():
    small = UDAModel("CoDATS", 2, 32, 3, default_hparams("CoDATS", width_mult=0.5))
    big = UDAModel("CoDATS", 2, 32, 3, default_hparams("CoDATS", width_mult=1.0))
    assert small.encoder.latent_dim * 2 == big.encoder.latent_dim


def test_adversarial_total_is_classification_minus_scaled_adversarial():
    torch.manual_seed(0)
    model = UDAModel("CoDATS", 2, 16, 3, HyperParams("CoDATS", {"lambda": 0.7, "width": 2,
                                                                 "depth": 1})).double()
    xs, xt = torch.randn(4, 2, 16, dtype=torch.float64), torch.randn(3, 2, 16, dtype=torch.float64)
    _, report = compute_losses(model, xs, torch.tensor([0, 1, 2, 0]), xt)
    assert report["total"].item() == pytest.approx(
        report["L_C"].item() - 0.7 * report["L_A"].item(), abs=1e-12)


def test_cotmix_total_composition():
    torch.manual_seed(0)
    model = UDAModel("CoTMix", 2, 16, 3, default_hparams("CoTMix", width=2, depth=1)).double()
    xs, xt = torch.randn(4, 2, 16, dtype=torch.float64), torch.randn(4, 2, 16, dtype=torch.float64)
    _, r = compute_losses(model, xs, torch.tensor([0, 1, 2, 0]), xt, torch.Generator().manual_seed(0))
    lam = model.hparams["lambda"]
    expected = r["L_C"] + r["H_t"] + lam * (r["L_CAC"] + r["L_UC"])
    assert r["total"].item() == pytest.approx(expected.item(), abs=1e-12)
