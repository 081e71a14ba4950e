"""Training procedures for the nine adaptation algorithms.

Every ``*_total`` function returns ``(objective, report)``.  ``report`` maps
component names to scalar tensors and always carries ``total``, the value of
the min-max objective.  ``objective`` is what gets back-propagated: for the
adversarial methods it routes the discriminator term through a gradient
reversal layer, so its gradient equals that of ``total`` for the encoder and
classifier and that of ``L_A`` for the discriminator.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn

from . import losses as L
from .datamodel import ALGORITHMS, HyperParams, Scenario, TimeSeriesBatch
from .nets import (Classifier, Discriminator, EncoderSpec, MultilinearMap, VRNNEncoder,
                   as_tensor, build_encoder, classify, grad_reverse, save_checkpoint,
                   state_to_numpy)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AlgorithmSpec:
    backbone: str
    method: str
    time_branch: Optional[str] = None


ALGORITHM_SPECS = {
    "SourceOnly": AlgorithmSpec("Inception", "source_only"),
    "CoDATS": AlgorithmSpec("CNN1D", "dann"),
    "InceptionDANN": AlgorithmSpec("Inception", "dann"),
    "InceptionCDAN": AlgorithmSpec("Inception", "cdan"),
    "VRADA": AlgorithmSpec("VRNN", "vrada"),
    "CoTMix": AlgorithmSpec("CNN1D", "cotmix"),
    "InceptionMix": AlgorithmSpec("Inception", "cotmix"),
    "Raincoat": AlgorithmSpec("TimeFreqConcat", "raincoat", "CNN1D"),
    "InceptionRain": AlgorithmSpec("TimeFreqConcat", "raincoat", "Inception"),
}
assert set(ALGORITHM_SPECS) == set(ALGORITHMS)

COMMON_DEFAULTS = {"lr": 1e-3, "batch_size": 64, "width_mult": 1.0, "depth": 3}
# channels per block (CNN1D, VRNN hidden) or per branch (Inception) at width_mult=1
BASE_WIDTH = {"CNN1D": 16, "Inception": 8, "VRNN": 16, "TimeFreqConcat": 16}
METHOD_DEFAULTS = {
    "source_only": {},
    "dann": {"lambda": 0.3},
    "cdan": {"lambda": 0.3, "cdan_mode": "outer", "randomized_dim": 64,
             "entropy_conditioning": False},
    "vrada": {"lambda": 0.3, "z_dim": 8},
    "cotmix": {"lambda": 0.1, "tau": 0.2, "alpha": 0.9, "half_window": 2,
               "window_norm": "offsets"},
    "raincoat": {"sinkhorn_eps": 0.05, "sinkhorn_iters": 200, "sinkhorn_tol": 1e-6,
                 "sinkhorn_scaling": 0.7, "freq_width": 16},
}


def default_hparams(algorithm_id: str, **overrides) -> HyperParams:
    method = ALGORITHM_SPECS[algorithm_id].method
    params = {**COMMON_DEFAULTS, **METHOD_DEFAULTS[method], **overrides}
    return HyperParams(algorithm_id, params)


class TrainingFailed(RuntimeError):
    pass


class UDAModel(nn.Module):
    """Encoder + classifier, plus whatever extra heads the algorithm needs."""

    def __init__(self, algorithm_id: str, in_channels: int, length: int, num_classes: int,
                 hparams: HyperParams):
        super().__init__()
        spec = ALGORITHM_SPECS[algorithm_id]
        hp = {**COMMON_DEFAULTS, **METHOD_DEFAULTS[spec.method], **hparams.params}
        self.algorithm_id = algorithm_id
        self.method = spec.method
        self.hparams = hp
        self.in_channels, self.length, self.num_classes = in_channels, length, num_classes
        time_kind = spec.time_branch or "CNN1D"
        base = BASE_WIDTH[time_kind if spec.backbone == "TimeFreqConcat" else spec.backbone]
        width = int(hp.get("width") or max(1, round(base * float(hp["width_mult"]))))
        self.encoder_spec = EncoderSpec(
            kind=spec.backbone,
            width=width,
            depth=int(hp["depth"]),
            bottleneck=int(hp.get("bottleneck", width)),
            z_dim=int(hp.get("z_dim", 8)),
            freq_width=int(hp.get("freq_width", 16)),
            time_kind=time_kind,
        )
        self.encoder = build_encoder(self.encoder_spec, in_channels, length)
        latent = self.encoder.latent_dim
        self.classifier = Classifier(latent, num_classes)
        self.discriminator = None
        self.mlmap = None
        if spec.method in ("dann", "vrada"):
            self.discriminator = Discriminator(latent, int(hp.get("disc_hidden", 64)))
        elif spec.method == "cdan":
            gen = torch.Generator().manual_seed(int(hp.get("projection_seed", 0)))
            self.mlmap = MultilinearMap(latent, num_classes, hp["cdan_mode"],
                                        int(hp["randomized_dim"]), generator=gen)
            self.discriminator = Discriminator(self.mlmap.out_dim, int(hp.get("disc_hidden", 64)))

    def encode(self, x):
        return self.encoder(x)

    def forward(self, x):
        return classify(self.classifier, self.encoder(x))

    def describe(self) -> dict:
        return {"algorithm_id": self.algorithm_id, "hparams": self.hparams,
                "in_channels": self.in_channels, "length": self.length,
                "num_classes": self.num_classes, "encoder": self.encoder_spec.to_dict()}


# -- loss compositions ----------------------------------------------------


def _encode_joint(model: UDAModel, xs, xt):
    z = model.encode(torch.cat([xs, xt]))
    return z[: xs.shape[0]], z[xs.shape[0]:], z


def source_only_total(model, xs, ys, xt=None):
    probs = classify(model.classifier, model.encode(xs))
    lc = L.loss_classification(probs, ys)
    return lc, {"L_C": lc, "total": lc}


def dann_total(model, xs, ys, xt, lam):
    """``total = L_C - lam * L_A`` with reversal on the discriminator input."""
    zs, zt, z = _encode_joint(model, xs, xt)
    lc = L.loss_classification(classify(model.classifier, zs), ys)
    d = model.discriminator(grad_reverse(z, lam))
    la = L.loss_adversarial(d[: xs.shape[0]], d[xs.shape[0]:])
    return lc + la, {"L_C": lc, "L_A": la, "total": lc - lam * la}


def cdan_total(model, xs, ys, xt, lam, entropy_conditioning=False):
    ns = xs.shape[0]
    zs, zt, z = _encode_joint(model, xs, xt)
    probs = classify(model.classifier, z)
    lc = L.loss_classification(probs[:ns], ys)
    z_r, p_r = grad_reverse(z, lam), grad_reverse(probs, lam)
    d = model.discriminator(model.mlmap(z_r, p_r))
    ws = wt = None
    if entropy_conditioning:
        ws, wt = L.entropy_weights(p_r[:ns]), L.entropy_weights(p_r[ns:])
    la = L.loss_adversarial(d[:ns], d[ns:], ws, wt)
    return lc + la, {"L_C": lc, "L_A": la, "total": lc - lam * la}


def vrada_total(model, xs, ys, xt, lam):
    zs, zt, z = _encode_joint(model, xs, xt)
    lv = model.encoder.last_elbo
    lc = L.loss_classification(classify(model.classifier, zs), ys)
    d = model.discriminator(grad_reverse(z, lam))
    la = L.loss_adversarial(d[: xs.shape[0]], d[xs.shape[0]:])
    return lv + lc + la, {"L_VRNN": lv, "L_C": lc, "L_A": la, "total": lv + lc - lam * la}


def cotmix_total(model, xs, ys, xt, lam, alpha, half_window, tau, generator=None,
                 window_norm="offsets", partners_s=None, partners_t=None):
    ns, nt = xs.shape[0], xt.shape[0]
    mixed = L.cotmix_augment(xs, ys, xt, alpha, half_window, generator,
                             partners_s, partners_t, window_norm)
    z = model.encode(torch.cat([mixed.source, mixed.target]))
    probs = classify(model.classifier, z)
    ps, pt = probs[: 2 * ns], probs[2 * ns:]
    lc = L.loss_classification(ps[:ns], ys)
    ht = L.target_entropy(pt[:nt])
    lcac = L.loss_cac(ps, mixed.source_labels, tau)
    luc = L.loss_uc(pt, tau)
    total = lc + ht + lam * (lcac + luc)
    return total, {"L_C": lc, "H_t": ht, "L_CAC": lcac, "L_UC": luc, "total": total}


def standardize_joint(zs, zt):
    z = torch.cat([zs, zt])
    mean = z.mean(0, keepdim=True)
    std = z.std(0, unbiased=False, keepdim=True).clamp_min(1e-6)
    return (zs - mean) / std, (zt - mean) / std


def raincoat_total(model, xs, ys, xt, eps=0.05, max_iters=200, tol=1e-6, scaling=0.7):
    zs, zt, _ = _encode_joint(model, xs, xt)
    lc = L.loss_classification(classify(model.classifier, zs), ys)
    ns_, nt_ = standardize_joint(zs, zt)
    lsk = L.sinkhorn_divergence(ns_, nt_, eps, max_iters, tol, scaling).value
    lr = L.loss_raincoat_contrastive(zs, ys)
    total = lc + lsk + lr
    return total, {"L_C": lc, "L_Sinkhorn": lsk, "L_R": lr, "total": total}


def compute_losses(model: UDAModel, xs, ys, xt, generator=None):
    """Dispatch to the algorithm's loss composition using the model's hyperparameters."""
    hp = model.hparams
    m = model.method
    if m == "source_only":
        return source_only_total(model, xs, ys)
    if m == "dann":
        return dann_total(model, xs, ys, xt, hp["lambda"])
    if m == "cdan":
        return cdan_total(model, xs, ys, xt, hp["lambda"], bool(hp["entropy_conditioning"]))
    if m == "vrada":
        return vrada_total(model, xs, ys, xt, hp["lambda"])
    if m == "cotmix":
        return cotmix_total(model, xs, ys, xt, hp["lambda"], hp["alpha"], int(hp["half_window"]),
                            hp["tau"], generator, hp.get("window_norm", "offsets"))
    if m == "raincoat":
        return raincoat_total(model, xs, ys, xt, hp["sinkhorn_eps"], int(hp["sinkhorn_iters"]),
                              hp["sinkhorn_tol"], hp.get("sinkhorn_scaling"))
    raise ValueError(m)


# -- training -------------------------------------------------------------


@dataclass
class Checkpoint:
    epoch: int
    criterion: float
    state: dict
    losses: dict


@dataclass
class TrainedModel:
    model: UDAModel
    hparams: HyperParams
    seed: int
    checkpoints: list = field(default_factory=list)
    status: str = "ok"
    error: str = ""
    wall_time: float = 0.0

    @property
    def trace(self) -> list:
        return [c.criterion for c in self.checkpoints]

    @property
    def failed(self) -> bool:
        return self.status == "failed"

    def load_epoch(self, epoch: int) -> UDAModel:
        self.model.load_state_dict(self.checkpoints[epoch].state)
        self.model.eval()
        return self.model

    def save(self, directory) -> None:
        directory = Path(directory)
        spec = self.model.describe()
        for ck in self.checkpoints:
            save_checkpoint(directory / f"epoch_{ck.epoch:03d}", ck.state, spec)
        manifest = {"hparams": self.hparams.to_dict(), "seed": self.seed,
                    "criterion_trace": self.trace, "status": self.status,
                    "losses": [ck.losses for ck in self.checkpoints]}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def build_model(algorithm_id: str, scenario: Scenario, hparams: HyperParams, seed: int,
                dtype=torch.float32) -> UDAModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = UDAModel(algorithm_id, scenario.source.channels, scenario.source.length,
                         scenario.num_classes, hparams)
    return model.to(dtype)


def _batch_indices(n: int, batch_size: int, gen: torch.Generator) -> list:
    perm = torch.randperm(n, generator=gen)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out.pop()
    return out


def train(algorithm_id: str, scenario: Scenario, hparams: HyperParams, seed: int,
          epoch_budget: int, wall_budget: Optional[float] = None,
          criterion: Optional[Callable[[UDAModel], float]] = None,
          dtype=torch.float32) -> TrainedModel:
    """Mini-batch training with one checkpoint per epoch.

    ``criterion`` scores the model after each epoch (lower is better); by
    default the source validation cross-entropy.  A non-finite loss aborts
    the run and returns a ``failed`` model instead of raising.
    """
    if hparams.algorithm_id != algorithm_id:
        raise ValueError("hparams belong to a different algorithm")
    start = time.perf_counter()
    model = build_model(algorithm_id, scenario, hparams, seed, dtype)
    hp = model.hparams
    gen = torch.Generator().manual_seed(seed + 7919)
    if isinstance(model.encoder, VRNNEncoder):
        model.encoder.generator = gen

    src = scenario.source.view("train")
    xs_all = torch.as_tensor(src.values, dtype=dtype)
    ys_all = torch.as_tensor(src.labels, dtype=torch.long)
    uses_target = model.method != "source_only"
    xt_all = None
    if uses_target:
        xt_all = torch.as_tensor(scenario.target.view("train").values, dtype=dtype)

    if criterion is None:
        from .selection import source_risk
        val = scenario.source.view("val")
        criterion = lambda m: source_risk(m, val)  # noqa: E731

    opt = torch.optim.Adam(model.parameters(), lr=float(hp["lr"]), betas=(0.9, 0.999),
                           weight_decay=float(hp.get("weight_decay", 0.0)))
    bs = int(hp["batch_size"])
    result = TrainedModel(model, hparams, seed)
    for epoch in range(epoch_budget):
        model.train()
        sums: dict = {}
        steps = 0
        src_batches = _batch_indices(len(xs_all), bs, gen)
        tgt_perm = torch.randperm(len(xt_all), generator=gen) if uses_target else None
        for step, idx in enumerate(src_batches):
            xs, ys = xs_all[idx], ys_all[idx]
            xt = None
            if uses_target:
                pos = (torch.arange(len(idx)) + step * bs) % len(xt_all)
                xt = xt_all[tgt_perm[pos]]
            objective, report = compute_losses(model, xs, ys, xt, gen)
            if not torch.isfinite(objective) or not torch.isfinite(report["total"]):
                result.status, result.error = "failed", f"non-finite loss at epoch {epoch}"
                result.wall_time = time.perf_counter() - start
                log.warning("%s seed=%d: %s", algorithm_id, seed, result.error)
                return result
            opt.zero_grad()
            objective.backward()
            opt.step()
            for k, v in report.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
            steps += 1
        model.eval()
        with torch.no_grad():
            crit = float(criterion(model))
        if not math.isfinite(crit):
            result.status, result.error = "failed", f"non-finite criterion at epoch {epoch}"
            result.wall_time = time.perf_counter() - start
            return result
        result.checkpoints.append(Checkpoint(epoch, crit, copy.deepcopy(model.state_dict()),
                                             {k: v / max(steps, 1) for k, v in sums.items()}))
        if wall_budget is not None and time.perf_counter() - start >= wall_budget:
            break
    result.wall_time = time.perf_counter() - start
    return result


@torch.no_grad()
def predict(model: UDAModel, x, batch_size: int = 512) -> np.ndarray:
    """Class probabilities ``[n, K]`` in evaluation mode."""
    dtype = next(model.parameters()).dtype
    x = as_tensor(x, dtype=dtype)
    if x.dim() != 3 or x.shape[1] != model.in_channels:
        raise ValueError(f"expected input [n, {model.in_channels}, T], got {tuple(x.shape)}")
    was_training = model.training
    model.eval()
    out = [model(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    model.train(was_training)
    return torch.cat(out).cpu().numpy().astype(np.float64)
