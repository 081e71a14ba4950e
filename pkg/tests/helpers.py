"""Shared utilities for the test suite."""

import torch

from tsuda.algorithms import ALGORITHM_SPECS, UDAModel, compute_losses, default_hparams

TOY_OVERRIDES = {
    "width_mult": None, "width": 2, "depth": 1, "bottleneck": 2, "disc_hidden": 4,
    "z_dim": 2, "freq_width": 2, "randomized_dim": 6,
    "sinkhorn_eps": 0.5, "sinkhorn_iters": 30, "sinkhorn_tol": 0.0, "sinkhorn_scaling": None,
}


def toy_model(algorithm_id, channels=2, length=16, classes=3, seed=0, **overrides):
    hp = default_hparams(algorithm_id, **{**TOY_OVERRIDES, **overrides})
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = UDAModel(algorithm_id, channels, length, classes, hp)
    return model.double().train()


def toy_batch(channels=2, length=16, classes=3, ns=6, nt=5, seed=0):
    gen = torch.Generator().manual_seed(seed)
    xs = torch.randn(ns, channels, length, generator=gen, dtype=torch.float64)
    xt = torch.randn(nt, channels, length, generator=gen, dtype=torch.float64) + 0.5
    ys = torch.arange(ns) % classes
    return xs, ys, xt


def loss_closure(model, xs, ys, xt):
    """Deterministic ``() -> (objective, report)`` for a toy model."""
    if ALGORITHM_SPECS[model.algorithm_id].method == "vrada":
        gen = torch.Generator().manual_seed(99)
        model.encoder.noise = torch.randn(xs.shape[-1], len(xs) + len(xt),
                                          model.encoder.vrnn.z_dim, generator=gen,
                                          dtype=torch.float64)

    def closure():
        return compute_losses(model, xs, ys, xt, torch.Generator().manual_seed(5))
    return closure


def discriminator_params(model):
    if model.discriminator is None:
        return set()
    return {id(p) for p in model.discriminator.parameters()}


def finite_difference_error(model, closure, h=1e-6):
    """Relative L2 error between autograd and central differences over all parameters.

    Encoder and classifier parameters are checked against ``total``; the
    discriminator against ``L_A``, the quantity it minimises.
    """
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    objective, _ = closure()
    objective.backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in params])
    disc = discriminator_params(model)
    numeric = []
    with torch.no_grad():
        for p in params:
            key = "L_A" if id(p) in disc else "total"
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = closure()[1][key].item()
                flat[i] = old - h
                down = closure()[1][key].item()
                flat[i] = old
                numeric.append((up - down) / (2 * h))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    scale = max(numeric.norm().item(), analytic.norm().item(), 1e-12)
    return (numeric - analytic).norm().item() / scale, numeric.numel()
