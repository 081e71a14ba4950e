"""Loss components of the adaptation algorithms.

All functions take torch tensors and stay differentiable.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Optional

import torch

PROB_FLOOR = 1e-12
DISC_CLAMP = 1e-7


def loss_classification(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of ``probs`` [n, K] against integer labels."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    picked = probs.gather(1, labels[:, None]).squeeze(1)
    return -torch.log(picked.clamp_min(PROB_FLOOR)).mean()


def per_sample_cross_entropy(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    return -torch.log(probs.gather(1, labels[:, None]).squeeze(1).clamp_min(PROB_FLOOR))


def loss_adversarial(d_source: torch.Tensor, d_target: torch.Tensor,
                     w_source: Optional[torch.Tensor] = None,
                     w_target: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Discriminator cross-entropy: ``-mean log d_s - mean log(1 - d_t)``.

    Optional per-sample weights multiply the individual terms before averaging.
    """
    d_source = torch.as_tensor(d_source, dtype=torch.float64) if not torch.is_tensor(d_source) else d_source
    d_target = torch.as_tensor(d_target, dtype=d_source.dtype) if not torch.is_tensor(d_target) else d_target
    ls = -torch.log(d_source.clamp(DISC_CLAMP, 1 - DISC_CLAMP))
    lt = -torch.log1p(-d_target.clamp(DISC_CLAMP, 1 - DISC_CLAMP))
    if w_source is not None:
        ls = ls * w_source
    if w_target is not None:
        lt = lt * w_target
    return ls.mean() + lt.mean()


def entropy_rows(probs: torch.Tensor) -> torch.Tensor:
    return -torch.special.xlogy(probs, probs).sum(dim=1)


def target_entropy(probs: torch.Tensor) -> torch.Tensor:
    """Mean prediction entropy over target rows, with ``0 log 0 = 0``."""
    return entropy_rows(probs).mean()


def entropy_weights(probs: torch.Tensor) -> torch.Tensor:
    """``1 + exp(-H(p))`` normalized to mean one within the batch."""
    w = 1.0 + torch.exp(-entropy_rows(probs))
    return w / w.mean()


# -- temporal mixup -------------------------------------------------------


def moving_window(x: torch.Tensor, half_window: int, norm: str = "offsets") -> torch.Tensor:
    """Circular window sum over ``2L + 1`` steps along the last axis.

    ``norm="offsets"`` divides by the ``2L`` nonzero offsets, ``norm="mean"`` by ``2L + 1``.
    """
    if half_window < 1:
        raise ValueError("half window L must be >= 1")
    acc = torch.zeros_like(x)
    for shift in range(-half_window, half_window + 1):
        acc = acc + torch.roll(x, shifts=-shift, dims=-1)
    if norm == "offsets":
        return acc / (2 * half_window)
    if norm == "mean":
        return acc / (2 * half_window + 1)
    raise ValueError(f"unknown window norm {norm!r}")


def temporal_mix(dominant: torch.Tensor, partner: torch.Tensor, alpha: float,
                 half_window: int, norm: str = "offsets") -> torch.Tensor:
    return alpha * dominant + (1 - alpha) * moving_window(partner, half_window, norm)


class MixedBatches(NamedTuple):
    source: torch.Tensor
    source_labels: torch.Tensor
    target: torch.Tensor


def cotmix_augment(xs: torch.Tensor, ys: torch.Tensor, xt: torch.Tensor, alpha: float,
                   half_window: int, generator: Optional[torch.Generator] = None,
                   partners_s: Optional[torch.Tensor] = None,
                   partners_t: Optional[torch.Tensor] = None,
                   norm: str = "offsets") -> MixedBatches:
    """Append source-dominant and target-dominant mixes to each batch.

    Each source sample gets one uniformly drawn target partner and vice versa
    unless partner indices are supplied.  Returns 2n_s labeled source rows
    (originals first) and 2n_t target rows, row j pairing with row j + n_t.
    """
    if not 0.5 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0.5, 1], got {alpha}")
    ns, nt = xs.shape[0], xt.shape[0]
    if partners_s is None:
        partners_s = torch.randint(0, nt, (ns,), generator=generator)
    if partners_t is None:
        partners_t = torch.randint(0, ns, (nt,), generator=generator)
    mixed_s = temporal_mix(xs, xt[partners_s], alpha, half_window, norm)
    mixed_t = temporal_mix(xt, xs[partners_t], alpha, half_window, norm)
    return MixedBatches(torch.cat([xs, mixed_s]), torch.cat([ys, ys]), torch.cat([xt, mixed_t]))


def _log_softmax_excluding_self(sim: torch.Tensor) -> torch.Tensor:
    n = sim.shape[0]
    eye = torch.eye(n, dtype=torch.bool, device=sim.device)
    masked = sim.masked_fill(eye, float("-inf"))
    return masked - torch.logsumexp(masked, dim=1, keepdim=True)


def loss_cac(probs: torch.Tensor, labels: torch.Tensor, tau: float) -> torch.Tensor:
    """Class-aware contrastive loss, summed over anchors.

    For anchor i the positives are the other rows of the same class, each term
    scaled by ``1 / (n_y - 1)``; the softmax runs over every row except i.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    labels = torch.as_tensor(labels, dtype=torch.long)
    n = probs.shape[0]
    if n < 2:
        return probs.sum() * 0.0
    logp = _log_softmax_excluding_self(probs @ probs.T / tau)
    same = labels[:, None] == labels[None, :]
    same = same & ~torch.eye(n, dtype=torch.bool)
    positives = same.sum(dim=1)
    safe_logp = logp.masked_fill(~same, 0.0)
    per_anchor = safe_logp.sum(dim=1) / positives.clamp_min(1)
    per_anchor = torch.where(positives > 0, per_anchor, torch.zeros_like(per_anchor))
    return -per_anchor.sum()


def loss_uc(probs: torch.Tensor, tau: float) -> torch.Tensor:
    """Unsupervised contrastive loss over 2n_t rows; row j pairs with j ± n_t."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    m = probs.shape[0]
    if m % 2:
        raise ValueError("target batch must hold originals followed by their mixes")
    nt = m // 2
    logp = _log_softmax_excluding_self(probs @ probs.T / tau)
    partner = torch.cat([torch.arange(nt, m), torch.arange(0, nt)])
    return -logp[torch.arange(m), partner].mean()


# -- frequency/contrastive components ------------------------------------


def loss_raincoat_contrastive(z: torch.Tensor, labels: torch.Tensor,
                              margin: float = 0.5) -> torch.Tensor:
    """Same-class pull plus different-class hinge, averaged over contributing pairs.

    Sum of ``0.5 * d^2`` over ordered same-class pairs and ``max(0, margin - d)^2``
    over ordered different-class pairs, divided by the number of ordered
    pairs ``i != j``.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    n = z.shape[0]
    if n < 2:
        return z.sum() * 0.0
    diff = z[:, None, :] - z[None, :, :]
    sq = (diff ** 2).sum(-1)
    off = ~torch.eye(n, dtype=torch.bool)
    same = (labels[:, None] == labels[None, :]) & off
    other = (labels[:, None] != labels[None, :])
    # the floor keeps the gradient finite for coincident points of different classes
    dist = torch.sqrt(sq.masked_fill(~other, 1.0).clamp_min(PROB_FLOOR))
    hinge = torch.clamp(margin - dist, min=0.0) ** 2
    total = 0.5 * sq[same].sum() + hinge[other].sum()
    return total / off.sum()


# -- Sinkhorn -------------------------------------------------------------


class SinkhornResult(NamedTuple):
    value: torch.Tensor
    converged: bool
    iterations: int
    violations: tuple


def squared_distances(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)


def _softmin(eps: float, cost: torch.Tensor, log_w: torch.Tensor, pot: torch.Tensor) -> torch.Tensor:
    return -eps * torch.logsumexp(log_w[None, :] + (pot[None, :] - cost) / eps, dim=1)


def _eps_schedule(eps: float, diameter2: float, scaling: Optional[float]) -> list:
    if not scaling or diameter2 <= eps:
        return []
    out, e = [], diameter2
    while e > eps:
        out.append(e)
        e *= scaling
    return out


def entropic_ot(x: torch.Tensor, y: torch.Tensor, eps: float, max_iters: int = 200,
                tol: float = 1e-6, scaling: Optional[float] = None) -> SinkhornResult:
    """Entropic OT between uniform point clouds, log-domain alternating updates.

    Returns the dual objective <a, f> + <b, g>.  ``violations`` holds the L1
    row-marginal error after each full update at the target ``eps``.
    """
    cost = squared_distances(x, y)
    if torch.isnan(cost).any():
        raise ValueError("NaN in Sinkhorn cost matrix")
    n, m = cost.shape
    log_a = torch.full((n,), -math.log(n), dtype=cost.dtype)
    log_b = torch.full((m,), -math.log(m), dtype=cost.dtype)
    f = cost.new_zeros(n)
    g = cost.new_zeros(m)
    for e in _eps_schedule(eps, float(cost.detach().max()), scaling):
        f = _softmin(e, cost, log_b, g)
        g = _softmin(e, cost.T, log_a, f)
    violations = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        f = _softmin(eps, cost, log_b, g)
        g = _softmin(eps, cost.T, log_a, f)
        with torch.no_grad():
            log_plan = log_a[:, None] + log_b[None, :] + (f[:, None] + g[None, :] - cost) / eps
            viol = float((log_plan.exp().sum(1) - log_a.exp()).abs().sum())
        violations.append(viol)
        if viol < tol:
            converged = True
            break
    value = log_a.exp() @ f + log_b.exp() @ g
    return SinkhornResult(value, converged, it, tuple(violations))


def entropic_ot_self(x: torch.Tensor, eps: float, max_iters: int = 200, tol: float = 1e-6,
                     scaling: Optional[float] = None) -> SinkhornResult:
    """Symmetric Sinkhorn for ``OT_eps(a, a)`` using averaged potential updates."""
    cost = squared_distances(x, x)
    if torch.isnan(cost).any():
        raise ValueError("NaN in Sinkhorn cost matrix")
    n = cost.shape[0]
    log_a = torch.full((n,), -math.log(n), dtype=cost.dtype)
    f = cost.new_zeros(n)
    for e in _eps_schedule(eps, float(cost.detach().max()), scaling):
        f = 0.5 * (f + _softmin(e, cost, log_a, f))
    converged = False
    violations = []
    it = 0
    for it in range(1, max_iters + 1):
        f_new = 0.5 * (f + _softmin(eps, cost, log_a, f))
        step = float((f_new - f).detach().abs().max())
        f = f_new
        violations.append(step)
        if step < tol:
            converged = True
            break
    g = _softmin(eps, cost, log_a, f)
    value = log_a.exp() @ (f + g)
    return SinkhornResult(value, converged, it, tuple(violations))


def sinkhorn_divergence(x: torch.Tensor, y: torch.Tensor, eps: float = 0.05,
                        max_iters: int = 200, tol: float = 1e-6,
                        scaling: Optional[float] = None) -> SinkhornResult:
    """Debiased divergence ``OT(a, b) - OT(a, a)/2 - OT(b, b)/2``, squared-Euclidean cost."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = torch.as_tensor(x)
    y = torch.as_tensor(y, dtype=x.dtype)
    if x.dim() == 1:
        x = x[:, None]
    if y.dim() == 1:
        y = y[:, None]
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("point sets must be non-empty")
    xy = entropic_ot(x, y, eps, max_iters, tol, scaling)
    xx = entropic_ot_self(x, eps, max_iters, tol, scaling)
    yy = entropic_ot_self(y, eps, max_iters, tol, scaling)
    value = xy.value - 0.5 * xx.value - 0.5 * yy.value
    converged = xy.converged and xx.converged and yy.converged
    return SinkhornResult(value, converged, max(xy.iterations, xx.iterations, yy.iterations),
                          xy.violations)
