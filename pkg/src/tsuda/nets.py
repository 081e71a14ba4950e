"""Encoders, heads and the multilinear conditioning map."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import TimeSeriesBatch

ENCODER_KINDS = ("CNN1D", "Inception", "VRNN", "TimeFreqConcat")


@dataclass(frozen=True)
class EncoderSpec:
    """Backbone description.

    ``width`` is the base channel count: CNN1D uses (width, 2*width, 2*width),
    Inception uses ``width`` filters per branch (latent 4*width), VRNN uses it
    as hidden size.  ``depth`` counts conv blocks / inception modules.
    ``time_kind`` selects the time branch of a TimeFreqConcat encoder.
    """

    kind: str = "CNN1D"
    width: int = 16
    depth: int = 3
    kernel_sizes: tuple = (8, 5, 3)
    inception_kernels: tuple = (10, 20, 40)
    bottleneck: int = 16
    latent_dim: Optional[int] = None
    z_dim: int = 8
    freq_width: int = 16
    freq_modes: Optional[int] = None
    time_kind: str = "CNN1D"

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if not self.inception_kernels:
            raise ValueError("inception kernel set must be non-empty")
        if self.width < 1 or self.depth < 1:
            raise ValueError("width and depth must be >= 1")
        object.__setattr__(self, "kernel_sizes", tuple(self.kernel_sizes))
        object.__setattr__(self, "inception_kernels", tuple(self.inception_kernels))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


class GradientReversal(torch.autograd.Function):
    """Identity forward; multiplies the incoming gradient by ``-lambda``."""

    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = float(lam)
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.lam * grad_output, None


def grad_reverse(x: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    return GradientReversal.apply(x, lam)


# -- backbones ------------------------------------------------------------


class CNN1DEncoder(nn.Module):
    def __init__(self, in_channels: int, widths=(64, 128, 128), kernel_sizes=(8, 5, 3)):
        super().__init__()
        layers = []
        prev = in_channels
        for i, w in enumerate(widths):
            k = kernel_sizes[min(i, len(kernel_sizes) - 1)]
            layers += [nn.Conv1d(prev, w, k, padding="same", bias=False),
                       nn.BatchNorm1d(w), nn.ReLU()]
            prev = w
        self.body = nn.Sequential(*layers)
        self.latent_dim = prev

    def forward(self, x):
        return self.body(x).mean(dim=-1)


def _odd(k: int) -> int:
    return k if k % 2 else k - 1


class InceptionModule(nn.Module):
    def __init__(self, in_channels: int, nf: int, kernels, bottleneck: int):
        super().__init__()
        if in_channels > 1 and bottleneck > 0:
            self.bottleneck = nn.Conv1d(in_channels, bottleneck, 1, bias=False)
            width = bottleneck
        else:
            self.bottleneck = nn.Identity()
            width = in_channels
        self.convs = nn.ModuleList(
            nn.Conv1d(width, nf, k, padding=k // 2, bias=False) for k in kernels
        )
        self.pool = nn.MaxPool1d(3, stride=1, padding=1)
        self.pool_conv = nn.Conv1d(in_channels, nf, 1, bias=False)
        self.out_channels = nf * (len(kernels) + 1)
        self.bn = nn.BatchNorm1d(self.out_channels)

    def forward(self, x):
        b = self.bottleneck(x)
        branches = [conv(b) for conv in self.convs]
        branches.append(self.pool_conv(self.pool(x)))
        return F.relu(self.bn(torch.cat(branches, dim=1)))


class InceptionBlock(nn.Module):
    """Three inception modules wrapped by a residual shortcut."""

    def __init__(self, in_channels: int, nf: int, kernels, bottleneck: int, n_modules: int = 3):
        super().__init__()
        mods = []
        prev = in_channels
        for _ in range(n_modules):
            m = InceptionModule(prev, nf, kernels, bottleneck)
            mods.append(m)
            prev = m.out_channels
        self.modules_ = nn.ModuleList(mods)
        self.out_channels = prev
        if in_channels == prev:
            self.shortcut = nn.Identity()
        else:
            self.shortcut = nn.Sequential(nn.Conv1d(in_channels, prev, 1, bias=False),
                                          nn.BatchNorm1d(prev))

    def forward(self, x):
        y = x
        for m in self.modules_:
            y = m(y)
        return F.relu(y + self.shortcut(x))


class InceptionEncoder(nn.Module):
    def __init__(self, in_channels: int, length: int, nf: int = 8, depth: int = 3,
                 kernels=(10, 20, 40), bottleneck: int = 16):
        super().__init__()
        scale = min(1.0, length / 64.0)
        kernels = tuple(max(3, _odd(int(round(k * scale)))) for k in kernels)
        self.kernels = kernels
        blocks = []
        prev = in_channels
        remaining = depth
        while remaining > 0:
            n = min(3, remaining)
            block = InceptionBlock(prev, nf, kernels, bottleneck, n)
            blocks.append(block)
            prev = block.out_channels
            remaining -= n
        self.blocks = nn.Sequential(*blocks)
        self.latent_dim = prev

    def forward(self, x):
        return self.blocks(x).mean(dim=-1)


def gaussian_kl(mu_q, logvar_q, mu_p, logvar_p):
    """KL(N(mu_q, var_q) || N(mu_p, var_p)) summed over the last axis."""
    return 0.5 * (logvar_p - logvar_q
                  + (logvar_q.exp() + (mu_q - mu_p) ** 2) / logvar_p.exp() - 1.0).sum(-1)


def gaussian_nll(x, mu, logvar):
    """Negative log-density of ``x`` under a diagonal Gaussian, summed over the last axis."""
    return 0.5 * (math.log(2 * math.pi) + logvar + (x - mu) ** 2 / logvar.exp()).sum(-1)


class VRNN(nn.Module):
    """Variational recurrent network with a Gaussian decoder.

    ``forward`` returns ``(elbo_loss, final_hidden, parts)`` where ``elbo_loss``
    sums reconstruction NLL and KL over time, averaged over the batch.
    """

    def __init__(self, in_channels: int, hidden: int = 16, z_dim: int = 8):
        super().__init__()
        self.hidden, self.z_dim = hidden, z_dim
        self.phi_x = nn.Sequential(nn.Linear(in_channels, hidden), nn.ReLU())
        self.phi_z = nn.Sequential(nn.Linear(z_dim, hidden), nn.ReLU())
        self.enc = nn.Sequential(nn.Linear(2 * hidden, hidden), nn.ReLU())
        self.enc_mu, self.enc_logvar = nn.Linear(hidden, z_dim), nn.Linear(hidden, z_dim)
        self.prior = nn.Sequential(nn.Linear(hidden, hidden), nn.ReLU())
        self.prior_mu, self.prior_logvar = nn.Linear(hidden, z_dim), nn.Linear(hidden, z_dim)
        self.dec = nn.Sequential(nn.Linear(2 * hidden, hidden), nn.ReLU())
        self.dec_mu, self.dec_logvar = nn.Linear(hidden, in_channels), nn.Linear(hidden, in_channels)
        self.rnn = nn.GRUCell(2 * hidden, hidden)
        self.latent_dim = hidden

    def forward(self, x, noise: Optional[torch.Tensor] = None, generator=None):
        n, _, t_len = x.shape
        h = x.new_zeros(n, self.hidden)
        nll = x.new_zeros(n)
        kl = x.new_zeros(n)
        for t in range(t_len):
            xt = x[:, :, t]
            fx = self.phi_x(xt)
            e = self.enc(torch.cat([fx, h], dim=1))
            mu_q, lv_q = self.enc_mu(e), self.enc_logvar(e)
            p = self.prior(h)
            mu_p, lv_p = self.prior_mu(p), self.prior_logvar(p)
            if noise is not None:
                eps = noise[t]
            elif self.training:
                eps = torch.randn(mu_q.shape, generator=generator, dtype=x.dtype)
            else:
                eps = torch.zeros_like(mu_q)
            z = mu_q + (0.5 * lv_q).exp() * eps
            fz = self.phi_z(z)
            d = self.dec(torch.cat([fz, h], dim=1))
            nll = nll + gaussian_nll(xt, self.dec_mu(d), self.dec_logvar(d))
            kl = kl + gaussian_kl(mu_q, lv_q, mu_p, lv_p)
            h = self.rnn(torch.cat([fx, fz], dim=1), h)
        parts = {"nll": nll.mean(), "kl": kl.mean()}
        return parts["nll"] + parts["kl"], h, parts


def spectral_features(x: torch.Tensor, modes: Optional[int] = None) -> torch.Tensor:
    """Stack rFFT magnitude and phase per channel: ``[n, 2C, F]``."""
    spec = torch.fft.rfft(x, dim=-1)
    if modes is not None:
        spec = spec[..., :modes]
    return torch.cat([spec.abs(), torch.atan2(spec.imag, spec.real)], dim=1)


class FrequencyEncoder(nn.Module):
    def __init__(self, in_channels: int, width: int = 16, modes: Optional[int] = None,
                 kernel_size: int = 3):
        super().__init__()
        self.modes = modes
        self.conv = nn.Conv1d(2 * in_channels, width, kernel_size, padding=kernel_size // 2)
        self.latent_dim = width

    def forward(self, x):
        feats = spectral_features(x, self.modes)
        return F.relu(self.conv(feats)).mean(dim=-1)


class TimeFreqEncoder(nn.Module):
    def __init__(self, time_encoder: nn.Module, freq_encoder: FrequencyEncoder):
        super().__init__()
        self.time = time_encoder
        self.freq = freq_encoder
        self.latent_dim = time_encoder.latent_dim + freq_encoder.latent_dim

    def forward(self, x):
        return torch.cat([self.time(x), self.freq(x)], dim=1)


class VRNNEncoder(nn.Module):
    """Adapter giving the VRNN the ``x -> z`` encoder interface.

    The ELBO of the most recent forward pass is kept in ``last_elbo``.
    """

    def __init__(self, vrnn: VRNN):
        super().__init__()
        self.vrnn = vrnn
        self.latent_dim = vrnn.latent_dim
        self.last_elbo = None
        self.last_parts = None
        self.noise = None
        self.generator = None

    def forward(self, x):
        elbo, h, parts = self.vrnn(x, noise=self.noise, generator=self.generator)
        self.last_elbo, self.last_parts = elbo, parts
        return h


def build_encoder(spec: EncoderSpec, in_channels: int, length: int) -> nn.Module:
    if spec.kind == "CNN1D":
        widths = [spec.width] + [2 * spec.width] * (spec.depth - 1)
        if spec.latent_dim:
            widths[-1] = spec.latent_dim
        return CNN1DEncoder(in_channels, widths, spec.kernel_sizes)
    if spec.kind == "Inception":
        return InceptionEncoder(in_channels, length, spec.width, spec.depth,
                                spec.inception_kernels, spec.bottleneck)
    if spec.kind == "VRNN":
        return VRNNEncoder(VRNN(in_channels, spec.width, spec.z_dim))
    time_spec = EncoderSpec(**{**spec.to_dict(), "kind": spec.time_kind})
    return TimeFreqEncoder(build_encoder(time_spec, in_channels, length),
                           FrequencyEncoder(in_channels, spec.freq_width, spec.freq_modes))


# -- heads ----------------------------------------------------------------


class Classifier(nn.Module):
    """Affine map to ``K`` logits; :func:`classify` applies the softmax."""

    def __init__(self, latent_dim: int, num_classes: int):
        super().__init__()
        self.linear = nn.Linear(latent_dim, num_classes)

    def forward(self, z):
        return self.linear(z)


class Discriminator(nn.Module):
    def __init__(self, in_dim: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, 1))

    def forward(self, z):
        return torch.sigmoid(self.net(z)).squeeze(-1)


class MultilinearMap(nn.Module):
    """Conditioning map ``T(z, p)``.

    ``outer`` flattens ``z ⊗ p`` with the latent index major, so entry
    ``i * K + k`` is ``z_i * p_k``.  ``randomized`` computes
    ``(R1 z) ⊙ (R2 p) / sqrt(d)`` with standard-normal projections fixed at
    construction.
    """

    def __init__(self, latent_dim: int, num_classes: int, mode: str = "outer",
                 dim: int = 64, generator: Optional[torch.Generator] = None):
        super().__init__()
        if mode not in ("outer", "randomized"):
            raise ValueError(f"unknown multilinear mode {mode!r}")
        self.mode = mode
        if mode == "outer":
            self.out_dim = latent_dim * num_classes
        else:
            self.out_dim = dim
            self.register_buffer("r1", torch.randn(dim, latent_dim, generator=generator))
            self.register_buffer("r2", torch.randn(dim, num_classes, generator=generator))

    def forward(self, z, p):
        return multilinear_map(z, p, self.mode, getattr(self, "r1", None), getattr(self, "r2", None))


def multilinear_map(z, p, mode="outer", r1=None, r2=None):
    z = torch.as_tensor(z)
    p = torch.as_tensor(p, dtype=z.dtype)
    single = z.dim() == 1
    if single:
        z, p = z[None], p[None]
    if z.shape[0] != p.shape[0]:
        raise ValueError("z and p must have the same number of rows")
    if mode == "outer":
        out = (z[:, :, None] * p[:, None, :]).reshape(z.shape[0], -1)
    elif mode == "randomized":
        if r1 is None or r2 is None:
            raise ValueError("randomized mode needs projection matrices")
        d = r1.shape[0]
        out = (z @ r1.to(z.dtype).T) * (p @ r2.to(z.dtype).T) / math.sqrt(d)
    else:
        raise ValueError(f"unknown multilinear mode {mode!r}")
    return out[0] if single else out


# -- functional entry points ---------------------------------------------


def as_tensor(x, dtype=torch.float32) -> torch.Tensor:
    if isinstance(x, TimeSeriesBatch):
        x = x.values
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def encode(encoder: nn.Module, x, in_channels: Optional[int] = None) -> torch.Tensor:
    x = as_tensor(x, dtype=next(encoder.parameters()).dtype)
    if x.dim() != 3:
        raise ValueError(f"expected [n, C, T] input, got shape {tuple(x.shape)}")
    if in_channels is not None and x.shape[1] != in_channels:
        raise ValueError(f"encoder expects {in_channels} channels, got {x.shape[1]}")
    return encoder(x)


def classify(classifier: nn.Module, z: torch.Tensor) -> torch.Tensor:
    return torch.softmax(classifier(z), dim=-1)


# -- checkpoints ----------------------------------------------------------


def state_to_numpy(module: nn.Module) -> dict:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def save_checkpoint(path, state: dict, spec: dict) -> None:
    """Write a named-tensor ``.npz`` plus a JSON sidecar describing the model."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: (v.detach().cpu().numpy() if isinstance(v, torch.Tensor) else np.asarray(v))
              for k, v in state.items()}
    np.savez(path.with_suffix(".npz"), **arrays)
    path.with_suffix(".json").write_text(json.dumps(spec, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    with np.load(path.with_suffix(".npz")) as data:
        state = {k: torch.from_numpy(data[k].copy()) for k in data.files}
    spec = json.loads(path.with_suffix(".json").read_text())
    return state, spec
