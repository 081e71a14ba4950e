"""Loading, splitting, preprocessing, and synthetic shift scenarios."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .datamodel import DomainDataset, Scenario, TimeSeriesBatch

EPS_STD = 1e-8
DEFAULT_RATIOS = (0.64, 0.16, 0.20)


class LoadError(ValueError):
    def __init__(self, path, message, offset: Optional[int] = None):
        self.path = str(path)
        self.offset = offset
        where = f" at byte offset {offset}" if offset is not None else ""
        super().__init__(f"{path}{where}: {message}")


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class SplitPolicy:
    ratios: tuple = DEFAULT_RATIOS
    stratify_source: bool = True
    stratify_target_test_only: bool = True
    causal: bool = True
    seed: int = 0

    def __post_init__(self):
        ratios = tuple(float(r) for r in self.ratios)
        if len(ratios) != 3:
            raise ValueError("ratios must be (train, val, test)")
        if any(not 0.0 < r < 1.0 for r in ratios):
            raise ValueError(f"each ratio must lie in (0, 1), got {ratios}")
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
        object.__setattr__(self, "ratios", ratios)


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(np.asarray(data["mean"], dtype=float), np.asarray(data["std"], dtype=float))


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic two-domain generator.

    ``n`` is the number of series per domain, before splitting.
    """

    num_classes: int = 3
    channels: int = 2
    length: int = 64
    n: int = 600
    feature_shift: float = 0.0
    temporal_shift: int = 0
    noise_std: float = 0.5
    source_priors: Optional[tuple] = None
    target_priors: Optional[tuple] = None
    name: str = "synthetic"

    def __post_init__(self):
        k = self.num_classes
        for attr in ("source_priors", "target_priors"):
            priors = getattr(self, attr)
            if priors is None:
                priors = (1.0 / k,) * k
            priors = tuple(float(p) for p in priors)
            if len(priors) != k or abs(sum(priors) - 1.0) > 1e-9 or min(priors) < 0:
                raise ValueError(f"{attr} must be a probability vector of length {k}")
            object.__setattr__(self, attr, priors)
        if self.feature_shift < 0 or self.noise_std < 0:
            raise ValueError("feature_shift and noise_std must be non-negative")
        if not 0 <= self.temporal_shift < self.length:
            raise ValueError("temporal_shift must lie in [0, T)")
        if k < 1 or self.channels < 1 or self.length < 2 or self.n < 1:
            raise ValueError("degenerate synthetic shape")

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        data = dict(data)
        for key in ("source_priors", "target_priors"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        return cls(**data)


# -- splitting ------------------------------------------------------------


def _counts(n: int, ratios) -> list[int]:
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return [n_train, n_val, n - n_train - n_val]


def _stratum_counts(n_c: int, ratios, label) -> list[int]:
    if n_c < 3:
        raise SplitError(f"class {label} has {n_c} samples; stratification needs at least 3")
    counts = _counts(n_c, ratios)
    # every split must see every class
    for i in range(3):
        while counts[i] < 1:
            j = int(np.argmax(counts))
            counts[j] -= 1
            counts[i] += 1
    return counts


def make_splits(batch: TimeSeriesBatch, policy: SplitPolicy, role: str = "source"):
    """Split one domain into (train, val, test).

    Source: every split is stratified.  Target: the test split is stratified
    against the remainder, whose train/val partition ignores labels.  With
    ``policy.causal`` earlier indices go to train, then val, then test.
    """
    if role not in ("source", "target"):
        raise ValueError(f"role must be 'source' or 'target', got {role!r}")
    if batch.labels is None:
        raise SplitError("make_splits needs labels to stratify")
    rng = np.random.default_rng(policy.seed)
    labels = batch.labels
    classes = np.unique(labels)

    def order(idx):
        return np.sort(idx) if policy.causal else rng.permutation(idx)

    parts = [[], [], []]
    stratify_all = role == "source" and policy.stratify_source
    if stratify_all:
        for c in classes:
            idx = order(np.flatnonzero(labels == c))
            n_tr, n_va, _ = _stratum_counts(len(idx), policy.ratios, c)
            parts[0].append(idx[:n_tr])
            parts[1].append(idx[n_tr:n_tr + n_va])
            parts[2].append(idx[n_tr + n_va:])
    else:
        rest = []
        test_ratio = policy.ratios[2]
        for c in classes:
            idx = order(np.flatnonzero(labels == c))
            if policy.stratify_target_test_only or role == "source":
                n_te = _stratum_counts(len(idx), policy.ratios, c)[2]
                parts[2].append(idx[len(idx) - n_te:])
                rest.append(idx[:len(idx) - n_te])
            else:
                rest.append(idx)
        rest = np.concatenate(rest)
        if not parts[2]:
            rest = order(rest)
            n_te = int(round(test_ratio * len(rest)))
            parts[2].append(rest[len(rest) - n_te:])
            rest = rest[:len(rest) - n_te]
        rest = order(rest)
        share = policy.ratios[0] / (policy.ratios[0] + policy.ratios[1])
        n_tr = int(round(share * len(rest)))
        parts[0].append(rest[:n_tr])
        parts[1].append(rest[n_tr:])

    out = []
    for chunks in parts:
        idx = np.concatenate(chunks) if chunks else np.empty(0, dtype=int)
        out.append(batch.subset(np.sort(idx)))
    return tuple(out)


# -- preprocessing --------------------------------------------------------


def fit_norm_stats(train: TimeSeriesBatch) -> NormStats:
    values = train.values.astype(np.float64)
    return NormStats(values.mean(axis=(0, 2)), values.std(axis=(0, 2)))


def znormalize(batch: TimeSeriesBatch, stats: NormStats) -> TimeSeriesBatch:
    if batch.channels != len(stats.mean):
        raise ValueError(
            f"batch has {batch.channels} channels but stats cover {len(stats.mean)}"
        )
    std = np.maximum(stats.std, EPS_STD)
    values = (batch.values.astype(np.float64) - stats.mean[None, :, None]) / std[None, :, None]
    # constant channels: the guard would otherwise amplify round-off
    values[:, stats.std < EPS_STD, :] = 0.0
    return TimeSeriesBatch(values.astype(batch.values.dtype, copy=False), batch.labels)


def resample(batch: TimeSeriesBatch, new_length: int) -> TimeSeriesBatch:
    """Linear interpolation of every channel onto ``new_length`` uniform points."""
    if new_length < 2:
        raise ValueError("new_length must be >= 2")
    t_old = batch.length
    if new_length == t_old:
        return batch
    src = np.arange(t_old, dtype=np.float64)
    dst = np.linspace(0.0, t_old - 1, new_length)
    pos = np.searchsorted(src, dst, side="right") - 1
    pos = np.clip(pos, 0, t_old - 2)
    frac = dst - pos
    v = batch.values.astype(np.float64)
    out = v[..., pos] * (1.0 - frac) + v[..., pos + 1] * frac
    return TimeSeriesBatch(out.astype(batch.values.dtype, copy=False), batch.labels)


def preprocess_scenario(scenario: Scenario, *, znorm: bool = True,
                        new_length: Optional[int] = None) -> tuple[Scenario, Optional[NormStats]]:
    """Resample then z-normalize both domains with source-train statistics."""
    def apply(domain: DomainDataset, fn) -> DomainDataset:
        return DomainDataset(domain.domain_id, domain.num_classes, fn(domain.train),
                             fn(domain.val), fn(domain.test), domain.role, domain.metadata)

    if new_length is not None:
        scenario = Scenario(scenario.dataset_name,
                            apply(scenario.source, lambda b: resample(b, new_length)),
                            apply(scenario.target, lambda b: resample(b, new_length)))
    stats = None
    if znorm:
        stats = fit_norm_stats(scenario.source.train)
        scenario = Scenario(scenario.dataset_name,
                            apply(scenario.source, lambda b: znormalize(b, stats)),
                            apply(scenario.target, lambda b: znormalize(b, stats)))
    return scenario, stats


# -- on-disk format -------------------------------------------------------


def _read_meta(path: Path) -> dict:
    try:
        meta = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(path, f"malformed header: {exc}") from exc
    for key in ("n", "C", "T"):
        if not isinstance(meta.get(key), int) or meta[key] < 1:
            raise LoadError(path, f"malformed header: {key!r} must be a positive integer")
    return meta


def _label_stem(stem: str) -> str:
    return "labels" if stem == "data" else stem


def _read_split(directory: Path, stem: str, meta: dict, num_classes: int) -> TimeSeriesBatch:
    n, c, t = meta["n"], meta["C"], meta["T"]
    data_path = directory / f"{stem}.f32"
    raw = data_path.read_bytes()
    expected = n * c * t * 4
    if len(raw) != expected:
        offset = min(len(raw), expected) - (len(raw) % 4 if len(raw) < expected else 0)
        raise LoadError(
            data_path,
            f"shape mismatch: header [n={n}, C={c}, T={t}] needs {expected} bytes, "
            f"file has {len(raw)}",
            offset=offset,
        )
    values = np.frombuffer(raw, dtype="<f4").reshape(n, c, t).copy()
    bad = np.argwhere(~np.isfinite(values))
    if len(bad):
        i, ch, step = bad[0]
        raise LoadError(data_path, "non-finite value",
                        offset=int(((i * c + ch) * t + step) * 4))
    labels = None
    label_path = directory / f"{_label_stem(stem)}.i64"
    if label_path.exists():
        raw_l = label_path.read_bytes()
        if len(raw_l) != n * 8:
            raise LoadError(label_path, f"shape mismatch: expected {n * 8} bytes, file has "
                            f"{len(raw_l)}", offset=min(len(raw_l), n * 8) // 8 * 8)
        labels = np.frombuffer(raw_l, dtype="<i8").astype(np.int64)
        out = np.flatnonzero((labels < 0) | (labels >= num_classes))
        if len(out):
            raise LoadError(label_path, f"label out of range [0, {num_classes}): "
                            f"{labels[out[0]]}", offset=int(out[0]) * 8)
    return TimeSeriesBatch(values, labels)


def load_domain(path, policy: Optional[SplitPolicy] = None, role: str = "source") -> DomainDataset:
    """Read a domain directory; reuse on-disk splits, otherwise split ``data.*``."""
    directory = Path(path)
    meta = _read_meta(directory / "meta.json")
    k = meta.get("K")
    if not isinstance(k, int) or k < 1:
        raise LoadError(directory / "meta.json", "malformed header: 'K' must be a positive integer")
    domain_id = str(meta.get("domain_id", directory.name))
    chronological = bool(meta.get("chronological", True))

    if all((directory / f"{s}.f32").exists() for s in ("train", "val", "test")):
        splits = []
        for s in ("train", "val", "test"):
            split_meta = dict(meta)
            if (directory / f"{s}.meta.json").exists():
                split_meta.update(_read_meta(directory / f"{s}.meta.json"))
            splits.append(_read_split(directory, s, split_meta, k))
    else:
        batch = _read_split(directory, "data", meta, k)
        policy = policy or SplitPolicy()
        if not chronological and policy.causal:
            policy = SplitPolicy(policy.ratios, policy.stratify_source,
                                 policy.stratify_target_test_only, False, policy.seed)
        splits = make_splits(batch, policy, role)
    dataset = DomainDataset(domain_id, k, *splits, role=role,
                            metadata={"chronological": chronological, "path": str(directory),
                                      "class_names": meta.get("class_names")})
    problems = dataset.validate()
    if problems:
        raise LoadError(directory, "; ".join(problems))
    return dataset


def _write_split(directory: Path, stem: str, batch: TimeSeriesBatch):
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{stem}.f32").write_bytes(np.ascontiguousarray(batch.values, dtype="<f4").tobytes())
    if batch.labels is not None:
        (directory / f"{_label_stem(stem)}.i64").write_bytes(np.ascontiguousarray(batch.labels, dtype="<i8").tobytes())


def save_batch(path, batch: TimeSeriesBatch, domain_id: str, num_classes: int,
               chronological: bool = True):
    directory = Path(path)
    n, c, t = batch.values.shape
    _write_split(directory, "data", batch)
    meta = {"domain_id": domain_id, "K": num_classes, "C": c, "T": t, "n": n,
            "chronological": chronological}
    (directory / "meta.json").write_text(json.dumps(meta, indent=2))


def save_domain(path, dataset: DomainDataset):
    """Write a split domain; labels of every split are written (oracle act)."""
    directory = Path(path)
    meta = {"domain_id": dataset.domain_id, "K": dataset.num_classes,
            "C": dataset.channels, "T": dataset.length,
            "n": sum(getattr(dataset, s).n for s in ("train", "val", "test")),
            "chronological": bool(dataset.metadata.get("chronological", True))}
    for s in ("train", "val", "test"):
        batch = getattr(dataset, s)
        _write_split(directory, s, batch)
        (directory / f"{s}.meta.json").write_text(
            json.dumps({"n": batch.n, "C": batch.channels, "T": batch.length}))
    (directory / "meta.json").write_text(json.dumps(meta, indent=2))


# -- synthetic scenarios --------------------------------------------------


def class_prototypes(spec: SyntheticSpec, seed: int) -> np.ndarray:
    """Noise-free class templates, shape ``[K, C, T]``.

    Channel 0 of class k oscillates at k+1 cycles per window with zero phase;
    the other channels share the frequency with a random phase per (k, c).
    """
    rng = np.random.default_rng([seed, 0])
    t = np.arange(spec.length) / spec.length
    protos = np.empty((spec.num_classes, spec.channels, spec.length))
    for k in range(spec.num_classes):
        for c in range(spec.channels):
            phase = 0.0 if c == 0 else rng.uniform(0, 2 * np.pi)
            protos[k, c] = np.sin(2 * np.pi * (k + 1) * t + phase)
    return protos


def shift_prototypes(protos: np.ndarray, feature_shift: float, temporal_shift: int) -> np.ndarray:
    shifted = (1.0 + feature_shift) * protos + feature_shift
    return np.roll(shifted, temporal_shift, axis=-1)


def _draw_labels(n: int, priors, rng) -> np.ndarray:
    exact = np.asarray(priors) * n
    counts = np.floor(exact).astype(int)
    remainder = n - counts.sum()
    counts[np.argsort(-(exact - counts), kind="stable")[:remainder]] += 1
    labels = np.repeat(np.arange(len(priors)), counts)
    return rng.permutation(labels)


def synthetic_domain_batch(spec: SyntheticSpec, seed: int, role: str) -> TimeSeriesBatch:
    protos = class_prototypes(spec, seed)
    if role == "target":
        protos = shift_prototypes(protos, spec.feature_shift, spec.temporal_shift)
        priors = spec.target_priors
    else:
        priors = spec.source_priors
    rng = np.random.default_rng([seed, 1 if role == "source" else 2])
    labels = _draw_labels(spec.n, priors, rng)
    noise = rng.standard_normal((spec.n, spec.channels, spec.length)) * spec.noise_std
    values = protos[labels] + noise
    return TimeSeriesBatch(values.astype(np.float32), labels)


def generate_synthetic_scenario(spec: SyntheticSpec, seed: int,
                                policy: Optional[SplitPolicy] = None) -> Scenario:
    policy = policy or SplitPolicy(seed=seed)
    domains = []
    for role in ("source", "target"):
        batch = synthetic_domain_batch(spec, seed, role)
        splits = make_splits(batch, policy, role)
        domains.append(DomainDataset(role, spec.num_classes, *splits, role=role,
                                     metadata={"chronological": True, "synthetic": True}))
    return Scenario(spec.name, domains[0], domains[1])

