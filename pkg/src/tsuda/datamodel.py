"""Core types shared across the benchmark.

Arrays are numpy; conversion to torch happens at the training boundary.
Target-domain train/val labels are kept but only handed out through
:meth:`DomainDataset.view` with ``oracle=True``, and every such access is
appended to the active :class:`OracleAudit` scope.
"""

from __future__ import annotations

import contextlib
import contextvars
import dataclasses
import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional

import numpy as np

ALGORITHMS = (
    "SourceOnly",
    "CoDATS",
    "InceptionDANN",
    "InceptionCDAN",
    "VRADA",
    "CoTMix",
    "InceptionMix",
    "Raincoat",
    "InceptionRain",
)
TUNERS = ("SourceRisk", "TargetRisk", "IWCV")
SPLITS = ("train", "val", "test")


class OracleAccessError(PermissionError):
    """Raised when target labels are requested without the oracle flag."""


@dataclass(frozen=True, eq=False)
class TimeSeriesBatch:
    """A batch of multichannel series, shape ``[n, C, T]``, with optional labels."""

    values: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise ValueError(f"values must be [n, C, T], got shape {values.shape}")
        object.__setattr__(self, "values", values)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (values.shape[0],):
                raise ValueError(
                    f"labels shape {labels.shape} does not match n={values.shape[0]}"
                )
            object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def length(self) -> int:
        return self.values.shape[2]

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def __len__(self) -> int:
        return self.n

    def subset(self, index) -> "TimeSeriesBatch":
        index = np.asarray(index)
        labels = None if self.labels is None else self.labels[index]
        return TimeSeriesBatch(self.values[index], labels)

    def without_labels(self) -> "TimeSeriesBatch":
        return TimeSeriesBatch(self.values, None)

    def __eq__(self, other):
        if not isinstance(other, TimeSeriesBatch):
            return NotImplemented
        if self.values.shape != other.values.shape:
            return False
        if not np.array_equal(self.values, other.values):
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        return self.labels is None or np.array_equal(self.labels, other.labels)

    __hash__ = None


def validate_batch(batch: TimeSeriesBatch, num_classes: int) -> list[str]:
    """Return human-readable invariant violations; an empty list means valid."""
    problems = []
    values = batch.values
    n, c, t = values.shape
    if n < 1:
        problems.append("batch is empty (n < 1)")
    if c < 1:
        problems.append("no channels (C < 1)")
    if t < 2:
        problems.append(f"series too short (T={t} < 2)")
    bad = ~np.isfinite(values)
    if bad.any():
        for i, ch, step in np.argwhere(bad)[:10]:
            kind = "NaN" if np.isnan(values[i, ch, step]) else "Inf"
            problems.append(f"{kind} at sample {i}, channel {ch}, step {step}")
    if batch.labels is not None:
        out = (batch.labels < 0) | (batch.labels >= num_classes)
        if out.any():
            idx = np.flatnonzero(out)
            problems.append(
                f"label out of range [0, {num_classes}) at samples {idx[:10].tolist()}"
            )
    return problems


# -- oracle audit ---------------------------------------------------------


class OracleAudit:
    """Thread-safe list of target-label accesses."""

    def __init__(self):
        self._lock = threading.Lock()
        self._entries: list[dict] = []

    def record(self, domain_id: str, split: str, purpose: str):
        with self._lock:
            self._entries.append({"domain": domain_id, "split": split, "purpose": purpose})

    @property
    def entries(self) -> list[dict]:
        with self._lock:
            return list(self._entries)

    def __len__(self):
        return len(self.entries)


_AUDIT: contextvars.ContextVar[Optional[OracleAudit]] = contextvars.ContextVar(
    "oracle_audit", default=None
)
GLOBAL_AUDIT = OracleAudit()


@contextlib.contextmanager
def audit_scope() -> Iterator[OracleAudit]:
    """Collect oracle label accesses made inside the ``with`` block."""
    audit = OracleAudit()
    token = _AUDIT.set(audit)
    try:
        yield audit
    finally:
        _AUDIT.reset(token)


def _current_audit() -> OracleAudit:
    audit = _AUDIT.get()
    return GLOBAL_AUDIT if audit is None else audit


@dataclass(frozen=True)
class DomainDataset:
    """One domain with its train/val/test splits.

    ``role`` is ``"source"`` or ``"target"``.  For a target domain the train and
    val labels are stripped by :meth:`view` unless ``oracle=True``.  Test labels
    are always returned since the test split is only read for final evaluation.
    """

    domain_id: str
    num_classes: int
    train: TimeSeriesBatch
    val: TimeSeriesBatch
    test: TimeSeriesBatch
    role: str = "source"
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise ValueError(f"role must be 'source' or 'target', got {self.role!r}")

    def as_role(self, role: str) -> "DomainDataset":
        return dataclasses.replace(self, role=role)

    def view(self, split: str, *, oracle: bool = False, purpose: str = "") -> TimeSeriesBatch:
        if split not in SPLITS:
            raise KeyError(split)
        batch = getattr(self, split)
        if self.role == "source" or split == "test":
            return batch
        if not oracle:
            return batch.without_labels()
        _current_audit().record(self.domain_id, split, purpose or "oracle")
        return batch

    @property
    def channels(self) -> int:
        return self.train.channels

    @property
    def length(self) -> int:
        return self.train.length

    def all_labels(self, *, oracle: bool = False) -> np.ndarray:
        parts = [self.view(s, oracle=oracle, purpose="label census").labels for s in SPLITS]
        if any(p is None for p in parts):
            raise OracleAccessError(f"labels of target domain {self.domain_id!r} are masked")
        return np.concatenate(parts)

    def validate(self) -> list[str]:
        problems = []
        for split in SPLITS:
            batch = getattr(self, split)
            problems += [f"{split}: {p}" for p in validate_batch(batch, self.num_classes)]
        shapes = {getattr(self, s).values.shape[1:] for s in SPLITS}
        if len(shapes) != 1:
            problems.append(f"splits disagree on [C, T]: {sorted(shapes)}")
        return problems


@dataclass(frozen=True)
class Scenario:
    """An ordered (source, target) adaptation pair."""

    dataset_name: str
    source: DomainDataset
    target: DomainDataset

    def __post_init__(self):
        if self.source.num_classes != self.target.num_classes:
            raise ValueError("source and target disagree on the number of classes")
        if self.source.domain_id == self.target.domain_id:
            raise ValueError("source and target must be different domains")
        if self.source.role != "source":
            object.__setattr__(self, "source", self.source.as_role("source"))
        if self.target.role != "target":
            object.__setattr__(self, "target", self.target.as_role("target"))

    @property
    def scenario_id(self) -> str:
        return f"{self.dataset_name}:{self.source.domain_id}->{self.target.domain_id}"

    @property
    def num_classes(self) -> int:
        return self.source.num_classes


@dataclass(frozen=True)
class HyperParams:
    algorithm_id: str
    params: dict

    def __post_init__(self):
        if self.algorithm_id not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm_id!r}")
        alpha = self.params.get("alpha")
        if alpha is not None and not 0.5 < alpha < 1.0:
            raise ValueError(f"mixup ratio alpha must lie in (0.5, 1), got {alpha}")

    def __getitem__(self, key):
        return self.params[key]

    def get(self, key, default=None):
        return self.params.get(key, default)

    def to_dict(self) -> dict:
        return {"algorithm_id": self.algorithm_id, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, data: dict) -> "HyperParams":
        return cls(data["algorithm_id"], dict(data["params"]))


def _encode_float(x: float):
    if isinstance(x, float) and not math.isfinite(x):
        return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
    return x


def _decode_float(x):
    if isinstance(x, str) and x in ("inf", "-inf", "nan"):
        return float(x)
    return x


@dataclass(frozen=True)
class TrialRecord:
    trial_index: int
    hparams: HyperParams
    criterion: float
    trace: tuple
    wall_time: float
    status: str = "ok"
    oracle: bool = False
    error: str = ""

    def __post_init__(self):
        if self.status not in ("ok", "failed"):
            raise ValueError(f"bad status {self.status!r}")
        if self.status == "failed" and self.criterion != math.inf:
            object.__setattr__(self, "criterion", math.inf)
        object.__setattr__(self, "trace", tuple(float(v) for v in self.trace))

    def to_dict(self) -> dict:
        return {
            "kind": "trial",
            "trial_index": self.trial_index,
            "hparams": self.hparams.to_dict(),
            "criterion": _encode_float(self.criterion),
            "trace": [_encode_float(v) for v in self.trace],
            "wall_time": self.wall_time,
            "status": self.status,
            "oracle": self.oracle,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrialRecord":
        return cls(
            trial_index=data["trial_index"],
            hparams=HyperParams.from_dict(data["hparams"]),
            criterion=float(_decode_float(data["criterion"])),
            trace=tuple(float(_decode_float(v)) for v in data["trace"]),
            wall_time=data["wall_time"],
            status=data["status"],
            oracle=data.get("oracle", False),
            error=data.get("error", ""),
        )


@dataclass(frozen=True)
class EvaluationRecord:
    scenario_id: str
    algorithm_id: str
    tuner: str
    seed: int
    metrics: dict
    selected_epoch: int
    wall_time: float
    dataset_name: str = ""
    oracle: bool = False
    hparams: Optional[HyperParams] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tuner not in TUNERS:
            raise ValueError(f"unknown tuner {self.tuner!r}")
        for name in ("accuracy_source", "accuracy_target", "macro_f1_target"):
            v = self.metrics.get(name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    @property
    def key(self) -> tuple:
        return (self.dataset_name, self.scenario_id, self.algorithm_id, self.tuner, self.seed)

    def to_dict(self) -> dict:
        return {
            "kind": "evaluation",
            "dataset_name": self.dataset_name,
            "scenario_id": self.scenario_id,
            "algorithm_id": self.algorithm_id,
            "tuner": self.tuner,
            "seed": self.seed,
            "metrics": {k: _encode_float(v) for k, v in self.metrics.items()},
            "selected_epoch": self.selected_epoch,
            "wall_time": self.wall_time,
            "oracle": self.oracle,
            "hparams": None if self.hparams is None else self.hparams.to_dict(),
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvaluationRecord":
        hp = data.get("hparams")
        return cls(
            scenario_id=data["scenario_id"],
            algorithm_id=data["algorithm_id"],
            tuner=data["tuner"],
            seed=data["seed"],
            metrics={k: float(_decode_float(v)) for k, v in data["metrics"].items()},
            selected_epoch=data["selected_epoch"],
            wall_time=data["wall_time"],
            dataset_name=data.get("dataset_name", ""),
            oracle=data.get("oracle", False),
            hparams=None if hp is None else HyperParams.from_dict(hp),
            extra=data.get("extra", {}),
        )


def record_from_dict(data: dict):
    kind = data.get("kind")
    if kind == "trial":
        return TrialRecord.from_dict(data)
    if kind == "evaluation":
        return EvaluationRecord.from_dict(data)
    raise ValueError(f"unknown record kind {kind!r}")


class RecordLog:
    """Append-only JSON-lines log of trial and evaluation records."""

    def __init__(self, path):
        self.path = Path(path)

    def append(self, record) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        line = json.dumps(record.to_dict(), sort_keys=True)
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    def scan(self) -> list:
        if not self.path.exists():
            return []
        with self.path.open(encoding="utf-8") as fh:
            return [record_from_dict(json.loads(line)) for line in fh if line.strip()]


@dataclass(frozen=True)
class ScoreMatrix:
    """Accuracy table: rows are methods (algorithm/tuner), columns scenarios."""

    rows: tuple
    columns: tuple
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "rows", tuple(self.rows))
        object.__setattr__(self, "columns", tuple(self.columns))
        if values.shape != (len(self.rows), len(self.columns)):
            raise ValueError(
                f"values shape {values.shape} != ({len(self.rows)}, {len(self.columns)})"
            )
        object.__setattr__(self, "values", values)

    @property
    def complete(self) -> bool:
        return bool(np.isfinite(self.values).all())

    def missing(self) -> list[tuple]:
        return [(self.rows[i], self.columns[j]) for i, j in np.argwhere(~np.isfinite(self.values))]

    def to_dict(self) -> dict[str, Any]:
        return {
            "rows": list(self.rows),
            "columns": list(self.columns),
            "values": [[_encode_float(float(v)) for v in row] for row in self.values],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScoreMatrix":
        values = [[float(_decode_float(v)) for v in row] for row in data["values"]]
        return cls(tuple(data["rows"]), tuple(data["columns"]),
                   np.array(values, dtype=float).reshape(len(data["rows"]), len(data["columns"])))

    def __eq__(self, other):
        if not isinstance(other, ScoreMatrix):
            return NotImplemented
        return (self.rows == other.rows and self.columns == other.columns
                and np.array_equal(self.values, other.values, equal_nan=True))

    __hash__ = None
