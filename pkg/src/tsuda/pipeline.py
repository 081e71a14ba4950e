"""Experiment configuration, the five-stage run loop, result analysis and reports.

Stages per (dataset, scenario, algorithm, tuner, seed) key: load and
preprocess, tune, retrain the chosen configuration, select the checkpoint,
evaluate.  Every key writes its own JSON-lines file, so interrupted runs
resume by skipping keys that already hold an evaluation record.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import re
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from itertools import combinations, permutations
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np
import torch

from . import metrics
from .algorithms import predict, train
from .datamodel import (ALGORITHMS, EvaluationRecord, RecordLog, Scenario, ScoreMatrix,
                        TrialRecord, audit_scope)
from .datasets import (SplitPolicy, SyntheticSpec, generate_synthetic_scenario, load_domain,
                       preprocess_scenario)
from .selection import make_criterion, select_checkpoint, tune

log = logging.getLogger(__name__)

OUTPUT_ENV = "UDA_BENCH_OUTPUT"
DEFAULT_MAX_SCENARIOS = 5
FLOAT_DIGITS = 6


class ConfigError(ValueError):
    pass


class AnalysisError(RuntimeError):
    pass


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    text = resources.files("tsuda").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


# -- configuration --------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    datasets: tuple
    algorithms: tuple
    tuners: tuple
    epochs: int
    seeds: tuple
    trials: Optional[int] = None
    tuning_seconds: Optional[float] = None
    trial_seconds: Optional[float] = None
    name: str = "experiment"
    znormalize: bool = True
    resample: Optional[int] = None
    split: dict = field(default_factory=dict)
    search_spaces: dict = field(default_factory=dict)
    fixed_params: dict = field(default_factory=dict)
    max_scenarios: int = DEFAULT_MAX_SCENARIOS
    iwcv_components: int = 5
    iwcv_clip: Optional[float] = 10.0
    output: Optional[str] = None
    parallel: int = 1

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        errors = validate_config(data)
        if errors:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
        budgets = data["budgets"]
        prep = data.get("preprocessing", {})
        iw = data.get("iwcv", {})
        return cls(
            datasets=tuple(data["datasets"]),
            algorithms=tuple(data["algorithms"]),
            tuners=tuple(data["tuners"]),
            epochs=budgets["epochs"],
            seeds=tuple(data["seeds"]),
            trials=budgets.get("trials"),
            tuning_seconds=budgets.get("tuning_seconds"),
            trial_seconds=budgets.get("trial_seconds"),
            name=data.get("name", "experiment"),
            znormalize=prep.get("znormalize", True),
            resample=prep.get("resample"),
            split=dict(data.get("split", {})),
            search_spaces=dict(data.get("search_spaces", {})),
            fixed_params=dict(data.get("fixed_params", {})),
            max_scenarios=data.get("max_scenarios", DEFAULT_MAX_SCENARIOS),
            iwcv_components=iw.get("components", 5),
            iwcv_clip=iw.get("clip", 10.0),
            output=data.get("output"),
            parallel=data.get("parallel", 1),
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        budgets = {"epochs": self.epochs}
        for key in ("trials", "tuning_seconds", "trial_seconds"):
            if getattr(self, key) is not None:
                budgets[key] = getattr(self, key)
        data = {
            "name": self.name,
            "datasets": list(self.datasets),
            "preprocessing": {"znormalize": self.znormalize, "resample": self.resample},
            "split": self.split,
            "algorithms": list(self.algorithms),
            "tuners": list(self.tuners),
            "budgets": budgets,
            "search_spaces": self.search_spaces,
            "fixed_params": self.fixed_params,
            "seeds": list(self.seeds),
            "max_scenarios": self.max_scenarios,
            "iwcv": {"components": self.iwcv_components, "clip": self.iwcv_clip},
            "parallel": self.parallel,
        }
        if self.output is not None:
            data["output"] = self.output
        return data

    def with_seed_offset(self, offset: int) -> "ExperimentConfig":
        data = self.to_dict()
        data["seeds"] = [s + offset for s in self.seeds]
        return ExperimentConfig.from_dict(data)


def validate_config(data) -> list[str]:
    """Schema errors plus semantic checks, as readable messages."""
    validator = jsonschema.Draft202012Validator(load_schema("config"))
    errors = [f"{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}"
              for e in sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))]
    if errors:
        return errors
    names = [d["name"] for d in data["datasets"]]
    if len(set(names)) != len(names):
        errors.append("datasets: names must be unique")
    for entry in data["datasets"]:
        if "synthetic" in entry:
            try:
                SyntheticSpec.from_dict(entry["synthetic"])
            except (TypeError, ValueError) as exc:
                errors.append(f"datasets/{entry['name']}/synthetic: {exc}")
    if "split" in data and "ratios" in data["split"]:
        try:
            SplitPolicy(ratios=tuple(data["split"]["ratios"]))
        except ValueError as exc:
            errors.append(f"split/ratios: {exc}")
    for alg in list(data.get("search_spaces", {})) + list(data.get("fixed_params", {})):
        if alg not in ALGORITHMS:
            errors.append(f"search space or fixed params for unknown algorithm {alg!r}")
    return errors


def resolve_output(cli_output: Optional[str], config: Optional[ExperimentConfig] = None) -> Path:
    out = cli_output or (config.output if config else None) or os.environ.get(OUTPUT_ENV)
    if not out:
        raise ConfigError(f"no output directory: pass --output, set it in the config or set {OUTPUT_ENV}")
    return Path(out)


# -- scenario loading -----------------------------------------------------


@dataclass(frozen=True)
class RunKey:
    dataset: str
    scenario: str
    algorithm: str
    tuner: str
    seed: int

    @property
    def slug(self) -> str:
        raw = f"{self.dataset}__{self.scenario}__{self.algorithm}__{self.tuner}__s{self.seed}"
        return re.sub(r"[^A-Za-z0-9_.=-]+", "-", raw.replace("->", "_to_"))

    def as_tuple(self) -> tuple:
        return (self.dataset, self.scenario, self.algorithm, self.tuner, self.seed)


def _split_policy(config: ExperimentConfig) -> SplitPolicy:
    split = config.split
    return SplitPolicy(ratios=tuple(split.get("ratios", SplitPolicy().ratios)),
                       causal=split.get("causal", True), seed=split.get("seed", 0))


def scenario_pairs(entry: dict, max_scenarios: int = DEFAULT_MAX_SCENARIOS) -> list[tuple]:
    """Source/target domain pairs of a dataset entry, subsampled deterministically."""
    if "synthetic" in entry:
        return [("source", "target")]
    if "scenarios" in entry:
        pairs = [tuple(p) for p in entry["scenarios"]]
    else:
        domains = entry.get("domains") or sorted(
            p.name for p in Path(entry["path"]).iterdir() if (p / "meta.json").exists())
        pairs = list(permutations(domains, 2))
    if len(pairs) > max_scenarios:
        rng = np.random.default_rng(abs(hash_name(entry["name"])))
        keep = sorted(rng.choice(len(pairs), size=max_scenarios, replace=False))
        pairs = [pairs[i] for i in keep]
    return pairs


def hash_name(name: str) -> int:
    # stable across processes, unlike hash()
    return int.from_bytes(name.encode()[:8].ljust(8, b"\0"), "little") % (2 ** 31)


def load_scenario(entry: dict, pair: tuple, config: ExperimentConfig) -> Scenario:
    """Stage 1-2: read or generate the two domains, split and preprocess them."""
    policy = _split_policy(config)
    if "synthetic" in entry:
        spec = SyntheticSpec.from_dict({**entry["synthetic"], "name": entry["name"]})
        scenario = generate_synthetic_scenario(spec, entry.get("seed", 0), policy)
        scenario = Scenario(entry["name"], scenario.source, scenario.target)
    else:
        root = Path(entry["path"])
        source = load_domain(root / pair[0], policy, "source")
        target = load_domain(root / pair[1], policy, "target")
        scenario = Scenario(entry["name"], source, target)
    scenario, _ = preprocess_scenario(scenario, znorm=config.znormalize, new_length=config.resample)
    return scenario


def run_keys(config: ExperimentConfig) -> list[RunKey]:
    keys = []
    for entry in config.datasets:
        for src, tgt in scenario_pairs(entry, config.max_scenarios):
            scenario_id = f"{entry['name']}:{src}->{tgt}"
            for alg in config.algorithms:
                for tuner in config.tuners:
                    for seed in config.seeds:
                        keys.append(RunKey(entry["name"], scenario_id, alg, tuner, seed))
    return keys


# -- results store --------------------------------------------------------


class ResultsStore:
    """One JSON-lines file per run key under ``<root>/records``."""

    def __init__(self, root):
        self.root = Path(root)
        self.records_dir = self.root / "records"
        self.errors_dir = self.root / "errors"

    def path(self, key: RunKey) -> Path:
        return self.records_dir / f"{key.slug}.jsonl"

    def is_complete(self, key: RunKey) -> bool:
        path = self.path(key)
        if not path.exists():
            return False
        return any(isinstance(r, EvaluationRecord) for r in RecordLog(path).scan())

    def start(self, key: RunKey) -> RecordLog:
        self.records_dir.mkdir(parents=True, exist_ok=True)
        path = self.path(key)
        path.write_text("")
        err = self.errors_dir / f"{key.slug}.json"
        if err.exists():
            err.unlink()
        return RecordLog(path)

    def write_error(self, key: RunKey, stage: str, exc: BaseException) -> None:
        self.errors_dir.mkdir(parents=True, exist_ok=True)
        payload = {"key": list(key.as_tuple()), "stage": stage,
                   "error": f"{type(exc).__name__}: {exc}",
                   "traceback": traceback.format_exception(exc)}
        (self.errors_dir / f"{key.slug}.json").write_text(json.dumps(payload, indent=2))

    def errors(self) -> list[dict]:
        if not self.errors_dir.exists():
            return []
        return [json.loads(p.read_text()) for p in sorted(self.errors_dir.glob("*.json"))]

    def evaluations(self) -> list[EvaluationRecord]:
        out = []
        if not self.records_dir.exists():
            return out
        for path in sorted(self.records_dir.glob("*.jsonl")):
            out.extend(r for r in RecordLog(path).scan() if isinstance(r, EvaluationRecord))
        return out

    def trials(self, key: RunKey) -> list[TrialRecord]:
        return [r for r in RecordLog(self.path(key)).scan() if isinstance(r, TrialRecord)]


# -- running --------------------------------------------------------------


def evaluate(model, scenario: Scenario) -> dict:
    """Stage 5: accuracy on both test splits and target macro-F1."""
    k = scenario.num_classes
    src, tgt = scenario.source.view("test"), scenario.target.view("test")
    pred_s = predict(model, src.values).argmax(axis=1)
    pred_t = predict(model, tgt.values).argmax(axis=1)
    return {
        "accuracy_source": metrics.accuracy(pred_s, src.labels),
        "accuracy_target": metrics.accuracy(pred_t, tgt.labels),
        "macro_f1_target": metrics.macro_f1(pred_t, tgt.labels, k),
    }


def run_key(config: ExperimentConfig, key: RunKey, store: ResultsStore,
            scenario: Optional[Scenario] = None) -> EvaluationRecord:
    """All five stages for one key; trial records are appended as they finish."""
    torch.set_num_threads(1)
    start = time.perf_counter()
    record_log = store.start(key)
    stage = "load"
    try:
        if scenario is None:
            entry = next(d for d in config.datasets if d["name"] == key.dataset)
            pair = tuple(key.scenario.split(":", 1)[1].split("->"))
            scenario = load_scenario(entry, pair, config)
        with audit_scope() as audit:
            stage = "tune"
            criterion = make_criterion(key.tuner, scenario, k=config.iwcv_components,
                                       seed=key.seed, clip=config.iwcv_clip)
            result = tune(key.algorithm, scenario, config.search_spaces.get(key.algorithm),
                          criterion, n_trials=config.trials,
                          tuning_budget=config.tuning_seconds, epochs=config.epochs,
                          trial_wall=config.trial_seconds, seed=key.seed,
                          fixed_params=config.fixed_params.get(key.algorithm))
            for trial in result.trials:
                record_log.append(trial)
            stage = "retrain"
            trained = train(key.algorithm, scenario, result.best, key.seed, config.epochs,
                            config.trial_seconds, criterion)
            if trained.failed:
                raise RuntimeError(f"retraining failed: {trained.error}")
            stage = "select"
            epoch = select_checkpoint(trained.trace)
            model = trained.load_epoch(epoch)
            stage = "evaluate"
            scores = evaluate(model, scenario)
            oracle_entries = audit.entries
        scores.update({f"loss_{k}": v for k, v in trained.checkpoints[epoch].losses.items()})
        scores["criterion"] = trained.trace[epoch]
        src_labels = scenario.source.all_labels()
        tgt_labels = scenario.target.view("test").labels
        k = scenario.num_classes
        extra = {
            "oracle_accesses": oracle_entries,
            "source_imbalance": metrics.imbalance_score(src_labels, k)[0] if k > 1 else 1.0,
            "target_imbalance": metrics.imbalance_score(tgt_labels, k)[0] if k > 1 else 1.0,
            "best_trial": result.best_index,
        }
        record = EvaluationRecord(key.scenario, key.algorithm, key.tuner, key.seed, scores, epoch,
                                  time.perf_counter() - start, key.dataset,
                                  oracle=bool(oracle_entries), hparams=result.best, extra=extra)
        record_log.append(record)
        return record
    except Exception as exc:
        log.error("%s failed in stage %s: %s", key.slug, stage, exc)
        store.write_error(key, stage, exc)
        raise


def _worker(config_dict: dict, key_tuple: tuple, root: str) -> tuple:
    config = ExperimentConfig.from_dict(config_dict)
    key = RunKey(*key_tuple)
    try:
        run_key(config, key, ResultsStore(root))
        return key_tuple, "done", ""
    except Exception as exc:
        return key_tuple, "error", f"{type(exc).__name__}: {exc}"


@dataclass
class RunSummary:
    done: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    errors: list = field(default_factory=list)


def run(config: ExperimentConfig, output=None, *, parallel: Optional[int] = None,
        force: bool = False) -> RunSummary:
    """Execute every key of the config, skipping completed ones unless ``force``."""
    root = Path(output) if output is not None else resolve_output(None, config)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    store = ResultsStore(root)
    summary = RunSummary()
    pending = []
    for key in run_keys(config):
        if not force and store.is_complete(key):
            summary.skipped.append(key.as_tuple())
        else:
            pending.append(key)
    workers = parallel or config.parallel
    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_worker, config.to_dict(), k.as_tuple(), str(root))
                       for k in pending]
            for fut in futures:
                key_tuple, status, err = fut.result()
                (summary.done if status == "done" else summary.errors).append(
                    key_tuple if status == "done" else (key_tuple, err))
        return summary
    cache: dict = {}
    for key in pending:
        try:
            if key.scenario not in cache:
                entry = next(d for d in config.datasets if d["name"] == key.dataset)
                pair = tuple(key.scenario.split(":", 1)[1].split("->"))
                cache[key.scenario] = load_scenario(entry, pair, config)
            run_key(config, key, store, cache[key.scenario])
            summary.done.append(key.as_tuple())
        except Exception as exc:
            if key.scenario not in cache:
                store.write_error(key, "load", exc)
            summary.errors.append((key.as_tuple(), f"{type(exc).__name__}: {exc}"))
    return summary


# -- analysis -------------------------------------------------------------


def _method_name(algorithm: str, tuner: str) -> str:
    return f"{algorithm} [{tuner}]"


def _cell_means(records: list[EvaluationRecord], metric: str) -> dict:
    cells: dict = {}
    for r in records:
        cells.setdefault((r.algorithm_id, r.tuner, r.scenario_id), []).append(r.metrics[metric])
    return {k: float(np.mean(v)) for k, v in cells.items()}


def _expected_keys(root: Path) -> Optional[list[RunKey]]:
    path = root / "config.json"
    if not path.exists():
        return None
    return run_keys(ExperimentConfig.from_dict(json.loads(path.read_text())))


def _mean_std(values) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return float(values.mean()), std


def analyze(results_dir, metric: str = "accuracy_target") -> dict:
    """Score matrices, summary tables, rank statistics and pairwise tests.

    Raises ``AnalysisError`` listing missing keys if any algorithm/tuner lacks
    a result for some scenario.
    """
    root = Path(results_dir)
    store = ResultsStore(root)
    records = store.evaluations()
    if not records:
        raise AnalysisError(f"no evaluation records under {root}")
    expected = _expected_keys(root)
    if expected is not None:
        have = {r.key for r in records}
        missing = [k.as_tuple() for k in expected if k.as_tuple() not in have]
        if missing:
            raise AnalysisError("incomplete results, missing keys:\n  " +
                                "\n  ".join(map(str, missing)))

    algorithms = sorted({r.algorithm_id for r in records})
    tuners = sorted({r.tuner for r in records})
    scenarios = sorted({r.scenario_id for r in records})
    means = _cell_means(records, metric)
    missing = [(a, t, s) for a in algorithms for t in tuners for s in scenarios
               if (a, t, s) not in means]
    if missing:
        raise AnalysisError("ragged score matrix, missing keys:\n  " +
                            "\n  ".join(map(str, missing)))

    notices: list[str] = []
    matrices = {}
    for t in tuners:
        values = np.array([[means[(a, t, s)] for s in scenarios] for a in algorithms])
        matrices[t] = ScoreMatrix(tuple(algorithms), tuple(scenarios), values)
    methods = [(a, t) for a in algorithms for t in tuners]
    names = [_method_name(a, t) for a, t in methods]
    combined = ScoreMatrix(tuple(names), tuple(scenarios),
                           np.array([[means[(a, t, s)] for s in scenarios] for a, t in methods]))

    by_algorithm = []
    for a in algorithms:
        row = {"algorithm": a}
        for t in tuners:
            row[t] = _mean_std([means[(a, t, s)] for s in scenarios])
        by_algorithm.append(row)

    dataset_of = {r.scenario_id: r.dataset_name for r in records}
    by_dataset = []
    for d in sorted(set(dataset_of.values())):
        row = {"dataset": d}
        for t in tuners:
            row[t] = _mean_std([means[(a, t, s)] for a in algorithms for s in scenarios
                                if dataset_of[s] == d])
        by_dataset.append(row)

    ranks = metrics.average_ranks(combined) if len(names) > 1 else np.ones(1)
    friedman = {}
    diagrams = []
    for label, matrix in [("all", combined)] + [(t, m) for t, m in matrices.items()]:
        try:
            stat, p, r = metrics.friedman_test(matrix)
            friedman[label] = {"statistic": stat, "p_value": p}
            diagrams.append(metrics.cd_diagram_data(r, matrix.rows, (stat, p), title=label))
        except ValueError as exc:
            notices.append(f"Friedman test skipped for {label}: {exc}")
            if len(matrix.rows) > 1:
                diagrams.append(metrics.cd_diagram_data(metrics.average_ranks(matrix),
                                                        matrix.rows, title=label))

    pairwise = []
    for i, j in combinations(range(len(names)), 2):
        a, b = combined.values[i], combined.values[j]
        entry = {"a": names[i], "b": names[j], "points": [[float(x), float(y)] for x, y in zip(a, b)]}
        try:
            p, w, t, l = metrics.wilcoxon_signed_rank(a, b)
            entry.update(p_value=p, wins=w, ties=t, losses=l)
        except ValueError as exc:
            d = np.asarray(a) - np.asarray(b)
            entry.update(p_value=None, wins=int((d > 0).sum()), ties=int((d == 0).sum()),
                         losses=int((d < 0).sum()), note=str(exc))
        pairwise.append(entry)

    shift = _shift_rows(records, scenarios, notices)
    sp_points = []
    for row in shift:
        if row["shift_proxy"] is None:
            continue
        for a, t in methods:
            sp_points.append({"scenario": row["scenario"], "algorithm": a, "tuner": t,
                              "shift_proxy": row["shift_proxy"],
                              "accuracy": means[(a, t, row["scenario"])]})

    return {
        "metric": metric,
        "algorithms": algorithms,
        "tuners": tuners,
        "scenarios": scenarios,
        "oracle_tuners": sorted({r.tuner for r in records if r.oracle}),
        "score_matrices": {t: m.to_dict() for t, m in matrices.items()},
        "combined": combined.to_dict(),
        "by_algorithm": by_algorithm,
        "by_dataset": by_dataset,
        "average_ranks": [{"method": n, "average_rank": float(r)} for n, r in zip(names, ranks)],
        "friedman": friedman,
        "cd_diagrams": diagrams,
        "pairwise": pairwise,
        "shift_imbalance": shift,
        "sp_vs_accuracy": sp_points,
        "errors": store.errors(),
        "notices": notices,
    }


def _shift_rows(records, scenarios, notices) -> list[dict]:
    """Shift proxy from the non-adapted model and class imbalance, per scenario."""
    rows = []
    for s in scenarios:
        base = [r for r in records if r.scenario_id == s and r.algorithm_id == "SourceOnly"]
        preferred = [r for r in base if r.tuner == "SourceRisk"] or base
        any_rec = next(r for r in records if r.scenario_id == s)
        row = {"scenario": s, "shift_proxy": None,
               "source_imbalance": any_rec.extra.get("source_imbalance"),
               "target_imbalance": any_rec.extra.get("target_imbalance")}
        if preferred:
            acc_s = float(np.mean([r.metrics["accuracy_source"] for r in preferred]))
            acc_t = float(np.mean([r.metrics["accuracy_target"] for r in preferred]))
            try:
                row["shift_proxy"] = metrics.shift_proxy(acc_s, acc_t)
            except ValueError as exc:
                notices.append(f"shift proxy undefined for {s}: {exc}")
        else:
            notices.append(f"shift proxy for {s} needs SourceOnly results")
        for key in ("source_imbalance", "target_imbalance"):
            if row[key] is not None:
                row[key + "_high"] = row[key] < 0.95
        rows.append(row)
    return rows


# -- reporting ------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(x).lower()
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        return f"{x:.{FLOAT_DIGITS}f}"
    return str(x)


def _csv_text(header: list, rows: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _label(tuner: str, oracle_tuners) -> str:
    return f"{tuner} (oracle)" if tuner in oracle_tuners else tuner


def table_csvs(bundle: dict) -> dict[str, str]:
    """Deterministic CSV text of every table, keyed by file name."""
    tuners, oracle = bundle["tuners"], bundle["oracle_tuners"]
    out = {}
    header = ["algorithm"] + [f"{_label(t, oracle)} {part}" for t in tuners for part in ("mean", "std")]
    out["accuracy_by_algorithm.csv"] = _csv_text(
        header, [[r["algorithm"]] + [v for t in tuners for v in r[t]] for r in bundle["by_algorithm"]])
    header[0] = "dataset"
    out["accuracy_by_dataset.csv"] = _csv_text(
        header, [[r["dataset"]] + [v for t in tuners for v in r[t]] for r in bundle["by_dataset"]])
    combined = ScoreMatrix.from_dict(bundle["combined"])
    out["scores.csv"] = _csv_text(["method"] + list(combined.columns),
                                  [[n] + list(map(float, v)) for n, v in zip(combined.rows, combined.values)])
    out["average_ranks.csv"] = _csv_text(
        ["method", "average_rank"], [[r["method"], r["average_rank"]] for r in bundle["average_ranks"]])
    out["pairwise.csv"] = _csv_text(
        ["a", "b", "p_value", "wins", "ties", "losses"],
        [[p["a"], p["b"], p["p_value"], p["wins"], p["ties"], p["losses"]] for p in bundle["pairwise"]])
    out["shift_imbalance.csv"] = _csv_text(
        ["scenario", "shift_proxy", "source_imbalance", "target_imbalance"],
        [[r["scenario"], r["shift_proxy"], r["source_imbalance"], r["target_imbalance"]]
         for r in bundle["shift_imbalance"]])
    return out


def plot_records(bundle: dict) -> dict[str, dict]:
    plots = {}
    for d in bundle["cd_diagrams"]:
        plots[f"ranks_{re.sub(r'[^A-Za-z0-9]+', '_', d['title'])}.json"] = d
    plots["shift_vs_accuracy.json"] = {"kind": "shift_vs_accuracy", "points": bundle["sp_vs_accuracy"]}
    for i, p in enumerate(bundle["pairwise"]):
        rec = {"kind": "pairwise_comparison", "x_label": p["a"], "y_label": p["b"],
               "points": p["points"], "p_value": p["p_value"],
               "wins": p["wins"], "ties": p["ties"], "losses": p["losses"]}
        plots[f"pairwise_{i:03d}.json"] = rec
    return plots


def validate_plot(record: dict) -> None:
    jsonschema.validate(record, load_schema("plot_data"))


def summary_markdown(bundle: dict) -> str:
    tuners, oracle = bundle["tuners"], bundle["oracle_tuners"]
    lines = [f"# Results ({bundle['metric']})", ""]
    if oracle:
        lines += [f"Rows or columns marked (oracle) used target labels for selection: "
                  f"{', '.join(oracle)}.", ""]
    lines += ["## By algorithm", "",
              "| algorithm | " + " | ".join(_label(t, oracle) for t in tuners) + " |",
              "|---" * (len(tuners) + 1) + "|"]
    for r in bundle["by_algorithm"]:
        lines.append(f"| {r['algorithm']} | " +
                     " | ".join(f"{r[t][0]:.3f} ± {r[t][1]:.3f}" for t in tuners) + " |")
    lines += ["", "## Average ranks", "", "| method | rank |", "|---|---|"]
    for r in sorted(bundle["average_ranks"], key=lambda r: (r["average_rank"], r["method"])):
        method = r["method"]
        if any(method.endswith(f"[{t}]") for t in oracle):
            method += " (oracle)"
        lines.append(f"| {method} | {r['average_rank']:.3f} |")
    if bundle["friedman"]:
        lines += ["", "## Friedman tests", ""]
        for label, f in bundle["friedman"].items():
            lines.append(f"- {label}: chi2 = {f['statistic']:.4f}, p = {f['p_value']:.4g}")
    if bundle["notices"]:
        lines += ["", "## Notices", ""] + [f"- {n}" for n in bundle["notices"]]
    if bundle["errors"]:
        lines += ["", "## Failed runs", ""] + [f"- {e['key']}: {e['stage']}: {e['error']}"
                                              for e in bundle["errors"]]
    return "\n".join(lines) + "\n"


def report(bundle: dict, out_dir) -> list[Path]:
    """Write CSV tables, schema-checked plot JSON and a markdown summary."""
    out = Path(out_dir)
    (out / "tables").mkdir(parents=True, exist_ok=True)
    (out / "plots").mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in table_csvs(bundle).items():
        path = out / "tables" / name
        path.write_text(text)
        written.append(path)
    for name, rec in plot_records(bundle).items():
        validate_plot(rec)
        path = out / "plots" / name
        path.write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
        written.append(path)
    path = out / "summary.md"
    path.write_text(summary_markdown(bundle))
    written.append(path)
    return written


__all__ = [
    "AnalysisError", "ConfigError", "ExperimentConfig", "ResultsStore", "RunKey", "RunSummary",
    "analyze", "evaluate", "load_scenario", "report", "resolve_output", "run", "run_key",
    "run_keys", "scenario_pairs", "validate_config", "validate_plot",
]
