"""Label-free model selection and the budgeted random search."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from .algorithms import ALGORITHM_SPECS, COMMON_DEFAULTS, METHOD_DEFAULTS, TrainedModel, predict, train
from .datamodel import (HyperParams, OracleAccessError, Scenario, TimeSeriesBatch, TrialRecord)

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6
PROB_FLOOR = 1e-12


class TuningError(RuntimeError):
    pass


def _losses(model, batch: TimeSeriesBatch) -> np.ndarray:
    if batch.n == 0:
        raise ValueError("empty validation split")
    if batch.labels is None:
        raise ValueError("validation split has no labels")
    probs = predict(model, batch)
    picked = probs[np.arange(batch.n), batch.labels]
    return -np.log(np.maximum(picked, PROB_FLOOR))


def source_risk(model, source_val: TimeSeriesBatch) -> float:
    """Mean cross-entropy on the labeled source validation split."""
    return float(_losses(model, source_val).mean())


def target_risk(model, target, *, oracle: bool = False) -> float:
    """Mean cross-entropy on the target validation split (oracle only)."""
    if not oracle:
        raise OracleAccessError("TargetRisk reads target labels; pass oracle=True")
    batch = target.view("val", oracle=True, purpose="TargetRisk") if hasattr(target, "view") else target
    return float(_losses(model, batch).mean())


# -- density estimation ---------------------------------------------------


def summary_features(batch, n_bins: int = 8) -> np.ndarray:
    """Per channel: mean, std and the first ``n_bins`` rFFT magnitudes."""
    x = batch.values if isinstance(batch, TimeSeriesBatch) else np.asarray(batch)
    x = x.astype(np.float64)
    mags = np.abs(np.fft.rfft(x, axis=-1))[..., :n_bins]
    if mags.shape[-1] < n_bins:
        mags = np.pad(mags, [(0, 0), (0, 0), (0, n_bins - mags.shape[-1])])
    feats = np.concatenate([x.mean(-1, keepdims=True), x.std(-1, keepdims=True), mags], axis=-1)
    return feats.reshape(len(x), -1)


@dataclass
class DensityModel:
    """Diagonal Gaussian mixture over a fixed feature representation."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    domain: str = ""
    n_bins: int = 8
    log_likelihood_trace: list = field(default_factory=list)

    @property
    def n_features(self) -> int:
        return self.means.shape[1]

    def _component_logpdf(self, feats: np.ndarray) -> np.ndarray:
        diff = feats[:, None, :] - self.means[None]
        return -0.5 * (np.log(2 * np.pi * self.variances)[None]
                       + diff ** 2 / self.variances[None]).sum(-1)

    def score_features(self, feats: np.ndarray) -> np.ndarray:
        if feats.shape[1] != self.n_features:
            raise ValueError(f"representation mismatch: {feats.shape[1]} features, "
                             f"density expects {self.n_features}")
        return logsumexp(self._component_logpdf(feats) + np.log(self.weights)[None], axis=1)

    def log_density(self, batch) -> np.ndarray:
        return self.score_features(summary_features(batch, self.n_bins))


def fit_gmm(feats: np.ndarray, k: int = 5, seed: int = 0, max_iter: int = 200,
            tol: float = 1e-8, var_floor: float = VAR_FLOOR) -> DensityModel:
    """EM for a diagonal GMM; means start at ``k`` distinct random samples."""
    feats = np.asarray(feats, dtype=np.float64)
    n, dim = feats.shape
    if n < k:
        raise ValueError(f"need at least k={k} samples, got {n}")
    rng = np.random.default_rng(seed)
    means = feats[rng.choice(n, size=k, replace=False)].copy()
    variances = np.tile(np.maximum(feats.var(0), var_floor), (k, 1))
    weights = np.full(k, 1.0 / k)
    gmm = DensityModel(weights, means, variances)
    trace = []
    for _ in range(max_iter):
        joint = gmm._component_logpdf(feats) + np.log(gmm.weights)[None]
        norm = logsumexp(joint, axis=1)
        trace.append(float(norm.mean()))
        if len(trace) > 1 and trace[-1] - trace[-2] < tol * max(1.0, abs(trace[-2])):
            break
        resp = np.exp(joint - norm[:, None])
        nk = resp.sum(0) + 1e-300
        weights = nk / n
        means = resp.T @ feats / nk[:, None]
        variances = resp.T @ feats ** 2 / nk[:, None] - means ** 2
        variances = np.maximum(variances, var_floor)
        gmm = DensityModel(weights / weights.sum(), means, variances)
    gmm.log_likelihood_trace = trace
    return gmm


def fit_density(train_x, k: int = 5, seed: int = 0, n_bins: int = 8, domain: str = "",
                **kwargs) -> DensityModel:
    gmm = fit_gmm(summary_features(train_x, n_bins), k, seed, **kwargs)
    gmm.domain, gmm.n_bins = domain, n_bins
    return gmm


def importance_weights(batch, rho_source: DensityModel, rho_target: DensityModel,
                       clip: Optional[float] = 10.0) -> np.ndarray:
    if rho_source.n_features != rho_target.n_features:
        raise ValueError("source and target densities use different representations")
    w = np.exp(rho_target.log_density(batch) - rho_source.log_density(batch))
    if clip is not None:
        w = np.clip(w, 1.0 / clip, clip)
    return w


def weighted_risk(losses: np.ndarray, weights: np.ndarray) -> float:
    return float(np.mean(np.asarray(weights) * np.asarray(losses)))


def iwcv(model, source_val: TimeSeriesBatch, rho_source: Optional[DensityModel] = None,
         rho_target: Optional[DensityModel] = None, clip: Optional[float] = 10.0,
         weights: Optional[np.ndarray] = None) -> float:
    """Importance-weighted source validation cross-entropy.

    ``weights`` overrides the density ratio when given.
    """
    if weights is None:
        weights = importance_weights(source_val, rho_source, rho_target, clip)
    return weighted_risk(_losses(model, source_val), weights)


# -- criteria -------------------------------------------------------------


class Criterion:
    """Callable ``model -> float``, lower is better."""

    direction = "min"

    def __init__(self, kind: str, fn: Callable, oracle: bool = False):
        self.kind, self._fn, self.oracle = kind, fn, oracle

    def __call__(self, model) -> float:
        return self._fn(model)


def make_criterion(kind: str, scenario: Scenario, *, k: int = 5, seed: int = 0,
                   clip: Optional[float] = 10.0) -> Criterion:
    source_val = scenario.source.view("val")
    if kind == "SourceRisk":
        return Criterion(kind, lambda m: source_risk(m, source_val))
    if kind == "TargetRisk":
        target_val = scenario.target.view("val", oracle=True, purpose="TargetRisk tuning")
        return Criterion(kind, lambda m: target_risk(m, target_val, oracle=True), oracle=True)
    if kind == "IWCV":
        rho_s = fit_density(scenario.source.view("train"), k, seed, domain=scenario.source.domain_id)
        rho_t = fit_density(scenario.target.view("train"), k, seed, domain=scenario.target.domain_id)
        weights = importance_weights(source_val, rho_s, rho_t, clip)
        return Criterion(kind, lambda m: iwcv(m, source_val, weights=weights))
    raise ValueError(f"unknown criterion {kind!r}")


def select_checkpoint(trace) -> int:
    """Index of the smallest criterion value; earliest epoch wins ties."""
    trace = list(trace)
    if not trace:
        raise ValueError("empty criterion trace")
    return int(np.argmin(np.asarray(trace, dtype=float)))


# -- search spaces --------------------------------------------------------

COMMON_SPACE = {
    "lr": {"type": "float", "bounds": [3e-4, 3e-3], "scale": "log"},
    "batch_size": {"type": "choice", "values": [32, 64]},
    "width_mult": {"type": "choice", "values": [0.5, 1.0]},
}
METHOD_SPACES = {
    "source_only": {},
    "dann": {"lambda": {"type": "float", "bounds": [0.01, 1.0], "scale": "log"}},
    "cdan": {"lambda": {"type": "float", "bounds": [0.01, 1.0], "scale": "log"},
             "cdan_mode": {"type": "choice", "values": ["outer", "randomized"]},
             "entropy_conditioning": {"type": "choice", "values": [False, True]}},
    "vrada": {"lambda": {"type": "float", "bounds": [0.01, 1.0], "scale": "log"}},
    "cotmix": {"lambda": {"type": "float", "bounds": [0.01, 1.0], "scale": "log"},
               "tau": {"type": "float", "bounds": [0.05, 1.0], "scale": "log"},
               "alpha": {"type": "float", "bounds": [0.55, 0.95], "scale": "linear"},
               "half_window": {"type": "int", "bounds": [1, 8], "scale": "linear"}},
    "raincoat": {"sinkhorn_eps": {"type": "float", "bounds": [0.01, 1.0], "scale": "log"}},
}


def default_search_space(algorithm_id: str) -> dict:
    return {**COMMON_SPACE, **METHOD_SPACES[ALGORITHM_SPECS[algorithm_id].method]}


def validate_search_space(space: dict) -> None:
    if not space:
        raise ValueError("search space is empty")
    for name, entry in space.items():
        kind = entry.get("type")
        if kind in ("float", "int"):
            lo, hi = entry["bounds"]
            if lo > hi:
                raise ValueError(f"{name}: lower bound exceeds upper bound")
            if entry.get("scale", "linear") == "log" and lo <= 0:
                raise ValueError(f"{name}: log scale needs positive bounds")
        elif kind == "choice":
            if not entry.get("values"):
                raise ValueError(f"{name}: choice needs values")
        else:
            raise ValueError(f"{name}: unknown type {kind!r}")


def sample_config(space: dict, rng: np.random.Generator) -> dict:
    out = {}
    for name in sorted(space):
        entry = space[name]
        kind = entry["type"]
        if kind == "choice":
            values = entry["values"]
            out[name] = values[int(rng.integers(len(values)))]
            continue
        lo, hi = entry["bounds"]
        if entry.get("scale", "linear") == "log":
            v = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        else:
            v = rng.uniform(lo, hi)
        out[name] = int(round(v)) if kind == "int" else float(v)
    return out


def in_space(params: dict, space: dict) -> bool:
    for name, entry in space.items():
        if name not in params:
            continue
        v = params[name]
        if entry["type"] == "choice":
            if v not in entry["values"]:
                return False
        elif not entry["bounds"][0] <= v <= entry["bounds"][1]:
            return False
    return True


@dataclass
class TuneResult:
    best: HyperParams
    trials: list
    best_index: int
    best_model: Optional[TrainedModel] = None


def trial_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0] % (2 ** 31))


def tune(algorithm_id: str, scenario: Scenario, search_space: Optional[dict],
         criterion: Criterion, *, n_trials: Optional[int] = None,
         tuning_budget: Optional[float] = None, epochs: int = 10,
         trial_wall: Optional[float] = None, seed: int = 0,
         fixed_params: Optional[dict] = None,
         train_fn: Callable = train, keep_best: bool = False) -> TuneResult:
    """Random search scored by ``criterion`` on the best checkpoint of each trial.

    Stops after ``n_trials`` or once ``tuning_budget`` seconds are spent; the
    first trial always runs.  Ties go to the earlier trial.
    """
    space = search_space if search_space is not None else default_search_space(algorithm_id)
    validate_search_space(space)
    if n_trials is None and tuning_budget is None:
        raise ValueError("give n_trials and/or tuning_budget")
    method = ALGORITHM_SPECS[algorithm_id].method
    base = {**COMMON_DEFAULTS, **METHOD_DEFAULTS[method], **(fixed_params or {})}
    rng = np.random.default_rng([seed, 104729])
    start = time.perf_counter()
    trials: list = []
    best_model, best_value = None, math.inf
    index = 0
    while True:
        if n_trials is not None and index >= n_trials:
            break
        if index > 0 and tuning_budget is not None and time.perf_counter() - start >= tuning_budget:
            break
        hp = HyperParams(algorithm_id, {**base, **sample_config(space, rng)})
        t0 = time.perf_counter()
        try:
            trained = train_fn(algorithm_id, scenario, hp, trial_seed(seed, index), epochs,
                               trial_wall, criterion)
            failed, err = trained.failed, trained.error
        except Exception as exc:  # a broken configuration must not stop the sweep
            log.exception("trial %d of %s failed", index, algorithm_id)
            trained, failed, err = None, True, f"{type(exc).__name__}: {exc}"
        trace = [] if trained is None else trained.trace
        value = math.inf if failed or not trace else min(trace)
        trials.append(TrialRecord(index, hp, value, trace, time.perf_counter() - t0,
                                  "failed" if failed else "ok", criterion.oracle, err))
        if keep_best and value < best_value:
            best_model, best_value = trained, value
        index += 1
    ok = [t for t in trials if t.status == "ok"]
    if not ok:
        raise TuningError("all trials failed: " + "; ".join(
            f"#{t.trial_index}: {t.error}" for t in trials))
    best = min(ok, key=lambda t: (t.criterion, t.trial_index))
    return TuneResult(best.hparams, trials, best.trial_index, best_model)
