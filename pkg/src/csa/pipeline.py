"""Iterative pseudo-labeling: Confident Sinkhorn Allocation and the baselines.

Every method shares one loop: fit the ensemble on the current labeled set,
score the remaining unlabeled pool, pick (sample, class) pairs, move them to
the labeled set, repeat for T rounds. Methods differ only in the pick step.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, replace
from enum import Enum

import numpy as np

from . import confidence as conf
from .dataset import (UNLABELED, ClassFrequencyBounds, DatasetError, Split, Standardizer,
                      estimate_bounds)
from .ensemble import (EnsembleModel, HyperparameterRanges, PredictionTensor, fit_ensemble,
                       mean_probabilities, sample_specs)
from .sinkhorn import (DEFAULT_EPSILON, allocation_marginals, build_augmented,
                       cost_from_probabilities, extract_assignments, sinkhorn_anneal)


class Method(str, Enum):
    CSA = "csa"
    SLA = "sla"
    PL = "pl"
    FLEXMATCH = "flexmatch"
    UPS = "ups"
    SUPERVISED = "supervised"


METHOD_NAMES = tuple(m.value for m in Method)


def rho_schedule(rounds: int) -> np.ndarray:
    """Decreasing allocation fractions ``(T - t + 1)/(T + 1)`` normalized to sum to 1."""
    if rounds < 1:
        raise ValueError("need at least one round")
    t = np.arange(1, rounds + 1)
    raw = (rounds - t + 1) / (rounds + 1)
    return raw / raw.sum()


@dataclass(frozen=True)
class RunConfig:
    method: Method = Method.CSA
    rounds: int = 5
    n_models: int = 20
    epsilon: float = DEFAULT_EPSILON
    criterion: conf.Criterion = conf.Criterion.T_TEST
    t_threshold: float = conf.DEFAULT_T_THRESHOLD
    reject_fraction: float = conf.DEFAULT_REJECT_FRACTION
    threshold: float = 0.8
    uncertainty_threshold: float | None = None
    flex_floor: float = 0.05
    slack_factor: float = 1.1
    sinkhorn_iters: int = 1000
    sinkhorn_tol: float = 1e-6
    standardize: bool = True
    ranges: HyperparameterRanges = field(default_factory=HyperparameterRanges)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "criterion", conf.Criterion(self.criterion))
        if isinstance(self.ranges, dict):
            object.__setattr__(self, "ranges", HyperparameterRanges(
                **{k: tuple(v) if isinstance(v, list) else v for k, v in self.ranges.items()}))
        if self.rounds < 1 or self.n_models < 1:
            raise ValueError("rounds and n_models must be >= 1")
        if not 0 <= self.threshold <= 1:
            raise ValueError("threshold must lie in [0, 1]")
        if self.uncertainty_threshold is not None and not 0 <= self.uncertainty_threshold <= 1:
            raise ValueError("uncertainty_threshold must lie in [0, 1]")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.method in (Method.CSA, Method.UPS) and self.n_models < 2:
            raise ValueError(f"{self.method.value} needs at least 2 models for its uncertainty scores")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = self.method.value
        d["criterion"] = self.criterion.value
        return d


# --------------------------------------------------------------------------
# per-round selection rules; each returns (local index, class) pairs plus diagnostics

@dataclass
class Selection:
    pairs: list[tuple[int, int]]
    n_candidates: int
    info: dict = field(default_factory=dict)


def select_csa(tensor: PredictionTensor, bounds: ClassFrequencyBounds, rho: float,
               config: RunConfig) -> Selection:
    """Confidence filter, then OT allocation over the accepted samples only."""
    report = conf.confidence_report(tensor, config.criterion, threshold=config.t_threshold,
                                    reject_fraction=config.reject_fraction)
    accepted = np.flatnonzero(report.accepted)
    if accepted.size == 0:
        return Selection([], 0, {"skipped": True})
    mean = mean_probabilities(tensor)[accepted]
    cost, marg = build_augmented(cost_from_probabilities(mean), bounds, rho, config.epsilon)
    return _allocate(cost, marg, mean, accepted, config)


def select_sla(tensor: PredictionTensor, bounds: ClassFrequencyBounds, rho: float,
               config: RunConfig) -> Selection:
    """OT allocation over the whole pool; exactly a ``rho`` fraction of it is allocated."""
    n = tensor.sample_count
    if n == 0:
        return Selection([], 0, {"skipped": True})
    mean = mean_probabilities(tensor)
    marg = allocation_marginals(n, bounds.w_plus, rho)
    cost, marg = build_augmented(cost_from_probabilities(mean), bounds, rho, config.epsilon, marg)
    return _allocate(cost, marg, mean, np.arange(n), config)


def _allocate(cost, marg, mean, candidates, config) -> Selection:
    n, k = mean.shape
    solution = sinkhorn_anneal(cost, marg, config.epsilon, config.sinkhorn_iters, config.sinkhorn_tol)
    local = extract_assignments(solution.coupling, n, k, mean)
    pairs = [(int(candidates[i]), c) for i, c in local]
    info = {
        "skipped": False,
        "sinkhorn_iterations": solution.iterations_used,
        "sinkhorn_residual": solution.marginal_residual,
        "class_mass": solution.coupling[:n, :k].sum(axis=0).tolist(),
        "class_capacity": marg.col[:k].tolist(),
    }
    return Selection(pairs, int(candidates.shape[0]), info)


def select_pl(tensor: PredictionTensor, threshold: float) -> Selection:
    """Greedy: every sample whose top averaged probability reaches ``threshold``."""
    mean = mean_probabilities(tensor)
    top = mean.argmax(axis=1)
    hit = np.flatnonzero(mean.max(axis=1) >= threshold)
    return Selection([(int(i), int(top[i])) for i in hit], int(tensor.sample_count))


def flexmatch_thresholds(mean: np.ndarray, threshold: float, floor: float = 0.05) -> np.ndarray:
    """Class-wise thresholds ``gamma * sigma_k / max_j sigma_j``, ratio floored at ``floor``.

    ``sigma_k`` counts samples predicted as k with confidence >= ``threshold``.
    With no confident sample in any class every threshold stays at ``threshold``.
    """
    k = mean.shape[1]
    top = mean.argmax(axis=1)
    confident = mean.max(axis=1) >= threshold
    sigma = np.bincount(top[confident], minlength=k).astype(np.float64)
    if sigma.max() == 0:
        return np.full(k, threshold)
    return threshold * np.maximum(sigma / sigma.max(), floor)


def select_flexmatch(tensor: PredictionTensor, threshold: float, floor: float = 0.05) -> Selection:
    mean = mean_probabilities(tensor)
    gammas = flexmatch_thresholds(mean, threshold, floor)
    top = mean.argmax(axis=1)
    hit = np.flatnonzero(mean.max(axis=1) >= gammas[top])
    return Selection([(int(i), int(top[i])) for i in hit], int(tensor.sample_count),
                     {"class_thresholds": gammas.tolist()})


def select_ups(tensor: PredictionTensor, threshold: float,
               uncertainty_threshold: float | None = None) -> Selection:
    """PL restricted to samples whose total variance is at most ``uncertainty_threshold``.

    The default uncertainty threshold is the pool's median total variance.
    """
    mean = mean_probabilities(tensor)
    var = conf.total_variance(tensor)
    gamma_u = float(np.percentile(var, 50)) if uncertainty_threshold is None else uncertainty_threshold
    top = mean.argmax(axis=1)
    hit = np.flatnonzero((mean.max(axis=1) >= threshold) & (var <= gamma_u))
    return Selection([(int(i), int(top[i])) for i in hit], int(tensor.sample_count),
                     {"uncertainty_threshold": gamma_u})


# --------------------------------------------------------------------------
# pool bookkeeping and the outer loop

@dataclass
class PoolState:
    """Labeled set (original + pseudo-labeled) and the remaining unlabeled pool.

    ``remaining`` holds positions into the original unlabeled pool.
    """

    features: np.ndarray
    labels: np.ndarray
    pool_features: np.ndarray
    remaining: np.ndarray
    pseudo_history: list[tuple[int, int, int]] = field(default_factory=list)
    round: int = 0

    @property
    def n_labeled(self) -> int:
        return self.labels.shape[0]

    @property
    def n_unlabeled(self) -> int:
        return self.remaining.shape[0]

    def unlabeled_features(self) -> np.ndarray:
        return self.pool_features[self.remaining]

    def augment(self, pairs: list[tuple[int, int]], round_index: int) -> None:
        """Move ``(local index, class)`` pairs from the pool into the labeled set."""
        if not pairs:
            return
        local = np.array([i for i, _ in pairs], dtype=np.int64)
        classes = np.array([c for _, c in pairs], dtype=np.int64)
        if np.unique(local).shape[0] != local.shape[0]:
            raise ValueError("a sample was selected twice in one round")
        pool_idx = self.remaining[local]
        self.features = np.vstack([self.features, self.pool_features[pool_idx]])
        self.labels = np.concatenate([self.labels, classes])
        keep = np.ones(self.remaining.shape[0], dtype=bool)
        keep[local] = False
        self.remaining = self.remaining[keep]
        self.pseudo_history.extend((int(p), int(c), round_index) for p, c in zip(pool_idx, classes))


@dataclass
class RoundRecord:
    round: int
    n_labeled: int
    n_unlabeled: int
    n_candidates: int
    n_assigned: int
    test_accuracy: float
    pseudo_label_accuracy: float | None
    skipped: bool = False
    rho: float | None = None
    info: dict = field(default_factory=dict)


@dataclass
class RunResult:
    method: str
    seed: int
    config: dict
    rounds: list[RoundRecord]
    pseudo_history: list[tuple[int, int, int]]
    model: EnsembleModel | None = None

    @property
    def final_accuracy(self) -> float:
        return self.rounds[-1].test_accuracy

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "config": self.config,
            "final_accuracy": self.final_accuracy,
            "rounds": [asdict(r) for r in self.rounds],
            "pseudo_labels": [{"pool_index": p, "label": c, "round": t} for p, c, t in self.pseudo_history],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def long_rows(self, series: str | None = None) -> list[tuple]:
        """``(method, seed, round, metric, value)`` rows for plotting."""
        name = series or self.method
        rows = []
        for r in self.rounds:
            rows.append((name, self.seed, r.round, "test_accuracy", r.test_accuracy))
            rows.append((name, self.seed, r.round, "n_assigned", r.n_assigned))
            if r.pseudo_label_accuracy is not None:
                rows.append((name, self.seed, r.round, "pseudo_label_accuracy", r.pseudo_label_accuracy))
        return rows


def long_csv(rows: list[tuple]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "seed", "round", "metric", "value"])
    for method, seed, rnd, metric, value in rows:
        writer.writerow([method, seed, rnd, metric, repr(float(value)) if isinstance(value, float) else value])
    return buf.getvalue()


def evaluate(model: EnsembleModel, features: np.ndarray, labels: np.ndarray) -> float:
    """Accuracy of the ensemble-mean argmax."""
    labels = np.asarray(labels)
    if labels.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty test set")
    return float(np.mean(model.predict(features) == labels))


def _pseudo_accuracy(state: PoolState, split: Split) -> float | None:
    if not state.pseudo_history:
        return None
    truth = split.unlabeled.hidden_labels.read("evaluate")
    pool = np.array([p for p, _, _ in state.pseudo_history])
    given = np.array([c for _, c, _ in state.pseudo_history])
    known = truth[pool] != UNLABELED
    if not known.any():
        return None
    return float(np.mean(truth[pool][known] == given[known]))


def run(config: RunConfig, split: Split, keep_model: bool = False) -> RunResult:
    """Run one method on one split. Test data and hidden labels are read only to score."""
    labeled = split.labeled
    k = labeled.class_count
    if np.any(np.bincount(labeled.labels, minlength=k) == 0):
        raise DatasetError("every class needs at least one labeled sample")
    scaler = (Standardizer.fit(labeled.features) if config.standardize
              else Standardizer.identity(labeled.feature_count))
    state = PoolState(
        features=scaler.transform(labeled.features),
        labels=labeled.labels.copy(),
        pool_features=scaler.transform(split.unlabeled.features),
        remaining=np.arange(split.unlabeled.n_samples),
    )
    bounds = estimate_bounds(labeled.labels, config.slack_factor, k)
    specs = sample_specs(config.n_models, config.ranges, config.seed)
    rhos = rho_schedule(config.rounds)

    def fit_and_score() -> tuple[EnsembleModel, float]:
        model = fit_ensemble(specs, state.features, state.labels, k, labeled.class_names)
        test_x = scaler.transform(split.test.features.read("evaluate"))
        return model, evaluate(model, test_x, split.test.labels.read("evaluate"))

    model, acc = fit_and_score()
    records = [RoundRecord(0, state.n_labeled, state.n_unlabeled, 0, 0, acc, None)]
    rounds = 0 if config.method is Method.SUPERVISED else config.rounds
    for t in range(1, rounds + 1):
        state.round = t
        rho = float(rhos[t - 1])
        if state.n_unlabeled == 0:
            selection = Selection([], 0, {"skipped": True})
        else:
            tensor = model.predict_tensor(state.unlabeled_features())
            selection = _select(config, tensor, bounds, rho)
        state.augment(selection.pairs, t)
        skipped = bool(selection.info.get("skipped", False))
        if selection.pairs:
            model, acc = fit_and_score()
        records.append(RoundRecord(
            t, state.n_labeled, state.n_unlabeled, selection.n_candidates, len(selection.pairs), acc,
            _pseudo_accuracy(state, split), skipped, rho,
            {key: v for key, v in selection.info.items() if key != "skipped"}))
    return RunResult(config.method.value, config.seed, config.to_dict(), records,
                     list(state.pseudo_history), model if keep_model else None)


def _select(config: RunConfig, tensor: PredictionTensor, bounds: ClassFrequencyBounds,
            rho: float) -> Selection:
    method = config.method
    if method is Method.CSA:
        return select_csa(tensor, bounds, rho, config)
    if method is Method.SLA:
        return select_sla(tensor, bounds, rho, config)
    if method is Method.PL:
        return select_pl(tensor, config.threshold)
    if method is Method.FLEXMATCH:
        return select_flexmatch(tensor, config.threshold, config.flex_floor)
    if method is Method.UPS:
        return select_ups(tensor, config.threshold, config.uncertainty_threshold)
    raise ValueError(f"method {method.value!r} has no selection step")


def with_method(config: RunConfig, method: Method | str, **overrides) -> RunConfig:
    return replace(config, method=Method(method), **overrides)
