"""Ensemble of multinomial logistic-regression classifiers.

Diversity comes from per-member hyperparameters, bootstrap resampling and
random feature subsets. All members are trained together with batched
full-batch gradient descent; the math per member is the single-model
``loss_and_grad`` below.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

PROB_FLOOR = 1e-12


class TrainingError(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


@dataclass(frozen=True)
class ClassifierSpec:
    learning_rate: float = 0.1
    l2_penalty: float = 1e-3
    epochs: int = 300
    feature_subsample: float = 1.0
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not self.l2_penalty >= 0:
            raise ValueError("l2_penalty must be nonnegative")
        if int(self.epochs) < 1:
            raise ValueError("epochs must be a positive integer")
        if not 0 < self.feature_subsample <= 1:
            raise ValueError("feature_subsample must lie in (0, 1]")


@dataclass(frozen=True)
class HyperparameterRanges:
    """Closed sampling intervals, one per numeric hyperparameter."""

    learning_rate: tuple[float, float] = (0.01, 0.3)
    l2_penalty: tuple[float, float] = (1e-4, 1e-1)
    epochs: tuple[int, int] = (100, 1000)
    feature_subsample: tuple[float, float] = (0.4, 1.0)
    bootstrap: bool = True

    def __post_init__(self):
        for name in ("learning_rate", "l2_penalty", "epochs", "feature_subsample"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower end {lo} exceeds upper end {hi}")


def sample_specs(count: int, ranges: HyperparameterRanges | None = None,
                 seed: int = 0) -> list[ClassifierSpec]:
    """Draw ``count`` specs uniformly from ``ranges``; each gets its own training seed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    ranges = ranges or HyperparameterRanges()
    rng = np.random.default_rng(seed)
    specs = []
    for _ in range(count):
        specs.append(ClassifierSpec(
            learning_rate=float(rng.uniform(*ranges.learning_rate)),
            l2_penalty=float(rng.uniform(*ranges.l2_penalty)),
            epochs=int(rng.integers(ranges.epochs[0], ranges.epochs[1] + 1)),
            feature_subsample=float(rng.uniform(*ranges.feature_subsample)),
            bootstrap=ranges.bootstrap,
            seed=int(rng.integers(2**31 - 1)),
        ))
    return specs


def softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grad(weights: np.ndarray, bias: np.ndarray, X: np.ndarray, onehot: np.ndarray,
                  sample_weight: np.ndarray, l2_penalty: float):
    """Weighted mean cross-entropy plus ``l2/2 * ||W||^2`` (bias unpenalized).

    ``sample_weight`` must sum to one. Returns ``(loss, grad_W, grad_b)``.
    """
    scores = X @ weights + bias
    shifted = scores - scores.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    loss = -(sample_weight * (onehot * log_p).sum(axis=1)).sum() + 0.5 * l2_penalty * (weights**2).sum()
    resid = (np.exp(log_p) - onehot) * sample_weight[:, None]
    return loss, X.T @ resid + l2_penalty * weights, resid.sum(axis=0)


@dataclass
class LogisticClassifier:
    """Fitted softmax-linear model reading only the columns in ``feature_idx``."""

    weights: np.ndarray
    bias: np.ndarray
    feature_idx: np.ndarray
    n_features: int

    @property
    def class_count(self) -> int:
        return self.bias.shape[0]

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got shape {X.shape}")
        return softmax(X[:, self.feature_idx] @ self.weights + self.bias)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
            "feature_idx": self.feature_idx.tolist(),
            "n_features": self.n_features,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LogisticClassifier":
        return cls(np.array(d["weights"], dtype=np.float64), np.array(d["bias"], dtype=np.float64),
                   np.array(d["feature_idx"], dtype=np.int64), int(d["n_features"]))


def _member_draws(spec: ClassifierSpec, n: int, d: int):
    rng = np.random.default_rng(spec.seed)
    if spec.bootstrap:
        counts = np.bincount(rng.integers(0, n, size=n), minlength=n).astype(np.float64)
    else:
        counts = np.ones(n)
    size = max(1, math.ceil(spec.feature_subsample * d - 1e-9))
    idx = np.sort(rng.choice(d, size=size, replace=False)) if size < d else np.arange(d)
    return counts / counts.sum(), idx


def _check_training_data(X, y, class_count):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError(f"bad training shapes X={X.shape}, y={y.shape}")
    counts = np.bincount(y, minlength=class_count)
    if counts.shape[0] > class_count or y.min() < 0:
        raise ValueError("labels outside [0, K-1]")
    if np.any(counts == 0):
        raise ValueError(f"class {int(np.flatnonzero(counts == 0)[0])} has no training samples")
    return X, y


def train_members(specs: Sequence[ClassifierSpec], X: np.ndarray, y: np.ndarray,
                  class_count: int) -> list[LogisticClassifier]:
    """Train one classifier per spec, all members stepping in lockstep.

    Each step applies the cross-entropy gradient and then the L2 shrinkage as
    a proximal step ``W <- (W - lr*g) / (1 + lr*l2)``, which stays stable for
    any penalty and has the same fixed point as plain gradient descent.
    Members stop updating once their own epoch budget is spent.
    """
    X, y = _check_training_data(X, y, class_count)
    n, d = X.shape
    m, k = len(specs), class_count
    # class-major layout: scores (K, n, M); reductions over the leading axis are cheap
    onehot = (np.arange(k)[:, None] == y[None, :]).astype(np.float64)[:, :, None]
    weights = np.zeros((k, d, m))
    bias = np.zeros((k, 1, m))
    sample_w = np.empty((n, m))
    mask = np.zeros((1, d, m))
    subsets = []
    for j, spec in enumerate(specs):
        sample_w[:, j], idx = _member_draws(spec, n, d)
        mask[0, idx, j] = 1.0
        subsets.append(idx)
    lr = np.array([s.learning_rate for s in specs])
    shrink = 1.0 / (1.0 + lr * np.array([s.l2_penalty for s in specs]))
    epochs = np.array([int(s.epochs) for s in specs])
    Xt = X.T
    final_w = np.empty((k, d, m))
    final_b = np.empty((k, 1, m))
    # members run longest-first so finished ones can be dropped off the end
    live = np.argsort(-epochs, kind="stable")
    weights, bias = weights[:, :, live], bias[:, :, live]
    sample_w, mask, lr, shrink = sample_w[:, live], mask[:, :, live], lr[live], shrink[live]
    budget = epochs[live]

    # overflow shows up as a non-finite normalizer and is reported with its epoch
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(int(epochs.max())):
            done = int(np.count_nonzero(budget <= epoch))
            if done:
                keep = budget.shape[0] - done
                final_w[:, :, live[keep:]] = weights[:, :, keep:]
                final_b[:, :, live[keep:]] = bias[:, :, keep:]
                live, budget = live[:keep], budget[:keep]
                weights, bias = weights[:, :, :keep], bias[:, :, :keep]
                sample_w, mask, lr, shrink = sample_w[:, :keep], mask[:, :, :keep], lr[:keep], shrink[:keep]
            scores = np.matmul(X, weights) + bias
            scores -= scores.max(axis=0)
            expd = np.exp(scores)
            norm = expd.sum(axis=0)
            if not np.all(np.isfinite(norm)):
                raise TrainingError(f"non-finite training loss at epoch {epoch}", epoch)
            resid = (expd / norm - onehot) * sample_w
            weights = (weights - lr * np.matmul(Xt, resid)) * (shrink * mask)
            bias = bias - lr * resid.sum(axis=1, keepdims=True)
    final_w[:, :, live] = weights
    final_b[:, :, live] = bias
    weights, bias = final_w, final_b

    if not np.all(np.isfinite(weights)):
        raise TrainingError("non-finite weights after training", int(epochs.max()))
    return [LogisticClassifier(weights[:, subsets[j], j].T.copy(), bias[:, 0, j].copy(), subsets[j], d)
            for j in range(m)]


def fit(spec: ClassifierSpec, X: np.ndarray, y: np.ndarray, class_count: int | None = None) -> LogisticClassifier:
    """Fit a single classifier (see ``train_members``)."""
    k = int(np.max(y)) + 1 if class_count is None else class_count
    return train_members([spec], X, y, k)[0]


@dataclass
class PredictionTensor:
    """Class probabilities of shape (models, samples, classes)."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 3:
            raise ValueError(f"prediction tensor must be 3-D, got shape {p.shape}")
        if p.size and (np.any(p < -1e-12) or np.any(p > 1 + 1e-12)
                       or np.abs(p.sum(axis=2) - 1).max() > 1e-6):
            raise ValueError("each probs[m, i, :] must be a probability vector")
        self.probs = p

    @property
    def model_count(self) -> int:
        return self.probs.shape[0]

    @property
    def sample_count(self) -> int:
        return self.probs.shape[1]

    @property
    def class_count(self) -> int:
        return self.probs.shape[2]

    def take(self, indices) -> "PredictionTensor":
        return PredictionTensor(self.probs[:, np.asarray(indices, dtype=np.int64), :])


def mean_probabilities(tensor: PredictionTensor) -> np.ndarray:
    """Model-averaged class probabilities, shape (samples, classes)."""
    return tensor.probs.mean(axis=0)


@dataclass
class EnsembleModel:
    members: list[LogisticClassifier]
    specs: list[ClassifierSpec]
    class_names: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.members or len(self.members) != len(self.specs):
            raise ValueError("need M >= 1 members, one spec each")

    @property
    def class_count(self) -> int:
        return self.members[0].class_count

    @property
    def n_features(self) -> int:
        return self.members[0].n_features

    def predict_tensor(self, X: np.ndarray) -> PredictionTensor:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected (N, {self.n_features}) features, got shape {X.shape}")
        return PredictionTensor(np.stack([m.predict_proba(X) for m in self.members]))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return mean_probabilities(self.predict_tensor(X)).argmax(axis=1)

    def to_json(self) -> str:
        return json.dumps({
            "class_names": list(self.class_names),
            "specs": [asdict(s) for s in self.specs],
            "members": [m.to_dict() for m in self.members],
        })

    @classmethod
    def from_json(cls, text: str) -> "EnsembleModel":
        d = json.loads(text)
        return cls([LogisticClassifier.from_dict(m) for m in d["members"]],
                   [ClassifierSpec(**s) for s in d["specs"]], tuple(d["class_names"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EnsembleModel":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def fit_ensemble(specs: Sequence[ClassifierSpec], X: np.ndarray, y: np.ndarray, class_count: int,
                 class_names: Sequence[str] = ()) -> EnsembleModel:
    members = train_members(specs, X, y, class_count)
    return EnsembleModel(members, list(specs), tuple(class_names))
