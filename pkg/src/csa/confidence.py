"""Per-sample confidence statistics over an ensemble prediction tensor.

Means and variances are taken across the M models with population (1/M)
normalization. A sample is eligible for allocation when the gap between its
two highest-scoring classes is significant (Welch T-value), or when its total
variance / predictive entropy falls in the lowest fraction of the pool.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .ensemble import PredictionTensor

ZERO_VARIANCE = 1e-18
DEFAULT_T_THRESHOLD = 2.0
DEFAULT_REJECT_FRACTION = 0.5


class Criterion(str, Enum):
    T_TEST = "t_test"
    TOTAL_VARIANCE = "total_variance"
    ENTROPY = "entropy"


def _as_probs(tensor) -> np.ndarray:
    return tensor.probs if isinstance(tensor, PredictionTensor) else np.asarray(tensor, dtype=np.float64)


def top_two_classes(tensor, i: int | None = None):
    """Highest and second-highest classes of the model-averaged probabilities.

    Returns ``(top, second, mu_top, mu_second, var_top, var_second)``, each a
    scalar when ``i`` is given, otherwise an array over all samples. Ties go to
    the lower class index.
    """
    probs = _as_probs(tensor)
    if i is not None:
        probs = probs[:, i:i + 1, :]
    if probs.shape[2] < 2:
        raise ValueError("need at least 2 classes")
    mean = probs.mean(axis=0)
    # stable argsort on negated means keeps lower index first among ties
    order = np.argsort(-mean, axis=1, kind="stable")
    top, second = order[:, 0], order[:, 1]
    rows = np.arange(mean.shape[0])
    var = probs.var(axis=0)
    out = (top, second, mean[rows, top], mean[rows, second], var[rows, top], var[rows, second])
    if i is not None:
        return tuple(x[0].item() for x in out)
    return out


def t_value(mu_top, mu_second, var_top, var_second, model_count: int):
    """Welch-style T-value ``(mu_top - mu_second) / sqrt((var_top + var_second) / M)``.

    With both variances below ``ZERO_VARIANCE`` the result is ``+inf`` (or
    ``-inf``) when the means differ and 0 when they are equal.
    """
    if model_count < 2:
        raise ValueError("T-value needs at least 2 models")
    mu_top, mu_second, var_top, var_second = np.broadcast_arrays(
        *(np.asarray(a, dtype=np.float64) for a in (mu_top, mu_second, var_top, var_second)))
    diff = mu_top - mu_second
    pooled = var_top + var_second
    degenerate = (var_top < ZERO_VARIANCE) & (var_second < ZERO_VARIANCE)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = diff / np.sqrt(pooled / model_count)
        t = np.where(degenerate, np.sign(diff) * np.inf, t)
    t = np.where(diff == 0, 0.0, t)
    return t.item() if t.ndim == 0 else t


def welch_dof(var_top, var_second, model_count: int):
    """Degrees of freedom ``(M-1)(v1+v2)^2 / (v1^2+v2^2)``."""
    if model_count < 2:
        raise ValueError("degrees of freedom need at least 2 models")
    v1 = np.asarray(var_top, dtype=np.float64)
    v2 = np.asarray(var_second, dtype=np.float64)
    denom = v1**2 + v2**2
    if np.any(denom == 0):
        raise ValueError("degrees of freedom undefined when both variances are zero")
    dof = (model_count - 1) * (v1 + v2) ** 2 / denom
    return dof.item() if dof.ndim == 0 else dof


def total_variance(tensor, i: int | None = None):
    """Class-averaged across-model variance of the predicted probabilities."""
    probs = _as_probs(tensor)
    if probs.shape[0] < 2:
        raise ValueError("total variance needs at least 2 models")
    tv = probs.var(axis=0).mean(axis=1)
    return tv[i].item() if i is not None else tv


def total_entropy(tensor, i: int | None = None):
    """Shannon entropy (nats) of the model-averaged probabilities, ``0 log 0 = 0``."""
    mean = _as_probs(tensor).mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(mean > 0, mean * np.log(mean), 0.0)
    h = np.maximum(-terms.sum(axis=1), 0.0)
    return h[i].item() if i is not None else h


@dataclass
class ConfidenceReport:
    t_value: np.ndarray
    degrees_of_freedom: np.ndarray
    total_variance: np.ndarray
    entropy: np.ndarray
    top_class: np.ndarray
    second_class: np.ndarray
    accepted: np.ndarray

    @property
    def n_samples(self) -> int:
        return self.t_value.shape[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["sample", "t_value", "degrees_of_freedom", "total_variance", "entropy",
                         "top_class", "second_class", "accepted"])
        for i in range(self.n_samples):
            writer.writerow([i, repr(float(self.t_value[i])), repr(float(self.degrees_of_freedom[i])),
                             repr(float(self.total_variance[i])), repr(float(self.entropy[i])),
                             int(self.top_class[i]), int(self.second_class[i]), int(self.accepted[i])])
        return buf.getvalue()


def confidence_report(tensor, criterion: Criterion | str = Criterion.T_TEST, **params) -> ConfidenceReport:
    """All statistics for every sample, with ``accepted`` filled by ``select``."""
    probs = _as_probs(tensor)
    m = probs.shape[0]
    top, second, mu1, mu2, v1, v2 = top_two_classes(probs)
    denom = v1**2 + v2**2
    with np.errstate(divide="ignore", invalid="ignore"):
        dof = np.where(denom > 0, (m - 1) * (v1 + v2) ** 2 / np.where(denom > 0, denom, 1.0), np.nan)
    report = ConfidenceReport(
        t_value=np.asarray(t_value(mu1, mu2, v1, v2, m), dtype=np.float64).reshape(-1),
        degrees_of_freedom=dof,
        total_variance=total_variance(probs),
        entropy=total_entropy(probs),
        top_class=top,
        second_class=second,
        accepted=np.zeros(probs.shape[1], dtype=bool),
    )
    report.accepted[select(report, criterion, **params)] = True
    return report


def _lowest_fraction(scores: np.ndarray, reject_fraction: float) -> np.ndarray:
    if not 0 <= reject_fraction <= 1:
        raise ValueError("reject_fraction must lie in [0, 1]")
    n = scores.shape[0]
    keep = n - int(round(reject_fraction * n))
    order = np.lexsort((np.arange(n), scores))
    return np.sort(order[:keep])


def select(report: ConfidenceReport, criterion: Criterion | str = Criterion.T_TEST, *,
           threshold: float = DEFAULT_T_THRESHOLD,
           reject_fraction: float = DEFAULT_REJECT_FRACTION) -> np.ndarray:
    """Indices of accepted samples (possibly empty; callers must handle that).

    ``t_test`` keeps samples with T-value >= ``threshold``; the other two
    criteria drop the ``reject_fraction`` of samples with the highest score,
    ties resolved by sample index.
    """
    criterion = Criterion(criterion)
    if criterion is Criterion.T_TEST:
        return np.flatnonzero(report.t_value >= threshold)
    if criterion is Criterion.TOTAL_VARIANCE:
        return _lowest_fraction(report.total_variance, reject_fraction)
    return _lowest_fraction(report.entropy, reject_fraction)
