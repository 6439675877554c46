"""Numerical checks of the pseudo-label estimation bound and the IPM PAC-Bayes
majority-vote bound.

Estimation bound: class means are estimated from ``n_k`` pseudo-labeled samples
where a sample is correctly labeled with probability ``E(I^k)``; a wrongly
labeled sample comes from another class drawn uniformly. The error metric is
``sum_k ||theta_k - mu_k||_1``.

PAC-Bayes: indicators default to misclassification (``h(x) != y``); the
literal correctness reading is available through ``indicator="correct"``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

ERROR = "error"
CORRECT = "correct"
MC_BLOCK = 1000


@dataclass(frozen=True)
class Theorem1Setup:
    """One configuration of the class-mean estimation problem.

    Parameters
    ----------
    class_means : (K, d) array
    noise_variances : (d,) array of per-coordinate variances, all > 0
    pseudo_counts : (K,) positive integers
    indicator_means : (K,) probabilities that a pseudo-label is correct
    indicator_variances : (K,) variances used by the bound, usually ``p (1 - p)``
    delta : error tolerance
    trials : Monte-Carlo repetitions
    """

    class_means: np.ndarray
    noise_variances: np.ndarray
    pseudo_counts: np.ndarray
    indicator_means: np.ndarray
    indicator_variances: np.ndarray
    delta: float
    trials: int = 10_000

    def __post_init__(self):
        means = np.asarray(self.class_means, dtype=np.float64)
        if means.ndim != 2 or means.shape[0] < 2:
            raise ValueError("class_means must be (K, d) with K >= 2")
        k, d = means.shape
        noise = np.asarray(self.noise_variances, dtype=np.float64).reshape(-1)
        counts = np.asarray(self.pseudo_counts, dtype=np.int64).reshape(-1)
        p = np.asarray(self.indicator_means, dtype=np.float64).reshape(-1)
        var = np.asarray(self.indicator_variances, dtype=np.float64).reshape(-1)
        if noise.shape != (d,) or np.any(noise <= 0):
            raise ValueError("noise_variances must be d positive values")
        if counts.shape != (k,) or np.any(counts < 1):
            raise ValueError("pseudo_counts must be K positive integers")
        if p.shape != (k,) or np.any((p < 0) | (p > 1)):
            raise ValueError("indicator_means must be K values in [0, 1]")
        if var.shape != (k,) or np.any(var < 0):
            raise ValueError("indicator_variances must be K nonnegative values")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if int(self.trials) < 1:
            raise ValueError("trials must be >= 1")
        for name, value in (("class_means", means), ("noise_variances", noise), ("pseudo_counts", counts),
                            ("indicator_means", p), ("indicator_variances", var)):
            object.__setattr__(self, name, value)

    @classmethod
    def bernoulli(cls, class_means, noise_variances, pseudo_counts, indicator_means, delta,
                  trials: int = 10_000) -> "Theorem1Setup":
        """Setup whose indicator variances are the Bernoulli ``p (1 - p)``."""
        p = np.asarray(indicator_means, dtype=np.float64)
        return cls(class_means, noise_variances, pseudo_counts, p, p * (1 - p), delta, trials)

    @property
    def class_count(self) -> int:
        return self.class_means.shape[0]

    @property
    def dim(self) -> int:
        return self.class_means.shape[1]

    def other_class_gaps(self) -> np.ndarray:
        """Mean over ``j != k`` of ``||mu_k - mu_j||_1`` (uniform wrong-class draw)."""
        diff = np.abs(self.class_means[:, None, :] - self.class_means[None, :, :]).sum(axis=2)
        return diff.sum(axis=1) / (self.class_count - 1)


def theorem1_bound(setup: Theorem1Setup) -> float:
    """``1 - 2 sum_k sum_j exp(-delta^2 n_k / (8 sigma_j^2)) - sum_k 4 Var(I^k) gap_k / delta^2``.

    Vacuous (negative) values are returned unclamped.
    """
    d2 = setup.delta ** 2
    gauss = np.exp(-d2 * setup.pseudo_counts[:, None] / (8.0 * setup.noise_variances[None, :])).sum()
    cheb = (4.0 * setup.indicator_variances * setup.other_class_gaps() / d2).sum()
    return float(1.0 - 2.0 * gauss - cheb)


def _wrong_class_offsets(setup: Theorem1Setup) -> np.ndarray:
    """``D[k, j] = mu_{others_k[j]} - mu_k``, shape (K, K-1, d)."""
    k, mu = setup.class_count, setup.class_means
    others = np.array([[j for j in range(k) if j != c] for c in range(k)])
    return mu[others] - mu[:, None, :]


def estimation_errors(setup: Theorem1Setup, rng: np.random.Generator, count: int,
                      offsets: np.ndarray | None = None) -> np.ndarray:
    """``count`` independent draws of ``sum_k ||theta_k - mu_k||_1``.

    Sampled through sufficient statistics: the number of wrong labels, their
    split over the other classes, and the Gaussian sample mean. This has the
    same law as averaging ``(1 - I_i)(mu_other - mu_k) + Z_i`` sample by sample.
    """
    offsets = _wrong_class_offsets(setup) if offsets is None else offsets
    k, n = setup.class_count, setup.pseudo_counts
    wrong = rng.binomial(n, 1.0 - setup.indicator_means, size=(count, k))
    split = rng.multinomial(wrong, np.full(k - 1, 1.0 / (k - 1)))
    shift = np.einsum("tcj,cjd->tcd", split, offsets) / n[None, :, None]
    noise = rng.standard_normal((count, k, setup.dim)) * np.sqrt(setup.noise_variances / n[:, None])
    return np.abs(shift + noise).sum(axis=(1, 2))


def theorem1_monte_carlo(setup: Theorem1Setup, seed: int = 0) -> tuple[float, float]:
    """Empirical ``P(sum_k ||theta_k - mu_k||_1 <= delta)`` and its standard error.

    Trials run in blocks of ``MC_BLOCK``; block ``b`` draws from
    ``default_rng([seed, b])`` so results do not depend on how blocks are scheduled.
    """
    trials = int(setup.trials)
    offsets = _wrong_class_offsets(setup)
    hits = 0
    for b, start in enumerate(range(0, trials, MC_BLOCK)):
        count = min(MC_BLOCK, trials - start)
        errors = estimation_errors(setup, np.random.default_rng([seed, b]), count, offsets)
        hits += int(np.count_nonzero(errors <= setup.delta))
    p = hits / trials
    return p, math.sqrt(p * (1 - p) / trials)


@dataclass(frozen=True)
class Theorem1Row:
    setup: Theorem1Setup
    bound: float
    empirical: float
    stderr: float

    @property
    def holds(self) -> bool:
        return self.empirical >= self.bound - 3 * self.stderr


def theorem1_sweep(setups: Iterable[Theorem1Setup], seed: int = 0) -> list[Theorem1Row]:
    rows = []
    for setup in setups:
        p, se = theorem1_monte_carlo(setup, seed)
        rows.append(Theorem1Row(setup, theorem1_bound(setup), p, se))
    return rows


def theorem1_csv(rows: Sequence[Theorem1Row]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["setup", "classes", "dim", "pseudo_counts", "indicator_means", "indicator_variances",
                     "noise_variances", "delta", "trials", "bound", "empirical", "stderr"])
    join = " ".join
    for i, r in enumerate(rows):
        s = r.setup
        writer.writerow([i, s.class_count, s.dim, join(str(int(n)) for n in s.pseudo_counts),
                         join(repr(float(x)) for x in s.indicator_means),
                         join(repr(float(x)) for x in s.indicator_variances),
                         join(repr(float(x)) for x in s.noise_variances), repr(float(s.delta)),
                         int(s.trials), repr(r.bound), repr(r.empirical), repr(r.stderr)])
    return buf.getvalue()


def _distribution(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size == 0 or np.any(x < 0) or abs(x.sum() - 1) > 1e-9:
        raise ValueError(f"{name} must be a probability vector")
    return x


@dataclass(frozen=True)
class PacBayesSetup:
    """Posterior and prior over M models plus their (M, N_l) correctness on labeled data."""

    posterior: np.ndarray
    prior: np.ndarray
    correct: np.ndarray
    delta: float = 0.05

    def __post_init__(self):
        xi = _distribution(self.posterior, "posterior")
        pi = _distribution(self.prior, "prior")
        correct = np.asarray(self.correct, dtype=bool)
        if pi.shape != xi.shape:
            raise ValueError("posterior and prior must have the same length")
        if correct.ndim != 2 or correct.shape[0] != xi.shape[0]:
            raise ValueError("correct must be (M, N_l)")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        object.__setattr__(self, "posterior", xi)
        object.__setattr__(self, "prior", pi)
        object.__setattr__(self, "correct", correct)

    @property
    def n_labeled(self) -> int:
        return self.correct.shape[1]


def _indicators(correct: np.ndarray, indicator: str) -> np.ndarray:
    if indicator == ERROR:
        return ~np.asarray(correct, dtype=bool)
    if indicator == CORRECT:
        return np.asarray(correct, dtype=bool)
    raise ValueError(f"indicator must be '{ERROR}' or '{CORRECT}'")


def individual_losses(correct: np.ndarray, indicator: str = ERROR) -> np.ndarray:
    """Per-model empirical rate of the chosen indicator."""
    return _indicators(correct, indicator).mean(axis=1)


def tandem_loss(correct: np.ndarray, posterior, indicator: str = ERROR) -> float:
    """``sum_{m, m'} xi_m xi_m' mean_n(e[m, n] e[m', n])``."""
    e = _indicators(correct, indicator).astype(np.float64)
    xi = _distribution(posterior, "posterior")
    joint = e @ e.T / e.shape[1]
    return float(xi @ joint @ xi)


def majority_vote(predictions: np.ndarray, posterior, class_count: int | None = None) -> np.ndarray:
    """Posterior-weighted plurality of (M, N) hard predictions, ties to the lowest class."""
    pred = np.asarray(predictions, dtype=np.int64)
    xi = _distribution(posterior, "posterior")
    k = int(pred.max()) + 1 if class_count is None else class_count
    votes = np.zeros((pred.shape[1], k))
    for m in range(pred.shape[0]):
        np.add.at(votes, (np.arange(pred.shape[1]), pred[m]), xi[m])
    return votes.argmax(axis=1)


def majority_vote_loss(predictions: np.ndarray, posterior, labels, class_count: int | None = None) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    return float(np.mean(majority_vote(predictions, posterior, class_count) != labels))


def ipm_tv(p, q) -> float:
    """Total variation ``0.5 * sum |p - q|``."""
    return float(0.5 * np.abs(_distribution(p, "p") - _distribution(q, "q")).sum())


def kl(p, q) -> float:
    """``sum p log(p / q)`` with ``0 log 0 = 0``; infinite when ``q`` misses mass of ``p``."""
    p, q = _distribution(p, "p"), _distribution(q, "q")
    support = p > 0
    if np.any(q[support] == 0):
        return math.inf
    return float(max((p[support] * np.log(p[support] / q[support])).sum(), 0.0))


def pinsker_surrogate(p, q) -> float:
    """``sqrt(KL / 2)``, the KL-based stand-in for the TV term."""
    return math.sqrt(kl(p, q) / 2)


def pac_bayes_rhs(setup: PacBayesSetup, choice: str = "tv", indicator: str = ERROR) -> float:
    """``4 E_xi[rate] + sqrt((8 gamma + 8 ln(N_l / delta)) / (N_l - 1))``.

    ``choice="tv"`` uses the total variation for ``gamma``; ``"kl"`` uses the
    Pinsker surrogate ``sqrt(KL / 2)``.
    """
    n = setup.n_labeled
    if n < 2:
        raise ValueError("need at least 2 labeled samples")
    if choice == "tv":
        gamma = ipm_tv(setup.posterior, setup.prior)
    elif choice == "kl":
        gamma = pinsker_surrogate(setup.posterior, setup.prior)
    else:
        raise ValueError("choice must be 'tv' or 'kl'")
    first = 4.0 * float(setup.posterior @ individual_losses(setup.correct, indicator))
    return first + math.sqrt((8.0 * gamma + 8.0 * math.log(n / setup.delta)) / (n - 1))


@dataclass(frozen=True)
class PacBayesReport:
    majority_vote_loss: float
    tandem_loss: float
    weighted_loss: float
    rhs_tv: float
    rhs_kl: float

    def as_row(self) -> list[str]:
        return [repr(float(getattr(self, f))) for f in PACBAYES_FIELDS]


PACBAYES_FIELDS = ("majority_vote_loss", "tandem_loss", "weighted_loss", "rhs_tv", "rhs_kl")


def pac_bayes_report(labeled_predictions: np.ndarray, labeled_y, test_predictions: np.ndarray, test_y,
                     posterior, prior, delta: float = 0.05, class_count: int | None = None) -> PacBayesReport:
    """Bound terms on labeled data next to the majority-vote loss on held-out data."""
    labeled_y = np.asarray(labeled_y, dtype=np.int64)
    correct = np.asarray(labeled_predictions) == labeled_y[None, :]
    setup = PacBayesSetup(posterior, prior, correct, delta)
    return PacBayesReport(
        majority_vote_loss=majority_vote_loss(test_predictions, posterior, test_y, class_count),
        tandem_loss=tandem_loss(correct, setup.posterior),
        weighted_loss=float(setup.posterior @ individual_losses(correct)),
        rhs_tv=pac_bayes_rhs(setup, "tv"),
        rhs_kl=pac_bayes_rhs(setup, "kl"),
    )
