"""Label allocation as balanced optimal transport.

The allocation LP (each sample assigned at most once, class k receives at most
``N * w_plus[k]``, total assigned mass at least ``N * rho * sum(w_minus)``) is
turned into a balanced transport problem by one extra "slack" row and column,
then solved with entropic regularization by log-domain Sinkhorn scaling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dataset import ClassFrequencyBounds
from .ensemble import PROB_FLOOR

DEFAULT_EPSILON = 0.01
DEFAULT_MAX_ITERS = 1000
DEFAULT_TOL = 1e-6
MASS_TOL = 1e-9


class TransportError(ValueError):
    """Infeasible or numerically broken transport problem."""


@dataclass(frozen=True)
class AugmentedMarginals:
    row: np.ndarray
    col: np.ndarray


@dataclass
class AssignmentMatrix:
    coupling: np.ndarray
    iterations_used: int
    marginal_residual: float
    log_row_scaling: np.ndarray | None = None
    log_col_scaling: np.ndarray | None = None

    def to_json(self) -> str:
        return json.dumps({
            "coupling": self.coupling.tolist(),
            "iterations_used": self.iterations_used,
            "marginal_residual": self.marginal_residual,
        })


def cost_from_probabilities(mean_probs: np.ndarray) -> np.ndarray:
    """``C = -log(P)`` with probabilities floored at ``PROB_FLOOR``."""
    return -np.log(np.clip(mean_probs, PROB_FLOOR, 1.0))


def allocation_marginals(n: int, w_plus: np.ndarray, assigned_fraction: float) -> AugmentedMarginals:
    """Marginals for "assign at least ``assigned_fraction * N`` units, class k at most ``N w_plus[k]``".

    ``r = [1_N ; N(sum w+ - f)]``, ``c = [N w+ ; N(1 - f)]`` with ``f = assigned_fraction``.
    """
    w_plus = np.asarray(w_plus, dtype=np.float64)
    f = float(assigned_fraction)
    row = np.concatenate([np.ones(n), [n * (w_plus.sum() - f)]])
    col = np.concatenate([n * w_plus, [n * (1.0 - f)]])
    if row[-1] < -MASS_TOL or col[-1] < -MASS_TOL:
        raise TransportError(
            f"infeasible bounds: slack row mass {row[-1]:.6g}, slack column mass {col[-1]:.6g}")
    row[-1] = max(row[-1], 0.0)
    col[-1] = max(col[-1], 0.0)
    return AugmentedMarginals(row, col)


def augmented_marginals(n: int, bounds: ClassFrequencyBounds, rho: float) -> AugmentedMarginals:
    """``r = [1_N ; N(sum w+ - rho sum w-)]``, ``c = [N w+ ; N(1 - rho sum w-)]``."""
    if not 0 < rho <= 1:
        raise TransportError(f"rho must lie in (0, 1], got {rho}")
    return allocation_marginals(n, bounds.w_plus, rho * bounds.w_minus.sum())


def build_augmented(cost: np.ndarray, bounds: ClassFrequencyBounds, rho: float,
                    epsilon: float = DEFAULT_EPSILON, marginals: AugmentedMarginals | None = None):
    """Embed ``cost`` (N x K) in an (N+1) x (K+1) matrix whose slack row/column cost 0.

    Marginals come from ``augmented_marginals`` unless given explicitly.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[1] != bounds.class_count:
        raise TransportError(f"cost shape {cost.shape} does not match K={bounds.class_count}")
    if not np.all(np.isfinite(cost)):
        raise TransportError("cost matrix has non-finite entries")
    if not epsilon > 0:
        raise TransportError("epsilon must be positive")
    n, k = cost.shape
    aug = np.zeros((n + 1, k + 1))
    aug[:n, :k] = cost
    marg = augmented_marginals(n, bounds, rho) if marginals is None else marginals
    total_r, total_c = marg.row.sum(), marg.col.sum()
    if abs(total_r - total_c) > MASS_TOL * max(1.0, total_r):
        raise TransportError(f"unbalanced marginals: sum(r)={total_r!r}, sum(c)={total_c!r}")
    return aug, marg


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    """Stable log-sum-exp; all -inf slices give -inf. Call under ``errstate(divide="ignore")``."""
    peak = a.max(axis=axis)
    peak[~np.isfinite(peak)] = 0.0
    shifted = a - (peak[:, None] if axis == 1 else peak[None, :])
    return np.log(np.exp(shifted).sum(axis=axis)) + peak


def _log(v: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(v)


def dual_objective(cost, marginals: AugmentedMarginals, log_a, log_b, epsilon: float) -> float:
    """Entropic dual ``<f, r> + <g, c> - eps * sum(Q)`` at ``f = eps log a``, ``g = eps log b``.

    Zero-mass marginal entries contribute nothing. Non-decreasing over
    Sinkhorn iterations.
    """
    f, g = epsilon * log_a, epsilon * log_b
    fr = np.where(marginals.row > 0, f * marginals.row, 0.0).sum()
    gc = np.where(marginals.col > 0, g * marginals.col, 0.0).sum()
    q = np.exp((f[:, None] + g[None, :] - cost) / epsilon)
    return float(fr + gc - epsilon * q.sum())


def sinkhorn_solve(cost: np.ndarray, marginals: AugmentedMarginals, epsilon: float = DEFAULT_EPSILON,
                   max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL,
                   callback=None, init_potentials=None) -> AssignmentMatrix:
    """Entropic OT coupling ``Q = diag(a) exp(-C/eps) diag(b)``.

    Starts from ``b = 1`` and alternates ``a = r / (G b)``, ``b = c / (G^T a)``
    with all products evaluated as log-sum-exp. Stops once the row residual
    (columns are exact right after each ``b`` update) drops to ``tol``, or
    after ``max_iters`` sweeps. ``callback(j, log_a, log_b)`` is called after
    every sweep. ``init_potentials=(f, g)`` warm-starts from dual potentials
    ``f = eps' log a``, ``g = eps' log b`` of an earlier solve (any epsilon).
    """
    cost = np.asarray(cost, dtype=np.float64)
    r, c = marginals.row, marginals.col
    if cost.shape != (r.shape[0], c.shape[0]):
        raise TransportError(f"cost shape {cost.shape} vs marginals {(r.shape[0], c.shape[0])}")
    if not epsilon > 0:
        raise TransportError("epsilon must be positive")
    log_kernel = -cost / epsilon
    log_r, log_c = _log(r), _log(c)
    log_a = np.zeros_like(r)
    log_b = np.zeros_like(c)
    if init_potentials is not None:
        log_b = np.asarray(init_potentials[1], dtype=np.float64) / epsilon
        log_b = np.where(np.isfinite(log_b), log_b, 0.0)
    row_live, col_live = r > 0, c > 0
    it = 0
    with np.errstate(divide="ignore"):
        # row log-sums against the current b; reused by the residual check and the next a update
        row_lse = _logsumexp(log_kernel + log_b[None, :], axis=1)
        for it in range(1, max_iters + 1):
            log_a = log_r - row_lse
            log_b = log_c - _logsumexp(log_kernel + log_a[:, None], axis=0)
            if not (np.isfinite(log_a[row_live]).all() and np.isfinite(log_b[col_live]).all()):
                raise TransportError(f"non-finite scaling at iteration {it}; marginals likely infeasible")
            if callback is not None:
                callback(it, log_a, log_b)
            row_lse = _logsumexp(log_kernel + log_b[None, :], axis=1)
            if np.abs(np.exp(log_a + row_lse) - r).max() <= tol:
                break
    q = np.exp(log_kernel + log_a[:, None] + log_b[None, :])
    residual = max(float(np.abs(q.sum(axis=1) - r).max()), float(np.abs(q.sum(axis=0) - c).max()))
    return AssignmentMatrix(q, it, residual, log_a, log_b)


def sinkhorn_anneal(cost: np.ndarray, marginals: AugmentedMarginals, epsilon: float = DEFAULT_EPSILON,
                    max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL,
                    start_epsilon: float | None = None, factor: float = 0.1) -> AssignmentMatrix:
    """``sinkhorn_solve`` at ``epsilon`` warm-started through a decreasing epsilon ladder.

    The ladder starts near the cost range and shrinks by ``factor`` per level;
    each level gets up to ``max_iters`` sweeps. The fixed point is the same as
    a cold solve at ``epsilon``; small epsilon just converges much faster.
    ``iterations_used`` counts sweeps over all levels.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if start_epsilon is None:
        start_epsilon = max(float(np.ptp(cost)), epsilon)
    ladder = []
    e = start_epsilon
    while e > epsilon * (1 + 1e-9):
        ladder.append(e)
        e *= factor
    ladder.append(epsilon)
    potentials = None
    total = 0
    result = None
    for e in ladder:
        result = sinkhorn_solve(cost, marginals, e, max_iters, tol, init_potentials=potentials)
        total += result.iterations_used
        potentials = (e * result.log_row_scaling, e * result.log_col_scaling)
    result.iterations_used = total
    return result


def extract_assignments(coupling: np.ndarray, n: int | None = None, k: int | None = None,
                        mean_probs: np.ndarray | None = None) -> list[tuple[int, int]]:
    """Round the coupling to hard labels.

    Row ``i < N`` gets class ``argmax_{k<K} Q[i, k]`` if that mass strictly
    exceeds the slack-column mass ``Q[i, K]``; otherwise it stays unassigned.
    Argmax ties between classes are broken by ``mean_probs`` when given, then
    by the lower class index.
    """
    q = np.asarray(coupling)
    n = q.shape[0] - 1 if n is None else n
    k = q.shape[1] - 1 if k is None else k
    body = q[:n, :k]
    slack = q[:n, k]
    if mean_probs is not None and n:
        is_max = body == body.max(axis=1, keepdims=True)
        best = np.where(is_max, np.asarray(mean_probs)[:n, :k], -np.inf).argmax(axis=1)
    else:
        best = body.argmax(axis=1)
    mass = body[np.arange(n), best]
    return [(int(i), int(best[i])) for i in np.flatnonzero(mass > slack)]


def transport_objective(coupling: np.ndarray, cost: np.ndarray) -> float:
    return float((np.asarray(coupling) * np.asarray(cost)).sum())


def entropic_objective(coupling: np.ndarray, cost: np.ndarray, epsilon: float) -> float:
    """``<Q, C> + eps * sum Q (log Q - 1)`` with ``0 log 0 = 0``."""
    q = np.asarray(coupling)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(q > 0, q * (np.log(q) - 1.0), 0.0).sum()
    return transport_objective(q, cost) + epsilon * float(ent)


# --------------------------------------------------------------------------
# exact transportation simplex (verification oracle for small instances)

LP_MAX_ROWS = 13
LP_MAX_COLS = 6
_LP_TOL = 1e-12


def _northwest_corner(supply: np.ndarray, demand: np.ndarray):
    s, d = supply.copy(), demand.copy()
    m, n = s.shape[0], d.shape[0]
    flow = np.zeros((m, n))
    basis = []
    i = j = 0
    while True:
        x = min(s[i], d[j])
        flow[i, j] = x
        basis.append((i, j))
        s[i] -= x
        d[j] -= x
        if i == m - 1 and j == n - 1:
            break
        if j == n - 1 or (i < m - 1 and s[i] <= d[j]):
            i += 1
        else:
            j += 1
    return flow, basis


def _tree_path(basis, m: int, n: int, start_row: int, end_col: int):
    """Basic cells on the tree path from row node ``start_row`` to column node ``end_col``."""
    adj: dict[tuple[str, int], list[tuple[tuple[str, int], tuple[int, int]]]] = {}
    for i, j in basis:
        adj.setdefault(("r", i), []).append((("c", j), (i, j)))
        adj.setdefault(("c", j), []).append((("r", i), (i, j)))
    start, goal = ("r", start_row), ("c", end_col)
    prev = {start: None}
    stack = [start]
    while stack:
        node = stack.pop()
        if node == goal:
            break
        for nxt, cell in adj.get(node, []):
            if nxt not in prev:
                prev[nxt] = (node, cell)
                stack.append(nxt)
    if goal not in prev:
        raise TransportError("basis is not a spanning tree")
    path = []
    node = goal
    while prev[node] is not None:
        node, cell = prev[node]
        path.append(cell)
    path.reverse()
    return path


def lp_oracle(cost: np.ndarray, marginals: AugmentedMarginals, max_pivots: int = 10_000):
    """Exact optimum of the balanced transport LP by the transportation simplex.

    Uses a northwest-corner start, u-v potentials for reduced costs and
    Bland's rule (lowest-index entering cell, lowest-index leaving cell among
    ties) so degenerate pivots cannot cycle. Returns ``(coupling, objective)``.
    Only for small instances.
    """
    cost = np.asarray(cost, dtype=np.float64)
    supply = np.asarray(marginals.row, dtype=np.float64)
    demand = np.asarray(marginals.col, dtype=np.float64)
    m, n = cost.shape
    if (m, n) != (supply.shape[0], demand.shape[0]):
        raise TransportError("cost and marginals disagree in shape")
    if m > LP_MAX_ROWS or n > LP_MAX_COLS:
        raise TransportError(f"instance {m}x{n} too large for the exact oracle "
                             f"(limit {LP_MAX_ROWS}x{LP_MAX_COLS})")
    if abs(supply.sum() - demand.sum()) > 1e-9 * max(1.0, supply.sum()):
        raise TransportError("unbalanced marginals")
    # absorb rounding so the start solution is exactly balanced
    demand = demand.copy()
    demand[-1] += supply.sum() - demand.sum()

    flow, basis = _northwest_corner(supply, demand)
    for _ in range(max_pivots):
        u = np.full(m, np.nan)
        v = np.full(n, np.nan)
        u[0] = 0.0
        pending = list(basis)
        while pending:
            rest = []
            for i, j in pending:
                if not np.isnan(u[i]) and np.isnan(v[j]):
                    v[j] = cost[i, j] - u[i]
                elif np.isnan(u[i]) and not np.isnan(v[j]):
                    u[i] = cost[i, j] - v[j]
                elif np.isnan(u[i]) and np.isnan(v[j]):
                    rest.append((i, j))
            if len(rest) == len(pending):
                raise TransportError("basis is not a spanning tree")
            pending = rest
        reduced = cost - u[:, None] - v[None, :]
        in_basis = np.zeros((m, n), dtype=bool)
        for i, j in basis:
            in_basis[i, j] = True
        scale = max(1.0, float(np.abs(cost).max()))
        candidates = np.argwhere((reduced < -1e-11 * scale) & ~in_basis)
        if candidates.size == 0:
            break
        p, q = (int(x) for x in candidates[0])
        path = _tree_path(basis, m, n, p, q)
        minus = path[0::2]
        plus = path[1::2]
        theta = min(flow[c] for c in minus)
        leaving = min(c for c in minus if flow[c] <= theta + _LP_TOL)
        for c in minus:
            flow[c] -= theta
        for c in plus:
            flow[c] += theta
        flow[p, q] += theta
        flow[leaving] = 0.0
        basis.remove(leaving)
        basis.append((p, q))
    else:
        raise TransportError(f"transportation simplex did not terminate in {max_pivots} pivots")
    flow = np.maximum(flow, 0.0)
    return flow, transport_objective(flow, cost)
