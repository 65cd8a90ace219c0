"""Effective participation, hindsight-optimal allocation and regret."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .selection import residual_budget, tuned_eta


def hindsight_optimal(x, k: int, sigma: float) -> np.ndarray:
    """Per-round allocation maximizing ``sum(p * x)`` s.t. ``sigma <= p <= 1``, ``sum(p) == k``.

    Every client starts at ``sigma``; the residual budget ``k - K*sigma``
    raises successful clients to one in index order, then whatever is left
    goes to the remaining clients in index order.
    """
    x = np.asarray(x, dtype=float)
    K = x.size
    if not (1 <= k <= K):
        raise ValueError(f"need 1 <= k <= K, got k={k}, K={K}")
    if not (0.0 <= sigma <= k / K + 1e-15):
        raise ValueError(f"sigma={sigma} outside [0, k/K]")
    p = np.full(K, float(sigma))
    budget = residual_budget(k, K, sigma)
    head = 1.0 - sigma
    if budget <= 0 or head <= 0:
        return p
    order = np.concatenate((np.flatnonzero(x > 0), np.flatnonzero(x <= 0)))
    n_full = min(int(budget // head), K)
    p[order[:n_full]] = 1.0
    rest = budget - n_full * head
    if n_full < K and rest > 0:
        p[order[n_full]] += rest
    return p


def regret_bound(T: int, K: int, k: int, sigmas=None, eta: Optional[float] = None) -> float:
    """Upper bound on E3CS regret after T rounds.

    ``sigmas`` is a scalar or the per-round quotas (default 0). With ``eta``
    given the bound is ``eta * R + K ln K / eta`` where ``R = sum_t (k - K sigma_t)``;
    without it the minimizing eta is used, giving ``2 sqrt(K R ln K)``.
    """
    if sigmas is None:
        sigmas = 0.0
    s = np.broadcast_to(np.asarray(sigmas, dtype=float), (T,)) if np.ndim(sigmas) == 0 else np.asarray(sigmas, float)
    if s.size != T:
        raise ValueError(f"expected {T} quotas, got {s.size}")
    if np.any(s < 0) or np.any(s > k / K + 1e-15):
        raise ValueError("quota outside [0, k/K]")
    residual = float(np.sum(k - K * s))
    if eta is None:
        if tuned_eta(s, K, k) is None:
            return 0.0
        return 2.0 * math.sqrt(K * residual * math.log(K))
    if not (0.0 < eta < 1.0):
        raise ValueError(f"eta={eta} outside (0, 1)")
    return eta * residual + K * math.log(K) / eta


@dataclass
class RegretLedger:
    """Per-round expected participation of the oracle and of the policy."""

    optimal: list = field(default_factory=list)
    achieved: list = field(default_factory=list)

    @property
    def rounds(self) -> int:
        return len(self.achieved)

    @property
    def regret(self) -> float:
        return float(np.sum(self.optimal) - np.sum(self.achieved))

    def cumulative_regret(self) -> np.ndarray:
        return np.cumsum(self.optimal) - np.cumsum(self.achieved)


def accumulate(ledger: RegretLedger, probs, x, k: int, sigma: float) -> RegretLedger:
    """Add one round: oracle increment ``p* . x`` and policy increment ``p . x``."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(probs, dtype=float)
    ledger.optimal.append(float(hindsight_optimal(x, k, sigma) @ x))
    ledger.achieved.append(float(p @ x))
    return ledger


def success_ratio(effective_counts: Sequence[int], k: int) -> float:
    counts = np.asarray(effective_counts, dtype=float)
    return float(counts.sum() / (counts.size * k))


def quartiles(values) -> dict:
    q = np.percentile(np.asarray(values, dtype=float), [0, 25, 50, 75, 100])
    return {"min": q[0], "q1": q[1], "median": q[2], "q3": q[3], "max": q[4], "iqr": q[3] - q[1]}


def summarize(records, k: int, K: int, groups: Optional[Sequence[int]] = None) -> dict:
    """Aggregate a run's round records.

    Returns success ratio, CEP, per-client selection counts and, when client
    ``groups`` are given, selection-count quartiles per group.
    """
    if not records:
        raise ValueError("no records to summarize")
    counts = np.zeros(K, dtype=int)
    for r in records:
        counts[np.asarray(r.selected, dtype=int)] += 1
    effective = [r.effective_count for r in records]
    out = {
        "rounds": len(records),
        "success_ratio": success_ratio(effective, k),
        "cep": int(np.sum(effective)),
        "selection_counts": counts.tolist(),
    }
    if groups is not None:
        groups = np.asarray(groups)
        out["group_count_quartiles"] = {
            int(g): {key: float(v) for key, v in quartiles(counts[groups == g]).items()} for g in np.unique(groups)
        }
        out["group_selection_share"] = {
            int(g): float(counts[groups == g].sum() / counts.sum()) for g in np.unique(groups)
        }
    return out
