"""Client selection policies.

The main policy is E3CS: Exp3 with multiple plays, where each round the
server allocates a selection probability to every client, reserves a
fairness quota ``sigma`` for all of them, and spreads the residual budget
``k - K*sigma`` in proportion to exponential weights. Weights that would
push a probability above one are capped (the "overflow" set), and capped
clients are frozen in the weight update.

Baselines: Random (uniform k/K), FedCS (prophetic top-k by success rate)
and pow-d (top-k by local loss among d random candidates).

Weights are stored as natural logs; all allocation formulas are ratios, so
they are evaluated on weights shifted by their maximum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import sampling

# Headroom for detecting probability overflow; uniform weights at k == K sit exactly on 1.
_OVERFLOW_TOL = 1e-12
_CASE_TOL = 1e-12


def residual_budget(k: int, K: int, sigma: float) -> float:
    """``k - K*sigma``, with rounding noise at full quota snapped to zero."""
    budget = k - K * sigma
    return 0.0 if budget <= 1e-12 * k else budget


@dataclass(frozen=True)
class FairnessSchedule:
    """Per-round fairness quota sigma_t.

    ``before`` applies to rounds ``t <= switch_round`` and ``after`` to later
    rounds. A constant schedule has no switch.
    """

    before: float
    after: Optional[float] = None
    switch_round: Optional[int] = None

    @classmethod
    def constant(cls, value: float) -> "FairnessSchedule":
        return cls(before=float(value))

    @classmethod
    def step(cls, before: float, after: float, switch_round: int) -> "FairnessSchedule":
        return cls(before=float(before), after=float(after), switch_round=int(switch_round))

    @property
    def is_constant(self) -> bool:
        return self.switch_round is None

    def __call__(self, t: int) -> float:
        if self.switch_round is None or t <= self.switch_round:
            return self.before
        return self.after

    def values(self, T: int) -> np.ndarray:
        """sigma_t for rounds 1..T."""
        return np.array([self(t) for t in range(1, T + 1)], dtype=float)

    def validate(self, k: int, K: int) -> None:
        cap = k / K
        for name, v in (("before", self.before), ("after", self.after)):
            if v is None:
                continue
            if not (0.0 <= v <= cap + 1e-15):
                raise ValueError(f"fairness quota {name}={v} outside [0, k/K={cap}]")
        if (self.after is None) != (self.switch_round is None):
            raise ValueError("step schedule needs both 'after' and 'switch_round'")


@dataclass
class ExpWeightState:
    """Exponential weights of all clients, stored as ``log_weights``."""

    log_weights: np.ndarray
    round: int = 1

    @classmethod
    def initial(cls, K: int) -> "ExpWeightState":
        # w_{i,1} = 1
        return cls(log_weights=np.zeros(K), round=1)

    @classmethod
    def from_weights(cls, weights: Sequence[float], round: int = 1) -> "ExpWeightState":
        w = np.asarray(weights, dtype=float)
        _check_weights(w)
        return cls(log_weights=np.log(w), round=round)

    @property
    def K(self) -> int:
        return self.log_weights.shape[0]

    @property
    def weights(self) -> np.ndarray:
        """Linear weights. May overflow to inf for long runs; prefer relative_weights."""
        with np.errstate(over="ignore"):
            return np.exp(self.log_weights)

    def relative_weights(self) -> np.ndarray:
        """Weights divided by their maximum, in (0, 1]."""
        return np.exp(self.log_weights - self.log_weights.max())


@dataclass
class ProbAllocation:
    """One round's selection probabilities.

    ``overflow`` marks the capped clients (S_t). ``log_alpha`` is the log of
    the cap parameter in the units of the weights that were passed in, or
    None when nothing overflowed.
    """

    probs: np.ndarray
    overflow: np.ndarray
    log_alpha: Optional[float] = None

    @property
    def overflow_set(self) -> frozenset:
        return frozenset(int(i) for i in np.flatnonzero(self.overflow))

    @property
    def alpha(self) -> Optional[float]:
        if self.log_alpha is None:
            return None
        return math.exp(self.log_alpha)

    @classmethod
    def uniform(cls, k: int, K: int) -> "ProbAllocation":
        return cls(probs=np.full(K, k / K), overflow=np.zeros(K, dtype=bool))

    @classmethod
    def indicator(cls, selected: Sequence[int], K: int) -> "ProbAllocation":
        """Degenerate allocation of a deterministic selection."""
        p = np.zeros(K)
        p[np.asarray(selected, dtype=int)] = 1.0
        return cls(probs=p, overflow=np.zeros(K, dtype=bool))


def _check_weights(w: np.ndarray) -> None:
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a nonempty 1-d array")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("weights must be finite and strictly positive")


def _check_quota(k: int, K: int, sigma: float) -> None:
    if not (1 <= k <= K):
        raise ValueError(f"need 1 <= k <= K, got k={k}, K={K}")
    if not (0.0 <= sigma <= k / K + 1e-15):
        raise ValueError(f"sigma={sigma} outside [0, k/K={k / K}]")


def _solve_log_alpha(logrel: np.ndarray, k: int, sigma: float):
    """Capping case walk in log space.

    Returns ``(log_alpha, capped, log_uncapped_sum, denom)`` where ``capped``
    holds the indices of the overflowing clients and ``denom`` is
    ``k - K*sigma - |capped| * (1 - sigma)``.
    """
    K = logrel.size
    budget = residual_budget(k, K, sigma)
    if budget <= 0:
        raise ValueError("no residual budget: sigma == k/K never overflows")
    head = 1.0 - sigma
    order = np.argsort(logrel, kind="stable")
    ls = logrel[order]
    log_uncapped = np.logaddexp.accumulate(ls)
    # last index of each group of equal psi
    ends = np.flatnonzero(np.append(ls[1:] != ls[:-1], True))
    n_capped = K - (ends + 1)
    denom = budget - n_capped * head
    with np.errstate(divide="ignore", invalid="ignore"):
        log_alpha = np.where(denom > 0, log_uncapped[ends] - np.log(denom), np.nan)
    log_head = math.log(head)
    lo = ls[ends] - log_head
    hi = np.append(ls[ends[1:]] - log_head, np.inf)
    # boundary solutions (alpha == psi_v) are shared by adjacent cases; allow rounding slack
    ok = (denom > 0) & (log_alpha >= lo - _CASE_TOL) & (log_alpha < hi + _CASE_TOL)
    hits = np.flatnonzero(ok)
    if hits.size == 0:
        raise RuntimeError("no capping case validated; allocation inputs are inconsistent")
    h = hits[0]
    return float(log_alpha[h]), order[ends[h] + 1 :], float(log_uncapped[ends[h]]), float(denom[h])


def solve_alpha(weights: Sequence[float], k: int, sigma: float) -> float:
    """Largest cap ``alpha`` keeping every probability at most one.

    Solves ``alpha / sum_j min(w_j, (1 - sigma) * alpha) = 1 / (k - K*sigma)``
    by walking the cases of which clients are capped. With
    ``psi = w / (1 - sigma)`` sorted ascending, case ``v`` assumes clients
    with ``psi <= psi_v`` stay uncapped and the rest are capped; the first
    case whose solution satisfies ``psi_v <= alpha < psi_{v+1}`` wins.
    Equal psi values form a single case.

    Only meaningful when the uncapped allocation overflows.
    """
    w = np.asarray(weights, dtype=float)
    _check_weights(w)
    _check_quota(k, w.size, sigma)
    top = float(w.max())
    log_alpha, _, _, _ = _solve_log_alpha(np.log(w / top), k, sigma)
    return math.exp(log_alpha) * top


def _allocate_log(logrel: np.ndarray, k: int, sigma: float):
    """Allocation on log-weights shifted so their max is 0. Returns (probs, overflow, log_alpha)."""
    K = logrel.size
    overflow = np.zeros(K, dtype=bool)
    budget = residual_budget(k, K, sigma)
    if budget <= 0:
        return np.full(K, k / K), overflow, None
    log_total = float(np.logaddexp.reduce(logrel))
    if sigma + budget * math.exp(float(logrel.max()) - log_total) <= 1.0 + _OVERFLOW_TOL:
        probs = sigma + budget * np.exp(logrel - log_total)
        return np.minimum(probs, 1.0), overflow, None
    if k == K:
        # every client is certain; treat the whole population as capped
        return np.ones(K), np.ones(K, dtype=bool), None
    log_alpha, capped, log_uncapped, denom = _solve_log_alpha(logrel, k, sigma)
    overflow[capped] = True
    # uncapped mass is S_v and the capped clients add |S|(1-sigma)alpha, so the
    # residual share of an uncapped client reduces to denom * w_j / S_v
    probs = np.ones(K)
    free = ~overflow
    probs[free] = np.minimum(sigma + denom * np.exp(logrel[free] - log_uncapped), 1.0)
    return probs, overflow, log_alpha


def prob_alloc(k: int, sigma: float, weights) -> ProbAllocation:
    """Fairness-constrained, capped probability allocation for one round.

    ``weights`` is an :class:`ExpWeightState` or an array of positive
    linear weights. Returns probabilities with ``sum == k`` and
    ``sigma <= p <= 1``.
    """
    if isinstance(weights, ExpWeightState):
        logw = np.asarray(weights.log_weights, dtype=float)
        if logw.ndim != 1 or logw.size == 0 or not np.all(np.isfinite(logw)):
            raise ValueError("log-weights must be a nonempty finite 1-d array")
        shift = float(logw.max())
        logrel = logw - shift
    else:
        w = np.asarray(weights, dtype=float)
        _check_weights(w)
        top = float(w.max())
        # dividing first keeps power-of-two rescaling bit-exact
        logrel = np.log(w / top)
        shift = math.log(top)
    _check_quota(k, logrel.size, sigma)
    probs, overflow, log_alpha = _allocate_log(logrel, k, sigma)
    if log_alpha is not None:
        log_alpha += shift
    return ProbAllocation(probs=probs, overflow=overflow, log_alpha=log_alpha)


def estimate(x: float, p: float, selected: bool) -> float:
    """Importance-weighted success estimate: ``x / p`` if selected, else 0."""
    if p <= 0:
        raise ValueError("selection probability must be positive")
    return float(x) / p if selected else 0.0


def estimates(x: np.ndarray, probs: np.ndarray, selected: np.ndarray) -> np.ndarray:
    """Vectorized :func:`estimate` over all clients; ``selected`` is a boolean mask."""
    x = np.asarray(x, dtype=float)
    probs = np.asarray(probs, dtype=float)
    selected = np.asarray(selected, dtype=bool)
    if np.any(probs[selected] <= 0):
        raise ValueError("a selected client has non-positive probability")
    out = np.zeros_like(probs)
    out[selected] = x[selected] / probs[selected]
    return out


def update_exponents(est: np.ndarray, k: int, K: int, sigma: float, eta: float) -> np.ndarray:
    return residual_budget(k, K, sigma) * eta * np.asarray(est, dtype=float) / K


def update_weights(
    state: ExpWeightState,
    est: np.ndarray,
    overflow: np.ndarray,
    eta: float,
    k: int,
    sigma: float,
) -> ExpWeightState:
    """Exponential weight update; capped clients keep their weight."""
    if not (0.0 < eta < 1.0):
        raise ValueError(f"learning rate eta={eta} outside (0, 1)")
    est = np.asarray(est, dtype=float)
    if est.shape != state.log_weights.shape or not np.all(np.isfinite(est)):
        raise ValueError("estimates must be finite, one per client")
    K = state.K
    step = update_exponents(est, k, K, sigma, eta)
    step[np.asarray(overflow, dtype=bool)] = 0.0
    logw = state.log_weights + step
    if not np.all(np.isfinite(logw)):
        raise FloatingPointError("log-weight overflow")
    return ExpWeightState(log_weights=logw, round=state.round + 1)


def tuned_eta(sigmas: Sequence[float], K: int, k: int) -> Optional[float]:
    """Learning rate minimizing the regret bound; None if the residual budget is zero."""
    residual = float(np.sum(k - K * np.asarray(sigmas, dtype=float)))
    if residual <= 0:
        return None
    return math.sqrt(K * math.log(K) / residual)


def random_policy(k: int, K: int) -> ProbAllocation:
    if not (1 <= k <= K):
        raise ValueError(f"need 1 <= k <= K, got k={k}, K={K}")
    return ProbAllocation.uniform(k, K)


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -score keeps the lowest index first among ties
    return np.sort(np.argsort(-scores, kind="stable")[:k])


def fedcs_policy(success_rates: Sequence[float], k: int) -> np.ndarray:
    """The k clients with the highest success rate (lowest index wins ties)."""
    rates = np.asarray(success_rates, dtype=float)
    if not (1 <= k <= rates.size):
        raise ValueError(f"need 1 <= k <= K, got k={k}, K={rates.size}")
    return _top_k(rates, k)


def powd_policy(
    d: int,
    k: int,
    local_losses: Callable[[np.ndarray], np.ndarray],
    K: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw ``d`` distinct candidates uniformly, keep the ``k`` with highest loss.

    ``local_losses`` maps an array of candidate ids to their losses on the
    current global model.
    """
    if not (k <= d <= K):
        raise ValueError(f"need k <= d <= K, got k={k}, d={d}, K={K}")
    candidates = np.sort(rng.choice(K, size=d, replace=False))
    losses = np.asarray(local_losses(candidates), dtype=float)
    if losses.shape != candidates.shape:
        raise ValueError("one loss per candidate expected")
    return np.sort(candidates[_top_k(losses, k)])


# ---------------------------------------------------------------------------
# Stateful policy objects driven by the round loop.


class Policy:
    """Common surface: ``select`` before the round, ``observe`` after it."""

    name = "policy"
    needs_losses = False

    def __init__(self, k: int, K: int):
        if not (1 <= k <= K):
            raise ValueError(f"need 1 <= k <= K, got k={k}, K={K}")
        self.k = k
        self.K = K

    def sigma(self, t: int) -> float:
        return 0.0

    def select(self, t: int, rng: np.random.Generator, losses=None):
        """Return ``(allocation, selected ids)`` for round ``t``."""
        raise NotImplementedError

    def observe(self, t: int, allocation: ProbAllocation, selected: np.ndarray, outcomes: np.ndarray) -> None:
        """Feedback: ``outcomes[j]`` is the status of ``selected[j]``. Default ignores it."""


class E3CS(Policy):
    name = "E3CS"

    def __init__(
        self,
        k: int,
        K: int,
        eta: float = 0.5,
        schedule: FairnessSchedule = FairnessSchedule.constant(0.0),
        sampler: str = "exact",
        strict_exponent: bool = False,
    ):
        super().__init__(k, K)
        if not (0.0 < eta < 1.0):
            raise ValueError(f"learning rate eta={eta} outside (0, 1)")
        schedule.validate(k, K)
        self.eta = eta
        self.schedule = schedule
        self.sampler = sampling.get_sampler(sampler)
        self.strict_exponent = strict_exponent
        self.state = ExpWeightState.initial(K)
        self.exponent_violations = 0

    def sigma(self, t: int) -> float:
        return self.schedule(t)

    def select(self, t, rng, losses=None):
        alloc = prob_alloc(self.k, self.sigma(t), self.state)
        return alloc, self.sampler(alloc.probs, self.k, rng)

    def observe(self, t, allocation, selected, outcomes):
        x = np.zeros(self.K)
        x[selected] = outcomes
        mask = np.zeros(self.K, dtype=bool)
        mask[selected] = True
        est = estimates(x, allocation.probs, mask)
        sigma = self.sigma(t)
        exps = update_exponents(est, self.k, self.K, sigma, self.eta)
        bad = int(np.count_nonzero((exps > 1.0) & ~allocation.overflow))
        if bad and self.strict_exponent:
            raise ArithmeticError(f"round {t}: {bad} weight-update exponents exceed 1")
        self.exponent_violations += bad
        self.state = update_weights(self.state, est, allocation.overflow, self.eta, self.k, sigma)


class RandomPolicy(Policy):
    name = "Random"

    def __init__(self, k: int, K: int, sampler: str = "exact"):
        super().__init__(k, K)
        self.sampler = sampling.get_sampler(sampler)

    def select(self, t, rng, losses=None):
        alloc = random_policy(self.k, self.K)
        return alloc, self.sampler(alloc.probs, self.k, rng)


class FedCS(Policy):
    """Prophetic: knows every client's success rate."""

    name = "FedCS"

    def __init__(self, k: int, success_rates: Sequence[float]):
        rates = np.asarray(success_rates, dtype=float)
        super().__init__(k, rates.size)
        self.chosen = fedcs_policy(rates, k)

    def select(self, t, rng, losses=None):
        return ProbAllocation.indicator(self.chosen, self.K), self.chosen.copy()


class PowD(Policy):
    name = "pow-d"
    needs_losses = True

    def __init__(self, k: int, K: int, d: int):
        super().__init__(k, K)
        if not (k <= d <= K):
            raise ValueError(f"need k <= d <= K, got k={k}, d={d}, K={K}")
        self.d = d

    def select(self, t, rng, losses=None):
        if losses is None:
            raise ValueError("pow-d needs a local-loss oracle (training mode only)")
        chosen = powd_policy(self.d, self.k, losses, self.K, rng)
        return ProbAllocation.indicator(chosen, self.K), chosen


@dataclass(frozen=True)
class PolicyKind:
    """Declarative policy description, as named in experiment configs.

    ``kind`` is one of ``"E3CS"``, ``"Random"``, ``"FedCS"``, ``"pow-d"``.
    For E3CS, ``quota`` is either a constant factor of k/K or ``"inc"``
    (zero for the first quarter of the run, k/K afterwards); ``eta`` is a
    float or ``"tuned"``.
    """

    kind: str
    quota: object = 0.0
    eta: object = 0.5
    d: Optional[int] = None
    label: str = field(default="", compare=False)

    @classmethod
    def parse(cls, name: str, eta: object = 0.5, d: Optional[int] = None) -> "PolicyKind":
        """Parse names such as ``E3CS-0``, ``E3CS-0.5``, ``E3CS-inc``, ``Random``, ``FedCS``, ``pow-d``."""
        low = name.strip().lower()
        if low.startswith("e3cs-"):
            suffix = name.strip()[5:]
            quota = "inc" if suffix.lower() == "inc" else float(suffix)
            return cls("E3CS", quota=quota, eta=eta, label=name.strip())
        if low == "random":
            return cls("Random", label="Random")
        if low == "fedcs":
            return cls("FedCS", label="FedCS")
        if low in ("pow-d", "powd"):
            return cls("pow-d", d=d, label="pow-d")
        raise ValueError(f"unknown policy name {name!r}")

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.kind == "E3CS":
            return f"E3CS-{self.quota}"
        return self.kind

    def schedule(self, k: int, K: int, T: int) -> FairnessSchedule:
        if self.quota == "inc":
            return FairnessSchedule.step(0.0, k / K, T // 4)
        return FairnessSchedule.constant(float(self.quota) * k / K)

    def resolve_eta(self, k: int, K: int, T: int) -> Optional[float]:
        if self.kind != "E3CS":
            return None
        if self.eta == "tuned":
            eta = tuned_eta(self.schedule(k, K, T).values(T), K, k)
            # sigma == k/K: eta is irrelevant, any valid value reproduces uniform selection
            return 0.5 if eta is None else min(eta, 1.0 - 1e-12)
        return float(self.eta)

    def build(self, k: int, K: int, T: int, success_rates=None, sampler: str = "exact") -> Policy:
        if self.kind == "E3CS":
            return E3CS(k, K, eta=self.resolve_eta(k, K, T), schedule=self.schedule(k, K, T), sampler=sampler)
        if self.kind == "Random":
            return RandomPolicy(k, K, sampler=sampler)
        if self.kind == "FedCS":
            if success_rates is None:
                raise ValueError("FedCS needs the clients' success rates")
            return FedCS(k, success_rates)
        if self.kind == "pow-d":
            return PowD(k, K, self.d if self.d is not None else min(K, 2 * k))
        raise ValueError(f"unknown policy kind {self.kind!r}")
