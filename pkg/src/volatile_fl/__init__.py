"""Federated learning with dropout-prone clients and Exp3-based client selection."""

from .selection import (
    E3CS,
    ExpWeightState,
    FairnessSchedule,
    FedCS,
    PolicyKind,
    PowD,
    ProbAllocation,
    RandomPolicy,
    estimate,
    fedcs_policy,
    powd_policy,
    prob_alloc,
    random_policy,
    solve_alpha,
    update_weights,
)
from .sampling import sample_exact_marginal, sample_sequential
from .metrics import RegretLedger, accumulate, hindsight_optimal, regret_bound, summarize

__version__ = "0.1.0"
