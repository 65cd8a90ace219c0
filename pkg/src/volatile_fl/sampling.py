"""Drawing exactly k distinct clients from a probability allocation."""

from __future__ import annotations

import numpy as np

_SUM_TOL = 1e-9
# p this close to one is treated as a certain inclusion
_CERTAIN = 1.0 - 1e-12


def _validate(probs, k: int) -> np.ndarray:
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1:
        raise ValueError("probs must be 1-d")
    if not (1 <= k <= p.size):
        raise ValueError(f"need 1 <= k <= K, got k={k}, K={p.size}")
    if not np.all(np.isfinite(p)) or np.any(p < 0) or np.any(p > 1 + _SUM_TOL):
        raise ValueError("probabilities must lie in [0, 1]")
    if abs(p.sum() - k) > _SUM_TOL:
        raise ValueError(f"probabilities sum to {p.sum()!r}, expected {k}")
    return np.minimum(p, 1.0)


def sample_exact_marginal_many(probs, k: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` independent systematic PPS samples as an ``(n, K)`` boolean mask.

    Per sample: clients are randomly permuted, their probabilities laid end
    to end on ``[0, k)``, and the points ``u, u+1, ..., u+k-1``
    (``u ~ U[0,1)``) pick the clients whose intervals they land in. Since no
    interval is longer than one, no client is picked twice and client ``i``
    is included with probability exactly ``probs[i]``.
    """
    p = _validate(probs, k)
    K = p.size
    certain = p >= _CERTAIN
    rest = np.flatnonzero(~certain)
    m = k - int(certain.sum())
    mask = np.zeros((n, K), dtype=bool)
    mask[:, certain] = True
    if m <= 0 or n == 0:
        if m < 0:
            raise ValueError("more certain clients than k")
        return mask
    # random permutation per row
    order = rest[np.argsort(rng.random((n, rest.size)), axis=1)]
    cum = np.cumsum(p[order], axis=1)
    cum *= m / cum[:, -1:]
    cum[:, -1] = m
    upper = np.ceil(cum - rng.random((n, 1)))
    hits = np.diff(upper, axis=1, prepend=0.0)
    if np.any(hits > 1):
        raise RuntimeError("systematic sampling hit a client twice")
    rows = np.broadcast_to(np.arange(n)[:, None], order.shape)
    mask[rows, order] = hits == 1
    return mask


def sample_exact_marginal(probs, k: int, rng: np.random.Generator) -> np.ndarray:
    """One systematic PPS sample of k clients; sorted ids. See :func:`sample_exact_marginal_many`."""
    out = np.flatnonzero(sample_exact_marginal_many(probs, k, 1, rng)[0])
    assert out.size == k
    return out


def sample_sequential(probs, k: int, rng: np.random.Generator) -> np.ndarray:
    """k successive draws proportional to the remaining probabilities.

    Matches the usual ``multinomial(p, k, replacement=False)`` routine.
    Marginal inclusion probabilities only approximate ``probs``.
    """
    p = _validate(probs, k).copy()
    chosen = []
    for _ in range(k):
        total = p.sum()
        cum = np.cumsum(p)
        i = int(np.searchsorted(cum, rng.random() * total, side="right"))
        i = min(i, p.size - 1)
        while p[i] == 0:  # guard the float edge at the top of the range
            i -= 1
        chosen.append(i)
        p[i] = 0.0
    return np.sort(np.array(chosen, dtype=int))


_SAMPLERS = {"exact": sample_exact_marginal, "sequential": sample_sequential}


def get_sampler(name: str):
    try:
        return _SAMPLERS[name]
    except KeyError:
        raise ValueError(f"unknown sampler {name!r}; choose from {sorted(_SAMPLERS)}") from None
