"""Desk-scale federated training with deadline-based aggregation.

The model is multinomial logistic regression; parameters are one flat
vector holding the ``C x m`` weight matrix (row-major) followed by the
``C`` biases.

A round runs: allocation, sampling, status draw, local training of the
selected clients that succeed, aggregation, feedback to the policy, and
logging. A client whose status bit is 0 never produces a model; the bit
stands in for missing the deadline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import metrics, rng as rngs
from .datagen import ClientShard
from .selection import Policy, ProbAllocation
from .volatility import ClientProfile, draw_status


@dataclass
class UpdateConfig:
    learning_rate: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 40
    gamma: float = 0.0  # proximal coefficient; 0 is plain FedAvg

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")


def n_params(C: int, m: int) -> int:
    return C * m + C


def zeros(C: int, m: int) -> np.ndarray:
    return np.zeros(n_params(C, m))


INIT_SCHEMES = ("glorot", "zeros")


def init_params(C: int, m: int, rng: np.random.Generator, scheme: str = "glorot") -> np.ndarray:
    """Initial model: Glorot-uniform weights and zero biases, or all zeros."""
    if scheme == "zeros":
        return zeros(C, m)
    if scheme != "glorot":
        raise ValueError(f"unknown init scheme {scheme!r}; choose from {INIT_SCHEMES}")
    theta = zeros(C, m)
    limit = np.sqrt(6.0 / (m + C))
    theta[: C * m] = rng.uniform(-limit, limit, C * m)
    return theta


def _split(theta: np.ndarray, m: int):
    d = theta.size
    if d % (m + 1):
        raise ValueError(f"parameter size {d} does not match feature dim {m}")
    C = d // (m + 1)
    return theta[: C * m].reshape(C, m), theta[C * m :], C


def logits(theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    W, b, _ = _split(theta, X.shape[1])
    return X @ W.T + b


def _softmax_xent(z: np.ndarray, y: np.ndarray):
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    s = ez.sum(axis=1, keepdims=True)
    n = y.shape[0]
    loss = float(np.mean(np.log(s[:, 0]) - z[np.arange(n), y]))
    probs = ez / s
    return loss, probs


def loss_and_grad(
    theta: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    prox_center: Optional[np.ndarray] = None,
    gamma: float = 0.0,
):
    """Mean cross-entropy over the batch, plus ``gamma/2 * ||theta - prox_center||^2``."""
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if (prox_center is None) != (gamma == 0):
        raise ValueError("prox_center must be given exactly when gamma > 0")
    W, b, C = _split(theta, X.shape[1])
    loss, probs = _softmax_xent(X @ W.T + b, y)
    n = y.shape[0]
    probs[np.arange(n), y] -= 1.0
    probs /= n
    grad = np.concatenate(((probs.T @ X).ravel(), probs.sum(axis=0)))
    if gamma:
        if prox_center.shape != theta.shape:
            raise ValueError("prox_center dimension mismatch")
        diff = theta - prox_center
        loss += 0.5 * gamma * float(diff @ diff)
        grad += gamma * diff
    return loss, grad


def local_update(
    theta_global: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    cfg: UpdateConfig,
    epochs: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """``epochs`` passes of shuffled mini-batch SGD with momentum.

    Momentum starts at zero on every call. With ``cfg.gamma > 0`` the
    proximal term pulls toward ``theta_global``.
    """
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty shard")
    m = X.shape[1]
    theta = theta_global.copy()
    if cfg.learning_rate == 0:
        return theta
    W, b, C = _split(theta, m)  # views into theta
    vel = np.zeros_like(theta)
    vW, vb = vel[: C * m].reshape(C, m), vel[C * m :]
    gW = np.empty_like(W)
    lr, mu, B, gamma = cfg.learning_rate, cfg.momentum, cfg.batch_size, cfg.gamma
    if gamma:
        cW, cb, _ = _split(theta_global, m)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, B):
            idx = perm[start : start + B]
            xb, yb = X[idx], y[idx]
            z = xb @ W.T + b
            z -= z.max(axis=1, keepdims=True)
            np.exp(z, out=z)
            z /= z.sum(axis=1, keepdims=True)
            z[np.arange(idx.size), yb] -= 1.0
            z /= idx.size
            np.matmul(z.T, xb, out=gW)
            gb = z.sum(axis=0)
            if gamma:
                gW += gamma * (W - cW)
                gb += gamma * (b - cb)
            vW *= mu
            vW += gW
            vb *= mu
            vb += gb
            W -= lr * vW
            b -= lr * vb
    return theta


def aggregate(theta_global: np.ndarray, returned: dict, weights: Sequence[float]) -> np.ndarray:
    """Weighted aggregation where missing clients count as the current global model.

    ``returned`` maps client id to its local model; ``weights`` are the data
    shares of all clients. Written as ``theta + sum_i w_i (theta_i - theta)``,
    which equals ``sum_{returned} w_i theta_i + sum_{others} w_i theta``.
    """
    w = np.asarray(weights, dtype=float)
    if abs(w.sum() - 1.0) > 1e-9 or np.any(w < 0):
        raise ValueError(f"client weights must be nonnegative and sum to 1, got sum {w.sum()!r}")
    out = theta_global.copy()
    for i in sorted(returned):
        local = returned[i]
        if local.shape != theta_global.shape:
            raise ValueError(f"client {i} returned a model of the wrong size")
        out += w[i] * (local - theta_global)
    return out


def evaluate(theta: np.ndarray, X: np.ndarray, y: np.ndarray):
    """(accuracy, mean cross-entropy)."""
    z = logits(theta, X)
    loss, _ = _softmax_xent(z, y)
    acc = float(np.mean(np.argmax(z, axis=1) == y))
    return acc, loss


@dataclass
class RoundRecord:
    round: int
    allocation: ProbAllocation
    selected: np.ndarray
    statuses: np.ndarray  # statuses of the selected clients, aligned with ``selected``
    effective_count: int
    sigma: float
    optimal_increment: float
    expected_increment: float
    global_accuracy: Optional[float] = None
    global_loss: Optional[float] = None


@dataclass
class Federation:
    """Everything a run needs besides the policy.

    ``shards`` is None in numerical mode (selection and participation only,
    no model).
    """

    profiles: list
    k: int
    seed: int
    shards: Optional[list] = None
    update: UpdateConfig = field(default_factory=UpdateConfig)
    theta: Optional[np.ndarray] = None
    n_classes: Optional[int] = None

    def __post_init__(self):
        self.K = len(self.profiles)
        self.weights = np.array([c.weight for c in self.profiles])
        if self.shards is not None:
            if len(self.shards) != self.K:
                raise ValueError("one shard per client expected")
            self.test_x = np.concatenate([s.test_x for s in self.shards])
            self.test_y = np.concatenate([s.test_y for s in self.shards])
            m = self.test_x.shape[1]
            if self.n_classes is None:
                self.n_classes = int(max(int(s.train_y.max()) for s in self.shards) + 1)
            if self.theta is None:
                self.theta = zeros(self.n_classes, m)

    @property
    def training(self) -> bool:
        return self.shards is not None

    def local_losses(self, ids: np.ndarray) -> np.ndarray:
        """Loss of the current global model on each client's training shard."""
        out = []
        for i in ids:
            s = self.shards[int(i)]
            out.append(evaluate(self.theta, s.train_x, s.train_y)[1])
        return np.array(out)


def run_round(fed: Federation, policy: Policy, t: int, ledger: Optional[metrics.RegretLedger] = None) -> RoundRecord:
    """Advance the federation and the policy by one round (t is 1-based)."""
    losses = fed.local_losses if (policy.needs_losses and fed.training) else None
    allocation, selected = policy.select(t, rngs.stream(fed.seed, rngs.SAMPLE, t), losses=losses)
    x = draw_status(fed.profiles, rngs.stream(fed.seed, rngs.STATUS, t))
    outcomes = x[selected]
    returned_ids = selected[outcomes == 1]

    accuracy = loss = None
    if fed.training:
        returned = {}
        for i in returned_ids:
            i = int(i)
            shard = fed.shards[i]
            returned[i] = local_update(
                fed.theta,
                shard.train_x,
                shard.train_y,
                fed.update,
                fed.profiles[i].epochs,
                rngs.stream(fed.seed, rngs.LOCAL, t, i),
            )
        fed.theta = aggregate(fed.theta, returned, fed.weights)
        accuracy, loss = evaluate(fed.theta, fed.test_x, fed.test_y)

    policy.observe(t, allocation, selected, outcomes)

    sigma = policy.sigma(t)
    opt = float(metrics.hindsight_optimal(x, fed.k, sigma) @ x)
    got = float(allocation.probs @ x)
    if ledger is not None:
        ledger.optimal.append(opt)
        ledger.achieved.append(got)
    return RoundRecord(
        round=t,
        allocation=allocation,
        selected=selected,
        statuses=outcomes,
        effective_count=int(returned_ids.size),
        sigma=sigma,
        optimal_increment=opt,
        expected_increment=got,
        global_accuracy=accuracy,
        global_loss=loss,
    )
