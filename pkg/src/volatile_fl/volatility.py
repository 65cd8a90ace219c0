"""Heterogeneous, dropout-prone client population."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class ClientProfile:
    id: int
    success_rate: float
    epochs: int
    data_size: int
    weight: float
    group: int = 0


@dataclass
class PopulationSpec:
    """Clients split into index blocks, one block per (fraction, success rate) class."""

    K: int = 100
    classes: Sequence[tuple] = ((0.25, 0.1), (0.25, 0.3), (0.25, 0.6), (0.25, 0.9))
    epoch_choices: Sequence[int] = (1, 2, 3, 4)
    data_size: int = 500

    def class_sizes(self) -> list[int]:
        fractions = [float(f) for f, _ in self.classes]
        if abs(sum(fractions) - 1.0) > 1e-9:
            raise ValueError(f"class fractions sum to {sum(fractions)}, expected 1")
        sizes = [f * self.K for f in fractions]
        rounded = [int(round(s)) for s in sizes]
        if any(abs(s - r) > 1e-9 for s, r in zip(sizes, rounded)) or sum(rounded) != self.K:
            raise ValueError(f"K={self.K} does not divide into class fractions {fractions}")
        return rounded

    def validate(self) -> None:
        if self.K < 1:
            raise ValueError("K must be positive")
        self.class_sizes()
        for _, rate in self.classes:
            if not 0.0 <= float(rate) <= 1.0:
                raise ValueError(f"success rate {rate} outside [0, 1]")
        if not self.epoch_choices or any(int(e) < 1 for e in self.epoch_choices):
            raise ValueError("epoch choices must be positive integers")
        if self.data_size < 1:
            raise ValueError("data_size must be positive")


def gen_population(spec: PopulationSpec, rng: np.random.Generator) -> list[ClientProfile]:
    """Build K profiles; classes by index block, epochs drawn uniformly and independently."""
    spec.validate()
    sizes = spec.class_sizes()
    rates = np.repeat([float(r) for _, r in spec.classes], sizes)
    groups = np.repeat(np.arange(len(sizes)), sizes)
    epochs = rng.choice(np.asarray(spec.epoch_choices, dtype=int), size=spec.K)
    total = spec.K * spec.data_size
    return [
        ClientProfile(
            id=i,
            success_rate=float(rates[i]),
            epochs=int(epochs[i]),
            data_size=spec.data_size,
            weight=spec.data_size / total,
            group=int(groups[i]),
        )
        for i in range(spec.K)
    ]


def success_rates(profiles: Sequence[ClientProfile]) -> np.ndarray:
    return np.array([c.success_rate for c in profiles], dtype=float)


def draw_status(profiles: Sequence[ClientProfile], rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli outcome for every client (1 = model returned in time)."""
    rho = success_rates(profiles)
    return (rng.random(rho.size) < rho).astype(np.int8)
