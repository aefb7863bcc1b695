"""Enumerable toy categorical datasets and sample-quality metrics."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import norm

TRUTH_BUDGET = 10**6


class BudgetExceeded(ValueError):
    pass


def one_hot(states: np.ndarray, K: int) -> np.ndarray:
    """Integer states ``[..., D]`` to one-hot ``[..., D, K]`` float64."""
    return np.eye(K)[np.asarray(states)]


def state_index(states: np.ndarray, K: int) -> np.ndarray:
    """Base-``K`` index of each state, most significant position first."""
    states = np.asarray(states, dtype=np.int64)
    D = states.shape[-1]
    return states @ (K ** np.arange(D - 1, -1, -1, dtype=np.int64))


@dataclass
class CategoricalDataset:
    name: str
    D: int
    K: int
    sample_states: Callable[[np.random.Generator, int], np.ndarray]
    is_valid: Callable[[np.ndarray], np.ndarray]
    support: np.ndarray | None = None  # [S, D] states with nonzero mass
    support_probs: np.ndarray | None = None
    label: Callable[[np.ndarray], np.ndarray] | None = None
    extra: dict = field(default_factory=dict)

    @property
    def enumerable(self) -> bool:
        return self.support is not None

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """One-hot draws ``[n, D, K]``."""
        return one_hot(self.sample_states(rng, n), self.K)

    def truth_table(self) -> np.ndarray:
        """Dense probability vector over all ``K**D`` states."""
        if self.support is None:
            raise BudgetExceeded(f"{self.name}: no exact distribution")
        if self.K**self.D > TRUTH_BUDGET:
            raise BudgetExceeded(f"{self.name}: K^D = {self.K ** self.D} states")
        p = np.zeros(self.K**self.D)
        np.add.at(p, state_index(self.support, self.K), self.support_probs)
        return p


def make_parity_dataset(D: int, K: int) -> CategoricalDataset:
    """Uniform over states whose category indices sum to 0 mod K."""
    if K**D > TRUTH_BUDGET:
        raise BudgetExceeded(f"parity({D}, {K}) has {K ** D} states")

    def sample_states(rng, n):
        free = rng.integers(0, K, size=(n, D - 1))
        last = (-free.sum(axis=1)) % K
        return np.concatenate([free, last[:, None]], axis=1)

    def is_valid(states):
        return np.asarray(states).sum(axis=-1) % K == 0

    all_states = np.array(list(itertools.product(range(K), repeat=D)), dtype=np.int64)
    support = all_states[is_valid(all_states)]
    probs = np.full(len(support), 1.0 / len(support))
    return CategoricalDataset(f"parity({D},{K})", D, K, sample_states, is_valid, support, probs)


def make_bars_dataset(G: int) -> CategoricalDataset:
    """``G x G`` binary images holding exactly one full row or one full column."""
    if G < 1:
        raise ValueError("G must be >= 1")
    bars = []
    for i in range(G):
        img = np.zeros((G, G), dtype=np.int64)
        img[i, :] = 1
        bars.append(img.ravel())
    for j in range(G):
        img = np.zeros((G, G), dtype=np.int64)
        img[:, j] = 1
        bars.append(img.ravel())
    # G == 1: the single row and single column coincide
    support = np.unique(np.array(bars), axis=0)
    probs = np.full(len(support), 1.0 / len(support))
    keys = {tuple(s) for s in support}

    def sample_states(rng, n):
        return support[rng.integers(0, len(support), size=n)]

    def is_valid(states):
        states = np.asarray(states)
        return np.array([tuple(s) in keys for s in states.reshape(-1, G * G)])

    return CategoricalDataset(f"bars({G})", G * G, 2, sample_states, is_valid, support, probs,
                              extra={"G": G})


def make_two_class_dataset(D: int = 4, K: int = 3) -> CategoricalDataset:
    """Parity data labelled 0 when position 0 holds category 0, else 1.

    Under the data distribution class 0 has frequency ``1/K``.
    """
    ds = make_parity_dataset(D, K)
    ds.name = f"two_class({D},{K})"
    ds.label = lambda states: (np.asarray(states)[..., 0] != 0).astype(np.int64)
    return ds


DATASETS = {
    "parity": make_parity_dataset,
    "bars": make_bars_dataset,
    "two_class": make_two_class_dataset,
}


# ---------------------------------------------------------------------------
# metrics


def empirical_distribution(states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    uniq, counts = np.unique(np.asarray(states), axis=0, return_counts=True)
    return uniq, counts / counts.sum()


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Total variation between two probability vectors on the same index set."""
    return float(0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum())


def tv_to_truth(states: np.ndarray, dataset: CategoricalDataset) -> float:
    uniq, freq = empirical_distribution(states)
    truth = {tuple(s): p for s, p in zip(dataset.support, dataset.support_probs)}
    seen = {tuple(s): f for s, f in zip(uniq, freq)}
    keys = truth.keys() | seen.keys()
    return 0.5 * sum(abs(seen.get(k, 0.0) - truth.get(k, 0.0)) for k in keys)


def tv_between(states_a: np.ndarray, states_b: np.ndarray) -> float:
    ua, fa = empirical_distribution(states_a)
    ub, fb = empirical_distribution(states_b)
    a = {tuple(s): f for s, f in zip(ua, fa)}
    b = {tuple(s): f for s, f in zip(ub, fb)}
    return 0.5 * sum(abs(a.get(k, 0.0) - b.get(k, 0.0)) for k in a.keys() | b.keys())


def entropy(states: np.ndarray) -> float:
    _, freq = empirical_distribution(states)
    return float(-(freq * np.log(freq)).sum())


def wilson_interval(successes: int, n: int, level: float = 0.95) -> tuple[float, float]:
    if n == 0:
        return (0.0, 1.0)
    z = norm.ppf(0.5 + level / 2)
    p = successes / n
    denom = 1 + z**2 / n
    centre = (p + z**2 / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z**2 / (4 * n**2)) / denom
    return (float(max(0.0, centre - half)), float(min(1.0, centre + half)))


@dataclass
class EvalReport:
    n: int
    tv: float | None
    validity: float
    validity_ci: tuple[float, float]
    entropy: float
    sampler: str = ""
    nfe: int | None = None

    def to_dict(self) -> dict:
        return {
            "sampler": self.sampler, "nfe": self.nfe, "n": self.n, "tv": self.tv,
            "validity": self.validity, "validity_lo": self.validity_ci[0],
            "validity_hi": self.validity_ci[1], "entropy": self.entropy,
        }


def evaluate_states(states: np.ndarray, dataset: CategoricalDataset, sampler: str = "",
                    nfe: int | None = None) -> EvalReport:
    states = np.asarray(states)
    n = len(states)
    valid = int(np.sum(dataset.is_valid(states)))
    tv = tv_to_truth(states, dataset) if dataset.enumerable else None
    return EvalReport(n, tv, valid / n, wilson_interval(valid, n), entropy(states), sampler, nfe)
