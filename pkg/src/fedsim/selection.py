"""Collaborator-selection policies.

Each policy is an object with ``select(pool, round_idx, rng)`` returning a
sorted, duplicate-free, nonempty subset of ``pool`` and an ``observe`` hook
the engine calls at the end of a round. The module-level functions are the
stateless cores, usable on their own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DomainError


def default_k(pool_size: int) -> int:
    return min(pool_size, max(2, math.ceil(pool_size / 3)))


def _check(pool: Sequence[int], k: int | None = None) -> list[int]:
    pool = sorted(set(pool))
    if not pool:
        raise ConfigError("selection pool is empty")
    if k is not None and not 1 <= k <= len(pool):
        raise ConfigError(f"k must be in [1, {len(pool)}], got {k}")
    return pool


def select_all(pool: Sequence[int]) -> list[int]:
    return _check(pool)


def random_k(pool: Sequence[int], k: int, rng: np.random.Generator) -> list[int]:
    pool = _check(pool, k)
    return sorted(int(x) for x in rng.choice(pool, size=k, replace=False))


# --- bandits -----------------------------------------------------------------


@dataclass
class ArmStats:
    pulls: dict[int, int] = field(default_factory=dict)
    means: dict[int, float] = field(default_factory=dict)

    def record(self, arm: int, reward: float) -> None:
        n = self.pulls.get(arm, 0) + 1
        m = self.means.get(arm, 0.0)
        self.pulls[arm] = n
        self.means[arm] = m + (reward - m) / n

    def n(self, arm: int) -> int:
        return self.pulls.get(arm, 0)

    def mean(self, arm: int) -> float:
        return self.means.get(arm, 0.0)


def _greedy_key(stats: ArmStats, arm: int):
    # unpulled arms first, then higher mean, then lower id
    return (stats.n(arm) > 0, -stats.mean(arm), arm)


def epsilon_greedy(stats: ArmStats, pool: Sequence[int], k: int, epsilon: float,
                   rng: np.random.Generator) -> list[int]:
    """Fill ``k`` slots; each slot explores uniformly with probability ``epsilon``."""
    remaining = _check(pool, k)
    if not 0 <= epsilon <= 1:
        raise ConfigError(f"epsilon must be in [0, 1], got {epsilon}")
    chosen = []
    for _ in range(k):
        if rng.random() < epsilon:
            arm = remaining[int(rng.integers(len(remaining)))]
        else:
            arm = min(remaining, key=lambda a: _greedy_key(stats, a))
        chosen.append(arm)
        remaining.remove(arm)
    return sorted(chosen)


def ucb_scores(stats: ArmStats, pool: Sequence[int], c: float, round_idx: int) -> dict[int, float]:
    log_t = math.log(max(round_idx, 1))
    return {
        a: math.inf if stats.n(a) == 0 else stats.mean(a) + c * math.sqrt(log_t / stats.n(a))
        for a in pool
    }


def ucb(stats: ArmStats, pool: Sequence[int], k: int, c: float, round_idx: int) -> list[int]:
    pool = _check(pool, k)
    scores = ucb_scores(stats, pool, c, round_idx)
    return sorted(sorted(pool, key=lambda a: (-scores[a], a))[:k])


# --- k-means over training times ---------------------------------------------


def kmeans_1d(values: Mapping[int, float], n_clusters: int, rng: np.random.Generator | None = None,
              max_iter: int = 100) -> dict[int, int]:
    """Lloyd's algorithm on scalar values; returns id -> cluster index.

    Initial clusters come from cutting the sorted values at their
    ``n_clusters - 1`` widest gaps (equal values are ordered by a seeded
    shuffle when ``rng`` is given). Cluster
    indices are ordered by ascending center. Points equidistant from two
    centers keep their current cluster; a cluster left empty is reseeded
    with the point farthest from its center.
    """
    ids = list(values)
    if not 1 <= n_clusters <= len(ids):
        raise ConfigError(f"n_clusters must be in [1, {len(ids)}], got {n_clusters}")
    if rng is not None:
        ids = [ids[i] for i in rng.permutation(len(ids))]
    ids.sort(key=lambda a: values[a])
    x = np.array([values[a] for a in ids], dtype=float)
    # cut the sorted values at the n_clusters - 1 widest gaps
    cuts = np.sort(np.argsort(-np.diff(x), kind="stable")[: n_clusters - 1]) + 1
    assign = np.searchsorted(cuts, np.arange(len(x)), side="right")
    centers = np.array([x[assign == j].mean() for j in range(n_clusters)])
    for _ in range(max_iter):
        dist = np.abs(x[:, None] - centers[None, :])
        best = dist.min(axis=1)
        keep = dist[np.arange(len(x)), assign] <= best
        new = np.where(keep, assign, dist.argmin(axis=1))
        _reseed_empty(new, x, centers, n_clusters)
        if np.array_equal(new, assign):
            break
        assign = new
        centers = np.array([x[assign == j].mean() for j in range(n_clusters)])
    order = np.argsort(centers, kind="stable")
    relabel = np.empty_like(order)
    relabel[order] = np.arange(n_clusters)
    return {a: int(relabel[j]) for a, j in zip(ids, assign)}


def _reseed_empty(assign: np.ndarray, x: np.ndarray, centers: np.ndarray, n_clusters: int) -> None:
    """Give each empty cluster the point farthest from its center (taken from a cluster of size > 1)."""
    for j in range(n_clusters):
        if np.any(assign == j):
            continue
        counts = np.bincount(assign, minlength=n_clusters)
        err = np.abs(x - centers[assign])
        err[counts[assign] < 2] = -1.0
        assign[int(np.argmax(err))] = j


def kmeans_time_clusters(train_time_estimates: Mapping[int, float], n_clusters: int,
                         rng: np.random.Generator | None = None) -> list[list[int]]:
    """Clusters (as sorted id lists) ordered by ascending mean time; empty ones dropped."""
    assign = kmeans_1d(train_time_estimates, n_clusters, rng)
    clusters = [sorted(a for a, j in assign.items() if j == c) for c in range(n_clusters)]
    return [c for c in clusters if c]


# --- NNMF recommender --------------------------------------------------------


@dataclass
class NMFResult:
    W: np.ndarray
    V: np.ndarray
    iterations: int
    converged: bool

    @property
    def reconstruction(self) -> np.ndarray:
        return self.W @ self.V


def nmf(H: np.ndarray, rank: int, rng: np.random.Generator, max_iter: int = 200, tol: float = 1e-6,
        check_nonneg: bool = False) -> NMFResult:
    """Lee-Seung multiplicative updates; NaN cells are imputed from the current W @ V."""
    H = np.asarray(H, dtype=float)
    mask = ~np.isnan(H)
    if np.any(H[mask] < 0):
        raise DomainError("history matrix has negative entries")
    scale = float(np.mean(H[mask])) if mask.any() else 1.0
    scale = max(scale, 1e-3)
    m, n = H.shape
    W = rng.uniform(0.1, 1.0, size=(m, rank)) * math.sqrt(scale / rank)
    V = rng.uniform(0.1, 1.0, size=(rank, n)) * math.sqrt(scale / rank)
    tiny = 1e-12
    prev = W @ V
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        X = np.where(mask, H, prev)
        V *= (W.T @ X) / (W.T @ W @ V + tiny)
        W *= (X @ V.T) / (W @ V @ V.T + tiny)
        if check_nonneg:
            assert (W >= 0).all() and (V >= 0).all(), "NMF factor went negative"
        cur = W @ V
        change = np.linalg.norm(cur - prev) / max(np.linalg.norm(prev), tiny)
        prev = cur
        if change < tol:
            converged = True
            break
    return NMFResult(W, V, it, converged)


def nnmf_recommend(history: np.ndarray, pool: Sequence[int], k: int, rng: np.random.Generator,
                   rank: int = 2, **nmf_kwargs) -> list[int]:
    """Top-``k`` collaborators by reconstructed performance at the latest column.

    ``history`` rows follow ``sorted(pool)``; columns are past rounds, NaN
    where a collaborator did not report. Falls back to a uniform random
    subset when no column has any entry.
    """
    pool = _check(pool, k)
    H = np.asarray(history, dtype=float)
    if H.ndim != 2 or H.shape[0] != len(pool):
        raise DomainError(f"history must have one row per collaborator ({len(pool)})")
    filled = ~np.all(np.isnan(H), axis=0) if H.shape[1] else np.zeros(0, bool)
    if not filled.any():
        return random_k(pool, k, rng)
    H = H[:, filled]
    res = nmf(H, min(rank, *H.shape), rng, **nmf_kwargs)
    pred = res.reconstruction[:, -1]
    order = sorted(range(len(pool)), key=lambda i: (-pred[i], pool[i]))
    return sorted(pool[i] for i in order[:k])


# --- policy objects used by the engine ---------------------------------------


class Selector:
    name = "base"
    options: tuple[str, ...] = ()

    def __init__(self, **cfg):
        unknown = set(cfg) - set(self.options)
        if unknown:
            raise ConfigError(f"unknown option(s) {sorted(unknown)} for selector {self.name!r}")

    def setup(self, pool: Sequence[int], time_estimates: Mapping[int, float], rng) -> None:
        """Called once before round 1."""

    def select(self, pool: Sequence[int], round_idx: int, rng) -> list[int]:
        raise NotImplementedError

    def observe(self, round_idx: int, val_dsc: Mapping[int, float]) -> None:
        """Per-collaborator mean local validation DSC measured this round."""

    def _k(self, pool):
        return min(self.k, len(pool)) if self.k else default_k(len(pool))


class AllSelector(Selector):
    name = "all"

    def select(self, pool, round_idx, rng):
        return select_all(pool)


class RandomSelector(Selector):
    name = "random"
    options = ("k",)

    def __init__(self, k=None, **cfg):
        super().__init__(**cfg)
        self.k = k

    def select(self, pool, round_idx, rng):
        return random_k(pool, self._k(pool), rng)


class _BanditSelector(Selector):
    """Reward: clamped increase of a collaborator's validation DSC between participations."""

    def __init__(self, k=None, **cfg):
        super().__init__(**cfg)
        self.k = k
        self.stats = ArmStats()
        self.last_dsc: dict[int, float] = {}
        self.rewards: dict[int, list[float]] = {}

    def observe(self, round_idx, val_dsc):
        for arm, dsc in val_dsc.items():
            if arm in self.last_dsc:
                reward = min(max(dsc - self.last_dsc[arm], 0.0), 1.0)
                self.stats.record(arm, reward)
                self.rewards.setdefault(arm, []).append(reward)
            self.last_dsc[arm] = dsc


class EpsilonGreedySelector(_BanditSelector):
    name = "epsilon_greedy"
    options = ("k", "epsilon")

    def __init__(self, k=None, epsilon=0.1, **cfg):
        super().__init__(k, **cfg)
        self.epsilon = epsilon

    def select(self, pool, round_idx, rng):
        return epsilon_greedy(self.stats, pool, self._k(pool), self.epsilon, rng)


class UCBSelector(_BanditSelector):
    name = "ucb"
    options = ("k", "c")

    def __init__(self, k=None, c=1.0, **cfg):
        super().__init__(k, **cfg)
        self.c = c

    def select(self, pool, round_idx, rng):
        return ucb(self.stats, pool, self._k(pool), self.c, round_idx)


class KMeansSelector(Selector):
    """Cycle through k-means clusters of estimated per-round time, one cluster per round."""

    name = "kmeans"
    options = ("n_clusters",)

    def __init__(self, n_clusters=3, **cfg):
        super().__init__(**cfg)
        self.n_clusters = n_clusters
        self.clusters: list[list[int]] = []

    def setup(self, pool, time_estimates, rng):
        n = min(self.n_clusters, len(pool))
        self.clusters = kmeans_time_clusters({k: time_estimates[k] for k in pool}, n, rng)

    def select(self, pool, round_idx, rng):
        if not self.clusters:
            raise ConfigError("kmeans selector used before setup")
        return list(self.clusters[(round_idx - 1) % len(self.clusters)])


class NNMFSelector(Selector):
    name = "nnmf"
    options = ("k", "rank", "max_iter", "tol")

    def __init__(self, k=None, rank=2, max_iter=200, tol=1e-6, **cfg):
        super().__init__(**cfg)
        self.k = k
        self.rank = rank
        self.max_iter = max_iter
        self.tol = tol
        self.columns: list[dict[int, float]] = []

    def history(self, pool) -> np.ndarray:
        pool = sorted(pool)
        H = np.full((len(pool), len(self.columns)), np.nan)
        for j, col in enumerate(self.columns):
            for i, a in enumerate(pool):
                if a in col:
                    H[i, j] = col[a]
        return H

    def observe(self, round_idx, val_dsc):
        self.columns.append(dict(val_dsc))

    def select(self, pool, round_idx, rng):
        return nnmf_recommend(self.history(pool), pool, self._k(pool), rng, rank=self.rank,
                              max_iter=self.max_iter, tol=self.tol)


SELECTORS: dict[str, type[Selector]] = {
    cls.name: cls
    for cls in (AllSelector, RandomSelector, EpsilonGreedySelector, UCBSelector, KMeansSelector, NNMFSelector)
}


def make_selector(name: str, **cfg) -> Selector:
    try:
        cls = SELECTORS[name]
    except KeyError:
        raise ConfigError(f"unknown selector {name!r}; choose from {sorted(SELECTORS)}") from None
    return cls(**cfg)
