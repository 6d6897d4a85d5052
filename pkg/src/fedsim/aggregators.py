"""Weight-aggregation strategies.

Every strategy maps an :class:`UpdateBatch` (the full local parameter
vectors returned by the selected collaborators, plus the bookkeeping each
method needs) to a new consensus vector. Weights are always nonnegative and
normalized, so the consensus stays inside the convex hull of the inputs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np
from scipy.stats import poisson

from .errors import ConfigError, DomainError

log = logging.getLogger(__name__)

EPS = 1e-6


@dataclass
class Update:
    collaborator: int
    params: np.ndarray
    n_train: int
    cost: float
    prev_cost: float | None = None
    val_loss: float | None = None
    val_score: float | None = None


@dataclass
class UpdateBatch:
    updates: list[Update]
    round: int = 1
    first_global_cost: float | None = None
    global_cost: float | None = None

    def __post_init__(self):
        if not self.updates:
            raise DomainError("empty update batch")
        n = self.updates[0].params.shape
        for u in self.updates:
            if u.params.shape != n:
                raise DomainError(f"collaborator {u.collaborator} sent shape {u.params.shape}, expected {n}")
            if u.n_train < 0:
                raise DomainError("negative sample count")

    @property
    def stacked(self) -> np.ndarray:
        return np.stack([np.asarray(u.params, dtype=float) for u in self.updates])

    @property
    def sizes(self) -> np.ndarray:
        return np.array([u.n_train for u in self.updates], dtype=float)

    @property
    def costs(self) -> np.ndarray:
        return np.array([u.cost for u in self.updates], dtype=float)


def size_weights(batch: UpdateBatch) -> np.ndarray:
    sizes = batch.sizes
    total = sizes.sum()
    if total <= 0:
        raise DomainError("total sample count is zero")
    return sizes / total


def weighted_mean(stacked: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Consensus from (normalized) weights; per-parameter weights have shape of ``stacked``."""
    weights = np.asarray(weights, dtype=float)
    if weights.ndim == 1:
        return weights @ stacked
    return np.sum(weights * stacked, axis=0)


def _share(x: np.ndarray) -> np.ndarray:
    """x / sum(x), or zeros when the sum is zero."""
    total = x.sum()
    return x / total if total > 0 else np.zeros_like(x)


def _normalize(w: np.ndarray) -> np.ndarray:
    return w / w.sum()


def fedavg(batch: UpdateBatch) -> np.ndarray:
    return weighted_mean(batch.stacked, size_weights(batch))


def poisson_iteration_cap(sizes, q: float = 0.99) -> list[int | None]:
    """Per-collaborator training-sample caps from a Poisson fit of dataset sizes.

    ``lambda`` is the mean size; any collaborator larger than the ``q``
    quantile of Poisson(lambda) is capped at that quantile. ``None`` means
    uncapped.
    """
    sizes = np.asarray(sizes, dtype=float)
    if sizes.size == 0 or np.any(sizes < 1):
        raise DomainError("sizes must be >= 1")
    if not 0 < q <= 1:
        raise DomainError(f"quantile must be in (0, 1], got {q}")
    if q >= 1.0:
        return [None] * len(sizes)
    cap = int(poisson.ppf(q, sizes.mean()))
    return [cap if s > cap else None for s in sizes]


class Aggregator:
    """Plugin base. Subclasses override :meth:`weights` (or :meth:`aggregate`)."""

    name = "base"
    options: tuple[str, ...] = ()

    def __init__(self, **cfg):
        unknown = set(cfg) - set(self.options)
        if unknown:
            raise ConfigError(f"unknown option(s) {sorted(unknown)} for aggregator {self.name!r}")

    def weights(self, batch: UpdateBatch) -> np.ndarray:
        raise NotImplementedError

    def aggregate(self, batch: UpdateBatch) -> np.ndarray:
        return weighted_mean(batch.stacked, self.weights(batch))

    def iteration_caps(self, sizes: Mapping[int, int]) -> dict[int, int]:
        """Training-sample caps per collaborator; none by default."""
        return {}


class FedAvg(Aggregator):
    name = "fedavg"

    def weights(self, batch):
        return size_weights(batch)


class FedPID(Aggregator):
    """Mix of size share, recent cost drop, and global cost drop since round 1.

    ``w_k ~ alpha * n_k/sum(n) + beta * dc_k/sum(dc) + gamma * g_k/sum(g)``
    where ``dc_k`` is the clamped drop of collaborator k's cost since its last
    participation and ``g_k`` apportions the clamped global drop
    ``C(1) - C(r)`` by each collaborator's share of the current cost.
    """

    name = "fedpid"
    options = ("alpha", "beta", "gamma", "poisson_q", "exclude_outliers")

    def __init__(self, alpha=1 / 3, beta=1 / 3, gamma=1 / 3, poisson_q=0.99, exclude_outliers=False, **cfg):
        super().__init__(**cfg)
        coeffs = (alpha, beta, gamma)
        if min(coeffs) < 0 or not math.isclose(sum(coeffs), 1.0, abs_tol=1e-9):
            raise ConfigError(f"alpha, beta, gamma must be >= 0 and sum to 1, got {coeffs}")
        self.alpha, self.beta, self.gamma = map(float, coeffs)
        self.poisson_q = poisson_q
        self.exclude_outliers = exclude_outliers

    def iteration_caps(self, sizes):
        if self.poisson_q is None:
            return {}
        ids = list(sizes)
        caps = poisson_iteration_cap([sizes[k] for k in ids], self.poisson_q)
        return {k: c for k, c in zip(ids, caps) if c is not None}

    def weights(self, batch):
        sw = size_weights(batch)
        prev = [u.prev_cost for u in batch.updates]
        if all(p is None for p in prev):
            # cold start: nothing to differentiate yet
            return self._mask_outliers(batch, sw)
        costs = batch.costs
        drops = np.array([max(p - c, 0.0) if p is not None else 0.0 for p, c in zip(prev, costs)])
        g = np.zeros_like(costs)
        if batch.first_global_cost is not None and batch.global_cost is not None:
            global_drop = max(batch.first_global_cost - batch.global_cost, 0.0)
            g = global_drop * _share(np.maximum(costs, 0.0))
        w = self.alpha * sw + self.beta * _share(drops) + self.gamma * _share(g)
        w = self._mask_outliers(batch, w)
        if w.sum() <= 0:
            log.warning("fedpid: all weights zero in round %d, falling back to fedavg", batch.round)
            return sw
        return _normalize(w)

    def _mask_outliers(self, batch, w):
        if not self.exclude_outliers or self.poisson_q is None:
            return w
        caps = poisson_iteration_cap(np.maximum(batch.sizes, 1), self.poisson_q)
        keep = np.array([c is None for c in caps])
        if not keep.any():
            return w
        masked = np.where(keep, w, 0.0)
        return _normalize(masked) if masked.sum() > 0 else w


class FedPOD(Aggregator):
    """History-free variant: current-round cost ranking plus size share.

    ``w_k ~ alpha * n_k/sum(n) + (1 - alpha) * (c_hat - c_k)/sum(c_hat - c_j)``
    with ``c_hat = max(c) + eps``. Size outliers keep a nonzero weight; their
    training is capped instead (see :func:`poisson_iteration_cap`).
    """

    name = "fedpod"
    options = ("alpha", "eps", "poisson_q")

    def __init__(self, alpha=0.5, eps=EPS, poisson_q=0.99, **cfg):
        super().__init__(**cfg)
        if not 0 <= alpha <= 1:
            raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
        self.alpha = float(alpha)
        self.eps = float(eps)
        self.poisson_q = poisson_q

    iteration_caps = FedPID.iteration_caps

    def weights(self, batch):
        sw = size_weights(batch)
        costs = batch.costs
        if self.alpha == 1.0 or np.ptp(costs) == 0:
            return sw
        gap = costs.max() + self.eps - costs
        return _normalize(self.alpha * sw + (1 - self.alpha) * gap / gap.sum())


class HSimAgg(Aggregator):
    """Harmonic mean of parameter-space similarity and size share."""

    name = "hsimagg"
    options = ("eps",)

    def __init__(self, eps=EPS, **cfg):
        super().__init__(**cfg)
        self.eps = float(eps)

    def weights(self, batch):
        stacked = batch.stacked
        dist = np.linalg.norm(stacked - stacked.mean(axis=0), axis=1)
        sim = _normalize(1.0 / (self.eps + dist))
        v = size_weights(batch)
        denom = sim + v
        h = np.divide(2 * sim * v, denom, out=np.zeros_like(denom), where=denom > 0)
        if h.sum() <= 0:
            return v
        return _normalize(h)


class TickTack(Aggregator):
    """Alternating aggregation (tick) and importance re-weighting (tack).

    Importance weights are carried across rounds. On tack rounds each
    collaborator's weight is multiplied by ``exp(-eta * |theta_k(r) - theta_k(prev)|)``
    (a norm in scalar mode, elementwise in per-parameter mode) and the whole
    weight table is renormalized. Both phases aggregate with importance times
    sample count.
    """

    name = "ticktack"
    options = ("eta", "mode")

    def __init__(self, eta=1.0, mode="scalar", **cfg):
        super().__init__(**cfg)
        if mode not in ("scalar", "per-parameter"):
            raise ConfigError(f"mode must be 'scalar' or 'per-parameter', got {mode!r}")
        self.eta = float(eta)
        self.mode = mode
        self.importance: dict[int, np.ndarray] = {}
        self.previous: dict[int, np.ndarray] = {}
        self.calls = 0

    @property
    def phase(self) -> str:
        """Phase the next call will run."""
        return "tick" if self.calls % 2 == 0 else "tack"

    def _init_weight(self, dim: int) -> np.ndarray:
        if self.importance:
            return np.mean(list(self.importance.values()), axis=0)
        shape = () if self.mode == "scalar" else (dim,)
        return np.ones(shape)

    def _renormalize(self):
        total = sum(self.importance.values())
        for k in self.importance:
            self.importance[k] = self.importance[k] / total

    def tack(self, batch: UpdateBatch) -> None:
        for u in batch.updates:
            prev = self.previous.get(u.collaborator)
            if prev is None:
                continue
            diff = np.asarray(u.params, dtype=float) - prev
            change = np.linalg.norm(diff) if self.mode == "scalar" else np.abs(diff)
            self.importance[u.collaborator] = self.importance[u.collaborator] * np.exp(-self.eta * change)
        self._renormalize()

    def weights(self, batch):
        dim = batch.stacked.shape[1]
        for u in batch.updates:
            if u.collaborator not in self.importance:
                self.importance[u.collaborator] = self._init_weight(dim)
        self._renormalize()
        imp = np.array([self.importance[u.collaborator] for u in batch.updates], dtype=float)
        sizes = batch.sizes
        if self.mode == "scalar":
            return _normalize(imp * sizes)
        raw = imp * sizes[:, None]
        return raw / raw.sum(axis=0, keepdims=True)

    def aggregate(self, batch):
        dim = batch.stacked.shape[1]
        for u in batch.updates:
            if u.collaborator not in self.importance:
                self.importance[u.collaborator] = self._init_weight(dim)
        if self.phase == "tack":
            self.tack(batch)
        out = weighted_mean(batch.stacked, self.weights(batch))
        for u in batch.updates:
            self.previous[u.collaborator] = np.array(u.params, dtype=float)
        self.calls += 1
        return out


class VLROFP(Aggregator):
    """Size share scaled by inverse validation-loss ratio and an overfit penalty.

    ``w_k ~ (n_k/sum(n)) / VLR_k * exp(-rho * OFP_k)`` where ``VLR_k`` is the
    collaborator's validation loss over the mean and ``OFP_k`` the clamped gap
    between validation and training loss.
    """

    name = "vlr_ofp"
    options = ("rho",)

    def __init__(self, rho=1.0, **cfg):
        super().__init__(**cfg)
        self.rho = float(rho)

    def weights(self, batch):
        sw = size_weights(batch)
        if any(u.val_loss is None for u in batch.updates):
            raise DomainError("vlr_ofp needs a validation loss from every collaborator")
        val = np.array([u.val_loss for u in batch.updates], dtype=float)
        mean_val = val.mean()
        if mean_val <= 0:
            log.warning("vlr_ofp: zero mean validation loss, falling back to fedavg")
            return sw
        vlr = val / mean_val
        if np.any(vlr == 0):
            # a perfect validation loss has an unbounded inverse ratio
            return _normalize(np.where(vlr == 0, sw, 0.0))
        ofp = np.maximum(val - batch.costs, 0.0)
        w = sw / vlr * np.exp(-self.rho * ofp)
        if w.sum() <= 0:
            return sw
        return _normalize(w)


AGGREGATORS: dict[str, type[Aggregator]] = {
    cls.name: cls for cls in (FedAvg, FedPID, FedPOD, HSimAgg, TickTack, VLROFP)
}


def make_aggregator(name: str, **cfg: Any) -> Aggregator:
    try:
        cls = AGGREGATORS[name]
    except KeyError:
        raise ConfigError(f"unknown aggregator {name!r}; choose from {sorted(AGGREGATORS)}") from None
    return cls(**cfg)


# functional forms


def fedpid(batch: UpdateBatch, **cfg) -> np.ndarray:
    return FedPID(**cfg).aggregate(batch)


def fedpod(batch: UpdateBatch, **cfg) -> np.ndarray:
    return FedPOD(**cfg).aggregate(batch)


def hsimagg(batch: UpdateBatch, **cfg) -> np.ndarray:
    return HSimAgg(**cfg).aggregate(batch)


def vlr_ofp(batch: UpdateBatch, **cfg) -> np.ndarray:
    return VLROFP(**cfg).aggregate(batch)


def ticktack(batch: UpdateBatch, phase: str, weights: Mapping[int, Any] | None = None,
             previous: Mapping[int, np.ndarray] | None = None, eta: float = 1.0,
             mode: str = "scalar") -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """One stateless Tick-Tack step; returns the consensus and the updated weight table."""
    if phase not in ("tick", "tack"):
        raise DomainError(f"phase must be 'tick' or 'tack', got {phase!r}")
    agg = TickTack(eta=eta, mode=mode)
    agg.importance = {k: np.asarray(v, dtype=float) for k, v in (weights or {}).items()}
    agg.previous = {k: np.asarray(v, dtype=float) for k, v in (previous or {}).items()}
    agg.calls = 0 if phase == "tick" else 1
    out = agg.aggregate(batch)
    return out, agg.importance
