"""Simulated round-time model.

Each collaborator ``k`` spends ``T_down + T_up + T_val * N_val + T_train * N_train``
seconds per round, with each ``T_x`` drawn from a per-collaborator normal
distribution. A round lasts as long as its slowest participant, and the
experiment clock stops once it exceeds the budget (one week by default).

Draws come from counter-based substreams keyed on (master seed, round,
collaborator, action), so a collaborator's draws never depend on who else
was selected or on the order in which collaborators are processed.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigError, DomainError

ACTIONS = ("down", "up", "val", "train")
WEEK_SECONDS = 7 * 24 * 3600
MIN_ACTION_TIME = 1e-3

# spawn_key domain tag so timing draws never collide with training streams
_TIME_STREAM = 1


@dataclass(frozen=True)
class ActionDist:
    mu: float
    sigma: float = 0.0

    def __post_init__(self):
        if not self.mu > 0:
            raise ConfigError(f"mu must be > 0, got {self.mu}")
        if not self.sigma >= 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")


@dataclass
class TimingProfile:
    """Per-collaborator, per-action normal parameters.

    ``train`` and ``val`` are seconds per sample; ``down`` and ``up`` are
    seconds per round.
    """

    dists: dict[int, dict[str, ActionDist]] = field(default_factory=dict)

    def __post_init__(self):
        for k, per_action in self.dists.items():
            missing = set(ACTIONS) - set(per_action)
            if missing:
                raise ConfigError(f"collaborator {k} lacks actions {sorted(missing)}")

    def get(self, k: int, action: str) -> ActionDist:
        try:
            return self.dists[k][action]
        except KeyError:
            raise KeyError(f"no timing for collaborator {k!r}, action {action!r}") from None

    @property
    def collaborators(self) -> list[int]:
        return sorted(self.dists)

    @classmethod
    def constant(cls, ids: Iterable[int], down=60.0, up=60.0, val=1.0, train=2.0) -> "TimingProfile":
        """Deterministic profile (sigma = 0) with the same costs for everyone."""
        costs = {"down": down, "up": up, "val": val, "train": train}
        return cls({k: {a: ActionDist(costs[a]) for a in ACTIONS} for k in ids})

    @classmethod
    def synthetic(cls, ids: Iterable[int], seed: int, sigma_fraction: float = 0.1) -> "TimingProfile":
        """Seeded synthetic profile.

        These are NOT measured values: they only mimic the rough scale of a
        multi-site deployment (hours per round for a 3D segmentation model).
        """
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_TIME_STREAM, 0)))
        ranges = {"down": (120.0, 900.0), "up": (120.0, 900.0), "val": (60.0, 300.0), "train": (300.0, 1200.0)}
        dists = {}
        for k in sorted(ids):
            per = {}
            for a in ACTIONS:
                lo, hi = ranges[a]
                mu = float(rng.uniform(lo, hi))
                per[a] = ActionDist(mu, sigma_fraction * mu)
            dists[k] = per
        return cls(dists)


class Decision(enum.Enum):
    CONTINUE = "continue"
    HALT = "halt"


@dataclass(frozen=True)
class Budget:
    limit: float = float(WEEK_SECONDS)

    def __post_init__(self):
        if not self.limit > 0:
            raise ConfigError(f"budget must be > 0, got {self.limit}")


def budget_check(clock: float, budget: Budget) -> Decision:
    """Halt only once the clock strictly exceeds the limit."""
    if clock < 0:
        raise DomainError(f"negative clock {clock}")
    return Decision.HALT if clock > budget.limit else Decision.CONTINUE


def substream(seed: int, round_idx: int, k: int, action: str) -> np.random.Generator:
    key = (_TIME_STREAM, round_idx, k, ACTIONS.index(action))
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def sample_action_time(profile: TimingProfile, k: int, action: str, rng) -> float:
    if action not in ACTIONS:
        raise KeyError(f"unknown action {action!r}")
    d = profile.get(k, action)
    if d.sigma == 0:
        return d.mu
    return max(float(rng.normal(d.mu, d.sigma)), MIN_ACTION_TIME)


def collaborator_round_time(n_val: int, n_train: int, down: float, up: float, val: float, train: float) -> float:
    if n_val < 0 or n_train < 0:
        raise DomainError("sample counts must be >= 0")
    return down + up + val * n_val + train * n_train


def round_time(per_collaborator: Mapping[int, float]) -> float:
    if not per_collaborator:
        raise DomainError("round with no participating collaborators")
    return max(per_collaborator.values())


@dataclass(frozen=True)
class CollaboratorTiming:
    k: int
    down: float
    up: float
    val: float
    train: float
    total: float


@dataclass(frozen=True)
class RoundTiming:
    round: int
    per_collaborator: dict[int, CollaboratorTiming]
    round_time: float
    clock_after: float

    def rows(self) -> list[list]:
        return [
            [self.round, k, c.down, c.up, c.val, c.train, c.total, self.round_time, self.clock_after]
            for k, c in sorted(self.per_collaborator.items())
        ]


ROUND_CSV_HEADER = ["round", "k", "T_down", "T_up", "T_val", "T_train", "T_k", "round_time", "clock_after"]


class TimeModel:
    """Owns the profile, master seed, and cumulative clock."""

    def __init__(self, profile: TimingProfile, seed: int, budget: Budget | None = None):
        self.profile = profile
        self.seed = seed
        self.budget = budget or Budget()
        self.clock = 0.0

    def sample(self, round_idx: int, k: int, n_val: int, n_train: int) -> CollaboratorTiming:
        t = {a: sample_action_time(self.profile, k, a, substream(self.seed, round_idx, k, a)) for a in ACTIONS}
        total = collaborator_round_time(n_val, n_train, **t)
        return CollaboratorTiming(k, t["down"], t["up"], t["val"], t["train"], total)

    def expected_time(self, k: int, n_val: int, n_train: int) -> float:
        mu = {a: self.profile.get(k, a).mu for a in ACTIONS}
        return collaborator_round_time(n_val, n_train, **mu)

    def advance(self, round_idx: int, counts: Mapping[int, tuple[int, int]]) -> RoundTiming:
        """Sample everyone in ``counts`` (k -> (n_val, n_train)) and move the clock."""
        per = {k: self.sample(round_idx, k, nv, nt) for k, (nv, nt) in counts.items()}
        rt = round_time({k: c.total for k, c in per.items()})
        self.clock += rt
        return RoundTiming(round_idx, per, rt, self.clock)

    def decision(self) -> Decision:
        return budget_check(self.clock, self.budget)


def write_round_csv(path, timings: Iterable[RoundTiming]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROUND_CSV_HEADER)
        for t in timings:
            w.writerows(t.rows())
