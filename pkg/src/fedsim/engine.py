"""Federated round orchestration.

A round runs: selection, distribution of the consensus, local validation of
the received model, local training, collection, aggregation, clock update,
and evaluation of the new consensus on the fixed validation split. The three
plugin points (aggregator, selector, hyperparameter policy) travel together
in a :class:`HotspotBundle`.
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import synthtask
from .aggregators import Aggregator, FedAvg, Update, UpdateBatch
from .convergence import ScoreCurve, convergence_score, write_curve_csv
from .errors import ConfigError, NumericError
from .metrics import REGIONS, dice, hd95
from .selection import AllSelector, Selector
from .synthtask import Dataset, Partitioning, SyntheticCase
from .timesim import Decision, RoundTiming, TimeModel, write_round_csv

log = logging.getLogger(__name__)

_SELECT_STREAM = 4
_SUBSET_STREAM = 5


# --- hyperparameter policies -------------------------------------------------


@dataclass(frozen=True)
class HyperParams:
    lr: float
    epochs: int


class ConstantPolicy:
    name = "constant"

    def __init__(self, lr: float = 30.0, epochs: int = 1):
        if lr <= 0 or epochs < 0:
            raise ConfigError("lr must be > 0 and epochs >= 0")
        self.lr = float(lr)
        self.epochs = int(epochs)

    def __call__(self, round_idx: int, clock: float, budget: float, collaborator: "Collaborator",
                 federation: "Federation") -> HyperParams:
        return HyperParams(self.lr, self.epochs)


class CosineAnnealingPolicy:
    """Learning rate annealed over the fraction of the time budget already spent.

    ``lr = lr_min + (lr_max - lr_min) * (1 + cos(pi * clock / budget)) / 2``.
    With ``max_epochs`` set, collaborators smaller than the median local
    training set get proportionally more epochs, up to ``max_epochs``.
    """

    name = "cosine"

    def __init__(self, lr_max: float = 40.0, lr_min: float = 5.0, epochs: int = 1, max_epochs: int | None = None):
        if not 0 < lr_min <= lr_max:
            raise ConfigError("need 0 < lr_min <= lr_max")
        self.lr_max, self.lr_min = float(lr_max), float(lr_min)
        self.epochs = int(epochs)
        self.max_epochs = max_epochs

    def lr(self, clock: float, budget: float) -> float:
        frac = min(max(clock / budget, 0.0), 1.0)
        return self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1 + math.cos(math.pi * frac))

    def __call__(self, round_idx, clock, budget, collaborator, federation):
        epochs = self.epochs
        if self.max_epochs is not None and collaborator.n_train > 0:
            median = float(np.median([c.n_train for c in federation.collaborators.values()]))
            epochs = int(min(self.max_epochs, max(self.epochs, round(self.epochs * median / collaborator.n_train))))
        return HyperParams(self.lr(clock, budget), epochs)


POLICIES = {"constant": ConstantPolicy, "cosine": CosineAnnealingPolicy}


@dataclass
class HotspotBundle:
    aggregator: Aggregator = field(default_factory=FedAvg)
    selector: Selector = field(default_factory=AllSelector)
    policy: Callable = field(default_factory=ConstantPolicy)


# --- state -------------------------------------------------------------------


@dataclass
class Collaborator:
    id: int
    train_cases: list[SyntheticCase]
    val_cases: list[SyntheticCase]
    history: list[dict] = field(default_factory=list)

    @property
    def n_train(self) -> int:
        return len(self.train_cases)

    @property
    def n_val(self) -> int:
        return len(self.val_cases)

    def last_cost(self) -> float | None:
        for rec in reversed(self.history):
            if rec.get("selected"):
                return rec["train_loss"]
        return None


@dataclass
class LocalResult:
    collaborator: int
    val_dsc: dict[str, float]
    params: np.ndarray
    train_loss: float
    val_loss: float
    n_train_used: int
    epochs: int
    lr: float


@dataclass
class RoundReport:
    round: int
    selected: list[int]
    local: dict[int, LocalResult]
    consensus: np.ndarray
    timing: RoundTiming
    consensus_dsc: float


@dataclass
class Checkpoint:
    params: np.ndarray
    score: float
    round: int


@dataclass
class ExperimentResult:
    curve: ScoreCurve
    checkpoint: Checkpoint
    reports: list[RoundReport]
    s_conv: float
    final_params: np.ndarray
    budget_exhausted: bool
    clock: float

    @property
    def evaluated_params(self) -> np.ndarray:
        """Checkpoint when the budget ran out, otherwise the final consensus."""
        return self.checkpoint.params if self.budget_exhausted else self.final_params

    @property
    def rounds_completed(self) -> int:
        return len(self.reports)


def build_collaborators(dataset: Dataset, partitioning: Partitioning, seed: int,
                        val_fraction: float = 0.2) -> dict[int, Collaborator]:
    """One collaborator per site over the training pool, each with a seeded local 80/20 split."""
    train_part = Partitioning(partitioning.scheme, {c: partitioning.assignment[c] for c in dataset.train_ids})
    val_ids = set(synthtask.stratified_split(train_part, val_fraction, seed, stream=1))
    collabs = {}
    for site in train_part.sites:
        ids = train_part.cases_of(site)
        collabs[site] = Collaborator(
            site,
            [dataset.cases[c] for c in ids if c not in val_ids],
            [dataset.cases[c] for c in ids if c in val_ids],
        )
    return collabs


def _mean_or_nan(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def _threads() -> int:
    env = os.environ.get("FEDSIM_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


class Federation:
    def __init__(self, dataset: Dataset, partitioning: Partitioning, bundle: HotspotBundle,
                 time_model: TimeModel, seed: int, batch_size: int = 512,
                 hooks: dict[str, Callable] | None = None, threads: int | None = None,
                 collaborators: dict[int, Collaborator] | None = None,
                 initial_params: np.ndarray | None = None):
        self.dataset = dataset
        self.bundle = bundle
        self.time_model = time_model
        self.seed = seed
        self.batch_size = batch_size
        self.hooks = hooks or {}
        self.threads = threads or _threads()
        self.collaborators = collaborators or build_collaborators(dataset, partitioning, seed)
        self.consensus = synthtask.init_params() if initial_params is None else np.array(initial_params, float)
        self.round = 0
        self.first_global_cost: float | None = None
        # the fixed 20% split is the union of the collaborators' local validation sets
        self.fixed_split = [c for k in sorted(self.collaborators) for c in self.collaborators[k].val_cases]
        if not self.fixed_split:
            raise ConfigError("no validation cases; sites are too small to split")
        self.curve_points: list[tuple[float, float]] = []
        self.bundle.selector.setup(self.pool, self._time_estimates(), self._rng(_SELECT_STREAM, 0))

    @property
    def pool(self) -> list[int]:
        return sorted(self.collaborators)

    @property
    def clock(self) -> float:
        return self.time_model.clock

    def _rng(self, stream: int, *key: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(stream, *key)))

    def _time_estimates(self) -> dict[int, float]:
        return {k: self.time_model.expected_time(k, c.n_val, c.n_train) for k, c in self.collaborators.items()}

    def _hook(self, name, *args):
        fn = self.hooks.get(name)
        if fn is not None:
            fn(*args)

    def evaluate(self, params: np.ndarray | None = None) -> float:
        return synthtask.mean_dice(self.consensus if params is None else params, self.fixed_split)

    def evaluate_initial(self) -> float:
        dsc = self.evaluate()
        self.curve_points.append((0.0, dsc))
        return dsc

    def _local_step(self, k: int, consensus: np.ndarray, caps: dict[int, int]) -> LocalResult:
        collab = self.collaborators[k]
        self._hook("on_validate", self.round, k, consensus)
        val_dsc = {}
        for r in REGIONS:
            scores = [dice(case.labels[r], synthtask.predict(consensus, case)[r]) for case in collab.val_cases]
            val_dsc[r] = float(np.mean(scores)) if scores else math.nan
        hp = self.bundle.policy(self.round, self.clock, self.time_model.budget.limit, collab, self)
        cases = collab.train_cases
        cap = caps.get(k)
        if cap is not None and cap < len(cases):
            pick = self._rng(_SUBSET_STREAM, self.round, k).choice(len(cases), size=cap, replace=False)
            cases = [cases[i] for i in sorted(pick)]
        params, loss = synthtask.local_train(consensus, cases, hp.epochs, hp.lr,
                                             synthtask.train_stream(self.seed, self.round, k), self.batch_size)
        Xv, Yv = synthtask.stack_cases(collab.val_cases)
        val_loss = synthtask.loss_and_grad(params, Xv, Yv)[0] if len(Xv) else loss
        return LocalResult(k, val_dsc, params, loss, val_loss, len(cases), hp.epochs, hp.lr)

    def run_round(self) -> RoundReport:
        if self.time_model.decision() is Decision.HALT:
            raise ConfigError("time budget already exhausted")
        self.round += 1
        r = self.round
        selected = self.bundle.selector.select(self.pool, r, self._rng(_SELECT_STREAM, r))
        if not selected:
            raise ConfigError(f"selector {self.bundle.selector.name!r} returned an empty selection")
        if len(set(selected)) != len(selected) or not set(selected) <= set(self.pool):
            raise ConfigError(f"selector returned an invalid subset {selected}")
        caps = self.bundle.aggregator.iteration_caps({k: max(self.collaborators[k].n_train, 1) for k in self.pool})
        consensus = self.consensus.copy()
        consensus.setflags(write=False)
        with ThreadPoolExecutor(max_workers=min(self.threads, len(selected))) as pool:
            results = list(pool.map(lambda k: self._local_step(k, consensus, caps), selected))
        local = {res.collaborator: res for res in results}

        updates = [
            Update(k, local[k].params, max(local[k].n_train_used, 1), local[k].train_loss,
                   self.collaborators[k].last_cost(), local[k].val_loss, _mean_or_nan(local[k].val_dsc.values()))
            for k in selected
        ]
        sizes = np.array([u.n_train for u in updates], dtype=float)
        global_cost = float(np.dot(sizes, [u.cost for u in updates]) / sizes.sum())
        if self.first_global_cost is None:
            self.first_global_cost = global_cost
        batch = UpdateBatch(updates, r, self.first_global_cost, global_cost)
        new = np.asarray(self.bundle.aggregator.aggregate(batch), dtype=float)
        if new.shape != self.consensus.shape or not np.all(np.isfinite(new)):
            raise NumericError(f"aggregation produced invalid parameters in round {r}")
        self.consensus = new

        counts = {k: (self.collaborators[k].n_val, local[k].n_train_used * local[k].epochs) for k in selected}
        timing = self.time_model.advance(r, counts)
        dsc = self.evaluate()
        self.curve_points.append((timing.clock_after, dsc))

        val_means = {k: u.val_score for k, u in zip(selected, updates) if not math.isnan(u.val_score)}
        self.bundle.selector.observe(r, val_means)
        chosen = set(selected)
        for k, collab in self.collaborators.items():
            rec = {"round": r, "selected": k in chosen}
            if k in chosen:
                rec.update(val_dsc=local[k].val_dsc, train_loss=local[k].train_loss, T_k=timing.per_collaborator[k].total)
            collab.history.append(rec)
        return RoundReport(r, list(selected), local, self.consensus.copy(), timing, dsc)


def run_experiment(federation: Federation, max_rounds: int | None = None) -> ExperimentResult:
    """Run rounds until the clock exceeds the budget or ``max_rounds`` is reached.

    The round during which the clock passes the budget is the last round and
    is not eligible for the checkpoint. The convergence score integrates the
    curve up to ``min(clock, budget)``.
    """
    budget = federation.time_model.budget.limit
    dsc0 = federation.evaluate_initial()
    best = Checkpoint(federation.consensus.copy(), dsc0, 0)
    reports = []
    exhausted = False
    while max_rounds is None or len(reports) < max_rounds:
        report = federation.run_round()
        reports.append(report)
        if federation.time_model.decision() is Decision.HALT:
            exhausted = True
            break
        if report.consensus_dsc > best.score:
            best = Checkpoint(report.consensus.copy(), report.consensus_dsc, report.round)
    horizon = min(federation.clock, budget)
    curve = ScoreCurve.from_points([p for p in federation.curve_points if p[0] <= horizon], horizon)
    return ExperimentResult(curve, best, reports, convergence_score(curve), federation.consensus.copy(),
                            exhausted, federation.clock)


def holdout_scores(params: np.ndarray, cases: Sequence[SyntheticCase]) -> dict[str, dict[str, float]]:
    """Mean DSC and HD95 per region over ``cases``."""
    out = {}
    preds = [synthtask.predict(params, c) for c in cases]
    for r in REGIONS:
        out[r] = {
            "dsc": float(np.mean([dice(c.labels[r], p[r]) for c, p in zip(cases, preds)])),
            "hd95": float(np.mean([hd95(c.labels[r], p[r]) for c, p in zip(cases, preds)])),
        }
    return out


# --- artifacts ---------------------------------------------------------------

_CKPT = struct.Struct("<4sIdI")


def save_checkpoint(path, ckpt: Checkpoint, metadata: dict | None = None) -> None:
    """Binary: magic, round, score, length, float64 parameters, then a JSON metadata blob."""
    params = np.asarray(ckpt.params, dtype="<f8")
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT.pack(b"FSCK", ckpt.round, ckpt.score, params.size))
        fh.write(params.tobytes())
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)


def load_checkpoint(path) -> tuple[Checkpoint, dict]:
    data = Path(path).read_bytes()
    magic, rnd, score, n = _CKPT.unpack_from(data)
    if magic != b"FSCK":
        raise ValueError(f"not a checkpoint file: {path}")
    off = _CKPT.size
    params = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(float)
    off += 8 * n
    (mlen,) = struct.unpack_from("<I", data, off)
    meta = json.loads(data[off + 4 : off + 4 + mlen].decode())
    return Checkpoint(params, score, rnd), meta


def write_artifacts(out_dir, result: ExperimentResult, dataset: Dataset, extra: dict | None = None,
                    wall_time: float | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_round_csv(out / "rounds.csv", [r.timing for r in result.reports])
    write_curve_csv(out / "curve.csv", result.curve)
    save_checkpoint(out / "checkpoint.bin", result.checkpoint, {"n_params": int(result.checkpoint.params.size)})
    holdout = holdout_scores(result.evaluated_params, [dataset.cases[c] for c in dataset.holdout_ids])
    summary = {
        "s_conv": result.s_conv,
        "rounds_completed": result.rounds_completed,
        "clock": result.clock,
        "budget_exhausted": result.budget_exhausted,
        "checkpoint_round": result.checkpoint.round,
        "checkpoint_score": result.checkpoint.score,
        "evaluated_model": "checkpoint" if result.budget_exhausted else "final",
        "holdout": holdout,
        "holdout_mean_dsc": float(np.mean([v["dsc"] for v in holdout.values()])),
        **(extra or {}),
        "wall_time": wall_time,
    }
    with open(out / "result.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary
