"""Per-case rank aggregation with tie averaging and a weighted communication rank.

For every test case, teams are ranked separately on each (region, metric)
pair: DSC descending, HD95 ascending. Teams are also ranked once, globally,
on their convergence score (descending). The final score of team ``t`` is::

    R_t = mean over cases of (sum_m r[t, case, m] + w * r_comm[t]) / (N + w)

with ``N = 6`` segmentation rankings per case. Lower is better.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

from .errors import DomainError, IncompleteTableError

REGIONS = ("ET", "WT", "TC")
METRICS = ("DSC", "HD95")
# which way is "better" for each metric
DIRECTIONS = {"DSC": "descending", "HD95": "ascending", "conv": "descending"}
TIE_DECIMALS = 6
DEFAULT_W = 3.0


def rank_with_ties(values: Sequence[float], direction: str = "descending") -> list[float]:
    """Rank ``values`` so the best gets 1; tied values share the mean of their positions.

    Values are compared after rounding to ``TIE_DECIMALS`` places so that
    floating noise does not split ties.
    """
    vals = [float(v) for v in values]
    if not vals:
        raise DomainError("cannot rank an empty sequence")
    if any(math.isnan(v) for v in vals):
        raise DomainError("NaN in ranking input")
    if direction not in ("ascending", "descending"):
        raise DomainError(f"unknown direction {direction!r}")
    keys = [round(v, TIE_DECIMALS) for v in vals]
    if direction == "descending":
        keys = [-k for k in keys]
    order = sorted(range(len(keys)), key=lambda i: keys[i])
    ranks = [0.0] * len(keys)
    pos = 0
    while pos < len(order):
        end = pos
        while end + 1 < len(order) and keys[order[end + 1]] == keys[order[pos]]:
            end += 1
        # positions pos..end (0-based) are ranks pos+1..end+1
        avg = (pos + 1 + end + 1) / 2.0
        for i in order[pos : end + 1]:
            ranks[i] = avg
        pos = end + 1
    return ranks


@dataclass
class RankTable:
    teams: list[str]
    cases: list[str]
    seg_scores: dict[tuple[str, str, str, str], float]
    comm_scores: dict[str, float]
    regions: tuple[str, ...] = REGIONS
    metrics: tuple[str, ...] = METRICS

    @property
    def n_rankings(self) -> int:
        return len(self.regions) * len(self.metrics)

    def missing(self) -> list[tuple]:
        out = [
            (t, c, r, m)
            for t in self.teams
            for c in self.cases
            for r in self.regions
            for m in self.metrics
            if (t, c, r, m) not in self.seg_scores
        ]
        out += [(t, "conv") for t in self.teams if t not in self.comm_scores]
        return out

    def validate(self) -> None:
        missing = self.missing()
        if missing:
            raise IncompleteTableError(missing)


@dataclass
class FinalRanking:
    scores: dict[str, float]
    ranks: dict[str, float]
    # (team, case) -> {"r_seg": sum of segmentation ranks, "score": per-case R}
    per_case: dict[tuple[str, str], dict[str, float]] = field(default_factory=dict)
    per_metric: dict[tuple[str, str, str, str], float] = field(default_factory=dict)
    comm_ranks: dict[str, float] = field(default_factory=dict)

    def leaderboard(self) -> list[dict]:
        rows = [{"team": t, "R_t": self.scores[t], "rank": self.ranks[t]} for t in self.scores]
        return sorted(rows, key=lambda r: (r["R_t"], r["team"]))


def communication_ranks(table: RankTable) -> dict[str, float]:
    ranks = rank_with_ties([table.comm_scores[t] for t in table.teams], DIRECTIONS["conv"])
    return dict(zip(table.teams, ranks))


def final_scores(table: RankTable, w: float = DEFAULT_W) -> FinalRanking:
    if w < 0 or math.isnan(w):
        raise DomainError(f"w must be >= 0, got {w}")
    table.validate()
    n = table.n_rankings
    comm = communication_ranks(table)
    per_metric = {}
    per_case = {}
    totals = defaultdict(float)
    for case in table.cases:
        seg_sum = dict.fromkeys(table.teams, 0.0)
        for region in table.regions:
            for metric in table.metrics:
                vals = [table.seg_scores[(t, case, region, metric)] for t in table.teams]
                for t, r in zip(table.teams, rank_with_ties(vals, DIRECTIONS[metric])):
                    per_metric[(t, case, region, metric)] = r
                    seg_sum[t] += r
        for t in table.teams:
            score = (seg_sum[t] + w * comm[t]) / (n + w)
            per_case[(t, case)] = {"r_seg": seg_sum[t], "score": score}
            totals[t] += score
    scores = {t: totals[t] / len(table.cases) for t in table.teams}
    final = rank_with_ties([scores[t] for t in table.teams], "ascending")
    return FinalRanking(scores, dict(zip(table.teams, final)), per_case, per_metric, comm)


def score_components(result: FinalRanking, table: RankTable, w: float) -> dict[str, tuple[float, float]]:
    """Split each R_t into its segmentation share and its communication share."""
    n = table.n_rankings
    out = {}
    for t in table.teams:
        seg = sum(result.per_case[(t, c)]["r_seg"] for c in table.cases) / len(table.cases)
        out[t] = (seg / (n + w), w * result.comm_ranks[t] / (n + w))
    return out


def ranking_counts(n_cases: int, w: float = DEFAULT_W, n_regions: int = 3, n_metrics: int = 2) -> tuple[int, float]:
    """(segmentation rankings, weighted total) over ``n_cases`` cases.

    Counts the communication rank ``w`` times per case, e.g. 570 cases give
    (3420, 5130) at w = 3.
    """
    seg = n_cases * n_regions * n_metrics
    return seg, seg + n_cases * w


# --- I/O ---------------------------------------------------------------------


def read_tables(scores_path, conv_path) -> RankTable:
    """Load ``team,case,region,metric,value`` and ``team,conv_score`` CSV files."""
    seg: dict[tuple[str, str, str, str], float] = {}
    teams: dict[str, None] = {}
    cases: dict[str, None] = {}
    with open(scores_path, newline="") as fh:
        for row in csv.DictReader(fh):
            metric = row["metric"].strip().upper()
            region = row["region"].strip().upper()
            if region not in REGIONS or metric not in METRICS:
                raise DomainError(f"unknown region/metric {region}/{metric}")
            key = (row["team"].strip(), row["case"].strip(), region, metric)
            seg[key] = float(row["value"])
            teams[key[0]] = None
            cases[key[1]] = None
    comm = {}
    with open(conv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            t = row["team"].strip()
            comm[t] = float(row["conv_score"])
            teams[t] = None
    return RankTable(sorted(teams), sorted(cases), seg, comm)


def write_leaderboard_json(path, result: FinalRanking) -> None:
    with open(path, "w") as fh:
        json.dump(result.leaderboard(), fh, indent=2)
        fh.write("\n")


def write_per_case_csv(path, result: FinalRanking, table: RankTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["case", "team"] + [f"{r}_{m}" for r in table.regions for m in table.metrics]
        w.writerow(header + ["comm", "score"])
        for case in sorted(table.cases):
            for t in sorted(table.teams):
                ranks = [result.per_metric[(t, case, r, m)] for r in table.regions for m in table.metrics]
                w.writerow([case, t, *ranks, result.comm_ranks[t], result.per_case[(t, case)]["score"]])
