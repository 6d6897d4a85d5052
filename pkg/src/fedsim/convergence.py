"""DSC-over-time curves and the convergence score (area under the running max)."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class ScoreCurve:
    times: tuple[float, ...] = ()
    dsc: tuple[float, ...] = ()
    horizon: float | None = None

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        dsc = tuple(float(d) for d in self.dsc)
        if len(times) != len(dsc):
            raise DomainError("times and dsc differ in length")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise DomainError("curve times must be strictly increasing")
        if any(not 0.0 <= d <= 1.0 for d in dsc):
            raise DomainError("dsc values must lie in [0, 1]")
        if times and times[0] < 0:
            raise DomainError("curve starts before t=0")
        horizon = self.horizon
        if horizon is None:
            horizon = times[-1] if times else 0.0
        if times and horizon < times[-1]:
            raise DomainError(f"horizon {horizon} precedes last point {times[-1]}")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "dsc", dsc)
        object.__setattr__(self, "horizon", float(horizon))

    @classmethod
    def from_points(cls, points, horizon=None) -> "ScoreCurve":
        points = list(points)
        return cls(tuple(p[0] for p in points), tuple(p[1] for p in points), horizon)

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.times, self.dsc))

    def __len__(self):
        return len(self.times)


def project(curve: ScoreCurve) -> ScoreCurve:
    """Running maximum of the DSC values; times and horizon unchanged."""
    proj = tuple(np.maximum.accumulate(curve.dsc).tolist()) if curve.dsc else ()
    return ScoreCurve(curve.times, proj, curve.horizon)


def convergence_score(curve: ScoreCurve) -> float:
    """Exact integral from 0 to the horizon of the projected step function.

    The curve is 0 before the first measurement and each projected value is
    held until the next measurement (the last one until the horizon).
    """
    if not curve.times:
        return 0.0
    proj = project(curve)
    edges = np.append(np.asarray(proj.times), proj.horizon)
    return float(np.sum(np.diff(edges) * np.asarray(proj.dsc)))


def write_curve_csv(path, curve: ScoreCurve) -> None:
    proj = project(curve)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "dsc_raw", "dsc_projected"])
        for t, raw, p in zip(curve.times, curve.dsc, proj.dsc):
            w.writerow([t, raw, p])
