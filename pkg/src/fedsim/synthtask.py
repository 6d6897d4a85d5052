"""Synthetic three-region segmentation task with site-skewed (non-IID) data.

Each case is a small volume holding one ellipsoidal lesion. The three
labels are nested ellipsoids sharing the lesion center (ET inside TC inside
WT). Per-voxel features are the normalized voxel coordinates, a noisy,
site-scaled ellipsoidal radius, and a pure-noise channel. Sites differ in
lesion size, lesion position, and radius gain, so the federated partitions
are not identically distributed.

The segmentation model is one logistic regression per region over the
per-voxel features, trained with mini-batch gradient descent on binary
cross-entropy.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DomainError, NumericError
from .metrics import REGIONS, LabelVolume, dice, load_volume, save_volume

N_FEATURES = 5
N_PARAMS = len(REGIONS) * (N_FEATURES + 1)
# ellipsoidal radius thresholds per region, matching REGIONS order (ET, WT, TC)
REGION_THRESHOLDS = {"ET": 0.55, "WT": 1.0, "TC": 0.75}
RADIUS_CLIP = 3.0

_DATA_STREAM = 2
_TRAIN_STREAM = 3


@dataclass
class SyntheticCase:
    case_id: str
    site: int
    features: np.ndarray  # (n_voxels, N_FEATURES), row-major voxel order
    labels: dict[str, LabelVolume]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels["WT"].dims

    @property
    def wt_size(self) -> int:
        return self.labels["WT"].count

    def targets(self) -> np.ndarray:
        """(n_voxels, 3) float array of labels in REGIONS order."""
        return np.stack([self.labels[r].voxels.ravel().astype(float) for r in REGIONS], axis=1)


@dataclass
class Partitioning:
    scheme: str
    assignment: dict[str, int]

    @property
    def sites(self) -> list[int]:
        return sorted(set(self.assignment.values()))

    @property
    def site_count(self) -> int:
        return len(self.sites)

    def cases_of(self, site: int) -> list[str]:
        return sorted(c for c, s in self.assignment.items() if s == site)


@dataclass
class Dataset:
    cases: dict[str, SyntheticCase]
    partitioning: Partitioning
    train_ids: list[str]
    holdout_ids: list[str]


# --- generation --------------------------------------------------------------


def apportion(total: int, weights: Sequence[float], minimum: int = 0) -> list[int]:
    """Split ``total`` into integer parts proportional to ``weights`` (largest remainder)."""
    w = np.asarray(weights, dtype=float)
    if w.size == 0 or np.any(w < 0) or w.sum() <= 0:
        raise DomainError("weights must be nonnegative with a positive sum")
    if total < minimum * w.size:
        raise DomainError(f"cannot give {w.size} parts at least {minimum} of {total}")
    spare = total - minimum * w.size
    exact = spare * w / w.sum()
    parts = np.floor(exact).astype(int)
    left = spare - parts.sum()
    order = sorted(range(w.size), key=lambda i: (-(exact[i] - parts[i]), i))
    for i in order[:left]:
        parts[i] += 1
    return [int(p) + minimum for p in parts]


def site_profile(name_or_weights, n_sites: int) -> list[float]:
    if isinstance(name_or_weights, str):
        if name_or_weights == "uniform":
            return [1.0] * n_sites
        if name_or_weights == "skewed":
            # a few large institutions and a long tail of small ones
            return [1.0 / (1 + 0.35 * i) for i in range(n_sites)]
        raise ConfigError(f"unknown site profile {name_or_weights!r}")
    weights = [float(x) for x in name_or_weights]
    if len(weights) != n_sites:
        raise ConfigError(f"site profile has {len(weights)} entries for {n_sites} sites")
    return weights


def voxel_grid(dims: tuple[int, int, int]) -> np.ndarray:
    """(n_voxels, 3) voxel indices in row-major order."""
    return np.indices(dims).reshape(3, -1).T.astype(float)


def make_case(case_id: str, site: int, center, radii, dims=(16, 16, 16), gain: float = 1.0,
              radius_noise: float = 0.0, rng: np.random.Generator | None = None) -> SyntheticCase:
    dims = tuple(dims)
    grid = voxel_grid(dims)
    rho = np.sqrt((((grid - np.asarray(center)) / np.asarray(radii)) ** 2).sum(axis=1))
    labels = {r: LabelVolume((rho <= REGION_THRESHOLDS[r]).reshape(dims)) for r in REGIONS}
    half = (np.asarray(dims, dtype=float) - 1) / 2
    coords = (grid - half) / np.where(half > 0, half, 1.0)
    if rng is None:
        noisy = rho * gain
        noise = np.zeros(len(grid))
    else:
        noisy = rho * gain + rng.normal(0.0, radius_noise, len(grid))
        noise = rng.normal(0.0, 1.0, len(grid))
    feats = np.column_stack([coords, np.clip(noisy, 0.0, RADIUS_CLIP), noise])
    return SyntheticCase(case_id, site, feats, labels)


def generate_dataset(seed: int, n_cases: int = 100, site_size_profile="skewed", n_sites: int = 10,
                     dims=(16, 16, 16), holdout_fraction: float = 0.2) -> Dataset:
    profile = site_profile(site_size_profile, n_sites)
    n_sites = len(profile)
    if n_cases < n_sites:
        raise ConfigError(f"need at least one case per site ({n_cases} < {n_sites})")
    dims = tuple(int(d) for d in dims)
    counts = apportion(n_cases, profile, minimum=1)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_DATA_STREAM,)))
    lo = np.full(3, 3.0)
    hi = np.asarray(dims, dtype=float) - 4.0
    mid = (np.asarray(dims, dtype=float) - 1) / 2
    cases: dict[str, SyntheticCase] = {}
    assignment = {}
    idx = 0
    for site, count in enumerate(counts):
        site_center = mid + rng.uniform(-2.0, 2.0, 3)
        site_radius = rng.uniform(2.6, 5.0)
        site_gain = rng.uniform(0.92, 1.08)
        site_noise = rng.uniform(0.02, 0.08)
        for _ in range(count):
            center = np.clip(site_center + rng.normal(0.0, 1.0, 3), lo, np.maximum(hi, lo))
            radii = np.clip(site_radius * rng.uniform(0.8, 1.2, 3), 2.2, 6.5)
            cid = f"case_{idx:04d}"
            cases[cid] = make_case(cid, site, center, radii, dims, site_gain, site_noise, rng)
            assignment[cid] = site
            idx += 1
    partition = Partitioning("natural", assignment)
    holdout = stratified_split(partition, holdout_fraction, seed, stream=0)
    holdout_set = set(holdout)
    train = sorted(c for c in cases if c not in holdout_set)
    return Dataset(cases, partition, train, sorted(holdout))


def stratified_split(partition: Partitioning, fraction: float, seed: int, stream: int,
                     case_ids: Sequence[str] | None = None) -> list[str]:
    """Seeded per-site sample of ``fraction`` of the cases (never a site's only case)."""
    pool = set(partition.assignment if case_ids is None else case_ids)
    chosen = []
    for site in partition.sites:
        ids = [c for c in partition.cases_of(site) if c in pool]
        if len(ids) < 2:
            continue
        n = min(max(1, round(fraction * len(ids))), len(ids) - 1)
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_DATA_STREAM, 1, stream, site)))
        chosen += [ids[i] for i in sorted(rng.choice(len(ids), size=n, replace=False))]
    return sorted(chosen)


def partition_artificial(natural: Partitioning, cases: Mapping[str, SyntheticCase] | Mapping[str, int],
                         n_split: int = 5) -> Partitioning:
    """Split the ``n_split`` largest sites into thirds by whole-tumor size.

    ``cases`` maps case id to either a :class:`SyntheticCase` or a WT voxel
    count. Sites are ranked by case count (ties: lower site id first); within
    a site, cases are sorted by WT size (ties: case id) and cut into three
    contiguous parts. The first part keeps the original site id; the others
    get fresh ids after the current maximum.
    """
    def wt(c):
        v = cases[c]
        return v.wt_size if isinstance(v, SyntheticCase) else int(v)

    sites = natural.sites
    if len(sites) < n_split:
        raise ConfigError(f"need at least {n_split} sites to split, have {len(sites)}")
    by_size = sorted(sites, key=lambda s: (-len(natural.cases_of(s)), s))[:n_split]
    assignment = dict(natural.assignment)
    next_id = max(sites) + 1
    for site in sorted(by_size):
        ids = natural.cases_of(site)
        if len(ids) < 3:
            raise ConfigError(f"site {site} has {len(ids)} cases; splitting into thirds needs 3")
        ordered = sorted(ids, key=lambda c: (wt(c), c))
        for part, chunk in enumerate(np.array_split(np.arange(len(ordered)), 3)):
            new_site = site if part == 0 else next_id
            if part:
                next_id += 1
            for i in chunk:
                assignment[ordered[i]] = new_site
    return Partitioning("artificial", assignment)


# --- model -------------------------------------------------------------------


def init_params() -> np.ndarray:
    return np.zeros(N_PARAMS)


def _unpack(params: np.ndarray) -> np.ndarray:
    p = np.asarray(params, dtype=float)
    if p.shape != (N_PARAMS,):
        raise DomainError(f"expected {N_PARAMS} parameters, got shape {p.shape}")
    return p.reshape(len(REGIONS), N_FEATURES + 1)


def design(X: np.ndarray) -> np.ndarray:
    return np.column_stack([X, np.ones(len(X))])


def loss_and_grad(params: np.ndarray, X: np.ndarray, Y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy over voxels and regions, with its gradient."""
    P = _unpack(params)
    Z = design(X) @ P.T  # (n, regions)
    # log(1 + e^z) - y z, computed stably
    loss = np.mean(np.logaddexp(0.0, Z) - Y * Z)
    G = (expit(Z) - Y).T @ design(X) / Z.size
    return float(loss), G.ravel()


def stack_cases(cases: Sequence[SyntheticCase]) -> tuple[np.ndarray, np.ndarray]:
    if not cases:
        return np.zeros((0, N_FEATURES)), np.zeros((0, len(REGIONS)))
    return np.concatenate([c.features for c in cases]), np.concatenate([c.targets() for c in cases])


def local_train(params: np.ndarray, cases: Sequence[SyntheticCase], epochs: int, lr: float,
                rng: np.random.Generator, batch_size: int = 512) -> tuple[np.ndarray, float]:
    """Mini-batch gradient descent; returns new parameters and the mean batch loss of the last epoch.

    With ``epochs == 0`` the parameters are returned unchanged together with
    the loss on all of ``cases``.
    """
    if epochs < 0:
        raise DomainError("epochs must be >= 0")
    X, Y = stack_cases(cases)
    theta = np.array(params, dtype=float)
    if epochs == 0 or len(X) == 0:
        loss = loss_and_grad(theta, X, Y)[0] if len(X) else 0.0
        return theta, loss
    loss = math.nan
    for _ in range(epochs):
        order = rng.permutation(len(X))
        losses, weights = [], []
        for start in range(0, len(X), batch_size):
            idx = order[start : start + batch_size]
            batch_loss, grad = loss_and_grad(theta, X[idx], Y[idx])
            theta -= lr * grad
            losses.append(batch_loss)
            weights.append(len(idx))
        loss = float(np.average(losses, weights=weights))
    if not (math.isfinite(loss) and np.all(np.isfinite(theta))):
        raise NumericError("local training diverged")
    return theta, loss


def train_stream(seed: int, round_idx: int, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_TRAIN_STREAM, round_idx, k)))


def predict(params: np.ndarray, case: SyntheticCase) -> dict[str, LabelVolume]:
    """Threshold each region's sigmoid at 0.5 (strict), then enforce ET within TC within WT."""
    P = _unpack(params)
    Z = design(case.features) @ P.T
    masks = {r: (Z[:, i] > 0).reshape(case.dims) for i, r in enumerate(REGIONS)}
    masks["TC"] &= masks["WT"]
    masks["ET"] &= masks["TC"]
    return {r: LabelVolume(m) for r, m in masks.items()}


def mean_dice(params: np.ndarray, cases: Sequence[SyntheticCase]) -> float:
    """Mean DSC over cases and the three regions."""
    if not cases:
        raise DomainError("no cases to evaluate")
    scores = []
    for case in cases:
        pred = predict(params, case)
        scores += [dice(case.labels[r], pred[r]) for r in REGIONS]
    return float(np.mean(scores))


# --- export ------------------------------------------------------------------


def export_dataset(dataset: Dataset, out_dir, case_ids: Sequence[str] | None = None) -> None:
    """Write ``<case>_<region>.lbv`` label files plus ``manifest.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = sorted(dataset.cases if case_ids is None else case_ids)
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", "site_id", "wt_voxels"])
        for cid in ids:
            case = dataset.cases[cid]
            w.writerow([cid, dataset.partitioning.assignment[cid], case.wt_size])
            for r in REGIONS:
                save_volume(case.labels[r], out / f"{cid}_{r}.lbv")


def export_predictions(params: np.ndarray, cases: Sequence[SyntheticCase], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for case in cases:
        for r, vol in predict(params, case).items():
            save_volume(vol, out / f"{case.case_id}_{r}.lbv")


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"case_id": row["case_id"], "site_id": int(row["site_id"]), "wt_voxels": int(row["wt_voxels"])}
            for row in csv.DictReader(fh)
        ]


def import_labels(in_dir) -> dict[str, dict[str, LabelVolume]]:
    """Load every ``<case>_<region>.lbv`` file in a directory, grouped by case."""
    out: dict[str, dict[str, LabelVolume]] = {}
    for path in sorted(Path(in_dir).glob("*.lbv")):
        case, _, region = path.stem.rpartition("_")
        if region not in REGIONS or not case:
            continue
        out.setdefault(case, {})[region] = load_volume(path)
    return out
