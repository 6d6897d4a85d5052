"""Overlap and boundary-distance metrics for binary 3D masks.

Masks are carried as :class:`LabelVolume` objects (a boolean grid plus voxel
spacing). Distances are Euclidean in physical units, i.e. voxel index times
spacing.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import DomainError, ShapeError

REGIONS = ("ET", "WT", "TC")

_MAGIC = b"LBV1"
_HEADER = struct.Struct("<4s3I3d")


@dataclass(frozen=True)
class LabelVolume:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=bool)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise ShapeError(f"voxels must be a non-empty 3D grid, got shape {vox.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
            raise ShapeError(f"spacing must be three positive numbers, got {self.spacing}")
        vox = vox.copy()
        vox.setflags(write=False)
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", spacing)

    @classmethod
    def empty(cls, dims, spacing=(1.0, 1.0, 1.0)) -> "LabelVolume":
        return cls(np.zeros(tuple(dims), dtype=bool), spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)  # type: ignore[return-value]

    @property
    def count(self) -> int:
        return int(self.voxels.sum())

    def diagonal(self) -> float:
        """Physical length of the volume's main diagonal."""
        return math.sqrt(sum((n * s) ** 2 for n, s in zip(self.dims, self.spacing)))

    def __eq__(self, other):
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.voxels, other.voxels)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class RegionScores:
    region: str
    dsc: float
    hd95: float

    def __post_init__(self):
        if self.region not in REGIONS:
            raise DomainError(f"unknown region {self.region!r}")
        if not 0.0 <= self.dsc <= 1.0:
            raise DomainError(f"dsc out of [0, 1]: {self.dsc}")
        if self.hd95 < 0:
            raise DomainError(f"negative hd95: {self.hd95}")


def _check_dims(rs: LabelVolume, pm: LabelVolume) -> None:
    if rs.dims != pm.dims:
        raise ShapeError(f"dimension mismatch: {rs.dims} vs {pm.dims}")


def dice(rs: LabelVolume, pm: LabelVolume) -> float:
    """Dice similarity coefficient; two empty masks score 1.0."""
    _check_dims(rs, pm)
    a, b = rs.voxels, pm.voxels
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def surface_mask(voxels: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-neighbour that is background or outside."""
    vox = np.asarray(voxels, dtype=bool)
    padded = np.pad(vox, 1, constant_values=False)
    interior = vox.copy()
    core = (slice(1, -1),) * 3
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[core]
    return vox & ~interior


def surface_voxels(v: LabelVolume) -> np.ndarray:
    """Physical coordinates (n x 3) of the boundary voxels of ``v``."""
    idx = np.argwhere(surface_mask(v.voxels))
    return idx.astype(float) * np.asarray(v.spacing)


def percentile(values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    vals = np.sort(np.asarray(values, dtype=float).ravel())
    n = vals.size
    if n == 0:
        raise DomainError("percentile of an empty sequence")
    if not 0 < p <= 100:
        raise DomainError(f"p must be in (0, 100], got {p}")
    # rounding guards against p*n/100 landing a hair above an integer
    rank = math.ceil(round(p * n / 100.0, 9))
    return float(vals[min(max(rank, 1), n) - 1])


def directed_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from every point of ``src`` to its nearest point in ``dst``."""
    dist, _ = cKDTree(dst).query(src, k=1)
    return np.asarray(dist, dtype=float)


def hd95(rs: LabelVolume, pm: LabelVolume, empty_penalty: float | None = None) -> float:
    """Symmetric 95th-percentile surface distance.

    Both empty gives 0.0. Exactly one empty gives ``empty_penalty``, which
    defaults to the physical diagonal of the volume.
    """
    _check_dims(rs, pm)
    if rs.spacing != pm.spacing:
        raise ShapeError(f"spacing mismatch: {rs.spacing} vs {pm.spacing}")
    a, b = surface_voxels(rs), surface_voxels(pm)
    if len(a) == 0 and len(b) == 0:
        return 0.0
    if len(a) == 0 or len(b) == 0:
        return float(rs.diagonal() if empty_penalty is None else empty_penalty)
    return max(
        percentile(directed_distances(a, b), 95),
        percentile(directed_distances(b, a), 95),
    )


def region_scores(region: str, rs: LabelVolume, pm: LabelVolume) -> RegionScores:
    return RegionScores(region, dice(rs, pm), hd95(rs, pm))


# --- serialization -----------------------------------------------------------


def to_bytes(v: LabelVolume) -> bytes:
    header = _HEADER.pack(_MAGIC, *v.dims, *v.spacing)
    payload = np.packbits(v.voxels.ravel(order="C"), bitorder="little")
    return header + payload.tobytes()


def from_bytes(data: bytes) -> LabelVolume:
    if len(data) < _HEADER.size:
        raise ShapeError("truncated label volume header")
    magic, nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise ShapeError(f"bad magic {magic!r}")
    n = nx * ny * nz
    payload = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size)
    if payload.size != (n + 7) // 8:
        raise ShapeError(f"payload has {payload.size} bytes, expected {(n + 7) // 8}")
    bits = np.unpackbits(payload, count=n, bitorder="little").astype(bool)
    return LabelVolume(bits.reshape((nx, ny, nz), order="C"), (sx, sy, sz))


def save_volume(v: LabelVolume, path) -> None:
    Path(path).write_bytes(to_bytes(v))


def load_volume(path) -> LabelVolume:
    return from_bytes(Path(path).read_bytes())


def to_csv(v: LabelVolume) -> str:
    """Debug dump: dims and spacing as comment lines, then one i,j,k row per foreground voxel."""
    out = io.StringIO()
    out.write("# dims {} {} {}\n".format(*v.dims))
    out.write("# spacing {!r} {!r} {!r}\n".format(*v.spacing))
    out.write("i,j,k\n")
    for i, j, k in np.argwhere(v.voxels):
        out.write(f"{i},{j},{k}\n")
    return out.getvalue()


def from_csv(text: str) -> LabelVolume:
    dims = spacing = None
    coords = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("# dims"):
            dims = tuple(int(x) for x in line.split()[2:5])
        elif line.startswith("# spacing"):
            spacing = tuple(float(x) for x in line.split()[2:5])
        elif line == "i,j,k":
            continue
        else:
            coords.append(tuple(int(x) for x in line.split(",")))
    if dims is None:
        raise ShapeError("csv volume lacks a '# dims' line")
    vox = np.zeros(dims, dtype=bool)
    if coords:
        vox[tuple(np.array(coords).T)] = True
    return LabelVolume(vox, spacing or (1.0, 1.0, 1.0))
