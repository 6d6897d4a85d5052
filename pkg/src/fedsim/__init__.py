"""Federated segmentation challenge simulator: aggregation, selection, timing, and ranking."""

from .metrics import LabelVolume, dice, hd95, percentile, surface_voxels
from .ranking import RankTable, final_scores, rank_with_ties
from .convergence import ScoreCurve, convergence_score, project

__version__ = "0.1.0"

__all__ = [
    "LabelVolume",
    "RankTable",
    "ScoreCurve",
    "convergence_score",
    "dice",
    "final_scores",
    "hd95",
    "percentile",
    "project",
    "rank_with_ties",
    "surface_voxels",
]
