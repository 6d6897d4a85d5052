"""Glue from an :class:`ExperimentConfig` to a finished run on disk."""

from __future__ import annotations

import time
from pathlib import Path

from . import synthtask
from .config import ExperimentConfig
from .engine import Federation, build_collaborators, run_experiment, write_artifacts
from .timesim import TimeModel


def build_federation(cfg: ExperimentConfig, **kwargs) -> tuple[Federation, synthtask.Dataset]:
    task = cfg.task
    dataset = synthtask.generate_dataset(cfg.seed, task["n_cases"], task["site_profile"], task["n_sites"],
                                         tuple(task["dims"]))
    partitioning = dataset.partitioning
    if task["partitioning"] == "artificial":
        partitioning = synthtask.partition_artificial(partitioning, dataset.cases, task["n_split"])
    collabs = build_collaborators(dataset, partitioning, cfg.seed)
    time_model = TimeModel(cfg.timing_profile(collabs), cfg.seed, cfg.budget_obj())
    fed = Federation(dataset, partitioning, cfg.bundle(), time_model, cfg.seed,
                     batch_size=cfg.training["batch_size"], collaborators=collabs, **kwargs)
    return fed, dataset


def run_config(cfg: ExperimentConfig, out_dir=None) -> dict:
    start = time.perf_counter()
    fed, dataset = build_federation(cfg)
    result = run_experiment(fed, cfg.max_rounds)
    extra = {
        "seed": cfg.seed,
        "aggregator": cfg.aggregator["name"],
        "selector": cfg.selector["name"],
        "hyperparameters": cfg.hyperparameters["name"],
        "partitioning": cfg.task["partitioning"],
        "n_collaborators": len(fed.collaborators),
    }
    out = Path(out_dir or cfg.output_dir)
    return write_artifacts(out, result, dataset, extra, wall_time=time.perf_counter() - start)
