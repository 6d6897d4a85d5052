"""Experiment configuration (YAML) with fail-fast validation.

Unknown keys are errors and every error names the dotted key path, e.g.
``aggregator.name``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .aggregators import AGGREGATORS, make_aggregator
from .engine import POLICIES, HotspotBundle
from .errors import ConfigError
from .selection import SELECTORS, make_selector
from .timesim import ACTIONS, WEEK_SECONDS, ActionDist, Budget, TimingProfile

DEFAULTS: dict[str, Any] = {
    "seed": 42,
    "budget": float(WEEK_SECONDS),
    "max_rounds": 20,
    "w": 3.0,
    "output_dir": "fedsim-out",
    "task": {
        "n_cases": 100,
        "n_sites": 10,
        "site_profile": "skewed",
        "dims": [16, 16, 16],
        "partitioning": "natural",
        "n_split": 5,
    },
    "training": {"batch_size": 512},
    "hyperparameters": {"name": "constant"},
    "selector": {"name": "all"},
    "timing": {"profile": "synthetic", "sigma_fraction": 0.1},
}

_TOP_KEYS = {"seed", "budget", "max_rounds", "w", "output_dir", "task", "training",
             "aggregator", "selector", "hyperparameters", "timing"}
_TASK_KEYS = set(DEFAULTS["task"])
_TRAINING_KEYS = {"batch_size"}
_TIMING_KEYS = {"profile", "sigma_fraction", "overrides", *ACTIONS}
_POLICY_OPTIONS = {"constant": {"lr", "epochs"}, "cosine": {"lr_max", "lr_min", "epochs", "max_epochs"}}


@dataclass
class ExperimentConfig:
    seed: int
    budget: float
    max_rounds: int | None
    w: float
    output_dir: str
    task: dict
    training: dict
    aggregator: dict
    selector: dict
    hyperparameters: dict
    timing: dict
    raw: dict = field(default_factory=dict, repr=False)

    def bundle(self) -> HotspotBundle:
        agg = dict(self.aggregator)
        sel = dict(self.selector)
        hp = dict(self.hyperparameters)
        return HotspotBundle(
            make_aggregator(agg.pop("name"), **agg),
            make_selector(sel.pop("name"), **sel),
            POLICIES[hp.pop("name")](**hp),
        )

    def timing_profile(self, collaborator_ids) -> TimingProfile:
        t = self.timing
        ids = sorted(collaborator_ids)
        if t["profile"] == "synthetic":
            profile = TimingProfile.synthetic(ids, self.seed, t.get("sigma_fraction", 0.1))
        else:
            profile = TimingProfile.constant(ids, **{a: t[a] for a in ACTIONS if a in t})
        for k, per in (t.get("overrides") or {}).items():
            k = int(k)
            if k not in profile.dists:
                raise ConfigError(f"no collaborator {k}", f"timing.overrides.{k}")
            for action, spec in per.items():
                if action not in ACTIONS:
                    raise ConfigError(f"unknown action {action!r}", f"timing.overrides.{k}.{action}")
                mu, sigma = (spec, 0.0) if isinstance(spec, (int, float)) else spec
                profile.dists[k][action] = ActionDist(float(mu), float(sigma))
        return profile

    def budget_obj(self) -> Budget:
        return Budget(self.budget)


def _unknown(block: dict, allowed: set, prefix: str) -> None:
    for key in block:
        if key not in allowed:
            raise ConfigError("unknown key", f"{prefix}{key}")


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("aggregator", "selector", "hyperparameters"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _strategy_block(raw: dict, key: str, registry, options_of) -> dict:
    if key not in raw:
        raise ConfigError("missing strategy block", key)
    block = raw[key]
    if not isinstance(block, dict):
        raise ConfigError("must be a mapping", key)
    if "name" not in block:
        raise ConfigError("missing strategy name", f"{key}.name")
    name = block["name"]
    if name not in registry:
        raise ConfigError(f"unknown strategy {name!r}; choose from {sorted(registry)}", f"{key}.name")
    _unknown({k: v for k, v in block.items() if k != "name"}, set(options_of(name)), f"{key}.")
    return dict(block)


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at top level")
    _unknown(raw, _TOP_KEYS, "")
    cfg = _merge(DEFAULTS, raw)
    for key in ("task", "training", "timing"):
        if not isinstance(cfg[key], dict):
            raise ConfigError("must be a mapping", key)
    _unknown(cfg["task"], _TASK_KEYS, "task.")
    _unknown(cfg["training"], _TRAINING_KEYS, "training.")
    _unknown(cfg["timing"], _TIMING_KEYS, "timing.")
    aggregator = _strategy_block(cfg, "aggregator", AGGREGATORS, lambda n: AGGREGATORS[n].options)
    selector = _strategy_block(cfg, "selector", SELECTORS, lambda n: SELECTORS[n].options)
    hyper = _strategy_block(cfg, "hyperparameters", POLICIES, lambda n: _POLICY_OPTIONS[n])

    if not isinstance(cfg["seed"], int):
        raise ConfigError("must be an integer", "seed")
    try:
        budget = float(cfg["budget"])
    except (TypeError, ValueError):
        raise ConfigError("must be a number", "budget") from None
    if not budget > 0:
        raise ConfigError("must be > 0", "budget")
    w = float(cfg["w"])
    if w < 0:
        raise ConfigError("must be >= 0", "w")
    max_rounds = cfg["max_rounds"]
    if max_rounds is not None and (not isinstance(max_rounds, int) or max_rounds < 1):
        raise ConfigError("must be a positive integer or null", "max_rounds")
    task = cfg["task"]
    if task["partitioning"] not in ("natural", "artificial"):
        raise ConfigError("must be 'natural' or 'artificial'", "task.partitioning")
    if cfg["timing"]["profile"] not in ("synthetic", "constant"):
        raise ConfigError("must be 'synthetic' or 'constant'", "timing.profile")

    out = ExperimentConfig(cfg["seed"], budget, max_rounds, w, str(cfg["output_dir"]), task,
                           cfg["training"], aggregator, selector, hyper, cfg["timing"], raw)
    # instantiate once so constructor-level checks (coefficient sums etc.) surface now
    for key in ("aggregator", "selector", "hyperparameters"):
        try:
            block = dict(getattr(out, key))
            name = block.pop("name")
            {"aggregator": make_aggregator, "selector": make_selector,
             "hyperparameters": lambda n, **kw: POLICIES[n](**kw)}[key](name, **block)
        except ConfigError as exc:
            raise ConfigError(str(exc), key) from None
        except TypeError as exc:
            raise ConfigError(str(exc), key) from None
    return out


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from None
    return parse_config(raw)
