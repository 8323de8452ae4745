"""TOML experiment configs: parsing, validation, seed resolution and digests.

A config names one or more experiments, a master seed and an output
directory; an optional section per experiment overrides that experiment's
knobs::

    experiments = ["mismatch_sweep"]
    seed = 0
    output_dir = "runs/sweep"

    [mismatch_sweep]
    n_train = 20000
    deltas = [0.0, 0.1, 0.2]

Multi-seed experiments take ``n_seeds`` and use seeds ``seed, seed + 1, ...``.
The ``SGNN_SEED`` environment variable replaces the master seed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .attribution import AttributionConfig
from .bounds import SweepConfig
from .modelselect import FitConfig, ModelSelectionConfig
from .oracle import BayesConvergenceConfig

EXPERIMENTS = {
    "bayes_convergence": BayesConvergenceConfig,
    "mismatch_sweep": SweepConfig,
    "attribution": AttributionConfig,
    "model_selection": ModelSelectionConfig,
}
MULTI_SEED = ("bayes_convergence", "mismatch_sweep")
DEFAULT_N_SEEDS = 3
TOP_LEVEL = ("experiments", "experiment", "seed", "output_dir")
SEED_ENV = "SGNN_SEED"


class ConfigError(ValueError):
    """Invalid or incomplete config; the message names the offending field."""


@dataclass
class ExperimentConfig:
    experiments: tuple
    seed: int
    output_dir: Path
    knobs: dict = field(default_factory=dict)  # experiment tag -> module config dataclass

    def resolved(self) -> dict:
        out = {"experiments": list(self.experiments), "seed": self.seed}
        for tag in self.experiments:
            out[tag] = _plain(dataclasses.asdict(self.knobs[tag]))
        return out

    def digest(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def seeds(self) -> dict:
        out = {}
        for tag in self.experiments:
            k = self.knobs[tag]
            out[tag] = list(k.seeds) if tag in MULTI_SEED else [k.seed]
        return out


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, Path):
        return str(v)
    return v


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _require_int(name, v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"field '{name}' must be an integer, got {v!r}")
    return v


def build_knobs(tag: str, section: dict, seed: int):
    """Module config for ``tag`` from a TOML section plus the master seed."""
    cls = EXPERIMENTS[tag]
    names = {f.name for f in dataclasses.fields(cls)}
    section = dict(section)
    kwargs = {}
    if tag in MULTI_SEED:
        n_seeds = _require_int(f"{tag}.n_seeds", section.pop("n_seeds", DEFAULT_N_SEEDS))
        if n_seeds < 1:
            raise ConfigError(f"field '{tag}.n_seeds' must be >= 1")
        kwargs["seeds"] = tuple(seed + i for i in range(n_seeds))
        if "seeds" in section:
            raise ConfigError(f"field '{tag}.seeds' is derived from 'seed' and 'n_seeds'")
    else:
        if "seed" in section:
            raise ConfigError(f"field '{tag}.seed' is set by the top-level 'seed'")
        kwargs["seed"] = seed
    fit = section.pop("fit", None) if tag == "model_selection" else None
    for key, value in section.items():
        if key not in names:
            raise ConfigError(f"unknown field '{tag}.{key}'")
        value = _tuplify(value)
        if key == "bandwidth":
            value = str(value)
        kwargs[key] = value
    if fit is not None:
        if not isinstance(fit, dict):
            raise ConfigError(f"field '{tag}.fit' must be a table")
        fit_names = {f.name for f in dataclasses.fields(FitConfig)} - {"sir_box", "seir_box"}
        for key in fit:
            if key not in fit_names:
                raise ConfigError(f"unknown field '{tag}.fit.{key}'")
        try:
            kwargs["fit"] = FitConfig(**fit)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"field '{tag}.fit': {exc}") from None
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section '{tag}': {exc}") from None


def parse_config(data: dict, env=None,
                 force_experiment: str | None = None) -> ExperimentConfig:
    env = os.environ if env is None else env
    if force_experiment is not None:
        # single-experiment subcommands ignore the other experiments' sections
        keep = {k: v for k, v in data.items() if k in ("seed", "output_dir", force_experiment)}
        data = {"experiments": [force_experiment], **keep}
    if "experiments" in data and "experiment" in data:
        raise ConfigError("give either 'experiments' or 'experiment', not both")
    if "experiment" in data:
        tags = [data["experiment"]]
    elif "experiments" in data:
        tags = data["experiments"]
    else:
        raise ConfigError("missing field 'experiments'")
    if isinstance(tags, str) or not isinstance(tags, list) or not tags:
        raise ConfigError("field 'experiments' must be a nonempty list of experiment tags")
    for tag in tags:
        if tag not in EXPERIMENTS:
            raise ConfigError(f"field 'experiments': unknown experiment {tag!r}; "
                              f"expected one of {sorted(EXPERIMENTS)}")
    if len(set(tags)) != len(tags):
        raise ConfigError("field 'experiments' lists an experiment twice")
    if "seed" not in data:
        raise ConfigError("missing field 'seed'")
    seed = _require_int("seed", data["seed"])
    if env.get(SEED_ENV, "").strip():
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    if seed < 0:
        raise ConfigError("field 'seed' must be >= 0")
    if "output_dir" not in data:
        raise ConfigError("missing field 'output_dir'")
    if not isinstance(data["output_dir"], str) or not data["output_dir"]:
        raise ConfigError("field 'output_dir' must be a nonempty string")
    for key, value in data.items():
        if key in TOP_LEVEL:
            continue
        if key not in EXPERIMENTS:
            raise ConfigError(f"unknown field {key!r}")
        if key not in tags:
            raise ConfigError(f"section [{key}] given but '{key}' is not in 'experiments'")
        if not isinstance(value, dict):
            raise ConfigError(f"field {key!r} must be a table")
    knobs = {tag: build_knobs(tag, data.get(tag, {}), seed) for tag in tags}
    return ExperimentConfig(tuple(tags), seed, Path(data["output_dir"]), knobs)


def load_config(path, env=None, force_experiment: str | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {str(path)!r}: {exc.strerror}") from None
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config {str(path)!r} is not valid TOML: {exc}") from None
    return parse_config(data, env, force_experiment)
