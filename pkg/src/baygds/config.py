"""Experiment configuration: one flat YAML document, environment overrides, stage hashes.

Every artifact records the hash of the configuration keys that produced it.
A later stage recomputes that hash from its own configuration and refuses to
continue on mismatch, so changing e.g. `eta` never invalidates a trained
model, while changing `pool_seed` does.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import yaml

from . import __version__
from .mechanics import LOADING_PATHS

ENV_PREFIX = "BAYGDS_"


class ConfigError(ValueError):
    pass


class HashMismatchError(ConfigError):
    pass


@dataclass
class ExperimentConfig:
    # pool
    pool_size: int = 2000
    pool_seed: int = 0
    grid_n: int = 32
    quantile_range: list = field(default_factory=lambda: [0.32, 0.70])
    correlation_range: list | None = None
    # features
    n_z: int = 6
    stencil: int = 4
    # loading schedule
    paths: list = field(default_factory=lambda: list(LOADING_PATHS))
    n_increments: int = 20
    beta_deg: float = 45.0
    # oracle
    oracle: str = "synthetic"
    oracle_seed: int = 0
    noise_std: float = 1e-2
    mismatch: float = 0.0
    gain: float = 4.0
    oracle_command: list | None = None
    oracle_dir: str | None = None
    oracle_timeout: float = 600.0
    # surrogate
    n_r: int = 3
    mc_samples: int = 64
    train_steps: int = 1500
    retrain_steps: int = 1500
    restart_period: int = 500
    lr: float = 0.03
    variational: str = "full"
    surrogate_seed: int = 0
    # active learning
    n_init: int = 10
    n_test: int = 200
    t_max: int = 230
    eps: float = 1e-3
    window: int = 5
    init_strategy: str = "lhs"
    acquisition: str = "uncertainty"
    batch: int = 1
    score_cap: int | None = None
    al_seed: int = 0
    checkpoint_every: int = 0
    # selection campaign
    eta: float = 0.05
    e_max: int = 50
    weights: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    n_targets: int = 100
    combinations: list | None = None  # None -> all seven
    checkpoints: list = field(default_factory=lambda: [1, 5, 10, 20, 50])
    shortlist_size: int | None = None
    exclude_training: bool = False
    campaign_seed: int = 0
    # execution only; never hashed
    jobs: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.pool_size >= 2, "pool_size must be >= 2")
        need(self.grid_n >= 8 and self.grid_n % 2 == 0, "grid_n must be even and >= 8")
        q = self.quantile_range
        need(len(q) == 2 and 0 < q[0] <= q[1] < 1, "quantile_range must be [lo, hi] inside (0, 1)")
        need(1 <= self.n_z < self.pool_size, "n_z must be in [1, pool_size)")
        need(self.stencil in (4, 8), "stencil must be 4 or 8")
        need(self.n_increments >= 1, "n_increments must be >= 1")
        need(self.oracle in ("synthetic", "external"), "oracle must be 'synthetic' or 'external'")
        need(self.noise_std >= 0, "noise_std must be >= 0")
        need(self.n_r >= 1 and self.mc_samples >= 2, "n_r >= 1 and mc_samples >= 2 required")
        need(self.train_steps >= 0 and self.retrain_steps >= 0 and self.restart_period >= 1, "invalid step budget")
        need(self.lr > 0, "lr must be positive")
        need(self.variational in ("full", "diag"), "variational must be 'full' or 'diag'")
        need(self.n_init >= 1 and self.n_test >= 1, "n_init and n_test must be >= 1")
        need(self.n_init + self.n_test <= self.pool_size, "n_init + n_test must not exceed pool_size")
        need(self.t_max >= 0 and self.window >= 1 and self.batch >= 1, "t_max >= 0, window >= 1, batch >= 1")
        need(self.eps >= 0, "eps must be >= 0")
        need(self.init_strategy in ("lhs", "random", "kmedoids"), "init_strategy must be lhs, random or kmedoids")
        need(self.acquisition in ("uncertainty", "random"), "acquisition must be 'uncertainty' or 'random'")
        need(self.eta > 0, "eta must be positive")
        need(1 <= self.e_max <= self.pool_size, "e_max must be in [1, pool_size]")
        need(len(self.weights) == 3 and min(self.weights) >= 0 and sum(self.weights) > 0,
             "weights must list three non-negative values (P11, P22, P12) with a positive sum")
        need(self.n_targets >= 1, "n_targets must be >= 1")
        need(all(int(c) >= 1 for c in self.checkpoints), "checkpoints must be positive")
        need(self.jobs >= 1, "jobs must be >= 1")
        if self.oracle == "external":
            need(bool(self.oracle_command) or bool(self.oracle_dir), "external oracle needs oracle_command or oracle_dir")

    # -- hashing
    def stage_hash(self, stage: str) -> str:
        keys = []
        for s in STAGES:
            keys += STAGE_KEYS[s]
            if s == stage:
                break
        else:
            raise ConfigError(f"unknown stage {stage!r}")
        doc = {k: getattr(self, k) for k in keys}
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def stamp(self, stage: str) -> str:
        return f"baygds {__version__} {stage}={self.stage_hash(stage)}"

    def check_stamp(self, stamp: str | None, stage: str, source: str) -> None:
        """Abort unless `stamp` (from an artifact) matches this config's hash for `stage`."""
        if not stamp:
            raise HashMismatchError(f"{source}: no configuration stamp found; regenerate it with this tool")
        token = next((t for t in stamp.split() if t.startswith(f"{stage}=")), None)
        if token is None:
            raise HashMismatchError(f"{source}: stamp '{stamp}' carries no {stage} hash")
        got, want = token.split("=", 1)[1], self.stage_hash(stage)
        if got != want:
            raise HashMismatchError(
                f"{source} was produced with a different {stage} configuration (hash {got}, current {want}); "
                f"rerun the {stage} stage or restore the matching config"
            )

    def to_yaml(self) -> str:
        return yaml.safe_dump(asdict(self), sort_keys=False)


STAGES = ("pool", "features", "oracle", "model", "campaign")
STAGE_KEYS = {
    "pool": ["pool_size", "pool_seed", "grid_n", "quantile_range", "correlation_range"],
    "features": ["n_z", "stencil"],
    "oracle": ["paths", "n_increments", "oracle", "oracle_seed", "noise_std", "mismatch", "gain", "oracle_command"],
    "model": ["n_r", "mc_samples", "train_steps", "retrain_steps", "restart_period", "lr", "variational",
              "surrogate_seed", "n_init", "n_test", "t_max", "eps", "window", "init_strategy", "acquisition",
              "batch", "score_cap", "al_seed"],
    "campaign": ["beta_deg", "eta", "e_max", "weights", "n_targets", "combinations", "checkpoints",
                 "shortlist_size", "exclude_training", "campaign_seed"],
}


def _coerce(name: str, raw: str, current: Any) -> Any:
    if isinstance(current, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{ENV_PREFIX}{name.upper()}: expected a boolean, got {raw!r}")
    try:
        return yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{ENV_PREFIX}{name.upper()}: cannot parse {raw!r}") from exc


def load_config(path=None, env: dict | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults < YAML file < BAYGDS_<KEY> environment variables < explicit overrides."""
    env = os.environ if env is None else env
    known = {f.name: f for f in fields(ExperimentConfig)}
    doc: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                loaded = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must be a key: value mapping")
        unknown = sorted(set(loaded) - set(known))
        if unknown:
            raise ConfigError(f"config {path}: unknown keys {unknown}")
        doc.update(loaded)
    defaults = ExperimentConfig.__new__(ExperimentConfig)
    for f in fields(ExperimentConfig):
        setattr(defaults, f.name, f.default_factory() if callable(f.default_factory) else f.default)
    for name in known:
        key = ENV_PREFIX + name.upper()
        if key in env:
            doc[name] = _coerce(name, env[key], doc.get(name, getattr(defaults, name)))
    doc.update(overrides or {})
    try:
        return ExperimentConfig(**doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
