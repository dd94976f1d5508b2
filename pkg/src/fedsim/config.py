"""Declarative experiment configuration.

One INI-style file drives a whole run.  Every section maps onto one of
the component dataclasses, unknown sections or keys are rejected, and a
canonical hash of the parsed values names the run, so reordering keys in
the file never changes the hash.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Dict

from .aggregation import AggregationConfig
from .backbone import BackboneConfig
from .client import ClientHyper
from .data import SyntheticGraphConfig
from .distill import ServerDistillConfig
from .rl import AgentConfig, RewardConfig

METHODS = ("fedrio", "fedavg", "fedprox")


class ConfigError(ValueError):
    pass


@dataclass
class RunSettings:
    method: str = "fedrio"
    num_clients: int = 10
    rounds: int = 100
    master_seed: int = 0
    output_dir: str = "runs"
    dataset_path: str = ""
    edge_path: str = ""
    alpha: float = 0.5
    mu_prox: float = 0.01
    disable_masks: bool = False
    disable_rl: bool = False
    disable_adaptive_mp: bool = False


@dataclass
class ExperimentConfig:
    run: RunSettings = field(default_factory=RunSettings)
    synthetic: SyntheticGraphConfig = field(default_factory=SyntheticGraphConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    client: ClientHyper = field(default_factory=ClientHyper)
    reward: RewardConfig = field(default_factory=RewardConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    distill: ServerDistillConfig = field(default_factory=ServerDistillConfig)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)

    def validate(self) -> "ExperimentConfig":
        run = self.run
        if run.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got '{run.method}'")
        if run.num_clients < 2:
            raise ConfigError("num_clients must be at least 2")
        if run.rounds < 1:
            raise ConfigError("rounds must be at least 1")
        if run.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if run.mu_prox < 0:
            raise ConfigError("mu_prox must be nonnegative")
        if self.client.local_epochs < 1:
            raise ConfigError("local_epochs must be at least 1")
        return self

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        out = {}
        for section in dataclasses.fields(self):
            out[section.name] = dataclasses.asdict(getattr(self, section.name))
        return out


# feature_dim in [backbone] comes from the dataset, never the file
_HIDDEN_KEYS = {"backbone": {"feature_dim", "adaptive"}}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(section: str, key: str, text: str, target_type: type) -> Any:
    text = text.strip()
    if target_type is bool:
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"[{section}] {key}: expected a boolean, got '{text}'")
    try:
        if target_type is int:
            return int(text)
        if target_type is float:
            return float(text)
    except ValueError:
        raise ConfigError(
            f"[{section}] {key}: expected {target_type.__name__}, got '{text}'")
    return text


def load_config(path: str) -> ExperimentConfig:
    """Parse and validate a key = value config file."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        read = parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}")
    if not read:
        raise ConfigError(f"config file not found: {path}")

    config = ExperimentConfig()
    sections = {f.name: getattr(config, f.name)
                for f in dataclasses.fields(config)}
    for section in parser.sections():
        if section not in sections:
            raise ConfigError(f"unknown config section [{section}]")
        target = sections[section]
        known = {f.name: f.type for f in dataclasses.fields(target)}
        hidden = _HIDDEN_KEYS.get(section, set())
        for key, text in parser.items(section):
            if key not in known or key in hidden:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")
            current = getattr(target, key)
            setattr(target, key, _convert(section, key, text, type(current)))
    return config.validate()


def config_hash(config: ExperimentConfig) -> str:
    """Stable short hash of the config contents."""
    canonical = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def write_config(config: ExperimentConfig, path: str) -> None:
    """Emit the config as a round-trippable INI file."""
    parser = configparser.ConfigParser(interpolation=None)
    for section, values in config.to_dict().items():
        hidden = _HIDDEN_KEYS.get(section, set())
        parser[section] = {k: str(v) for k, v in values.items()
                           if k not in hidden}
    with open(path, "w") as fh:
        parser.write(fh)
