#!/usr/bin/env python3
"""
Experiment Configuration
========================

Loads the YAML experiment configuration (JSON files are accepted too),
deep-merges it over the built-in defaults and exposes typed views for each
pipeline stage.
"""

import copy
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import yaml

from .catalog import SPLIT_NAMES, derive_seeds
from .errors import ConfigError
from .losses import LossConfig
from .synth import SynthConfig
from .train import PRESETS, TrainConfig

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent.parent / "config" / "moodshift_config.yaml"

SEED_STREAMS = ("synth", "split", "train", "eval")


def _get_default_config() -> Dict:
    """Get default configuration if the YAML file is not available."""
    return {
        "paths": {"out_dir": "runs/default", "embeddings": None, "metadata": None},
        "runtime": {"seed": 7, "threads": 1},
        "synth": SynthConfig().to_dict() | {"rng_seed": None},
        "split": {"ratios": [0.8, 0.1, 0.1], "tolerance": 0.05, "kfold": None},
        "index": {"k": 100},
        "loss": LossConfig().to_dict(),
        "train": {
            "preset": None,
            "epochs": 200,
            "batch_size": 1024,
            "learning_rate": 5e-4,
            "weight_decay": 0.01,
            "beta1": 0.9,
            "beta2": 0.999,
            "eps": 1e-8,
            "lr_schedule": "constant",
            "selection_weights": {"mood": 0.6, "genre": 0.4},
            "presets": copy.deepcopy(PRESETS),
        },
        "eval": {"split": "test", "methods": ["model", "random", "avg-mood", "oracle-top1", "oracle-top100"]},
    }


def deep_merge(base: Dict, override: Dict) -> Dict:
    """Recursively merge ``override`` into a copy of ``base``."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _read_yaml(path: Path) -> Dict:
    try:
        with open(path, "r", encoding="utf-8") as file:
            values = yaml.safe_load(file)
    except yaml.YAMLError as e:
        raise ConfigError(f"Error parsing configuration file: {e}", path=str(path))
    if values is None:
        return {}
    if not isinstance(values, dict):
        raise ConfigError("Configuration must be a mapping", path=str(path))
    return values


def load_config(config_path: Optional[PathLike] = None) -> Dict:
    """
    Load configuration from YAML.

    Without a path, the packaged default file is read; if it is missing or
    unreadable the built-in defaults are used. An explicitly named file must
    exist and parse.
    """
    defaults = _get_default_config()
    if config_path is None:
        try:
            user = _read_yaml(DEFAULT_CONFIG_PATH)
        except FileNotFoundError:
            logger.warning(f"Configuration file not found at {DEFAULT_CONFIG_PATH}, using defaults")
            return defaults
        except ConfigError as e:
            logger.warning(f"{e}, using defaults")
            return defaults
        source = DEFAULT_CONFIG_PATH
    else:
        source = Path(config_path)
        try:
            user = _read_yaml(source)
        except FileNotFoundError:
            raise ConfigError("Configuration file not found", path=str(source))

    unknown = sorted(set(user) - set(defaults))
    if unknown:
        raise ConfigError("Unknown configuration section", path=str(source), field=unknown[0])
    for section, values in user.items():
        if values is not None and isinstance(defaults[section], dict) and not isinstance(values, dict):
            raise ConfigError("Section must be a mapping", path=str(source), field=section)
    return deep_merge(defaults, {k: v for k, v in user.items() if v is not None})


@dataclass
class ExperimentConfig:
    """Resolved configuration with typed per-stage views."""
    raw: Dict
    source: Optional[str] = None

    @classmethod
    def load(cls, config_path: Optional[PathLike] = None, seed: Optional[int] = None,
             threads: Optional[int] = None) -> "ExperimentConfig":
        raw = load_config(config_path)
        if seed is not None:
            raw["runtime"]["seed"] = int(seed)
        if threads is not None:
            raw["runtime"]["threads"] = int(threads)
        config = cls(raw=raw, source=str(config_path) if config_path is not None else None)
        config.validate()
        return config

    def _error(self, message: str, field: str) -> ConfigError:
        return ConfigError(message, path=self.source, field=field)

    def validate(self):
        """Build every typed view once so bad values fail before any work starts."""
        if self.threads < 1:
            raise self._error(f"threads must be >= 1, got {self.threads}", "runtime.threads")
        if self.eval_split not in SPLIT_NAMES:
            raise self._error(f"split must be one of {SPLIT_NAMES}", "eval.split")
        if self.index_k < 1:
            raise self._error(f"k must be >= 1, got {self.index_k}", "index.k")
        self.synth()
        self.train()

    @property
    def seed(self) -> int:
        return int(self.raw["runtime"]["seed"])

    @property
    def threads(self) -> int:
        return int(self.raw["runtime"]["threads"])

    def seeds(self) -> Dict[str, int]:
        """Independent seed streams for each randomized stage."""
        return dict(zip(SEED_STREAMS, derive_seeds(self.seed, len(SEED_STREAMS))))

    @property
    def out_dir(self) -> Path:
        return Path(self.raw["paths"]["out_dir"])

    def catalog_paths(self, out_dir: Optional[PathLike] = None) -> Tuple[Path, Path]:
        out_dir = Path(out_dir) if out_dir is not None else self.out_dir
        paths = self.raw["paths"]
        embeddings = Path(paths["embeddings"]) if paths.get("embeddings") else out_dir / "catalog" / "embeddings.emb"
        metadata = Path(paths["metadata"]) if paths.get("metadata") else out_dir / "catalog" / "metadata.jsonl"
        return embeddings, metadata

    def synth(self) -> SynthConfig:
        values = dict(self.raw["synth"])
        seed = values.pop("rng_seed", None)
        try:
            return SynthConfig.from_dict(values, rng_seed=seed if seed is not None else self.seeds()["synth"])
        except TypeError as e:
            raise self._error(f"Invalid synth setting: {e}", "synth")

    @property
    def split_ratios(self) -> List[float]:
        return [float(r) for r in self.raw["split"]["ratios"]]

    @property
    def split_tolerance(self) -> float:
        return float(self.raw["split"]["tolerance"])

    @property
    def kfold(self) -> Optional[int]:
        value = self.raw["split"].get("kfold")
        return int(value) if value is not None else None

    @property
    def index_k(self) -> int:
        return int(self.raw["index"]["k"])

    def loss(self) -> LossConfig:
        return LossConfig.from_dict(self.raw["loss"])

    def train(self) -> TrainConfig:
        """
        Typed optimizer settings; a named preset replaces ``epochs`` and
        ``learning_rate`` of the train section.
        """
        values = dict(self.raw["train"])
        preset = values.pop("preset", None)
        presets = values.pop("presets", None) or PRESETS
        if preset is not None:
            if preset not in presets:
                raise self._error(f"Unknown preset '{preset}', expected one of {sorted(presets)}", "train.preset")
            values.update(presets[preset])
        weights = values.pop("selection_weights", None) or {"mood": 0.6, "genre": 0.4}
        try:
            return TrainConfig.from_dict(
                values,
                rng_seed=self.seeds()["train"],
                loss=self.loss(),
                kfold=self.kfold,
                selection_weights=(float(weights["mood"]), float(weights["genre"])),
            )
        except ConfigError:
            raise
        except (TypeError, KeyError, ValueError) as e:
            raise self._error(f"Invalid train setting: {e}", "train")

    @property
    def eval_split(self) -> str:
        return str(self.raw["eval"]["split"])

    @property
    def eval_methods(self) -> List[str]:
        return list(self.raw["eval"]["methods"])

    def to_dict(self) -> Dict:
        return copy.deepcopy(self.raw)

    def config_hash(self) -> str:
        """SHA-256 of the resolved configuration in canonical JSON."""
        canonical = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
