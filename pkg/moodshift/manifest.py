#!/usr/bin/env python3
"""
Run Manifests
=============

Every CLI command writes ``manifest_<command>.json`` next to its outputs: the command
and its arguments, the resolved configuration and its hash, the derived
seeds, package versions and SHA-256 digests of inputs and outputs. The
manifest carries no timestamp, so re-running a command with the same inputs
reproduces it byte for byte.
"""

import hashlib
import json
import logging
import platform
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Dict, Iterable, Optional, Union

from .config import ExperimentConfig

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MANIFEST_FILE = "manifest.json"
TRACKED_PACKAGES = ("numpy", "pandas", "pyyaml", "click", "rich")


def file_digest(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def package_versions() -> Dict[str, Optional[str]]:
    from . import __version__

    versions: Dict[str, Optional[str]] = {"python": platform.python_version(), "moodshift": __version__}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


@dataclass
class RunManifest:
    command: str
    arguments: Dict
    config: Dict
    config_hash: str
    seeds: Dict[str, int]
    versions: Dict[str, Optional[str]]
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def start(cls, command: str, arguments: Dict, config: ExperimentConfig) -> "RunManifest":
        return cls(
            command=command,
            arguments={k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(arguments.items())},
            config=config.to_dict(),
            config_hash=config.config_hash(),
            seeds=config.seeds(),
            versions=package_versions(),
        )

    def add_inputs(self, paths: Iterable[PathLike]):
        for path in paths:
            self.inputs[str(path)] = file_digest(path)

    def add_outputs(self, paths: Iterable[PathLike]):
        for path in paths:
            self.outputs[str(path)] = file_digest(path)

    def to_dict(self) -> Dict:
        """Convert to JSON-serializable dictionary."""
        return {
            "command": self.command,
            "arguments": self.arguments,
            "config": self.config,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "versions": self.versions,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
        }

    def write(self, out_dir: PathLike, name: str = MANIFEST_FILE) -> Path:
        path = Path(out_dir) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        logger.info(f"Wrote manifest {path}")
        return path


def load_manifest(path: PathLike) -> Dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
