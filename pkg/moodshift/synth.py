#!/usr/bin/env python3
"""
Synthetic Catalogs
==================

Labeled embedding catalogs with controllable mood, genre and instrument
structure. Each embedding is

    mood_centroid[mood] + genre_centroid[genre] + artist_offset + noise

with mood centroids, genre centroids and artist offsets drawn from mutually
orthogonal subspaces of one random orthonormal basis. Moods are assigned per
track (balanced), genres per artist.
"""

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from .catalog import Catalog, Track, save_catalog
from .errors import ConfigError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CONFIG_ECHO_FILE = "synth_config.json"

_MAX_RATE = 0.95


@dataclass(frozen=True)
class SynthConfig:
    d: int = 64
    moods: int = 4
    genres: int = 5
    instruments: int = 10
    mean_instruments: float = 2.77
    artists: int = 400
    tracks_per_artist: int = 10
    mood_axis_scale: float = 3.0
    genre_axis_scale: float = 3.0
    artist_scale: float = 1.0
    noise_scale: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("d", "genres", "instruments", "artists", "tracks_per_artist"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}", field=f"synth.{name}")
        if self.moods < 2:
            raise ConfigError(f"moods must be >= 2, got {self.moods}", field="synth.moods")
        for name in ("mood_axis_scale", "genre_axis_scale", "artist_scale", "noise_scale"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}", field=f"synth.{name}")
        if not 0 <= self.mean_instruments <= _MAX_RATE * self.instruments:
            raise ConfigError(
                f"mean_instruments must lie in [0, {_MAX_RATE * self.instruments:g}] for {self.instruments} "
                f"instruments, got {self.mean_instruments}", field="synth.mean_instruments")
        if self.d < self.moods + self.genres:
            raise ConfigError(
                f"d={self.d} cannot host {self.moods} mood and {self.genres} genre axes orthogonally",
                field="synth.d")

    @property
    def track_count(self) -> int:
        return self.artists * self.tracks_per_artist

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Optional[Dict], rng_seed: Optional[int] = None) -> "SynthConfig":
        values = dict(values or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError("Unknown synth setting", field=f"synth.{unknown[0]}")
        if rng_seed is not None:
            values["rng_seed"] = rng_seed
        types = {f.name: f.type for f in fields(cls)}
        for key, value in values.items():
            try:
                values[key] = types[key](value)
            except (TypeError, ValueError):
                raise ConfigError(f"{key} must be a number, got {value!r}", field=f"synth.{key}")
        return cls(**values)


def instrument_rates(rng: np.random.Generator, genres: int, instruments: int, mean: float) -> np.ndarray:
    """
    Per-genre Bernoulli rates whose row sums equal ``mean``, so the expected
    number of active instruments per track is ``mean`` in every genre.
    """
    rates = np.empty((genres, instruments), dtype=np.float64)
    for g in range(genres):
        raw = rng.gamma(1.0, size=instruments)
        row = raw / raw.sum() * mean
        # Redistribute mass clipped at the cap over the uncapped entries.
        for _ in range(instruments):
            capped = row >= _MAX_RATE
            row = np.minimum(row, _MAX_RATE)
            deficit = mean - row.sum()
            if deficit <= 1e-12 or capped.all():
                break
            free = ~capped
            row[free] += deficit * raw[free] / raw[free].sum()
        rates[g] = row
    return rates


def generate(config: SynthConfig) -> Catalog:
    """Generate a catalog deterministically from ``config.rng_seed``."""
    rng = np.random.default_rng(config.rng_seed)
    d, m, g = config.d, config.moods, config.genres

    basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
    mood_centroids = config.mood_axis_scale * basis[:, :m].T
    genre_centroids = config.genre_axis_scale * basis[:, m:m + g].T
    residual = basis[:, m + g:]

    artist_genres = rng.integers(g, size=config.artists)
    if residual.shape[1]:
        coords = rng.standard_normal((config.artists, residual.shape[1])) / np.sqrt(residual.shape[1])
        artist_offsets = config.artist_scale * coords @ residual.T
    else:
        artist_offsets = np.zeros((config.artists, d))
    rates = instrument_rates(rng, g, config.instruments, config.mean_instruments)

    n = config.track_count
    moods = rng.permutation(np.arange(n) % m)
    track_artists = np.repeat(np.arange(config.artists), config.tracks_per_artist)
    track_genres = artist_genres[track_artists]
    noise = rng.standard_normal((n, d)) * (config.noise_scale / np.sqrt(d))
    embeddings = mood_centroids[moods] + genre_centroids[track_genres] + artist_offsets[track_artists] + noise
    active = rng.random((n, config.instruments)) < rates[track_genres]

    tracks = [
        Track(
            id=f"t{i:06d}",
            artist_id=f"a{int(track_artists[i]):04d}",
            embedding=embeddings[i].astype(np.float32),
            mood=int(moods[i]),
            genre=int(track_genres[i]),
            instruments=frozenset(int(j) for j in np.flatnonzero(active[i])),
        )
        for i in range(n)
    ]
    catalog = Catalog(tracks, mood_count=m, genre_count=g, instrument_count=config.instruments)
    logger.info(f"Generated synthetic catalog: {n} tracks, {config.artists} artists, d={d}, "
                f"mean instruments {active.sum(axis=1).mean():.2f}")
    return catalog


def write_synthetic(config: SynthConfig, embeddings_path: PathLike,
                    metadata_path: PathLike) -> Tuple[Catalog, Dict[str, Path]]:
    """Generate a catalog, write it and echo the config into a JSON sidecar beside the metadata."""
    catalog = generate(config)
    paths = {
        "embeddings": Path(embeddings_path),
        "metadata": Path(metadata_path),
        "config": Path(metadata_path).parent / CONFIG_ECHO_FILE,
    }
    save_catalog(catalog, paths["embeddings"], paths["metadata"])
    with open(paths["config"], "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
    return catalog, paths
