#!/usr/bin/env python3
"""Small catalogs and configurations shared by the test modules."""

import json
import os
import sys

import numpy as np

# Add parent directory to path for imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from moodshift.catalog import Catalog, Track
from moodshift.synth import SynthConfig, generate

TINY_SYNTH = {
    'd': 16,
    'moods': 4,
    'genres': 4,
    'instruments': 6,
    'mean_instruments': 2.0,
    'artists': 40,
    'tracks_per_artist': 5,
}


def tiny_synth_config(seed: int = 0, **overrides) -> SynthConfig:
    values = dict(TINY_SYNTH, rng_seed=seed)
    values.update(overrides)
    return SynthConfig(**values)


def tiny_catalog(seed: int = 0, **overrides) -> Catalog:
    """200 tracks, 40 artists, d=16."""
    return generate(tiny_synth_config(seed, **overrides))


def make_track(track_id, artist, vector, mood, genre=0, instruments=()):
    return Track(
        id=track_id,
        artist_id=artist,
        embedding=np.asarray(vector, dtype=np.float32),
        mood=mood,
        genre=genre,
        instruments=frozenset(instruments),
    )


def write_tiny_config(path, out_dir, epochs=1, **sections):
    """Write a JSON experiment config for a tiny end-to-end run."""
    config = {
        'paths': {'out_dir': str(out_dir)},
        'runtime': {'seed': 3, 'threads': 1},
        'synth': dict(TINY_SYNTH),
        'index': {'k': 20},
        'train': {'epochs': epochs, 'batch_size': 64},
    }
    for name, values in sections.items():
        config.setdefault(name, {}).update(values)
    with open(path, 'w') as f:
        json.dump(config, f)
    return path


def gradient_check_entries(size, rng, full_below=256, sampled=24):
    """Every flat index of a small tensor, a random sample of a large one."""
    if size <= full_below:
        return range(size)
    return rng.choice(size, size=sampled, replace=False)
