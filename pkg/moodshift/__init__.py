#!/usr/bin/env python3
"""
Moodshift - Mood-Guided Embedding Transformation
================================================

Transforms music embeddings toward a target mood while keeping genre and
instrumentation, so nearest-neighbour retrieval returns similar songs in a
different mood.

Modules:
- catalog: track records, binary embedding store, artist-disjoint splits
- simindex: per-mood similarity map and training-pair sampling
- model: two-branch network with manual backprop and checkpoints
- losses: cosine, triplet and cosine-BCE objectives
- train: AdamW epoch loop, k-fold training and loss ablation
- evaluation: retrieval metrics and training-free baselines
- synth: synthetic catalog generator
- cli: command-line pipeline
"""

__version__ = "1.0.0"

from .catalog import Catalog, SplitAssignment, Track, kfold_split, load_catalog, save_catalog, split_catalog
from .errors import MoodshiftError, ValidationError
from .evaluation import EvalReport, baseline_avg_mood, baseline_oracle, baseline_random, evaluate_model
from .losses import LossConfig, loss_total
from .model import ModelParams, MoodTransformer, forward, backward, init_params, load_checkpoint, save_checkpoint
from .simindex import SimilarityMap, build_similarity_map, sample_pair
from .synth import SynthConfig, generate
from .train import TrainConfig, TrainReport, adamw_step, run_ablation, train_kfold, train_model

__all__ = [
    'Catalog',
    'SplitAssignment',
    'Track',
    'load_catalog',
    'save_catalog',
    'split_catalog',
    'kfold_split',
    'MoodshiftError',
    'ValidationError',
    'EvalReport',
    'evaluate_model',
    'baseline_random',
    'baseline_avg_mood',
    'baseline_oracle',
    'LossConfig',
    'loss_total',
    'ModelParams',
    'MoodTransformer',
    'init_params',
    'forward',
    'backward',
    'save_checkpoint',
    'load_checkpoint',
    'SimilarityMap',
    'build_similarity_map',
    'sample_pair',
    'SynthConfig',
    'generate',
    'TrainConfig',
    'TrainReport',
    'adamw_step',
    'train_model',
    'train_kfold',
    'run_ablation',
]
