#!/usr/bin/env python3
"""
Moodshift - Test Module
=======================

Unit tests for the moodshift pipeline.

Test Modules:
- test_catalog: embedding store, metadata, splits
- test_simindex: similarity map and pair sampling
- test_model: forward/backward pass and checkpoints
- test_losses: joint objective and its gradients
- test_train: AdamW, training loop, k-fold and ablation
- test_evaluation: retrieval metrics and baselines
- test_synth: synthetic catalog generator
- test_config: configuration loading
- test_cli: command-line pipeline
- test_acceptance: cross-module oracles; full-length training with MOODSHIFT_SLOW=1
"""

# Test module initialization
