#!/usr/bin/env python3
"""
Unit Tests for Training
=======================

AdamW updates, the epoch loop with validation-based model selection,
k-fold training and the loss ablation grid.
"""

import os
import sys
import tempfile
import unittest
from dataclasses import replace
from pathlib import Path
from unittest.mock import patch

import numpy as np

# Add parent directory to path for imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from moodshift import train as train_module
from moodshift.catalog import split_catalog
from moodshift.errors import ConfigError, NonFiniteGradientError, TrainingDivergedError, ValidationError
from moodshift.model import load_checkpoint
from moodshift.simindex import build_similarity_map
from moodshift.train import (
    ABLATION_COMBOS, AdamState, TrainConfig, adamw_step, learning_rate_at, run_ablation, train_kfold, train_model,
)
from fixtures import tiny_catalog


class TestAdamW(unittest.TestCase):
    """Single-parameter oracles for the bias-corrected, decoupled update."""

    def setUp(self):
        self.params = {'w': np.array([1.0])}
        self.state = AdamState.zeros(self.params)

    def test_first_step_without_decay(self):
        config = TrainConfig(learning_rate=0.1, weight_decay=0.0)
        adamw_step(self.params, {'w': np.array([1.0])}, self.state, config)
        self.assertAlmostEqual(self.params['w'][0], 0.9, places=7)
        self.assertEqual(self.state.step, 1)

    def test_decay_is_decoupled(self):
        config = TrainConfig(learning_rate=0.1, weight_decay=0.01)
        adamw_step(self.params, {'w': np.array([1.0])}, self.state, config)
        expected = 1.0 * (1 - 0.1 * 0.01) - 0.1 * 1.0 / (1.0 + 1e-8)
        self.assertAlmostEqual(self.params['w'][0], expected, places=12)

    def test_step_size_is_gradient_scale_free(self):
        config = TrainConfig(learning_rate=0.1, weight_decay=0.0)
        adamw_step(self.params, {'w': np.array([250.0])}, self.state, config)
        self.assertAlmostEqual(self.params['w'][0], 0.9, places=7)

    def test_non_finite_gradient_names_tensor(self):
        params = {'a': np.ones(2), 'b': np.ones(2)}
        state = AdamState.zeros(params)
        with self.assertRaises(NonFiniteGradientError) as ctx:
            adamw_step(params, {'a': np.ones(2), 'b': np.array([1.0, np.inf])}, state, TrainConfig())
        self.assertEqual(ctx.exception.tensor, 'b')
        np.testing.assert_array_equal(params['a'], np.ones(2))
        self.assertEqual(state.step, 0)


class TestTrainConfig(unittest.TestCase):

    def test_presets(self):
        large = TrainConfig.preset('large_scale')
        small = TrainConfig.preset('small')
        self.assertEqual((large.epochs, large.learning_rate), (100, 1e-5))
        self.assertEqual((small.epochs, small.learning_rate), (500, 5e-4))
        self.assertEqual(large.batch_size, 1024)

    def test_unknown_preset(self):
        with self.assertRaises(ConfigError):
            TrainConfig.preset('huge')

    def test_invalid_values(self):
        with self.assertRaises(ConfigError):
            TrainConfig(epochs=0)
        with self.assertRaises(ConfigError):
            TrainConfig(lr_schedule='cosine')

    def test_linear_schedule(self):
        config = TrainConfig(learning_rate=1.0, lr_schedule='linear')
        self.assertEqual(learning_rate_at(config, 0, 4), 1.0)
        self.assertEqual(learning_rate_at(config, 2, 4), 0.5)
        self.assertEqual(learning_rate_at(TrainConfig(learning_rate=1.0), 2, 4), 1.0)


class TestTrainModel(unittest.TestCase):
    """Epoch loop on a tiny synthetic catalog."""

    @classmethod
    def setUpClass(cls):
        cls.catalog = tiny_catalog()
        cls.split = split_catalog(cls.catalog, rng_seed=0)
        cls.simmap = build_similarity_map(cls.catalog, cls.split, 'train', k=10)

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.checkpoint = Path(self.tmp.name) / 'model.mdl'
        self.config = TrainConfig(epochs=1, batch_size=64, rng_seed=1)

    def tearDown(self):
        self.tmp.cleanup()

    def test_single_epoch_smoke(self):
        report = train_model(self.catalog, self.split, self.simmap, self.config, self.checkpoint)
        self.assertEqual(len(report.epochs), 1)
        self.assertEqual(report.best_epoch, 0)
        self.assertEqual(report.epochs[0].loss.batch_size, len(self.simmap))
        self.assertTrue(0.0 <= report.best_val_mood_p1 <= 1.0)
        params, metadata = load_checkpoint(self.checkpoint)
        self.assertEqual(params.checksum(), report.best_params.checksum())
        self.assertEqual(metadata['best_epoch'], 0)
        self.assertEqual(metadata['hyperparameters']['epochs'], 1)
        self.assertEqual(len(report.to_frame()), 1)

    def test_identity_fraction_near_one_in_m(self):
        report = train_model(self.catalog, self.split, self.simmap, replace(self.config, epochs=3))
        fractions = [e.identity_fraction for e in report.epochs]
        self.assertAlmostEqual(float(np.mean(fractions)), 0.25, delta=0.1)

    def test_deterministic_given_seed(self):
        config = replace(self.config, epochs=2)
        a = train_model(self.catalog, self.split, self.simmap, config)
        b = train_model(self.catalog, self.split, self.simmap, config)
        self.assertEqual(a.best_params.checksum(), b.best_params.checksum())
        self.assertEqual(a.to_dict(), b.to_dict())

    def test_best_epoch_is_earliest_maximum(self):
        report = train_model(self.catalog, self.split, self.simmap, replace(self.config, epochs=4))
        scores = [e.val_mood_p1 for e in report.epochs]
        self.assertEqual(report.best_epoch, scores.index(max(scores)))
        self.assertEqual(report.best_val_mood_p1, max(scores))

    def test_map_must_cover_train(self):
        val_map = build_similarity_map(self.catalog, self.split, 'val', k=5)
        with self.assertRaises(ValidationError):
            train_model(self.catalog, self.split, val_map, self.config)

    def test_divergence_is_reported(self):
        config = replace(self.config, learning_rate=1e300)
        with self.assertRaises((TrainingDivergedError, NonFiniteGradientError)):
            train_model(self.catalog, self.split, self.simmap, replace(config, epochs=3))


class TestKFold(unittest.TestCase):

    def test_three_folds_and_mean(self):
        catalog = tiny_catalog(seed=2)
        with tempfile.TemporaryDirectory() as tmp:
            report = train_kfold(catalog, 3, TrainConfig(epochs=1, batch_size=64), index_k=10, out_dir=tmp)
            self.assertTrue((Path(tmp) / 'fold2' / 'model.mdl').exists())
        self.assertEqual(len(report.fold_reports), 3)
        model_rows = report.table[report.table['method'] == 'model']
        self.assertEqual(list(model_rows['fold']), [0, 1, 2, 'mean'])
        self.assertAlmostEqual(model_rows['mood_p1'].iloc[-1], model_rows['mood_p1'].iloc[:3].mean())
        methods = set(report.mean_table()['method'])
        self.assertTrue({'model', 'random', 'oracle-top1', 'oracle-top100'} <= methods)


class TestAblation(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.catalog = tiny_catalog(seed=4)
        cls.split = split_catalog(cls.catalog, rng_seed=0)
        cls.simmap = build_similarity_map(cls.catalog, cls.split, 'train', k=10)
        cls.config = TrainConfig(epochs=1, batch_size=64, rng_seed=2)

    def test_seven_cells_in_order(self):
        result = run_ablation(self.catalog, self.split, self.config, simmaps=[self.simmap])
        self.assertEqual(list(result.table['combo']), [name for name, _ in ABLATION_COMBOS])
        self.assertTrue((result.table['status'] == 'ok').all())
        self.assertIn(result.best_combo, set(result.table['combo']))
        self.assertEqual(list(result.pp_view().columns), ['combo', 'mood_pp_vs_random', 'genre_pp_vs_random'])

    def test_cell_matches_standalone_run(self):
        result = run_ablation(self.catalog, self.split, self.config, simmaps=[self.simmap])
        cosine_only = replace(self.config, loss=self.config.loss.with_weights(1.0, 0.0, 0.0))
        report = train_model(self.catalog, self.split, self.simmap, cosine_only)
        row = result.table[result.table['combo'] == 'cosine'].iloc[0]
        self.assertEqual(row['val_mood_p1'], report.best_val_mood_p1)

    def test_failed_cell_is_marked(self):
        original = train_module.train_model

        def flaky(catalog, split, simmap, config, *args, **kwargs):
            if config.loss.weights == (0.0, 0.0, 1.0):
                raise TrainingDivergedError(0, 0, float('nan'))
            return original(catalog, split, simmap, config, *args, **kwargs)

        with patch.object(train_module, 'train_model', side_effect=flaky):
            result = run_ablation(self.catalog, self.split, self.config, simmaps=[self.simmap])
        statuses = dict(zip(result.table['combo'], result.table['status']))
        self.assertTrue(statuses['cosbce'].startswith('failed'))
        self.assertEqual(sum(s == 'ok' for s in statuses.values()), 6)
        self.assertNotEqual(result.best_combo, 'cosbce')


if __name__ == '__main__':
    unittest.main()
