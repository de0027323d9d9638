#!/usr/bin/env python3
"""
Unit Tests for the Transformation Network
=========================================

Parameter layout, forward pass, manual backpropagation (checked against
finite differences) and the MDL1 checkpoint format.
"""

import json
import os
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

# Add parent directory to path for imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from moodshift.errors import CatalogFormatError, DimensionMismatchError, ValidationError
from moodshift.model import (
    EVAL, GUIDE_DROPOUT, OUTPUT_DROPOUT, SEED_DROPOUT, TENSOR_ORDER, TRAIN, MoodTransformer, backward,
    checkpoint_sidecar_path, dropout_mask, forward, guidance_vectors, init_params, load_checkpoint, parameter_count,
    save_checkpoint,
)
from fixtures import gradient_check_entries


class TestParameters(unittest.TestCase):

    def test_parameter_count(self):
        d, m = 64, 4
        expected = (d * 1024 + 1024 + 1024 * 512 + 512 + m * 64 + 64 + 64 * 128 + 128 + 640 * d + d)
        self.assertEqual(parameter_count(d, m), expected)
        self.assertEqual(init_params(d, m, 0).count(), expected)

    def test_init_is_deterministic(self):
        a = init_params(8, 4, 5)
        b = init_params(8, 4, 5)
        self.assertEqual(a.checksum(), b.checksum())
        self.assertNotEqual(a.checksum(), init_params(8, 4, 6).checksum())
        self.assertEqual(list(a.tensors), list(TENSOR_ORDER))

    def test_biases_start_at_zero(self):
        params = init_params(8, 4, 0)
        for name in TENSOR_ORDER:
            if name.endswith('_b1') or name.endswith('_b2') or name == 'out_b':
                self.assertFalse(params[name].any(), name)

    def test_guidance_vectors(self):
        g = guidance_vectors([0, 2], [1, 2], 4)
        np.testing.assert_array_equal(g, [[-1, 1, 0, 0], [0, 0, 0, 0]])


class TestForward(unittest.TestCase):

    def setUp(self):
        self.params = init_params(8, 4, 1)
        self.x = np.random.default_rng(2).normal(size=(5, 8))
        self.y_s = np.array([0, 1, 2, 3, 0])
        self.y_t = np.array([1, 1, 0, 2, 3])

    def test_eval_is_deterministic(self):
        a, _ = forward(self.params, self.x, self.y_s, self.y_t, EVAL)
        b, _ = forward(self.params, self.x, self.y_s, self.y_t, EVAL)
        self.assertEqual(a.shape, (5, 8))
        np.testing.assert_array_equal(a, b)

    def test_rows_are_independent_in_eval(self):
        batch, _ = forward(self.params, self.x, self.y_s, self.y_t, EVAL)
        single, _ = forward(self.params, self.x[2], [self.y_s[2]], [self.y_t[2]], EVAL)
        np.testing.assert_allclose(single[0], batch[2], rtol=1e-10, atol=1e-10)

    def test_train_mode_needs_rng(self):
        with self.assertRaises(ValidationError):
            forward(self.params, self.x, self.y_s, self.y_t, TRAIN)

    def test_train_mode_applies_dropout(self):
        out, trace = forward(self.params, self.x, self.y_s, self.y_t, TRAIN, np.random.default_rng(0))
        self.assertEqual(set(trace.masks), {'seed', 'guide', 'concat'})
        kept = trace.masks['seed'] > 0
        self.assertAlmostEqual(float(kept.mean()), 0.7, delta=0.05)
        np.testing.assert_allclose(trace.masks['seed'][kept], 1 / 0.7)
        evaluated, _ = forward(self.params, self.x, self.y_s, self.y_t, EVAL)
        self.assertFalse(np.allclose(out, evaluated))

    def test_keep_rates_over_many_draws(self):
        self.assertEqual((SEED_DROPOUT, GUIDE_DROPOUT, OUTPUT_DROPOUT), (0.3, 0.4, 0.3))
        rng = np.random.default_rng(5)
        for rate, keep in ((SEED_DROPOUT, 0.7), (GUIDE_DROPOUT, 0.6), (OUTPUT_DROPOUT, 0.7)):
            masks = dropout_mask(rng, (10_000, 128), rate)
            self.assertAlmostEqual(float((masks > 0).mean()), keep, delta=0.01)
            self.assertAlmostEqual(float(masks.mean()), 1.0, delta=0.01)

    def test_non_finite_row(self):
        x = self.x.copy()
        x[3, 1] = np.nan
        with self.assertRaisesRegex(ValidationError, 'batch row 3'):
            forward(self.params, x, self.y_s, self.y_t)

    def test_dimension_mismatch(self):
        with self.assertRaises(DimensionMismatchError):
            forward(self.params, np.ones((2, 7)), [0, 1], [1, 0])

    def test_mood_out_of_range(self):
        with self.assertRaises(ValidationError):
            forward(self.params, self.x[:1], [0], [4])


class TestBackward(unittest.TestCase):
    """Analytic gradients against central finite differences."""

    def setUp(self):
        rng = np.random.default_rng(7)
        self.params = init_params(6, 3, 3)
        for name in TENSOR_ORDER:
            if self.params[name].ndim == 1:
                self.params.tensors[name] = rng.normal(scale=0.1, size=self.params[name].shape)
        self.x = rng.normal(size=(4, 6))
        self.y_s = np.array([0, 1, 2, 0])
        self.y_t = np.array([1, 2, 0, 2])
        self.weights = rng.normal(size=(4, 6))
        self.rng = rng

    def _loss(self, masks):
        out, _ = forward(self.params, self.x, self.y_s, self.y_t, TRAIN, masks=masks)
        return float(np.sum(out * self.weights))

    def test_gradients_match_finite_differences(self):
        _, trace = forward(self.params, self.x, self.y_s, self.y_t, TRAIN, np.random.default_rng(0))
        grads = backward(trace, self.weights, self.params)
        self.assertEqual(list(grads), list(TENSOR_ORDER))
        h = 1e-5
        for name in TENSOR_ORDER:
            tensor = self.params[name]
            self.assertEqual(grads[name].shape, tensor.shape)
            flat = tensor.reshape(-1)
            for index in gradient_check_entries(flat.size, self.rng):
                original = flat[index]
                flat[index] = original + h
                plus = self._loss(trace.masks)
                flat[index] = original - h
                minus = self._loss(trace.masks)
                flat[index] = original
                numeric = (plus - minus) / (2 * h)
                analytic = grads[name].reshape(-1)[index]
                self.assertLessEqual(abs(analytic - numeric), 1e-5 * max(abs(analytic), abs(numeric)) + 1e-8,
                                     f'{name}[{index}]')

    def test_trace_from_other_params(self):
        _, trace = forward(self.params, self.x, self.y_s, self.y_t)
        with self.assertRaises(ValidationError):
            backward(trace, self.weights, self.params.copy())

    def test_upstream_shape(self):
        _, trace = forward(self.params, self.x, self.y_s, self.y_t)
        with self.assertRaises(ValidationError):
            backward(trace, self.weights[:2])


class TestCheckpoint(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / 'model.mdl'
        self.params = init_params(8, 4, 9)

    def tearDown(self):
        self.tmp.cleanup()

    def test_save_and_load(self):
        save_checkpoint(self.params, self.path, {'best_epoch': 3})
        loaded, metadata = load_checkpoint(self.path)
        self.assertEqual((loaded.d, loaded.m), (8, 4))
        for name in TENSOR_ORDER:
            np.testing.assert_array_equal(loaded[name], self.params.rounded()[name])
        self.assertEqual(metadata['best_epoch'], 3)
        self.assertEqual(metadata['checksum'], self.params.checksum())
        self.assertEqual(metadata['parameter_count'], parameter_count(8, 4))

    def test_sidecar_is_json(self):
        save_checkpoint(self.params, self.path)
        with open(checkpoint_sidecar_path(self.path)) as f:
            self.assertEqual(json.load(f)['d'], 8)

    def test_bad_magic(self):
        save_checkpoint(self.params, self.path)
        self.path.write_bytes(b'XXXX' + self.path.read_bytes()[4:])
        with self.assertRaisesRegex(CatalogFormatError, 'Magic mismatch'):
            load_checkpoint(self.path)

    def test_transformer_matches_forward(self):
        save_checkpoint(self.params, self.path)
        transformer = MoodTransformer.load(self.path)
        x = np.random.default_rng(0).normal(size=(3, 8))
        expected, _ = forward(self.params.rounded(), x, [0, 1, 2], [3, 3, 3])
        np.testing.assert_allclose(transformer.transform(x, [0, 1, 2], [3, 3, 3]), expected)


if __name__ == '__main__':
    unittest.main()
