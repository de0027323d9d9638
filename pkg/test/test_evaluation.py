#!/usr/bin/env python3
"""
Unit Tests for Retrieval Evaluation
===================================

Nearest-neighbour retrieval, the P@1 / J@1 metrics and the training-free
baselines.
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

from moodshift.catalog import Catalog, SplitAssignment, split_catalog
from moodshift.errors import DimensionMismatchError, ValidationError
from moodshift.evaluation import (
    METHOD_RANDOM, EvalReport, RetrievalPool, baseline_avg_mood, baseline_oracle, baseline_random,
    compare_reports, enumerate_queries, evaluate_model, expected_jaccard_bernoulli, jaccard, nearest_neighbor,
    pp_vs_random,
)
from moodshift.model import init_params, save_checkpoint
from moodshift.simindex import build_similarity_map
from moodshift.synth import SynthConfig, generate
from fixtures import make_track, tiny_catalog


class TestMetrics(unittest.TestCase):

    def test_jaccard(self):
        self.assertEqual(jaccard([], []), 1.0)
        self.assertEqual(jaccard([1, 2], [2, 3]), 1 / 3)
        self.assertEqual(jaccard([1], []), 0.0)

    def test_expected_jaccard_exact_small_case(self):
        # one class, p = 0.5: both present (1/4) or both absent (1/4) score 1
        self.assertAlmostEqual(expected_jaccard_bernoulli(1, 0.5), 0.5)
        self.assertEqual(expected_jaccard_bernoulli(1, 1.0), 1.0)

    def test_expected_jaccard_sparse_labels(self):
        value = expected_jaccard_bernoulli(40, 2.77)
        self.assertTrue(0.03 < value < 0.05, value)

    def test_expected_jaccard_rejects_impossible_mean(self):
        with self.assertRaises(ValidationError):
            expected_jaccard_bernoulli(3, 4.0)


class TestRetrieval(unittest.TestCase):

    def setUp(self):
        self.catalog = Catalog([
            make_track('c', 'x', [1.0, 0.0], 0),
            make_track('b', 'y', [2.0, 0.0], 1),
            make_track('a', 'z', [3.0, 0.0], 1),
            make_track('d', 'w', [0.0, 1.0], 0),
        ], mood_count=2)

    def test_ties_go_to_lowest_id(self):
        self.assertEqual(nearest_neighbor([1.0, 0.1], self.catalog).id, 'a')
        self.assertEqual(nearest_neighbor([1.0, 0.1], self.catalog, exclude=['a']).id, 'b')

    def test_pool_restriction(self):
        track = nearest_neighbor([1.0, 0.0], self.catalog, pool_ids=['c', 'd'])
        self.assertEqual(track.id, 'c')

    def test_empty_pool(self):
        with self.assertRaises(ValidationError):
            nearest_neighbor([1.0, 0.0], self.catalog, pool_ids=['c'], exclude=['c'])

    def test_dimension_mismatch(self):
        with self.assertRaises(DimensionMismatchError):
            RetrievalPool(self.catalog).nearest([[1.0, 0.0, 0.0]])

    def test_zero_query(self):
        with self.assertRaises(ValidationError):
            RetrievalPool(self.catalog).nearest([[0.0, 0.0]])

    def test_top_k_self_match(self):
        catalog = tiny_catalog()
        pool = RetrievalPool(catalog)
        ranked = pool.top_k(catalog.embeddings[:3], k=5)
        for row, entries in enumerate(ranked):
            self.assertEqual(len(entries), 5)
            self.assertEqual(entries[0][0], row)
            self.assertAlmostEqual(entries[0][1], 1.0, places=6)
            sims = [s for _, s in entries]
            self.assertEqual(sims, sorted(sims, reverse=True))

    def test_top_k_clipped_to_pool(self):
        self.assertEqual(len(RetrievalPool(self.catalog).top_k([[1.0, 1.0]], k=10)[0]), 4)


class TestQueries(unittest.TestCase):

    def test_every_other_mood_once(self):
        catalog = tiny_catalog()
        split = split_catalog(catalog, rng_seed=0)
        seed_rows, targets = enumerate_queries(catalog, split, 'test')
        self.assertEqual(seed_rows.size, len(split.ids('test')) * 3)
        self.assertFalse((catalog.moods[seed_rows] == targets).any())


class TestBaselines(unittest.TestCase):
    """Chance levels, centroid queries and oracle upper bounds."""

    @classmethod
    def setUpClass(cls):
        cls.catalog = generate(SynthConfig(rng_seed=3, mood_axis_scale=4.0))
        cls.split = split_catalog(cls.catalog, rng_seed=0)
        cls.test_map = build_similarity_map(cls.catalog, cls.split, 'test', k=100)

    def test_random_is_analytic(self):
        report = baseline_random(self.catalog, self.split)
        self.assertEqual(report.method, METHOD_RANDOM)
        self.assertEqual(report.mood_p1, 0.25)
        self.assertEqual(report.genre_p1, 0.2)
        mean = report.extras['mean_instrument_labels']
        self.assertAlmostEqual(report.inst_j1, expected_jaccard_bernoulli(10, mean))
        self.assertAlmostEqual(report.confusion.sum(), report.n_queries)

    def test_avg_mood_is_near_perfect_on_mood(self):
        report = baseline_avg_mood(self.catalog, self.split)
        self.assertGreaterEqual(report.mood_p1, 0.95)
        _, targets = enumerate_queries(self.catalog, self.split, 'test')
        np.testing.assert_array_equal(report.confusion.sum(axis=1), np.bincount(targets, minlength=4))

    def test_avg_mood_needs_every_mood(self):
        tracks = [make_track(f't{i}', f'a{i}', [1.0, i + 1.0], i % 2) for i in range(6)]
        catalog = Catalog(tracks, mood_count=3)
        split = SplitAssignment({t: 'test' for t in catalog.ids})
        with self.assertRaises(ValidationError):
            baseline_avg_mood(catalog, split)

    def test_oracle_top1_always_hits_the_mood(self):
        report = baseline_oracle(self.catalog, self.test_map, self.split, 'top1')
        self.assertEqual(report.mood_p1, 1.0)
        self.assertEqual(report.skipped, 0)

    def test_oracle_top1_beats_top100_on_genre(self):
        top1 = baseline_oracle(self.catalog, self.test_map, self.split, 'top1')
        top100 = baseline_oracle(self.catalog, self.test_map, self.split, 'top100', np.random.default_rng(0))
        self.assertEqual(top100.mood_p1, 1.0)
        self.assertGreaterEqual(top1.genre_p1, top100.genre_p1)

    def test_oracle_needs_matching_map(self):
        train_map = build_similarity_map(self.catalog, self.split, 'train', k=5)
        with self.assertRaises(ValidationError):
            baseline_oracle(self.catalog, train_map, self.split, 'top1')
        with self.assertRaises(ValidationError):
            baseline_oracle(self.catalog, self.test_map, self.split, 'top100')


class TestReports(unittest.TestCase):

    def setUp(self):
        self.catalog = tiny_catalog()
        self.split = split_catalog(self.catalog, rng_seed=0)

    def test_evaluate_checkpoint(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'model.mdl'
            save_checkpoint(init_params(self.catalog.dim, 4, 0), path)
            report = evaluate_model(path, self.catalog, self.split, 'test')
        self.assertEqual(report.n_queries, len(self.split.ids('test')) * 3)
        self.assertAlmostEqual(report.confusion.sum(), report.n_queries)
        self.assertTrue(0.0 <= report.mood_p1 <= 1.0)

    def test_model_must_match_catalog(self):
        with self.assertRaises(DimensionMismatchError):
            evaluate_model(init_params(self.catalog.dim + 1, 4, 0), self.catalog, self.split)

    def test_json_round_trip(self):
        report = evaluate_model(init_params(self.catalog.dim, 4, 0), self.catalog, self.split)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'eval.json'
            report.save(path, Path(tmp) / 'confusion.csv')
            with open(path) as f:
                restored = EvalReport.from_dict(json.load(f))
        self.assertEqual(restored.row(), report.row())
        np.testing.assert_array_equal(restored.confusion, report.confusion)
        self.assertEqual(list(report.confusion_frame().columns)[0], 'retrieved_0')

    def test_compare_and_pp(self):
        random_report = baseline_random(self.catalog, self.split)
        model = evaluate_model(init_params(self.catalog.dim, 4, 0), self.catalog, self.split)
        frame = pp_vs_random(compare_reports([model, random_report]), random_report)
        self.assertEqual(list(frame['method']), ['model', 'random'])
        self.assertEqual(frame['mood_pp_vs_random'].iloc[1], 0.0)
        self.assertAlmostEqual(frame['mood_pp_vs_random'].iloc[0], (model.mood_p1 - 0.25) * 100.0)


if __name__ == '__main__':
    unittest.main()
