#!/usr/bin/env python3
"""
Unit Tests for the Command Line
===============================

Runs the full gen -> split -> index -> train -> evaluate -> compare pipeline
on a tiny synthetic catalog, then checks manifests, inference and exit codes.
"""

import json
import logging
import os
import sys
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import pandas as pd
from click.testing import CliRunner

# Add parent directory to path for imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from moodshift import cli as cli_module
from moodshift.catalog import load_catalog
from moodshift.cli import cli, main
from moodshift.errors import TrainingDivergedError
from moodshift.evaluation import METHODS
from moodshift.manifest import load_manifest
from fixtures import write_tiny_config


def release_log_files():
    for handler in logging.root.handlers[:]:
        handler.close()
        logging.root.removeHandler(handler)


class TestPipeline(unittest.TestCase):
    """One tiny end-to-end run shared by every test in this class."""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.out = Path(cls.tmp.name) / 'run'
        cls.config = write_tiny_config(Path(cls.tmp.name) / 'run.json', cls.out)
        cls.runner = CliRunner()
        for command in (['gen'], ['split'], ['index'], ['train'], ['evaluate'], ['compare']):
            cls.invoke(command)

    @classmethod
    def tearDownClass(cls):
        release_log_files()
        cls.tmp.cleanup()

    @classmethod
    def invoke(cls, args):
        result = cls.runner.invoke(cli, args + ['--config', str(cls.config)])
        if result.exit_code != 0:
            raise AssertionError(f"{' '.join(args)} exited {result.exit_code}: {result.output}")
        return result

    def test_stage_outputs_exist(self):
        for name in ('catalog/embeddings.emb', 'catalog/metadata.jsonl', 'catalog/synth_config.json',
                     'splits.json', 'simmap_train.sim', 'simmap_train.json', 'simmap_test.sim', 'simmap_test.json',
                     'model.mdl', 'model.json', 'train_report.json', 'train_report.csv', 'moodshift.log'):
            self.assertTrue((self.out / name).exists(), name)

    def test_catalog_matches_config(self):
        catalog = load_catalog(self.out / 'catalog' / 'embeddings.emb', self.out / 'catalog' / 'metadata.jsonl')
        self.assertEqual(len(catalog), 200)
        self.assertEqual(catalog.dim, 16)

    def test_every_method_evaluated(self):
        for method in METHODS:
            with open(self.out / f'eval_{method}.json') as f:
                report = json.load(f)
            self.assertEqual(report['method'], method)
            self.assertTrue((self.out / f'eval_{method}_confusion.csv').exists())

    def test_compare_table(self):
        frame = pd.read_csv(self.out / 'compare.csv')
        self.assertEqual(list(frame['method']), list(METHODS))
        random_row = frame[frame['method'] == 'random'].iloc[0]
        self.assertEqual(random_row['mood_p1'], 0.25)
        self.assertEqual(random_row['mood_pp_vs_random'], 0.0)
        oracle = frame[frame['method'] == 'oracle-top1'].iloc[0]
        self.assertEqual(oracle['mood_p1'], 1.0)

    def test_train_manifest(self):
        manifest = load_manifest(self.out / 'manifest_train.json')
        self.assertEqual(manifest['command'], 'train')
        self.assertEqual(manifest['config']['train']['epochs'], 1)
        self.assertEqual(set(manifest['seeds']), {'synth', 'split', 'train', 'eval'})
        self.assertIn(str(self.out / 'splits.json'), manifest['inputs'])
        self.assertIn(str(self.out / 'model.mdl'), manifest['outputs'])
        self.assertEqual(len(manifest['config_hash']), 64)

    def test_checkpoint_records_provenance(self):
        with open(self.out / 'model.json') as f:
            sidecar = json.load(f)
        self.assertEqual(sidecar['best_epoch'], 0)
        manifest = load_manifest(self.out / 'manifest_train.json')
        self.assertEqual(sidecar['provenance']['config_hash'], manifest['config_hash'])

    def test_transform(self):
        catalog = load_catalog(self.out / 'catalog' / 'embeddings.emb', self.out / 'catalog' / 'metadata.jsonl')
        moods_path = Path(self.tmp.name) / 'moods.json'
        moods_path.write_text(json.dumps(catalog.moods.tolist()))
        self.invoke(['transform', '--input', str(self.out / 'catalog' / 'embeddings.emb'),
                     '--target-mood', '1', '--seed-moods', str(moods_path), '--k', '3'])
        with open(self.out / 'transform.jsonl') as f:
            records = [json.loads(line) for line in f]
        self.assertEqual(len(records), 200)
        self.assertEqual(records[5]['seed_mood'], int(catalog.moods[5]))
        self.assertEqual(records[5]['target_mood'], 1)
        self.assertEqual(len(records[5]['vector']), 16)
        self.assertEqual(len(records[5]['neighbors']), 3)
        sims = [n['similarity'] for n in records[5]['neighbors']]
        self.assertEqual(sims, sorted(sims, reverse=True))

    def test_ablate(self):
        self.invoke(['ablate'])
        table = pd.read_csv(self.out / 'ablation.csv')
        self.assertEqual(len(table), 7)
        self.assertEqual(list(pd.read_csv(self.out / 'ablation_pp.csv').columns),
                         ['combo', 'mood_pp_vs_random', 'genre_pp_vs_random'])


class TestReproducibility(unittest.TestCase):

    def tearDown(self):
        release_log_files()

    def test_gen_is_idempotent(self):
        runner = CliRunner()
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp) / 'run'
            config = write_tiny_config(Path(tmp) / 'run.json', out)
            snapshots = []
            for _ in range(2):
                result = runner.invoke(cli, ['gen', '--config', str(config)])
                self.assertEqual(result.exit_code, 0, result.output)
                snapshots.append(((out / 'catalog' / 'embeddings.emb').read_bytes(),
                                  (out / 'manifest_gen.json').read_bytes()))
            release_log_files()
        self.assertEqual(snapshots[0], snapshots[1])

    def test_seed_changes_catalog(self):
        runner = CliRunner()
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp) / 'run'
            config = write_tiny_config(Path(tmp) / 'run.json', out)
            runner.invoke(cli, ['gen', '--config', str(config)])
            first = (out / 'catalog' / 'embeddings.emb').read_bytes()
            runner.invoke(cli, ['gen', '--config', str(config), '--seed', '99'])
            second = (out / 'catalog' / 'embeddings.emb').read_bytes()
            release_log_files()
        self.assertNotEqual(first, second)


class TestExitCodes(unittest.TestCase):
    """0 success, 1 validation error, 2 runtime failure."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = Path(self.tmp.name) / 'run'
        self.config = str(write_tiny_config(Path(self.tmp.name) / 'run.json', self.out))

    def tearDown(self):
        release_log_files()
        self.tmp.cleanup()

    def test_missing_config(self):
        self.assertEqual(main(['gen', '--config', str(Path(self.tmp.name) / 'absent.yaml')]), 1)

    def test_missing_catalog(self):
        self.assertEqual(main(['split', '--config', self.config]), 1)

    def test_usage_error(self):
        self.assertEqual(main(['evaluate', '--method', 'bogus', '--config', self.config]), 1)

    def test_unknown_target_mood(self):
        self.assertEqual(main(['gen', '--config', self.config]), 0)
        self.assertEqual(main(['train', '--config', self.config]), 0)
        code = main(['transform', '--config', self.config, '--input', str(self.out / 'catalog' / 'embeddings.emb'),
                     '--target-mood', '9', '--seed-moods', '0'])
        self.assertEqual(code, 1)

    def test_runtime_failure(self):
        self.assertEqual(main(['gen', '--config', self.config]), 0)
        with patch.object(cli_module, 'train_model', side_effect=TrainingDivergedError(0, 0, float('nan'))):
            self.assertEqual(main(['train', '--config', self.config]), 2)

    def test_unexpected_os_error(self):
        self.assertEqual(main(['gen', '--config', self.config]), 0)
        with patch.object(cli_module, 'train_model', side_effect=PermissionError('output directory is read-only')):
            self.assertEqual(main(['train', '--config', self.config]), 2)

    def test_unexpected_type_error(self):
        self.assertEqual(main(['gen', '--config', self.config]), 0)
        with patch.object(cli_module, 'train_model', side_effect=TypeError('bad operand')):
            self.assertEqual(main(['train', '--config', self.config]), 2)

    def test_version(self):
        self.assertEqual(main(['--version']), 0)


class TestTransformSplit(unittest.TestCase):
    """A split drawn during transform is saved and recorded."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = Path(self.tmp.name) / 'run'
        self.config = str(write_tiny_config(Path(self.tmp.name) / 'run.json', self.out))

    def tearDown(self):
        release_log_files()
        self.tmp.cleanup()

    def test_drawn_split_in_manifest(self):
        self.assertEqual(main(['gen', '--config', self.config]), 0)
        self.assertEqual(main(['train', '--config', self.config]), 0)
        (self.out / 'splits.json').unlink()
        code = main(['transform', '--config', self.config, '--input', str(self.out / 'catalog' / 'embeddings.emb'),
                     '--target-mood', '0', '--seed-moods', '0', '--k', '2', '--split', 'test'])
        self.assertEqual(code, 0)
        manifest = load_manifest(self.out / 'manifest_transform.json')
        self.assertIn(str(self.out / 'splits.json'), manifest['outputs'])
        self.assertIn(str(self.out / 'transform.jsonl'), manifest['outputs'])


if __name__ == '__main__':
    unittest.main()
