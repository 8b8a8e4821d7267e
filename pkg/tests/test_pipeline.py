import os
import shutil
import tempfile
import unittest

from django.core.exceptions import ImproperlyConfigured
from django.test import SimpleTestCase

from lungtrack.checksums import derive_seed
from lungtrack.exceptions import StageError
from lungtrack.io import load_yaml
from lungtrack.pipeline import (DESK, FAILED, PAPER_SCALE, STAGES, Pipeline, PipelineConfig, load_config,
                                resolve_config, run_pipeline)

from .utils import TINY

SLOW = os.environ.get('LUNGTRACK_SLOW_TESTS') == '1'

#: A run small enough for the regular test suite.
SMALL = {
    'preprocess': {'target_size': 32},
    'phantom': {'grid_size': 32, 'n_studies': 4, 'split_ratio': (2, 1, 1)},
    'model': dict(TINY),
    'train': {'max_epochs': 2, 'early_stop_patience': 1, 'views': ('axial',)},
}


class ResolveConfigTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp(prefix='lungtrack-test-')

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_presets(self):
        desk = resolve_config()
        self.assertEqual(desk.preset, DESK)
        self.assertEqual(desk.preprocess.target_size, 64)
        self.assertEqual(desk.phantom.split_sizes(), (8, 2, 4))
        large = resolve_config(preset=PAPER_SCALE)
        self.assertEqual(large.preprocess.target_size, 300)
        self.assertEqual(large.phantom.split_sizes(), (12, 4, 22))
        train = large.train
        self.assertEqual((train.batch_size, train.max_epochs, train.early_stop_patience), (8, 100, 5))

    def test_overrides(self):
        cfg = resolve_config({'preprocess': {'clip_hi': 400}, 'seed': 3}, seed=5, out_dir='elsewhere')
        self.assertEqual(cfg.preprocess.clip_hi, 400)
        self.assertEqual(cfg.preprocess.target_size, 64)
        self.assertEqual(cfg.seed, 5)
        self.assertEqual(cfg.out_dir, 'elsewhere')

    def test_seeds_are_derived(self):
        cfg = resolve_config(seed=7)
        self.assertEqual(cfg.model.seed, derive_seed(7, 'model'))
        self.assertEqual(cfg.train.seed, derive_seed(7, 'train'))
        self.assertEqual(cfg.phantom.seed, derive_seed(7, 'phantom'))

    def test_invalid(self):
        for data in ({'preset': 'huge'}, {'preprocess': {'clip_low': 1}}, {'epochs': 3},
                     {'train': {'max_epochs': 3, 'early_stop_patience': 5}}, {'variants': ['temporal']}):
            with self.assertRaises(ImproperlyConfigured):
                resolve_config(data)

    def test_load_config(self):
        path = os.path.join(self.tmp, 'config.yaml')
        with open(path, 'w', encoding='utf-8') as fp:
            fp.write('preset: paper-scale\ntrain:\n  batch_size: 4\n')
        cfg = load_config(path)
        self.assertEqual(cfg.preset, PAPER_SCALE)
        self.assertEqual(cfg.train.batch_size, 4)
        with open(path, 'w', encoding='utf-8') as fp:
            fp.write('- 1\n- 2\n')
        with self.assertRaises(ImproperlyConfigured):
            load_config(path)

    def test_stage_settings(self):
        cfg = resolve_config()
        for stage in STAGES:
            self.assertIsInstance(cfg.stage_settings(stage), dict)
        self.assertEqual(cfg.stage_settings('progress'), {'render_overlays': True})

    def test_from_dict(self):
        cfg = PipelineConfig.from_dict({'model': {'growth_rate': 6}})
        self.assertEqual(cfg.model.growth_rate, 6)
        self.assertEqual(cfg.train.max_epochs, 100)


class PipelineTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp(prefix='lungtrack-test-')

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def config(self, **changes):
        data = dict(SMALL, out_dir=self.tmp, seed=1)
        data.update(changes)
        return resolve_config(data)

    def test_run_and_cache(self):
        first = run_pipeline(self.config())
        self.assertEqual(first.ran, list(STAGES))
        self.assertEqual(first.skipped, [])
        self.assertEqual(sorted(first.results), ['longitudinal', 'static'])
        for stage in STAGES:
            record = load_yaml(os.path.join(self.tmp, 'stages', stage + '.yaml'))
            self.assertEqual(record['stage'], stage)
        self.assertTrue(os.path.exists(os.path.join(self.tmp, 'train', 'static.pt')))
        self.assertTrue(os.path.exists(os.path.join(self.tmp, 'evaluate', 'comparison.yaml')))
        artifacts = load_yaml(os.path.join(self.tmp, 'artifacts.yaml'))
        self.assertEqual(artifacts['seed'], 1)

        second = run_pipeline(self.config())
        self.assertEqual(second.ran, [])
        self.assertEqual(second.skipped, list(STAGES))
        self.assertEqual(sorted(second.results), ['longitudinal', 'static'])

        third = run_pipeline(self.config(slice_dice_plots=True))
        self.assertEqual(third.ran, ['evaluate'])

        # Touching a stage output reruns that stage and everything after it.
        with open(os.path.join(self.tmp, 'infer', 'static', 'extra.txt'), 'w', encoding='utf-8') as fp:
            fp.write('x')
        fourth = run_pipeline(self.config(slice_dice_plots=True))
        self.assertEqual(fourth.ran, ['infer', 'progress', 'evaluate'])

    def test_failure_marker(self):
        pipeline = Pipeline(self.config())

        def broken(directory):
            with open(os.path.join(directory, 'partial.txt'), 'w', encoding='utf-8') as fp:
                fp.write('half')
            raise ValueError('boom')

        with self.assertRaises(StageError) as context:
            pipeline.run_stage('phantom', broken)
        self.assertEqual(context.exception.stage, 'phantom')
        self.assertTrue(os.path.exists(os.path.join(self.tmp, 'phantom', FAILED)))
        self.assertTrue(os.path.exists(os.path.join(self.tmp, 'phantom', 'partial.txt')))
        self.assertTrue(pipeline.run_stage('phantom', lambda directory: None))
        self.assertFalse(os.path.exists(os.path.join(self.tmp, 'phantom', FAILED)))

    def test_configuration_errors_pass_through(self):
        pipeline = Pipeline(self.config())

        def misconfigured(directory):
            raise ImproperlyConfigured('bad')

        with self.assertRaises(ImproperlyConfigured):
            pipeline.run_stage('phantom', misconfigured)


@unittest.skipUnless(SLOW, 'set LUNGTRACK_SLOW_TESTS=1 to run the desk-scale experiment')
class DeskExperimentTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp(prefix='lungtrack-test-')

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_reproducible_artifacts(self):
        first = run_pipeline(resolve_config(preset=DESK, seed=0, out_dir=os.path.join(self.tmp, 'a')))
        second = run_pipeline(resolve_config(preset=DESK, seed=0, out_dir=os.path.join(self.tmp, 'b')))
        artifacts_a = load_yaml(os.path.join(first.out_dir, 'artifacts.yaml'))
        artifacts_b = load_yaml(os.path.join(second.out_dir, 'artifacts.yaml'))
        self.assertEqual(artifacts_a, artifacts_b)

    def test_longitudinal_is_not_worse(self):
        result = run_pipeline(resolve_config(preset=DESK, seed=0, out_dir=self.tmp))
        static = result.results['static']['aggregates']['dice_CONS']['mean']
        longitudinal = result.results['longitudinal']['aggregates']['dice_CONS']['mean']
        self.assertGreaterEqual(longitudinal, 0.80)
        self.assertGreaterEqual(longitudinal, static)
