import os
import shutil
import tempfile

import numpy as np
from django.test import SimpleTestCase

from lungtrack.classes import CONSOLIDATION, GROUND_GLASS, HEALTHY_LUNG, N_CLASSES
from lungtrack.core import ConsolidationMap, Geometry, LabelVolume, Volume3D, one_hot
from lungtrack.exceptions import GeometryError
from lungtrack.inference import ProbabilityVolume, labelize
from lungtrack.io import load_yaml
from lungtrack.progression import (ProgressionMap, ProgressionReport, analyze_progression, consolidation_map,
                                   progression_map, quantify, render_progression_overlay)


class ProgressionMapTests(SimpleTestCase):

    def test_values(self):
        y0 = LabelVolume(np.array([CONSOLIDATION, CONSOLIDATION, HEALTHY_LUNG, GROUND_GLASS]).reshape(1, 2, 2))
        y1 = LabelVolume(np.array([CONSOLIDATION, HEALTHY_LUNG, CONSOLIDATION, 0]).reshape(1, 2, 2))
        pmap = progression_map(y0, y1)
        self.assertEqual(pmap.values.ravel().tolist(), [0, -1, 1, 0])
        self.assertEqual(pmap.values.dtype, np.int8)

    def test_matches_label_difference(self):
        rng = np.random.RandomState(0)
        for _ in range(10):
            y0 = rng.randint(0, 5, size=(5, 6, 7))
            y1 = rng.randint(0, 5, size=(5, 6, 7))
            pmap = progression_map(LabelVolume(y0), LabelVolume(y1))
            expected = (y1 == CONSOLIDATION).astype(int) - (y0 == CONSOLIDATION).astype(int)
            np.testing.assert_array_equal(pmap.values, expected)

    def test_swapping_negates(self):
        rng = np.random.RandomState(1)
        y0, y1 = LabelVolume(rng.randint(0, 5, size=(4, 4, 4))), LabelVolume(rng.randint(0, 5, size=(4, 4, 4)))
        np.testing.assert_array_equal(progression_map(y1, y0).values, (-progression_map(y0, y1)).values)

    def test_consolidation_map(self):
        labels = LabelVolume(np.array([0, 1, 2, 3, 4, 3]).reshape(1, 2, 3))
        self.assertEqual(consolidation_map(labels).count(), 2)
        with self.assertRaises(TypeError):
            consolidation_map(np.zeros((2, 2, 2)))

    def test_binary_inputs(self):
        mask0 = np.zeros((2, 2, 2), dtype=np.uint8)
        mask1 = mask0.copy()
        mask0[0, 0, 0] = mask1[1, 1, 1] = 1
        pmap = progression_map(ConsolidationMap(mask0), ConsolidationMap(mask1))
        self.assertEqual((pmap.values[1, 1, 1], pmap.values[0, 0, 0], int(np.abs(pmap.values).sum())), (1, -1, 2))
        # A binary LabelVolume is a lung mask: no consolidation in either scan.
        pmap = progression_map(LabelVolume(mask0), LabelVolume(mask1))
        self.assertFalse(pmap.values.any())

    def test_labelize_round_trip(self):
        rng = np.random.RandomState(2)
        labels = rng.randint(0, N_CLASSES, size=(5, 6, 7))
        probabilities = ProbabilityVolume(one_hot(labels), Geometry(labels.shape))
        cmap = consolidation_map(labelize(probabilities))
        np.testing.assert_array_equal(cmap.mask, (labels == CONSOLIDATION).astype(np.uint8))

    def test_grid_mismatch(self):
        with self.assertRaises(GeometryError):
            progression_map(LabelVolume(np.zeros((2, 2, 2))), LabelVolume(np.zeros((2, 2, 2)), spacing=(1, 1, 2)))

    def test_range(self):
        with self.assertRaises(ValueError):
            ProgressionMap(np.array([2]).reshape(1, 1, 1))


class QuantifyTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp(prefix='lungtrack-test-')

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_volumes(self):
        values = np.zeros((10, 10, 10), dtype=np.int8)
        values[:5, :4] = 1
        values[9, 9, :3] = -1
        report = quantify(ProgressionMap(values, spacing=(0.5, 0.5, 2.0)))
        self.assertEqual((report.progressed_voxels, report.recovered_voxels), (200, 3))
        self.assertAlmostEqual(report.progressed_volume, 0.1)
        self.assertAlmostEqual(report.recovered_volume, 0.0015)
        self.assertAlmostEqual(report.net_change, 0.0985)

    def test_additive_over_partitions(self):
        rng = np.random.RandomState(3)
        values = rng.randint(-1, 2, size=(10, 6, 8))
        spacing = (0.5, 0.75, 2.0)
        whole = quantify(ProgressionMap(values, spacing=spacing))
        parts = [quantify(ProgressionMap(values[:4], spacing=spacing)),
                 quantify(ProgressionMap(values[4:], spacing=spacing))]
        self.assertEqual(whole.progressed_voxels, sum(part.progressed_voxels for part in parts))
        self.assertEqual(whole.recovered_voxels, sum(part.recovered_voxels for part in parts))
        self.assertAlmostEqual(whole.progressed_volume, sum(part.progressed_volume for part in parts))
        self.assertAlmostEqual(whole.recovered_volume, sum(part.recovered_volume for part in parts))
        self.assertAlmostEqual(whole.net_change, sum(part.net_change for part in parts))

    def test_hand_counted(self):
        values = np.zeros((5, 5, 5), dtype=np.int8)
        values[0, 0, :5] = 1
        values[1, 1, :5] = 1
        report = quantify(ProgressionMap(values))
        self.assertEqual(report.progressed_voxels, 10)
        self.assertEqual(report.progressed_volume, 0.01)
        self.assertEqual(report.recovered_volume, 0.0)

    def test_spacing_override(self):
        report = quantify(ProgressionMap(np.ones((10, 10, 10))), spacing=(1.0, 1.0, 3.0))
        self.assertAlmostEqual(report.progressed_volume, 3.0)

    def test_analyze_and_save(self):
        y0 = np.full((4, 4, 4), HEALTHY_LUNG)
        y1 = y0.copy()
        y0[0, 0, :2] = CONSOLIDATION
        y1[1, :, :] = CONSOLIDATION
        pmap, report = analyze_progression(LabelVolume(y0), LabelVolume(y1), 'p_t0_t1')
        self.assertEqual(report.progressed_voxels, 16)
        self.assertEqual(report.recovered_voxels, 2)
        self.assertEqual(report.consolidation_voxels, (2, 16))
        self.assertEqual(report.consolidation_volumes, (0.002, 0.016))
        self.assertIn('Net change', report.table())

        path = report.save(os.path.join(self.tmp, 'report.yaml'))
        data = load_yaml(path)
        self.assertEqual(data['progressed_voxels'], 16)
        self.assertAlmostEqual(data['net_change_ml'], 0.014)
        self.assertEqual(ProgressionReport(16, 2, 1.0, (2, 16), 'p_t0_t1'), report)

    def test_overlay(self):
        y0 = np.full((8, 8, 8), HEALTHY_LUNG)
        y1 = y0.copy()
        y1[2:5, 2:5, 6] = CONSOLIDATION
        pmap, _ = analyze_progression(LabelVolume(y0), LabelVolume(y1))
        ct = Volume3D(np.random.RandomState(0).rand(8, 8, 8).astype(np.float32))
        path = render_progression_overlay(pmap, ct, os.path.join(self.tmp, 'overlay.png'))
        with open(path, 'rb') as fp:
            self.assertEqual(fp.read(8), b'\x89PNG\r\n\x1a\n')
        with self.assertRaises(GeometryError):
            render_progression_overlay(pmap, Volume3D(np.zeros((8, 8, 7))), os.path.join(self.tmp, 'bad.png'))
