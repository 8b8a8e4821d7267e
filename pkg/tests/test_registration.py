import os
import shutil
import tempfile
import unittest
from unittest import mock

import numpy as np
from django.core.exceptions import ImproperlyConfigured
from django.test import SimpleTestCase

from lungtrack.core import LabelVolume, Volume3D
from lungtrack.exceptions import AnnotationError, GeometryError
from lungtrack.phantom import PhantomConfig, generate_study
from lungtrack.preprocess import INTENSITY, LABEL, ProcessedTimepoint
from lungtrack.registration import (BSplineTransform, RegisteredPair, RegistrationConfig, dice_overlap,
                                    register_masks, register_pair, warp)

SLOW = os.environ.get('LUNGTRACK_SLOW_TESTS') == '1'


def sphere(shape, center, radius):
    grid = np.indices(shape)
    return (((grid - np.reshape(center, (3, 1, 1, 1))) ** 2).sum(axis=0) <= radius ** 2).astype(np.uint8)


def processed(index, lung, pathology=None):
    ct = Volume3D(np.where(lung, 0.2, 0.0).astype(np.float32))
    return ProcessedTimepoint(index, 5 * index, ct, LabelVolume(lung),
                              LabelVolume(pathology) if pathology is not None else None)


class RegistrationConfigTests(SimpleTestCase):

    def test_shrink_factors(self):
        self.assertEqual(RegistrationConfig().shrink_factors, [4, 2, 1])
        self.assertEqual(RegistrationConfig(pyramid_levels=1).shrink_factors, [1])

    def test_invalid(self):
        for changes in ({'control_grid_points': 3}, {'metric': 'mutual_information'}, {'pyramid_levels': 0},
                        {'convergence_tol': 0}, {'threads': 0}):
            with self.assertRaises(ImproperlyConfigured):
                RegistrationConfig(**changes).validate()


class TransformTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp(prefix='lungtrack-test-')
        self.domain = Volume3D(np.zeros((16, 16, 16))).geometry

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_identity(self):
        transform = BSplineTransform.identity(self.domain)
        self.assertTrue(transform.is_identity)
        self.assertEqual(transform.coefficients.shape, (8, 8, 8, 3))
        field = transform.displacement_field()
        self.assertEqual(field.shape, (16, 16, 16, 3))
        np.testing.assert_array_equal(field, 0)

    def test_identity_warp(self):
        labels = LabelVolume(sphere((16, 16, 16), (8, 8, 8), 5) * 3)
        transform = BSplineTransform.identity(self.domain)
        np.testing.assert_array_equal(warp(labels, transform, LABEL).labels, labels.labels)
        volume = Volume3D(np.random.RandomState(0).rand(16, 16, 16).astype(np.float32))
        np.testing.assert_allclose(warp(volume, transform, INTENSITY).data, volume.data, atol=1e-6)

    def test_warp_checks_domain(self):
        transform = BSplineTransform.identity(self.domain)
        with self.assertRaises(GeometryError):
            warp(LabelVolume(np.zeros((16, 16, 15))), transform, LABEL)
        with self.assertRaises(ValueError):
            warp(LabelVolume(np.zeros((16, 16, 16))), transform, 'cubic')

    def test_save_and_load(self):
        transform = BSplineTransform.identity(self.domain)
        transform.coefficients[2, 3, 4] = (0.5, -1.25, 2.0)
        transform.diagnostics = {'iterations': 7, 'fallback': False}
        path = transform.save(os.path.join(self.tmp, 'transform.npz'))
        loaded = BSplineTransform.load(path)
        self.assertEqual(loaded, transform)
        self.assertEqual(loaded.diagnostics, {'iterations': 7, 'fallback': False})
        self.assertEqual(loaded.coefficients.dtype, np.float64)

    def test_uniform_displacement_moves_a_spike(self):
        transform = BSplineTransform.identity(self.domain)
        transform.coefficients[..., 0] = 2.0
        spike = np.zeros((16, 16, 16), dtype=np.float32)
        spike[8, 8, 8] = 1.0
        warped = warp(Volume3D(spike), transform, INTENSITY).data
        self.assertEqual(np.unravel_index(warped.argmax(), warped.shape), (6, 8, 8))
        np.testing.assert_allclose(warped[6, 8, 8], 1.0, atol=1e-6)
        np.testing.assert_allclose(warped.sum(), 1.0, atol=1e-6)
        labels = np.zeros((16, 16, 16), dtype=np.uint8)
        labels[8, 8, 8] = 3
        moved = warp(LabelVolume(labels), transform, LABEL).labels
        self.assertEqual(list(zip(*np.nonzero(moved))), [(6, 8, 8)])
        self.assertEqual(moved[6, 8, 8], 3)

    def test_displacement_in_voxels(self):
        domain = Volume3D(np.zeros((16, 16, 16)), spacing=(2, 2, 2)).geometry
        transform = BSplineTransform.identity(domain)
        transform.coefficients[..., 0] = 4.0
        field = transform.displacement_field()
        np.testing.assert_allclose(field[4:12, 4:12, 4:12, 0], 2.0, atol=1e-9)
        np.testing.assert_allclose(field[..., 1:], 0.0, atol=1e-12)


class DiceOverlapTests(SimpleTestCase):

    def test_dice_overlap(self):
        self.assertEqual(dice_overlap(np.zeros(4), np.zeros(4)), 1.0)
        self.assertEqual(dice_overlap([1, 1, 0, 0], [0, 1, 1, 0]), 0.5)
        self.assertEqual(dice_overlap([1, 0], [0, 1]), 0.0)


class RegisterMasksTests(SimpleTestCase):

    shape = (32, 32, 32)

    def test_identity_pair(self):
        mask = LabelVolume(sphere(self.shape, (16, 16, 16), 9))
        transform = register_masks(mask, mask)
        self.assertGreaterEqual(transform.diagnostics['dice_after'], 0.99)
        self.assertGreaterEqual(dice_overlap(warp(mask, transform, LABEL).labels, mask.labels), 0.99)

    def test_shift_is_recovered(self):
        m0 = LabelVolume(sphere(self.shape, (16, 16, 16), 8))
        m1 = LabelVolume(sphere(self.shape, (21, 16, 16), 8))
        transform = register_masks(m0, m1)
        diagnostics = transform.diagnostics
        self.assertLess(diagnostics['dice_before'], 0.95)
        self.assertGreaterEqual(diagnostics['dice_after'], 0.95)
        self.assertGreaterEqual(dice_overlap(warp(m0, transform, LABEL).labels, m1.labels), 0.95)
        self.assertFalse(diagnostics['fallback'])
        self.assertIn('final_metric', diagnostics)

    def test_worse_overlap_falls_back_to_identity(self):
        mask = LabelVolume(sphere(self.shape, (16, 16, 16), 8))
        with mock.patch('lungtrack.registration.dice_overlap', side_effect=[0.9, 0.5]):
            with self.assertLogs('lungtrack.registration', 'WARNING'):
                transform = register_masks(mask, mask)
        self.assertTrue(transform.diagnostics['fallback'])
        self.assertEqual(transform.diagnostics['dice_after'], 0.9)
        self.assertTrue(transform.is_identity)
        np.testing.assert_array_equal(transform.coefficients, 0.0)

    def test_invalid_masks(self):
        mask = LabelVolume(sphere(self.shape, (16, 16, 16), 8))
        with self.assertRaises(AnnotationError):
            register_masks(LabelVolume(np.zeros(self.shape)), mask)
        with self.assertRaises(GeometryError):
            register_masks(mask, LabelVolume(np.ones((32, 32, 31))))

    def test_pathology_does_not_change_transform(self):
        lung0 = sphere(self.shape, (16, 16, 16), 9)
        lung1 = sphere(self.shape, (17, 16, 15), 9)
        small = lung0 + 2 * sphere(self.shape, (16, 16, 16), 2)
        large = lung0 + 2 * sphere(self.shape, (14, 16, 16), 5)
        pair_a = register_pair(processed(0, lung0, small), processed(1, lung1, lung1), patient_id='p')
        pair_b = register_pair(processed(0, lung0, np.minimum(large, 3)), processed(1, lung1, lung1), patient_id='p')
        np.testing.assert_array_equal(pair_a.transform.coefficients, pair_b.transform.coefficients)
        np.testing.assert_array_equal(pair_a.m0_reg.labels, pair_b.m0_reg.labels)


class RegisteredPairTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp(prefix='lungtrack-test-')

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_pair(self):
        lung = sphere((32, 32, 32), (16, 16, 16), 9)
        pair = register_pair(processed(0, lung, lung), processed(1, lung, lung * 3), patient_id='p7')
        self.assertEqual(pair.pair_id, 'p7_t0_t1')
        self.assertTrue(pair.has_ground_truth)
        self.assertEqual(pair.geometry.shape, (32, 32, 32))
        self.assertIs(pair.volume(1), pair.x1)
        self.assertIs(pair.labels(0), pair.y0_reg)
        self.assertEqual(pair.slice_stack(1, 'axial').kept_indices, tuple(range(7, 26)))

        pair.save(os.path.join(self.tmp, pair.pair_id))
        loaded = RegisteredPair.load(os.path.join(self.tmp, pair.pair_id))
        self.assertEqual(loaded.pair_id, 'p7_t0_t1')
        self.assertEqual(loaded.acquisition_days, (0, 5))
        self.assertEqual(loaded.transform, pair.transform)
        np.testing.assert_array_equal(loaded.y1.labels, pair.y1.labels)
        np.testing.assert_array_equal(loaded.y0_reg.labels, pair.y0_reg.labels)

    def test_without_labels(self):
        lung = sphere((32, 32, 32), (16, 16, 16), 9)
        pair = register_pair(processed(0, lung), processed(1, lung))
        self.assertFalse(pair.has_ground_truth)
        self.assertIsNone(pair.y0_reg)


@unittest.skipUnless(SLOW, 'set LUNGTRACK_SLOW_TESTS=1 to run registration recovery on phantoms')
class PhantomRecoveryTests(SimpleTestCase):

    def test_recovers_known_deformation(self):
        cfg = PhantomConfig(grid_size=64, deformation_amplitude=4.0 - 1e-6, seed=11)
        for index in range(3):
            study, fields = generate_study(cfg, index)
            reference, followup = study.timepoints
            transform = register_masks(reference.lung_mask, followup.lung_mask)
            warped = warp(reference.lung_mask, transform, LABEL)
            self.assertGreaterEqual(dice_overlap(warped.labels, followup.lung_mask.labels), 0.95)
            inside = followup.lung_mask.labels.astype(bool)
            error = np.linalg.norm(transform.displacement_field() - fields[0], axis=-1)[inside]
            self.assertLessEqual(float(error.mean()), 2.0)
