import numpy as np
from django.test import SimpleTestCase

from lungtrack.classes import CONSOLIDATION, N_CLASSES
from lungtrack.core import (CLASS_MAP, ConsolidationMap, Geometry, LabelVolume, Study, Timepoint, Volume3D,
                            check_geometry, consecutive_pairs, one_hot)
from lungtrack.exceptions import GeometryError, StudyError


def timepoint(index, day, shape=(4, 4, 4)):
    return Timepoint(index, day, Volume3D(np.zeros(shape, dtype=np.int16)), LabelVolume(np.ones(shape)))


class GeometryTests(SimpleTestCase):

    def test_voxel_volume_and_extent(self):
        geometry = Geometry((10, 20, 30), (0.5, 1.0, 2.0))
        self.assertEqual(geometry.voxel_volume, 1.0)
        self.assertEqual(geometry.extent, (5.0, 20.0, 60.0))

    def test_invalid(self):
        with self.assertRaises(GeometryError):
            Geometry((0, 4, 4))
        with self.assertRaises(GeometryError):
            Geometry((4, 4, 4), (1.0, 0.0, 1.0))
        with self.assertRaises(GeometryError):
            Geometry((4, 4))

    def test_immutable(self):
        geometry = Geometry((4, 4, 4))
        with self.assertRaises(AttributeError):
            geometry.shape = (5, 5, 5)

    def test_equality_tolerance(self):
        a = Geometry((4, 4, 4), (1.0, 1.0, 1.0))
        self.assertEqual(a, Geometry((4, 4, 4), (1.0 + 1e-9, 1.0, 1.0)))
        self.assertNotEqual(a, Geometry((4, 4, 4), (1.001, 1.0, 1.0)))
        self.assertNotEqual(a, Geometry((4, 4, 5)))

    def test_dict(self):
        geometry = Geometry((3, 4, 5), (0.7, 0.7, 1.5), (-10.0, 2.5, 0.0))
        self.assertEqual(Geometry.from_dict(geometry.as_dict()), geometry)


class GridDataTests(SimpleTestCase):

    def test_read_only(self):
        volume = Volume3D(np.zeros((3, 3, 3)))
        with self.assertRaises(ValueError):
            volume.data[0, 0, 0] = 1

    def test_shape_mismatch(self):
        with self.assertRaises(GeometryError):
            Volume3D(np.zeros((3, 3, 3)), geometry=Geometry((3, 3, 4)))
        with self.assertRaises(GeometryError):
            Volume3D(np.zeros((3, 3)))

    def test_with_data_keeps_meta(self):
        volume = Volume3D(np.zeros((2, 2, 2)), spacing=(2, 2, 2), meta={'device': 'phantom'})
        clone = volume.with_data(np.ones((2, 2, 2)))
        self.assertIsInstance(clone, Volume3D)
        self.assertEqual(clone.meta, {'device': 'phantom'})
        self.assertEqual(clone.spacing, (2.0, 2.0, 2.0))
        self.assertEqual(volume.data.sum(), 0)

    def test_label_range(self):
        with self.assertRaises(ValueError):
            LabelVolume(np.full((2, 2, 2), N_CLASSES))
        labels = LabelVolume(np.array([0, 1, 4, 2]).reshape(1, 2, 2))
        self.assertEqual(labels.labels.dtype, np.uint8)
        self.assertFalse(labels.is_binary)
        self.assertTrue(LabelVolume(np.ones((2, 2, 2))).is_binary)

    def test_check_geometry(self):
        a = LabelVolume(np.zeros((2, 3, 4)))
        self.assertTrue(check_geometry(a, Volume3D(np.zeros((2, 3, 4)))))
        self.assertFalse(check_geometry(a, Volume3D(np.zeros((2, 3, 4)), spacing=(1, 1, 2))))
        self.assertTrue(check_geometry(a, Geometry((2, 3, 4))))


class ClassMapTests(SimpleTestCase):

    def test_taxonomy(self):
        self.assertEqual(len(CLASS_MAP), 5)
        self.assertEqual(CLASS_MAP.indices, (0, 1, 2, 3, 4))
        self.assertEqual(CLASS_MAP.code(CONSOLIDATION), 'CONS')
        self.assertEqual(CLASS_MAP.name(4), 'Pleural effusion')

    def test_project(self):
        labels = LabelVolume(np.array([0, 1, 2, 3, 4, 3, 3, 1]).reshape(2, 2, 2), spacing=(1, 2, 3))
        consolidation = CLASS_MAP.project(labels)
        self.assertIsInstance(consolidation, ConsolidationMap)
        self.assertEqual(consolidation.count(), 3)
        self.assertEqual(consolidation.spacing, (1.0, 2.0, 3.0))
        self.assertIs(CLASS_MAP.project(consolidation), consolidation)
        np.testing.assert_array_equal(CLASS_MAP.project(np.array([3, 2])), [1, 0])

    def test_consolidation_map_is_binary(self):
        with self.assertRaises(ValueError):
            ConsolidationMap(np.full((2, 2, 2), 2))

    def test_one_hot(self):
        labels = np.array([[0, 3], [4, 1]])
        encoded = one_hot(labels)
        self.assertEqual(encoded.shape, (N_CLASSES, 2, 2))
        np.testing.assert_array_equal(encoded.sum(axis=0), np.ones((2, 2)))
        self.assertEqual(encoded[3, 0, 1], 1.0)
        self.assertEqual(encoded[4, 1, 0], 1.0)


class StudyTests(SimpleTestCase):

    def test_ordering(self):
        study = Study('p1', [timepoint(0, 0), timepoint(1, 7), timepoint(2, 15)])
        self.assertTrue(study.is_longitudinal)
        pairs = consecutive_pairs(study)
        self.assertEqual([(a.acquisition_day, b.acquisition_day) for a, b in pairs], [(0, 7), (7, 15)])

    def test_first_day_zero(self):
        with self.assertRaises(StudyError):
            Study('p1', [timepoint(0, 3), timepoint(1, 7)])

    def test_strictly_increasing(self):
        with self.assertRaises(StudyError):
            Study('p1', [timepoint(0, 0), timepoint(1, 0)])
        with self.assertRaises(StudyError):
            Study('p1', [timepoint(0, 0), timepoint(1, 9), timepoint(2, 4)])

    def test_single_scan(self):
        study = Study('p1', [timepoint(0, 0)])
        self.assertFalse(study.is_longitudinal)
        with self.assertRaises(StudyError):
            consecutive_pairs(study)

    def test_timepoint_geometry(self):
        with self.assertRaises(GeometryError):
            Timepoint(0, 0, Volume3D(np.zeros((4, 4, 4))), LabelVolume(np.ones((4, 4, 5))))
