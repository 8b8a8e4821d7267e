import os
import shutil
import tempfile

import numpy as np
import SimpleITK as sitk
from django.core.exceptions import ImproperlyConfigured
from django.test import SimpleTestCase

from lungtrack.classes import CONSOLIDATION, HEALTHY_LUNG
from lungtrack.core import Geometry, LabelVolume, Volume3D
from lungtrack.io import (Manifest, from_sitk, load_labels, load_manifest, load_volume, save_labels, save_manifest,
                          save_npz, save_volume, save_yaml, to_sitk)

GEOMETRY = Geometry((4, 5, 6), spacing=(0.5, 0.75, 2.0), origin=(-10.0, 4.5, 0.0))


class NiftiTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp(prefix='lungtrack-test-')

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_raw_ct(self):
        data = np.arange(120, dtype=np.int16).reshape(4, 5, 6) - 60
        path = save_volume(Volume3D(data, geometry=GEOMETRY), os.path.join(self.tmp, 'ct.nii'))
        loaded = load_volume(path, meta={'device': 'phantom'})
        np.testing.assert_array_equal(loaded.data, data)
        self.assertTrue(np.issubdtype(loaded.data.dtype, np.integer))
        self.assertEqual(loaded.geometry, GEOMETRY)
        self.assertEqual(loaded.meta, {'device': 'phantom'})

    def test_normalized_ct(self):
        data = np.linspace(0, 1, 120).reshape(4, 5, 6)
        loaded = load_volume(save_volume(Volume3D(data, geometry=GEOMETRY), os.path.join(self.tmp, 'ct.nii')))
        self.assertEqual(loaded.data.dtype, np.float32)
        np.testing.assert_allclose(loaded.data, data, rtol=0, atol=1e-7)

    def test_labels(self):
        labels = np.zeros((4, 5, 6), dtype=np.uint8)
        labels[1:3, 1:4, 2:5] = HEALTHY_LUNG
        labels[2, 2, 3] = CONSOLIDATION
        loaded = load_labels(save_labels(LabelVolume(labels, geometry=GEOMETRY), os.path.join(self.tmp, 'y.nii')))
        np.testing.assert_array_equal(loaded.labels, labels)
        self.assertEqual(loaded.geometry, GEOMETRY)


class SimpleITKTests(SimpleTestCase):

    def test_axis_order(self):
        data = np.arange(120, dtype=np.float32).reshape(4, 5, 6)
        image = to_sitk(Volume3D(data, geometry=GEOMETRY))
        self.assertEqual(image.GetSize(), (4, 5, 6))
        self.assertEqual(image.GetSpacing(), GEOMETRY.spacing)
        self.assertEqual(image.GetOrigin(), GEOMETRY.origin)
        self.assertEqual(image.GetPixel(1, 2, 3), data[1, 2, 3])
        np.testing.assert_array_equal(from_sitk(image), data)

    def test_cast(self):
        image = to_sitk(LabelVolume(np.ones((2, 2, 2))), sitk.sitkFloat32)
        self.assertEqual(image.GetPixelID(), sitk.sitkFloat32)


class ManifestTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp(prefix='lungtrack-test-')

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def write_timepoint(self, name):
        ct = Volume3D(np.zeros((4, 5, 6), dtype=np.int16), geometry=GEOMETRY)
        mask = LabelVolume(np.ones((4, 5, 6)), geometry=GEOMETRY)
        save_volume(ct, os.path.join(self.tmp, name + '_ct.nii'))
        save_labels(mask, os.path.join(self.tmp, name + '_lung.nii'))
        return {'ct': name + '_ct.nii', 'lung_mask': name + '_lung.nii'}

    def test_save_and_load(self):
        timepoints = [dict(self.write_timepoint('p_t0'), acquisition_day=0),
                      dict(self.write_timepoint('p_t1'), acquisition_day=9)]
        manifest = Manifest([{'patient_id': 'p', 'split': 'train', 'timepoints': timepoints}],
                            meta={'source': 'test'})
        path = save_manifest(manifest, os.path.join(self.tmp, 'manifest.yaml'))
        loaded = load_manifest(path)
        self.assertEqual(loaded, manifest)
        self.assertEqual(loaded.patient_ids('train'), ['p'])
        self.assertEqual(loaded.patient_ids('test'), [])
        study = loaded.load_study('p')
        self.assertEqual([tp.acquisition_day for tp in study.timepoints], [0, 9])
        self.assertIsNone(study.timepoints[0].pathology)
        self.assertEqual(study.timepoints[1].ct.geometry, GEOMETRY)
        self.assertEqual(loaded.load_displacements('p'), [])
        with self.assertRaises(KeyError):
            loaded.entry('q')

    def test_invalid_entries(self):
        for studies in ([{'split': 'train'}], [{'patient_id': 'a'}, {'patient_id': 'a'}],
                        [{'patient_id': 'a', 'split': 'holdout'}]):
            with self.assertRaises(ImproperlyConfigured):
                Manifest(studies)

    def test_format_version(self):
        path = save_yaml({'format_version': 2, 'studies': []}, os.path.join(self.tmp, 'manifest.yaml'))
        with self.assertRaises(ImproperlyConfigured):
            load_manifest(path)


class NpzTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp(prefix='lungtrack-test-')

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_reproducible_archive(self):
        field = np.random.RandomState(0).rand(3, 4, 4, 4)
        first = save_npz(os.path.join(self.tmp, 'a.npz'), field=field, shape=np.array([4, 4, 4]))
        second = save_npz(os.path.join(self.tmp, 'b.npz'), shape=np.array([4, 4, 4]), field=field)
        with open(first, 'rb') as a, open(second, 'rb') as b:
            self.assertEqual(a.read(), b.read())
        with np.load(first) as archive:
            np.testing.assert_array_equal(archive['field'], field)
