"""
Reading and writing volumes, label maps and study manifests.

Volumes are stored as uncompressed NIfTI-1 files whose affine is the diagonal spacing matrix translated to the
origin. Label maps use unsigned 8-bit voxels, raw CT signed 16-bit HU and normalized CT 32-bit floats.
Manifests are YAML files listing studies and their per-timepoint files relative to the manifest.
"""
import logging
import os
import zipfile

import nibabel as nib
import numpy as np
import SimpleITK as sitk
import yaml
from django.core.exceptions import ImproperlyConfigured

from .core import Geometry, LabelVolume, Study, Timepoint, Volume3D

logger = logging.getLogger(__name__)

MANIFEST_FORMAT_VERSION = 1
SPLITS = ('train', 'val', 'test')


def _affine(geometry):
    affine = np.diag(list(geometry.spacing) + [1.0])
    affine[:3, 3] = geometry.origin
    return affine


def _geometry_from_image(image):
    affine = image.affine
    spacing = np.sqrt((affine[:3, :3] ** 2).sum(axis=0))
    return Geometry(image.shape[:3], spacing, affine[:3, 3])


def save_array(data, geometry, path, dtype):
    image = nib.Nifti1Image(np.asarray(data, dtype=dtype), _affine(geometry))
    image.header.set_data_dtype(dtype)
    image.header.set_xyzt_units('mm')
    nib.save(image, str(path))
    return path


def save_volume(volume, path):
    dtype = np.int16 if np.issubdtype(volume.data.dtype, np.integer) else np.float32
    return save_array(volume.data, volume.geometry, path, dtype)


def save_labels(labels, path, dtype=np.uint8):
    return save_array(labels.array, labels.geometry, path, dtype)


def load_volume(path, meta=None):
    image = nib.load(str(path))
    data = np.asanyarray(image.dataobj)
    if not np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float32)
    return Volume3D(data, meta=meta, geometry=_geometry_from_image(image))


def load_labels(path, taxonomy=None):
    image = nib.load(str(path))
    return LabelVolume(np.asanyarray(image.dataobj), geometry=_geometry_from_image(image), taxonomy=taxonomy)


def load_array(path):
    """Load any NIfTI file as ``(array, geometry)``, keeping trailing dimensions (vector fields)."""
    image = nib.load(str(path))
    return np.asanyarray(image.dataobj), _geometry_from_image(image)


def to_sitk(item, pixel_type=None):
    """Convert a volume or label map to a SimpleITK image; SimpleITK indexes ``[z, y, x]``."""
    image = sitk.GetImageFromArray(np.ascontiguousarray(np.transpose(item.array, (2, 1, 0))))
    if pixel_type is not None:
        image = sitk.Cast(image, pixel_type)
    image.SetSpacing(item.spacing)
    image.SetOrigin(item.origin)
    return image


def reference_image(geometry, pixel_type=sitk.sitkFloat32):
    image = sitk.Image([int(n) for n in geometry.shape], pixel_type)
    image.SetSpacing(geometry.spacing)
    image.SetOrigin(geometry.origin)
    return image


def from_sitk(image):
    """Return the voxel array of a SimpleITK image indexed ``[x, y, z]``."""
    array = sitk.GetArrayFromImage(image)
    return np.transpose(array, (2, 1, 0) + tuple(range(3, array.ndim)))


class Manifest(object):
    """
    Study listing read from or written to a YAML manifest.

    Each study entry holds ``patient_id``, ``split`` and a list of timepoints with ``acquisition_day`` and the
    ``ct``, ``lung_mask`` and optional ``pathology`` file names. Phantom studies also list ``displacements``.
    """

    def __init__(self, studies, root='.', meta=None):
        self.studies = list(studies)
        self.root = str(root)
        self.meta = dict(meta or {})
        seen = set()
        for entry in self.studies:
            patient_id = entry.get('patient_id')
            if not patient_id:
                raise ImproperlyConfigured('Every manifest study needs a patient_id.')
            if patient_id in seen:
                raise ImproperlyConfigured('Patient %s is listed twice in the manifest.' % patient_id)
            if entry.get('split', 'test') not in SPLITS:
                raise ImproperlyConfigured('Unknown split %r for patient %s.' % (entry['split'], patient_id))
            seen.add(patient_id)

    def __len__(self):
        return len(self.studies)

    def __eq__(self, other):
        return isinstance(other, Manifest) and (self.studies, self.meta) == (other.studies, other.meta)

    def patient_ids(self, split=None):
        return [entry['patient_id'] for entry in self.studies if split is None or entry.get('split') == split]

    def entry(self, patient_id):
        for entry in self.studies:
            if entry['patient_id'] == patient_id:
                return entry
        raise KeyError(patient_id)

    def path(self, relative):
        return os.path.join(self.root, relative)

    def load_study(self, patient_id):
        entry = self.entry(patient_id)
        timepoints = []
        for index, item in enumerate(entry['timepoints']):
            pathology = item.get('pathology')
            timepoints.append(Timepoint(
                index,
                item['acquisition_day'],
                load_volume(self.path(item['ct']), meta=item.get('meta')),
                load_labels(self.path(item['lung_mask'])),
                load_labels(self.path(pathology)) if pathology else None,
            ))
        return Study(patient_id, timepoints)

    def load_displacements(self, patient_id):
        return [load_array(self.path(relative))[0] for relative in self.entry(patient_id).get('displacements', [])]

    def iter_studies(self, split=None):
        for patient_id in self.patient_ids(split):
            yield self.load_study(patient_id)

    def as_dict(self):
        return {'format_version': MANIFEST_FORMAT_VERSION, 'meta': self.meta, 'studies': self.studies}


def load_manifest(path):
    with open(str(path), encoding='utf-8') as fp:
        data = yaml.safe_load(fp) or {}
    version = data.get('format_version', MANIFEST_FORMAT_VERSION)
    if version != MANIFEST_FORMAT_VERSION:
        raise ImproperlyConfigured('Unsupported manifest format version %r.' % version)
    return Manifest(data.get('studies', []), root=os.path.dirname(os.path.abspath(str(path))),
                    meta=data.get('meta'))


def save_manifest(manifest, path):
    with open(str(path), 'w', encoding='utf-8') as fp:
        yaml.safe_dump(manifest.as_dict(), fp, sort_keys=True, default_flow_style=False)
    logger.info('Wrote manifest with %d studies to %s', len(manifest), path)
    return path


def save_yaml(data, path):
    with open(str(path), 'w', encoding='utf-8') as fp:
        yaml.safe_dump(data, fp, sort_keys=True, default_flow_style=False)
    return path


def load_yaml(path):
    with open(str(path), encoding='utf-8') as fp:
        return yaml.safe_load(fp)


# Fixed member timestamp so identical arrays give identical archives.
_ZIP_DATE_TIME = (1980, 1, 1, 0, 0, 0)


def save_npz(path, **arrays):
    """Write arrays to an uncompressed ``.npz`` archive that is byte-for-byte reproducible."""
    with zipfile.ZipFile(str(path), 'w', zipfile.ZIP_STORED) as archive:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(name + '.npy', date_time=_ZIP_DATE_TIME)
            with archive.open(info, 'w') as fp:
                np.lib.format.write_array(fp, np.asanyarray(arrays[name]), allow_pickle=False)
    return path
