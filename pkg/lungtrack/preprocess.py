"""
Preprocessing of raw CT timepoints: lung cropping, HU clipping with min-max normalization, resizing to a cube and
slicing along the three anatomical views with empty-slice removal.

The steps always run in that order.
"""
import dataclasses
import logging
import os

import numpy as np
import SimpleITK as sitk
from scipy import ndimage

from .core import Geometry, Volume3D, check_geometry
from .exceptions import AnnotationError, GeometryError
from .io import (from_sitk, load_labels, load_volume, load_yaml, reference_image, save_labels, save_volume, save_yaml,
                 to_sitk)
from .options import BaseConfig
from .validators import IntegerValidator, RangeValidator, positive

logger = logging.getLogger(__name__)

SAGITTAL = 'sagittal'
CORONAL = 'coronal'
AXIAL = 'axial'

#: Array axis each view slices along; volumes are indexed ``[x, y, z]``.
VIEW_AXES = {SAGITTAL: 0, CORONAL: 1, AXIAL: 2}
VIEWS = (AXIAL, CORONAL, SAGITTAL)

INTENSITY = 'intensity'
LABEL = 'label'

# Value every voxel of a constant volume is normalized to.
CONSTANT_VOLUME_VALUE = 0.5


@dataclasses.dataclass
class PreprocessConfig(BaseConfig):
    clip_lo: float = -1024.0
    clip_hi: float = 600.0
    target_size: int = 300
    empty_eps: float = 1e-5
    crop_margin: int = 0

    field_validators = {
        'clip_lo': [RangeValidator()],
        'clip_hi': [RangeValidator()],
        'target_size': [IntegerValidator(), RangeValidator(8)],
        'empty_eps': [positive()],
        'crop_margin': [IntegerValidator(), RangeValidator(0)],
    }

    def clean(self):
        if self.clip_lo >= self.clip_hi:
            return {'clip_hi': 'clip_hi (%s) must be greater than clip_lo (%s).' % (self.clip_hi, self.clip_lo)}
        return {}


class SliceStack(object):
    """The 2D slices of a volume along one view, and the indices of the slices that are not empty."""

    def __init__(self, view, slices, kept_indices):
        if view not in VIEW_AXES:
            raise ValueError('Unknown view %r.' % view)
        self.view = view
        self.slices = list(slices)
        self.kept_indices = tuple(int(i) for i in kept_indices)
        if any(b <= a for a, b in zip(self.kept_indices, self.kept_indices[1:])):
            raise ValueError('Kept slice indices must increase strictly.')

    def __len__(self):
        return len(self.slices)

    @property
    def axis(self):
        return VIEW_AXES[self.view]

    def kept(self):
        lookup = dict(self.slices)
        return [(index, lookup[index]) for index in self.kept_indices]


def bounding_box(mask, margin=0):
    """
    Minimal box ``((x0, x1), (y0, y1), (z0, z1))`` (inclusive) around the foreground of ``mask``.

    The box is dilated by ``margin`` voxels and clamped to the array bounds.
    """
    mask = np.asarray(mask)
    if not mask.any():
        raise AnnotationError('The lung mask has no foreground voxel.')
    box = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        hits = np.flatnonzero(mask.any(axis=other))
        box.append((max(int(hits[0]) - margin, 0), min(int(hits[-1]) + margin, mask.shape[axis] - 1)))
    return tuple(box)


def union_box(a, b):
    return tuple((min(lo_a, lo_b), max(hi_a, hi_b)) for (lo_a, hi_a), (lo_b, hi_b) in zip(a, b))


def crop(item, bbox):
    """Crop a volume or label map to ``bbox`` keeping the world position of every retained voxel."""
    region = tuple(slice(lo, hi + 1) for lo, hi in bbox)
    data = item.array
    origin = tuple(o + lo * s for o, (lo, _), s in zip(item.origin, bbox, item.spacing))
    geometry = Geometry(data[region].shape, item.spacing, origin)
    return item.with_data(data[region], geometry=geometry)


def crop_to_lung(ct, lung_mask, margin=0, bbox=None):
    """Crop a CT and its lung mask to the bounding box of the lung."""
    if not check_geometry(ct, lung_mask):
        raise GeometryError('CT %r and lung mask %r are not on the same grid.' % (ct.geometry, lung_mask.geometry))
    if bbox is None:
        bbox = bounding_box(lung_mask.labels, margin)
    return crop(ct, bbox), crop(lung_mask, bbox), bbox


def clip_and_normalize(ct, cfg=None):
    """Clip to ``[clip_lo, clip_hi]`` HU, then min-max normalize to ``[0, 1]`` with this volume's own range."""
    cfg = cfg or PreprocessConfig()
    clipped = np.clip(ct.data.astype(np.float64), cfg.clip_lo, cfg.clip_hi)
    lo, hi = clipped.min(), clipped.max()
    if hi > lo:
        normalized = (clipped - lo) / (hi - lo)
    else:
        normalized = np.full(clipped.shape, CONSTANT_VOLUME_VALUE)
    return ct.with_data(normalized.astype(np.float32))


def resized_geometry(geometry, target):
    """Geometry of a ``target``-cube covering the same physical extent as ``geometry``."""
    spacing = tuple(s * n / float(target) for s, n in zip(geometry.spacing, geometry.shape))
    # Edges stay put: shift the first voxel center by the change in half-voxel width.
    origin = tuple(o - s_old / 2.0 + s_new / 2.0 for o, s_old, s_new in zip(geometry.origin, geometry.spacing,
                                                                           spacing))
    return Geometry((target,) * 3, spacing, origin)


def resize(item, target, kind=INTENSITY):
    """Resize to ``target`` voxels per axis; trilinear for intensities, nearest-neighbor for labels."""
    if kind not in (INTENSITY, LABEL):
        raise ValueError('Unknown resize kind %r.' % kind)
    data = item.array
    if data.size == 0:
        raise GeometryError('Cannot resize an empty volume.')
    factors = [target / float(n) for n in data.shape]
    if kind == LABEL:
        out = ndimage.zoom(data, factors, order=0, mode='nearest', grid_mode=True)
    else:
        out = ndimage.zoom(data.astype(np.float64), factors, order=1, mode='nearest', grid_mode=True)
        out = out.astype(data.dtype if np.issubdtype(data.dtype, np.floating) else np.float32)
    if out.shape != (target,) * 3:
        raise GeometryError('Resize produced %r instead of a %d-cube.' % (out.shape, target))
    return item.with_data(out, geometry=resized_geometry(item.geometry, target))


def extract_slices(vol, view, cfg=None):
    """Slice ``vol`` along ``view``; slices whose value range is below ``empty_eps`` are not kept."""
    cfg = cfg or PreprocessConfig()
    if vol.shape != (cfg.target_size,) * 3:
        raise GeometryError('Slicing expects a %d-cube, got %r.' % (cfg.target_size, vol.shape))
    if view not in VIEW_AXES:
        raise ValueError('Unknown view %r.' % view)
    data = vol.data if isinstance(vol, Volume3D) else np.asarray(vol)
    axis = VIEW_AXES[view]
    other = tuple(a for a in range(3) if a != axis)
    variation = data.max(axis=other) - data.min(axis=other)
    kept = np.flatnonzero(variation >= cfg.empty_eps)
    slices = [(index, np.take(data, index, axis=axis)) for index in range(data.shape[axis])]
    return SliceStack(view, slices, kept)


def stack_slices(slices, view, shape):
    """Inverse of slicing: place ``(index, image)`` pairs back into an array of ``shape``."""
    out = np.zeros(shape, dtype=np.asarray(slices[0][1]).dtype) if slices else np.zeros(shape)
    axis = VIEW_AXES[view]
    for index, image in slices:
        region = [slice(None)] * 3
        region[axis] = index
        out[tuple(region)] = image
    return out


class ProcessedTimepoint(object):
    """A timepoint after cropping, normalization and resizing; all members share one cubic grid."""

    def __init__(self, timepoint_index, acquisition_day, ct, lung_mask, pathology=None, bbox=None):
        self.timepoint_index = timepoint_index
        self.acquisition_day = acquisition_day
        self.ct = ct
        self.lung_mask = lung_mask
        self.pathology = pathology
        self.bbox = bbox

    @property
    def geometry(self):
        return self.ct.geometry

    def slice_stack(self, view, cfg):
        return extract_slices(self.ct, view, cfg)

    def save(self, prefix):
        save_volume(self.ct, prefix + '_ct.nii')
        save_labels(self.lung_mask, prefix + '_lung.nii')
        if self.pathology is not None:
            save_labels(self.pathology, prefix + '_pathology.nii')
        save_yaml({'timepoint_index': self.timepoint_index, 'acquisition_day': self.acquisition_day,
                   'bbox': [list(b) for b in self.bbox] if self.bbox else None}, prefix + '.yaml')

    @classmethod
    def load(cls, prefix):
        info = load_yaml(prefix + '.yaml') or {}
        pathology = prefix + '_pathology.nii'
        return cls(
            info.get('timepoint_index', 0),
            info.get('acquisition_day', 0),
            load_volume(prefix + '_ct.nii'),
            load_labels(prefix + '_lung.nii'),
            load_labels(pathology) if os.path.exists(pathology) else None,
            tuple(tuple(b) for b in info['bbox']) if info.get('bbox') else None,
        )


def _process(timepoint, bbox, cfg):
    ct, lung, _ = crop_to_lung(timepoint.ct, timepoint.lung_mask, bbox=bbox)
    pathology = crop(timepoint.pathology, bbox) if timepoint.pathology is not None else None
    ct = resize(clip_and_normalize(ct, cfg), cfg.target_size, INTENSITY)
    lung = resize(lung, cfg.target_size, LABEL)
    if pathology is not None:
        pathology = resize(pathology, cfg.target_size, LABEL)
    return ProcessedTimepoint(timepoint.timepoint_index, timepoint.acquisition_day, ct, lung, pathology, bbox)


def _onto(processed, geometry):
    """Resample a processed timepoint onto another processed grid through physical space."""
    reference = reference_image(geometry)

    def resample(item, interpolator, pixel_type):
        image = sitk.Resample(to_sitk(item, pixel_type), reference, sitk.Transform(), interpolator, 0.0, pixel_type)
        return item.with_data(from_sitk(image).astype(item.array.dtype), geometry=geometry)

    ct = resample(processed.ct, sitk.sitkLinear, sitk.sitkFloat32)
    lung = resample(processed.lung_mask, sitk.sitkNearestNeighbor, sitk.sitkUInt8)
    pathology = None
    if processed.pathology is not None:
        pathology = resample(processed.pathology, sitk.sitkNearestNeighbor, sitk.sitkUInt8)
    return ProcessedTimepoint(processed.timepoint_index, processed.acquisition_day, ct, lung, pathology,
                              processed.bbox)


def preprocess_pair(reference, followup, cfg=None):
    """
    Preprocess a reference and a follow-up timepoint onto one shared cubic grid.

    When both raw scans share a grid they are cropped with the union of their lung boxes. Otherwise each is cropped
    to its own lung and the reference is resampled onto the follow-up grid through physical space.
    """
    cfg = (cfg or PreprocessConfig()).validate()
    box_ref = bounding_box(reference.lung_mask.labels, cfg.crop_margin)
    box_fup = bounding_box(followup.lung_mask.labels, cfg.crop_margin)
    if check_geometry(reference.ct, followup.ct):
        bbox = union_box(box_ref, box_fup)
        return _process(reference, bbox, cfg), _process(followup, bbox, cfg)
    logger.info('Timepoints %d and %d are on different grids; resampling the reference onto the follow-up.',
                reference.timepoint_index, followup.timepoint_index)
    processed_fup = _process(followup, box_fup, cfg)
    processed_ref = _onto(_process(reference, box_ref, cfg), processed_fup.geometry)
    return processed_ref, processed_fup
