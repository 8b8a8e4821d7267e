"""
2.5D inference: every view of a volume is segmented slice by slice, the three per-view probability volumes are
averaged voxel by voxel and the mean is turned into labels with an argmax.
"""
import logging

import numpy as np
import torch

from .classes import BACKGROUND, N_CLASSES
from .core import LabelVolume, check_geometry
from .exceptions import GeometryError, ModelError
from .io import save_array
from .models import SliceBatch, forward
from .preprocess import VIEW_AXES, VIEWS

logger = logging.getLogger(__name__)

SIMPLEX_ATOL = 1e-5


class ProbabilityVolume(object):
    """
    Per-voxel class probabilities, ``probabilities[c, x, y, z]``, on a :class:`~lungtrack.core.Geometry`.

    Every voxel holds a probability vector: entries in ``[0, 1]`` summing to 1.
    """

    def __init__(self, probabilities, geometry, view=None):
        probabilities = np.asarray(probabilities, dtype=np.float32)
        if probabilities.ndim != 4 or probabilities.shape[0] != N_CLASSES:
            raise ValueError('Expected (%d, x, y, z) probabilities, got %r.' % (N_CLASSES, probabilities.shape))
        if probabilities.shape[1:] != geometry.shape:
            raise GeometryError('Probabilities %r do not match geometry %r.' % (probabilities.shape[1:],
                                                                               geometry.shape))
        self.probabilities = probabilities
        self.geometry = geometry
        self.view = view

    def __repr__(self):
        return 'ProbabilityVolume(%r, view=%s)' % (self.geometry, self.view)

    @property
    def shape(self):
        return self.geometry.shape

    def is_valid(self, atol=SIMPLEX_ATOL):
        p = self.probabilities
        return bool((p >= -atol).all() and (p <= 1 + atol).all() and
                    np.allclose(p.sum(axis=0), 1.0, rtol=0, atol=atol))

    def save(self, path):
        """Save as a 4D NIfTI volume with the class axis last."""
        return save_array(np.moveaxis(self.probabilities, 0, -1), self.geometry, path, np.float32)


def background_vector():
    vector = np.zeros(N_CLASSES, dtype=np.float32)
    vector[BACKGROUND] = 1.0
    return vector


def _view_inputs(pair, target_timepoint, view, index, longitudinal):
    axis = VIEW_AXES[view]
    target = np.take(pair.volume(target_timepoint).data, index, axis=axis)
    if not longitudinal:
        return target[None]
    other = np.take(pair.volume(1 - target_timepoint).data, index, axis=axis)
    return np.stack([other, target])


def predict_view(model, pair, target_timepoint, view, cfg=None, batch_size=16):
    """
    Segment every kept slice of the ``target_timepoint`` volume of ``pair`` along ``view``.

    Slices removed as empty get the background-certain vector. Longitudinal models see the registered slice of
    the other timepoint as channel 0 and the target slice as channel 1.
    """
    if target_timepoint not in (0, 1):
        raise ValueError('A pair has timepoints 0 and 1, got %r.' % target_timepoint)
    longitudinal = model.config.is_longitudinal
    if model.config.in_channels != (2 if longitudinal else 1):
        raise ModelError('Model channels do not match its variant.')
    if not check_geometry(pair.x0_reg, pair.x1):
        raise GeometryError('The registered pair is not on one grid.')

    geometry = pair.geometry
    axis = VIEW_AXES[view]
    out = np.empty((N_CLASSES,) + geometry.shape, dtype=np.float32)
    out[...] = background_vector().reshape((N_CLASSES, 1, 1, 1))
    kept = pair.slice_stack(target_timepoint, view, cfg).kept_indices
    for start in range(0, len(kept), batch_size):
        indices = kept[start:start + batch_size]
        images = np.stack([_view_inputs(pair, target_timepoint, view, i, longitudinal) for i in indices])
        probabilities = forward(model, SliceBatch(images, view, indices)).cpu().numpy()
        for index, slice_probabilities in zip(indices, probabilities):
            region = [slice(None)] * 4
            region[axis + 1] = index
            out[tuple(region)] = slice_probabilities
    return ProbabilityVolume(out, geometry, view)


def fuse_views(axial, coronal, sagittal):
    """Unweighted per-voxel mean of the three view predictions."""
    volumes = (axial, coronal, sagittal)
    for volume in volumes[1:]:
        if not check_geometry(volume.geometry, axial.geometry):
            raise GeometryError('View predictions are on different grids: %r and %r.' % (axial.geometry,
                                                                                        volume.geometry))
    fused = np.mean(np.stack([v.probabilities.astype(np.float64) for v in volumes]), axis=0)
    return ProbabilityVolume(fused, axial.geometry)


def labelize(prob, taxonomy=None):
    """Argmax class per voxel; ``np.argmax`` returns the first maximum, so ties go to the lowest class index."""
    return LabelVolume(np.argmax(prob.probabilities, axis=0).astype(np.uint8), geometry=prob.geometry,
                       taxonomy=taxonomy)


def predict_timepoint(model, pair, target_timepoint, cfg=None, views=VIEWS):
    """Fused probabilities of one timepoint together with the per-view predictions."""
    per_view = {view: predict_view(model, pair, target_timepoint, view, cfg) for view in views}
    if len(per_view) == 3:
        fused = fuse_views(per_view['axial'], per_view['coronal'], per_view['sagittal'])
    else:
        fused = ProbabilityVolume(np.mean([v.probabilities for v in per_view.values()], axis=0), pair.geometry)
    return fused, per_view


def segment_pair(model, pair, cfg=None, return_probabilities=False):
    """
    Labels of both timepoints of ``pair`` in follow-up space, as ``(y0_reg, y1)``.

    With ``return_probabilities`` the fused and per-view probability volumes are returned as a third item,
    ``{timepoint: (fused, per_view)}``.
    """
    with torch.no_grad():
        results = {t: predict_timepoint(model, pair, t, cfg) for t in (0, 1)}
    labels = (labelize(results[0][0]), labelize(results[1][0]))
    logger.debug('Segmented %s with the %s model', pair.pair_id, model.config.variant)
    if return_probabilities:
        return labels + (results,)
    return labels
