"""
Consolidation progression between two aligned segmentations.

The follow-up consolidation map minus the registered reference map gives +1 where consolidation appeared
(progression), -1 where it cleared (recovery) and 0 elsewhere.
"""
import logging

import numpy as np

from .core import CLASS_MAP, ConsolidationMap, LabelVolume, _GridData, check_geometry
from .exceptions import GeometryError
from .io import save_array, save_yaml
from .log import RECORD_ATTR
from .plotting import pyplot, save_figure
from .preprocess import VIEW_AXES

logger = logging.getLogger(__name__)

PROGRESSION = 1
RECOVERY = -1

#: mm³ per mL.
MM3_PER_ML = 1000.0


class ProgressionMap(_GridData):
    """Signed per-voxel consolidation change in follow-up space."""

    def __init__(self, values, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), meta=None, geometry=None):
        values = np.asarray(values)
        if values.size and (values.min() < RECOVERY or values.max() > PROGRESSION):
            raise ValueError('Progression values lie in {-1, 0, 1}.')
        super().__init__(values.astype(np.int8), spacing, origin, meta, geometry)

    @property
    def values(self):
        return self._data

    def __neg__(self):
        return self.with_data(-self._data)

    def save(self, path):
        return save_array(self._data, self.geometry, path, np.int8)


def consolidation_map(labels):
    """1 where ``labels`` is consolidation, 0 elsewhere."""
    if not isinstance(labels, (LabelVolume, ConsolidationMap)):
        raise TypeError('Expected pathology labels, got %r.' % type(labels).__name__)
    return CLASS_MAP.project(labels)


def progression_map(con0, con1):
    """
    ``con1 - con0`` per voxel for the registered reference and follow-up consolidation maps.

    Either input may be a :class:`~lungtrack.core.ConsolidationMap`, taken as is, or pathology labels, projected
    with :func:`consolidation_map`. A binary :class:`~lungtrack.core.LabelVolume` is read as pathology labels
    too, so a lung mask holds no consolidation and contributes an all-zero map; pass binary consolidation
    masks as :class:`~lungtrack.core.ConsolidationMap`.
    """
    con0, con1 = consolidation_map(con0), consolidation_map(con1)
    if not check_geometry(con0, con1):
        raise GeometryError('Consolidation maps %r and %r are not on the same grid.' % (con0.geometry,
                                                                                      con1.geometry))
    diff = con1.mask.astype(np.int8) - con0.mask.astype(np.int8)
    return ProgressionMap(diff, meta=con1.meta, geometry=con1.geometry)


class ProgressionReport(object):
    """Volumes in mL of progressed, recovered and net consolidation for one pair."""

    def __init__(self, progressed_voxels, recovered_voxels, voxel_volume, consolidation_voxels=None, pair_id='',
                 timepoints=(0, 1)):
        self.progressed_voxels = int(progressed_voxels)
        self.recovered_voxels = int(recovered_voxels)
        self.voxel_volume = float(voxel_volume)
        self.consolidation_voxels = tuple(int(n) for n in consolidation_voxels) if consolidation_voxels else None
        self.pair_id = pair_id
        self.timepoints = tuple(timepoints)

    def __repr__(self):
        return 'ProgressionReport(%s: +%.3f mL, -%.3f mL)' % (self.pair_id, self.progressed_volume,
                                                              self.recovered_volume)

    def __eq__(self, other):
        return isinstance(other, ProgressionReport) and self.as_dict() == other.as_dict()

    def _ml(self, voxels):
        return voxels * self.voxel_volume / MM3_PER_ML

    @property
    def progressed_volume(self):
        return self._ml(self.progressed_voxels)

    @property
    def recovered_volume(self):
        return self._ml(self.recovered_voxels)

    @property
    def net_change(self):
        return self.progressed_volume - self.recovered_volume

    @property
    def consolidation_volumes(self):
        if self.consolidation_voxels is None:
            return None
        return tuple(self._ml(n) for n in self.consolidation_voxels)

    def as_dict(self):
        data = {
            'pair_id': self.pair_id,
            'timepoints': list(self.timepoints),
            'voxel_volume_mm3': self.voxel_volume,
            'progressed_voxels': self.progressed_voxels,
            'recovered_voxels': self.recovered_voxels,
            'progressed_ml': self.progressed_volume,
            'recovered_ml': self.recovered_volume,
            'net_change_ml': self.net_change,
        }
        if self.consolidation_voxels is not None:
            data['consolidation_voxels'] = list(self.consolidation_voxels)
            data['consolidation_ml'] = list(self.consolidation_volumes)
        return data

    def table(self):
        rows = [
            ('Progression', self.progressed_voxels, self.progressed_volume),
            ('Recovery', self.recovered_voxels, self.recovered_volume),
            ('Net change', self.progressed_voxels - self.recovered_voxels, self.net_change),
        ]
        if self.consolidation_voxels is not None:
            for t, voxels in zip(self.timepoints, self.consolidation_voxels):
                rows.append(('Consolidation t%d' % t, voxels, self._ml(voxels)))
        lines = ['%-20s %12s %12s' % (self.pair_id or 'pair', 'voxels', 'mL')]
        lines.extend('%-20s %12d %12.3f' % row for row in rows)
        return '\n'.join(lines)

    def save(self, path):
        return save_yaml(self.as_dict(), path)


def quantify(pmap, spacing=None, consolidation=None, pair_id='', timepoints=(0, 1)):
    """
    Count progressed and recovered voxels and convert them to mL with the voxel volume of ``spacing``
    (defaults to the map's own spacing).
    """
    spacing = pmap.spacing if spacing is None else spacing
    values = pmap.values
    counts = None
    if consolidation is not None:
        counts = [consolidation_map(c).count() for c in consolidation]
    return ProgressionReport(np.count_nonzero(values == PROGRESSION), np.count_nonzero(values == RECOVERY),
                             float(np.prod(spacing)), counts, pair_id, timepoints)


def analyze_progression(y0_reg, y1, pair_id='', timepoints=(0, 1)):
    """Progression map and report of a registered pair of pathology label volumes."""
    con0, con1 = consolidation_map(y0_reg), consolidation_map(y1)
    pmap = progression_map(con0, con1)
    report = quantify(pmap, consolidation=(con0, con1), pair_id=pair_id, timepoints=timepoints)
    logger.info('Progression %s: %+.3f mL net (%.3f mL progressed, %.3f mL recovered)', pair_id,
                report.net_change, report.progressed_volume, report.recovered_volume,
                extra={RECORD_ATTR: dict(report.as_dict(), event='progression')})
    return pmap, report


def render_progression_overlay(pmap, ct, path, view='axial', index=None):
    """
    Save a PNG of one slice of the follow-up CT with progression in red and recovery in green.

    Without ``index`` the slice with the most changed voxels is shown.
    """
    if not check_geometry(pmap, ct):
        raise GeometryError('The progression map is not on the CT grid.')
    axis = VIEW_AXES[view]
    values = pmap.values
    if index is None:
        other = tuple(a for a in range(3) if a != axis)
        index = int(np.argmax(np.count_nonzero(values, axis=other)))
    image = np.take(ct.data, index, axis=axis).T
    change = np.take(values, index, axis=axis).T.astype(float)

    plt = pyplot()
    from matplotlib.colors import ListedColormap

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(image, cmap='gray', origin='lower')
    overlay = np.ma.masked_equal(change, 0)
    ax.imshow(overlay, cmap=ListedColormap(['tab:green', 'tab:red']), vmin=RECOVERY, vmax=PROGRESSION,
              alpha=0.6, origin='lower', interpolation='nearest')
    ax.set_title('%s slice %d: progression (red), recovery (green)' % (view, index), fontsize=9)
    ax.set_axis_off()
    return save_figure(fig, path)
