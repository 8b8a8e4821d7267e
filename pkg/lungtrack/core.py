"""Volume, label and study data model shared by every module."""
import numpy as np

from .classes import CLASS_CHOICES, CLASS_CODES, CONSOLIDATION, N_CLASSES
from .exceptions import GeometryError, StudyError

__all__ = [
    'Geometry', 'Volume3D', 'LabelVolume', 'ConsolidationMap', 'ClassMap', 'CLASS_MAP', 'Timepoint', 'Study',
    'consecutive_pairs', 'check_geometry', 'one_hot',
]

SPACING_RTOL = 1e-6
SPACING_ATOL = 1e-9


def _triple(values, cast, name):
    values = tuple(cast(v) for v in values)
    if len(values) != 3:
        raise GeometryError('%s needs three components, got %r.' % (name, values))
    return values


class Geometry(object):
    """Voxel grid description: shape in voxels, spacing and origin in mm."""

    __slots__ = ('shape', 'spacing', 'origin')

    def __init__(self, shape, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        shape = _triple(shape, int, 'shape')
        spacing = _triple(spacing, float, 'spacing')
        origin = _triple(origin, float, 'origin')
        if min(shape) < 1:
            raise GeometryError('Shape components must be >= 1, got %r.' % (shape,))
        if min(spacing) <= 0:
            raise GeometryError('Spacing components must be > 0, got %r.' % (spacing,))
        object.__setattr__(self, 'shape', shape)
        object.__setattr__(self, 'spacing', spacing)
        object.__setattr__(self, 'origin', origin)

    def __setattr__(self, name, value):
        raise AttributeError('Geometry is immutable.')

    def __eq__(self, other):
        return isinstance(other, Geometry) and check_geometry(self, other)

    def __hash__(self):
        return hash(self.shape)

    def __repr__(self):
        return 'Geometry(shape=%r, spacing=%r, origin=%r)' % (self.shape, self.spacing, self.origin)

    @property
    def voxel_volume(self):
        """Volume of one voxel in mm³."""
        return float(np.prod(self.spacing))

    @property
    def extent(self):
        """Physical size of the grid in mm, edge to edge."""
        return tuple(n * s for n, s in zip(self.shape, self.spacing))

    def replace(self, shape=None, spacing=None, origin=None):
        return Geometry(shape or self.shape, spacing or self.spacing, origin or self.origin)

    def as_dict(self):
        return {'shape': list(self.shape), 'spacing': list(self.spacing), 'origin': list(self.origin)}

    @classmethod
    def from_dict(cls, data):
        return cls(data['shape'], data['spacing'], data['origin'])


class _GridData(object):
    """Common behaviour of arrays laid out on a :class:`Geometry`."""

    def __init__(self, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), meta=None, geometry=None):
        data = np.array(data, copy=True)
        if data.ndim != 3:
            raise GeometryError('Expected a 3D grid, got %d dimensions.' % data.ndim)
        if geometry is None:
            geometry = Geometry(data.shape, spacing, origin)
        elif tuple(data.shape) != geometry.shape:
            raise GeometryError('Data shape %r does not match geometry %r.' % (data.shape, geometry.shape))
        data.setflags(write=False)
        self._data = data
        self.geometry = geometry
        self.meta = dict(meta or {})

    @property
    def array(self):
        """The read-only voxel array, whatever the kind of grid."""
        return self._data

    @property
    def shape(self):
        return self.geometry.shape

    @property
    def spacing(self):
        return self.geometry.spacing

    @property
    def origin(self):
        return self.geometry.origin

    def with_data(self, data, geometry=None):
        """A new object of the same kind and metadata holding ``data``."""
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        _GridData.__init__(clone, data, meta=self.meta, geometry=geometry or self.geometry)
        return clone


class Volume3D(_GridData):
    """
    A scalar CT volume: Hounsfield units before normalization, ``[0, 1]`` after.

    ``data`` is indexed ``[x, y, z]`` and is read-only.
    """

    @property
    def data(self):
        return self._data

    def __repr__(self):
        return 'Volume3D(%r, dtype=%s)' % (self.geometry, self._data.dtype)


class LabelVolume(_GridData):
    """
    Per-voxel class labels on the grid of a paired CT volume.

    Lung masks are the binary case (labels 0 and 1) and carry no taxonomy.
    """

    def __init__(self, labels, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), meta=None, geometry=None,
                 taxonomy=None):
        labels = np.asarray(labels)
        if labels.size and (labels.min() < 0 or labels.max() >= N_CLASSES):
            raise ValueError('Labels must lie in 0..%d, got range %s..%s.' % (N_CLASSES - 1, labels.min(),
                                                                            labels.max()))
        super().__init__(labels.astype(np.uint8), spacing, origin, meta, geometry)
        self.taxonomy = taxonomy

    @property
    def labels(self):
        return self._data

    @property
    def is_binary(self):
        return int(self._data.max(initial=0)) <= 1

    def __repr__(self):
        return 'LabelVolume(%r, classes=%s)' % (self.geometry, np.unique(self._data).tolist())


class ConsolidationMap(_GridData):
    """Binary map: 1 where a voxel is consolidation, 0 elsewhere."""

    def __init__(self, mask, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), meta=None, geometry=None):
        super().__init__(np.asarray(mask).astype(np.uint8), spacing, origin, meta, geometry)
        if self._data.max(initial=0) > 1:
            raise ValueError('A consolidation map is binary.')

    @property
    def mask(self):
        return self._data

    def count(self):
        return int(self._data.sum(dtype=np.int64))


class ClassMap(object):
    """The five-class voxel taxonomy and its consolidation projection."""

    def __init__(self, choices=CLASS_CHOICES, codes=CLASS_CODES):
        self.choices = tuple(choices)
        self.codes = dict(codes)
        indices = [index for index, _ in self.choices]
        if indices != list(range(N_CLASSES)):
            raise ValueError('Class indices must be the contiguous range 0..%d.' % (N_CLASSES - 1))

    def __len__(self):
        return len(self.choices)

    def __eq__(self, other):
        return isinstance(other, ClassMap) and self.choices == other.choices

    def __hash__(self):
        return hash(self.choices)

    def name(self, index):
        return dict(self.choices)[index]

    def code(self, index):
        return self.codes[index]

    @property
    def indices(self):
        return tuple(index for index, _ in self.choices)

    def project(self, volume):
        """
        Map consolidation to 1 and everything else to 0.

        A :class:`ConsolidationMap` is already projected and is returned unchanged.
        """
        if isinstance(volume, ConsolidationMap):
            return volume
        if isinstance(volume, LabelVolume):
            return ConsolidationMap(volume.labels == CONSOLIDATION, meta=volume.meta, geometry=volume.geometry)
        return (np.asarray(volume) == CONSOLIDATION).astype(np.uint8)


CLASS_MAP = ClassMap()


class Timepoint(object):
    """One scan of a study with its lung mask and, when annotated, its pathology labels."""

    def __init__(self, timepoint_index, acquisition_day, ct, lung_mask, pathology=None):
        self.timepoint_index = int(timepoint_index)
        self.acquisition_day = int(acquisition_day)
        self.ct = ct
        self.lung_mask = lung_mask
        self.pathology = pathology
        if not check_geometry(ct, lung_mask):
            raise GeometryError('Lung mask of timepoint %d is not on the CT grid.' % self.timepoint_index)
        if pathology is not None and not check_geometry(ct, pathology):
            raise GeometryError('Pathology of timepoint %d is not on the CT grid.' % self.timepoint_index)

    def __repr__(self):
        return 'Timepoint(%d, day=%d)' % (self.timepoint_index, self.acquisition_day)


class Study(object):
    """All scans of one patient, ordered by acquisition day starting at day 0."""

    def __init__(self, patient_id, timepoints):
        self.patient_id = str(patient_id)
        self.timepoints = tuple(timepoints)
        days = [tp.acquisition_day for tp in self.timepoints]
        if days and days[0] != 0:
            raise StudyError('Study %s: the first scan must be on day 0, got day %d.' % (self.patient_id, days[0]))
        if any(later <= earlier for earlier, later in zip(days, days[1:])):
            raise StudyError('Study %s: acquisition days must increase strictly, got %r.' % (self.patient_id, days))

    def __len__(self):
        return len(self.timepoints)

    def __repr__(self):
        return 'Study(%r, %d timepoints)' % (self.patient_id, len(self.timepoints))

    @property
    def is_longitudinal(self):
        return len(self.timepoints) >= 2


def consecutive_pairs(study):
    """Return ``(t_i, t_i+1)`` for every consecutive pair of scans, in order."""
    if not study.is_longitudinal:
        raise StudyError('Study %s has %d scan(s); a longitudinal study needs at least two.' %
                         (study.patient_id, len(study.timepoints)))
    return list(zip(study.timepoints[:-1], study.timepoints[1:]))


def _geometry_of(item):
    return item if isinstance(item, Geometry) else item.geometry


def check_geometry(a, b):
    """True when ``a`` and ``b`` share shape exactly and spacing/origin within a relative 1e-6."""
    a, b = _geometry_of(a), _geometry_of(b)
    return (a.shape == b.shape and
            np.allclose(a.spacing, b.spacing, rtol=SPACING_RTOL, atol=SPACING_ATOL) and
            np.allclose(a.origin, b.origin, rtol=SPACING_RTOL, atol=SPACING_ATOL))


def one_hot(labels, n_classes=N_CLASSES, dtype=np.float32):
    """Channel-first one-hot encoding of an integer label array."""
    labels = np.asarray(labels.labels if isinstance(labels, LabelVolume) else labels)
    return np.moveaxis(np.eye(n_classes, dtype=dtype)[labels], -1, 0)
