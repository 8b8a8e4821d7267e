"""
Synthetic longitudinal chest CT studies with known ground truth.

A study is described analytically in a canonical space: two ellipsoid lungs inside a soft-tissue body and a few
lesions (ground-glass and consolidation spheres, pleural effusion layers at the bottom of a lung) whose sizes evolve
from scan to scan. Scan ``k`` samples the canonical scene at ``P_k(x)`` where ``P_0`` is the identity and
``P_k(x) = P_k-1(x + u_k(x))`` for a smooth sinusoidal field ``u_k``. Registering scan ``k-1`` onto scan ``k``
should therefore recover ``u_k`` exactly, which makes it the oracle returned with every study.

Intensities follow common radiological values (air -1000 HU, healthy lung -850, ground glass -500,
consolidation 0, effusion 10, soft tissue 40) with Gaussian noise. They are synthetic, not clinical, values.

.. versionadded:: 1.0
"""
import dataclasses
import datetime
import logging
import math
import os

import numpy as np
from scipy import ndimage

from .classes import BACKGROUND, CONSOLIDATION, GROUND_GLASS, HEALTHY_LUNG, PLEURAL_EFFUSION
from .core import LabelVolume, Study, Timepoint, Volume3D
from .io import Manifest, save_array, save_labels, save_manifest, save_volume
from .options import BaseConfig
from .validators import ChoiceValidator, IntegerValidator, LengthValidator, RangeValidator, positive

logger = logging.getLogger(__name__)

AIR_HU = -1000.0
TISSUE_HU = 40.0
CLASS_HU = {
    HEALTHY_LUNG: -850.0,
    GROUND_GLASS: -500.0,
    CONSOLIDATION: 0.0,
    PLEURAL_EFFUSION: 10.0,
}
LESION_CODES = ('GGO', 'CONS', 'PLEFF')
DEVICE = 'lungtrack-phantom'
FIRST_ACQUISITION = datetime.date(2020, 3, 1)


@dataclasses.dataclass
class PhantomConfig(BaseConfig):
    grid_size: int = 64
    spacing: tuple = (1.0, 1.0, 1.0)
    n_studies: int = 10
    timepoints_per_study: int = 2
    lesion_count: tuple = (2, 4)
    lesion_classes: tuple = LESION_CODES
    lesion_radius: tuple = (0.04, 0.08)
    cons_growth_rate: float = 0.5
    cons_shrink_rate: float = 0.4
    ggo_growth_rate: float = 0.3
    pleff_growth_rate: float = 0.3
    recovery_fraction: float = 0.3
    ggo_to_cons: float = 0.0
    cons_halo: float = 1.5
    deformation_amplitude: float = 2.0
    deformation_frequency: int = 1
    deformation_terms: int = 2
    noise_sigma: float = 20.0
    interval_days: tuple = (4, 14)
    split_ratio: tuple = (6, 2, 2)
    seed: int = 0

    field_validators = {
        'grid_size': [IntegerValidator(), RangeValidator(32)],
        'spacing': [LengthValidator(3, 3, item_validator=positive())],
        'n_studies': [IntegerValidator(), RangeValidator(1)],
        'timepoints_per_study': [ChoiceValidator([2, 3])],
        'lesion_count': [LengthValidator(2, 2, item_validator=RangeValidator(1))],
        'lesion_classes': [LengthValidator(1), ChoiceValidator(LESION_CODES, many=True)],
        'lesion_radius': [LengthValidator(2, 2, item_validator=RangeValidator(0, 0.25, lower_inclusive=False))],
        'cons_growth_rate': [RangeValidator(0)],
        'cons_shrink_rate': [RangeValidator(0, 1, upper_inclusive=False)],
        'ggo_growth_rate': [RangeValidator(0)],
        'pleff_growth_rate': [RangeValidator(0)],
        'recovery_fraction': [RangeValidator(0, 1)],
        'ggo_to_cons': [RangeValidator(0, 1)],
        'cons_halo': [RangeValidator(0)],
        'deformation_amplitude': [RangeValidator(0)],
        'deformation_frequency': [IntegerValidator(), RangeValidator(1)],
        'deformation_terms': [IntegerValidator(), RangeValidator(1)],
        'noise_sigma': [RangeValidator(0)],
        'interval_days': [LengthValidator(2, 2, item_validator=RangeValidator(1))],
        'split_ratio': [LengthValidator(3, 3, item_validator=RangeValidator(0))],
        'seed': [IntegerValidator()],
    }

    def clean(self):
        errors = {}
        if self.deformation_amplitude >= self.grid_size / 8.0:
            errors['deformation_amplitude'] = 'The amplitude must stay below grid_size / 8 (%s).' % (
                self.grid_size / 8.0)
        if self.lesion_count[0] > self.lesion_count[1]:
            errors['lesion_count'] = 'The lesion count range is reversed.'
        if self.lesion_radius[0] > self.lesion_radius[1]:
            errors['lesion_radius'] = 'The lesion radius range is reversed.'
        if self.interval_days[0] > self.interval_days[1]:
            errors['interval_days'] = 'The interval range is reversed.'
        if sum(self.split_ratio) <= 0:
            errors['split_ratio'] = 'At least one split needs a positive share.'
        return errors

    @property
    def gradient_bound(self):
        """Upper bound of every partial derivative of a generated displacement field."""
        return 2 * math.pi * self.deformation_amplitude * self.deformation_frequency / self.grid_size

    def split_sizes(self):
        total = float(sum(self.split_ratio))
        n_train = int(round(self.n_studies * self.split_ratio[0] / total))
        n_val = min(int(round(self.n_studies * self.split_ratio[1] / total)), self.n_studies - n_train)
        return n_train, n_val, self.n_studies - n_train - n_val


class SmoothDisplacement(object):
    """
    Sum of sinusoids per component; ``u_c(x) = sum_m a_m,c sin(2 pi k_m . x / n + phi_m,c)`` in voxels.

    Every component is bounded by ``amplitude`` and every partial derivative by ``2 pi amplitude F / n``.
    """

    def __init__(self, wave_vectors, amplitudes, phases, grid_size):
        self.wave_vectors = np.asarray(wave_vectors, dtype=np.float64)
        self.amplitudes = np.asarray(amplitudes, dtype=np.float64)
        self.phases = np.asarray(phases, dtype=np.float64)
        self.grid_size = grid_size

    @classmethod
    def random(cls, rng, cfg):
        terms, frequency = cfg.deformation_terms, cfg.deformation_frequency
        wave_vectors = []
        while len(wave_vectors) < terms:
            k = rng.integers(-frequency, frequency + 1, size=3)
            if k.any():
                wave_vectors.append(k)
        # Weights on the simplex keep every component within the amplitude.
        weights = rng.dirichlet(np.ones(terms), size=3).T
        signs = rng.choice([-1.0, 1.0], size=(terms, 3))
        amplitudes = cfg.deformation_amplitude * weights * signs
        phases = rng.uniform(0, 2 * math.pi, size=(terms, 3))
        return cls(wave_vectors, amplitudes, phases, cfg.grid_size)

    @classmethod
    def zero(cls, grid_size):
        return cls(np.ones((1, 3)), np.zeros((1, 3)), np.zeros((1, 3)), grid_size)

    def __call__(self, points):
        """Displacement at ``points`` (3, ...) as an array of the same shape."""
        points = np.asarray(points, dtype=np.float64)
        out = np.zeros_like(points)
        for k, amplitude, phase in zip(self.wave_vectors, self.amplitudes, self.phases):
            angle = 2 * math.pi * np.tensordot(k, points, axes=1) / self.grid_size
            for c in range(3):
                if amplitude[c]:
                    out[c] += amplitude[c] * np.sin(angle + phase[c])
        return out

    def field(self, shape):
        """Dense field on the voxel grid, ``[x, y, z, component]``, float32."""
        return np.moveaxis(self(_grid(shape)), 0, -1).astype(np.float32)


def _grid(shape):
    return np.indices(shape, dtype=np.float64)


def max_displacement_gradient(field):
    """Largest central-difference partial derivative of a ``[x, y, z, component]`` field."""
    return max(float(np.abs(g).max()) for c in range(field.shape[-1]) for g in np.gradient(field[..., c]))


class _Lesion(object):
    def __init__(self, code, center, radius, rate, side=0, converts=False):
        self.code = code
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = radius
        self.rate = rate
        self.side = side
        self.converts = converts

    def scale(self, timepoint):
        """Volume factor at ``timepoint``; radii and heights follow its cube root."""
        return (1.0 + self.rate) ** timepoint


class _Anatomy(object):
    """The canonical scene of one study."""

    def __init__(self, rng, cfg):
        n = cfg.grid_size
        self.cfg = cfg
        jitter = rng.uniform(0.95, 1.05, size=(2, 3))
        self.body_center = np.full(3, (n - 1) / 2.0)
        self.body_axes = np.array([0.45, 0.38, 0.47]) * n
        self.lung_centers = [self.body_center + np.array([side * 0.21 * n, 0.02 * n, 0]) for side in (-1, 1)]
        self.lung_axes = [np.array([0.17, 0.26, 0.36]) * n * jitter[i] for i in range(2)]
        self.lesions = self._lesions(rng)

    def _lesions(self, rng):
        cfg = self.cfg
        n = cfg.grid_size
        points = _grid((n, n, n))
        lung = self.lung(points)
        depth = ndimage.distance_transform_edt(lung)
        count = int(rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1))
        lesions = []
        for i in range(count):
            # Every study carries at least one consolidation when that class is enabled.
            if i == 0 and 'CONS' in cfg.lesion_classes:
                code = 'CONS'
            else:
                code = cfg.lesion_classes[int(rng.integers(len(cfg.lesion_classes)))]
            if code == 'PLEFF':
                # An effusion stores its layer height, as a fraction of the lung height, in radius.
                lesions.append(_Lesion(code, self.body_center, rng.uniform(0.1, 0.2), cfg.pleff_growth_rate,
                                       side=int(rng.integers(2))))
                continue
            radius = rng.uniform(*cfg.lesion_radius) * n
            if code == 'CONS':
                shrinks = i > 0 and rng.random() < cfg.recovery_fraction
                rate = -cfg.cons_shrink_rate if shrinks else cfg.cons_growth_rate
                converts = False
            else:
                rate = cfg.ggo_growth_rate
                converts = rng.random() < cfg.ggo_to_cons
            growth = max(1.0, (1.0 + rate) ** ((cfg.timepoints_per_study - 1) / 3.0))
            halo = cfg.cons_halo if code == 'CONS' else 0.0
            # Shrink lesions that could not fit inside the lung at their largest.
            radius = max(min(radius, (depth.max() - halo - 1) / growth), 1.0)
            inside = np.argwhere(depth >= radius * growth + halo + 1)
            if not len(inside):
                inside = np.argwhere(depth == depth.max())
            center = inside[int(rng.integers(len(inside)))]
            lesions.append(_Lesion(code, center, radius, rate, converts=converts))
        return lesions

    def _inside(self, points, center, axes):
        d = (points - center.reshape(3, 1, 1, 1)) / axes.reshape(3, 1, 1, 1)
        return (d ** 2).sum(axis=0) <= 1.0

    def body(self, points):
        return self._inside(points, self.body_center, self.body_axes)

    def lung(self, points, side=None):
        sides = (0, 1) if side is None else (side,)
        out = np.zeros(points.shape[1:], dtype=bool)
        for s in sides:
            out |= self._inside(points, self.lung_centers[s], self.lung_axes[s])
        return out

    def _sphere(self, points, lesion, radius):
        return ((points - lesion.center.reshape(3, 1, 1, 1)) ** 2).sum(axis=0) <= radius ** 2

    def labels(self, points, timepoint):
        """Pathology labels of the scene sampled at canonical ``points``; painted HL, PLEFF, GGO, CONS."""
        lung = self.lung(points)
        labels = np.where(lung, HEALTHY_LUNG, BACKGROUND).astype(np.uint8)
        for lesion in self.lesions:
            if lesion.code == 'PLEFF':
                center, axes = self.lung_centers[lesion.side], self.lung_axes[lesion.side]
                height = min(lesion.radius * lesion.scale(timepoint), 0.5) * 2 * axes[1]
                region = self.lung(points, lesion.side) & (points[1] <= center[1] - axes[1] + height)
                labels[region] = PLEURAL_EFFUSION
        for code in ('GGO', 'CONS'):
            for lesion in self.lesions:
                if lesion.code != code:
                    continue
                radius = lesion.radius * lesion.scale(timepoint) ** (1 / 3.0)
                if code == 'CONS':
                    if self.cfg.cons_halo:
                        labels[self._sphere(points, lesion, radius + self.cfg.cons_halo) & lung &
                               (labels != CONSOLIDATION)] = GROUND_GLASS
                    labels[self._sphere(points, lesion, radius) & lung] = CONSOLIDATION
                else:
                    labels[self._sphere(points, lesion, radius) & lung & (labels != CONSOLIDATION)] = GROUND_GLASS
                    if lesion.converts and timepoint > 0:
                        labels[self._sphere(points, lesion, 0.6 * radius) & lung] = CONSOLIDATION
        return labels, lung

    def ct(self, points, labels, rng):
        hu = np.where(self.body(points), TISSUE_HU, AIR_HU)
        for index, value in CLASS_HU.items():
            hu[labels == index] = value
        if self.cfg.noise_sigma:
            hu = hu + rng.normal(0.0, self.cfg.noise_sigma, size=hu.shape)
        return np.clip(np.rint(hu), -32768, 32767).astype(np.int16)


def _study_rng(cfg, study_index):
    return np.random.default_rng([cfg.seed, study_index])


def generate_study(cfg, study_index):
    """
    Generate study ``study_index`` as ``(Study, fields)``.

    ``fields[k-1]`` is the displacement (voxels, ``[x, y, z, component]``) that registers scan ``k-1`` onto scan
    ``k``: ``scan_k(x)`` shows the anatomy of ``scan_k-1(x + u(x))``. The result depends only on
    ``(cfg.seed, study_index)``.
    """
    cfg = cfg.validate()
    rng = _study_rng(cfg, study_index)
    n = cfg.grid_size
    anatomy = _Anatomy(rng, cfg)
    patient_id = 'phantom-%03d' % study_index

    grid = _grid((n, n, n))
    points = grid
    day = 0
    timepoints, fields, deformations = [], [], []
    for k in range(cfg.timepoints_per_study):
        if k:
            if cfg.deformation_amplitude:
                deformation = SmoothDisplacement.random(rng, cfg)
            else:
                deformation = SmoothDisplacement.zero(n)
            points = _canonical(grid, deformation, deformations)
            deformations.append(deformation)
            fields.append(deformation.field((n, n, n)))
            day += int(rng.integers(cfg.interval_days[0], cfg.interval_days[1] + 1))
        labels, lung = anatomy.labels(points, k)
        meta = {'device': DEVICE, 'acquisition_date': (FIRST_ACQUISITION + datetime.timedelta(days=day)).isoformat(),
                'study_index': str(study_index)}
        timepoints.append(Timepoint(
            k, day,
            Volume3D(anatomy.ct(points, labels, rng), cfg.spacing, meta=meta),
            LabelVolume(lung, cfg.spacing),
            LabelVolume(labels, cfg.spacing),
        ))
    return Study(patient_id, timepoints), fields


def _canonical(grid, newest, earlier):
    """Canonical coordinates ``P_k`` of the grid points for ``u_k = newest`` and ``earlier = [u_1, ..., u_k-1]``."""
    # P_k(x) = P_k-1(y) with y = x + u_k(x), and P_k-1 unrolls into the earlier fields applied last to first.
    current = grid + newest(grid)
    for deformation in reversed(earlier):
        current = current + deformation(current)
    return current


def generate_dataset(cfg, out_dir):
    """
    Write ``cfg.n_studies`` studies and their manifest below ``out_dir`` and return the manifest.

    Studies are split by index: the first ones go to training, then validation, then test.
    """
    cfg = cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    n_train, n_val, _ = cfg.split_sizes()
    entries = []
    for index in range(cfg.n_studies):
        study, fields = generate_study(cfg, index)
        split = 'train' if index < n_train else 'val' if index < n_train + n_val else 'test'
        folder = os.path.join(out_dir, study.patient_id)
        os.makedirs(folder, exist_ok=True)
        items = []
        for tp in study.timepoints:
            prefix = 't%d' % tp.timepoint_index
            save_volume(tp.ct, os.path.join(folder, prefix + '_ct.nii'))
            save_labels(tp.lung_mask, os.path.join(folder, prefix + '_lung.nii'))
            save_labels(tp.pathology, os.path.join(folder, prefix + '_pathology.nii'))
            items.append({
                'acquisition_day': tp.acquisition_day,
                'ct': '%s/%s_ct.nii' % (study.patient_id, prefix),
                'lung_mask': '%s/%s_lung.nii' % (study.patient_id, prefix),
                'pathology': '%s/%s_pathology.nii' % (study.patient_id, prefix),
                'meta': tp.ct.meta,
            })
        displacements = []
        for k, field in enumerate(fields, start=1):
            name = 'u%d.nii' % k
            save_array(field, study.timepoints[k].ct.geometry, os.path.join(folder, name), np.float32)
            displacements.append('%s/%s' % (study.patient_id, name))
        entries.append({'patient_id': study.patient_id, 'split': split, 'timepoints': items,
                        'displacements': displacements})
        logger.info('Generated %s (%s, %d scans)', study.patient_id, split, len(study))
    manifest = Manifest(entries, root=out_dir, meta={'generator': 'phantom', 'config': cfg.as_dict()})
    save_manifest(manifest, os.path.join(out_dir, 'manifest.yaml'))
    return manifest
