"""
Deformable registration of the reference lung mask onto the follow-up lung mask.

The transform is estimated from the two lung masks only, so pathological changes inside the lung do not pull the
alignment. Follow-up space is the analysis space: the reference CT and its labels are warped into it and the
follow-up scan is never resampled.
"""
import dataclasses
import json
import logging
import math
import os

import numpy as np
import SimpleITK as sitk

from .core import Geometry, check_geometry, consecutive_pairs
from .exceptions import AnnotationError, GeometryError, RegistrationError
from .io import from_sitk, reference_image, save_npz, to_sitk
from .options import BaseConfig
from .preprocess import INTENSITY, LABEL, PreprocessConfig, ProcessedTimepoint, extract_slices, preprocess_pair
from .validators import ChoiceValidator, IntegerValidator, RangeValidator, positive

logger = logging.getLogger(__name__)

TRANSFORM_FORMAT_VERSION = 1
SPLINE_ORDER = 3

#: Describes the coefficient array stored in transform files.
COEFFICIENT_LAYOUT = ('coefficients[i, j, k, c]: displacement in mm of control point (i, j, k), i along x, j along y, '
                      'k along z; c is the x, y, z component. float64, C order.')


@dataclasses.dataclass
class RegistrationConfig(BaseConfig):
    control_grid_points: int = 8
    pyramid_levels: int = 3
    smoothing_sigma: float = 1.0
    metric: str = 'mean_squares'
    optimizer: str = 'lbfgsb'
    max_iterations: int = 100
    convergence_tol: float = 1e-6
    max_corrections: int = 5
    threads: int = 1

    field_validators = {
        'control_grid_points': [IntegerValidator(), RangeValidator(SPLINE_ORDER + 1)],
        'pyramid_levels': [IntegerValidator(), RangeValidator(1)],
        'smoothing_sigma': [RangeValidator(0)],
        'metric': [ChoiceValidator(['mean_squares'])],
        'optimizer': [ChoiceValidator(['lbfgsb'])],
        'max_iterations': [IntegerValidator(), RangeValidator(1)],
        'convergence_tol': [positive()],
        'max_corrections': [IntegerValidator(), RangeValidator(1)],
        'threads': [IntegerValidator(), RangeValidator(1)],
    }

    @property
    def shrink_factors(self):
        return [2 ** level for level in reversed(range(self.pyramid_levels))]


class BSplineTransform(object):
    """
    Cubic BSpline displacement field defined by a control-point grid laid over the fixed (follow-up) domain.

    The transform maps a point ``x`` of the fixed grid to ``x + d(x)`` in the moving (reference) grid, so that
    ``warped(x) = moving(x + d(x))``.
    """

    def __init__(self, grid_shape, grid_spacing, grid_origin, coefficients, domain, diagnostics=None):
        self.grid_shape = tuple(int(n) for n in grid_shape)
        self.grid_spacing = tuple(float(s) for s in grid_spacing)
        self.grid_origin = tuple(float(o) for o in grid_origin)
        self.coefficients = np.array(coefficients, dtype=np.float64)
        self.domain = domain
        self.diagnostics = dict(diagnostics or {})
        if self.coefficients.shape != self.grid_shape + (3,):
            raise ValueError('Coefficients %r do not match a %r grid.' % (self.coefficients.shape, self.grid_shape))
        if not np.isfinite(self.coefficients).all():
            raise RegistrationError('Transform coefficients are not finite.')

    def __eq__(self, other):
        return (isinstance(other, BSplineTransform) and self.grid_shape == other.grid_shape and
                np.allclose(self.grid_spacing, other.grid_spacing) and
                np.allclose(self.grid_origin, other.grid_origin) and
                check_geometry(self.domain, other.domain) and
                np.array_equal(self.coefficients, other.coefficients))

    def __repr__(self):
        return 'BSplineTransform(grid=%r, max_displacement=%.3fmm)' % (self.grid_shape,
                                                                     np.abs(self.coefficients).max(initial=0))

    @classmethod
    def identity(cls, domain, control_grid_points=8):
        mesh = [control_grid_points - SPLINE_ORDER] * 3
        return cls.from_sitk(sitk.BSplineTransformInitializer(reference_image(domain), mesh, SPLINE_ORDER), domain)

    @classmethod
    def from_sitk(cls, transform, domain, diagnostics=None):
        images = transform.GetCoefficientImages()
        coefficients = np.stack([from_sitk(image) for image in images], axis=-1)
        first = images[0]
        return cls(first.GetSize(), first.GetSpacing(), first.GetOrigin(), coefficients, domain, diagnostics)

    def to_sitk(self):
        images = []
        for component in range(3):
            image = sitk.GetImageFromArray(np.ascontiguousarray(self.coefficients[..., component].transpose(2, 1, 0)))
            image.SetSpacing(self.grid_spacing)
            image.SetOrigin(self.grid_origin)
            images.append(image)
        return sitk.BSplineTransform(images, SPLINE_ORDER)

    @property
    def is_identity(self):
        return not self.coefficients.any()

    def displacement_field(self):
        """Dense displacement on the fixed grid, ``[x, y, z, component]``, in voxels."""
        field = sitk.TransformToDisplacementField(
            self.to_sitk(), sitk.sitkVectorFloat64, [int(n) for n in self.domain.shape], self.domain.origin,
            self.domain.spacing, [1, 0, 0, 0, 1, 0, 0, 0, 1])
        return from_sitk(field) / np.asarray(self.domain.spacing)

    def save(self, path):
        header = {
            'format_version': TRANSFORM_FORMAT_VERSION,
            'layout': COEFFICIENT_LAYOUT,
            'spline_order': SPLINE_ORDER,
            'grid_shape': list(self.grid_shape),
            'grid_spacing': list(self.grid_spacing),
            'grid_origin': list(self.grid_origin),
            'domain': self.domain.as_dict(),
            'diagnostics': self.diagnostics,
        }
        return save_npz(path, header=np.array(json.dumps(header, sort_keys=True)), coefficients=self.coefficients)

    @classmethod
    def load(cls, path):
        with np.load(str(path), allow_pickle=False) as archive:
            header = json.loads(str(archive['header']))
            coefficients = archive['coefficients']
        if header.get('format_version') != TRANSFORM_FORMAT_VERSION:
            raise RegistrationError('Unsupported transform format version %r.' % header.get('format_version'))
        return cls(header['grid_shape'], header['grid_spacing'], header['grid_origin'], coefficients,
                   Geometry.from_dict(header['domain']), header.get('diagnostics'))


def dice_overlap(a, b):
    """Dice overlap of two binary masks (1.0 when both are empty)."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def warp(vol, transform, kind=INTENSITY):
    """
    Resample ``vol`` into the fixed geometry of ``transform``.

    Intensities are interpolated trilinearly and labels by nearest neighbor; samples falling outside the volume
    are 0.
    """
    if kind not in (INTENSITY, LABEL):
        raise ValueError('Unknown warp kind %r.' % kind)
    if not check_geometry(vol, transform.domain):
        raise GeometryError('Volume %r is not on the transform domain %r.' % (vol.geometry, transform.domain))
    if kind == LABEL:
        interpolator, pixel_type = sitk.sitkNearestNeighbor, sitk.sitkUInt8
    else:
        interpolator, pixel_type = sitk.sitkLinear, sitk.sitkFloat64
    moving = to_sitk(vol, pixel_type)
    warped = sitk.Resample(moving, reference_image(transform.domain, pixel_type), transform.to_sitk(),
                           interpolator, 0.0, pixel_type)
    return vol.with_data(from_sitk(warped).astype(vol.array.dtype), geometry=transform.domain)


def _mask_image(mask):
    return to_sitk(mask, sitk.sitkFloat32)


def register_masks(m0, m1, cfg=None):
    """
    Estimate the BSpline transform aligning the reference lung mask ``m0`` to the follow-up lung mask ``m1``.

    The metric is mean squares between the (pyramid-smoothed) masks. When the optimized transform overlaps worse
    than no transform at all, the identity is returned instead and ``diagnostics['fallback']`` is set.
    """
    cfg = (cfg or RegistrationConfig()).validate()
    if not check_geometry(m0, m1):
        raise GeometryError('Lung masks %r and %r are not on the same grid.' % (m0.geometry, m1.geometry))
    for name, mask in (('reference', m0), ('follow-up', m1)):
        if not mask.array.any():
            raise AnnotationError('The %s lung mask is empty.' % name)

    sitk.ProcessObject.SetGlobalDefaultNumberOfThreads(cfg.threads)
    fixed = _mask_image(m1)
    moving = _mask_image(m0)
    initial = sitk.BSplineTransformInitializer(fixed, [cfg.control_grid_points - SPLINE_ORDER] * 3, SPLINE_ORDER)

    method = sitk.ImageRegistrationMethod()
    method.SetMetricAsMeanSquares()
    method.SetMetricSamplingStrategy(method.NONE)
    method.SetInterpolator(sitk.sitkLinear)
    method.SetOptimizerAsLBFGSB(gradientConvergenceTolerance=cfg.convergence_tol,
                                numberOfIterations=cfg.max_iterations,
                                maximumNumberOfCorrections=cfg.max_corrections,
                                maximumNumberOfFunctionEvaluations=10 * cfg.max_iterations)
    method.SetShrinkFactorsPerLevel(cfg.shrink_factors)
    # One voxel of smoothing at the resolution of each level.
    method.SetSmoothingSigmasPerLevel([cfg.smoothing_sigma * factor for factor in cfg.shrink_factors])
    method.SmoothingSigmasAreSpecifiedInPhysicalUnitsOff()
    method.SetInitialTransform(initial, inPlace=True)

    trace = []
    method.AddCommand(sitk.sitkIterationEvent,
                      lambda: trace.append((method.GetCurrentLevel(), method.GetMetricValue())))

    diagnostics = {'initial_metric': float(method.MetricEvaluate(fixed, moving))}
    method.Execute(fixed, moving)
    diagnostics.update({
        'final_metric': float(method.GetMetricValue()),
        'iterations': len(trace),
        'stop_condition': method.GetOptimizerStopConditionDescription(),
    })
    if not math.isfinite(diagnostics['final_metric']) or not np.isfinite(initial.GetParameters()).all():
        raise RegistrationError('Registration diverged.', diagnostics)

    domain = m1.geometry
    transform = BSplineTransform.from_sitk(initial, domain)
    dice_before = dice_overlap(m0.array, m1.array)
    dice_after = dice_overlap(warp(m0, transform, LABEL).array, m1.array)
    diagnostics.update({'dice_before': dice_before, 'dice_after': dice_after, 'fallback': False})
    if dice_after < dice_before:
        logger.warning('Registration lowered lung overlap (%.4f -> %.4f); using the identity transform.',
                       dice_before, dice_after)
        transform = BSplineTransform.identity(domain, cfg.control_grid_points)
        diagnostics.update({'dice_after': dice_before, 'fallback': True})
    transform.diagnostics = diagnostics
    logger.info('Registered lung masks: dice %.4f -> %.4f after %d iterations',
                dice_before, diagnostics['dice_after'], diagnostics['iterations'])
    return transform


class RegisteredPair(object):
    """
    A preprocessed longitudinal pair in follow-up space.

    ``x0_reg``/``y0_reg``/``m0_reg`` are the reference CT, pathology and lung mask warped by ``transform``;
    ``x1``/``y1``/``m1`` are the follow-up scan as preprocessed.
    """

    def __init__(self, x0_reg, x1, m0_reg, m1, transform, y0_reg=None, y1=None, patient_id='', timepoints=(0, 1),
                 acquisition_days=(0, 0)):
        self.x0_reg = x0_reg
        self.x1 = x1
        self.m0_reg = m0_reg
        self.m1 = m1
        self.y0_reg = y0_reg
        self.y1 = y1
        self.transform = transform
        self.patient_id = patient_id
        self.timepoints = tuple(timepoints)
        self.acquisition_days = tuple(acquisition_days)

    def __repr__(self):
        return 'RegisteredPair(%r, t%d->t%d)' % ((self.patient_id,) + self.timepoints)

    @property
    def pair_id(self):
        return '%s_t%d_t%d' % ((self.patient_id,) + self.timepoints)

    @property
    def geometry(self):
        return self.x1.geometry

    @property
    def has_ground_truth(self):
        return self.y0_reg is not None and self.y1 is not None

    def volume(self, timepoint):
        return self.x0_reg if timepoint == 0 else self.x1

    def labels(self, timepoint):
        return self.y0_reg if timepoint == 0 else self.y1

    def slice_stack(self, timepoint, view, cfg=None):
        if cfg is None:
            cfg = PreprocessConfig(target_size=self.geometry.shape[0])
        return extract_slices(self.volume(timepoint), view, cfg)

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        ProcessedTimepoint(self.timepoints[0], self.acquisition_days[0], self.x0_reg, self.m0_reg, self.y0_reg).save(
            os.path.join(directory, 'reference_reg'))
        ProcessedTimepoint(self.timepoints[1], self.acquisition_days[1], self.x1, self.m1, self.y1).save(
            os.path.join(directory, 'followup'))
        self.transform.save(os.path.join(directory, 'transform.npz'))
        with open(os.path.join(directory, 'pair.json'), 'w', encoding='utf-8') as fp:
            json.dump({'patient_id': self.patient_id}, fp, sort_keys=True)
        return directory

    @classmethod
    def load(cls, directory):
        return cls.from_prefixes(os.path.join(directory, 'reference_reg'), os.path.join(directory, 'followup'))

    @classmethod
    def from_prefixes(cls, reference_prefix, followup_prefix):
        reference = ProcessedTimepoint.load(reference_prefix)
        followup = ProcessedTimepoint.load(followup_prefix)
        directory = os.path.dirname(followup_prefix)
        transform_path = os.path.join(directory, 'transform.npz')
        if os.path.exists(transform_path):
            transform = BSplineTransform.load(transform_path)
        else:
            transform = BSplineTransform.identity(followup.geometry)
        patient_id = ''
        info_path = os.path.join(directory, 'pair.json')
        if os.path.exists(info_path):
            with open(info_path, encoding='utf-8') as fp:
                patient_id = json.load(fp).get('patient_id', '')
        return cls(reference.ct, followup.ct, reference.lung_mask, followup.lung_mask, transform,
                   reference.pathology, followup.pathology, patient_id,
                   (reference.timepoint_index, followup.timepoint_index),
                   (reference.acquisition_day, followup.acquisition_day))


def register_pair(reference, followup, cfg=None, patient_id=''):
    """
    Register two preprocessed timepoints and warp the reference scan and labels into follow-up space.

    The transform depends on the lung masks alone.
    """
    transform = register_masks(reference.lung_mask, followup.lung_mask, cfg)
    y0_reg = warp(reference.pathology, transform, LABEL) if reference.pathology is not None else None
    return RegisteredPair(
        warp(reference.ct, transform, INTENSITY),
        followup.ct,
        warp(reference.lung_mask, transform, LABEL),
        followup.lung_mask,
        transform,
        y0_reg,
        followup.pathology,
        patient_id,
        (reference.timepoint_index, followup.timepoint_index),
        (reference.acquisition_day, followup.acquisition_day),
    )


def register_study(study, preprocess_cfg=None, cfg=None):
    """Preprocess and register every consecutive pair of scans of ``study``."""
    pairs = []
    for reference, followup in consecutive_pairs(study):
        processed_ref, processed_fup = preprocess_pair(reference, followup, preprocess_cfg)
        pairs.append(register_pair(processed_ref, processed_fup, cfg, study.patient_id))
    return pairs
