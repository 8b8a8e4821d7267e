"""
Segmentation and progression scores on registered pairs, and the static against longitudinal comparison.

Reference-timepoint scores are computed in follow-up space against the warped ground truth.
"""
import logging

import numpy as np

from .classes import CLASS_CODES, FOREGROUND_CLASSES
from .core import LabelVolume, check_geometry
from .exceptions import GeometryError
from .inference import segment_pair
from .io import save_yaml
from .log import RECORD_ATTR
from .plotting import pyplot, save_figure
from .preprocess import VIEW_AXES
from .progression import analyze_progression
from .registration import register_study

logger = logging.getLogger(__name__)

CODES = dict(CLASS_CODES)
PROGRESSION_TERMS = ('progressed_ml', 'recovered_ml', 'net_change_ml')


def _labels(item):
    return item.labels if isinstance(item, LabelVolume) else np.asarray(item)


def dice(pred, gt, cls):
    """``2|P & G| / (|P| + |G|)`` for the voxels of class ``cls``; 1.0 when neither has the class."""
    if isinstance(pred, LabelVolume) and isinstance(gt, LabelVolume) and not check_geometry(pred, gt):
        raise GeometryError('Prediction %r and ground truth %r are not on the same grid.' % (pred.geometry,
                                                                                           gt.geometry))
    p, g = _labels(pred) == cls, _labels(gt) == cls
    if p.shape != g.shape:
        raise GeometryError('Prediction %r and ground truth %r differ in shape.' % (p.shape, g.shape))
    total = int(np.count_nonzero(p)) + int(np.count_nonzero(g))
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(p & g)) / total


def class_dice(pred, gt, classes=FOREGROUND_CLASSES):
    return {CODES[cls]: dice(pred, gt, cls) for cls in classes}


class EvalResult(object):
    """
    Per-volume Dice records and per-pair progression errors of one model variant.

    ``volumes`` holds ``{'pair_id', 'timepoint', 'dice': {code: value}}`` and ``pairs`` holds the predicted and
    ground-truth progression volumes with their absolute errors.
    """

    def __init__(self, variant, volumes=None, pairs=None):
        self.variant = variant
        self.volumes = list(volumes or [])
        self.pairs = list(pairs or [])

    def __repr__(self):
        return 'EvalResult(%s, %d volumes)' % (self.variant, len(self.volumes))

    def class_codes(self):
        return [CODES[cls] for cls in FOREGROUND_CLASSES]

    def dice_values(self, code):
        return np.array([record['dice'][code] for record in self.volumes], dtype=np.float64)

    def aggregates(self):
        """Mean and population standard deviation of every class Dice and progression error."""
        summary = {}
        for code in self.class_codes():
            values = self.dice_values(code)
            summary['dice_%s' % code] = {
                'mean': float(values.mean()) if len(values) else None,
                'std': float(values.std()) if len(values) else None,
            }
        for term in PROGRESSION_TERMS:
            errors = np.array([record['abs_error'][term] for record in self.pairs], dtype=np.float64)
            summary['abs_error_%s' % term] = {
                'mean': float(errors.mean()) if len(errors) else None,
                'std': float(errors.std()) if len(errors) else None,
            }
        return summary

    def as_dict(self):
        return {'variant': self.variant, 'volumes': self.volumes, 'pairs': self.pairs,
                'aggregates': self.aggregates()}

    def table(self):
        lines = ['%-8s %10s %10s' % (self.variant, 'mean', 'std')]
        for name, values in sorted(self.aggregates().items()):
            if values['mean'] is None:
                lines.append('%-28s %10s' % (name, 'n/a'))
            else:
                lines.append('%-28s %10.4f %10.4f' % (name, values['mean'], values['std']))
        return '\n'.join(lines)

    def save(self, path):
        return save_yaml(self.as_dict(), path)


def evaluate_pairs(segmenter, pairs, variant=''):
    """
    Score ``segmenter`` (a callable mapping a registered pair to ``(y0_reg, y1)`` predictions) on ``pairs``.

    Pairs without ground truth are skipped with a warning. Records are ordered by pair id.
    """
    result = EvalResult(variant)
    for pair in sorted(pairs, key=lambda p: p.pair_id):
        if not pair.has_ground_truth:
            logger.warning('Skipping %s: no ground truth to evaluate against.', pair.pair_id)
            continue
        pred0, pred1 = segmenter(pair)
        for timepoint, pred, gt in ((pair.timepoints[0], pred0, pair.y0_reg), (pair.timepoints[1], pred1, pair.y1)):
            record = {'pair_id': pair.pair_id, 'timepoint': timepoint, 'dice': class_dice(pred, gt)}
            result.volumes.append(record)
        _, predicted = analyze_progression(pred0, pred1, pair.pair_id, pair.timepoints)
        _, truth = analyze_progression(pair.y0_reg, pair.y1, pair.pair_id, pair.timepoints)
        predicted, truth = predicted.as_dict(), truth.as_dict()
        result.pairs.append({
            'pair_id': pair.pair_id,
            'predicted': {term: predicted[term] for term in PROGRESSION_TERMS},
            'truth': {term: truth[term] for term in PROGRESSION_TERMS},
            'abs_error': {term: abs(predicted[term] - truth[term]) for term in PROGRESSION_TERMS},
        })
        logger.info('Evaluated %s', pair.pair_id, extra={RECORD_ATTR: dict(result.pairs[-1], event='evaluation',
                                                                          variant=variant)})
    return result


def evaluate_model(model, manifest, split='test', preprocess_cfg=None, registration_cfg=None, pairs=None):
    """
    Segment every consecutive pair of the ``split`` studies of ``manifest`` and score the predictions.

    Already registered ``pairs`` may be passed to skip preprocessing and registration.
    """
    if pairs is None:
        pairs = []
        for study in manifest.iter_studies(split):
            if any(tp.pathology is None for tp in study.timepoints):
                logger.warning('Skipping study %s: missing pathology labels.', study.patient_id)
                continue
            pairs.extend(register_study(study, preprocess_cfg, registration_cfg))
    return evaluate_pairs(lambda pair: segment_pair(model, pair, preprocess_cfg), pairs, model.config.variant)


def compare_variants(static, longitudinal):
    """
    Paired comparison of two evaluations of the same pairs.

    Returns a mapping with the per-class mean Dice of both variants, their difference and the per-volume deltas.
    """
    by_key = {(r['pair_id'], r['timepoint']): r for r in static.volumes}
    paired = [(by_key[(r['pair_id'], r['timepoint'])], r) for r in longitudinal.volumes
              if (r['pair_id'], r['timepoint']) in by_key]
    classes = {}
    for code in static.class_codes():
        s = np.array([a['dice'][code] for a, _ in paired], dtype=np.float64)
        lo = np.array([b['dice'][code] for _, b in paired], dtype=np.float64)
        classes[code] = {
            static.variant: float(s.mean()) if len(s) else None,
            longitudinal.variant: float(lo.mean()) if len(lo) else None,
            'difference': float((lo - s).mean()) if len(s) else None,
        }
    deltas = [{'pair_id': b['pair_id'], 'timepoint': b['timepoint'],
               'dice_difference': {code: b['dice'][code] - a['dice'][code] for code in static.class_codes()}}
              for a, b in paired]
    return {'classes': classes, 'volumes': deltas}


def comparison_table(comparison, static='static', longitudinal='longitudinal'):
    lines = ['%-8s %12s %12s %12s' % ('class', static, longitudinal, 'difference')]
    for code, row in comparison['classes'].items():
        if row['difference'] is None:
            lines.append('%-8s %12s' % (code, 'n/a'))
        else:
            lines.append('%-8s %12.4f %12.4f %+12.4f' % (code, row[static], row[longitudinal], row['difference']))
    return '\n'.join(lines)


def slice_dice(pred, gt, cls, view='axial'):
    """Dice of class ``cls`` for every slice along ``view``."""
    axis = VIEW_AXES[view]
    p, g = _labels(pred), _labels(gt)
    return np.array([dice(np.take(p, i, axis=axis), np.take(g, i, axis=axis), cls) for i in range(p.shape[axis])])


def plot_slice_dice(curves, path, view='axial', title=None):
    """Save a PNG of per-slice Dice curves; ``curves`` maps a legend label to a :func:`slice_dice` array."""
    plt = pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5), constrained_layout=True)
    for label, values in sorted(curves.items()):
        ax.plot(np.arange(len(values)), values, label=label)
    ax.set_xlabel('%s slice' % view)
    ax.set_ylabel('Dice')
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    if title:
        ax.set_title(title)
    ax.legend(loc='best', fontsize=8)
    return save_figure(fig, path)
