"""
Command line entry point: ``lungtrack <command> [options]``.

Every stage of the experiment has its own command; ``run`` chains them with caching. Exit status is 0 on success,
2 for configuration errors and 3 when processing fails.
"""
import argparse
import logging
import os
import sys

import nibabel
import numpy
import scipy
import SimpleITK
import torch
import yaml
from django.core.exceptions import ImproperlyConfigured, ValidationError

from . import __version__
from .classes import CONSOLIDATION
from .evaluation import compare_variants, comparison_table, evaluate_pairs, plot_slice_dice, slice_dice
from .exceptions import LungtrackError, StageError
from .inference import segment_pair
from .io import MANIFEST_FORMAT_VERSION, load_labels, load_manifest, load_volume, save_labels, save_yaml
from .log import configure_logging
from .models import CHECKPOINT_FORMAT_VERSION, load_checkpoint
from .phantom import generate_dataset
from .pipeline import (
    DESK, DEVICE_ENV, INDEX, PRESETS, load_config, load_pairs, run_pipeline, run_preprocess, run_register, run_train,
)
from .preprocess import ProcessedTimepoint
from .progression import analyze_progression, render_progression_overlay
from .registration import TRANSFORM_FORMAT_VERSION, RegisteredPair, register_pair, register_study

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FAILURE = 3


def version_info(preset=None):
    """Package, file format and dependency versions together with the resolved preset name."""
    return {
        'lungtrack': __version__,
        'preset': preset or DESK,
        'formats': {
            'checkpoint': CHECKPOINT_FORMAT_VERSION,
            'transform': TRANSFORM_FORMAT_VERSION,
            'manifest': MANIFEST_FORMAT_VERSION,
        },
        'dependencies': {
            'nibabel': nibabel.__version__,
            'numpy': numpy.__version__,
            'scipy': scipy.__version__,
            'SimpleITK': SimpleITK.Version_VersionString(),
            'torch': str(torch.__version__),
        },
    }


def _prefixes(value):
    parts = [part.strip() for part in value.split(',')]
    if len(parts) != 2 or not all(parts):
        raise ImproperlyConfigured('Expected "<reference prefix>,<follow-up prefix>", got %r.' % value)
    return parts


def _load_pair(value, cfg):
    """A registered pair directory, or two preprocessed prefixes that are registered on the fly."""
    if os.path.isdir(value):
        return RegisteredPair.load(value)
    reference, followup = (ProcessedTimepoint.load(prefix) for prefix in _prefixes(value))
    return register_pair(reference, followup, cfg.registration)


def _test_pairs(source, cfg):
    """Test pairs from a registered pairs directory or from a study manifest (registered on the fly)."""
    if os.path.isdir(source) and os.path.exists(os.path.join(source, INDEX)):
        return load_pairs(source, 'test')
    pairs = []
    for study in load_manifest(source).iter_studies('test'):
        pairs.extend(register_study(study, cfg.preprocess, cfg.registration))
    return pairs


def cmd_version(args, cfg):
    sys.stdout.write(yaml.safe_dump(version_info(cfg.preset), sort_keys=True, default_flow_style=False))


def cmd_phantom(args, cfg):
    generate_dataset(cfg.phantom, args.out)


def cmd_preprocess(args, cfg):
    run_preprocess(args.manifest, args.out, cfg.preprocess)


def cmd_register(args, cfg):
    if args.pair:
        reference, followup = (ProcessedTimepoint.load(prefix) for prefix in _prefixes(args.pair))
        register_pair(reference, followup, cfg.registration, args.patient_id).save(args.out)
    elif args.manifest:
        run_register(args.manifest, args.out, cfg.registration)
    else:
        raise ImproperlyConfigured('register needs --pair or --manifest.')


def cmd_train(args, cfg):
    run_train(args.manifest, args.out, cfg.model, cfg.train, cfg.preprocess, args.variant or cfg.variants)


def cmd_infer(args, cfg):
    model = load_checkpoint(args.checkpoint, os.environ.get(DEVICE_ENV))
    pair = _load_pair(args.pair, cfg)
    y0, y1, probabilities = segment_pair(model, pair, cfg.preprocess, return_probabilities=True)
    os.makedirs(args.out, exist_ok=True)
    save_labels(y0, os.path.join(args.out, pair.pair_id + '_y0_reg.nii'))
    save_labels(y1, os.path.join(args.out, pair.pair_id + '_y1.nii'))
    if args.probabilities:
        for timepoint, (fused, _) in probabilities.items():
            fused.save(os.path.join(args.out, '%s_t%d_probabilities.nii' % (pair.pair_id, timepoint)))


def cmd_progress(args, cfg):
    y0, y1 = load_labels(args.seg0), load_labels(args.seg1)
    os.makedirs(args.out, exist_ok=True)
    pmap, report = analyze_progression(y0, y1)
    pmap.save(os.path.join(args.out, 'progression.nii'))
    report.save(os.path.join(args.out, 'report.yaml'))
    with open(os.path.join(args.out, 'report.txt'), 'w', encoding='utf-8') as fp:
        fp.write(report.table() + '\n')
    if args.ct:
        render_progression_overlay(pmap, load_volume(args.ct), os.path.join(args.out, 'overlay.png'))
    sys.stdout.write(report.table() + '\n')


def cmd_evaluate(args, cfg):
    pairs = _test_pairs(args.manifest, cfg)
    os.makedirs(args.out, exist_ok=True)
    results, predictions = {}, {}
    for checkpoint in args.checkpoint:
        model = load_checkpoint(checkpoint, os.environ.get(DEVICE_ENV))
        variant = model.config.variant
        cache = predictions.setdefault(variant, {})

        def segmenter(pair, model=model, cache=cache):
            cache[pair.pair_id] = segment_pair(model, pair, cfg.preprocess)
            return cache[pair.pair_id]

        results[variant] = evaluate_pairs(segmenter, pairs, variant)
        results[variant].save(os.path.join(args.out, variant + '.yaml'))
        sys.stdout.write(results[variant].table() + '\n')
    if len(results) == 2:
        comparison = compare_variants(*(results[name] for name in sorted(results, reverse=True)))
        save_yaml(comparison, os.path.join(args.out, 'comparison.yaml'))
        sys.stdout.write(comparison_table(comparison) + '\n')
    if args.slice_dice:
        for pair in pairs:
            if not pair.has_ground_truth:
                continue
            curves = {variant: slice_dice(cache[pair.pair_id][1], pair.y1, CONSOLIDATION)
                      for variant, cache in predictions.items() if pair.pair_id in cache}
            plot_slice_dice(curves, os.path.join(args.out, pair.pair_id + '_slice_dice.png'),
                            title='%s consolidation Dice' % pair.pair_id)


def cmd_run(args, cfg):
    result = run_pipeline(cfg)
    for variant, summary in sorted(result.results.items()):
        cons = summary['aggregates'].get('dice_CONS', {})
        logger.info('%s: mean CONS Dice %s', variant, cons.get('mean'))


def _add_common(parser):
    parser.add_argument('--config', help='YAML configuration file')
    parser.add_argument('--seed', type=int, help='global seed; stage seeds are derived from it')
    parser.add_argument('--preset', choices=sorted(PRESETS), help='default settings to start from')
    parser.add_argument('--out', help='output directory')


def build_parser():
    parser = argparse.ArgumentParser(prog='lungtrack', description='Longitudinal lung CT segmentation and '
                                                                   'consolidation progression.')
    parser.add_argument('-v', '--verbose', action='count', default=0)
    parser.add_argument('--log-json', help='append structured training and stage records to this JSON-lines file')
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True

    def command(name, handler, help_text, needs_out=True):
        sub = commands.add_parser(name, help=help_text)
        _add_common(sub)
        sub.set_defaults(handler=handler, needs_out=needs_out)
        return sub

    command('version', cmd_version, 'print version and file format information', needs_out=False)
    command('phantom', cmd_phantom, 'generate a synthetic longitudinal dataset')

    sub = command('preprocess', cmd_preprocess, 'crop, normalize and resize every consecutive pair of a manifest')
    sub.add_argument('--manifest', required=True, help='study manifest (YAML)')

    sub = command('register', cmd_register, 'register preprocessed pairs into follow-up space')
    sub.add_argument('--pair', help='"<reference prefix>,<follow-up prefix>" of preprocessed timepoints')
    sub.add_argument('--patient-id', default='', help='patient id recorded with a single pair')
    sub.add_argument('--manifest', help='preprocessed pairs directory')

    sub = command('train', cmd_train, 'train segmentation models on registered pairs')
    sub.add_argument('--manifest', required=True, help='registered pairs directory')
    sub.add_argument('--variant', action='append', choices=('static', 'longitudinal'),
                     help='variant to train; repeat for both (default: the configured variants)')

    sub = command('infer', cmd_infer, 'segment both timepoints of one pair')
    sub.add_argument('--checkpoint', required=True)
    sub.add_argument('--pair', required=True, help='registered pair directory or "<reference>,<follow-up>" prefixes')
    sub.add_argument('--probabilities', action='store_true', help='also write the fused probability volumes')

    sub = command('progress', cmd_progress, 'progression map and report of two registered segmentations')
    sub.add_argument('--seg0', required=True, help='registered reference segmentation')
    sub.add_argument('--seg1', required=True, help='follow-up segmentation')
    sub.add_argument('--ct', help='follow-up CT to draw the overlay on')

    sub = command('evaluate', cmd_evaluate, 'score checkpoints on the test pairs')
    sub.add_argument('--checkpoint', required=True, action='append', help='repeat to compare two variants')
    sub.add_argument('--manifest', required=True, help='registered pairs directory or study manifest')
    sub.add_argument('--slice-dice', action='store_true', help='plot per-slice consolidation Dice curves')

    command('run', cmd_run, 'run every stage, reusing cached stage outputs', needs_out=False)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING
    configure_logging(level, args.log_json)
    try:
        cfg = load_config(args.config, args.preset, args.seed, args.out if args.command == 'run' else None)
        if args.needs_out and not args.out:
            raise ImproperlyConfigured('%s needs --out.' % args.command)
        try:
            args.handler(args, cfg)
        except (OSError, ValueError) as e:
            raise StageError(args.command, e) from e
    except (ImproperlyConfigured, ValidationError) as e:
        logger.error('Configuration error: %s', e)
        sys.stderr.write('lungtrack: configuration error: %s\n' % e)
        return EXIT_CONFIG
    except LungtrackError as e:
        logger.error('Failed: %s', e)
        sys.stderr.write('lungtrack: %s\n' % e)
        return EXIT_FAILURE
    return EXIT_OK
