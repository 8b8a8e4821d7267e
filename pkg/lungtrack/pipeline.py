"""
End-to-end experiment: phantom generation, preprocessing, registration, training, inference, progression and
evaluation, each stage writing into its own directory below the output root.

A stage is skipped when its directory still holds exactly the files recorded at its last run and its fingerprint
(hash of its settings and of its inputs) is unchanged. Once a stage runs, every later stage runs too. A failing
stage leaves its partial output next to a ``FAILED`` marker.
"""
import dataclasses
import logging
import os
import shutil

from django.core.exceptions import ImproperlyConfigured, ValidationError

from .checksums import derive_seed, file_sha256, fingerprint, tree_sha256
from .classes import CONSOLIDATION
from .core import consecutive_pairs
from .evaluation import compare_variants, comparison_table, evaluate_pairs, plot_slice_dice, slice_dice
from .exceptions import StageError, StudyError
from .inference import segment_pair
from .io import load_labels, load_manifest, load_yaml, save_labels, save_yaml
from .models import (
    LONGITUDINAL, STATIC, ModelConfig, build_model, checkpoint_sha256, load_checkpoint, save_checkpoint, select_device,
)
from .options import BaseConfig
from .phantom import PhantomConfig, generate_dataset
from .preprocess import PreprocessConfig, ProcessedTimepoint, preprocess_pair
from .progression import analyze_progression, render_progression_overlay
from .registration import RegisteredPair, RegistrationConfig, register_pair
from .trainer import TrainConfig, train
from .validators import ChoiceValidator, IntegerValidator

logger = logging.getLogger(__name__)

DESK = 'desk'
PAPER_SCALE = 'paper-scale'

STAGES = ('phantom', 'preprocess', 'register', 'train', 'infer', 'progress', 'evaluate')
FAILED = 'FAILED'
INDEX = 'index.yaml'
DEVICE_ENV = 'LUNGTRACK_DEVICE'
HASHERS = {'.pt': checkpoint_sha256}

#: Settings every preset resolves, per nested configuration.
PRESETS = {
    DESK: {
        'preprocess': {'target_size': 64},
        'phantom': {'grid_size': 64, 'n_studies': 14, 'split_ratio': (8, 2, 4)},
        'train': {'batch_size': 8, 'max_epochs': 100, 'early_stop_patience': 5},
    },
    PAPER_SCALE: {
        'preprocess': {'target_size': 300},
        'phantom': {'grid_size': 128, 'n_studies': 38, 'split_ratio': (12, 4, 22), 'deformation_amplitude': 4.0},
        'train': {'batch_size': 8, 'max_epochs': 100, 'early_stop_patience': 5},
    },
}

NESTED = {
    'preprocess': PreprocessConfig,
    'registration': RegistrationConfig,
    'model': ModelConfig,
    'train': TrainConfig,
    'phantom': PhantomConfig,
}


@dataclasses.dataclass
class PipelineConfig(BaseConfig):
    preset: str = DESK
    seed: int = 0
    out_dir: str = 'lungtrack-run'
    manifest: str = None
    variants: tuple = (STATIC, LONGITUDINAL)
    render_overlays: bool = True
    slice_dice_plots: bool = False
    save_probabilities: bool = False
    preprocess: PreprocessConfig = None
    registration: RegistrationConfig = None
    model: ModelConfig = None
    train: TrainConfig = None
    phantom: PhantomConfig = None

    field_validators = {
        'preset': [ChoiceValidator(PRESETS)],
        'seed': [IntegerValidator()],
        'variants': [ChoiceValidator([STATIC, LONGITUDINAL], many=True)],
    }

    def __post_init__(self):
        for name, config_class in NESTED.items():
            if getattr(self, name) is None:
                setattr(self, name, config_class())

    def clean(self):
        errors = {}
        for name in NESTED:
            try:
                getattr(self, name).validate()
            except ImproperlyConfigured as e:
                errors[name] = str(e)
        if not self.variants:
            errors['variants'] = 'At least one model variant is needed.'
        return errors

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        nested = {name: NESTED[name].from_dict(data.pop(name)) for name in list(data) if name in NESTED}
        config = super().from_dict(data)
        for name, value in nested.items():
            setattr(config, name, value)
        return config

    def stage_settings(self, stage):
        """The part of the configuration a stage depends on."""
        settings = {
            'phantom': {'phantom': self.phantom.as_dict(), 'manifest': self.manifest},
            'preprocess': {'preprocess': self.preprocess.as_dict()},
            'register': {'registration': self.registration.as_dict()},
            'train': {'model': self.model.as_dict(), 'train': self.train.as_dict(), 'variants': list(self.variants)},
            'infer': {'preprocess': self.preprocess.as_dict(), 'save_probabilities': self.save_probabilities},
            'progress': {'render_overlays': self.render_overlays},
            'evaluate': {'slice_dice_plots': self.slice_dice_plots},
        }
        return settings[stage]


def _merge(base, overrides):
    merged = dict(base)
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def resolve_config(data=None, preset=None, seed=None, out_dir=None):
    """
    Build a validated :class:`PipelineConfig` from a mapping (usually a YAML file) on top of a preset.

    Command-line values win over the mapping. The seeds of the nested configurations are derived from the global
    seed.
    """
    data = dict(data or {})
    if preset is not None:
        data['preset'] = preset
    if seed is not None:
        data['seed'] = seed
    if out_dir is not None:
        data['out_dir'] = out_dir
    name = data.get('preset', DESK)
    if name not in PRESETS:
        raise ImproperlyConfigured('Unknown preset %r; choose one of %s.' % (name, ', '.join(sorted(PRESETS))))
    config = PipelineConfig.from_dict(_merge(PRESETS[name], data))
    config.phantom = config.phantom.replace(seed=derive_seed(config.seed, 'phantom'))
    config.model = config.model.replace(seed=derive_seed(config.seed, 'model'))
    config.train = config.train.replace(seed=derive_seed(config.seed, 'train'))
    return config.validate()


def load_config(path=None, preset=None, seed=None, out_dir=None):
    if path and not os.path.isfile(path):
        raise ImproperlyConfigured('The configuration file %s does not exist.' % path)
    data = load_yaml(path) if path else {}
    if data is not None and not isinstance(data, dict):
        raise ImproperlyConfigured('The configuration file %s must hold a mapping.' % path)
    return resolve_config(data, preset, seed, out_dir)


def pair_id(patient_id, reference, followup):
    return '%s_t%d_t%d' % (patient_id, reference.timepoint_index, followup.timepoint_index)


def run_preprocess(manifest_path, out_dir, cfg=None):
    """Preprocess every consecutive pair of every study of a manifest; writes ``index.yaml`` listing the pairs."""
    manifest = load_manifest(manifest_path)
    entries = []
    for patient_id in manifest.patient_ids():
        study = manifest.load_study(patient_id)
        try:
            pairs = consecutive_pairs(study)
        except StudyError as e:
            logger.warning('Skipping study %s: %s', patient_id, e)
            continue
        for reference, followup in pairs:
            name = pair_id(patient_id, reference, followup)
            processed_ref, processed_fup = preprocess_pair(reference, followup, cfg)
            os.makedirs(os.path.join(out_dir, name), exist_ok=True)
            processed_ref.save(os.path.join(out_dir, name, 'reference'))
            processed_fup.save(os.path.join(out_dir, name, 'followup'))
            entries.append({'pair_id': name, 'patient_id': patient_id,
                            'split': manifest.entry(patient_id).get('split', 'test')})
    save_yaml({'pairs': entries}, os.path.join(out_dir, INDEX))
    logger.info('Preprocessed %d pairs into %s', len(entries), out_dir)
    return entries


def run_register(preprocessed_dir, out_dir, cfg=None):
    """Register every preprocessed pair listed in ``preprocessed_dir`` and save it in follow-up space."""
    entries = load_yaml(os.path.join(preprocessed_dir, INDEX))['pairs']
    for entry in entries:
        reference = ProcessedTimepoint.load(os.path.join(preprocessed_dir, entry['pair_id'], 'reference'))
        followup = ProcessedTimepoint.load(os.path.join(preprocessed_dir, entry['pair_id'], 'followup'))
        pair = register_pair(reference, followup, cfg, entry['patient_id'])
        pair.save(os.path.join(out_dir, entry['pair_id']))
    save_yaml({'pairs': entries}, os.path.join(out_dir, INDEX))
    logger.info('Registered %d pairs into %s', len(entries), out_dir)
    return entries


def load_pairs(pairs_dir, split=None):
    """Registered pairs saved by :func:`run_register`, optionally restricted to one split."""
    entries = load_yaml(os.path.join(pairs_dir, INDEX))['pairs']
    return [RegisteredPair.load(os.path.join(pairs_dir, entry['pair_id'])) for entry in entries
            if split is None or entry['split'] == split]


def run_train(pairs_dir, out_dir, model_cfg=None, train_cfg=None, preprocess_cfg=None, variants=(LONGITUDINAL,)):
    """Train one model per variant on the ``train`` pairs, validating on the ``val`` pairs."""
    model_cfg = model_cfg or ModelConfig()
    train_pairs, val_pairs = load_pairs(pairs_dir, 'train'), load_pairs(pairs_dir, 'val')
    device = select_device(os.environ.get(DEVICE_ENV))
    histories = {}
    for variant in variants:
        model = build_model(model_cfg.replace(variant=variant, in_channels=None)).to(device)
        model, history = train(model, train_pairs, val_pairs, train_cfg, out_dir=out_dir,
                               preprocess_cfg=preprocess_cfg)
        save_checkpoint(model, os.path.join(out_dir, '%s.pt' % variant))
        history.save(os.path.join(out_dir, '%s_history.yaml' % variant), wall_time=False)
        histories[variant] = history
    return histories


def _prediction_paths(directory, name):
    return os.path.join(directory, name + '_y0_reg.nii'), os.path.join(directory, name + '_y1.nii')


def run_infer(checkpoint, pairs, out_dir, preprocess_cfg=None, save_probabilities=False):
    """Segment both timepoints of every pair with the model in ``checkpoint``."""
    model = load_checkpoint(checkpoint, os.environ.get(DEVICE_ENV))
    os.makedirs(out_dir, exist_ok=True)
    for pair in pairs:
        y0, y1, probabilities = segment_pair(model, pair, preprocess_cfg, return_probabilities=True)
        path0, path1 = _prediction_paths(out_dir, pair.pair_id)
        save_labels(y0, path0)
        save_labels(y1, path1)
        if save_probabilities:
            for timepoint, (fused, _) in probabilities.items():
                fused.save(os.path.join(out_dir, '%s_t%d_probabilities.nii' % (pair.pair_id, timepoint)))
    return model


def load_predictions(directory, pair):
    path0, path1 = _prediction_paths(directory, pair.pair_id)
    return load_labels(path0), load_labels(path1)


def run_progress(predictions_dir, pairs, out_dir, render_overlays=True):
    """Progression maps, reports and overlays of the predicted labels of every pair."""
    os.makedirs(out_dir, exist_ok=True)
    reports = []
    for pair in pairs:
        y0, y1 = load_predictions(predictions_dir, pair)
        pmap, report = analyze_progression(y0, y1, pair.pair_id, pair.timepoints)
        pmap.save(os.path.join(out_dir, pair.pair_id + '_progression.nii'))
        report.save(os.path.join(out_dir, pair.pair_id + '_report.yaml'))
        with open(os.path.join(out_dir, pair.pair_id + '_report.txt'), 'w', encoding='utf-8') as fp:
            fp.write(report.table() + '\n')
        if render_overlays:
            render_progression_overlay(pmap, pair.x1, os.path.join(out_dir, pair.pair_id + '_overlay.png'))
        reports.append(report)
    return reports


def run_evaluate(predictions, pairs, out_dir, slice_dice_plots=False):
    """
    Score the saved predictions of every variant; ``predictions`` maps a variant to its prediction directory.

    With two variants a comparison table is written as well.
    """
    os.makedirs(out_dir, exist_ok=True)
    results = {}
    for variant, directory in sorted(predictions.items()):
        result = evaluate_pairs(lambda pair, directory=directory: load_predictions(directory, pair), pairs, variant)
        result.save(os.path.join(out_dir, variant + '.yaml'))
        with open(os.path.join(out_dir, variant + '.txt'), 'w', encoding='utf-8') as fp:
            fp.write(result.table() + '\n')
        results[variant] = result
    if STATIC in results and LONGITUDINAL in results:
        comparison = compare_variants(results[STATIC], results[LONGITUDINAL])
        save_yaml(comparison, os.path.join(out_dir, 'comparison.yaml'))
        with open(os.path.join(out_dir, 'comparison.txt'), 'w', encoding='utf-8') as fp:
            fp.write(comparison_table(comparison) + '\n')
    if slice_dice_plots:
        for pair in pairs:
            if not pair.has_ground_truth:
                continue
            curves = {variant: slice_dice(load_predictions(directory, pair)[1], pair.y1, CONSOLIDATION)
                      for variant, directory in sorted(predictions.items())}
            plot_slice_dice(curves, os.path.join(out_dir, pair.pair_id + '_slice_dice.png'),
                            title='%s consolidation Dice' % pair.pair_id)
    return results


class PipelineResult(object):
    def __init__(self, out_dir, ran=(), skipped=(), results=None, status=0):
        self.out_dir = out_dir
        self.ran = list(ran)
        self.skipped = list(skipped)
        self.results = dict(results or {})
        self.status = status

    def __repr__(self):
        return 'PipelineResult(%s, ran=%r, skipped=%r)' % (self.out_dir, self.ran, self.skipped)


class Pipeline(object):
    """Runs the stages of one :class:`PipelineConfig` with fingerprint caching."""

    def __init__(self, cfg):
        self.cfg = cfg.validate()
        self.root = cfg.out_dir
        self.hashes = {}
        self.results = {}

    def stage_dir(self, stage):
        return os.path.join(self.root, stage)

    def record_path(self, stage):
        return os.path.join(self.root, 'stages', stage + '.yaml')

    def _inputs(self, stage):
        index = STAGES.index(stage)
        return {name: self.hashes[name] for name in STAGES[:index] if name in self.hashes}

    def _cached(self, stage, stage_fingerprint):
        path = self.record_path(stage)
        directory = self.stage_dir(stage)
        if not os.path.exists(path) or not os.path.isdir(directory):
            return None
        record = load_yaml(path) or {}
        if record.get('fingerprint') != stage_fingerprint:
            return None
        if os.path.exists(os.path.join(directory, FAILED)):
            return None
        outputs = tree_sha256(directory, hashers=HASHERS)
        if outputs != record.get('outputs'):
            logger.info('Cached output of stage %s changed on disk', stage)
            return None
        return outputs

    def run_stage(self, stage, action, force=False):
        """Run ``action(directory)`` for ``stage`` unless its cached output is still valid; True when it ran."""
        stage_fingerprint = fingerprint(stage, self.cfg.stage_settings(stage), self._inputs(stage))
        outputs = None if force else self._cached(stage, stage_fingerprint)
        if outputs is not None:
            logger.info('Stage %s is up to date', stage)
            self.hashes[stage] = fingerprint(outputs)
            return False

        directory = self.stage_dir(stage)
        if os.path.isdir(directory):
            shutil.rmtree(directory)
        os.makedirs(directory)
        logger.info('Running stage %s', stage)
        try:
            action(directory)
        except Exception as e:
            with open(os.path.join(directory, FAILED), 'w', encoding='utf-8') as fp:
                fp.write('%s: %s\n' % (type(e).__name__, e))
            logger.error('Stage %s failed: %s', stage, e)
            if isinstance(e, (ImproperlyConfigured, ValidationError, StageError)):
                raise
            raise StageError(stage, str(e)) from e

        outputs = tree_sha256(directory, hashers=HASHERS)
        os.makedirs(os.path.dirname(self.record_path(stage)), exist_ok=True)
        save_yaml({'stage': stage, 'fingerprint': stage_fingerprint, 'outputs': outputs}, self.record_path(stage))
        self.hashes[stage] = fingerprint(outputs)
        return True

    def manifest_path(self):
        if self.cfg.manifest:
            return self.cfg.manifest
        return os.path.join(self.stage_dir('phantom'), 'manifest.yaml')

    def _external_data(self):
        """Hash of a user-supplied manifest and of every file it lists."""
        manifest = load_manifest(self.cfg.manifest)
        files = {'manifest': file_sha256(self.cfg.manifest)}
        for entry in manifest.studies:
            for item in entry['timepoints']:
                for key in ('ct', 'lung_mask', 'pathology'):
                    if item.get(key):
                        files[item[key]] = file_sha256(manifest.path(item[key]))
        return fingerprint(files)

    def actions(self):
        cfg = self.cfg
        predictions = {variant: os.path.join(self.stage_dir('infer'), variant) for variant in cfg.variants}
        test_pairs = []

        def pairs():
            if not test_pairs:
                test_pairs.extend(load_pairs(self.stage_dir('register'), 'test'))
            return test_pairs

        def infer(directory):
            for variant in cfg.variants:
                run_infer(os.path.join(self.stage_dir('train'), variant + '.pt'), pairs(),
                          os.path.join(directory, variant), cfg.preprocess, cfg.save_probabilities)

        def progress(directory):
            for variant in cfg.variants:
                run_progress(predictions[variant], pairs(), os.path.join(directory, variant), cfg.render_overlays)

        def evaluate(directory):
            results = run_evaluate(predictions, pairs(), directory, cfg.slice_dice_plots)
            self.results = {variant: result.as_dict() for variant, result in results.items()}

        return [
            ('phantom', lambda directory: generate_dataset(cfg.phantom, directory)),
            ('preprocess', lambda directory: run_preprocess(self.manifest_path(), directory, cfg.preprocess)),
            ('register', lambda directory: run_register(self.stage_dir('preprocess'), directory, cfg.registration)),
            ('train', lambda directory: run_train(self.stage_dir('register'), directory, cfg.model, cfg.train,
                                                  cfg.preprocess, cfg.variants)),
            ('infer', infer),
            ('progress', progress),
            ('evaluate', evaluate),
        ]

    def write_artifacts(self):
        artifacts = {stage: tree_sha256(self.stage_dir(stage), hashers=HASHERS) for stage in STAGES
                     if os.path.isdir(self.stage_dir(stage))}
        return save_yaml({'seed': self.cfg.seed, 'preset': self.cfg.preset, 'artifacts': artifacts},
                         os.path.join(self.root, 'artifacts.yaml'))

    def run(self):
        os.makedirs(self.root, exist_ok=True)
        save_yaml(self.cfg.as_dict(), os.path.join(self.root, 'config.yaml'))
        ran, skipped = [], []
        force = False
        for stage, action in self.actions():
            if stage == 'phantom' and self.cfg.manifest:
                self.hashes[stage] = self._external_data()
                continue
            if self.run_stage(stage, action, force):
                ran.append(stage)
                force = True
            else:
                skipped.append(stage)
        if not self.results:
            self.results = self._load_results()
        self.write_artifacts()
        logger.info('Pipeline finished: ran %s, skipped %s', ran or 'nothing', skipped or 'nothing')
        return PipelineResult(self.root, ran, skipped, self.results)

    def _load_results(self):
        results = {}
        for variant in self.cfg.variants:
            path = os.path.join(self.stage_dir('evaluate'), variant + '.yaml')
            if os.path.exists(path):
                results[variant] = load_yaml(path)
        return results


def run_pipeline(cfg):
    """Run every stage of ``cfg`` in order; raises :class:`StageError` when a stage fails."""
    return Pipeline(cfg).run()
