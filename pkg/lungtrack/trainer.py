"""
Training loop for the slice segmentation network.

Slices of every view are mixed in one stream. Each training item is one slice position of a registered pair and
holds both of its samples: ``[X0_reg, X1] -> Y1`` and ``[X1, X0_reg] -> Y0_reg``, so the progression term can
compare the two predictions.
"""
import copy
import dataclasses
import logging
import math
import os
import tempfile
import time
import warnings

import numpy as np
import torch
import yaml
from django.core.exceptions import ImproperlyConfigured
from torch.utils.data import DataLoader, Dataset

from .core import one_hot
from .exceptions import ModelError, ScheduleWarning, TrainingError
from .log import RECORD_ATTR
from .losses import total_loss
from .models import save_checkpoint
from .options import BaseConfig
from .preprocess import VIEWS
from .validators import ChoiceValidator, IntegerValidator, RangeValidator, positive

logger = logging.getLogger(__name__)

EPOCHS = 'epochs'
ITERATIONS = 'iterations'


@dataclasses.dataclass
class TrainConfig(BaseConfig):
    lr0: float = 1e-4
    decay_factor: float = 0.1
    decay_every: int = 50
    decay_unit: str = EPOCHS
    max_epochs: int = 100
    early_stop_patience: int = 5
    batch_size: int = 8
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    views: tuple = VIEWS
    train_patients: tuple = ()
    val_patients: tuple = ()
    num_workers: int = 0
    prefetch_batches: int = 2

    field_validators = {
        'lr0': [positive()],
        'decay_factor': [RangeValidator(0, 1, lower_inclusive=False)],
        'decay_every': [IntegerValidator(), RangeValidator(1)],
        'decay_unit': [ChoiceValidator([EPOCHS, ITERATIONS])],
        'max_epochs': [IntegerValidator(), RangeValidator(1)],
        'early_stop_patience': [IntegerValidator(), RangeValidator(1)],
        'batch_size': [IntegerValidator(), RangeValidator(1)],
        'seed': [IntegerValidator()],
        'views': [ChoiceValidator(VIEWS, many=True)],
        'num_workers': [IntegerValidator(), RangeValidator(0)],
        'prefetch_batches': [IntegerValidator(), RangeValidator(1)],
    }

    def clean(self):
        errors = {}
        if self.early_stop_patience >= self.max_epochs:
            errors['early_stop_patience'] = 'Patience (%d) must be below max_epochs (%d).' % (
                self.early_stop_patience, self.max_epochs)
        overlap = sorted(set(self.train_patients) & set(self.val_patients))
        if overlap:
            errors['val_patients'] = 'Patients in both training and validation: %s.' % ', '.join(overlap)
        if not self.views:
            errors['views'] = 'At least one view is needed.'
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            errors['betas'] = 'Expected two moment coefficients in [0, 1), got %r.' % (self.betas,)
        return errors


def lr_schedule(step, cfg):
    """
    Step decay: ``lr0 * decay_factor ** floor(step / decay_every)``.

    ``step`` counts epochs, or optimizer iterations when ``cfg.decay_unit`` is ``'iterations'``.

    .. versionchanged:: 1.0
        Decay per optimizer iteration, which warns with :class:`~lungtrack.exceptions.ScheduleWarning`.
    """
    if step < 0:
        raise ValueError('The schedule starts at step 0, got %d.' % step)
    return cfg.lr0 * cfg.decay_factor ** (step // cfg.decay_every)


class TrainingSample(object):
    """
    One network input (channels, H, W) with its one-hot target, tagged with where it came from.

    A sample holds a slice position only. :attr:`inputs` and :attr:`target` are cut from the volumes of its pair
    on access.
    """

    def __init__(self, pair, view, axis, index, target_timepoint):
        self.pair = pair
        self.pair_id = pair.pair_id
        self.view = view
        self.axis = axis
        self.index = index
        self.target_timepoint = target_timepoint

    def __repr__(self):
        return 'TrainingSample(%s, %s[%d], t%d)' % (self.pair_id, self.view, self.index, self.target_timepoint)

    def _slice(self, array):
        return np.take(array, self.index, axis=self.axis)

    @property
    def inputs(self):
        """``[other timepoint, target timepoint]`` intensities as float32."""
        x0, x1 = self._slice(self.pair.x0_reg.data), self._slice(self.pair.x1.data)
        channels = [x0, x1] if self.target_timepoint == 1 else [x1, x0]
        return np.stack(channels).astype(np.float32)

    @property
    def target(self):
        labels = self.pair.y1 if self.target_timepoint == 1 else self.pair.y0_reg
        return one_hot(self._slice(labels.labels))


def make_training_samples(pairs, views=VIEWS, cfg=None):
    """
    Build the samples of ``pairs`` for ``views``.

    Only slice indices kept in both timepoints are used. Samples come in twos per slice: the follow-up target
    first, then the reference target. Pairs sharing no kept slice in any view are skipped with a warning.
    """
    samples = []
    for pair in pairs:
        if not pair.has_ground_truth:
            logger.warning('Skipping %s: no pathology labels.', pair.pair_id)
            continue
        produced = 0
        for view in views:
            stack0 = pair.slice_stack(0, view, cfg)
            stack1 = pair.slice_stack(1, view, cfg)
            common = sorted(set(stack0.kept_indices) & set(stack1.kept_indices))
            for index in common:
                samples.append(TrainingSample(pair, view, stack1.axis, index, 1))
                samples.append(TrainingSample(pair, view, stack1.axis, index, 0))
            produced += len(common)
        if not produced:
            logger.warning('Skipping %s: no slice is kept in both timepoints.', pair.pair_id)
    return samples


class SlicePairDataset(Dataset):
    """Items are slice positions; each yields the follow-up and reference samples of that slice."""

    def __init__(self, samples):
        if len(samples) % 2:
            raise ValueError('Samples come in follow-up/reference twos.')
        self.samples = samples

    def __len__(self):
        return len(self.samples) // 2

    def __getitem__(self, item):
        followup, reference = self.samples[2 * item], self.samples[2 * item + 1]
        return {
            'x1': torch.from_numpy(np.ascontiguousarray(followup.inputs)),
            'y1': torch.from_numpy(np.ascontiguousarray(followup.target)),
            'x0': torch.from_numpy(np.ascontiguousarray(reference.inputs)),
            'y0': torch.from_numpy(np.ascontiguousarray(reference.target)),
        }


def make_loader(samples, cfg, shuffle, generator=None):
    options = {}
    if cfg.num_workers:
        options['prefetch_factor'] = cfg.prefetch_batches
    return DataLoader(SlicePairDataset(samples), batch_size=cfg.batch_size, shuffle=shuffle, generator=generator,
                      num_workers=cfg.num_workers, **options)


class EarlyStopping(object):
    """
    Tracks the best validation loss.

    A loss counts as an improvement only when strictly lower than the best so far. After ``patience``
    epochs in a row without improvement, :attr:`should_stop` becomes true.
    """

    def __init__(self, patience=5):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = None
        self.bad_epochs = 0
        self.should_stop = False

    def step(self, epoch, val_loss):
        """Record the validation loss of ``epoch``; returns True when it is the new best."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.should_stop = True
        return False


class TrainHistory(object):
    """Per-epoch losses and learning rates of a training run. Wall time is kept but not compared."""

    def __init__(self, epochs=None, best_epoch=None, stopped_early=False, variant=None):
        self.epochs = list(epochs or [])
        self.best_epoch = best_epoch
        self.stopped_early = stopped_early
        self.variant = variant

    def __len__(self):
        return len(self.epochs)

    def __eq__(self, other):
        if not isinstance(other, TrainHistory):
            return NotImplemented
        return (self._comparable(), self.best_epoch, self.stopped_early, self.variant) == (
            other._comparable(), other.best_epoch, other.stopped_early, other.variant)

    def _comparable(self):
        return [{key: value for key, value in epoch.items() if key != 'wall_time'} for epoch in self.epochs]

    def add(self, **record):
        self.epochs.append(record)

    def val_losses(self):
        return [epoch['val_total'] for epoch in self.epochs]

    def as_dict(self, wall_time=True):
        epochs = self.epochs if wall_time else self._comparable()
        return {'variant': self.variant, 'best_epoch': self.best_epoch, 'stopped_early': self.stopped_early,
                'epochs': epochs}

    def save(self, path, wall_time=True):
        """Write the history as YAML; without ``wall_time`` the file is reproducible run to run."""
        with open(str(path), 'w', encoding='utf-8') as fp:
            yaml.safe_dump(self.as_dict(wall_time), fp, sort_keys=True, default_flow_style=False)
        return path

    @classmethod
    def load(cls, path):
        with open(str(path), encoding='utf-8') as fp:
            data = yaml.safe_load(fp) or {}
        return cls(data.get('epochs'), data.get('best_epoch'), data.get('stopped_early', False), data.get('variant'))


def _check_split(train_pairs, val_pairs):
    shared = sorted({p.patient_id for p in train_pairs} & {p.patient_id for p in val_pairs})
    if shared:
        raise ImproperlyConfigured('Patients used for both training and validation: %s.' % ', '.join(shared))


def _batch_loss(model, batch, device, train):
    longitudinal = model.config.is_longitudinal
    x0, x1 = batch['x0'].to(device), batch['x1'].to(device)
    if not longitudinal:
        # The slice being segmented is channel 1 of either sample.
        x0, x1 = x0[:, 1:2], x1[:, 1:2]
    inputs = torch.cat([x0, x1])
    if inputs.size(1) != model.config.in_channels:
        raise ModelError('The %s model takes %d channel(s), the samples have %d.' % (
            model.config.variant, model.config.in_channels, inputs.size(1)))
    model.train(train)
    with torch.set_grad_enabled(train):
        pred0, pred1 = model(inputs).split(x0.size(0))
        return total_loss(pred0, batch['y0'].to(device), pred1, batch['y1'].to(device), longitudinal)


def evaluate_loss(model, loader, device):
    """Mean loss terms over ``loader`` with the model in evaluation mode."""
    sums = np.zeros(3)
    count = 0
    for batch in loader:
        size = batch['x0'].size(0)
        sums += np.array(_batch_loss(model, batch, device, train=False).as_floats()) * size
        count += size
    if not count:
        return {'seg': math.nan, 'prog': math.nan, 'total': math.nan}
    seg, prog, total = sums / count
    return {'seg': float(seg), 'prog': float(prog), 'total': float(total)}


def _abort(model, message, out_dir, record):
    out_dir = out_dir or tempfile.mkdtemp(prefix='lungtrack-')
    os.makedirs(out_dir, exist_ok=True)
    path = save_checkpoint(model, os.path.join(out_dir, 'diagnostic.pt'), extra=record)
    logger.error('%s Diagnostic checkpoint written to %s', message, path)
    raise TrainingError(message, checkpoint=path)


def train(model, train_pairs, val_pairs, cfg=None, out_dir=None, preprocess_cfg=None):
    """
    Train ``model`` and return ``(model, history)`` with the weights of the best validation epoch restored.

    Stops early when the validation total loss has not improved for ``early_stop_patience`` epochs. A non-finite
    loss aborts the run with :class:`TrainingError` after writing a diagnostic checkpoint.
    """
    cfg = (cfg or TrainConfig()).validate()
    _check_split(train_pairs, val_pairs)
    if cfg.decay_unit == ITERATIONS:
        warnings.warn('Decaying the learning rate every %d optimizer iterations instead of epochs.' %
                      cfg.decay_every, ScheduleWarning, stacklevel=2)
    device = next(model.parameters()).device
    train_samples = make_training_samples(train_pairs, cfg.views, preprocess_cfg)
    val_samples = make_training_samples(val_pairs, cfg.views, preprocess_cfg)
    if not train_samples:
        raise TrainingError('No training sample could be built.')

    history = TrainHistory(variant=model.config.variant)
    stopper = EarlyStopping(cfg.early_stop_patience)
    best_state = copy.deepcopy(model.state_dict())
    optimizer = torch.optim.Adam(model.parameters(), lr=lr_schedule(0, cfg), betas=tuple(cfg.betas))
    generator = torch.Generator().manual_seed(cfg.seed)
    train_loader = make_loader(train_samples, cfg, shuffle=True, generator=generator)
    val_loader = make_loader(val_samples, cfg, shuffle=False)
    logger.info('Training %s model on %d slice pairs (%d for validation)', model.config.variant,
                len(train_loader.dataset), len(val_loader.dataset))

    step = 0
    with torch.random.fork_rng(devices=[device.index or 0] if device.type == 'cuda' else []):
        torch.manual_seed(cfg.seed)
        for epoch in range(cfg.max_epochs):
            started = time.monotonic()
            sums = np.zeros(3)
            seen = 0
            for batch in train_loader:
                lr = lr_schedule(step if cfg.decay_unit == ITERATIONS else epoch, cfg)
                for group in optimizer.param_groups:
                    group['lr'] = lr
                losses = _batch_loss(model, batch, device, train=True)
                record = dict(losses.as_dict(), step=step, epoch=epoch, lr=lr)
                if not all(math.isfinite(value) for value in losses.as_floats()):
                    _abort(model, 'Non-finite loss at step %d (epoch %d).' % (step, epoch), out_dir, record)
                optimizer.zero_grad()
                losses.total.backward()
                optimizer.step()
                logger.info('step %d', step, extra={RECORD_ATTR: dict(record, event='step')})
                size = batch['x0'].size(0)
                sums += np.array(losses.as_floats()) * size
                seen += size
                step += 1

            seg, prog, total = sums / seen
            val = evaluate_loss(model, val_loader, device) if val_samples else {'seg': seg, 'prog': prog,
                                                                                'total': total}
            if not math.isfinite(val['total']):
                _abort(model, 'Non-finite validation loss at epoch %d.' % epoch, out_dir, dict(val, epoch=epoch))
            improved = stopper.step(epoch, val['total'])
            if improved:
                best_state = copy.deepcopy(model.state_dict())
            history.add(epoch=epoch, seg=float(seg), prog=float(prog), total=float(total), val_seg=val['seg'],
                        val_prog=val['prog'], val_total=val['total'], lr=float(optimizer.param_groups[0]['lr']),
                        wall_time=time.monotonic() - started)
            logger.info('epoch %d: train %.5f, validation %.5f%s', epoch, total, val['total'],
                        ' (best)' if improved else '', extra={RECORD_ATTR: dict(history.epochs[-1], event='epoch')})
            if stopper.should_stop:
                history.stopped_early = True
                logger.info('No validation improvement for %d epochs; stopping after epoch %d.',
                            cfg.early_stop_patience, epoch)
                break

    history.best_epoch = stopper.best_epoch
    model.load_state_dict(best_state)
    model.eval()
    return model, history
