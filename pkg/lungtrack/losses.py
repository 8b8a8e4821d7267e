"""
Training objective: a segmentation term on both timepoints plus a progression term on the change of consolidation.

Predictions are per-pixel class probabilities ``(batch, n_classes, H, W)`` and targets one-hot maps of the same
shape. Every mean-squared error is averaged over pixels and channels.
"""
import torch

from .classes import CONSOLIDATION
from .exceptions import ModelError


class LossBreakdown(object):
    """The two loss terms and their sum; ``total`` is computed as ``seg + prog``."""

    def __init__(self, seg, prog):
        self.seg = seg
        self.prog = prog
        self.total = seg + prog

    def __repr__(self):
        return 'LossBreakdown(seg=%.6g, prog=%.6g, total=%.6g)' % self.as_floats()

    def as_floats(self):
        return tuple(float(term) for term in (self.seg, self.prog, self.total))

    def as_dict(self):
        seg, prog, total = self.as_floats()
        return {'seg': seg, 'prog': prog, 'total': total}


def _check_shapes(*tensors):
    shape = tensors[0].shape
    for tensor in tensors[1:]:
        if tensor.shape != shape:
            raise ModelError('Loss inputs must share one shape, got %s and %s.' % (tuple(shape), tuple(tensor.shape)))


def mse(a, b):
    _check_shapes(a, b)
    return torch.mean((a - b) ** 2)


def seg_loss(pred0, gt0, pred1, gt1):
    """MSE between predictions and one-hot targets, summed over the two timepoints."""
    _check_shapes(pred0, gt0, pred1, gt1)
    return mse(pred0, gt0) + mse(pred1, gt1)


def prog_loss(pred0_con, pred1_con, gt0_con, gt1_con):
    """
    MSE between the ground-truth and the predicted change of consolidation, ``(gt1 - gt0)`` against
    ``(pred1 - pred0)``.

    A bias shared by both predicted maps cancels out.
    """
    _check_shapes(pred0_con, pred1_con, gt0_con, gt1_con)
    return mse(gt1_con - gt0_con, pred1_con - pred0_con)


def consolidation_channel(probabilities):
    """The soft consolidation map: the consolidation probability of every pixel."""
    return probabilities[:, CONSOLIDATION]


def total_loss(pred0, gt0, pred1, gt1, longitudinal=True):
    """
    Full objective for a batch of slice pairs.

    The static variant has no pair to compare and only gets the segmentation term; its progression term is zero.
    """
    seg = seg_loss(pred0, gt0, pred1, gt1)
    if not longitudinal:
        return LossBreakdown(seg, torch.zeros_like(seg))
    prog = prog_loss(consolidation_channel(pred0), consolidation_channel(pred1),
                     consolidation_channel(gt0), consolidation_channel(gt1))
    return LossBreakdown(seg, prog)
