"""Small synthetic pairs and models shared by the test modules."""
import numpy as np

from lungtrack.classes import CONSOLIDATION, GROUND_GLASS, HEALTHY_LUNG
from lungtrack.core import LabelVolume, Volume3D
from lungtrack.models import ModelConfig, build_model
from lungtrack.registration import BSplineTransform, RegisteredPair

TINY = dict(first_conv_filters=4, growth_rate=2, down_blocks=(1, 1), up_blocks=(1, 1), bottleneck_layers=1,
            dropout=0.0)


def tiny_model(variant='longitudinal', seed=0):
    return build_model(ModelConfig(variant=variant, seed=seed, **TINY))


def ball(shape, center, radius):
    grid = np.indices(shape)
    return ((grid - np.reshape(center, (3, 1, 1, 1))) ** 2).sum(axis=0) <= radius ** 2


def labels_with_lesion(size, radius):
    """A lung ball with a consolidation core and a ground-glass rim around it."""
    shape = (size,) * 3
    center = ((size - 1) / 2.0,) * 3
    labels = np.where(ball(shape, center, size * 0.4), HEALTHY_LUNG, 0).astype(np.uint8)
    if radius:
        labels[ball(shape, center, radius + 1)] = GROUND_GLASS
        labels[ball(shape, center, radius)] = CONSOLIDATION
    return labels


def ct_from_labels(labels, seed=0):
    values = np.array([0.0, 0.15, 0.45, 0.8, 0.85], dtype=np.float32)
    noise = np.random.RandomState(seed).normal(0.0, 0.01, size=labels.shape).astype(np.float32)
    return np.clip(values[labels] + noise * (labels > 0), 0.0, 1.0)


def make_pair(patient_id='p', size=16, radius0=2, radius1=4, seed=0, with_labels=True):
    """A registered pair on an identity transform whose consolidation grows from ``radius0`` to ``radius1``."""
    y0 = labels_with_lesion(size, radius0)
    y1 = labels_with_lesion(size, radius1)
    x0 = Volume3D(ct_from_labels(y0, seed))
    x1 = Volume3D(ct_from_labels(y1, seed + 1))
    lung = LabelVolume((y1 > 0).astype(np.uint8))
    transform = BSplineTransform.identity(x1.geometry)
    return RegisteredPair(
        x0, x1, LabelVolume((y0 > 0).astype(np.uint8)), lung, transform,
        LabelVolume(y0) if with_labels else None, LabelVolume(y1) if with_labels else None,
        patient_id, (0, 1), (0, 7),
    )
