"""
Fully convolutional DenseNet for 2D slice segmentation, in a static (one input channel) and a longitudinal
(two input channels) variant.

With the default configuration (48 first-convolution filters, growth rate 12, five dense blocks of four layers on
each path and a four-layer bottleneck) the static network has 1,374,773 trainable parameters and the longitudinal
one 1,375,205; only the first convolution differs.
"""
import dataclasses
import hashlib
import logging

import torch
import torch.nn.functional as F
from django.core.exceptions import ImproperlyConfigured
from torch import nn

from .checksums import canonical_json
from .classes import N_CLASSES
from .exceptions import ModelError
from .options import BaseConfig
from .validators import ChoiceValidator, IntegerValidator, LengthValidator, RangeValidator

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1

STATIC = 'static'
LONGITUDINAL = 'longitudinal'
VARIANT_CHANNELS = {STATIC: 1, LONGITUDINAL: 2}


@dataclasses.dataclass
class ModelConfig(BaseConfig):
    variant: str = LONGITUDINAL
    in_channels: int = None
    n_classes: int = N_CLASSES
    first_conv_filters: int = 48
    growth_rate: int = 12
    down_blocks: tuple = (4, 4, 4, 4, 4)
    up_blocks: tuple = (4, 4, 4, 4, 4)
    bottleneck_layers: int = 4
    dropout: float = 0.2
    kernel_size: int = 3
    seed: int = 0

    field_validators = {
        'variant': [ChoiceValidator(VARIANT_CHANNELS)],
        'n_classes': [IntegerValidator(), RangeValidator(2)],
        'first_conv_filters': [IntegerValidator(), RangeValidator(1)],
        'growth_rate': [IntegerValidator(), RangeValidator(1)],
        'down_blocks': [LengthValidator(1, item_validator=RangeValidator(1))],
        'up_blocks': [LengthValidator(1, item_validator=RangeValidator(1))],
        'bottleneck_layers': [IntegerValidator(), RangeValidator(1)],
        'dropout': [RangeValidator(0, 1, upper_inclusive=False)],
        'kernel_size': [IntegerValidator(), RangeValidator(1)],
        'seed': [IntegerValidator()],
    }

    def __post_init__(self):
        if self.in_channels is None:
            self.in_channels = VARIANT_CHANNELS.get(self.variant)

    def clean(self):
        errors = {}
        if self.in_channels != VARIANT_CHANNELS.get(self.variant):
            errors['in_channels'] = 'The %s variant takes %s input channel(s), not %s.' % (
                self.variant, VARIANT_CHANNELS.get(self.variant), self.in_channels)
        if len(self.down_blocks) != len(self.up_blocks):
            errors['up_blocks'] = 'Encoder and decoder need the same number of blocks (%d != %d).' % (
                len(self.down_blocks), len(self.up_blocks))
        if self.kernel_size % 2 != 1:
            errors['kernel_size'] = 'The kernel size must be odd to keep slices aligned.'
        return errors

    @property
    def is_longitudinal(self):
        return self.variant == LONGITUDINAL

    @property
    def size_multiple(self):
        """Input sides are padded up to a multiple of this."""
        return 2 ** len(self.down_blocks)


class DenseLayer(nn.Sequential):
    def __init__(self, in_channels, growth_rate, kernel_size, dropout):
        super().__init__()
        self.add_module('norm', nn.BatchNorm2d(in_channels))
        self.add_module('relu', nn.ReLU(inplace=True))
        self.add_module('conv', nn.Conv2d(in_channels, growth_rate, kernel_size, padding=kernel_size // 2, bias=True))
        self.add_module('drop', nn.Dropout2d(dropout))


class DenseBlock(nn.Module):
    """
    Densely connected layers. Each layer sees the concatenation of the block input and all earlier outputs.

    On the decoder path (``upsample=True``) only the newly produced feature maps leave the block.
    """

    def __init__(self, in_channels, growth_rate, n_layers, kernel_size, dropout, upsample=False):
        super().__init__()
        self.upsample = upsample
        self.layers = nn.ModuleList([
            DenseLayer(in_channels + i * growth_rate, growth_rate, kernel_size, dropout) for i in range(n_layers)
        ])

    def forward(self, x):
        new_features = []
        for layer in self.layers:
            out = layer(x)
            x = torch.cat([x, out], 1)
            new_features.append(out)
        if self.upsample:
            return torch.cat(new_features, 1)
        return x


class TransitionDown(nn.Sequential):
    def __init__(self, channels, dropout):
        super().__init__()
        self.add_module('norm', nn.BatchNorm2d(channels))
        self.add_module('relu', nn.ReLU(inplace=True))
        self.add_module('conv', nn.Conv2d(channels, channels, kernel_size=1, bias=True))
        self.add_module('drop', nn.Dropout2d(dropout))
        self.add_module('pool', nn.MaxPool2d(2))


class TransitionUp(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.ConvTranspose2d(channels, channels, kernel_size=3, stride=2, padding=0, bias=True)

    def forward(self, x, skip):
        out = _center_crop(self.conv(x), skip.size(2), skip.size(3))
        return torch.cat([out, skip], 1)


def _center_crop(x, height, width):
    top = (x.size(2) - height) // 2
    left = (x.size(3) - width) // 2
    return x[:, :, top:top + height, left:left + width]


class FCDenseNet(nn.Module):
    """Encoder/decoder DenseNet ending in a per-pixel softmax over the classes."""

    def __init__(self, cfg):
        super().__init__()
        self.config = cfg
        growth, k, p = cfg.growth_rate, cfg.kernel_size, cfg.dropout

        self.first_conv = nn.Conv2d(cfg.in_channels, cfg.first_conv_filters, k, padding=k // 2, bias=True)
        channels = cfg.first_conv_filters

        skip_channels = []
        self.down_blocks = nn.ModuleList()
        self.transitions_down = nn.ModuleList()
        for n_layers in cfg.down_blocks:
            self.down_blocks.append(DenseBlock(channels, growth, n_layers, k, p))
            channels += growth * n_layers
            skip_channels.insert(0, channels)
            self.transitions_down.append(TransitionDown(channels, p))

        self.bottleneck = DenseBlock(channels, growth, cfg.bottleneck_layers, k, p, upsample=True)
        previous = growth * cfg.bottleneck_layers

        self.transitions_up = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        last = len(cfg.up_blocks) - 1
        for i, n_layers in enumerate(cfg.up_blocks):
            self.transitions_up.append(TransitionUp(previous))
            channels = previous + skip_channels[i]
            self.up_blocks.append(DenseBlock(channels, growth, n_layers, k, p, upsample=i < last))
            previous = growth * n_layers
        channels += previous

        self.final_conv = nn.Conv2d(channels, cfg.n_classes, kernel_size=1, bias=True)
        self.softmax = nn.Softmax(dim=1)

    def forward(self, x):
        height, width = x.size(2), x.size(3)
        x = _pad_to_multiple(x, self.config.size_multiple)
        out = self.first_conv(x)
        skips = []
        for block, transition in zip(self.down_blocks, self.transitions_down):
            out = block(out)
            skips.append(out)
            out = transition(out)
        out = self.bottleneck(out)
        for transition, block in zip(self.transitions_up, self.up_blocks):
            out = block(transition(out, skips.pop()))
        out = self.softmax(self.final_conv(out))
        return _center_crop(out, height, width)


def _pad_to_multiple(x, multiple):
    pad_h = (-x.size(2)) % multiple
    pad_w = (-x.size(3)) % multiple
    if not pad_h and not pad_w:
        return x
    return F.pad(x, (pad_w // 2, pad_w - pad_w // 2, pad_h // 2, pad_h - pad_h // 2))


def _init_weights(module):
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.kaiming_uniform_(module.weight, mode='fan_in', nonlinearity='relu')
        nn.init.zeros_(module.bias)
    elif isinstance(module, nn.BatchNorm2d):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def build_model(cfg=None):
    """Build a network for ``cfg`` with fan-in scaled uniform weights drawn from ``cfg.seed``."""
    cfg = (cfg or ModelConfig()).validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = FCDenseNet(cfg)
        model.apply(_init_weights)
    logger.debug('Built %s model with %d parameters', cfg.variant, count_parameters(model))
    return model


def count_parameters(model):
    """Number of trainable scalar parameters."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


class SliceBatch(object):
    """
    A batch of 2D slices ``(batch, channels, H, W)``.

    For the longitudinal variant channel 0 is the registered slice of the other timepoint and channel 1 the slice
    of the timepoint being segmented.
    """

    def __init__(self, images, view=None, indices=()):
        self.images = torch.as_tensor(images, dtype=torch.float32)
        if self.images.dim() != 4:
            raise ModelError('A slice batch is (batch, channels, H, W), got %d dimensions.' % self.images.dim())
        self.view = view
        self.indices = tuple(indices)

    def __len__(self):
        return self.images.size(0)

    @property
    def channels(self):
        return self.images.size(1)


def forward(model, batch, train=False):
    """Per-pixel class probabilities ``(batch, n_classes, H, W)`` for ``batch``."""
    images = batch.images if isinstance(batch, SliceBatch) else batch
    if images.size(1) != model.config.in_channels:
        raise ModelError('The %s model takes %d channel(s), the batch has %d.' % (
            model.config.variant, model.config.in_channels, images.size(1)))
    device = next(model.parameters()).device
    model.train(train)
    if train:
        return model(images.to(device))
    with torch.no_grad():
        return model(images.to(device))


def select_device(name=None):
    """Resolve a torch device; ``None`` picks CUDA when it is available."""
    if name:
        return torch.device(name)
    return torch.device('cuda' if torch.cuda.is_available() else 'cpu')


def save_checkpoint(model, path, extra=None):
    state = {
        'format_version': CHECKPOINT_FORMAT_VERSION,
        'model_config': model.config.as_dict(),
        'state_dict': {name: tensor.detach().cpu() for name, tensor in model.state_dict().items()},
    }
    if extra:
        state['extra'] = extra
    torch.save(state, str(path))
    return path


def load_checkpoint(path, device=None):
    state = torch.load(str(path), map_location='cpu', weights_only=True)
    if state.get('format_version') != CHECKPOINT_FORMAT_VERSION:
        raise ImproperlyConfigured('Unsupported checkpoint format version %r.' % state.get('format_version'))
    model = build_model(ModelConfig.from_dict(state['model_config']))
    model.load_state_dict(state['state_dict'])
    model.eval()
    return model.to(select_device(device))


def checkpoint_sha256(path):
    """
    SHA-256 over the configuration and tensors of a checkpoint.

    Two saves of the same weights hash equal even when the archive bytes differ.

    .. versionadded:: 1.0
    """
    state = torch.load(str(path), map_location='cpu', weights_only=True)
    digest = hashlib.sha256(canonical_json({key: value for key, value in state.items() if key != 'state_dict'})
                            .encode('utf-8'))
    for name in sorted(state.get('state_dict', {})):
        tensor = state['state_dict'][name]
        digest.update(name.encode('utf-8'))
        digest.update(str(tensor.dtype).encode('utf-8'))
        digest.update(repr(tuple(tensor.shape)).encode('utf-8'))
        digest.update(tensor.contiguous().numpy().tobytes())
    return digest.hexdigest()
