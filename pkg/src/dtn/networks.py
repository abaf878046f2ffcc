"""Network families for the digits experiment.

All modules take and return NCHW tensors. Images live in [-1, 1].
"""

import torch
from torch import nn

from .exceptions import UsageError

REPRESENTATION_DIM = 128


def init_dcgan(module):
    """N(0, 0.02) for (transposed) convolutions; unit scale, zero shift for batch norm."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    return module


class FeatureNetwork(nn.Module):
    """Four conv layers, each followed by max pooling and ReLU.

    The representation is read after the final 4x4 pooling and before its
    ReLU. With ``num_classes`` set, a linear softmax head sits on top.
    """

    def __init__(self, widths=(64, 128, 256, REPRESENTATION_DIM), kernel_size=3,
                 num_classes=10, in_channels=3):
        super().__init__()
        if len(widths) != 4:
            raise UsageError("FeatureNetwork needs exactly four conv widths")
        self.init_kwargs = dict(widths=list(widths), kernel_size=kernel_size,
                                num_classes=num_classes, in_channels=in_channels)
        self.widths = tuple(widths)
        self.in_channels = in_channels
        self.num_classes = num_classes
        layers = []
        prev = in_channels
        for i, width in enumerate(widths):
            layers.append(nn.Conv2d(prev, width, kernel_size, padding=kernel_size // 2))
            layers.append(nn.MaxPool2d(4 if i == 3 else 2))
            if i < 3:
                layers.append(nn.ReLU(inplace=True))
            prev = width
        self.conv = nn.Sequential(*layers)
        self.head = nn.Linear(widths[-1], num_classes) if num_classes else None

    @property
    def representation_dim(self):
        return self.widths[-1]

    def features(self, x):
        return self.conv(x).flatten(1)

    def forward(self, x):
        if self.head is None:
            raise UsageError("FeatureNetwork built without a classifier head")
        return self.head(torch.relu(self.features(x)))


# The evaluation classifier shares f's architecture.
EvalClassifier = FeatureNetwork


class GeneratorHead(nn.Module):
    """Maps a representation vector to a 32x32 image through four
    deconvolution + batch-norm + ReLU blocks and a tanh terminal."""

    def __init__(self, in_dim=REPRESENTATION_DIM, out_channels=1, widths=(512, 256, 128, 64)):
        super().__init__()
        if len(widths) != 4:
            raise UsageError("GeneratorHead needs exactly four block widths")
        self.init_kwargs = dict(in_dim=in_dim, out_channels=out_channels, widths=list(widths))
        self.in_dim = in_dim
        self.out_channels = out_channels
        blocks = []
        prev = in_dim
        for i, width in enumerate(widths):
            # 1x1 -> 4x4 projection, then three doublings to 32x32
            stride, padding = (1, 0) if i == 0 else (2, 1)
            blocks += [
                nn.ConvTranspose2d(prev, width, 4, stride, padding, bias=False),
                nn.BatchNorm2d(width),
                nn.ReLU(inplace=True),
            ]
            prev = width
        self.blocks = nn.Sequential(*blocks)
        self.terminal = nn.Conv2d(prev, out_channels, 3, padding=1)
        init_dcgan(self)

    def forward(self, v):
        if v.dim() == 2:
            v = v[:, :, None, None]
        return torch.tanh(self.terminal(self.blocks(v)))


class Discriminator(nn.Module):
    """Four stride-2 batch-normalized conv layers with ReLU and a linear
    ``num_classes``-way head. ``forward`` returns logits."""

    def __init__(self, in_channels=1, num_classes=3, widths=(64, 128, 256, 512)):
        super().__init__()
        self.init_kwargs = dict(in_channels=in_channels, num_classes=num_classes, widths=list(widths))
        self.in_channels = in_channels
        self.num_classes = num_classes
        layers = []
        prev = in_channels
        for width in widths:
            layers += [
                nn.Conv2d(prev, width, 4, 2, 1, bias=False),
                nn.BatchNorm2d(width),
                nn.ReLU(inplace=True),
            ]
            prev = width
        self.conv = nn.Sequential(*layers)
        self.head = nn.Linear(prev * 2 * 2, num_classes)
        init_dcgan(self)

    def forward(self, x):
        return self.head(self.conv(x).flatten(1))


class BaselineGenerator(nn.Module):
    """Generator acting directly on source pixels: a freshly initialized copy
    of f's conv stack feeding a :class:`GeneratorHead`."""

    def __init__(self, out_channels=1, in_channels=3, encoder_widths=(64, 128, 256, REPRESENTATION_DIM),
                 head_widths=(512, 256, 128, 64)):
        super().__init__()
        self.init_kwargs = dict(out_channels=out_channels, in_channels=in_channels,
                                encoder_widths=list(encoder_widths), head_widths=list(head_widths))
        self.encoder = init_dcgan(
            FeatureNetwork(encoder_widths, num_classes=None, in_channels=in_channels)
        )
        self.head = GeneratorHead(encoder_widths[-1], out_channels, head_widths)

    def forward(self, x):
        return self.head(self.encoder.features(x))


ARCHITECTURES = {
    "FeatureNetwork": FeatureNetwork,
    "GeneratorHead": GeneratorHead,
    "Discriminator": Discriminator,
    "BaselineGenerator": BaselineGenerator,
}


def build(arch, kwargs):
    """Rebuild a network from its architecture id and constructor kwargs."""
    try:
        cls = ARCHITECTURES[arch]
    except KeyError:
        raise UsageError(f"unknown architecture {arch!r}") from None
    return cls(**kwargs)


def _check_images(x, channels, what):
    if x.dim() != 4 or x.shape[2:] != (32, 32):
        raise UsageError(f"{what} expects (N, C, 32, 32) input, got {tuple(x.shape)}")
    if x.shape[1] != channels:
        raise UsageError(f"{what} expects {channels} channels, got {x.shape[1]}")


def f_features(net: FeatureNetwork, x):
    _check_images(x, net.in_channels, "f_features")
    return net.features(x)


def f_classify(net: FeatureNetwork, x):
    _check_images(x, net.in_channels, "f_classify")
    return torch.softmax(net(x), dim=1)


def generate(g: GeneratorHead, v):
    if v.dim() not in (2, 4) or v.shape[1] != g.in_dim:
        raise UsageError(f"generate expects {g.in_dim}-D vectors, got {tuple(v.shape)}")
    return g(v)


def replicate(x):
    """Repeat a 1-channel NCHW batch to 3 channels."""
    return x.expand(-1, 3, -1, -1) if x.shape[1] == 1 else x


def transfer(f: FeatureNetwork, g: GeneratorHead, x):
    """G = g o f; grayscale inputs are replicated to three channels first."""
    return generate(g, f_features(f, replicate(x)))


def discriminate(D: Discriminator, x):
    _check_images(x, D.in_channels, "discriminate")
    return torch.softmax(D(x), dim=1)


def baseline_generate(B: BaselineGenerator, x):
    _check_images(replicate(x), B.encoder.in_channels, "baseline_generate")
    return B(replicate(x))
