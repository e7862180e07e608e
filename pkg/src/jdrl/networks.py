"""Trainable components: the baseline UNet deblurrer and the kernel/weight predictors."""
from __future__ import annotations

from typing import Callable, Dict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ShapeError
from .kernels import free_form_channels, seed_channels


def conv3x3(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, kernel_size=3, padding=1)


class DoubleConv(nn.Sequential):
    def __init__(self, cin: int, cout: int, dropout: float = 0.0):
        layers = [conv3x3(cin, cout), nn.ReLU(inplace=True), conv3x3(cout, cout), nn.ReLU(inplace=True)]
        if dropout > 0:
            layers.append(nn.Dropout(dropout))
        super().__init__(*layers)


class Up(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.reduce = conv3x3(cin, cout)
        self.fuse = DoubleConv(2 * cout, cout)

    def forward(self, x, skip):
        x = self.reduce(F.interpolate(x, scale_factor=2, mode="nearest"))
        return self.fuse(torch.cat([skip, x], dim=1))


class UNet(nn.Module):
    """Plain encoder/decoder with skip concatenations and a sigmoid head.

    With the defaults (``base=64``, ``depth=4``) the widths run 64 to 1024;
    dropout follows the deepest encoder stage and the bottleneck.  Inputs whose
    sides are not multiples of ``2**depth`` are replicate-padded symmetrically
    and the output is cropped back.
    """

    name = "unet"

    def __init__(self, in_channels: int = 3, out_channels: int = 3, base: int = 64, depth: int = 4,
                 dropout: float = 0.4):
        super().__init__()
        if depth < 1:
            raise ConfigurationError(f"UNet depth must be >= 1, got {depth}")
        self.depth = depth
        widths = [base * 2 ** k for k in range(depth + 1)]
        self.down = nn.ModuleList()
        cin = in_channels
        for k in range(depth):
            self.down.append(DoubleConv(cin, widths[k], dropout if k == depth - 1 else 0.0))
            cin = widths[k]
        self.bottom = DoubleConv(widths[-2], widths[-1], dropout)
        self.up = nn.ModuleList(Up(widths[k + 1], widths[k]) for k in reversed(range(depth)))
        self.head = conv3x3(widths[0], out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        mult = 2 ** self.depth
        ph, pw = (-h) % mult, (-w) % mult
        pads = (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2)
        if ph or pw:
            x = F.pad(x, pads, mode="replicate")
        skips = []
        for stage in self.down:
            x = stage(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottom(x)
        for up, skip in zip(self.up, reversed(skips)):
            x = up(x, skip)
        x = torch.sigmoid(self.head(x))
        if ph or pw:
            x = x[..., pads[2]:pads[2] + h, pads[0]:pads[0] + w]
        return x


class IdentityNet(nn.Module):
    """Single 3x3 convolution initialized to the identity map.

    Useful as a stub deblurrer: it returns its input until trained.
    """

    name = "identity"
    skip_he_init = True

    def __init__(self, channels: int = 3, **_):
        super().__init__()
        self.conv = conv3x3(channels, channels)
        with torch.no_grad():
            self.conv.weight.zero_()
            self.conv.bias.zero_()
            for c in range(channels):
                self.conv.weight[c, c, 1, 1] = 1.0

    def forward(self, x):
        return self.conv(x)


class ResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv1 = conv3x3(width, width)
        self.conv2 = conv3x3(width, width)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class PredictionBody(nn.Module):
    """Conv entry, residual blocks, conv exit; input is [deblurred, blurry] stacked on channels."""

    def __init__(self, out_channels: int, width: int = 64, blocks: int = 3, in_channels: int = 6,
                 zero_exit: bool = False):
        super().__init__()
        self.entry = conv3x3(in_channels, width)
        self.blocks = nn.Sequential(*[ResBlock(width) for _ in range(blocks)])
        self.exit = conv3x3(width, out_channels)
        self.zero_exit = zero_exit
        if zero_exit:
            self.zero_exit_()

    def zero_exit_(self):
        with torch.no_grad():
            self.exit.weight.zero_()
            self.exit.bias.zero_()

    def forward(self, deblurred: torch.Tensor, blurry: torch.Tensor) -> torch.Tensor:
        if deblurred.shape != blurry.shape:
            raise ShapeError(f"deblurred {tuple(deblurred.shape)} and blurry {tuple(blurry.shape)} differ")
        return self.exit(self.blocks(self.entry(torch.cat([deblurred, blurry], dim=1))))


class KernelPredictor(PredictionBody):
    def __init__(self, m: int = 8, width: int = 64, blocks: int = 3, isotropic: bool = True, zero_exit: bool = False):
        out = seed_channels(m) if isotropic else free_form_channels(m)
        super().__init__(out, width, blocks, zero_exit=zero_exit)
        self.m = m
        self.isotropic = isotropic


class WeightPredictor(PredictionBody):
    def __init__(self, m: int = 8, width: int = 64, blocks: int = 3, zero_exit: bool = False):
        super().__init__(m, width, blocks, zero_exit=zero_exit)
        self.m = m


def he_init(module: nn.Module, seed: int | None = None, generator: torch.Generator | None = None) -> nn.Module:
    """Fan-in Kaiming-normal weights (ReLU gain) and zero biases for every conv.

    Exit layers of bodies built with ``zero_exit=True`` are re-zeroed
    afterwards.  Modules flagged ``skip_he_init`` are left alone.
    """
    if getattr(module, "skip_he_init", False):
        return module
    if generator is None:
        generator = torch.Generator()
        generator.manual_seed(0 if seed is None else seed)
    for layer in module.modules():
        if isinstance(layer, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_normal_(layer.weight, mode="fan_in", nonlinearity="relu", generator=generator)
            if layer.bias is not None:
                nn.init.zeros_(layer.bias)
    for layer in module.modules():
        if isinstance(layer, PredictionBody) and layer.zero_exit:
            layer.zero_exit_()
    return module


_NETWORKS: Dict[str, Callable[..., nn.Module]] = {}


def register_network(name: str):
    def decorator(factory):
        _NETWORKS[name] = factory
        return factory
    return decorator


def build_network(name: str, **kwargs) -> nn.Module:
    try:
        factory = _NETWORKS[name]
    except KeyError:
        raise ConfigurationError(f"unknown deblurring network {name!r}; registered: {sorted(_NETWORKS)}") from None
    return factory(**kwargs)


def available_networks():
    return sorted(_NETWORKS)


register_network("unet")(UNet)
register_network("identity")(IdentityNet)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
