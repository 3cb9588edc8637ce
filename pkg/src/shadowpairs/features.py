"""Convolutional backbone and pyramid-pooling FPN pixel decoder.

Produces the stride-8/16/32 maps E3, E4, E5 with a shared channel count.
Inputs must be multiples of 32 on both sides; see :func:`pad_to_multiple`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

STRIDE = 32


@dataclass(frozen=True)
class ExtractorConfig:
    channel_count: int = 256
    stage_depths: tuple[int, int, int] = (1, 1, 1)
    ppm_pool_sizes: tuple[int, ...] = (1, 2, 3, 6)
    stem_width: int = 32
    stage_widths: tuple[int, int, int] = (64, 128, 256)

    def validate(self) -> None:
        if self.channel_count < 8:
            raise ValueError(f"channel_count must be >= 8, got {self.channel_count}")
        if len(self.stage_depths) != 3 or min(self.stage_depths) < 1:
            raise ValueError(f"stage_depths must be 3 positive integers, got {self.stage_depths}")
        if len(self.stage_widths) != 3 or min(self.stage_widths) < 1 or self.stem_width < 1:
            raise ValueError("stage and stem widths must be positive")
        if any(s < 1 for s in self.ppm_pool_sizes):
            raise ValueError(f"pool sizes must be positive, got {self.ppm_pool_sizes}")


@dataclass
class FeatureMaps:
    E3: Tensor  # (B, C, H/8, W/8)
    E4: Tensor  # (B, C, H/16, W/16)
    E5: Tensor  # (B, C, H/32, W/32)

    @property
    def channel_count(self) -> int:
        return self.E3.shape[1]


def pad_to_multiple(image: Tensor, multiple: int = STRIDE) -> tuple[Tensor, tuple[int, int]]:
    """Zero-pad the trailing two dims (bottom/right). Returns padded tensor and original (H, W)."""
    h, w = image.shape[-2:]
    ph = math.ceil(h / multiple) * multiple - h
    pw = math.ceil(w / multiple) * multiple - w
    if ph or pw:
        image = F.pad(image, (0, pw, 0, ph))
    return image, (h, w)


class _Residual(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return F.relu(x + self.conv2(F.relu(self.conv1(x))))


def _stage(cin: int, cout: int, depth: int) -> nn.Sequential:
    layers = [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.ReLU()]
    layers += [_Residual(cout) for _ in range(depth - 1)]
    return nn.Sequential(*layers)


class PyramidPooling(nn.Module):
    def __init__(self, ch: int, pool_sizes):
        super().__init__()
        self.pool_sizes = tuple(pool_sizes)
        branch = max(ch // 4, 1)
        self.branches = nn.ModuleList(nn.Conv2d(ch, branch, 1) for _ in self.pool_sizes)
        self.fuse = nn.Conv2d(ch + branch * len(self.pool_sizes), ch, 1)

    def forward(self, x: Tensor) -> Tensor:
        size = x.shape[-2:]
        outs = [x]
        for s, conv in zip(self.pool_sizes, self.branches):
            y = F.relu(conv(F.adaptive_avg_pool2d(x, s)))
            outs.append(F.interpolate(y, size=size, mode="bilinear", align_corners=False))
        return F.relu(self.fuse(torch.cat(outs, dim=1)))


class FeatureExtractor(nn.Module):
    def __init__(self, config: ExtractorConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config.channel_count
        sw = config.stem_width
        w3, w4, w5 = config.stage_widths
        d3, d4, d5 = config.stage_depths
        self.stem = nn.Sequential(
            nn.Conv2d(3, sw, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(sw, sw, 3, stride=2, padding=1),
            nn.ReLU(),
        )
        self.stage3 = _stage(sw, w3, d3)
        self.stage4 = _stage(w3, w4, d4)
        self.stage5 = _stage(w4, w5, d5)
        self.lateral3 = nn.Conv2d(w3, c, 1)
        self.lateral4 = nn.Conv2d(w4, c, 1)
        self.lateral5 = nn.Conv2d(w5, c, 1)
        self.ppm = PyramidPooling(c, config.ppm_pool_sizes)
        self.out4 = nn.Conv2d(c, c, 3, padding=1)
        self.out3 = nn.Conv2d(c, c, 3, padding=1)
        for conv in (self.out3, self.out4, self.ppm.fuse):
            nn.init.zeros_(conv.bias)

    def forward(self, image: Tensor) -> FeatureMaps:
        h, w = image.shape[-2:]
        if h % STRIDE or w % STRIDE:
            raise ValueError(f"input size {h}x{w} is not a multiple of {STRIDE}; pad first")
        c3 = self.stage3(self.stem(image))
        c4 = self.stage4(c3)
        c5 = self.stage5(c4)
        e5 = self.ppm(self.lateral5(c5))
        e4 = self.out4(self.lateral4(c4) + F.interpolate(e5, scale_factor=2, mode="nearest"))
        e3 = self.out3(self.lateral3(c3) + F.interpolate(e4, scale_factor=2, mode="nearest"))
        return FeatureMaps(E3=e3, E4=e4, E5=e5)


def extract_features(image: Tensor, extractor: FeatureExtractor) -> FeatureMaps:
    return extractor(image)


def flatten_pixel_features(e3: Tensor) -> tuple[Tensor, Tensor]:
    """(B, C, h, w) -> two independent (B, h*w, C) row-major copies (object, shadow)."""
    x = e3.flatten(2).transpose(1, 2)
    return x.clone(), x.clone()


def unflatten_pixel_features(x: Tensor, height: int, width: int) -> Tensor:
    b, length, c = x.shape
    if length != height * width:
        raise ValueError(f"cannot unflatten {length} pixels into {height}x{width}")
    return x.transpose(1, 2).reshape(b, c, height, width)
