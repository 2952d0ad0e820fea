"""Conv-4-64 feature encoder and the coarse-to-fine pyramid fusion."""

from __future__ import annotations

from typing import Sequence

from . import autodiff as ad
from .errors import DimensionError
from .layers import conv_weight, zeros
from .rng import SplitMix64

WIDTH = 64


class Encoder:
    """Four 3x3 conv blocks (pad 1); the first two end in a 2x2 max pool.

    One instance is shared by every scale, so the parameter count does not
    depend on how many scales are used.
    """

    def __init__(self, rng: SplitMix64, in_channels: int = 3, width: int = WIDTH):
        self.in_channels = in_channels
        self.width = width
        chans = [in_channels] + [width] * 4
        self.weights = [conv_weight(rng, chans[i + 1], chans[i]) for i in range(4)]
        self.biases = [zeros((width,)) for _ in range(4)]

    def params(self) -> dict[str, ad.Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            out[f"encoder.conv{i}.weight"] = w
            out[f"encoder.conv{i}.bias"] = b
        return out

    def __call__(self, images: ad.Tensor) -> ad.Tensor:
        return encode(images, self)


def encode(images: ad.Tensor, enc: Encoder) -> ad.Tensor:
    """(N, c, H, W) or (c, H, W) images -> (N, 64, H/4, W/4) feature maps."""
    if images.ndim == 3:
        images = ad.reshape(images, (1,) + images.shape)
    if images.ndim != 4 or images.shape[1] != enc.in_channels:
        raise DimensionError(f"encode: expected (N, {enc.in_channels}, H, W), got {images.shape}")
    h, w = images.shape[2:]
    if h < 16 or w < 16 or h % 4 or w % 4:
        raise DimensionError(f"encode: spatial extents {h}x{w} must be >= 16 and divisible by 4")
    x = images
    for i, (wt, b) in enumerate(zip(enc.weights, enc.biases)):
        x = ad.relu(ad.conv2d(x, wt, b, stride=1, pad=1))
        if i < 2:
            x = ad.maxpool2x2(x)
    return x


def fuse(maps: Sequence[ad.Tensor]) -> list[ad.Tensor]:
    """Add each coarser (already fused) map, upsampled 2x, into the next finer one."""
    fused = [maps[-1]]
    for fm in reversed(maps[:-1]):
        coarse = fused[0]
        if fm.shape[-2:] != tuple(2 * e for e in coarse.shape[-2:]):
            raise DimensionError(f"fuse: {fm.shape} is not twice the resolution of {coarse.shape}")
        fused.insert(0, ad.add(fm, ad.upsample_nearest(coarse, 2)))
    return fused


def encode_pyramid(images: Sequence[ad.Tensor], enc: Encoder) -> list[ad.Tensor]:
    """Images ordered finest first; returns fused feature maps in the same order."""
    for a, b in zip(images, images[1:]):
        if a.shape[-2:] != tuple(2 * e for e in b.shape[-2:]):
            raise DimensionError(f"encode_pyramid: {a.shape} -> {b.shape} breaks the 2x resolution chain")
    return fuse([encode(x, enc) for x in images])
