"""Trainable multi-level feature extractor and its photometric twin.

The extractor is a small U-shaped network: an encoder of two-convolution
blocks separated by Gaussian downsampling, then a decoder that upsamples the
coarser level, concatenates the encoder skip, and applies another
two-convolution block per level.  Levels are returned coarsest first.  With
delta kernels on one channel per level the whole thing collapses to the
plain Gaussian image pyramid, which pins the wiring.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .image import FeatureMap, ImagePyramid, gaussian_downsample
from .nnops import conv2d_chw, gauss_downsample_chw, relu, upsample2_chw
from .streams import stream_rng

# Channels per level, coarsest to finest, at desk scale.
DESK_LEVEL_CHANNELS = (32, 16, 8, 8)


def _block_names(levels: int) -> list[str]:
    enc = [f"enc{k}" for k in range(levels - 1, -1, -1)]  # finest first
    dec = [f"dec{k}" for k in range(1, levels)]
    return enc + dec


@dataclass(frozen=True)
class FeatureExtractorParams:
    """Convolution weights keyed by block and layer, e.g. 'enc0.c1.w'."""

    level_channels: tuple[int, ...]
    in_channels: int
    tensors: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "level_channels", tuple(int(c) for c in self.level_channels))
        for name in self._expected_names():
            if name not in self.tensors:
                raise DimensionError(f"missing extractor tensor {name}")

    def _expected_names(self) -> list[str]:
        names = []
        for block in _block_names(len(self.level_channels)):
            names += [f"{block}.c1.w", f"{block}.c1.b", f"{block}.c2.w", f"{block}.c2.b"]
        return names

    @property
    def levels(self) -> int:
        return len(self.level_channels)

    @staticmethod
    def _block_shapes(
        level_channels: tuple[int, ...], in_channels: int
    ) -> dict[str, tuple[int, int]]:
        """Block name -> (c_in of first conv, c_out of both convs)."""
        n = len(level_channels)
        fine_to_coarse = list(level_channels[::-1])  # index 0 = finest
        shapes: dict[str, tuple[int, int]] = {}
        prev = in_channels
        for k in range(n - 1, -1, -1):  # enc(n-1) ... enc0
            out = fine_to_coarse[n - 1 - k]
            shapes[f"enc{k}"] = (prev, out)
            prev = out
        for k in range(1, n):  # dec1 ... dec(n-1)
            coarser = level_channels[k - 1]
            skip = level_channels[k]
            shapes[f"dec{k}"] = (coarser + skip, level_channels[k])
        return shapes

    @staticmethod
    def initialize(
        level_channels: tuple[int, ...] = DESK_LEVEL_CHANNELS,
        in_channels: int = 1,
        seed: int = 0,
    ) -> "FeatureExtractorParams":
        """Kaiming-uniform weights, zero biases, from a named stream."""
        tensors: dict[str, np.ndarray] = {}
        shapes = FeatureExtractorParams._block_shapes(tuple(level_channels), in_channels)
        for block, (cin, cout) in shapes.items():
            for layer, ci in (("c1", cin), ("c2", cout)):
                rng = stream_rng(seed, "fln", block, layer)
                fan_in = ci * 9
                bound = np.sqrt(6.0 / fan_in)
                tensors[f"{block}.{layer}.w"] = rng.uniform(
                    -bound, bound, size=(cout, ci, 3, 3)
                ).astype(np.float32)
                tensors[f"{block}.{layer}.b"] = np.zeros(cout, dtype=np.float32)
        return FeatureExtractorParams(tuple(level_channels), in_channels, tensors)

    @staticmethod
    def identity(levels: int = 4) -> "FeatureExtractorParams":
        """One channel per level, delta kernels: reproduces the Gaussian pyramid."""
        tensors: dict[str, np.ndarray] = {}
        delta = np.zeros((1, 1, 3, 3), dtype=np.float32)
        delta[0, 0, 1, 1] = 1.0
        for k in range(levels):
            tensors[f"enc{k}.c1.w"] = delta.copy()
            tensors[f"enc{k}.c1.b"] = np.zeros(1, dtype=np.float32)
            tensors[f"enc{k}.c2.w"] = delta.copy()
            tensors[f"enc{k}.c2.b"] = np.zeros(1, dtype=np.float32)
        skip_delta = np.zeros((1, 2, 3, 3), dtype=np.float32)
        skip_delta[0, 1, 1, 1] = 1.0  # select the encoder skip channel
        for k in range(1, levels):
            tensors[f"dec{k}.c1.w"] = skip_delta.copy()
            tensors[f"dec{k}.c1.b"] = np.zeros(1, dtype=np.float32)
            tensors[f"dec{k}.c2.w"] = delta.copy()
            tensors[f"dec{k}.c2.b"] = np.zeros(1, dtype=np.float32)
        return FeatureExtractorParams(tuple([1] * levels), 1, tensors)


def _conv_block(x: np.ndarray, tensors: dict[str, np.ndarray], block: str) -> np.ndarray:
    x = relu(conv2d_chw(x, tensors[f"{block}.c1.w"], tensors[f"{block}.c1.b"], pad=1))
    return relu(conv2d_chw(x, tensors[f"{block}.c2.w"], tensors[f"{block}.c2.b"], pad=1))


def check_input_size(width: int, height: int, levels: int) -> None:
    div = 2 ** (levels - 1)
    if width % div or height % div:
        raise DimensionError(
            f"input {width}x{height} not divisible by {div} for {levels} levels"
        )


def extract_pyramid(image: FeatureMap, params: FeatureExtractorParams) -> ImagePyramid:
    """Run the extractor; levels coarsest first, channel schedule per level."""
    n = params.levels
    check_input_size(image.width, image.height, n)
    if image.channels != params.in_channels:
        raise DimensionError(
            f"extractor wants {params.in_channels} input channels, got {image.channels}"
        )
    x = np.ascontiguousarray(image.data.transpose(2, 0, 1)).astype(np.float32)
    t = params.tensors
    skips: dict[int, np.ndarray] = {}
    for k in range(n - 1, -1, -1):  # finest encoder block first
        x = _conv_block(x, t, f"enc{k}")
        skips[k] = x
        if k > 0:
            x = gauss_downsample_chw(x)
    levels = [skips[0]]
    cur = skips[0]
    for k in range(1, n):
        merged = np.concatenate([upsample2_chw(cur), skips[k]], axis=0)
        cur = _conv_block(merged, t, f"dec{k}")
        levels.append(cur)
    return ImagePyramid(tuple(FeatureMap(lv.transpose(1, 2, 0)) for lv in levels))


def photometric_pyramid(image: FeatureMap, levels: int = 4) -> ImagePyramid:
    """Plain Gaussian pyramid of the (grayscale) image, coarsest first."""
    check_input_size(image.width, image.height, levels)
    if image.channels != 1:
        raise DimensionError("photometric pyramid expects a single-channel image")
    maps = [image]
    for _ in range(levels - 1):
        maps.append(gaussian_downsample(maps[-1]))
    return ImagePyramid(tuple(maps[::-1]))
