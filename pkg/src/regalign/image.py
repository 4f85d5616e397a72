"""Multi-channel images, sampling, and pyramid building blocks.

Pixel data is stored row-major (height, width, channels), float32 by default.
Reductions accumulate in float64.  Sampling outside the grid never
extrapolates: it flags the sample invalid instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError

# 5x5 binomial-normalized Gaussian, sigma = 1, used before every 2x2 pool.
_GAUSS_1D = None


def _gauss_kernel_1d() -> np.ndarray:
    global _GAUSS_1D
    if _GAUSS_1D is None:
        x = np.arange(-2, 3, dtype=np.float64)
        k = np.exp(-0.5 * x * x)
        _GAUSS_1D = k / k.sum()
    return _GAUSS_1D


@dataclass(frozen=True)
class FeatureMap:
    """Dense map of per-pixel feature vectors."""

    data: np.ndarray  # (height, width, channels)

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise DimensionError(f"feature map needs 2 or 3 dims, got {arr.ndim}")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class ImagePyramid:
    """Levels ordered coarsest first; each level doubles width and height."""

    levels: tuple[FeatureMap, ...]

    def __post_init__(self) -> None:
        levels = tuple(self.levels)
        for a, b in zip(levels, levels[1:]):
            if b.width != 2 * a.width or b.height != 2 * a.height:
                raise DimensionError(
                    f"pyramid level {b.width}x{b.height} does not double {a.width}x{a.height}"
                )
        object.__setattr__(self, "levels", levels)

    def __len__(self) -> int:
        return len(self.levels)


@dataclass(frozen=True)
class SampleResult:
    value: np.ndarray  # (channels,)
    valid: bool


def bilinear_many(
    data: np.ndarray, coords: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Sample (H, W, C) data at float (M, 2) coords.

    A sample is valid only when its whole bilinear footprint lies inside
    [0, W-1] x [0, H-1]; invalid samples return zeros.  Exact integer
    coordinates reproduce stored values exactly.
    """
    h, w = data.shape[0], data.shape[1]
    u = coords[:, 0]
    v = coords[:, 1]
    with np.errstate(invalid="ignore"):
        valid = (u >= 0.0) & (u <= w - 1.0) & (v >= 0.0) & (v <= h - 1.0)
    uc = np.where(valid, u, 0.0)
    vc = np.where(valid, v, 0.0)
    # Clamp the base corner so u = W-1 keeps a footprint inside the grid.
    u0 = np.minimum(uc.astype(np.int64), w - 2) if w > 1 else np.zeros_like(uc, dtype=np.int64)
    v0 = np.minimum(vc.astype(np.int64), h - 2) if h > 1 else np.zeros_like(vc, dtype=np.int64)
    fu = (uc - u0).astype(data.dtype)
    fv = (vc - v0).astype(data.dtype)
    flat = data.reshape(-1, data.shape[2])
    base = v0 * w + u0
    w00 = ((1.0 - fu) * (1.0 - fv))[:, None]
    w10 = (fu * (1.0 - fv))[:, None]
    w01 = ((1.0 - fu) * fv)[:, None]
    w11 = (fu * fv)[:, None]
    out = w00 * flat[base]
    out += w10 * flat[base + 1]
    out += w01 * flat[base + w]
    out += w11 * flat[base + w + 1]
    out[~valid] = 0.0
    return out, valid


def bilinear_sample(fmap: FeatureMap, u: float, v: float) -> SampleResult:
    coords = np.array([[u, v]], dtype=np.float64)
    vals, valid = bilinear_many(fmap.data, coords)
    return SampleResult(vals[0], bool(valid[0]))


def _smooth_reflect(data: np.ndarray) -> np.ndarray:
    """Separable 5x5 Gaussian with mirrored borders, float64 accumulation."""
    k = _gauss_kernel_1d()
    padded = np.pad(data.astype(np.float64), ((2, 2), (2, 2), (0, 0)), mode="reflect")
    # Horizontal pass.
    tmp = np.zeros((padded.shape[0], data.shape[1], data.shape[2]), dtype=np.float64)
    for i in range(5):
        tmp += k[i] * padded[:, i : i + data.shape[1], :]
    out = np.zeros((data.shape[0], data.shape[1], data.shape[2]), dtype=np.float64)
    for i in range(5):
        out += k[i] * tmp[i : i + data.shape[0], :, :]
    return out


def gaussian_downsample(fmap: FeatureMap) -> FeatureMap:
    """Smooth with a 5x5 Gaussian (sigma 1, reflected borders), then 2x2 mean."""
    if fmap.width % 2 or fmap.height % 2:
        raise DimensionError(f"cannot halve odd size {fmap.width}x{fmap.height}")
    sm = _smooth_reflect(fmap.data)
    h2, w2 = fmap.height // 2, fmap.width // 2
    pooled = sm.reshape(h2, 2, w2, 2, fmap.channels).mean(axis=(1, 3))
    return FeatureMap(pooled.astype(fmap.data.dtype))


def upsample_bilinear(fmap: FeatureMap) -> FeatureMap:
    """Double width and height; output corners coincide with input corners."""
    h, w, c = fmap.height, fmap.width, fmap.channels
    h2, w2 = 2 * h, 2 * w
    # Aligned corners: output index i maps to input coordinate i*(n-1)/(2n-1).
    us = np.arange(w2, dtype=np.float64) * (w - 1) / (w2 - 1) if w > 1 else np.zeros(w2)
    vs = np.arange(h2, dtype=np.float64) * (h - 1) / (h2 - 1) if h > 1 else np.zeros(h2)
    grid = np.stack(np.meshgrid(us, vs), axis=-1).reshape(-1, 2)
    vals, valid = bilinear_many(fmap.data, grid)
    assert valid.all()
    return FeatureMap(vals.reshape(h2, w2, c).astype(fmap.data.dtype))


def numerical_gradient(fmap: FeatureMap) -> tuple[FeatureMap, FeatureMap]:
    """Per-channel grid gradients (d/du, d/dv).

    Central differences in the interior, one-sided at the 1-pixel border.
    """
    data = fmap.data.astype(np.float64)
    gu = np.empty_like(data)
    gv = np.empty_like(data)
    gu[:, 1:-1, :] = 0.5 * (data[:, 2:, :] - data[:, :-2, :])
    gu[:, 0, :] = data[:, 1, :] - data[:, 0, :]
    gu[:, -1, :] = data[:, -1, :] - data[:, -2, :]
    gv[1:-1, :, :] = 0.5 * (data[2:, :, :] - data[:-2, :, :])
    gv[0, :, :] = data[1, :, :] - data[0, :, :]
    gv[-1, :, :] = data[-1, :, :] - data[-2, :, :]
    dt = fmap.data.dtype
    return FeatureMap(gu.astype(dt)), FeatureMap(gv.astype(dt))


def pixel_grid(width: int, height: int) -> np.ndarray:
    """All integer pixel coordinates in row-major order, shape (H*W, 2)."""
    us, vs = np.meshgrid(np.arange(width), np.arange(height))
    return np.stack([us.reshape(-1), vs.reshape(-1)], axis=1).astype(np.float64)
