"""Low-dimensional depth parameterization D = relu(w . B).

The basis substitutes for a depth-prediction network: map 1 is the ground
truth normalized to unit mean, maps 2..N are the lowest-frequency 2D cosine
modes scaled to 10% of the mean depth.  The prior weights w* therefore decode
to the ground truth exactly, and the remaining coordinates span smooth,
zero-mean deformations of it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError
from .image_io import load_pfm, save_pfm

# Fraction of mean depth given to each cosine deformation mode.
MODE_AMPLITUDE = 0.1

# Pre-activations at or below zero decode to zero depth with zero gradient.
_KINK = 0.0


@dataclass(frozen=True)
class DepthBasis:
    """Stack of basis maps, shape (n, height, width), plus the prior w*."""

    maps: np.ndarray
    w_star: np.ndarray

    def __post_init__(self) -> None:
        maps = np.asarray(self.maps, dtype=np.float64)
        w = np.asarray(self.w_star, dtype=np.float64).reshape(-1)
        if maps.ndim != 3:
            raise DimensionError(f"basis maps need 3 dims, got {maps.ndim}")
        if w.shape[0] != maps.shape[0]:
            raise DimensionError(
                f"w* has {w.shape[0]} entries for {maps.shape[0]} basis maps"
            )
        maps.flags.writeable = False
        w.flags.writeable = False
        object.__setattr__(self, "maps", maps)
        object.__setattr__(self, "w_star", w)

    @property
    def n(self) -> int:
        return self.maps.shape[0]

    @property
    def height(self) -> int:
        return self.maps.shape[1]

    @property
    def width(self) -> int:
        return self.maps.shape[2]


def _cosine_mode_orders(count: int) -> list[tuple[int, int]]:
    """(p, q) frequency pairs sorted by p^2 + q^2, excluding the constant."""
    bound = int(np.ceil(np.sqrt(count))) + 2
    pairs = [
        (p, q)
        for p in range(bound)
        for q in range(bound)
        if (p, q) != (0, 0)
    ]
    pairs.sort(key=lambda pq: (pq[0] ** 2 + pq[1] ** 2, pq[0], pq[1]))
    return pairs[:count]


def cosine_mode(p: int, q: int, height: int, width: int) -> np.ndarray:
    """Separable DCT-II mode; zero mean over the grid for (p, q) != (0, 0)."""
    us = np.cos(np.pi * p * (np.arange(width) + 0.5) / width)
    vs = np.cos(np.pi * q * (np.arange(height) + 0.5) / height)
    return np.outer(vs, us)


def build_basis(gt_depth: np.ndarray, n: int = 8) -> DepthBasis:
    """Basis whose prior weights reproduce gt_depth exactly."""
    gt = np.asarray(gt_depth, dtype=np.float64)
    if gt.ndim != 2:
        raise DimensionError(f"depth map needs 2 dims, got {gt.ndim}")
    if n < 1:
        raise DimensionError("basis needs at least the depth map itself")
    if np.any(gt <= 0.0):
        raise DimensionError("ground-truth depth must be positive everywhere")
    mean = float(gt.mean())
    maps = np.empty((n, gt.shape[0], gt.shape[1]), dtype=np.float64)
    maps[0] = gt / mean
    for i, (p, q) in enumerate(_cosine_mode_orders(n - 1)):
        maps[i + 1] = MODE_AMPLITUDE * mean * cosine_mode(p, q, gt.shape[0], gt.shape[1])
    w_star = np.zeros(n)
    w_star[0] = mean
    return DepthBasis(maps, w_star)


def decode_depth(w: np.ndarray, basis: DepthBasis) -> np.ndarray:
    """D = relu(sum_k w_k B_k), shape (height, width)."""
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.shape[0] != basis.n:
        raise DimensionError(f"weight count {w.shape[0]} != basis size {basis.n}")
    pre = np.tensordot(w, basis.maps, axes=1)
    return np.maximum(pre, _KINK)


def depth_jacobian(
    w: np.ndarray, basis: DepthBasis, pixels: np.ndarray
) -> np.ndarray:
    """dD/dw at integer pixels, shape (M, n).

    Rows vanish where the pre-activation is non-positive: the relu
    subgradient at the kink is taken as zero.
    """
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    pixels = np.asarray(pixels)
    us = pixels[:, 0].astype(np.int64)
    vs = pixels[:, 1].astype(np.int64)
    cols = basis.maps[:, vs, us]  # (n, M)
    pre = w @ cols
    jac = cols.T.copy()
    jac[pre <= _KINK] = 0.0
    return jac


def downsample_basis(basis: DepthBasis) -> DepthBasis:
    """Halve each basis map by 2x2 averaging (depth is not a feature map)."""
    if basis.width % 2 or basis.height % 2:
        raise DimensionError(f"cannot halve odd basis size {basis.width}x{basis.height}")
    h2, w2 = basis.height // 2, basis.width // 2
    pooled = basis.maps.reshape(basis.n, h2, 2, w2, 2).mean(axis=(2, 4))
    return DepthBasis(pooled, basis.w_star)


def save_basis(basis: DepthBasis, directory: str | Path) -> None:
    """Stacked PFM planes plus a JSON sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stacked = basis.maps.reshape(basis.n * basis.height, basis.width)
    save_pfm(stacked.astype(np.float32), directory / "basis.pfm")
    sidecar = {
        "n": basis.n,
        "height": basis.height,
        "width": basis.width,
        "w_star": [float(x) for x in basis.w_star],
    }
    (directory / "basis.json").write_text(json.dumps(sidecar, indent=1))


def load_basis(directory: str | Path) -> DepthBasis:
    directory = Path(directory)
    sidecar = json.loads((directory / "basis.json").read_text())
    stacked = load_pfm(directory / "basis.pfm")
    maps = stacked.reshape(sidecar["n"], sidecar["height"], sidecar["width"])
    return DepthBasis(maps.astype(np.float64), np.asarray(sidecar["w_star"]))
