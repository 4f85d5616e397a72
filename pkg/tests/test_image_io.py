import numpy as np
import pytest

from regalign.errors import CheckpointError, DimensionError
from regalign.image import FeatureMap
from regalign.image_io import (
    load_checkpoint,
    load_pfm,
    load_pgm,
    load_png,
    save_checkpoint,
    save_pfm,
    save_pgm,
    save_png,
)

from conftest import philox


def test_png_gray_roundtrip_bit_exact(tmp_path):
    rng = philox(40)
    raw = rng.integers(0, 256, size=(24, 32), dtype=np.uint8)
    fm = FeatureMap((raw.astype(np.float64) / 255.0)[:, :, None].astype(np.float32))
    path = tmp_path / "img.png"
    save_png(fm, path)
    back = load_png(path)
    np.testing.assert_array_equal(
        np.rint(back.data[:, :, 0] * 255.0).astype(np.uint8), raw
    )
    assert back.data.dtype == np.float32
    assert back.data.min() >= 0.0 and back.data.max() <= 1.0


def test_png_rgb_loads_as_luma(tmp_path):
    rgb = np.zeros((4, 4, 3), dtype=np.float32)
    rgb[:, :, 0] = 1.0  # pure red
    path = tmp_path / "rgb.png"
    save_png(rgb, path)
    gray = load_png(path)
    assert gray.channels == 1
    np.testing.assert_allclose(gray.data, 0.299, atol=1e-6)


def test_pfm_roundtrip_bit_exact(tmp_path):
    rng = philox(41)
    depth = (rng.random((12, 16)) * 10.0 + 0.5).astype(np.float32)
    path = tmp_path / "depth.pfm"
    save_pfm(depth, path)
    back = load_pfm(path)
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, depth)
    # Header claims little-endian via negative scale.
    raw = path.read_bytes()
    assert raw.startswith(b"Pf\n16 12\n-1.0\n")


def test_pfm_color_roundtrip(tmp_path):
    rng = philox(42)
    arr = rng.random((6, 5, 3)).astype(np.float32)
    path = tmp_path / "c.pfm"
    save_pfm(arr, path)
    np.testing.assert_array_equal(load_pfm(path), arr)


def test_pfm_rejects_garbage(tmp_path):
    path = tmp_path / "bad.pfm"
    path.write_bytes(b"P6\n1 1\n-1.0\n\x00\x00\x00\x00")
    with pytest.raises(DimensionError):
        load_pfm(path)


def test_pgm_roundtrip(tmp_path):
    rng = philox(43)
    mask = (rng.random((8, 9)) > 0.5).astype(np.uint8) * 255
    path = tmp_path / "m.pgm"
    save_pgm(mask, path)
    np.testing.assert_array_equal(load_pgm(path), mask)


def test_checkpoint_roundtrip(tmp_path):
    rng = philox(44)
    tensors = {
        "fln.enc0.c1.w": rng.normal(size=(8, 1, 3, 3)).astype(np.float32),
        "fln.enc0.c1.b": rng.normal(size=(8,)).astype(np.float32),
        "jpn.head.w": rng.normal(size=(192, 64, 1, 1)).astype(np.float32),
        "meta.epoch": np.array([3.0], dtype=np.float32),
    }
    path = tmp_path / "model.ckpt"
    save_checkpoint(tensors, path)
    assert path.read_bytes()[:4] == b"RGNT"
    back = load_checkpoint(path)
    assert set(back) == set(tensors)
    for name in tensors:
        np.testing.assert_array_equal(back[name], tensors[name])


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
