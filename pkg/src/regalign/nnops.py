"""Dense tensor kernels shared by network inference and the training tape.

Everything here works on channels-first (C, H, W) arrays, stride 1.  The
backward functions return exact adjoints of their forwards, which the tape
relies on; keep the arithmetic in the two directions in sync.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError


def _im2col(x: np.ndarray, kh: int, kw: int, pad: int) -> np.ndarray:
    """(C, H, W) to (H_out * W_out, C * kh * kw) with zero padding."""
    c, h, w = x.shape
    if pad:
        xp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, pad : pad + h, pad : pad + w] = x
    else:
        xp = x
    ho = xp.shape[1] - kh + 1
    wo = xp.shape[2] - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # (C, ho, wo, kh, kw) -> (ho, wo, C, kh, kw) -> rows
    return np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(ho * wo, c * kh * kw)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int], kh: int, kw: int, pad: int) -> np.ndarray:
    """Adjoint of _im2col."""
    c, h, w = shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = hp - kh + 1
    wo = wp - kw + 1
    cols = cols.reshape(ho, wo, c, kh, kw).transpose(2, 3, 4, 0, 1)
    xp = np.zeros((c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, i : i + ho, j : j + wo] += cols[:, i, j]
    return xp[:, pad : pad + h, pad : pad + w] if pad else xp


def conv2d_chw(
    x: np.ndarray, w: np.ndarray, b: np.ndarray | None, pad: int
) -> np.ndarray:
    """Correlation with OIHW weights, zero padding, stride 1."""
    co, ci, kh, kw = w.shape
    if x.shape[0] != ci:
        raise DimensionError(f"conv input has {x.shape[0]} channels, weight wants {ci}")
    cols = _im2col(x, kh, kw, pad)
    out = cols @ w.reshape(co, -1).T
    if b is not None:
        out += b
    ho = x.shape[1] + 2 * pad - kh + 1
    wo = x.shape[2] + 2 * pad - kw + 1
    return np.ascontiguousarray(out.T.reshape(co, ho, wo))


def conv2d_chw_backward(
    x: np.ndarray, w: np.ndarray, gy: np.ndarray, pad: int, with_bias: bool
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    co, ci, kh, kw = w.shape
    gy2 = gy.reshape(co, -1).T  # (pixels, co)
    cols = _im2col(x, kh, kw, pad)
    gw = (gy2.T @ cols).reshape(co, ci, kh, kw)
    gcols = gy2 @ w.reshape(co, -1)
    gx = _col2im(gcols, x.shape, kh, kw, pad)
    gb = gy2.sum(axis=0) if with_bias else None
    return gx, gw, gb


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def avg_pool2_chw(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"cannot 2x2-pool odd size {h}x{w}")
    return x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def avg_pool2_chw_adjoint(gy: np.ndarray) -> np.ndarray:
    c, h2, w2 = gy.shape
    out = np.empty((c, h2 * 2, w2 * 2), dtype=gy.dtype)
    q = gy * 0.25
    out[:, 0::2, 0::2] = q
    out[:, 0::2, 1::2] = q
    out[:, 1::2, 0::2] = q
    out[:, 1::2, 1::2] = q
    return out


def _reflect_indices(n: int, pad: int) -> np.ndarray:
    """Source index per padded position under mirror-101 reflection."""
    idx = np.arange(-pad, n + pad)
    idx = np.abs(idx)
    over = idx > n - 1
    idx[over] = 2 * (n - 1) - idx[over]
    return idx


def pad_reflect_chw(x: np.ndarray, pad: int) -> np.ndarray:
    iv = _reflect_indices(x.shape[1], pad)
    iu = _reflect_indices(x.shape[2], pad)
    return x[:, iv][:, :, iu]


def pad_reflect_chw_adjoint(gy: np.ndarray, shape: tuple[int, int, int], pad: int) -> np.ndarray:
    c, h, w = shape
    iv = _reflect_indices(h, pad)
    iu = _reflect_indices(w, pad)
    tmp = np.zeros((c, h, w + 2 * pad), dtype=gy.dtype)
    # Fold rows, then columns; add.at needs the indexed axis in front.
    t = tmp.transpose(1, 0, 2)
    np.add.at(t, iv, gy.transpose(1, 0, 2))
    out = np.zeros((c, h, w), dtype=gy.dtype)
    o = out.transpose(2, 0, 1)
    np.add.at(o, iu, tmp.transpose(2, 0, 1))
    return out


_GAUSS5 = None


def gauss5_1d() -> np.ndarray:
    global _GAUSS5
    if _GAUSS5 is None:
        xs = np.arange(-2, 3, dtype=np.float64)
        k = np.exp(-0.5 * xs * xs)
        _GAUSS5 = k / k.sum()
    return _GAUSS5


def gauss5_depthwise_weights(channels: int, dtype=np.float64) -> np.ndarray:
    """Dense OIHW weights realizing a per-channel 5x5 Gaussian."""
    k1 = gauss5_1d()
    k2 = np.outer(k1, k1)
    w = np.zeros((channels, channels, 5, 5), dtype=dtype)
    for c in range(channels):
        w[c, c] = k2
    return w


def upsample2_indices(h: int, w: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Corner indices and fractions for aligned-corner 2x upsampling."""
    us = np.arange(2 * w, dtype=np.float64) * (w - 1) / (2 * w - 1) if w > 1 else np.zeros(2 * w)
    vs = np.arange(2 * h, dtype=np.float64) * (h - 1) / (2 * h - 1) if h > 1 else np.zeros(2 * h)
    u0 = np.minimum(us.astype(np.int64), max(w - 2, 0))
    v0 = np.minimum(vs.astype(np.int64), max(h - 2, 0))
    return v0, vs - v0, u0, us - u0


def upsample2_chw(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    v0, fv, u0, fu = upsample2_indices(h, w)
    fv = fv.astype(x.dtype)[None, :, None]
    fu = fu.astype(x.dtype)[None, None, :]
    v1 = np.minimum(v0 + 1, h - 1)
    u1 = np.minimum(u0 + 1, w - 1)
    x00 = x[:, v0][:, :, u0]
    x01 = x[:, v0][:, :, u1]
    x10 = x[:, v1][:, :, u0]
    x11 = x[:, v1][:, :, u1]
    return (
        x00 * (1 - fv) * (1 - fu)
        + x01 * (1 - fv) * fu
        + x10 * fv * (1 - fu)
        + x11 * fv * fu
    )


def upsample2_chw_adjoint(gy: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    c, h, w = shape
    v0, fv, u0, fu = upsample2_indices(h, w)
    v1 = np.minimum(v0 + 1, h - 1)
    u1 = np.minimum(u0 + 1, w - 1)
    fv = fv.astype(gy.dtype)[None, :, None]
    fu = fu.astype(gy.dtype)[None, None, :]
    out = np.zeros((c, h, w), dtype=gy.dtype)
    o = out.transpose(1, 0, 2)

    def fold_rows(weighted: np.ndarray, rows: np.ndarray) -> np.ndarray:
        buf = np.zeros((h, c, 2 * w), dtype=gy.dtype)
        np.add.at(buf, rows, weighted.transpose(1, 0, 2))
        return buf

    for rows, wv in ((v0, 1 - fv), (v1, fv)):
        buf = fold_rows(gy * wv, rows)  # (h, c, 2w)
        for cols, wu in ((u0, (1 - fu)[0]), (u1, fu[0])):
            b2 = (buf * wu[None]).transpose(2, 0, 1)  # (2w, h, c)
            tgt = o.transpose(2, 0, 1)  # (w, h, c)
            np.add.at(tgt, cols, b2)
    return out


def gauss_downsample_chw(x: np.ndarray) -> np.ndarray:
    """Reflect-padded 5x5 Gaussian followed by 2x2 mean, per channel."""
    k = gauss5_1d().astype(x.dtype)
    xp = pad_reflect_chw(x, 2)
    tmp = np.zeros((x.shape[0], xp.shape[1], x.shape[2]), dtype=x.dtype)
    for i in range(5):
        tmp += k[i] * xp[:, :, i : i + x.shape[2]]
    sm = np.zeros_like(x)
    for i in range(5):
        sm += k[i] * tmp[:, i : i + x.shape[1], :]
    return avg_pool2_chw(sm)


def gauss_downsample_chw_adjoint(gy: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    c, h, w = shape
    k = gauss5_1d().astype(gy.dtype)
    gsm = avg_pool2_chw_adjoint(gy)
    gtmp = np.zeros((c, h + 4, w), dtype=gy.dtype)
    for i in range(5):
        gtmp[:, i : i + h, :] += k[i] * gsm
    gxp = np.zeros((c, h + 4, w + 4), dtype=gy.dtype)
    for i in range(5):
        gxp[:, :, i : i + w] += k[i] * gtmp
    return pad_reflect_chw_adjoint(gxp, shape, 2)
