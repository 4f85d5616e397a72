"""Minimal reverse-mode differentiation over the tensor ops used here.

A Tape records primitives in construction order, which is already a
topological order, so backward replays the list once in reverse.  Vars wrap
ndarrays; constants are Vars recorded with no inputs.  The primitive set is
exactly what the feature extractor, the Jacobian network, the warp, and the
unrolled solver need - nothing generic beyond that.

Dtype policy: ops follow numpy promotion.  Training runs f32 leaves; the
gradient-check suite promotes every leaf to f64 and expects tighter bounds.
Gradients accumulate in each variable's own dtype.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import nnops
from .errors import DimensionError, NumericalFailureError

# Taylor switch on s = theta^2.  Wider than the branch used for plain
# rotation values: the closed-form DERIVATIVES divide by s^2 and lose all
# precision long before the values do, so both branches run on series out
# to theta = 0.1 rad, where five terms reach ~1e-18 truncation.
_TAYLOR_S = 1e-2


class Var:
    __slots__ = ("data", "tape", "grad")

    def __init__(self, data: np.ndarray, tape: "Tape | None"):
        self.data = data
        self.tape = tape
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return Var(np.asarray(other, dtype=self.data.dtype), None)

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __truediv__(self, other):
        return div(self, self._lift(other))

    def __rtruediv__(self, other):
        return div(self._lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))


class Tape:
    """Recorded computation; backward visits nodes once, in reverse."""

    def __init__(self) -> None:
        self.nodes: list[tuple[Var, tuple[Var, ...], object]] = []

    def var(self, data) -> Var:
        return Var(np.asarray(data), self)

    def record(self, out_data: np.ndarray, inputs: tuple[Var, ...], vjp) -> Var:
        out = Var(out_data, self)
        self.nodes.append((out, inputs, vjp))
        return out

    def backward(self, root: Var, seed: np.ndarray | None = None) -> None:
        if root.data.ndim != 0 and seed is None:
            raise DimensionError("backward needs a scalar root or an explicit seed")
        root.grad = (
            np.ones_like(root.data) if seed is None else np.asarray(seed, dtype=root.data.dtype)
        )
        for out, inputs, vjp in reversed(self.nodes):
            if out.grad is None:
                continue
            grads = vjp(out.grad)
            for var, g in zip(inputs, grads):
                if g is None:
                    continue
                if g.shape != var.data.shape:
                    g = _sum_to_shape(g, var.data.shape)
                if var.grad is None:
                    var.grad = np.zeros_like(var.data)
                var.grad += g.astype(var.data.dtype, copy=False)


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Undo numpy broadcasting in the backward direction."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, s) in enumerate(zip(g.shape, shape)):
        if s == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(a: Var, b: Var, out_data, da, db) -> Var:
    tape = a.tape or b.tape
    if tape is None:
        return Var(out_data, None)
    return tape.record(out_data, (a, b), lambda g: (da(g), db(g)))


def add(a: Var, b: Var) -> Var:
    return _binary(a, b, a.data + b.data, lambda g: g, lambda g: g)


def sub(a: Var, b: Var) -> Var:
    return _binary(a, b, a.data - b.data, lambda g: g, lambda g: -g)


def mul(a: Var, b: Var) -> Var:
    return _binary(a, b, a.data * b.data, lambda g: g * b.data, lambda g: g * a.data)


def div(a: Var, b: Var) -> Var:
    out = a.data / b.data
    return _binary(a, b, out, lambda g: g / b.data, lambda g: -g * out / b.data)


def neg(a: Var) -> Var:
    if a.tape is None:
        return Var(-a.data, None)
    return a.tape.record(-a.data, (a,), lambda g: (-g,))


def matmul(a: Var, b: Var) -> Var:
    out = a.data @ b.data
    return _binary(
        a, b, out,
        lambda g: g @ np.swapaxes(b.data, -1, -2),
        lambda g: np.swapaxes(a.data, -1, -2) @ g,
    )


def bmm(a: Var, b: Var) -> Var:
    """Batched matmul, (B, M, K) @ (B, K, N); same kernel as matmul."""
    return matmul(a, b)


def transpose(a: Var, axes: tuple) -> Var:
    inverse = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))
    if a.tape is None:
        return Var(a.data.transpose(axes), None)
    return a.tape.record(
        a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),)
    )


def reshape(a: Var, shape: tuple) -> Var:
    old = a.data.shape
    if a.tape is None:
        return Var(a.data.reshape(shape), None)
    return a.tape.record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts: list[Var], axis: int) -> Var:
    tape = next((p.tape for p in parts if p.tape is not None), None)
    out = np.concatenate([p.data for p in parts], axis=axis)
    if tape is None:
        return Var(out, None)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return tape.record(out, tuple(parts), vjp)


def gather_rows(a: Var, index: np.ndarray) -> Var:
    index = np.asarray(index, dtype=np.int64)
    if a.tape is None:
        return Var(a.data[index], None)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return a.tape.record(a.data[index], (a,), vjp)


def sum_all(a: Var) -> Var:
    if a.tape is None:
        return Var(a.data.sum(), None)
    return a.tape.record(
        a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),)
    )


def sum_axis(a: Var, axis: int) -> Var:
    if a.tape is None:
        return Var(a.data.sum(axis=axis), None)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    return a.tape.record(a.data.sum(axis=axis), (a,), vjp)


def mean_all(a: Var) -> Var:
    n = a.data.size
    return sum_all(a) * (1.0 / n)


def relu(a: Var) -> Var:
    mask = a.data > 0
    if a.tape is None:
        return Var(np.where(mask, a.data, 0.0), None)
    return a.tape.record(
        np.where(mask, a.data, 0.0), (a,), lambda g: (np.where(mask, g, 0.0),)
    )


def absolute(a: Var) -> Var:
    sign = np.sign(a.data)  # subgradient 0 at the kink
    if a.tape is None:
        return Var(np.abs(a.data), None)
    return a.tape.record(np.abs(a.data), (a,), lambda g: (g * sign,))


def sqrt(a: Var) -> Var:
    out = np.sqrt(a.data)
    if a.tape is None:
        return Var(out, None)
    return a.tape.record(out, (a,), lambda g: (g * 0.5 / out,))


def log1p(a: Var) -> Var:
    if a.tape is None:
        return Var(np.log1p(a.data), None)
    return a.tape.record(np.log1p(a.data), (a,), lambda g: (g / (1.0 + a.data),))


def square(a: Var) -> Var:
    return mul(a, a)


def conv2d(x: Var, w: Var, b: Var | None, pad: int) -> Var:
    bias = b.data if b is not None else None
    out = nnops.conv2d_chw(x.data, w.data, bias, pad=pad)
    tape = x.tape or w.tape or (b.tape if b is not None else None)
    if tape is None:
        return Var(out, None)
    inputs = (x, w) if b is None else (x, w, b)

    def vjp(g):
        gx, gw, gb = nnops.conv2d_chw_backward(
            x.data, w.data, g, pad=pad, with_bias=b is not None
        )
        return (gx, gw) if b is None else (gx, gw, gb)

    return tape.record(out, inputs, vjp)


def gauss_downsample(x: Var) -> Var:
    out = nnops.gauss_downsample_chw(x.data)
    if x.tape is None:
        return Var(out, None)
    return x.tape.record(
        out, (x,), lambda g: (nnops.gauss_downsample_chw_adjoint(g, x.data.shape),)
    )


def upsample2(x: Var) -> Var:
    out = nnops.upsample2_chw(x.data)
    if x.tape is None:
        return Var(out, None)
    return x.tape.record(
        out, (x,), lambda g: (nnops.upsample2_chw_adjoint(g, x.data.shape),)
    )


def avg_pool2(x: Var) -> Var:
    out = nnops.avg_pool2_chw(x.data)
    if x.tape is None:
        return Var(out, None)
    return x.tape.record(out, (x,), lambda g: (nnops.avg_pool2_chw_adjoint(g),))


def grid_gradient(x: Var) -> tuple[Var, Var]:
    """Central-difference feature gradients of an (H, W, C) map, on tape.

    Forward matches image.numerical_gradient: central interior, one-sided
    1-px borders.  The op is linear; the adjoint is the stencil transpose.
    """
    data = x.data
    gu = np.empty_like(data)
    gv = np.empty_like(data)
    gu[:, 1:-1] = 0.5 * (data[:, 2:] - data[:, :-2])
    gu[:, 0] = data[:, 1] - data[:, 0]
    gu[:, -1] = data[:, -1] - data[:, -2]
    gv[1:-1, :] = 0.5 * (data[2:, :] - data[:-2, :])
    gv[0, :] = data[1, :] - data[0, :]
    gv[-1, :] = data[-1, :] - data[-2, :]
    if x.tape is None:
        return Var(gu, None), Var(gv, None)

    def vjp_u(g):
        gx = np.zeros_like(data)
        gx[:, 2:] += 0.5 * g[:, 1:-1]
        gx[:, :-2] -= 0.5 * g[:, 1:-1]
        gx[:, 1] += g[:, 0]
        gx[:, 0] -= g[:, 0]
        gx[:, -1] += g[:, -1]
        gx[:, -2] -= g[:, -1]
        return (gx,)

    def vjp_v(g):
        gx = np.zeros_like(data)
        gx[2:, :] += 0.5 * g[1:-1, :]
        gx[:-2, :] -= 0.5 * g[1:-1, :]
        gx[1, :] += g[0, :]
        gx[0, :] -= g[0, :]
        gx[-1, :] += g[-1, :]
        gx[-2, :] -= g[-1, :]
        return (gx,)

    return x.tape.record(gu, (x,), vjp_u), x.tape.record(gv, (x,), vjp_v)


def bilinear(data: Var, coords: Var) -> tuple[Var, np.ndarray]:
    """Sample an (H, W, C) map at (M, 2) coordinates; both inputs get grads.

    Returns (samples (M, C), valid mask).  Forward replicates the sampling
    rule used everywhere else (full footprint inside the grid, base corner
    clamped so the far edge samples exactly); invalid rows are zero and
    receive zero gradient.  The coordinate gradient is the interpolant's
    exact piecewise-bilinear derivative.
    """
    d, c = data.data, coords.data
    h, w = d.shape[0], d.shape[1]
    with np.errstate(invalid="ignore"):
        valid = (
            np.isfinite(c).all(axis=1)
            & (c[:, 0] >= 0.0) & (c[:, 0] <= w - 1.0)
            & (c[:, 1] >= 0.0) & (c[:, 1] <= h - 1.0)
        )
    u = np.where(valid, c[:, 0], 0.0)
    v = np.where(valid, c[:, 1], 0.0)
    u0 = np.minimum(np.floor(u), w - 2).astype(np.int64)
    v0 = np.minimum(np.floor(v), h - 2).astype(np.int64)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    c00 = d[v0, u0]
    c01 = d[v0, u0 + 1]
    c10 = d[v0 + 1, u0]
    c11 = d[v0 + 1, u0 + 1]
    out = (
        c00 * (1 - fu) * (1 - fv)
        + c01 * fu * (1 - fv)
        + c10 * (1 - fu) * fv
        + c11 * fu * fv
    )
    out[~valid] = 0.0
    tape = data.tape or coords.tape
    if tape is None:
        return Var(out, None), valid

    def vjp(g):
        g = np.where(valid[:, None], g, 0.0)
        gd = np.zeros_like(d)
        np.add.at(gd, (v0, u0), g * (1 - fu) * (1 - fv))
        np.add.at(gd, (v0, u0 + 1), g * fu * (1 - fv))
        np.add.at(gd, (v0 + 1, u0), g * (1 - fu) * fv)
        np.add.at(gd, (v0 + 1, u0 + 1), g * fu * fv)
        du = (c01 - c00) * (1 - fv) + (c11 - c10) * fv
        dv = (c10 - c00) * (1 - fu) + (c11 - c01) * fu
        gc = np.zeros_like(c)
        gc[:, 0] = (g * du).sum(axis=1)
        gc[:, 1] = (g * dv).sum(axis=1)
        gc[~valid] = 0.0
        return gd, gc

    return tape.record(out, (data, coords), vjp), valid


def cho_solve_sym(a: Var, b: Var) -> Var:
    """Solve a symmetric positive-definite system on tape.

    Backward uses the implicit-function identities gb = A^-1 g and
    gA = -gb x^T, reusing the forward factorization.
    """
    try:
        factor = cho_factor(a.data, lower=True, check_finite=False)
        x = cho_solve(factor, b.data, check_finite=False)
    except (LinAlgError, ValueError) as exc:
        raise NumericalFailureError(f"tape solve failed: {exc}") from exc
    tape = a.tape or b.tape
    if tape is None:
        return Var(x, None)

    def vjp(g):
        gb = cho_solve(factor, g, check_finite=False)
        ga = -np.outer(gb, x)
        return ga, gb

    return tape.record(x, (a, b), vjp)


def _rot_primitive(a: Var, value_fn, grad_fn) -> Var:
    s = a.data
    out = value_fn(s)
    if a.tape is None:
        return Var(out, None)
    return a.tape.record(out, (a,), lambda g: (g * grad_fn(s),))


def _coef_a(s):
    if s < _TAYLOR_S:
        return 1.0 - s / 6.0 + s * s / 120.0 - s**3 / 5040.0 + s**4 / 362880.0
    t = np.sqrt(s)
    return np.sin(t) / t


def _coef_a_grad(s):
    if s < _TAYLOR_S:
        return -1.0 / 6.0 + s / 60.0 - s * s / 1680.0 + s**3 / 90720.0
    t = np.sqrt(s)
    return (t * np.cos(t) - np.sin(t)) / (2.0 * t**3)


def _coef_b(s):
    if s < _TAYLOR_S:
        return 0.5 - s / 24.0 + s * s / 720.0 - s**3 / 40320.0 + s**4 / 3628800.0
    t = np.sqrt(s)
    return (1.0 - np.cos(t)) / s


def _coef_b_grad(s):
    if s < _TAYLOR_S:
        return -1.0 / 24.0 + s / 360.0 - s * s / 13440.0 + s**3 / 907200.0
    t = np.sqrt(s)
    return (t * np.sin(t) - 2.0 * (1.0 - np.cos(t))) / (2.0 * s * s)


def _coef_c(s):
    if s < _TAYLOR_S:
        return 1.0 / 6.0 - s / 120.0 + s * s / 5040.0 - s**3 / 362880.0
    t = np.sqrt(s)
    return (t - np.sin(t)) / (s * t)


def _coef_c_grad(s):
    if s < _TAYLOR_S:
        return -1.0 / 120.0 + s / 2520.0 - s * s / 120960.0 + s**3 / 9979200.0
    t = np.sqrt(s)
    return ((1.0 - np.cos(t)) * t - 3.0 * (t - np.sin(t))) / (2.0 * s * s * t)


def rot_coef_a(s: Var) -> Var:
    """sin(theta)/theta as a function of s = theta^2, Taylor-branched."""
    return _rot_primitive(s, _coef_a, _coef_a_grad)


def rot_coef_b(s: Var) -> Var:
    """(1 - cos(theta))/theta^2 as a function of s = theta^2."""
    return _rot_primitive(s, _coef_b, _coef_b_grad)


def rot_coef_c(s: Var) -> Var:
    """(theta - sin(theta))/theta^3 as a function of s = theta^2."""
    return _rot_primitive(s, _coef_c, _coef_c_grad)


# Constant embedding taking a rotation 3-vector to its flattened skew matrix:
# skew(w).reshape(9) = _SKEW_EMBED @ w.
_SKEW_EMBED = np.zeros((9, 3))
_SKEW_EMBED[1, 2] = -1.0
_SKEW_EMBED[2, 1] = 1.0
_SKEW_EMBED[3, 2] = 1.0
_SKEW_EMBED[5, 0] = -1.0
_SKEW_EMBED[6, 1] = -1.0
_SKEW_EMBED[7, 0] = 1.0


def se3_exp_tape(tape: Tape, delta: Var) -> tuple[Var, Var]:
    """Exponential of a twist (omega, nu) as tape ops: returns (R, t)."""
    omega = gather_rows(delta, np.arange(3))
    nu = gather_rows(delta, np.arange(3, 6))
    s = sum_all(square(omega))
    embed = Var(_SKEW_EMBED.astype(delta.data.dtype), None)
    k = reshape(matmul(embed, reshape(omega, (3, 1))), (3, 3))
    k2 = matmul(k, k)
    eye = Var(np.eye(3, dtype=delta.data.dtype), None)
    r = add(eye, add(mul(rot_coef_a(s), k), mul(rot_coef_b(s), k2)))
    v = add(eye, add(mul(rot_coef_b(s), k), mul(rot_coef_c(s), k2)))
    t = reshape(matmul(v, reshape(nu, (3, 1))), (3,))
    return r, t
