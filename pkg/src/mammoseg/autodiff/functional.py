"""Differentiable layer primitives over NCHW tensors.

Convolutions are lowered to a single GEMM through an im2col view; the
scatter back (col2im) loops over the k*k kernel offsets in a fixed order so
results are reproducible bit for bit.
"""
from __future__ import annotations

import contextlib
from typing import Iterator, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError, ContractViolation
from .tensor import Tensor

LEAKY_SLOPE = 0.2

# piecewise ops append their branch choices here while a recorder is open
_decisions: Optional[List[bytes]] = None


@contextlib.contextmanager
def record_decisions() -> Iterator[List[bytes]]:
    """Collect relu signs and max-pool winners of every forward in scope."""
    global _decisions
    prev, _decisions = _decisions, []
    try:
        yield _decisions
    finally:
        _decisions = prev


def _note(choice: np.ndarray) -> None:
    if _decisions is not None:
        _decisions.append(np.packbits(choice).tobytes() if choice.dtype == bool else choice.tobytes())


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv_transpose_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + k


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def _col2im(cols_t: np.ndarray, out_shape: tuple, k: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    # cols_t: (C, k, k, N, ho, wo), so every kernel offset is one contiguous
    # block; summed into (N, C, Hp, Wp)
    n, c, hp, wp = out_shape
    out = np.zeros((c, n, hp, wp), dtype=cols_t.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + hs : stride, j : j + ws : stride] += cols_t[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.  ``weight`` is (out, in, k, k)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ContractViolation(f"conv2d expects rank-4 input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c or k != k2:
        raise ContractViolation(f"conv2d weight {weight.shape} does not fit input {x.shape}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"bad conv geometry stride={stride} padding={padding}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ConfigurationError(f"conv2d output extent {ho}x{wo} < 1 for input {h}x{w}, k={k}")
    xp = _pad(x.data, padding)
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = weight.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o)
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gm.T).reshape(c, k, k, n, ho, wo)
            gx = _col2im(dcols, xp.shape, k, stride, ho, wo)
            if padding:
                gx = gx[:, :, padding:-padding, padding:-padding]
            gx = np.ascontiguousarray(gx)
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    return Tensor._from_op(out, parents, back, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` with the same geometry.  ``weight`` is (in, out, k, k)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ContractViolation(f"conv_transpose2d expects rank-4 tensors, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    ci, o, k, k2 = weight.shape
    if ci != c or k != k2:
        raise ContractViolation(f"conv_transpose2d weight {weight.shape} does not fit input {x.shape}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"bad conv geometry stride={stride} padding={padding}")
    ho = conv_transpose_output_size(h, k, stride, padding)
    wo = conv_transpose_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ConfigurationError(f"conv_transpose2d output extent {ho}x{wo} < 1")
    xc = x.data.transpose(1, 0, 2, 3).reshape(c, -1)
    wmat = weight.data.reshape(c, -1)
    cols = (wmat.T @ xc).reshape(o, k, k, n, h, w)
    hp, wp = (h - 1) * stride + k, (w - 1) * stride + k
    full = _col2im(cols, (n, o, hp, wp), k, stride, h, w)
    out = full[:, :, padding : hp - padding, padding : wp - padding]
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gcols = _im2col(_pad(g, padding), k, stride, h, w)
        gx = None
        if x.requires_grad:
            gx = np.ascontiguousarray((gcols @ wmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2))
        gw = (xc @ gcols).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._from_op(out, parents, back, "conv_transpose2d")


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation.

    In training mode the batch statistics (biased variance) normalise the
    input and the running buffers are updated in place with ``momentum``;
    the running variance uses the unbiased estimate.
    """
    if x.ndim != 4:
        raise ContractViolation(f"batchnorm2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ContractViolation(f"batchnorm2d affine params must have length {c}")
    shape = (1, c, 1, 1)
    if training:
        m = n * h * w
        if m < 2:
            raise ContractViolation("batchnorm2d in train mode needs batch*H*W >= 2")
        mean = x.data.mean(axis=(0, 2, 3))
        centred = x.data - mean.reshape(shape)
        var = (centred * centred).mean(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        m = None
        mean = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
        centred = x.data - mean.reshape(shape)
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    xhat = centred * invstd.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def back(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data.reshape(shape)
        if training:
            gx = (invstd.reshape(shape) / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3)).reshape(shape)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
            )
        else:
            gx = dxhat * invstd.reshape(shape)
        return gx, gg, gb

    return Tensor._from_op(out, (x, gamma, beta), back, "batchnorm2d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note(mask)
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    pos = x.data > 0
    _note(pos)
    scale = np.where(pos, 1.0, slope).astype(x.dtype)
    return Tensor._from_op(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ContractViolation(f"softmax_rows expects (batch, class), got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)
    return Tensor._from_op(out, (x,), back, "softmax")


ACTIVATIONS = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softmax_rows": softmax_rows,
}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown activation {kind!r}") from None
    return fn(x)


def maxpool2d(x: Tensor, k: int = 4, stride: int = 4) -> Tensor:
    """Max over k*k windows; the gradient goes to the first maximal element."""
    if x.ndim != 4:
        raise ContractViolation(f"maxpool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if h < k or w < k:
        raise ContractViolation(f"maxpool2d window {k} exceeds extent {h}x{w}")
    ho = conv_output_size(h, k, stride, 0)
    wo = conv_output_size(w, k, stride, 0)
    tiled = k == stride and h % k == 0 and w % k == 0
    if tiled:
        flat = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    else:
        win = sliding_window_view(x.data, (k, k), axis=(2, 3))
        win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
        flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    _note(arg)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g):
        if tiled:
            # one-hot of the first argmax, scattered back through the tiling
            hot = (arg[..., None] == np.arange(k * k)) * g[..., None]
            gx = hot.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
            return (gx.astype(x.dtype, copy=False),)
        gx = np.zeros_like(x.data)
        hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for idx in range(k * k):
            i, j = divmod(idx, k)
            gx[:, :, i : i + hs : stride, j : j + ws : stride] += g * (arg == idx)
        return (gx,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), back, "maxpool2d")


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], active: bool = True) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p)."""
    if not 0 <= p < 1:
        raise ContractViolation(f"dropout probability must be in [0, 1), got {p}")
    if not active or p == 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) * np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    return Tensor._from_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ContractViolation(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ContractViolation(f"dense: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return Tensor._from_op(out, parents, back, "dense")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))
    return Tensor._from_op(out, tuple(tensors), back, "concat")


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)
