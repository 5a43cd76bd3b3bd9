"""Differentiable array operators: forward passes and analytic backward passes.

Every operator works on 64-bit float numpy arrays in row-major order. Spatial
tensors are laid out (height, width, channels), optionally with one leading
batch axis. Each `*_backward` function is the exact reverse-mode counterpart
of its forward and is validated against central finite differences in the
test suite.
"""
from __future__ import annotations

import numpy as np

BN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operator inputs have incompatible shapes."""


def as_f64(x) -> np.ndarray:
    """Coerce input to a C-contiguous float64 array."""
    return np.ascontiguousarray(x, dtype=np.float64)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


# ---------------------------------------------------------------------------
# pointwise channel mixing


def conv1x1(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """1x1 convolution: out[..., h, w, d] = sum_c x[..., h, w, c] * w[c, d] + b[d].

    x: (..., H, W, C), w: (C, D), b: (D,).
    """
    _require(x.ndim >= 3, f"conv1x1 expects (...,H,W,C) input, got shape {x.shape}")
    _require(w.ndim == 2, f"conv1x1 weights must be rank 2 (C,D), got {w.shape}")
    _require(
        x.shape[-1] == w.shape[0],
        f"conv1x1 channel mismatch: input has {x.shape[-1]} channels, "
        f"weights expect {w.shape[0]}",
    )
    _require(b.shape == (w.shape[1],), f"conv1x1 bias shape {b.shape} != ({w.shape[1]},)")
    return x @ w + b


def conv1x1_backward(
    x: np.ndarray, w: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv1x1 w.r.t. input, weights, and bias."""
    gx = grad_out @ w.T
    flat_x = x.reshape(-1, x.shape[-1])
    flat_g = grad_out.reshape(-1, grad_out.shape[-1])
    gw = flat_x.T @ flat_g
    gb = flat_g.sum(axis=0)
    return gx, gw, gb


def fully_connected(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine map on the last axis: out[..., d] = sum_c x[..., c] * w[c, d] + b[d]."""
    _require(w.ndim == 2, f"fully_connected weights must be rank 2, got {w.shape}")
    _require(
        x.shape[-1] == w.shape[0],
        f"fully_connected input width {x.shape[-1]} != weight rows {w.shape[0]}",
    )
    _require(b.shape == (w.shape[1],), f"bias shape {b.shape} != ({w.shape[1]},)")
    return x @ w + b


def fully_connected_backward(
    x: np.ndarray, w: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    gx = grad_out @ w.T
    flat_x = x.reshape(-1, x.shape[-1])
    flat_g = grad_out.reshape(-1, grad_out.shape[-1])
    gw = flat_x.T @ flat_g
    gb = flat_g.sum(axis=0)
    return gx, gw, gb


# ---------------------------------------------------------------------------
# pooling


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Mean over the two spatial axes: (..., H, W, C) -> (..., C)."""
    _require(x.ndim >= 3, f"global_avg_pool expects (...,H,W,C), got {x.shape}")
    return x.mean(axis=(-3, -2))


def global_avg_pool_backward(x_shape: tuple[int, ...], grad_out: np.ndarray) -> np.ndarray:
    h, w = x_shape[-3], x_shape[-2]
    gx = np.broadcast_to(
        grad_out[..., None, None, :] / (h * w), x_shape
    )
    return np.ascontiguousarray(gx)


def cross_channel_avg_pool(x: np.ndarray) -> np.ndarray:
    """Mean over channels: (..., H, W, C) -> (..., H, W, 1)."""
    _require(x.ndim >= 3, f"cross_channel_avg_pool expects (...,H,W,C), got {x.shape}")
    return x.mean(axis=-1, keepdims=True)


def cross_channel_avg_pool_backward(
    x_shape: tuple[int, ...], grad_out: np.ndarray
) -> np.ndarray:
    c = x_shape[-1]
    return np.ascontiguousarray(np.broadcast_to(grad_out / c, x_shape))


# ---------------------------------------------------------------------------
# activations


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign to avoid overflow in exp.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient given the forward output y = sigmoid(x)."""
    return grad_out * y * (1.0 - y)


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (1.0 - y * y)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0.0)


def softmax(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, with max subtraction for stability."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient given the forward output y = softmax(x)."""
    dot = (grad_out * y).sum(axis=-1, keepdims=True)
    return y * (grad_out - dot)


def l2_normalize(x: np.ndarray) -> np.ndarray:
    """Scale the last axis to unit Euclidean norm."""
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    _require(bool(np.all(norm > 0)), "l2_normalize requires nonzero vectors")
    return x / norm


def l2_normalize_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    y = x / norm
    dot = (grad_out * y).sum(axis=-1, keepdims=True)
    return (grad_out - y * dot) / norm


# ---------------------------------------------------------------------------
# normalization


def batch_norm_inference(
    x: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    scale: np.ndarray,
    shift: np.ndarray,
) -> np.ndarray:
    """Per-channel normalization with fixed statistics.

    out = (x - mean) / sqrt(var + eps) * scale + shift, applied over the
    last axis. Statistics are inputs, never fit here.
    """
    _require(bool(np.all(var >= 0)), "batch_norm_inference requires var >= 0")
    inv = 1.0 / np.sqrt(var + BN_EPS)
    return (x - mean) * inv * scale + shift


def batch_norm_inference_backward(
    x: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    scale: np.ndarray,
    grad_out: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. input, scale, and shift (statistics are constants)."""
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv
    gx = grad_out * scale * inv
    reduce_axes = tuple(range(grad_out.ndim - 1))
    gscale = (grad_out * xhat).sum(axis=reduce_axes)
    gshift = grad_out.sum(axis=reduce_axes)
    return gx, gscale, gshift


# ---------------------------------------------------------------------------
# bilinear resize


def _resize_weights(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation matrix M (n_out, n_in) for half-pixel-centre bilinear resize.

    Source coordinate of output index i is (i + 0.5) * n_in / n_out - 0.5,
    clamped to [0, n_in - 1]. Equal sizes yield the identity matrix.
    """
    if n_in == n_out:
        return np.eye(n_in)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear interpolation of (..., H, W, C) to (..., out_h, out_w, C)."""
    _require(x.ndim >= 3, f"bilinear_resize expects (...,H,W,C), got {x.shape}")
    _require(out_h >= 1 and out_w >= 1, "target extents must be >= 1")
    h, w = x.shape[-3], x.shape[-2]
    if (h, w) == (out_h, out_w):
        return x.copy()
    mh = _resize_weights(h, out_h)
    mw = _resize_weights(w, out_w)
    return np.einsum("ip,...pqc,jq->...ijc", mh, x, mw, optimize=True)


def bilinear_resize_backward(
    x_shape: tuple[int, ...], grad_out: np.ndarray
) -> np.ndarray:
    h, w = x_shape[-3], x_shape[-2]
    out_h, out_w = grad_out.shape[-3], grad_out.shape[-2]
    if (h, w) == (out_h, out_w):
        return grad_out.copy()
    mh = _resize_weights(h, out_h)
    mw = _resize_weights(w, out_w)
    return np.einsum("ip,...ijc,jq->...pqc", mh, grad_out, mw, optimize=True)


# ---------------------------------------------------------------------------
# small-kernel convolution (backbone and spatial attention)

try:  # compiled gather/scatter; the numpy fallback below is ~50x slower
    import numba as _numba
except ImportError:  # pragma: no cover
    _numba = None


def _im2col_py(xp, cols, stride):
    b, ho, wo, kh, kw, c = cols.shape
    for bi in range(b):
        for i in range(ho):
            for j in range(wo):
                ii, jj = i * stride, j * stride
                for ki in range(kh):
                    for kj in range(kw):
                        for ch in range(c):
                            cols[bi, i, j, ki, kj, ch] = xp[bi, ii + ki, jj + kj, ch]


def _col2im_py(gcols, gxp, stride):
    b, ho, wo, kh, kw, c = gcols.shape
    for bi in range(b):
        for i in range(ho):
            for j in range(wo):
                ii, jj = i * stride, j * stride
                for ki in range(kh):
                    for kj in range(kw):
                        for ch in range(c):
                            gxp[bi, ii + ki, jj + kj, ch] += gcols[bi, i, j, ki, kj, ch]


if _numba is not None:
    _im2col = _numba.njit(cache=True)(_im2col_py)
    _col2im = _numba.njit(cache=True)(_col2im_py)
else:  # pragma: no cover
    def _strided_cols(xp, kh, kw, stride, ho, wo):
        sb, sh, sw, sc = xp.strides
        return np.lib.stride_tricks.as_strided(
            xp,
            shape=(xp.shape[0], ho, wo, kh, kw, xp.shape[3]),
            strides=(sb, sh * stride, sw * stride, sh, sw, sc),
            writeable=False,
        )

    def _im2col(xp, cols, stride):
        _, ho, wo, kh, kw, _ = cols.shape
        cols[...] = _strided_cols(xp, kh, kw, stride, ho, wo)

    def _col2im(gcols, gxp, stride):
        b, ho, wo, kh, kw, c = gcols.shape
        for ki in range(kh):
            for kj in range(kw):
                gxp[
                    :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride, :
                ] += gcols[:, :, :, ki, kj, :]


def _pad_input(x: np.ndarray, p: int) -> np.ndarray:
    if not p:
        return x
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2 * p, w + 2 * p, c))
    xp[:, p : p + h, p : p + w, :] = x
    return xp


def _conv_cols(x: np.ndarray, kh: int, kw: int, stride: int, p: int):
    xp = _pad_input(x, p)
    b, hp, wp, c = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((b, ho, wo, kh, kw, c))
    _im2col(xp, cols, stride)
    return cols.reshape(b * ho * wo, kh * kw * c), (b, ho, wo)


def conv2d(
    x: np.ndarray,
    w: np.ndarray,
    b: np.ndarray,
    stride: int = 1,
    padding: int = 1,
    return_cols: bool = False,
):
    """2-D convolution on (B, H, W, C) with kernel (kh, kw, C, D) and zero padding.

    With return_cols=True also returns the flattened patch matrix so a
    following backward pass can skip re-gathering it.
    """
    _require(x.ndim == 4, f"conv2d expects (B,H,W,C), got {x.shape}")
    _require(w.ndim == 4, f"conv2d kernel must be rank 4, got {w.shape}")
    _require(
        x.shape[-1] == w.shape[2],
        f"conv2d channel mismatch: input {x.shape[-1]} vs kernel {w.shape[2]}",
    )
    kh, kw, c, d = w.shape
    flat, (bsz, ho, wo) = _conv_cols(x, kh, kw, stride, padding)
    out = (flat @ w.reshape(kh * kw * c, d) + b).reshape(bsz, ho, wo, d)
    if return_cols:
        return out, flat
    return out


def conv2d_backward(
    x: np.ndarray,
    w: np.ndarray,
    grad_out: np.ndarray,
    stride: int = 1,
    padding: int = 1,
    cols: np.ndarray | None = None,
    need_input_grad: bool = True,
):
    """Gradients of conv2d w.r.t. input, kernel, and bias.

    `cols` may carry the patch matrix cached by the forward pass; the input
    gradient is skipped (None) when the caller does not need it.
    """
    kh, kw, c, d = w.shape
    p = padding
    bsz, ho, wo = grad_out.shape[:3]
    flat_g = grad_out.reshape(bsz * ho * wo, d)
    if cols is None:
        cols, _ = _conv_cols(x, kh, kw, stride, p)
    gw = (cols.T @ flat_g).reshape(kh, kw, c, d)
    gb = flat_g.sum(axis=0)
    if not need_input_grad:
        return None, gw, gb
    gcols = (flat_g @ w.reshape(kh * kw * c, d).T).reshape(bsz, ho, wo, kh, kw, c)
    gxp = np.zeros((bsz, x.shape[1] + 2 * p, x.shape[2] + 2 * p, c))
    _col2im(gcols, gxp, stride)
    if p:
        return gxp[:, p:-p, p:-p, :], gw, gb
    return gxp, gw, gb
