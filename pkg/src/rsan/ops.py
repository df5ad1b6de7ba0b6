"""The closed operation set of the segmentation network.

Convolutions, pooling, batch normalization, channel reductions, channel
concatenation, elementwise maps, and the small reduction set the loss needs.
Each op validates shapes, computes the forward value with numpy, and attaches
a backward closure via ``record_op``. All spatial ops assume the fixed
N x H x W x C activation layout and kH x kW x Cin x Cout kernels.
"""

from __future__ import annotations

import numpy as np

from .errors import PaddingRequiredError, ShapeError
from .tensor import Tensor, accumulate_grad, record_op


def _require_4d(x: Tensor, role: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{role} must be 4-d (N,H,W,C), got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution / pooling


def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """2-d cross-correlation of N x H x W x Cin input with a kH x kW x Cin x Cout kernel.

    ``padding='same'`` (odd kernels only) zero-pads symmetrically so stride-1
    output keeps H x W; ``'valid'`` applies no padding.
    """
    _require_4d(x, "conv2d input")
    if k.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-d (kH,kW,Cin,Cout), got shape {k.shape}")
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = k.shape
    if cin != kcin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {k.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"same-padding needs odd kernel dims, got {kh}x{kw}")
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"unknown padding mode {padding!r}")
    oh = (h + 2 * ph - kh) // stride + 1
    ow = (w + 2 * pw - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output would be empty: input {x.shape}, kernel {k.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")

    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    kd = k.data

    def offset_view(arr, di, dj):
        return arr[:, di: di + (oh - 1) * stride + 1: stride,
                   dj: dj + (ow - 1) * stride + 1: stride, :]

    # One GEMM per kernel offset: peak memory stays at the padded-input size
    # instead of the kh*kw-fold blow-up of an explicit im2col matrix.
    out2 = np.zeros((n * oh * ow, cout), dtype=x.data.dtype)
    for di in range(kh):
        for dj in range(kw):
            out2 += offset_view(xp, di, dj).reshape(-1, cin) @ kd[di, dj]
    if bias is not None:
        out2 += bias.data
    out = out2.reshape(n, oh, ow, cout)

    def backward_fn(g):
        g2 = g.reshape(-1, cout)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    offset_view(dxp, di, dj)[...] += (g2 @ kd[di, dj].T).reshape(n, oh, ow, cin)
            accumulate_grad(x, dxp[:, ph: ph + h, pw: pw + w, :])
        if k.requires_grad:
            dk = np.empty_like(kd)
            for di in range(kh):
                for dj in range(kw):
                    dk[di, dj] = offset_view(xp, di, dj).reshape(-1, cin).T @ g2
            accumulate_grad(k, dk)
        if bias is not None and bias.requires_grad:
            accumulate_grad(bias, g2.sum(axis=0))

    parents = (x, k) if bias is None else (x, k, bias)
    return record_op(out, parents, backward_fn)


def conv2d_transpose(x: Tensor, k: Tensor, stride: int = 2) -> Tensor:
    """Stride-s upsampling: every input pixel stamps an s x s kernel patch.

    Kernel dims must equal the stride (non-overlapping stamps), so H and W come
    out exactly multiplied by the stride. The adjoint of this map is a valid
    stride-s conv2d with the kernel's channel axes swapped.
    """
    _require_4d(x, "conv2d_transpose input")
    if k.data.ndim != 4:
        raise ShapeError(f"conv2d_transpose kernel must be 4-d, got shape {k.shape}")
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = k.shape
    if min(x.shape) < 1 or min(k.shape) < 1:
        raise ShapeError(f"conv2d_transpose needs positive dims: input {x.shape}, kernel {k.shape}")
    if kh != stride or kw != stride:
        raise ShapeError(f"conv2d_transpose kernel {kh}x{kw} must equal stride {stride}")
    if cin != kcin:
        raise ShapeError(f"conv2d_transpose channel mismatch: input {x.shape} vs kernel {k.shape}")

    # out[n, s*i+di, s*j+dj, f] = sum_c x[n,i,j,c] * k[di,dj,c,f], done as one GEMM
    x2 = x.data.reshape(-1, cin)                                   # (NHW, C)
    k2 = k.data.transpose(2, 0, 1, 3).reshape(cin, kh * kw * cout)  # (C, ijf)
    out = (x2 @ k2).reshape(n, h, w, kh, kw, cout) \
        .transpose(0, 1, 3, 2, 4, 5).reshape(n, h * kh, w * kw, cout)

    def backward_fn(g):
        g2 = (g.reshape(n, h, kh, w, kw, cout)
              .transpose(0, 1, 3, 2, 4, 5)
              .reshape(-1, kh * kw * cout))                        # (NHW, ijf)
        if x.requires_grad:
            accumulate_grad(x, (g2 @ k2.T).reshape(n, h, w, cin))
        if k.requires_grad:
            dk = (x2.T @ g2).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
            accumulate_grad(k, np.ascontiguousarray(dk))

    return record_op(out, (x, k), backward_fn)


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; gradient routes to the first max per window."""
    _require_4d(x, "maxpool2d input")
    n, h, w, c = x.shape
    if size < 1:
        raise ValueError(f"pool size must be >= 1, got {size}")
    if h % size or w % size:
        raise PaddingRequiredError(
            f"maxpool2d needs H,W divisible by {size}, got {h}x{w}; pad the input first")
    oh, ow = h // size, w // size
    win = (x.data.reshape(n, oh, size, ow, size, c)
           .transpose(0, 1, 3, 2, 4, 5)
           .reshape(n, oh, ow, size * size, c))
    idx = np.argmax(win, axis=3)  # first occurrence in row-major window scan
    out = np.take_along_axis(win, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def backward_fn(g):
        dwin = np.zeros((n, oh, ow, size * size, c), dtype=g.dtype)
        np.put_along_axis(dwin, idx[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        dx = (dwin.reshape(n, oh, ow, size, size, c)
              .transpose(0, 1, 3, 2, 4, 5)
              .reshape(n, h, w, c))
        accumulate_grad(x, dx)

    return record_op(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# channel reductions / concatenation


def channel_max(x: Tensor) -> Tensor:
    """Per-pixel max over channels, N,H,W,C -> N,H,W,1; subgradient to first argmax."""
    _require_4d(x, "channel_max input")
    if x.shape[3] < 1:
        raise ShapeError(f"channel_max needs C >= 1, got shape {x.shape}")
    idx = np.argmax(x.data, axis=3)
    out = np.take_along_axis(x.data, idx[..., None], axis=3)

    def backward_fn(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, idx[..., None], g, axis=3)
        accumulate_grad(x, dx)

    return record_op(out, (x,), backward_fn)


def channel_avg(x: Tensor) -> Tensor:
    """Per-pixel mean over channels, N,H,W,C -> N,H,W,1; gradient 1/C per channel."""
    _require_4d(x, "channel_avg input")
    c = x.shape[3]
    if c < 1:
        raise ShapeError(f"channel_avg needs C >= 1, got shape {x.shape}")
    out = np.mean(x.data, axis=3, keepdims=True, dtype=np.float64).astype(x.data.dtype)

    def backward_fn(g):
        accumulate_grad(x, np.broadcast_to(g / c, x.data.shape))

    return record_op(out, (x,), backward_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis; a occupies channels [0, C_a)."""
    _require_4d(a, "concat_channels first input")
    _require_4d(b, "concat_channels second input")
    if a.shape[:3] != b.shape[:3]:
        raise ShapeError(f"concat_channels spatial mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[3]
    out = np.concatenate([a.data, b.data], axis=3)

    def backward_fn(g):
        accumulate_grad(a, g[..., :ca])
        accumulate_grad(b, g[..., ca:])

    return record_op(out, (a, b), backward_fn)


# ---------------------------------------------------------------------------
# normalization


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, mode: str, momentum: float = 0.9,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over the N,H,W axes.

    Train mode normalizes with batch statistics and folds them into the running
    buffers in place (running = momentum * running + (1-momentum) * batch);
    eval mode normalizes with the running buffers. Differentiable w.r.t. x,
    gamma and beta in both modes.
    """
    _require_4d(x, "batch_norm input")
    c = x.shape[3]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batch_norm gamma/beta must have shape ({c},), got {gamma.shape} and {beta.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    d = x.data
    m = d.shape[0] * d.shape[1] * d.shape[2]
    if mode == "train":
        if m < 2:
            raise ShapeError("batch_norm train mode needs more than one value per channel")
        mean = np.mean(d, axis=(0, 1, 2), dtype=np.float64).astype(d.dtype)
        var = np.var(d, axis=(0, 1, 2), dtype=np.float64).astype(d.dtype)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = running_mean.astype(d.dtype, copy=False)
        var = running_var.astype(d.dtype, copy=False)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (d - mean) * inv
    out = gamma.data * xhat + beta.data

    def backward_fn(g):
        if beta.requires_grad:
            accumulate_grad(beta, g.sum(axis=(0, 1, 2)))
        if gamma.requires_grad:
            accumulate_grad(gamma, (g * xhat).sum(axis=(0, 1, 2)))
        if x.requires_grad:
            gg = g * gamma.data
            if mode == "train":
                # batch statistics depend on x, so their sensitivity folds in
                dx = (inv / m) * (m * gg - gg.sum(axis=(0, 1, 2))
                                  - xhat * (gg * xhat).sum(axis=(0, 1, 2)))
            else:
                dx = gg * inv
            accumulate_grad(x, dx)

    return record_op(out, (x, gamma, beta), backward_fn)


# ---------------------------------------------------------------------------
# elementwise maps


def relu(x: Tensor) -> Tensor:
    """max(x, 0); subgradient 0 at 0."""
    out = np.maximum(x.data, 0)

    def backward_fn(g):
        accumulate_grad(x, g * (x.data > 0))

    return record_op(out, (x,), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic map, clamped to stay strictly inside (0,1) at storage precision."""
    d = x.data
    t = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
    info = np.finfo(d.dtype)
    np.clip(out, float(info.tiny), 1.0 - float(info.epsneg), out=out)

    def backward_fn(g):
        accumulate_grad(x, g * out * (1.0 - out))

    return record_op(out, (x,), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of equal-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward_fn(g):
        accumulate_grad(a, g)
        accumulate_grad(b, g)

    return record_op(out, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def backward_fn(g):
        accumulate_grad(a, g * b.data)
        accumulate_grad(b, g * a.data)

    return record_op(out, (a, b), backward_fn)


def mul_broadcast(a: Tensor, m: Tensor) -> Tensor:
    """Multiply N,H,W,C features by an N,H,W,1 map broadcast across channels."""
    _require_4d(a, "mul_broadcast features")
    _require_4d(m, "mul_broadcast map")
    if a.shape[:3] != m.shape[:3] or m.shape[3] != 1:
        raise ShapeError(f"mul_broadcast needs map N,H,W,1 matching features: {a.shape} vs {m.shape}")
    out = a.data * m.data

    def backward_fn(g):
        accumulate_grad(a, g * m.data)
        accumulate_grad(m, np.sum(g * a.data, axis=3, keepdims=True))

    return record_op(out, (a, m), backward_fn)


def scale(x: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar constant."""
    out = x.data * s

    def backward_fn(g):
        accumulate_grad(x, g * s)

    return record_op(out, (x,), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    """Full reduction to a scalar (64-bit accumulation, stored at input dtype)."""
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype)

    def backward_fn(g):
        accumulate_grad(x, np.broadcast_to(g, x.data.shape))

    return record_op(out, (x,), backward_fn)
