"""Dense-tensor layers with explicit forward/backward passes.

Every differentiable op returns ``(output, ctx)``; the paired
``*_backward(ctx, upstream)`` returns exact reverse-mode gradients in the
same order as the forward inputs. There is no autodiff graph: the
architectures built on top are small and fixed, and hand-written reverse
passes are simpler to verify against finite differences.

Ops run in whatever dtype their inputs carry; experiments use float32,
gradient checks build float64 inputs.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def require_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")


# ------------------------------------------------------------------ relu

def relu(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(ctx, grad):
    return grad * ctx


# ---------------------------------------------------------- convolution

def _im2col(xpad, kh, kw):
    """Padded [N,C,Hp,Wp] -> column matrix [C*kh*kw, N*H*W]."""
    win = sliding_window_view(xpad, (kh, kw), axis=(2, 3))  # [N,C,H,W,kh,kw]
    n, c, h, w = win.shape[:4]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * h * w)
    return np.ascontiguousarray(cols)


def conv2d_nchw(x, weight):
    """Batched convolution, stride 1, zero padding preserving H and W.

    x: [N, Cin, H, W]; weight: [Cout, Cin, kh, kw] with odd kh, kw.
    Returns ([N, Cout, H, W], ctx). Cross-correlation convention.
    """
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ValueError(f"input has {cin} channels but weight expects {cin_w}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel dims must be odd, got {kh}x{kw}")
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xpad = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(xpad, kh, kw)
    y = (weight.reshape(cout, -1) @ cols).reshape(cout, n, h, w).transpose(1, 0, 2, 3)
    return y, (cols, x.shape, weight)


def conv2d_nchw_backward(ctx, grad_y):
    if ctx is None:
        raise ValueError("conv2d backward called without saved forward context")
    cols, x_shape, weight = ctx
    n, cin, h, w = x_shape
    cout, _, kh, kw = weight.shape
    g = grad_y.transpose(1, 0, 2, 3).reshape(cout, -1)  # [Cout, N*H*W]
    grad_w = (g @ cols.T).reshape(weight.shape)
    gcols = (weight.reshape(cout, -1).T @ g).reshape(cin, kh, kw, n, h, w)
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    gpad = np.zeros((n, cin, h + 2 * ph, w + 2 * pw), dtype=grad_y.dtype)
    # col2im: scatter-add each kernel tap back onto the padded grid
    for i in range(kh):
        for j in range(kw):
            gpad[:, :, i:i + h, j:j + w] += gcols[:, i, j].transpose(1, 0, 2, 3)
    return gpad[:, :, ph:ph + h, pw:pw + w], grad_w


def conv2d(x, weight, bias=None):
    """Single-image convolution [Cin,H,W] -> [Cout,H,W], stride 1.

    Zero padding of (kh-1)/2, (kw-1)/2 keeps spatial dims. ``bias`` may be
    None (disabled) or a [Cout] vector.
    """
    if x.ndim != 3:
        raise ValueError(f"expected [Cin,H,W] input, got shape {x.shape}")
    y4, ctx = conv2d_nchw(x[None], weight)
    y = y4[0]
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"bias shape {bias.shape} does not match Cout={weight.shape[0]}")
        y = y + bias[:, None, None]
    return y, (ctx, bias is not None)


def conv2d_backward(ctx, grad_y):
    """Gradients of conv2d: (grad_input, grad_weight, grad_bias-or-None)."""
    if ctx is None:
        raise ValueError("conv2d backward called without saved forward context")
    inner, has_bias = ctx
    gx4, gw = conv2d_nchw_backward(inner, grad_y[None])
    gb = grad_y.sum(axis=(1, 2)) if has_bias else None
    return gx4[0], gw, gb


# --------------------------------------------------------------- linear

def linear(x, weight, bias=None):
    """Affine map along the last axis: y = x @ weight.T (+ bias).

    x: [..., Din]; weight: [Dout, Din]; bias: [Dout] or None.
    """
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"input width {x.shape[-1]} does not match weight Din={weight.shape[1]}")
    y = x @ weight.T
    if bias is not None:
        y = y + bias
    return y, (x, weight, bias is not None)


def linear_backward(ctx, grad):
    if ctx is None:
        raise ValueError("linear backward called without saved forward context")
    x, weight, has_bias = ctx
    dout, din = weight.shape
    gx = grad @ weight
    gw = grad.reshape(-1, dout).T @ x.reshape(-1, din)
    gb = grad.reshape(-1, dout).sum(axis=0) if has_bias else None
    return gx, gw, gb


# ------------------------------------------------------------- softmax

def softmax_rows(scores):
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(attn, grad):
    # attn is the forward softmax output
    return attn * (grad - (grad * attn).sum(axis=-1, keepdims=True))


def softmax_attention(q, k, v):
    """Scaled dot-product attention: softmax(Q K^T / sqrt(d)) V.

    q: [n, d]; k: [m, d]; v: [m, dv]. Each output row is a convex
    combination of the rows of v.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("softmax_attention expects 2-D Q, K, V")
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"Q width {q.shape[1]} does not match K width {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"K has {k.shape[0]} rows but V has {v.shape[0]}")
    for name, arr in (("Q", q), ("K", k), ("V", v)):
        require_finite(name, arr)
    scale = 1.0 / np.sqrt(q.shape[1])
    attn = softmax_rows(q @ k.T * scale)
    return attn @ v, (q, k, v, attn)


def softmax_attention_backward(ctx, grad):
    if ctx is None:
        raise ValueError("softmax_attention backward called without saved forward context")
    q, k, v, attn = ctx
    scale = 1.0 / np.sqrt(q.shape[1])
    gv = attn.T @ grad
    gs = softmax_rows_backward(attn, grad @ v.T) * scale
    return gs @ k, gs.T @ q, gv


def attention_weights(q, k):
    """The softmax weight matrix alone (for normalization checks)."""
    return softmax_rows(q @ k.T / np.sqrt(q.shape[1]))


# -------------------------------------------------------------- pooling

def avg_pool_spatial(x):
    """Per-channel mean over the spatial grid: [C,H,W] -> [C]."""
    if x.ndim != 3:
        raise ValueError(f"expected [C,H,W] input, got shape {x.shape}")
    return x.mean(axis=(1, 2)), x.shape


def avg_pool_spatial_backward(ctx, grad):
    if ctx is None:
        raise ValueError("avg_pool_spatial backward called without saved forward context")
    c, h, w = ctx
    return np.broadcast_to(grad[:, None, None] / (h * w), (c, h, w)).astype(grad.dtype).copy()


def block_mean(x, factor: int):
    """Non-overlapping average pooling of the two trailing axes by ``factor``."""
    h, w = x.shape[-2:]
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"spatial dims {h}x{w} not divisible by pooling factor {factor}")
    shape = x.shape[:-2] + (h // factor, factor, w // factor, factor)
    return x.reshape(shape).mean(axis=(-3, -1))
