"""Motion-embedding module.

Per frame: conv (no bias) -> ReLU -> concat fixed 2-D positional encoding
-> conv (no bias) -> ReLU -> spatial average pool -> divide by the
occupancy ratio alpha -> linear head. The pooling plus alpha division
makes the per-frame embedding independent of object size and image
resolution; the positional-encoding channels keep it sensitive to the
object's 2-D location.

The head is zero-initialized by default so the module contributes exactly
nothing until training moves it.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .params import ParamSet
from .rng import substream

CONV1_CHANNELS = 64
PE_CHANNELS = 64
CONV2_CHANNELS = 256

MODES = ("multiply", "corr_only", "depth_only", "concat")


def mode_channels(mode: str) -> int:
    if mode not in MODES:
        raise ValueError(f"unknown preprocess mode {mode!r}")
    return 4 if mode == "concat" else 3


def preprocess_input(corr, depth, scale: int = 8, mode: str = "multiply") -> np.ndarray:
    """Combine correspondence and depth maps and downscale.

    corr: [3,H,W]; depth: [1,H,W]; H and W must be divisible by ``scale``
    (the downscaling factor, mirroring a latent-space encoder). Modes:
    multiply (default, depth broadcast across the correspondence
    channels), corr_only, depth_only (replicated to 3 channels), concat
    (4 channels).
    """
    if mode not in MODES:
        raise ValueError(f"unknown preprocess mode {mode!r}")
    if mode == "multiply":
        combined = corr * depth
    elif mode == "corr_only":
        combined = corr
    elif mode == "depth_only":
        combined = np.repeat(depth, 3, axis=0)
    else:
        combined = np.concatenate([corr, depth], axis=0)
    return ops.block_mean(combined, scale)


def preprocess_video(video, scale: int = 8, mode: str = "multiply") -> np.ndarray:
    """Stacked per-frame preprocess: returns [N,Cin,h,w]."""
    return np.stack([preprocess_input(video.corr[i], video.depth[i], scale, mode)
                     for i in range(video.corr.shape[0])])


def positional_encoding(h: int, w: int, dtype=np.float32) -> np.ndarray:
    """Fixed 2-D sinusoidal encoding, [64,h,w].

    Channels 0..31 encode normalized x with a geometric frequency ladder
    (sin/cos pairs), channels 32..63 encode normalized y the same way.
    The ladder spans pi/16 .. pi: low frequencies dominate so that pooled
    encodings vary smoothly with object position and change little under
    object-shape changes.
    """
    if h < 1 or w < 1:
        raise ValueError("positional encoding needs h, w >= 1")
    xs = np.arange(w, dtype=np.float64) / max(w - 1, 1)
    ys = np.arange(h, dtype=np.float64) / max(h - 1, 1)
    n_freq = PE_CHANNELS // 4
    omegas = (np.pi / 16.0) * 2.0 ** (np.arange(n_freq) * 4.0 / (n_freq - 1))

    def ladder(coord):  # [len] -> [2*n_freq, len]
        phases = omegas[:, None] * coord[None, :]
        return np.concatenate([np.sin(phases), np.cos(phases)], axis=0)

    x_ch = np.broadcast_to(ladder(xs)[:, None, :], (2 * n_freq, h, w))
    y_ch = np.broadcast_to(ladder(ys)[:, :, None], (2 * n_freq, h, w))
    return np.concatenate([x_ch, y_ch], axis=0).astype(dtype)


def motionguide_init(d: int, seed: int, zero_init_head: bool = True,
                     in_channels: int = 3, dtype=np.float32) -> ParamSet:
    """Kaiming-uniform conv weights, optionally zeroed head, no biases."""
    if d < 1:
        raise ValueError("embedding width d must be >= 1")
    rng = substream(seed, "motionguide-init")

    def kaiming(shape):
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    params = ParamSet()
    params.add("conv1", kaiming((CONV1_CHANNELS, in_channels, 3, 3)))
    params.add("conv2", kaiming((CONV2_CHANNELS, CONV1_CHANNELS + PE_CHANNELS, 3, 3)))
    if zero_init_head:
        params.add("head", np.zeros((d, CONV2_CHANNELS), dtype=dtype))
    else:
        params.add("head", kaiming((d, CONV2_CHANNELS)))
    return params


def motionguide_forward(inputs, alphas, params: ParamSet, pe: np.ndarray | None = None):
    """Embed a video: [N,Cin,h,w] plus per-frame alphas -> [N,d].

    Returns (embedding, ctx) where ctx feeds motionguide_backward.
    ``pe`` allows substituting the positional encoding in tests; by
    default it is built from (h, w).
    """
    inputs = np.asarray(inputs)
    alphas = np.asarray(alphas, dtype=np.float64)
    if inputs.ndim != 4:
        raise ValueError(f"expected [N,Cin,h,w] inputs, got {inputs.shape}")
    n, _, h, w = inputs.shape
    if alphas.shape != (n,):
        raise ValueError(f"alphas must be [N], got {alphas.shape}")
    if np.any(alphas <= 0) or np.any(alphas > 1):
        raise ValueError("alphas must lie in (0, 1]: degenerate frame with no object pixels")

    if pe is None:
        pe = positional_encoding(h, w, dtype=inputs.dtype)
    pe_b = np.broadcast_to(pe[None], (n,) + pe.shape)

    y1, ctx1 = ops.conv2d_nchw(inputs, params.value("conv1"))
    a1, mask1 = ops.relu(y1)
    cat = np.concatenate([a1, pe_b.astype(a1.dtype)], axis=1)
    y2, ctx2 = ops.conv2d_nchw(cat, params.value("conv2"))
    a2, mask2 = ops.relu(y2)
    pooled = a2.mean(axis=(2, 3))                      # [N, 256]
    inv_alpha = (1.0 / alphas).astype(pooled.dtype)
    scaled = pooled * inv_alpha[:, None]
    emb, ctx_head = ops.linear(scaled, params.value("head"))
    ctx = (ctx1, mask1, ctx2, mask2, (n, h, w), inv_alpha, ctx_head)
    return emb, ctx


def motionguide_backward(ctx, upstream, params: ParamSet) -> None:
    """Accumulate gradients of the embedding into the ParamSet.

    The positional encoding is fixed and receives no gradient.
    """
    if ctx is None:
        raise ValueError("motionguide backward called without saved forward context")
    ctx1, mask1, ctx2, mask2, (n, h, w), inv_alpha, ctx_head = ctx
    g_scaled, g_head, _ = ops.linear_backward(ctx_head, upstream)
    params.accumulate("head", g_head)
    g_pooled = g_scaled * inv_alpha[:, None]
    g_a2 = np.broadcast_to(
        (g_pooled / (h * w))[:, :, None, None], (n, g_pooled.shape[1], h, w)
    ).astype(g_pooled.dtype)
    g_y2 = ops.relu_backward(mask2, g_a2)
    g_cat, g_w2 = ops.conv2d_nchw_backward(ctx2, g_y2)
    params.accumulate("conv2", g_w2)
    g_a1 = g_cat[:, :CONV1_CHANNELS]  # positional-encoding slice dropped
    g_y1 = ops.relu_backward(mask1, g_a1)
    _, g_w1 = ops.conv2d_nchw_backward(ctx1, g_y1)
    params.accumulate("conv1", g_w1)
