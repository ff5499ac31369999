"""Miniature video denoiser with motion-embedding value injection.

Architecture per block: sparse-causal spatial attention (each frame
attends to the first and previous frame), temporal self-attention across
frames at every spatial position with the per-frame motion embedding
added to the value path, and a pointwise MLP. Timestep and concept
embeddings are added channel-wise before the first block. All residual.

The pipeline around it: a fixed invertible latent codec over rendered RGB
frames, noise-prediction training, deterministic DDIM inversion and
sampling with optional background latent blending, and the input
ablations (no guide / corr only / depth only / concat / multiply).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import guide, ops, scene
from .params import AdamState, ParamSet, adam_step
from .rng import substream
from .toy import DivergenceError


@dataclass
class DiffusionConfig:
    channels: int = 4
    blocks: int = 2
    mlp_hidden: int = 16
    timesteps: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.02
    lam: float = 0.1
    ddim_steps: int = 50
    pretrain_iterations: int = 800
    pretrain_lr: float = 2e-3
    corpus_size: int = 32
    finetune_iterations: int = 100
    finetune_lr: float = 5e-4
    latent_scale: float = 2.0
    downscale: int = 8
    concepts: tuple = ("cube", "octahedron")

    def concept_index(self, name: str) -> int:
        if name not in self.concepts:
            raise ValueError(f"unknown concept {name!r}; known: {self.concepts}")
        return self.concepts.index(name)


class NoiseSchedule:
    """Linear-beta schedule; alpha_bar(t) is the cumulative product, with
    alpha_bar(0) = 1 for clean data."""

    def __init__(self, timesteps: int = 100, beta_min: float = 1e-4, beta_max: float = 0.02):
        self.timesteps = timesteps
        self.betas = np.linspace(beta_min, beta_max, timesteps)
        self.abar = np.cumprod(1.0 - self.betas)

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        if not 1 <= t <= self.timesteps:
            raise ValueError(f"timestep {t} outside [1, {self.timesteps}]")
        return float(self.abar[t - 1])

    @classmethod
    def from_config(cls, cfg: DiffusionConfig) -> "NoiseSchedule":
        return cls(cfg.timesteps, cfg.beta_min, cfg.beta_max)


def add_noise(z0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Forward diffusion: sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {eps.shape} does not match latents {z0.shape}")
    ab = schedule.alpha_bar(int(t))
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


# ------------------------------------------------------- latent codec

# fixed channel lift with orthonormal columns; its transpose is the exact
# left inverse, so encode/decode round-trips the pooled image
_LIFT = 0.5 * np.array([
    [1.0, 1.0, 1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0],
    [1.0, -1.0, -1.0],
], dtype=np.float32)


def encode_video(rgb: np.ndarray, cfg: DiffusionConfig) -> np.ndarray:
    """RGB frames [N,3,H,W] -> latents [N,4,H/f,W/f] (fixed, no learning)."""
    pooled = ops.block_mean(rgb, cfg.downscale)
    return np.einsum("cr,nrhw->nchw", _LIFT, pooled).astype(np.float32) * cfg.latent_scale


def decode_pooled(z: np.ndarray, cfg: DiffusionConfig) -> np.ndarray:
    """Latents -> pooled RGB [N,3,h,w]."""
    return np.einsum("cr,nchw->nrhw", _LIFT, z).astype(np.float32) / cfg.latent_scale


def decode_video(z: np.ndarray, cfg: DiffusionConfig) -> np.ndarray:
    """Latents -> full-resolution RGB via nearest upsampling."""
    pooled = decode_pooled(z, cfg)
    up = np.repeat(np.repeat(pooled, cfg.downscale, axis=2), cfg.downscale, axis=3)
    return np.clip(up, 0.0, 1.0)


def latent_mask(video: scene.SyntheticVideo, cfg: DiffusionConfig, threshold: float = 0.05) -> np.ndarray:
    """Per-frame object mask at latent resolution, [N,1,h,w] in {0,1}."""
    pooled = ops.block_mean(video.mask, cfg.downscale)
    return (pooled > threshold).astype(np.float32)


# ----------------------------------------------------------- denoiser

def denoiser_init(cfg: DiffusionConfig, seed: int, dtype=np.float32) -> ParamSet:
    rng = substream(seed, "denoiser-init")
    c, hid = cfg.channels, cfg.mlp_hidden

    def mat(rows, cols):
        return (rng.standard_normal((rows, cols)) / np.sqrt(cols)).astype(dtype)

    params = ParamSet()
    params.add("temb", (0.1 * rng.standard_normal((cfg.timesteps, c))).astype(dtype))
    params.add("cemb", (0.1 * rng.standard_normal((len(cfg.concepts), c))).astype(dtype))
    for b in range(cfg.blocks):
        for kind in ("sp", "tm"):
            for w in ("wq", "wk", "wv", "wo"):
                params.add(f"b{b}.{kind}.{w}", mat(c, c))
        params.add(f"b{b}.mlp.w1", mat(hid, c))
        params.add(f"b{b}.mlp.w2", mat(c, hid))
    return params


FINETUNE_TRAINABLE = ("sp.wq", "tm.wv")


def set_finetune_split(params: ParamSet, cfg: DiffusionConfig) -> None:
    """Freeze everything except the spatial query and temporal value maps."""
    for name, p in params.items():
        p.trainable = any(name == f"b{b}.{suffix}" for b in range(cfg.blocks)
                          for suffix in FINETUNE_TRAINABLE)


class SpatialCtx(NamedTuple):
    x: np.ndarray
    kvsrc: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray
    att: np.ndarray
    weights: dict


class TemporalCtx(NamedTuple):
    x: np.ndarray
    vin: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray
    att: np.ndarray
    lam: float
    injected: bool
    weights: dict


def _to_spatial_tokens(z):
    n, c, h, w = z.shape
    return z.reshape(n, c, h * w).transpose(0, 2, 1), (n, c, h, w)


def _from_spatial_tokens(tokens, shape):
    n, c, h, w = shape
    return tokens.transpose(0, 2, 1).reshape(n, c, h, w)


def sparse_causal_attention(z: np.ndarray, weights: dict):
    """Spatial attention where frame i's keys/values come from frame 1
    and frame i-1 (frame 1 attends to itself only). z: [N,C,h,w]."""
    x, shape = _to_spatial_tokens(z)
    n, c = x.shape[0], x.shape[2]
    scale = 1.0 / np.sqrt(c)
    first = np.broadcast_to(x[0], x.shape)
    prev = x[np.maximum(np.arange(n) - 1, 0)]
    kvsrc = np.concatenate([first, prev], axis=1)          # [N, 2S, C]
    q = x @ weights["wq"].T
    k = kvsrc @ weights["wk"].T
    v = kvsrc @ weights["wv"].T
    attn = ops.softmax_rows(q @ k.transpose(0, 2, 1) * scale)
    att = attn @ v
    out = att @ weights["wo"].T
    ctx = SpatialCtx(x, kvsrc, q, k, v, attn, att, weights)
    return _from_spatial_tokens(out, shape), (ctx, shape)


def sparse_causal_attention_backward(ctx_pack, grad_out):
    ctx, shape = ctx_pack
    n, c, h, w = shape
    s = h * w
    scale = 1.0 / np.sqrt(c)
    g_out = grad_out.reshape(n, c, s).transpose(0, 2, 1)
    wts = ctx.weights

    g_att = g_out @ wts["wo"]
    g_wo = np.einsum("nsd,nsc->dc", g_out, ctx.att)
    g_attn = g_att @ ctx.v.transpose(0, 2, 1)
    g_v = ctx.attn.transpose(0, 2, 1) @ g_att
    g_scores = ops.softmax_rows_backward(ctx.attn, g_attn) * scale
    g_q = g_scores @ ctx.k
    g_k = g_scores.transpose(0, 2, 1) @ ctx.q

    g_wq = np.einsum("nsc,nse->ce", g_q, ctx.x)
    g_wk = np.einsum("nmc,nme->ce", g_k, ctx.kvsrc)
    g_wv = np.einsum("nmc,nme->ce", g_v, ctx.kvsrc)

    g_x = g_q @ wts["wq"]
    g_kv = g_k @ wts["wk"] + g_v @ wts["wv"]
    g_x[0] += g_kv[:, :s].sum(axis=0)      # first-frame keys serve every frame
    g_x[0] += g_kv[0, s:]                  # frame 1's "previous" is itself
    g_x[:n - 1] += g_kv[1:, s:]
    grads = {"wq": g_wq, "wk": g_wk, "wv": g_wv, "wo": g_wo}
    return _from_spatial_tokens(g_x, shape), grads


def temporal_attention_inject(z: np.ndarray, m_emb, lam: float, weights: dict):
    """Self-attention over the frame axis at each spatial position, with
    the motion embedding added to the value path: V = Wv (z + lam * M).

    m_emb: [N,C] or None; its frame-f row is broadcast to every spatial
    position of frame f. With lam = 0 or M = 0 this is plain temporal
    self-attention.
    """
    n, c, h, w = z.shape
    if m_emb is not None and m_emb.shape != (n, c):
        raise ValueError(f"motion embedding shape {m_emb.shape} does not match "
                         f"frames x channels ({n}, {c})")
    x = z.reshape(n, c, h * w).transpose(2, 0, 1)          # [S, N, C]
    scale = 1.0 / np.sqrt(c)
    injected = m_emb is not None
    vin = x + lam * m_emb[None].astype(x.dtype) if injected else x
    q = x @ weights["wq"].T
    k = x @ weights["wk"].T
    v = vin @ weights["wv"].T
    attn = ops.softmax_rows(q @ k.transpose(0, 2, 1) * scale)
    att = attn @ v
    out = att @ weights["wo"].T
    ctx = TemporalCtx(x, vin, q, k, v, attn, att, float(lam), injected, weights)
    return out.transpose(1, 2, 0).reshape(n, c, h, w), ctx


def temporal_attention_inject_backward(ctx: TemporalCtx, grad_out):
    n, c = ctx.x.shape[1], ctx.x.shape[2]
    s = ctx.x.shape[0]
    h_w = grad_out.shape[2:]
    scale = 1.0 / np.sqrt(c)
    g_out = grad_out.reshape(n, c, s).transpose(2, 0, 1)
    wts = ctx.weights

    g_att = g_out @ wts["wo"]
    g_wo = np.einsum("snd,snc->dc", g_out, ctx.att)
    g_attn = g_att @ ctx.v.transpose(0, 2, 1)
    g_v = ctx.attn.transpose(0, 2, 1) @ g_att
    g_scores = ops.softmax_rows_backward(ctx.attn, g_attn) * scale
    g_q = g_scores @ ctx.k
    g_k = g_scores.transpose(0, 2, 1) @ ctx.q

    g_wq = np.einsum("snc,sne->ce", g_q, ctx.x)
    g_wk = np.einsum("snc,sne->ce", g_k, ctx.x)
    g_wv = np.einsum("snc,sne->ce", g_v, ctx.vin)

    g_vin = g_v @ wts["wv"]
    g_x = g_q @ wts["wq"] + g_k @ wts["wk"] + g_vin
    g_m = ctx.lam * g_vin.sum(axis=0) if ctx.injected else None
    grads = {"wq": g_wq, "wk": g_wk, "wv": g_wv, "wo": g_wo}
    return g_x.transpose(1, 2, 0).reshape((n, c) + h_w), g_m, grads


def _mlp_forward(z, w1, w2):
    n, c, h, w = z.shape
    x = z.reshape(n, c, h * w).transpose(0, 2, 1).reshape(-1, c)
    u, ctx_u = ops.linear(x, w1)
    r, mask = ops.relu(u)
    y, ctx_y = ops.linear(r, w2)
    out = y.reshape(n, h * w, c).transpose(0, 2, 1).reshape(n, c, h, w)
    return out, (ctx_u, mask, ctx_y, (n, c, h, w))


def _mlp_backward(ctx, grad_out):
    ctx_u, mask, ctx_y, (n, c, h, w) = ctx
    g = grad_out.reshape(n, c, h * w).transpose(0, 2, 1).reshape(-1, c)
    g_r, g_w2, _ = ops.linear_backward(ctx_y, g)
    g_u = ops.relu_backward(mask, g_r)
    g_x, g_w1, _ = ops.linear_backward(ctx_u, g_u)
    g_z = g_x.reshape(n, h * w, c).transpose(0, 2, 1).reshape(n, c, h, w)
    return g_z, {"w1": g_w1, "w2": g_w2}


def _block_weights(params: ParamSet, b: int, kind: str) -> dict:
    return {w: params.value(f"b{b}.{kind}.{w}") for w in ("wq", "wk", "wv", "wo")}


def denoise_step(z_t: np.ndarray, t: int, concept: int, m_emb, lam: float,
                 params: ParamSet, cfg: DiffusionConfig):
    """Predict the noise in z_t. Returns (eps_hat, ctx).

    z_t: [N,C,h,w]; t in [1, timesteps]; concept indexes the embedding
    table; m_emb is the [N,C] motion embedding or None for the
    un-injected model.
    """
    t = int(t)
    if not 1 <= t <= cfg.timesteps:
        raise ValueError(f"timestep {t} outside [1, {cfg.timesteps}]")
    if not 0 <= concept < params.value("cemb").shape[0]:
        raise ValueError(f"unknown concept id {concept}")
    h = z_t + params.value("temb")[t - 1][None, :, None, None] \
            + params.value("cemb")[concept][None, :, None, None]
    block_ctx = []
    for b in range(cfg.blocks):
        sp_out, sp_ctx = sparse_causal_attention(h, _block_weights(params, b, "sp"))
        h = h + sp_out
        tm_out, tm_ctx = temporal_attention_inject(h, m_emb, lam, _block_weights(params, b, "tm"))
        h = h + tm_out
        mlp_out, mlp_ctx = _mlp_forward(h, params.value(f"b{b}.mlp.w1"),
                                        params.value(f"b{b}.mlp.w2"))
        h = h + mlp_out
        block_ctx.append((sp_ctx, tm_ctx, mlp_ctx))
    return h, (block_ctx, t, concept)


def denoise_backward(ctx, grad_eps, params: ParamSet, cfg: DiffusionConfig):
    """Accumulate gradients of a scalar loss wrt the denoiser parameters.

    Returns (grad_z_t, grad_m): the gradient flowing into the noisy
    latents and into the motion embedding (None when un-injected).
    """
    block_ctx, t, concept = ctx
    g = grad_eps
    g_m_total = None
    for b in reversed(range(cfg.blocks)):
        sp_ctx, tm_ctx, mlp_ctx = block_ctx[b]
        g_mlp_in, mlp_grads = _mlp_backward(mlp_ctx, g)
        params.accumulate(f"b{b}.mlp.w1", mlp_grads["w1"])
        params.accumulate(f"b{b}.mlp.w2", mlp_grads["w2"])
        g = g + g_mlp_in
        g_tm_in, g_m, tm_grads = temporal_attention_inject_backward(tm_ctx, g)
        for w, gw in tm_grads.items():
            params.accumulate(f"b{b}.tm.{w}", gw)
        if g_m is not None:
            g_m_total = g_m if g_m_total is None else g_m_total + g_m
        g = g + g_tm_in
        g_sp_in, sp_grads = sparse_causal_attention_backward(sp_ctx, g)
        for w, gw in sp_grads.items():
            params.accumulate(f"b{b}.sp.{w}", gw)
        g = g + g_sp_in
    g_temb = np.zeros_like(params.value("temb"))
    g_temb[t - 1] = g.sum(axis=(0, 2, 3))
    params.accumulate("temb", g_temb)
    g_cemb = np.zeros_like(params.value("cemb"))
    g_cemb[concept] = g.sum(axis=(0, 2, 3))
    params.accumulate("cemb", g_cemb)
    return g, g_m_total


def noise_loss(eps_hat: np.ndarray, eps: np.ndarray):
    """Mean squared noise-prediction error plus upstream gradient."""
    diff = eps_hat - eps
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    grad = (2.0 / diff.size) * diff
    return loss, grad


# ------------------------------------------------------------ training

def make_corpus(cfg: DiffusionConfig, camera: scene.Camera, frames: int, seed: int):
    """Small pretraining corpus: both concepts, gentle randomized orbits.

    The subdued motion range here is deliberate: it is the prior the
    fine-tuned model falls back to when no motion signal is injected.
    """
    rng = substream(seed, "corpus")
    shapes = {
        "cube": scene.ShapeSpec("cube"),
        "octahedron": scene.ShapeSpec("octahedron", (1.1, 1.1, 1.1)),
    }
    corpus = []
    for i in range(cfg.corpus_size):
        concept = cfg.concepts[i % len(cfg.concepts)]
        params = {
            "center": (0.0, 0.0, 6.0),
            "radius": float(rng.uniform(0.1, 0.35)),
            "phase": float(rng.uniform(0.0, 2.0 * np.pi)),
            "turns": float(rng.uniform(0.4, 1.0)),
            "tilt": float(rng.uniform(0.0, 0.25)),
            "spin": tuple(rng.uniform(-0.06, 0.06, size=3)),
            "start_rot": tuple(rng.uniform(-0.4, 0.4, size=3)),
        }
        traj = scene.make_trajectory("orbit", frames, **params)
        video = scene.render_video(shapes[concept], traj, camera)
        corpus.append((video, cfg.concept_index(concept)))
    return corpus


def pretrain(corpus, cfg: DiffusionConfig, seed: int):
    """Train every parameter on noise prediction without injection.

    Returns (params, losses). The corpus must span at least two concepts
    so a later concept swap is meaningful.
    """
    if len({c for _, c in corpus}) < 2:
        raise ValueError("pretraining corpus must contain at least 2 concepts")
    schedule = NoiseSchedule.from_config(cfg)
    latents = [(encode_video(video.rgb, cfg), concept) for video, concept in corpus]
    params = denoiser_init(cfg, seed)
    opt = AdamState(params, lr=cfg.pretrain_lr)
    rng = substream(seed, "pretrain")
    losses = []
    for it in range(cfg.pretrain_iterations):
        z0, concept = latents[rng.integers(len(latents))]
        t = int(rng.integers(1, cfg.timesteps + 1))
        eps = rng.standard_normal(z0.shape).astype(np.float32)
        z_t = add_noise(z0, t, eps, schedule)
        eps_hat, ctx = denoise_step(z_t, t, concept, None, 0.0, params, cfg)
        loss, grad = noise_loss(eps_hat, eps)
        if not np.isfinite(loss):
            raise DivergenceError(f"pretraining loss diverged at iteration {it}")
        losses.append(loss)
        denoise_backward(ctx, grad, params, cfg)
        adam_step(params, opt)
    return params, losses


def guide_inputs_for_mode(video: scene.SyntheticVideo, cfg: DiffusionConfig, mode: str):
    """(inputs, alphas) for the motion-embedding module, or (None, None)
    when the guide is disabled."""
    if mode == "no_guide":
        return None, None
    return guide.preprocess_video(video, cfg.downscale, mode), video.alpha


def finetune(pretrained: ParamSet, source: scene.SyntheticVideo, concept: int,
             cfg: DiffusionConfig, seed: int, mode: str = "multiply",
             lam: float | None = None):
    """Adapt a pretrained model to one source video.

    Only the spatial query maps, temporal value maps, and the
    motion-embedding module receive updates; everything else stays
    bit-identical to the pretrained weights. Returns
    (params, guide_params, losses); guide_params is None in no_guide
    mode.
    """
    lam = cfg.lam if lam is None else float(lam)
    schedule = NoiseSchedule.from_config(cfg)
    z0 = encode_video(source.rgb, cfg)
    inputs, alphas = guide_inputs_for_mode(source, cfg, mode)

    params = pretrained.copy()
    set_finetune_split(params, cfg)
    frozen_before = {name: p.value.copy() for name, p in params.items() if not p.trainable}
    opt = AdamState(params, lr=cfg.finetune_lr)

    guide_params = None
    guide_opt = None
    if inputs is not None:
        guide_params = guide.motionguide_init(cfg.channels, seed, zero_init_head=True,
                                              in_channels=inputs.shape[1])
        guide_opt = AdamState(guide_params, lr=cfg.finetune_lr)

    rng = substream(seed, "finetune")
    losses = []
    for it in range(cfg.finetune_iterations):
        t = int(rng.integers(1, cfg.timesteps + 1))
        eps = rng.standard_normal(z0.shape).astype(np.float32)
        z_t = add_noise(z0, t, eps, schedule)
        if guide_params is not None:
            m_emb, g_ctx = guide.motionguide_forward(inputs, alphas, guide_params)
            eps_hat, ctx = denoise_step(z_t, t, concept, m_emb, lam, params, cfg)
        else:
            eps_hat, ctx = denoise_step(z_t, t, concept, None, 0.0, params, cfg)
        loss, grad = noise_loss(eps_hat, eps)
        if not np.isfinite(loss):
            raise DivergenceError(f"fine-tuning loss diverged at iteration {it}")
        losses.append(loss)
        _, g_m = denoise_backward(ctx, grad, params, cfg)
        adam_step(params, opt)
        if guide_params is not None:
            guide.motionguide_backward(g_ctx, g_m, guide_params)
            adam_step(guide_params, guide_opt)
    for name, before in frozen_before.items():
        assert np.array_equal(params.value(name), before), \
            f"frozen tensor {name!r} changed during fine-tuning"
    return params, guide_params, losses


def compute_embedding(source: scene.SyntheticVideo, guide_params, cfg: DiffusionConfig,
                      mode: str = "multiply"):
    """Motion embedding of a video under trained guide params, or None."""
    if guide_params is None:
        return None
    inputs, alphas = guide_inputs_for_mode(source, cfg, mode)
    m_emb, _ = guide.motionguide_forward(inputs, alphas, guide_params)
    return m_emb


# ---------------------------------------------------------------- DDIM

def _ddim_taus(schedule: NoiseSchedule, steps: int):
    if steps > schedule.timesteps:
        raise ValueError(f"{steps} DDIM steps exceed the {schedule.timesteps}-step schedule")
    if steps < 1 or schedule.timesteps % steps != 0:
        raise ValueError(f"{steps} steps do not divide the {schedule.timesteps}-step "
                         "schedule into a uniform stride")
    stride = schedule.timesteps // steps
    return list(range(0, schedule.timesteps + 1, stride))


def ddim_invert(z0: np.ndarray, concept: int, m_emb, lam: float, steps: int,
                params: ParamSet, cfg: DiffusionConfig, schedule: NoiseSchedule | None = None):
    """Deterministic reverse-ODE traversal from clean latents to noise.

    Each step first takes the explicit update, then refines it once by
    re-evaluating the noise prediction at the refined point, making the
    step a near-exact inverse of the matching sampling step. Returns the
    whole visited trajectory [z_tau0 .. z_tauS]; the last entry is the
    fully noised latent, and intermediate entries feed background
    blending during sampling.
    """
    schedule = schedule or NoiseSchedule.from_config(cfg)
    taus = _ddim_taus(schedule, steps)
    lat = z0.astype(np.float32, copy=True)
    traj = [lat.copy()]
    for k in range(steps):
        t_to = taus[k + 1]
        ab_from = schedule.alpha_bar(taus[k])
        ab_to = schedule.alpha_bar(t_to)

        def step_to(eps_hat):
            x0 = (lat - np.sqrt(1.0 - ab_from) * eps_hat) / np.sqrt(ab_from)
            return (np.sqrt(ab_to) * x0 + np.sqrt(1.0 - ab_to) * eps_hat).astype(np.float32)

        eps_hat, _ = denoise_step(lat, t_to, concept, m_emb, lam, params, cfg)
        nxt = step_to(eps_hat)
        eps_hat, _ = denoise_step(nxt, t_to, concept, m_emb, lam, params, cfg)
        lat = step_to(eps_hat)
        traj.append(lat.copy())
    return traj


def ddim_sample(z_noise: np.ndarray, concept: int, m_emb, lam: float, steps: int,
                params: ParamSet, cfg: DiffusionConfig, schedule: NoiseSchedule | None = None,
                blend: tuple | None = None):
    """Deterministic DDIM sampling from noised latents.

    ``blend`` is an optional (source_trajectory, mask) pair: after each
    step, background positions (mask 0) are overwritten with the source
    video's inversion latents at the matching step, preserving the
    background while the foreground is regenerated.
    """
    schedule = schedule or NoiseSchedule.from_config(cfg)
    taus = _ddim_taus(schedule, steps)
    if blend is not None:
        source_traj, mask = blend
        if source_traj is None or len(source_traj) != steps + 1:
            raise ValueError("blending requires the source inversion trajectory "
                             f"with {steps + 1} entries")
        if mask.shape[-2:] != z_noise.shape[-2:]:
            raise ValueError(f"blend mask spatial dims {mask.shape[-2:]} do not match "
                             f"latents {z_noise.shape[-2:]}")
    lat = z_noise.astype(np.float32, copy=True)
    for k in reversed(range(steps)):
        t_from = taus[k + 1]
        eps_hat, _ = denoise_step(lat, t_from, concept, m_emb, lam, params, cfg)
        ab_from = schedule.alpha_bar(t_from)
        ab_to = schedule.alpha_bar(taus[k])
        x0 = (lat - np.sqrt(1.0 - ab_from) * eps_hat) / np.sqrt(ab_from)
        lat = (np.sqrt(ab_to) * x0 + np.sqrt(1.0 - ab_to) * eps_hat).astype(np.float32)
        if blend is not None:
            lat = mask * lat + (1.0 - mask) * source_traj[k]
    return lat


# -------------------------------------------------------------- metrics

def centroid_track(z: np.ndarray, cfg: DiffusionConfig) -> np.ndarray:
    """Per-frame brightness centroid of decoded latents, in image pixels.

    Weights are the per-pixel color magnitude above the frame median, so
    a flat background contributes nothing; frames with no salient pixels
    fall back to the image center.
    """
    pooled = decode_pooled(z, cfg)
    n, _, h, w = pooled.shape
    ys, xs = np.mgrid[0:h, 0:w]
    track = np.zeros((n, 2))
    for i in range(n):
        lum = np.sqrt((pooled[i] ** 2).sum(axis=0))
        wgt = np.maximum(lum - np.median(lum), 0.0)
        total = wgt.sum()
        if total < 1e-8:
            cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        else:
            cx, cy = (xs * wgt).sum() / total, (ys * wgt).sum() / total
        track[i] = ((cx + 0.5) * cfg.downscale - 0.5, (cy + 0.5) * cfg.downscale - 0.5)
    return track


def path_length(track: np.ndarray) -> float:
    return float(np.linalg.norm(np.diff(track, axis=0), axis=1).sum())


ABLATION_MODES = ("no_guide", "corr_only", "depth_only", "concat", "multiply")


@dataclass
class AblationRow:
    mode: str
    centroid_mse: float
    range_ratio: float
    seed: int


def run_edit(pretrained: ParamSet, source: scene.SyntheticVideo, cfg: DiffusionConfig,
             seed: int, mode: str, lam: float | None = None, blend_background: bool = False):
    """finetune -> invert -> sample-with-swapped-concept, one mode.

    Returns (edited_latents, source_latents, tuned_params, guide_params).
    """
    lam = cfg.lam if lam is None else float(lam)
    if mode == "no_guide":
        lam = 0.0
    source_concept = cfg.concept_index("cube")
    edit_concept = cfg.concept_index("octahedron")
    params, guide_params, _ = finetune(pretrained, source, source_concept, cfg, seed,
                                       mode=mode, lam=lam)
    m_emb = compute_embedding(source, guide_params, cfg, mode)
    z0 = encode_video(source.rgb, cfg)
    schedule = NoiseSchedule.from_config(cfg)
    traj = ddim_invert(z0, source_concept, m_emb, lam, cfg.ddim_steps, params, cfg, schedule)
    blend = (traj, latent_mask(source, cfg)) if blend_background else None
    edited = ddim_sample(traj[-1], edit_concept, m_emb, lam, cfg.ddim_steps, params, cfg,
                         schedule, blend=blend)
    return edited, z0, params, guide_params


def ablate(pretrained: ParamSet, source: scene.SyntheticVideo, cfg: DiffusionConfig,
           seed: int, modes=ABLATION_MODES):
    """Fine-tune and edit once per input mode with shared seeds; report
    motion fidelity of each edited video against the source."""
    z0 = encode_video(source.rgb, cfg)
    src_track = centroid_track(z0, cfg)
    src_len = path_length(src_track)
    rows = []
    for mode in modes:
        if mode not in ABLATION_MODES:
            raise ValueError(f"unknown ablation mode {mode!r}")
        edited, _, _, _ = run_edit(pretrained, source, cfg, seed, mode)
        track = centroid_track(edited, cfg)
        mse = float(np.mean(np.sum((track - src_track) ** 2, axis=1)))
        ratio = path_length(track) / src_len if src_len > 0 else float("nan")
        rows.append(AblationRow(mode, mse, ratio, seed))
    return rows


def write_ablation_csv(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write("mode,centroid_mse,range_ratio,seed\n")
        for r in rows:
            fh.write(f"{r.mode},{r.centroid_mse!r},{r.range_ratio!r},{r.seed}\n")


def write_centroid_csv(path, track) -> None:
    with open(path, "w") as fh:
        fh.write("frame,cx,cy\n")
        for i, (cx, cy) in enumerate(track):
            fh.write(f"{i},{float(cx)!r},{float(cy)!r}\n")
