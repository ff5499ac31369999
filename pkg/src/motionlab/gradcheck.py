"""Central finite-difference verification of every backward pass.

Each registered check builds seeded float64 inputs, a scalar loss, and
the analytic gradients from the hand-written backward passes. The
numeric side perturbs coordinates with central differences of step
h = 2**-16 (about 1.5e-5; a power of two keeps grid-aligned probes
exact). Tensors larger than ``FULL_LIMIT`` are probed on the
largest-gradient coordinates plus a seeded random subset instead of
exhaustively.

Errors are reported per tensor as max |analytic - numeric| scaled by the
largest gradient magnitude seen for that tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffusion, guide, ops
from .params import ParamSet
from .rng import substream

H_STEP = 2.0 ** -16
FULL_LIMIT = 256
TOP_COORDS = 16
RANDOM_COORDS = 8
LAYER_TOL = 1e-6
END_TO_END_TOL = 1e-5


@dataclass
class CheckResult:
    op: str
    tolerance: float
    per_tensor: dict  # name -> max scaled error

    @property
    def max_error(self) -> float:
        return max(self.per_tensor.values())

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _probe_coords(grad: np.ndarray, rng: np.random.Generator):
    flat = np.abs(grad).ravel()
    if flat.size <= FULL_LIMIT:
        return np.arange(flat.size)
    top = np.argsort(flat)[-TOP_COORDS:]
    rand = rng.integers(0, flat.size, size=RANDOM_COORDS)
    return np.unique(np.concatenate([top, rand]))


def fd_check(loss_fn, tensors: dict, grads: dict, seed: int = 0, h: float = H_STEP) -> dict:
    """Max scaled error per tensor between ``grads`` and central
    finite differences of ``loss_fn(tensors)``."""
    rng = substream(seed, "gradcheck-coords")
    errors = {}
    for name, x in tensors.items():
        g = grads[name]
        coords = _probe_coords(g, rng)
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        worst_abs = 0.0
        scale = 1e-12
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn(tensors)
            flat[i] = orig - h
            lm = loss_fn(tensors)
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            worst_abs = max(worst_abs, abs(gflat[i] - numeric))
            scale = max(scale, abs(gflat[i]), abs(numeric))
        errors[name] = worst_abs / scale
    return errors


# ------------------------------------------------------------- checks
#
# Each builder returns a list of cases; a case is (tensors, loss_fn,
# grads_fn). loss_fn re-runs the forward from the tensor dict; grads_fn
# returns the analytic gradients for the same dict.

def _proj(rng, shape):
    return rng.standard_normal(shape)


def _cases_conv2d(seed):
    rng = substream(seed, "check-conv2d")
    cases = []
    shapes = [
        ((1, 1, 1), (1, 1, 1, 1), True),
        ((2, 4, 4), (3, 2, 3, 3), False),
        ((3, 5, 5), (2, 3, 1, 1), True),
    ]
    for xs, ws, use_bias in shapes:
        tensors = {"x": rng.standard_normal(xs), "w": rng.standard_normal(ws)}
        if use_bias:
            tensors["b"] = rng.standard_normal(ws[0])
        r = _proj(rng, (ws[0],) + xs[1:])

        def loss_fn(t, r=r):
            y, _ = ops.conv2d(t["x"], t["w"], t.get("b"))
            return float((y * r).sum())

        def grads_fn(t, r=r):
            _, ctx = ops.conv2d(t["x"], t["w"], t.get("b"))
            gx, gw, gb = ops.conv2d_backward(ctx, r)
            out = {"x": gx, "w": gw}
            if gb is not None:
                out["b"] = gb
            return out

        cases.append((tensors, loss_fn, grads_fn))
    return cases


def _cases_linear(seed):
    rng = substream(seed, "check-linear")
    cases = []
    # grid-aligned identity case: finite differences are exact here
    ident = {"x": np.array([1.0, 2.0, 4.0])}
    r_ident = np.ones(3)

    def ident_loss(t):
        y, _ = ops.linear(t["x"], np.eye(3))
        return float((y * r_ident).sum())

    def ident_grads(t):
        _, ctx = ops.linear(t["x"], np.eye(3))
        gx, _, _ = ops.linear_backward(ctx, r_ident)
        return {"x": gx}

    cases.append((ident, ident_loss, ident_grads))

    shapes = [((2, 3), (4, 3), True), ((2, 2, 3), (5, 3), False), ((7,), (1, 7), True)]
    for xs, ws, use_bias in shapes:
        tensors = {"x": rng.standard_normal(xs), "w": rng.standard_normal(ws)}
        if use_bias:
            tensors["b"] = rng.standard_normal(ws[0])
        r = _proj(rng, xs[:-1] + (ws[0],))

        def loss_fn(t, r=r):
            y, _ = ops.linear(t["x"], t["w"], t.get("b"))
            return float((y * r).sum())

        def grads_fn(t, r=r):
            _, ctx = ops.linear(t["x"], t["w"], t.get("b"))
            gx, gw, gb = ops.linear_backward(ctx, r)
            out = {"x": gx, "w": gw}
            if gb is not None:
                out["b"] = gb
            return out

        cases.append((tensors, loss_fn, grads_fn))
    return cases


def _cases_softmax_attention(seed):
    rng = substream(seed, "check-attention")
    cases = []
    for n, m, d, dv in [(1, 1, 1, 1), (3, 3, 4, 2), (2, 5, 3, 3)]:
        tensors = {"q": rng.standard_normal((n, d)), "k": rng.standard_normal((m, d)),
                   "v": rng.standard_normal((m, dv))}
        r = _proj(rng, (n, dv))

        def loss_fn(t, r=r):
            y, _ = ops.softmax_attention(t["q"], t["k"], t["v"])
            return float((y * r).sum())

        def grads_fn(t, r=r):
            _, ctx = ops.softmax_attention(t["q"], t["k"], t["v"])
            gq, gk, gv = ops.softmax_attention_backward(ctx, r)
            return {"q": gq, "k": gk, "v": gv}

        cases.append((tensors, loss_fn, grads_fn))
    return cases


def _cases_avg_pool(seed):
    rng = substream(seed, "check-avgpool")
    cases = []
    for shape in [(1, 2, 2), (3, 4, 5), (2, 1, 1)]:
        tensors = {"x": rng.standard_normal(shape)}
        r = _proj(rng, (shape[0],))

        def loss_fn(t, r=r):
            y, _ = ops.avg_pool_spatial(t["x"])
            return float((y * r).sum())

        def grads_fn(t, r=r):
            _, ctx = ops.avg_pool_spatial(t["x"])
            return {"x": ops.avg_pool_spatial_backward(ctx, r)}

        cases.append((tensors, loss_fn, grads_fn))
    return cases


def _cases_relu(seed):
    rng = substream(seed, "check-relu")
    cases = []
    for shape in [(7,), (3, 4), (2, 3, 2)]:
        # keep samples away from the kink at 0
        signs = rng.choice([-1.0, 1.0], size=shape)
        tensors = {"x": signs * rng.uniform(0.1, 1.0, size=shape)}
        r = _proj(rng, shape)

        def loss_fn(t, r=r):
            y, _ = ops.relu(t["x"])
            return float((y * r).sum())

        def grads_fn(t, r=r):
            _, ctx = ops.relu(t["x"])
            return {"x": ops.relu_backward(ctx, r)}

        cases.append((tensors, loss_fn, grads_fn))
    return cases


def _cases_sparse_causal(seed):
    rng = substream(seed, "check-sparse-causal")
    n, c, h, w = 3, 2, 2, 2
    tensors = {"z": rng.standard_normal((n, c, h, w))}
    for name in ("wq", "wk", "wv", "wo"):
        tensors[name] = rng.standard_normal((c, c))
    r = _proj(rng, (n, c, h, w))

    def loss_fn(t):
        wts = {k: t[k] for k in ("wq", "wk", "wv", "wo")}
        y, _ = diffusion.sparse_causal_attention(t["z"], wts)
        return float((y * r).sum())

    def grads_fn(t):
        wts = {k: t[k] for k in ("wq", "wk", "wv", "wo")}
        _, ctx = diffusion.sparse_causal_attention(t["z"], wts)
        gz, gw = diffusion.sparse_causal_attention_backward(ctx, r)
        return {"z": gz, **gw}

    return [(tensors, loss_fn, grads_fn)]


def _cases_temporal_inject(seed):
    rng = substream(seed, "check-temporal")
    n, c, h, w = 3, 2, 2, 2
    lam = 0.2
    tensors = {"z": rng.standard_normal((n, c, h, w)), "m": rng.standard_normal((n, c))}
    for name in ("wq", "wk", "wv", "wo"):
        tensors[name] = rng.standard_normal((c, c))
    r = _proj(rng, (n, c, h, w))

    def loss_fn(t):
        wts = {k: t[k] for k in ("wq", "wk", "wv", "wo")}
        y, _ = diffusion.temporal_attention_inject(t["z"], t["m"], lam, wts)
        return float((y * r).sum())

    def grads_fn(t):
        wts = {k: t[k] for k in ("wq", "wk", "wv", "wo")}
        _, ctx = diffusion.temporal_attention_inject(t["z"], t["m"], lam, wts)
        gz, gm, gw = diffusion.temporal_attention_inject_backward(ctx, r)
        return {"z": gz, "m": gm, **gw}

    return [(tensors, loss_fn, grads_fn)]


def _guide_params_from(t: dict) -> ParamSet:
    p = ParamSet()
    p.add("conv1", t["conv1"])
    p.add("conv2", t["conv2"])
    p.add("head", t["head"])
    return p


def _cases_motionguide(seed):
    rng = substream(seed, "check-motionguide")
    n, h, w, d = 2, 8, 8, 6
    base = guide.motionguide_init(d=d, seed=seed, zero_init_head=False, dtype=np.float64)
    tensors = {name: base.value(name).copy() for name in ("conv1", "conv2", "head")}
    inputs = rng.uniform(0.0, 1.0, size=(n, 3, h, w))
    alphas = np.array([0.4, 0.7])
    r = _proj(rng, (n, d))

    def loss_fn(t):
        emb, _ = guide.motionguide_forward(inputs, alphas, _guide_params_from(t))
        return float((emb * r).sum())

    def grads_fn(t):
        p = _guide_params_from(t)
        _, ctx = guide.motionguide_forward(inputs, alphas, p)
        guide.motionguide_backward(ctx, r, p)
        return {name: p[name].grad for name in ("conv1", "conv2", "head")}

    return [(tensors, loss_fn, grads_fn)]


def _cases_denoiser_loss(seed):
    """Noise-prediction loss on a 2-frame 4x4 instance, checked over the
    fine-tune trainable split (spatial queries, temporal values, guide)."""
    rng = substream(seed, "check-denoiser")
    cfg = diffusion.DiffusionConfig(channels=4, blocks=2, mlp_hidden=8, timesteps=10,
                                    ddim_steps=5, corpus_size=2)
    schedule = diffusion.NoiseSchedule.from_config(cfg)
    n, c, h, w = 2, cfg.channels, 4, 4
    lam = 0.1
    t_step = 6
    concept = 0

    base = diffusion.denoiser_init(cfg, seed, dtype=np.float64)
    guide_base = guide.motionguide_init(d=c, seed=seed, zero_init_head=False, dtype=np.float64)
    split = [f"b{b}.{sfx}" for b in range(cfg.blocks) for sfx in diffusion.FINETUNE_TRAINABLE]
    tensors = {name: base.value(name).copy() for name in split}
    tensors.update({f"guide.{n2}": guide_base.value(n2).copy()
                    for n2 in ("conv1", "conv2", "head")})
    frozen = {name: base.value(name) for name in base.names() if name not in split}

    z0 = rng.standard_normal((n, c, h, w))
    eps = rng.standard_normal((n, c, h, w))
    g_inputs = rng.uniform(0.0, 1.0, size=(n, 3, h, w))
    g_alphas = np.array([0.5, 0.8])
    z_t = diffusion.add_noise(z0, t_step, eps, schedule)

    def build(t):
        params = ParamSet()
        for name in base.names():
            params.add(name, t[name] if name in t else frozen[name],
                       trainable=name in split)
        gp = ParamSet()
        for n2 in ("conv1", "conv2", "head"):
            gp.add(f"{n2}", t[f"guide.{n2}"])
        return params, gp

    def loss_fn(t):
        params, gp = build(t)
        m_emb, _ = guide.motionguide_forward(g_inputs, g_alphas, gp)
        eps_hat, _ = diffusion.denoise_step(z_t, t_step, concept, m_emb, lam, params, cfg)
        return diffusion.noise_loss(eps_hat, eps)[0]

    def grads_fn(t):
        params, gp = build(t)
        m_emb, g_ctx = guide.motionguide_forward(g_inputs, g_alphas, gp)
        eps_hat, ctx = diffusion.denoise_step(z_t, t_step, concept, m_emb, lam, params, cfg)
        _, grad = diffusion.noise_loss(eps_hat, eps)
        _, g_m = diffusion.denoise_backward(ctx, grad, params, cfg)
        guide.motionguide_backward(g_ctx, g_m, gp)
        out = {name: params[name].grad for name in split}
        out.update({f"guide.{n2}": gp[n2].grad for n2 in ("conv1", "conv2", "head")})
        return out

    return [(tensors, loss_fn, grads_fn)]


REGISTRY = {
    "conv2d": (_cases_conv2d, LAYER_TOL),
    "linear": (_cases_linear, LAYER_TOL),
    "softmax_attention": (_cases_softmax_attention, LAYER_TOL),
    "avg_pool_spatial": (_cases_avg_pool, LAYER_TOL),
    "relu": (_cases_relu, LAYER_TOL),
    "sparse_causal_attention": (_cases_sparse_causal, LAYER_TOL),
    "temporal_attention_inject": (_cases_temporal_inject, LAYER_TOL),
    "motionguide": (_cases_motionguide, LAYER_TOL),
    "denoiser_loss": (_cases_denoiser_loss, END_TO_END_TOL),
}


def run_check(op_name: str, seed: int = 0, corrupt: bool = False) -> CheckResult:
    """Run one registered check; ``corrupt`` scales the analytic
    gradients by 1.001 (a test hook that must make the check fail)."""
    if op_name not in REGISTRY:
        raise ValueError(f"unregistered op {op_name!r}; known: {sorted(REGISTRY)}")
    builder, tol = REGISTRY[op_name]
    per_tensor: dict[str, float] = {}
    for tensors, loss_fn, grads_fn in builder(seed):
        grads = grads_fn(tensors)
        if corrupt:
            grads = {k: v * 1.001 for k, v in grads.items()}
        errs = fd_check(loss_fn, tensors, grads, seed=seed)
        for name, err in errs.items():
            per_tensor[name] = max(per_tensor.get(name, 0.0), err)
    return CheckResult(op_name, tol, per_tensor)


def run_all(seed: int = 0, corrupt_op: str | None = None) -> list[CheckResult]:
    if corrupt_op is not None and corrupt_op not in REGISTRY:
        raise ValueError(f"unregistered op {corrupt_op!r}; known: {sorted(REGISTRY)}")
    return [run_check(name, seed=seed, corrupt=(name == corrupt_op)) for name in REGISTRY]


def write_report_csv(path, results: list[CheckResult]) -> None:
    with open(path, "w") as fh:
        fh.write("op,max_rel_err,tolerance,status\n")
        for res in results:
            status = "pass" if res.passed else "FAIL"
            fh.write(f"{res.op},{res.max_error!r},{res.tolerance!r},{status}\n")
