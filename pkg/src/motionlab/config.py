"""Flat key=value experiment configuration.

One file, one key per line (``key=value``, ``#`` comments allowed).
Unknown keys are rejected so typos fail loudly. Every key has a
documented default; command-line flags override file values.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from . import scene
from .diffusion import ABLATION_MODES, DiffusionConfig
from .toy import ToyConfig


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"cannot parse boolean from {text!r}")


def _parse_vec3(text: str) -> tuple:
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) != 3:
        raise ConfigError(f"expected three comma-separated values, got {text!r}")
    return tuple(float(p) for p in parts)


def _parse_modes(text: str) -> tuple:
    modes = tuple(p.strip() for p in text.split(",") if p.strip())
    for m in modes:
        if m not in ABLATION_MODES:
            raise ConfigError(f"unknown ablation mode {m!r}; known: {ABLATION_MODES}")
    return modes


@dataclass
class ExperimentConfig:
    # global
    seed: int = 0
    out: str = "out"
    # scene
    frames: int = 16
    resolution: int = 64
    focal: float = 40.0
    shape: str = "cube"
    half_extent: float = 1.0
    traj: str = "orbit"
    orbit_radius: float = 0.8
    orbit_tilt: float = 0.5
    orbit_phase: float = 0.3
    orbit_turns: float = 1.0
    center: tuple = (0.0, 0.0, 6.0)
    spin: tuple = (0.15, 0.22, 0.11)
    start_rot: tuple = (0.1, 0.2, 0.05)
    velocity: tuple = (0.0, 0.0, 0.0)
    pos_scale: tuple = scene.POSITIVE_SCALE
    neg_separation: float = 2.0
    # toy experiment
    toy_iterations: int = 500
    toy_lr: float = 5e-4
    toy_log_stride: int = 10
    toy_d: int = 64
    toy_k: float = 3.0
    toy_m: float = 5.0
    # guide
    guide_mode: str = "multiply"
    guide_scale: int = 8
    # denoiser
    latent_channels: int = 4
    blocks: int = 2
    mlp_hidden: int = 16
    schedule_steps: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.02
    lam: float = 0.1
    ddim_steps: int = 50
    pretrain_iterations: int = 800
    pretrain_lr: float = 2e-3
    corpus_size: int = 32
    finetune_iterations: int = 100
    finetune_lr: float = 5e-4
    blend: bool = False
    ablate_modes: tuple = ABLATION_MODES

    def scene_spec(self) -> scene.SceneSpec:
        he = (self.half_extent,) * 3
        kind = "cube" if self.shape == "cube" and len(set(he)) == 1 else self.shape
        camera = scene.Camera(width=self.resolution, height=self.resolution, focal=self.focal)
        if self.traj == "orbit":
            params = {
                "center": self.center, "radius": self.orbit_radius,
                "phase": self.orbit_phase, "turns": self.orbit_turns,
                "tilt": self.orbit_tilt, "spin": self.spin, "start_rot": self.start_rot,
            }
        elif self.traj == "linear":
            params = {"start": self.center, "velocity": self.velocity,
                      "spin": self.spin, "start_rot": self.start_rot}
        elif self.traj == "tumble":
            params = {"position": self.center, "spin": self.spin, "start_rot": self.start_rot}
        else:
            raise ConfigError(f"unknown trajectory kind {self.traj!r}")
        return scene.SceneSpec(shape=scene.ShapeSpec(kind, he), traj_kind=self.traj,
                               traj_params=params, frames=self.frames, camera=camera)

    def toy_config(self) -> ToyConfig:
        return ToyConfig(iterations=self.toy_iterations, lr=self.toy_lr, seed=self.seed,
                         d=self.toy_d, log_stride=self.toy_log_stride,
                         scale=self.guide_scale, mode=self.guide_mode)

    def diffusion_config(self) -> DiffusionConfig:
        return DiffusionConfig(
            channels=self.latent_channels, blocks=self.blocks, mlp_hidden=self.mlp_hidden,
            timesteps=self.schedule_steps, beta_min=self.beta_min, beta_max=self.beta_max,
            lam=self.lam, ddim_steps=self.ddim_steps,
            pretrain_iterations=self.pretrain_iterations, pretrain_lr=self.pretrain_lr,
            corpus_size=self.corpus_size, finetune_iterations=self.finetune_iterations,
            finetune_lr=self.finetune_lr, downscale=self.guide_scale,
        )


_PARSERS = {
    int: int,
    float: float,
    str: str,
    bool: _parse_bool,
    tuple: _parse_vec3,
}

_TUPLE_KEYS_MODES = {"ablate_modes"}


def _parse_value(key: str, text: str, pytype) -> object:
    if key in _TUPLE_KEYS_MODES:
        return _parse_modes(text)
    try:
        return _PARSERS[pytype](text)
    except ConfigError:
        raise
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"cannot parse {key}={text!r}: {exc}") from exc


def parse_kv_file(path) -> dict:
    pairs = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.rstrip()!r}")
            key, value = line.split("=", 1)
            pairs[key.strip()] = value.strip()
    return pairs


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the config file, then explicit overrides."""
    known = {f.name: f.type for f in fields(ExperimentConfig)}
    types = {f.name: type(getattr(ExperimentConfig(), f.name)) for f in fields(ExperimentConfig)}
    values = {}
    merged = {}
    if path is not None:
        merged.update(parse_kv_file(path))
    merged.update(overrides or {})
    for key, text in merged.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(text, str):
            values[key] = _parse_value(key, text, types[key])
        else:
            values[key] = text
    cfg = ExperimentConfig(**values)
    if cfg.neg_separation <= 0:
        raise ConfigError("neg_separation must be > 0")
    if cfg.frames < 2:
        raise ConfigError("frames must be >= 2")
    return cfg
