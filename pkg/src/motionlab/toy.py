"""Trajectory regression from correspondence and depth maps.

Trains the motion-embedding module (head width 6) to predict per-frame
3-D translation and rotation of a rendered object from (corr, depth)
alone, then evaluates on a shape-changed video (same motion) and a
motion-changed video (same shape). The headline property: the learned
representation transfers across shape changes but not motion changes, so
the positive-sample error tracks the training error while the
negative-sample error stays far above both.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import guide
from .params import AdamState, ParamSet, adam_step
from .scene import SyntheticVideo, Trajectory


class DivergenceError(RuntimeError):
    pass


@dataclass
class ToyConfig:
    iterations: int = 500
    lr: float = 5e-4
    seed: int = 0
    d: int = 64          # embedding width for downstream use; the
                         # trajectory head itself is 6 wide (xyz + euler)
    log_stride: int = 10
    scale: int = 8
    mode: str = "multiply"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class TargetStats:
    """Per-dimension standardization over the training video's frames."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_trajectory(cls, traj: Trajectory) -> "TargetStats":
        mean = traj.poses.mean(axis=0)
        std = traj.poses.std(axis=0)
        std = np.where(std < 1e-8, 1.0, std)  # constant dims pass through
        return cls(mean, std)

    def apply(self, traj: Trajectory) -> np.ndarray:
        return ((traj.poses - self.mean) / self.std).astype(np.float32)


def toy_predict(video: SyntheticVideo, params: ParamSet, cfg: ToyConfig | None = None) -> np.ndarray:
    """Per-frame 6-vector prediction, [N,6]."""
    cfg = cfg or ToyConfig()
    if params.value("head").shape[0] != 6:
        raise ValueError("trajectory prediction needs a 6-wide head")
    inputs = guide.preprocess_video(video, cfg.scale, cfg.mode)
    pred, _ = guide.motionguide_forward(inputs, video.alpha, params)
    return pred


def toy_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over all N*6 entries, plus its gradient."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match target {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    grad = (2.0 / diff.size) * diff
    return loss, grad


def train_toy(video: SyntheticVideo, target: Trajectory, cfg: ToyConfig):
    """Full-batch Adam regression of the standardized trajectory.

    Returns (params, curve, stats). The curve holds (iteration, mse)
    pairs every ``log_stride`` iterations plus a final entry at index
    ``iterations`` computed after the last update, so the last curve
    value equals a fresh evaluation on the training video.
    """
    if video.n != target.n:
        raise ValueError(f"video has {video.n} frames but target has {target.n}")
    stats = TargetStats.from_trajectory(target)
    t_std = stats.apply(target)
    inputs = guide.preprocess_video(video, cfg.scale, cfg.mode)
    params = guide.motionguide_init(d=6, seed=cfg.seed, zero_init_head=True)
    opt = AdamState(params, lr=cfg.lr)

    curve = []
    for it in range(cfg.iterations):
        pred, ctx = guide.motionguide_forward(inputs, video.alpha, params)
        loss, grad = toy_loss(pred, t_std)
        if not np.isfinite(loss):
            raise DivergenceError(f"training loss diverged at iteration {it}")
        if it % cfg.log_stride == 0:
            curve.append((it, loss))
        guide.motionguide_backward(ctx, grad, params)
        adam_step(params, opt)
    final_pred, _ = guide.motionguide_forward(inputs, video.alpha, params)
    final_loss, _ = toy_loss(final_pred, t_std)
    curve.append((cfg.iterations, final_loss))
    return params, curve, stats


def eval_toy(params: ParamSet, video: SyntheticVideo, target: Trajectory,
             stats: TargetStats, cfg: ToyConfig | None = None) -> float:
    """MSE of the frozen predictor on a video against its own trajectory,
    standardized with the training-video statistics. No updates."""
    cfg = cfg or ToyConfig()
    pred = toy_predict(video, params, cfg)
    loss, _ = toy_loss(pred, stats.apply(target))
    return loss


@dataclass
class InvarianceReport:
    """Shape-invariance / motion-sensitivity verdicts from one run."""

    final_train_mse: float
    pos_mse: float
    neg_mse: float
    k_ratio: float = 3.0
    m_ratio: float = 5.0
    shape_invariant: bool = field(init=False)
    motion_sensitive: bool = field(init=False)

    def __post_init__(self):
        if min(self.final_train_mse, self.pos_mse, self.neg_mse) < 0:
            raise ValueError("MSE values must be non-negative")
        self.shape_invariant = self.pos_mse <= self.k_ratio * self.final_train_mse
        self.motion_sensitive = self.neg_mse >= self.m_ratio * self.final_train_mse

    @property
    def passed(self) -> bool:
        return self.shape_invariant and self.motion_sensitive

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("pos_mse,neg_mse,final_train_mse,K,M,shape_invariant,motion_sensitive\n")
            fh.write(f"{self.pos_mse!r},{self.neg_mse!r},{self.final_train_mse!r},"
                     f"{self.k_ratio!r},{self.m_ratio!r},"
                     f"{int(self.shape_invariant)},{int(self.motion_sensitive)}\n")

    @classmethod
    def from_csv(cls, path) -> "InvarianceReport":
        with open(path) as fh:
            header = fh.readline().strip()
            if header != "pos_mse,neg_mse,final_train_mse,K,M,shape_invariant,motion_sensitive":
                raise ValueError(f"{path}: unexpected header {header!r}")
            vals = fh.readline().strip().split(",")
        report = cls(final_train_mse=float(vals[2]), pos_mse=float(vals[0]),
                     neg_mse=float(vals[1]), k_ratio=float(vals[3]), m_ratio=float(vals[4]))
        if (report.shape_invariant, report.motion_sensitive) != (bool(int(vals[5])), bool(int(vals[6]))):
            raise ValueError(f"{path}: stored verdicts disagree with stored losses")
        return report


def invariance_report(train_curve, pos_mse: float, neg_mse: float,
                      ratios=(3.0, 5.0)) -> InvarianceReport:
    """Verdicts from a completed run: shape-invariant iff the positive
    error is within K times the final training error, motion-sensitive
    iff the negative error is at least M times it."""
    k_ratio, m_ratio = ratios
    return InvarianceReport(final_train_mse=train_curve[-1][1], pos_mse=pos_mse,
                            neg_mse=neg_mse, k_ratio=k_ratio, m_ratio=m_ratio)


def write_loss_csv(path, curve) -> None:
    with open(path, "w") as fh:
        fh.write("iter,train_mse\n")
        for it, loss in curve:
            fh.write(f"{it},{loss!r}\n")
