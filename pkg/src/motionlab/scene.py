"""Synthetic rigid-body video renderer.

Renders cubes/cuboids/octahedra following 6-DOF pose trajectories with a
pinhole camera and per-pixel ray/face intersection plus z-buffer. Each
frame yields:

  corr   dense correspondence colors: the normalized object-space
         coordinate of the visible surface point, constant per material
         point under rigid motion
  depth  normalized inverse view-space depth in (0,1] inside the object,
         0 outside
  mask   binary object coverage
  alpha  covered-pixel count / total pixels, exact
  rgb    flat-shaded appearance under a fixed directional light
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .rng import substream


class SceneError(RuntimeError):
    pass


# ----------------------------------------------------------- pose math

def rotation_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    """Intrinsic X-then-Y-then-Z Euler rotation, angles in radians."""
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mx @ my @ mz


@dataclass(frozen=True)
class Trajectory:
    """Per-frame 6-DOF poses: columns (tx, ty, tz, rx, ry, rz)."""

    poses: np.ndarray

    def __post_init__(self):
        poses = np.asarray(self.poses, dtype=np.float64)
        if poses.ndim != 2 or poses.shape[1] != 6:
            raise ValueError(f"trajectory poses must be [N,6], got {poses.shape}")
        if poses.shape[0] < 2:
            raise ValueError("trajectory needs at least 2 frames")
        if not np.all(np.isfinite(poses)):
            raise ValueError("trajectory contains non-finite values")
        object.__setattr__(self, "poses", poses)

    @property
    def n(self) -> int:
        return self.poses.shape[0]


def make_trajectory(kind: str, n: int, **params) -> Trajectory:
    """Smooth pose sequences.

    kinds and their parameters:
      linear   start, velocity (per frame), spin (rad per frame), start_rot
      orbit    center, radius, phase, turns, tilt, spin, start_rot
      tumble   position, spin, start_rot
      custom   poses (explicit [N,6] list)
    """
    if n < 2:
        raise ValueError(f"frame count must be >= 2, got {n}")
    k = np.arange(n, dtype=np.float64)

    if kind == "custom":
        return Trajectory(np.array(params["poses"], dtype=np.float64))

    start_rot = np.asarray(params.get("start_rot", (0.0, 0.0, 0.0)), dtype=np.float64)
    spin = np.asarray(params.get("spin", (0.0, 0.0, 0.0)), dtype=np.float64)
    rot = start_rot[None, :] + k[:, None] * spin[None, :]
    rot_amp = np.asarray(params.get("rot_amp", (0.0, 0.0, 0.0)), dtype=np.float64)
    if np.any(rot_amp):
        rot_freq = np.asarray(params.get("rot_freq", (1.0, 1.0, 1.0)), dtype=np.float64)
        rot_phase = np.asarray(params.get("rot_phase", (0.0, 0.0, 0.0)), dtype=np.float64)
        rot = rot + rot_amp[None, :] * np.sin(
            2.0 * math.pi * rot_freq[None, :] * k[:, None] / n + rot_phase[None, :])

    if kind == "linear":
        start = np.asarray(params.get("start", (0.0, 0.0, 6.0)), dtype=np.float64)
        vel = np.asarray(params.get("velocity", (0.0, 0.0, 0.0)), dtype=np.float64)
        pos = start[None, :] + k[:, None] * vel[None, :]
    elif kind == "orbit":
        center = np.asarray(params.get("center", (0.0, 0.0, 6.0)), dtype=np.float64)
        radius = float(params.get("radius", 0.8))
        phase = float(params.get("phase", 0.0))
        turns = float(params.get("turns", 1.0))
        tilt = float(params.get("tilt", 0.0))
        z_amp = float(params.get("z_amp", 0.0))
        z_freq = float(params.get("z_freq", 1.0))
        z_phase = float(params.get("z_phase", 0.0))
        theta = phase + 2.0 * math.pi * turns * k / n
        pos = np.stack([
            center[0] + radius * np.cos(theta),
            center[1] + radius * np.sin(theta) * math.cos(tilt),
            center[2] + radius * np.sin(theta) * math.sin(tilt)
                      + z_amp * np.sin(2.0 * math.pi * z_freq * k / n + z_phase),
        ], axis=1)
    elif kind == "tumble":
        position = np.asarray(params.get("position", (0.0, 0.0, 6.0)), dtype=np.float64)
        pos = np.tile(position, (n, 1))
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")

    return Trajectory(np.concatenate([pos, rot], axis=1))


# ------------------------------------------------------------ geometry

@dataclass(frozen=True)
class ShapeSpec:
    kind: str  # cube | cuboid | octahedron
    half_extents: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.kind not in ("cube", "cuboid", "octahedron"):
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if any(h <= 0 for h in self.half_extents):
            raise ValueError("half extents must be positive")


@dataclass(frozen=True)
class Camera:
    width: int = 64
    height: int = 64
    focal: float = 40.0
    z_near: float = 2.0
    z_far: float = 20.0


def _box_faces(h):
    """Six quads as (center, e1, e2, h1, h2, normal) in object space."""
    hx, hy, hz = h
    ex, ey, ez = np.eye(3)
    faces = []
    axes = [(ex, ey, ez, hx, hy, hz), (ey, ez, ex, hy, hz, hx), (ez, ex, ey, hz, hx, hy)]
    for axis, e1, e2, ha, h1, h2 in axes:
        for sign in (1.0, -1.0):
            faces.append(("quad", sign * ha * axis, e1, e2, h1, h2, sign * axis))
    return faces


def _octahedron_faces(h):
    """Eight triangles as (v0, v1, v2, outward normal) in object space."""
    hx, hy, hz = h
    faces = []
    for sx in (1.0, -1.0):
        for sy in (1.0, -1.0):
            for sz in (1.0, -1.0):
                v0 = np.array([sx * hx, 0.0, 0.0])
                v1 = np.array([0.0, sy * hy, 0.0])
                v2 = np.array([0.0, 0.0, sz * hz])
                normal = np.cross(v1 - v0, v2 - v0)
                # orient outward: away from the origin
                if np.dot(normal, v0 + v1 + v2) < 0:
                    normal = -normal
                faces.append(("tri", v0, v1, v2, normal / np.linalg.norm(normal)))
    return faces


def shape_vertices(shape: ShapeSpec) -> np.ndarray:
    hx, hy, hz = shape.half_extents
    if shape.kind == "octahedron":
        return np.array([[sx * hx, 0, 0] for sx in (1, -1)]
                        + [[0, sy * hy, 0] for sy in (1, -1)]
                        + [[0, 0, sz * hz] for sz in (1, -1)], dtype=np.float64)
    return np.array([[sx * hx, sy * hy, sz * hz]
                     for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)], dtype=np.float64)


def _faces_in_camera(shape: ShapeSpec, rot: np.ndarray, t: np.ndarray):
    if shape.kind == "octahedron":
        cam = []
        for _, v0, v1, v2, nrm in _octahedron_faces(shape.half_extents):
            cam.append(("tri", rot @ v0 + t, rot @ v1 + t, rot @ v2 + t, rot @ nrm))
        return cam
    cam = []
    for _, c, e1, e2, h1, h2, nrm in _box_faces(shape.half_extents):
        cam.append(("quad", rot @ c + t, rot @ e1, rot @ e2, h1, h2, rot @ nrm))
    return cam


_INSIDE_EPS = 1e-9   # tolerance of the polygon inside-test, in object units
_MIN_RAY_Z = 0.1     # reject hits this close to the camera


def _raycast(dirs: np.ndarray, faces_cam):
    """Nearest intersection of rays (z component 1) with a face list.

    Returns (z, hit, point, normal): per-ray view depth, coverage flag,
    camera-space hit point, and the face normal at the hit.
    """
    m = dirs.shape[0]
    zbuf = np.full(m, np.inf)
    hit = np.zeros(m, dtype=bool)
    point = np.zeros((m, 3))
    normal = np.zeros((m, 3))
    for face in faces_cam:
        if face[0] == "quad":
            _, c, e1, e2, h1, h2, nrm = face
            dn = dirs @ nrm
            with np.errstate(divide="ignore", invalid="ignore"):
                s = np.where(np.abs(dn) > 1e-12, np.dot(c, nrm) / dn, -1.0)
            valid = s > _MIN_RAY_Z
            q = dirs * s[:, None] - c
            a = q @ e1
            b = q @ e2
            inside = valid & (np.abs(a) <= h1 + _INSIDE_EPS) & (np.abs(b) <= h2 + _INSIDE_EPS)
        else:
            _, v0, v1, v2, nrm = face
            dn = dirs @ nrm
            with np.errstate(divide="ignore", invalid="ignore"):
                s = np.where(np.abs(dn) > 1e-12, np.dot(v0, nrm) / dn, -1.0)
            valid = s > _MIN_RAY_Z
            q = dirs * s[:, None] - v0
            e1 = v1 - v0
            e2 = v2 - v0
            d11, d12, d22 = e1 @ e1, e1 @ e2, e2 @ e2
            det = d11 * d22 - d12 * d12
            q1 = q @ e1
            q2 = q @ e2
            u = (d22 * q1 - d12 * q2) / det
            w = (d11 * q2 - d12 * q1) / det
            inside = valid & (u >= -_INSIDE_EPS) & (w >= -_INSIDE_EPS) & (u + w <= 1 + _INSIDE_EPS)
        closer = inside & (s < zbuf)
        if not closer.any():
            continue
        zbuf[closer] = s[closer]
        hit[closer] = True
        point[closer] = dirs[closer] * s[closer, None]
        normal[closer] = nrm
    return zbuf, hit, point, normal


def _pixel_dirs(camera: Camera) -> np.ndarray:
    # rays through pixel centers; z component fixed to 1 so the ray
    # parameter equals view depth
    cx, cy = camera.width / 2.0, camera.height / 2.0
    cols = (np.arange(camera.width) + 0.5 - cx) / camera.focal
    rows = (np.arange(camera.height) + 0.5 - cy) / camera.focal
    xs, ys = np.meshgrid(cols, rows)
    return np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)], axis=1)


_LIGHT_DIR = np.array([-0.35, -0.5, -0.79])
_LIGHT_DIR = _LIGHT_DIR / np.linalg.norm(_LIGHT_DIR)
_BASE_COLORS = {
    "cube": (0.85, 0.35, 0.2),
    "cuboid": (0.85, 0.35, 0.2),
    "octahedron": (0.25, 0.5, 0.9),
}


@dataclass
class Frame:
    corr: np.ndarray   # [3,H,W]
    depth: np.ndarray  # [1,H,W]
    mask: np.ndarray   # [1,H,W]
    alpha: float
    rgb: np.ndarray    # [3,H,W]


def render_frame(shape: ShapeSpec, pose, camera: Camera) -> Frame:
    """Render one pose. Raises SceneError if no pixel is covered."""
    pose = np.asarray(pose, dtype=np.float64)
    rot = rotation_matrix(pose[3], pose[4], pose[5])
    t = pose[:3]
    faces = _faces_in_camera(shape, rot, t)
    dirs = _pixel_dirs(camera)
    z, hit, point, normal = _raycast(dirs, faces)
    count = int(hit.sum())
    if count == 0:
        raise SceneError("object out of view: zero pixels covered")

    hw = (camera.height, camera.width)
    mask = hit.reshape(hw)

    h_ext = np.asarray(shape.half_extents)
    p_obj = (point[hit] - t) @ rot  # row-vector form of R^T p
    corr_vals = np.clip((p_obj + h_ext) / (2.0 * h_ext), 0.0, 1.0)
    corr = np.zeros(hw + (3,))
    corr[mask] = corr_vals

    inv_near, inv_far = 1.0 / camera.z_near, 1.0 / camera.z_far
    depth = np.zeros(hw)
    depth[mask] = np.clip((1.0 / z[hit] - inv_far) / (inv_near - inv_far), 1e-6, 1.0)

    base = np.asarray(_BASE_COLORS[shape.kind])
    shade = 0.3 + 0.7 * np.maximum(0.0, normal[hit] @ _LIGHT_DIR)
    rgb = np.zeros(hw + (3,))
    rgb[mask] = base[None, :] * shade[:, None]

    alpha = count / (camera.height * camera.width)
    return Frame(
        corr=corr.transpose(2, 0, 1).astype(np.float32),
        depth=depth[None].astype(np.float32),
        mask=mask[None].astype(np.float32),
        alpha=alpha,
        rgb=rgb.transpose(2, 0, 1).astype(np.float32),
    )


def probe_vertex(shape: ShapeSpec, pose, camera: Camera, vertex_obj):
    """Cast a ray through the exact projection of an object-space point.

    Returns (visible, corr_color). Used to verify that the correspondence
    color of a material point does not drift across poses.
    """
    pose = np.asarray(pose, dtype=np.float64)
    rot = rotation_matrix(pose[3], pose[4], pose[5])
    t = pose[:3]
    v_cam = rot @ np.asarray(vertex_obj, dtype=np.float64) + t
    if v_cam[2] <= _MIN_RAY_Z:
        return False, None
    dirs = (v_cam / v_cam[2])[None, :]
    z, hit, point, _ = _raycast(dirs, _faces_in_camera(shape, rot, t))
    if not hit[0] or z[0] < v_cam[2] - 1e-6 * v_cam[2]:
        return False, None  # occluded or missed
    p_obj = rot.T @ (point[0] - t)
    h_ext = np.asarray(shape.half_extents)
    return True, np.clip((p_obj + h_ext) / (2.0 * h_ext), 0.0, 1.0)


# ---------------------------------------------------------------- video

@dataclass
class SyntheticVideo:
    corr: np.ndarray    # [N,3,H,W]
    depth: np.ndarray   # [N,1,H,W]
    mask: np.ndarray    # [N,1,H,W]
    alpha: np.ndarray   # [N] float64, exact pixel ratios
    rgb: np.ndarray     # [N,3,H,W]
    trajectory: Trajectory
    shape: ShapeSpec
    camera: Camera

    @property
    def n(self) -> int:
        return self.corr.shape[0]


def render_video(shape: ShapeSpec, traj: Trajectory, camera: Camera) -> SyntheticVideo:
    frames = []
    for i, pose in enumerate(traj.poses):
        try:
            frames.append(render_frame(shape, pose, camera))
        except SceneError as exc:
            raise SceneError(f"frame {i}: {exc}") from exc
    return SyntheticVideo(
        corr=np.stack([f.corr for f in frames]),
        depth=np.stack([f.depth for f in frames]),
        mask=np.stack([f.mask for f in frames]),
        alpha=np.array([f.alpha for f in frames], dtype=np.float64),
        rgb=np.stack([f.rgb for f in frames]),
        trajectory=traj,
        shape=shape,
        camera=camera,
    )


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to (re)render a video deterministically."""

    shape: ShapeSpec = ShapeSpec("cube")
    traj_kind: str = "orbit"
    traj_params: dict = field(default_factory=dict)
    frames: int = 16
    camera: Camera = Camera()

    def trajectory(self) -> Trajectory:
        return make_trajectory(self.traj_kind, self.frames, **self.traj_params)


# Default scene: an inclined orbit with a z harmonic so all three
# translation dims trace distinct curves, plus rotations built from an
# in-plane ramp (rz) and bounded x/y wobbles around a corner-on view.
# Keeping rx/ry away from face-on poses keeps the projected-area swing of
# shape-changed variants moderate, which the occupancy normalization of
# the guide module rewards.
DEFAULT_TRAJ_PARAMS = {
    "center": (0.0, 0.0, 6.0),
    "radius": 0.8,
    "phase": 0.3,
    "turns": 1.0,
    "tilt": 0.35,
    "z_amp": 0.35,
    "z_freq": 2.0,
    "z_phase": 0.7,
    "spin": (0.0, 0.0, 0.35),
    "start_rot": (0.6155, 0.7854, 0.1),
    "rot_amp": (0.45, 0.4, 0.0),
    "rot_freq": (1.0, 2.0, 1.0),
    "rot_phase": (0.0, 1.0, 0.0),
}


def default_scene(frames: int = 16, camera: Camera | None = None) -> SceneSpec:
    return SceneSpec(
        shape=ShapeSpec("cube"),
        traj_kind="orbit",
        traj_params=dict(DEFAULT_TRAJ_PARAMS),
        frames=frames,
        camera=camera or Camera(),
    )


def render_scene(spec: SceneSpec) -> SyntheticVideo:
    return render_video(spec.shape, spec.trajectory(), spec.camera)


POSITIVE_SCALE = (1.5, 0.6, 1.0)


def make_positive_sample(spec: SceneSpec, scale=POSITIVE_SCALE) -> SyntheticVideo:
    """Same trajectory and camera, shape swapped for a scaled cuboid."""
    he = tuple(h * s for h, s in zip(spec.shape.half_extents, scale))
    shape = ShapeSpec("cuboid", he)
    return render_video(shape, spec.trajectory(), spec.camera)


def _jitter_traj_params(kind: str, params: dict, rng: np.random.Generator) -> dict:
    new = dict(params)
    new["spin"] = tuple(rng.uniform(-0.3, 0.3, size=3))
    if kind == "orbit":
        new["phase"] = float(params.get("phase", 0.0) + rng.uniform(0.4 * math.pi, 1.6 * math.pi))
        new["radius"] = float(params.get("radius", 0.8) * rng.uniform(0.55, 1.45))
        new["tilt"] = float(params.get("tilt", 0.0) + rng.uniform(-0.25, 0.25))
        if rng.random() < 0.5:
            new["turns"] = -float(params.get("turns", 1.0))
    elif kind == "linear":
        vel = np.asarray(params.get("velocity", (0.0, 0.0, 0.0)), dtype=np.float64)
        new["velocity"] = tuple(vel * rng.uniform(-1.5, 1.5, size=3) + rng.uniform(-0.05, 0.05, size=3))
    elif kind == "tumble":
        pass  # the resampled spin above is the motion change
    else:
        raise SceneError(f"cannot resample trajectory kind {kind!r}")
    return new


def make_negative_sample(spec: SceneSpec, seed: int, separation: float = 2.0,
                         attempts: int = 100) -> SyntheticVideo:
    """Same shape, independently sampled trajectory of the same family.

    The pose-sequence L2 distance to the base trajectory must reach
    ``separation``; sampling retries up to ``attempts`` times.
    """
    if separation <= 0:
        raise ValueError("negative-sample separation must be > 0")
    base = spec.trajectory()
    rng = substream(seed, "negative-trajectory")
    for _ in range(attempts):
        params = _jitter_traj_params(spec.traj_kind, spec.traj_params, rng)
        traj = make_trajectory(spec.traj_kind, spec.frames, **params)
        if np.linalg.norm(traj.poses - base.poses) >= separation:
            return render_video(spec.shape, traj, spec.camera)
    raise SceneError(f"no trajectory with separation >= {separation} found "
                     f"in {attempts} attempts")


def mask_centroids(video: SyntheticVideo) -> np.ndarray:
    """Per-frame (cx, cy) centroid of the object mask, in pixels."""
    n, _, h, w = video.mask.shape
    ys, xs = np.mgrid[0:h, 0:w]
    out = np.zeros((n, 2))
    for i in range(n):
        m = video.mask[i, 0]
        total = m.sum()
        out[i] = ((xs * m).sum() / total, (ys * m).sum() / total)
    return out


# ------------------------------------------------------------------- io

def write_ppm(path, img) -> None:
    """Binary PPM (P6, maxval 255) from a [3,H,W] float image in [0,1]."""
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    data = np.round(arr.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P6":
            raise ValueError(f"{path}: not a binary PPM")
        w, h = map(int, fh.readline().split())
        maxval = int(fh.readline())
        data = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / maxval


def write_pgm16(path, img) -> None:
    """Binary 16-bit PGM (P5, maxval 65535) from a [H,W] float image in [0,1]."""
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    data = np.round(arr * 65535.0).astype(">u2")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm16(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P5":
            raise ValueError(f"{path}: not a binary PGM")
        w, h = map(int, fh.readline().split())
        maxval = int(fh.readline())
        data = np.frombuffer(fh.read(w * h * 2), dtype=">u2")
    return data.reshape(h, w).astype(np.float32) / maxval


def write_trajectory_csv(path, traj: Trajectory, alphas) -> None:
    with open(path, "w") as fh:
        fh.write("frame,tx,ty,tz,rx,ry,rz,alpha\n")
        for i, (pose, a) in enumerate(zip(traj.poses, alphas)):
            vals = ",".join(repr(float(v)) for v in pose)
            fh.write(f"{i},{vals},{float(a)!r}\n")


def read_trajectory_csv(path) -> tuple[Trajectory, np.ndarray]:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "frame,tx,ty,tz,rx,ry,rz,alpha":
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in fh:
            rows.append([float(v) for v in line.strip().split(",")])
    arr = np.array(rows)
    return Trajectory(arr[:, 1:7]), arr[:, 7]
