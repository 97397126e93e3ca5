"""Synthetic multi-view sequences of the procedural body, and their disk layout.

Ground truth comes from a dense surface sampling of the template (far denser
than the 6,890 training vertices), skinned per frame, given a pose-dependent
bulge so the sequence is not purely rigid, and z-buffer splatted at a
supersampled resolution.

Layout of a sequence directory::

    meta.json            resolution, cameras, parts, seed, motion, split
    template.bin         the body the sequence was generated from
    poses/<frame>.txt    frame id, root transform, per-bone quaternions
    rgb/<id>.ppm         8-bit color
    mask/<id>.msk        1-byte foreground raster
    parts/<id>.lbl       ground-truth part labels (255 = background)
    labels/<id>.lbl      annotator cache, filled on demand
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numba
import numpy as np

from ._validation import ConfigError, InvalidInputError, UsageError
from .formats import read_labels, read_mask, read_ppm, write_labels, write_mask, write_ppm, atomic_write_bytes
from .gaussians import normalize_quat
from .render import NEAR_PLANE, Camera
from .template import (
    Pose,
    TemplateBody,
    axis_angle_quat,
    bone_transforms,
    sample_capsule_union,
    segment_distance,
    skin_points,
    skinning_weights,
)

DATASET_FORMAT = "splatavatar-sequence"
DATASET_VERSION = 1
BACKGROUND = 255

PART_COLORS = np.array([
    [0.86, 0.68, 0.55],   # head
    [0.20, 0.36, 0.72],   # torso
    [0.80, 0.32, 0.25],   # left arm
    [0.28, 0.66, 0.32],   # right arm
    [0.34, 0.28, 0.22],   # legs
])

# bone -> (rotation axis, amplitude in radians, one-sided bend)
_MOTION = (
    ((0, 1, 0), 0.10, False),   # pelvis
    ((0, 1, 0), 0.25, False),   # chest
    ((1, 0, 0), 0.15, False),   # neck
    ((0, 1, 0), 0.30, False),   # head
    ((0, 0, 1), 0.70, False),   # l_upper_arm
    ((0, 1, 0), 1.00, True),    # l_forearm
    ((0, 0, 1), 0.30, False),   # l_hand
    ((0, 0, 1), 0.70, False),   # r_upper_arm
    ((0, -1, 0), 1.00, True),   # r_forearm
    ((0, 0, 1), 0.30, False),   # r_hand
    ((1, 0, 0), 0.50, False),   # l_thigh
    ((1, 0, 0), 0.90, True),    # l_shin
    ((1, 0, 0), 0.25, False),   # l_foot
    ((1, 0, 0), 0.50, False),   # r_thigh
    ((1, 0, 0), 0.90, True),    # r_shin
    ((1, 0, 0), 0.25, False),   # r_foot
)
# bulging bone -> the child whose bend drives it
_BULGE = {4: 5, 7: 8, 10: 11, 13: 14}


@dataclass
class MotionSpec:
    """Smooth periodic limb motion plus a root turn.

    ``amplitude`` scales every bone's swing, ``cycles`` is the number of swing
    periods over the sequence, ``yaw_turns`` the number of full root turns, and
    ``bulge`` the peak outward surface shift (scene units) at full bend.
    """

    amplitude: float = 1.0
    cycles: float = 1.5
    yaw_turns: float = 1.0
    bulge: float = 0.012

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not np.isfinite(value):
                raise ConfigError(f"motion {name} must be finite")
        if self.amplitude < 0 or self.bulge < 0 or self.cycles < 0:
            raise ConfigError("motion amplitude, cycles and bulge must be non-negative")


@dataclass
class Frame:
    frame_id: str
    image: np.ndarray             # (H, W, 3) float in [0, 1]
    mask: np.ndarray              # (H, W) uint8 in {0, 1}
    camera: Camera
    pose: Pose
    index: int = 0                # time step
    camera_index: int = 0
    split: str = "train"
    parts: Optional[np.ndarray] = None   # ground-truth part labels when known


@dataclass
class Dataset:
    frames: list
    body: TemplateBody
    meta: dict = field(default_factory=dict)
    root: Optional[Path] = None

    def split(self, name: str) -> list:
        if name == "all":
            return list(self.frames)
        out = [f for f in self.frames if f.split == name]
        if not out:
            raise UsageError(f"dataset has no frames in split {name!r}")
        return out

    @property
    def label_cache(self):
        return None if self.root is None else self.root / "labels"

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        meta_path = root / "meta.json"
        if not meta_path.exists():
            raise InvalidInputError(f"{root}: no meta.json, not a sequence directory")
        meta = json.loads(meta_path.read_text())
        if meta.get("format") != DATASET_FORMAT or meta.get("version") != DATASET_VERSION:
            raise InvalidInputError(f"{root}: unsupported sequence format")
        body = TemplateBody.load(root / "template.bin")
        cams = [Camera.from_dict(c) for c in meta["cameras"]]
        test = set(meta["test_cameras"])
        frames = []
        for t in range(meta["frames"]):
            _, pose = Pose.from_text((root / "poses" / f"{t:03d}.txt").read_text())
            for c, cam in enumerate(cams):
                fid = frame_id(t, c)
                img = read_ppm(root / "rgb" / f"{fid}.ppm").astype(np.float64) / 255.0
                parts_path = root / "parts" / f"{fid}.lbl"
                frames.append(Frame(fid, img, read_mask(root / "mask" / f"{fid}.msk"), cam, pose, t, c,
                                    "test" if c in test else "train",
                                    read_labels(parts_path) if parts_path.exists() else None))
        return cls(frames, body, meta, root)


def frame_id(t: int, c: int) -> str:
    return f"{t:03d}_c{c}"


def default_cameras(n: int = 3, width: int = 128, height: int = 128, distance: float = 3.3,
                    fov_deg: float = 40.0, target_height: float = 0.95):
    """Cameras on a ring around the body, evenly spaced in azimuth from +z."""
    if n < 1:
        raise ConfigError("need at least one camera")
    cams = []
    for c in range(n):
        a = 2 * np.pi * c / n
        eye = (distance * np.sin(a), target_height, distance * np.cos(a))
        cams.append(Camera.look_at(eye, (0.0, target_height, 0.0), (0.0, 1.0, 0.0), fov_deg, width, height))
    return cams


def motion_pose(body: TemplateBody, motion: MotionSpec, t: int, n_frames: int, phases) -> Pose:
    s = t / max(n_frames, 1)
    q = np.empty((body.n_bones, 4))
    for b in range(body.n_bones):
        axis, amp, one_sided = _MOTION[b] if b < len(_MOTION) else ((1, 0, 0), 0.2, False)
        w = np.sin(2 * np.pi * motion.cycles * s + phases[b])
        angle = motion.amplitude * amp * (0.5 * (1 + w) if one_sided else w)
        q[b] = axis_angle_quat(axis, angle)
    yaw = 2 * np.pi * motion.yaw_turns * s
    return Pose(normalize_quat(q), axis_angle_quat((0, 1, 0), yaw), np.zeros(3))


def bend_angle(q):
    return 2 * np.arccos(np.clip(np.abs(q[..., 0]), 0.0, 1.0))


def bulge_offsets(points, owner, heads, tails, radii, pose: Pose, amount: float):
    """Outward (radial) shift of upper-limb surfaces, growing with the child bend."""
    out = np.zeros_like(points)
    if amount == 0:
        return out
    for b, child in _BULGE.items():
        sel = owner == b
        if not np.any(sel):
            continue
        p = points[sel]
        a, d = heads[b], tails[b] - heads[b]
        t = np.clip((p - a) @ d / (d @ d), 0.0, 1.0)
        radial = p - (a + t[:, None] * d)
        radial /= np.maximum(np.linalg.norm(radial, axis=1, keepdims=True), 1e-9)
        profile = np.sin(np.pi * t) ** 2
        out[sel] = amount * (bend_angle(pose.bone_rotations[child]) / np.pi) * profile[:, None] * radial
    return out


def surface_colors(points, labels, owner):
    """Deterministic albedo: part color modulated by soft bands and a bone tint."""
    base = PART_COLORS[labels]
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    band = 0.12 * np.sin(2 * np.pi * y / 0.25) * np.cos(2 * np.pi * (x + z) / 0.35)
    tint = 0.06 * np.cos(1.7 * owner)[:, None] * np.array([1.0, -0.5, 0.3])
    return np.clip(base * (1.0 + band[:, None]) + tint, 0.0, 1.0)


@numba.njit(cache=True)
def _splat_points(px, py, z, colors, labels, H, W, radius):
    depth = np.full((H, W), np.inf)
    color = np.zeros((H, W, 3))
    label = np.full((H, W), 255, dtype=np.uint8)
    for i in range(px.shape[0]):
        for dy in range(-radius, radius + 1):
            y = py[i] + dy
            if y < 0 or y >= H:
                continue
            for dx in range(-radius, radius + 1):
                x = px[i] + dx
                if x < 0 or x >= W:
                    continue
                if z[i] < depth[y, x]:
                    depth[y, x] = z[i]
                    color[y, x, 0] = colors[i, 0]
                    color[y, x, 1] = colors[i, 1]
                    color[y, x, 2] = colors[i, 2]
                    label[y, x] = labels[i]
    return depth, color, label


def supersampled_camera(cam: Camera, factor: int) -> Camera:
    """Same view at ``factor``x resolution, pixel centers nested in the coarse grid."""
    return Camera(cam.R, cam.t, cam.fx * factor, cam.fy * factor,
                  factor * (cam.cx + 0.5) - 0.5, factor * (cam.cy + 0.5) - 0.5,
                  cam.width * factor, cam.height * factor)


def splat_surface(points, colors, labels, cam: Camera, supersample: int = 3, radius: int = 1):
    """Render color, binary mask and part labels of a dense point surface.

    Each point covers a (2*radius+1)^2 footprint of the supersampled grid; a
    pixel is foreground when most of its subsamples are covered, its color is
    the subsample mean over a black background and its label the most common
    covered subsample label (smallest label on ties).
    """
    f = supersample
    hi = supersampled_camera(cam, f)
    uv, z = hi.project_points(points)
    px = np.floor(uv + 0.5)
    keep = z > NEAR_PLANE
    depth, color, label = _splat_points(px[keep, 0].astype(np.int64), px[keep, 1].astype(np.int64),
                                        z[keep], colors[keep], labels[keep].astype(np.uint8),
                                        hi.height, hi.width, radius)
    H, W = cam.height, cam.width
    covered = np.isfinite(depth).reshape(H, f, W, f)
    n_cov = covered.sum(axis=(1, 3))
    mask = (2 * n_cov > f * f).astype(np.uint8)
    rgb = color.reshape(H, f, W, f, 3).sum(axis=(1, 3)) / (f * f)
    lab = label.reshape(H, f, W, f)
    votes = np.stack([(lab == p).sum(axis=(1, 3)) for p in range(len(PART_COLORS))], axis=-1)
    parts = np.where(mask > 0, np.argmax(votes, axis=-1), BACKGROUND).astype(np.uint8)
    return rgb, mask, parts


@dataclass
class DenseSurface:
    points: np.ndarray
    owner: np.ndarray
    labels: np.ndarray
    weights: np.ndarray
    colors: np.ndarray


def dense_surface(body: TemplateBody, n_points: int, seed: int, weight_power: float = 4.0) -> DenseSurface:
    pts, owner = sample_capsule_union(n_points, body.heads, body.tails, body.radii, seed)
    w = skinning_weights(pts, owner, body.parents, body.heads, body.tails, weight_power)
    labels = body.bone_parts[owner]
    return DenseSurface(pts, owner, labels, w, surface_colors(pts, labels, owner))


def render_ground_truth(body: TemplateBody, surface: DenseSurface, pose: Pose, cam: Camera,
                        motion: MotionSpec, supersample: int = 3):
    offsets = bulge_offsets(surface.points, surface.owner, body.heads, body.tails, body.radii, pose, motion.bulge)
    posed = skin_points(surface.points + offsets, surface.weights, bone_transforms(body, pose))
    return splat_surface(posed, surface.colors, surface.labels, cam, supersample)


def generate_dataset(body: TemplateBody, motion: MotionSpec | None = None, cameras=None, n_frames: int = 45,
                     seed: int = 0, out_dir=None, test_cameras=(2,), dense_points: int = 240_000,
                     supersample: int = 3) -> Dataset:
    """Animate, render and (optionally) write a synthetic multi-view sequence."""
    motion = motion or MotionSpec()
    cameras = list(cameras) if cameras is not None else default_cameras()
    if not cameras:
        raise ConfigError("need at least one camera")
    if n_frames < 1:
        raise ConfigError("need at least one frame")
    sizes = {(c.width, c.height) for c in cameras}
    if len(sizes) != 1:
        raise ConfigError("all cameras must share one resolution")
    test = {c for c in test_cameras if c < len(cameras)}
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0, 2 * np.pi, body.n_bones)
    surface = dense_surface(body, dense_points, seed + 1)
    frames = []
    for t in range(n_frames):
        pose = motion_pose(body, motion, t, n_frames, phases)
        for c, cam in enumerate(cameras):
            rgb, mask, parts = render_ground_truth(body, surface, pose, cam, motion, supersample)
            img = np.round(rgb * 255.0) / 255.0   # what the 8-bit file will hold
            frames.append(Frame(frame_id(t, c), img, mask, cam, pose, t, c,
                                "test" if c in test else "train", parts))
    w, h = sizes.pop()
    meta = {
        "format": DATASET_FORMAT, "version": DATASET_VERSION, "width": w, "height": h,
        "n_parts": body.n_parts, "seed": seed, "frames": n_frames,
        "cameras": [c.to_dict() for c in cameras], "test_cameras": sorted(test),
        "motion": asdict(motion), "supersample": supersample, "dense_points": dense_points,
    }
    ds = Dataset(frames, body, meta, None)
    if out_dir is not None:
        write_dataset(ds, out_dir)
    return ds


def write_dataset(ds: Dataset, out_dir) -> None:
    root = Path(out_dir)
    for sub in ("poses", "rgb", "mask", "parts", "labels"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    ds.body.save(root / "template.bin")
    written = set()
    for fr in ds.frames:
        if fr.index not in written:
            atomic_write_bytes(root / "poses" / f"{fr.index:03d}.txt", fr.pose.to_text(f"{fr.index:03d}").encode())
            written.add(fr.index)
        write_ppm(root / "rgb" / f"{fr.frame_id}.ppm", fr.image)
        write_mask(root / "mask" / f"{fr.frame_id}.msk", fr.mask)
        if fr.parts is not None:
            write_labels(root / "parts" / f"{fr.frame_id}.lbl", fr.parts)
    atomic_write_bytes(root / "meta.json", (json.dumps(ds.meta, indent=1, sort_keys=True) + "\n").encode())
    ds.root = root
