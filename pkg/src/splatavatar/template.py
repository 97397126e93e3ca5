"""Procedural capsule humanoid standing in for a parametric body model.

The body supplies what the pipeline needs from a body model: canonical
vertices, a bone tree with forward kinematics, linear-blend-skinning weights
and per-vertex part labels.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import ConfigError, InvalidInputError
from .gaussians import QUAT_TOL, normalize_quat, quat_to_matrix

PART_NAMES = ("head", "torso", "left_arm", "right_arm", "legs")
N_PARTS = len(PART_NAMES)

# name, parent, head, tail, radius, part
_BONES = (
    ("pelvis", -1, (0.0, 0.95, 0.0), (0.0, 1.15, 0.0), 0.13, 1),
    ("chest", 0, (0.0, 1.15, 0.0), (0.0, 1.36, 0.0), 0.15, 1),
    ("neck", 1, (0.0, 1.45, 0.0), (0.0, 1.58, 0.0), 0.055, 0),
    ("head", 2, (0.0, 1.62, 0.0), (0.0, 1.72, 0.0), 0.10, 0),
    ("l_upper_arm", 1, (0.20, 1.40, 0.0), (0.47, 1.40, 0.0), 0.05, 2),
    ("l_forearm", 4, (0.47, 1.40, 0.0), (0.72, 1.40, 0.0), 0.04, 2),
    ("l_hand", 5, (0.72, 1.40, 0.0), (0.82, 1.40, 0.0), 0.035, 2),
    ("r_upper_arm", 1, (-0.20, 1.40, 0.0), (-0.47, 1.40, 0.0), 0.05, 3),
    ("r_forearm", 7, (-0.47, 1.40, 0.0), (-0.72, 1.40, 0.0), 0.04, 3),
    ("r_hand", 8, (-0.72, 1.40, 0.0), (-0.82, 1.40, 0.0), 0.035, 3),
    ("l_thigh", 0, (0.10, 0.95, 0.0), (0.10, 0.50, 0.0), 0.075, 4),
    ("l_shin", 10, (0.10, 0.50, 0.0), (0.10, 0.09, 0.0), 0.055, 4),
    ("l_foot", 11, (0.10, 0.07, 0.0), (0.10, 0.04, 0.15), 0.04, 4),
    ("r_thigh", 0, (-0.10, 0.95, 0.0), (-0.10, 0.50, 0.0), 0.075, 4),
    ("r_shin", 13, (-0.10, 0.50, 0.0), (-0.10, 0.09, 0.0), 0.055, 4),
    ("r_foot", 14, (-0.10, 0.07, 0.0), (-0.10, 0.04, 0.15), 0.04, 4),
)

_MAGIC = b"SGTB"
_VERSION = 1


@dataclass
class BodyConfig:
    """Limb layout; ``radius_scale``/``length_scale`` resize the default humanoid.

    ``lattice`` places vertices on regular spiral lattices (mesh-like spacing)
    instead of independent random samples.
    """

    n_vertices: int = 6890
    radius_scale: float = 1.0
    length_scale: float = 1.0
    weight_power: float = 4.0
    lattice: bool = True


@dataclass
class TemplateBody:
    vertices: np.ndarray        # (V, 3)
    parents: np.ndarray         # (B,) int, -1 for the root
    heads: np.ndarray           # (B, 3)
    tails: np.ndarray           # (B, 3)
    radii: np.ndarray           # (B,)
    lbs_weights: np.ndarray     # (V, B)
    part_labels: np.ndarray     # (V,) int
    bone_parts: np.ndarray      # (B,) int
    owner: np.ndarray = field(default=None)  # (V,) owning bone of each vertex

    @property
    def n_bones(self) -> int:
        return self.parents.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_parts(self) -> int:
        return N_PARTS

    def check(self) -> None:
        if np.any(np.abs(self.lbs_weights.sum(axis=1) - 1.0) > 1e-6) or np.any(self.lbs_weights < 0):
            raise InvalidInputError("LBS weight rows must lie on the simplex")
        if self.part_labels.min() < 0 or self.part_labels.max() >= N_PARTS:
            raise InvalidInputError("part label out of range")
        if self.parents[0] != -1 or np.any(self.parents[1:] >= np.arange(1, self.n_bones)):
            raise InvalidInputError("bone parents must form a tree rooted at bone 0")

    def save(self, path) -> None:
        V, B = self.n_vertices, self.n_bones
        with open(path, "wb") as f:
            f.write(_MAGIC + struct.pack("<IIII", _VERSION, V, B, N_PARTS))
            f.write(self.vertices.astype("<f8").tobytes())
            f.write(self.parents.astype("<i4").tobytes())
            f.write(self.heads.astype("<f8").tobytes())
            f.write(self.tails.astype("<f8").tobytes())
            f.write(self.radii.astype("<f8").tobytes())
            f.write(self.lbs_weights.astype("<f8").tobytes())
            f.write(self.part_labels.astype("<i4").tobytes())
            f.write(self.bone_parts.astype("<i4").tobytes())
            f.write(self.owner.astype("<i4").tobytes())

    @classmethod
    def load(cls, path) -> "TemplateBody":
        data = Path(path).read_bytes()
        if data[:4] != _MAGIC:
            raise InvalidInputError(f"{path}: not a template body file")
        version, V, B, P = struct.unpack_from("<IIII", data, 4)
        if version != _VERSION or P != N_PARTS:
            raise InvalidInputError(f"{path}: unsupported version {version} / {P} parts")
        off = 20

        def take(dtype, shape):
            nonlocal off
            count = int(np.prod(shape))
            arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).reshape(shape)
            off += count * np.dtype(dtype).itemsize
            return arr.astype(np.float64 if dtype == "<f8" else np.int64)

        return cls(vertices=take("<f8", (V, 3)), parents=take("<i4", (B,)),
                   heads=take("<f8", (B, 3)), tails=take("<f8", (B, 3)), radii=take("<f8", (B,)),
                   lbs_weights=take("<f8", (V, B)), part_labels=take("<i4", (V,)),
                   bone_parts=take("<i4", (B,)), owner=take("<i4", (V,)))


def _skeleton(config: BodyConfig):
    parents = np.array([b[1] for b in _BONES])
    heads = np.array([b[2] for b in _BONES], dtype=np.float64)
    tails = np.array([b[3] for b in _BONES], dtype=np.float64)
    radii = np.array([b[4] for b in _BONES]) * config.radius_scale
    parts = np.array([b[5] for b in _BONES])
    if config.length_scale != 1.0:
        heads = heads * config.length_scale
        tails = tails * config.length_scale
    return parents, heads, tails, radii, parts


def segment_distance(points, a, b):
    """Distance from each point to each segment; (N, B)."""
    ab = b - a
    ap = points[:, None, :] - a[None]
    t = np.clip(np.sum(ap * ab[None], axis=-1) / np.sum(ab * ab, axis=-1)[None], 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=-1)


def _sample_capsule(rng, a, b, r, n):
    """Uniform samples on a capsule surface."""
    axis = b - a
    length = np.linalg.norm(axis)
    u = axis / length
    helper = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(u, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    cyl_area = 2 * np.pi * r * length
    sph_area = 4 * np.pi * r * r
    on_cyl = rng.random(n) < cyl_area / (cyl_area + sph_area)
    out = np.empty((n, 3))
    m = int(on_cyl.sum())
    phi = rng.uniform(0, 2 * np.pi, m)
    t = rng.uniform(0, length, m)
    out[on_cyl] = a + t[:, None] * u + r * (np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2)
    k = n - m
    d = rng.normal(size=(k, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    cap_end = np.where(np.sum(d * u, axis=1) >= 0, 1.0, 0.0)
    out[~on_cyl] = a + cap_end[:, None] * axis + r * d
    return out


def _lattice_capsule(a, b, r, n, phase: float = 0.0):
    """Near-uniform spiral lattice on a capsule surface.

    A capsule's area is uniform along its axis (caps included), so evenly
    spaced axial levels with golden-angle azimuths cover it evenly.
    """
    axis = b - a
    length = np.linalg.norm(axis)
    u = axis / length
    helper = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(u, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    i = np.arange(n)
    h = -r + (i + 0.5) / n * (length + 2 * r)
    below = np.clip(-h, 0.0, None)
    above = np.clip(h - length, 0.0, None)
    rho = np.sqrt(np.clip(r * r - below ** 2 - above ** 2, 0.0, None))
    phi = phase + i * np.pi * (3.0 - np.sqrt(5.0))
    return a + h[:, None] * u + rho[:, None] * (np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2)


def _allocate(areas, total):
    raw = areas / areas.sum() * total
    counts = np.floor(raw).astype(int)
    rest = total - counts.sum()
    counts[np.argsort(-(raw - counts), kind="stable")[:rest]] += 1
    return counts


def skinning_weights(points, owner, parents, heads, tails, power: float = 4.0):
    """Inverse-distance blend of the owning bone and its nearest kinematic neighbour.

    Distances are to bone axes; weights ~ 1/d^power over the two bones, then
    renormalized. Only bones adjacent to the owner in the tree are candidates
    for the second slot, which keeps blending local to joints.
    """
    B = parents.shape[0]
    d = np.maximum(segment_distance(points, heads, tails), 1e-4)
    adj = np.zeros((B, B), dtype=bool)
    for b in range(1, B):
        adj[b, parents[b]] = adj[parents[b], b] = True
    cand = np.where(adj[owner], d, np.inf)
    second = np.argmin(cand, axis=1)
    n = points.shape[0]
    rows = np.arange(n)
    w = np.zeros((n, B))
    w_own = d[rows, owner] ** -power
    w_sec = d[rows, second] ** -power
    total = w_own + w_sec
    w[rows, owner] = w_own / total
    w[rows, second] += w_sec / total
    return w


def _outside_others(points, b, heads, tails, radii):
    d = segment_distance(points, heads, tails) - radii[None]
    d[:, b] = np.inf
    return np.all(d > -1e-3 * radii[None], axis=1)


def sample_body_surface(n: int, config: BodyConfig, seed: int, lattice: bool = False):
    """Sample ``n`` points on the union of limb capsules (interiors rejected).

    Returns ``(points, owner_bone)``.
    """
    _, heads, tails, radii, _ = _skeleton(config)
    return sample_capsule_union(n, heads, tails, radii, seed, lattice)


def _lattice_exposed(need, b, heads, tails, radii, phase):
    m = need + 8
    while True:
        cand = _lattice_capsule(heads[b], tails[b], radii[b], m, phase)
        ok = cand[_outside_others(cand, b, heads, tails, radii)]
        if ok.shape[0] >= need:
            return ok[np.round(np.linspace(0, ok.shape[0] - 1, need)).astype(int)]
        m = int(m * max(1.05, need / max(ok.shape[0], 1))) + 1


def sample_capsule_union(n: int, heads, tails, radii, seed: int, lattice: bool = False):
    """Points on the exposed capsule surfaces, allocated by exposed area.

    Random uniform samples by default; ``lattice`` places them on per-capsule
    spiral lattices instead (seed only rotates each lattice).
    """
    B = heads.shape[0]
    rng = np.random.default_rng(seed)
    lengths = np.linalg.norm(tails - heads, axis=1)
    areas = 2 * np.pi * radii * lengths + 4 * np.pi * radii ** 2
    exposed = np.empty(B)
    for b in range(B):
        probe = _sample_capsule(rng, heads[b], tails[b], radii[b], 2000)
        exposed[b] = np.mean(_outside_others(probe, b, heads, tails, radii))
    if np.any(exposed < 0.01):
        raise ConfigError("a limb capsule is buried inside its neighbours")
    counts = _allocate(areas * exposed, n)
    pts, owners = [], []
    for b in range(B):
        need = counts[b]
        if lattice:
            pts.append(_lattice_exposed(need, b, heads, tails, radii, rng.uniform(0, 2 * np.pi)))
            owners.append(np.full(need, b))
            continue
        got = []
        while need > 0:
            cand = _sample_capsule(rng, heads[b], tails[b], radii[b], max(2 * need, 16))
            ok = cand[_outside_others(cand, b, heads, tails, radii)][:need]
            got.append(ok)
            need -= ok.shape[0]
        pts.append(np.concatenate(got))
        owners.append(np.full(counts[b], b))
    return np.concatenate(pts), np.concatenate(owners)


def build_template(config: BodyConfig | None = None, seed: int = 0) -> TemplateBody:
    config = config or BodyConfig()
    if config.radius_scale <= 0 or config.length_scale <= 0:
        raise ConfigError("body dimensions must be positive")
    parents, heads, tails, radii, parts = _skeleton(config)
    B = parents.shape[0]
    if config.n_vertices < 4 * B:
        raise ConfigError(f"need at least {4 * B} vertices for {B} bones")
    verts, owner = sample_body_surface(config.n_vertices, config, seed, lattice=config.lattice)
    weights = skinning_weights(verts, owner, parents, heads, tails, config.weight_power)
    body = TemplateBody(vertices=verts, parents=parents, heads=heads, tails=tails, radii=radii,
                        lbs_weights=weights, part_labels=parts[owner], bone_parts=parts, owner=owner)
    body.check()
    return body


@dataclass
class Pose:
    bone_rotations: np.ndarray                     # (B, 4) local, unit
    root_rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.bone_rotations = np.asarray(self.bone_rotations, dtype=np.float64)
        self.root_rotation = np.asarray(self.root_rotation, dtype=np.float64)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)
        norms = np.linalg.norm(np.vstack([self.bone_rotations, self.root_rotation]), axis=1)
        if np.any(np.abs(norms - 1.0) > QUAT_TOL):
            raise InvalidInputError("pose quaternions must be unit")

    @classmethod
    def rest(cls, n_bones: int) -> "Pose":
        q = np.zeros((n_bones, 4))
        q[:, 0] = 1.0
        return cls(q)

    def to_text(self, frame_id: str) -> str:
        lines = [str(frame_id),
                 "root_translation " + " ".join(repr(float(v)) for v in self.root_translation),
                 "root_rotation " + " ".join(repr(float(v)) for v in self.root_rotation)]
        for q in self.bone_rotations:
            lines.append(" ".join(repr(float(v)) for v in q))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str):
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        frame_id = lines[0].strip()
        t = np.array([float(v) for v in lines[1].split()[1:]])
        r = np.array([float(v) for v in lines[2].split()[1:]])
        q = np.array([[float(v) for v in ln.split()] for ln in lines[3:]])
        return frame_id, cls(q, r, t)


def _rigid(R, t):
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = t
    return M


def bone_transforms(body: TemplateBody, pose: Pose) -> np.ndarray:
    """World transforms (B, 4, 4) taking canonical points to the posed frame."""
    B = body.n_bones
    if pose.bone_rotations.shape != (B, 4):
        raise InvalidInputError(f"pose has {pose.bone_rotations.shape[0]} bones, body has {B}")
    Rl = quat_to_matrix(pose.bone_rotations)
    root = _rigid(quat_to_matrix(pose.root_rotation), pose.root_translation)
    out = np.empty((B, 4, 4))
    for b in range(B):
        h = body.heads[b]
        local = _rigid(Rl[b], h - Rl[b] @ h)
        parent = root if body.parents[b] < 0 else out[body.parents[b]]
        out[b] = parent @ local
    return out


def pose_encoding(pose: Pose) -> np.ndarray:
    """Flat, fixed-length code: every bone quaternion concatenated (4B values)."""
    return pose.bone_rotations.reshape(-1).copy()


def skin_points(points, weights, bones):
    """Forward LBS of points with fixed weights."""
    # relative to bone 0 so that identical bones (e.g. the rest pose) are exact
    B0 = bones[0]
    T = B0 + np.einsum("nb,bij->nij", weights, bones - B0)
    return np.einsum("nij,nj->ni", T[:, :3, :3], points) + T[:, :3, 3]


def axis_angle_quat(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def random_pose(body: TemplateBody, rng, max_angle: float = 0.6) -> Pose:
    axes = rng.normal(size=(body.n_bones, 3))
    angles = rng.uniform(-max_angle, max_angle, body.n_bones)
    q = np.stack([axis_angle_quat(a, t) for a, t in zip(axes, angles)])
    root = axis_angle_quat(rng.normal(size=3), rng.uniform(-np.pi, np.pi))
    return Pose(normalize_quat(q), normalize_quat(root), rng.normal(scale=0.3, size=3))
