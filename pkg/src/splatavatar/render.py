"""Tile-based differentiable splatting of semantic Gaussians.

Forward: project each Gaussian to a 2D splat, bin splats into 16x16 tiles,
and alpha-blend color, semantics and coverage front to back. Backward: walk
the same per-pixel lists in reverse and chain through the projection.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from ._validation import InvalidInputError, UsageError
from .gaussians import build_covariance, build_covariance_backward

TILE = 16
DILATION = 0.3
ALPHA_CUTOFF = 1.0 / 255.0
NEAR_PLANE = 0.01
MIN_TRANSMITTANCE = 1e-4


@dataclass
class Camera:
    """Pinhole camera; ``R``/``t`` map world points into camera space."""

    R: np.ndarray
    t: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError("focal lengths must be positive")
        if np.abs(self.R @ self.R.T - np.eye(3)).max() > 1e-6:
            raise InvalidInputError("camera rotation is not orthonormal")
        self.width = int(self.width)
        self.height = int(self.height)

    @property
    def view_matrix(self):
        W = np.eye(4)
        W[:3, :3] = self.R
        W[:3, 3] = self.t
        return W

    @property
    def center(self):
        return -self.R.T @ self.t

    def project_points(self, X):
        """Pixel coordinates and depth of world points."""
        p = X @ self.R.T + self.t
        z = p[:, 2]
        u = self.fx * p[:, 0] / z + self.cx
        v = self.fy * p[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z

    @classmethod
    def look_at(cls, eye, target, up, fov_deg: float, width: int, height: int):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
        return cls(R=R, t=-R @ eye, fx=f, fy=f, cx=(width - 1) / 2.0,
                   cy=(height - 1) / 2.0, width=width, height=height)

    def to_dict(self) -> dict:
        return {"R": self.R.tolist(), "t": self.t.tolist(), "fx": self.fx, "fy": self.fy,
                "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(**d)


@dataclass
class Splats:
    """Projected, uncull'd Gaussians (struct of arrays)."""

    index: np.ndarray       # (M,) source point ids
    mean2d: np.ndarray      # (M, 2)
    cov2d: np.ndarray       # (M, 2, 2), dilated
    conic: np.ndarray       # (M, 3) (a, b, c) of the inverse covariance
    depth: np.ndarray       # (M,)
    extent: np.ndarray      # (M, 2) half-widths of the bounding rectangle
    colors: np.ndarray      # (M, 3)
    semantics: np.ndarray   # (M, P)
    opacity: np.ndarray     # (M,)

    def __len__(self) -> int:
        return self.index.shape[0]


@dataclass
class RenderOutput:
    color: np.ndarray           # (H, W, 3)
    semantic: np.ndarray        # (H, W, P)
    alpha: np.ndarray           # (H, W)
    n_contrib: np.ndarray       # (H, W) int
    state: Optional[dict] = None


def _projection_jacobian(p, cam):
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    J = np.zeros((p.shape[0], 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / (z * z)
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / (z * z)
    return J


def splat_extent(cov2d, opacity):
    """Half-widths covering every pixel where the splat can reach ALPHA_CUTOFF.

    At least 3 sigma per axis; widened for opaque splats so that tiling never
    drops a contribution the 1/255 cutoff would keep.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        k2 = np.maximum(9.0, 2.0 * np.log(np.maximum(opacity, 1e-300) / ALPHA_CUTOFF))
    k = np.sqrt(k2)
    return np.stack([k * np.sqrt(cov2d[:, 0, 0]), k * np.sqrt(cov2d[:, 1, 1])], axis=1)


def project(positions, scales, rotations, opacity, colors, semantics, cam: Camera,
            retain: bool = False):
    """Project decoded Gaussians into screen space; returns ``(Splats, tape)``."""
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    p = positions @ cam.R.T + cam.t
    z = p[:, 2]
    keep = z > NEAR_PLANE
    idx = np.nonzero(keep & (opacity >= ALPHA_CUTOFF))[0]
    p = p[idx]
    z = z[idx]
    cov3 = build_covariance(scales[idx], rotations[idx], check=False)
    Mcam = cam.R @ cov3 @ cam.R.T
    J = _projection_jacobian(p, cam)
    cov2d = J @ Mcam @ np.swapaxes(J, 1, 2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2))
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION
    mean2d = np.stack([cam.fx * p[:, 0] / z + cam.cx, cam.fy * p[:, 1] / z + cam.cy], axis=1)
    extent = splat_extent(cov2d, opacity[idx])
    inside = ((mean2d[:, 0] + extent[:, 0] >= 0) & (mean2d[:, 0] - extent[:, 0] <= cam.width - 1)
              & (mean2d[:, 1] + extent[:, 1] >= 0) & (mean2d[:, 1] - extent[:, 1] <= cam.height - 1))
    sel = np.nonzero(inside)[0]
    idx, p, z, cov3, Mcam, J = idx[sel], p[sel], z[sel], cov3[sel], Mcam[sel], J[sel]
    cov2d, mean2d, extent = cov2d[sel], mean2d[sel], extent[sel]
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    splats = Splats(index=idx, mean2d=mean2d, cov2d=cov2d, conic=conic, depth=z, extent=extent,
                    colors=np.asarray(colors, dtype=np.float64)[idx],
                    semantics=np.asarray(semantics, dtype=np.float64)[idx],
                    opacity=np.asarray(opacity, dtype=np.float64)[idx])
    tape = None
    if retain:
        tape = {"n": n, "p": p, "J": J, "M": Mcam, "scales": scales[idx], "rotations": rotations[idx]}
    return splats, tape


def bin_splats(splats: Splats, width: int, height: int):
    """Per-tile splat lists sorted by (depth, point index).

    Returns ``(order, ranges, tiles_x, tiles_y)``: ``order`` holds splat slots
    and ``ranges[t]`` the half-open slice of ``order`` for tile ``t``.
    """
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    n_tiles = tiles_x * tiles_y
    if len(splats) == 0:
        return np.zeros(0, np.int64), np.zeros((n_tiles, 2), np.int64), tiles_x, tiles_y
    lo_px = np.ceil(splats.mean2d - splats.extent)
    hi_px = np.floor(splats.mean2d + splats.extent)
    lo_px = np.maximum(lo_px, 0)
    hi_px[:, 0] = np.minimum(hi_px[:, 0], width - 1)
    hi_px[:, 1] = np.minimum(hi_px[:, 1], height - 1)
    valid = np.all(hi_px >= lo_px, axis=1)
    tx0 = (lo_px[:, 0] // TILE).astype(np.int64)
    tx1 = (hi_px[:, 0] // TILE).astype(np.int64)
    ty0 = (lo_px[:, 1] // TILE).astype(np.int64)
    ty1 = (hi_px[:, 1] // TILE).astype(np.int64)
    nx = np.where(valid, tx1 - tx0 + 1, 0)
    ny = np.where(valid, ty1 - ty0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    slot = np.repeat(np.arange(len(splats)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    nx_r = np.repeat(nx, counts)
    tile_x = np.repeat(tx0, counts) + local % np.maximum(nx_r, 1)
    tile_y = np.repeat(ty0, counts) + local // np.maximum(nx_r, 1)
    tile_id = tile_y * tiles_x + tile_x
    order = np.lexsort((splats.index[slot], splats.depth[slot], tile_id))
    tile_sorted = tile_id[order]
    slots = slot[order]
    starts = np.searchsorted(tile_sorted, np.arange(n_tiles), side="left")
    ends = np.searchsorted(tile_sorted, np.arange(n_tiles), side="right")
    return slots.astype(np.int64), np.stack([starts, ends], axis=1).astype(np.int64), tiles_x, tiles_y


@numba.njit(cache=True)
def _raster_forward(order, ranges, tiles_x, width, height, mean2d, conic, opacity,
                    colors, semantics, background, t_min, out_color, out_sem,
                    out_alpha, out_count, out_last):
    n_tiles = ranges.shape[0]
    P = semantics.shape[1]
    for tile in range(n_tiles):
        ty = tile // tiles_x
        tx = tile % tiles_x
        start = ranges[tile, 0]
        end = ranges[tile, 1]
        for py in range(ty * TILE, min((ty + 1) * TILE, height)):
            for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                count = 0
                last = start
                for k in range(start, end):
                    s = order[k]
                    dx = px - mean2d[s, 0]
                    dy = py - mean2d[s, 1]
                    power = -0.5 * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy) - conic[s, 1] * dx * dy
                    if power > 0.0:
                        continue
                    a = opacity[s] * np.exp(power)
                    if a < ALPHA_CUTOFF:
                        continue
                    w = a * T
                    c0 += colors[s, 0] * w
                    c1 += colors[s, 1] * w
                    c2 += colors[s, 2] * w
                    for q in range(P):
                        out_sem[py, px, q] += semantics[s, q] * w
                    T = T * (1.0 - a)
                    count += 1
                    last = k + 1
                    if T < t_min:
                        break
                out_color[py, px, 0] = c0 + T * background[0]
                out_color[py, px, 1] = c1 + T * background[1]
                out_color[py, px, 2] = c2 + T * background[2]
                out_alpha[py, px] = 1.0 - T
                out_count[py, px] = count
                out_last[py, px] = last


@numba.njit(cache=True)
def _raster_backward(order, ranges, tiles_x, width, height, mean2d, conic, opacity,
                     colors, semantics, background, last_idx, g_color, g_sem, g_alpha,
                     d_mean, d_conic, d_opacity, d_colors, d_sem):
    n_tiles = ranges.shape[0]
    P = semantics.shape[1]
    acc_s = np.zeros(P)
    for tile in range(n_tiles):
        ty = tile // tiles_x
        tx = tile % tiles_x
        start = ranges[tile, 0]
        end = ranges[tile, 1]
        n = end - start
        ids = np.empty(n, np.int64)
        alphas = np.empty(n)
        trans = np.empty(n)
        gauss = np.empty(n)
        for py in range(ty * TILE, min((ty + 1) * TILE, height)):
            for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                stop = last_idx[py, px]
                # replay the forward walk
                T = 1.0
                m = 0
                for k in range(start, stop):
                    s = order[k]
                    dx = px - mean2d[s, 0]
                    dy = py - mean2d[s, 1]
                    power = -0.5 * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy) - conic[s, 1] * dx * dy
                    if power > 0.0:
                        continue
                    G = np.exp(power)
                    a = opacity[s] * G
                    if a < ALPHA_CUTOFF:
                        continue
                    ids[m] = s
                    alphas[m] = a
                    trans[m] = T
                    gauss[m] = G
                    m += 1
                    T = T * (1.0 - a)
                gc0 = g_color[py, px, 0]
                gc1 = g_color[py, px, 1]
                gc2 = g_color[py, px, 2]
                ga = g_alpha[py, px]
                acc0 = background[0]
                acc1 = background[1]
                acc2 = background[2]
                acc_a = 0.0
                for q in range(P):
                    acc_s[q] = 0.0
                for j in range(m - 1, -1, -1):
                    s = ids[j]
                    a = alphas[j]
                    Ti = trans[j]
                    w = a * Ti
                    d_colors[s, 0] += w * gc0
                    d_colors[s, 1] += w * gc1
                    d_colors[s, 2] += w * gc2
                    dA = (colors[s, 0] - acc0) * gc0 + (colors[s, 1] - acc1) * gc1 \
                        + (colors[s, 2] - acc2) * gc2 + (1.0 - acc_a) * ga
                    for q in range(P):
                        gs = g_sem[py, px, q]
                        d_sem[s, q] += w * gs
                        dA += (semantics[s, q] - acc_s[q]) * gs
                        acc_s[q] = a * semantics[s, q] + (1.0 - a) * acc_s[q]
                    dA *= Ti
                    acc0 = a * colors[s, 0] + (1.0 - a) * acc0
                    acc1 = a * colors[s, 1] + (1.0 - a) * acc1
                    acc2 = a * colors[s, 2] + (1.0 - a) * acc2
                    acc_a = a + (1.0 - a) * acc_a
                    d_opacity[s] += dA * gauss[j]
                    dp = dA * a
                    dx = px - mean2d[s, 0]
                    dy = py - mean2d[s, 1]
                    d_mean[s, 0] += dp * (conic[s, 0] * dx + conic[s, 1] * dy)
                    d_mean[s, 1] += dp * (conic[s, 1] * dx + conic[s, 2] * dy)
                    d_conic[s, 0] += -0.5 * dx * dx * dp
                    d_conic[s, 1] += -dx * dy * dp
                    d_conic[s, 2] += -0.5 * dy * dy * dp


def rasterize(splats: Splats, width: int, height: int, background=(0.0, 0.0, 0.0),
              min_transmittance: float = MIN_TRANSMITTANCE, retain: bool = False) -> RenderOutput:
    """Front-to-back alpha blending of color, semantics and coverage."""
    P = splats.semantics.shape[1] if splats.semantics.ndim == 2 else 0
    order, ranges, tiles_x, _ = bin_splats(splats, width, height)
    bg = np.asarray(background, dtype=np.float64)
    color = np.zeros((height, width, 3))
    sem = np.zeros((height, width, P))
    alpha = np.zeros((height, width))
    count = np.zeros((height, width), np.int64)
    last = np.zeros((height, width), np.int64)
    sem_in = np.ascontiguousarray(splats.semantics.reshape(len(splats), P))
    _raster_forward(order, ranges, tiles_x, width, height,
                    np.ascontiguousarray(splats.mean2d), np.ascontiguousarray(splats.conic),
                    np.ascontiguousarray(splats.opacity), np.ascontiguousarray(splats.colors),
                    sem_in, bg, float(min_transmittance), color, sem, alpha, count, last)
    state = None
    if retain:
        state = {"order": order, "ranges": ranges, "tiles_x": tiles_x, "last": last,
                 "background": bg, "splats": splats, "width": width, "height": height}
    return RenderOutput(color=color, semantic=sem, alpha=alpha, n_contrib=count, state=state)


def rasterize_backward(state, grad_color, grad_semantic=None, grad_alpha=None):
    """Gradients w.r.t. per-splat mean2d, conic, opacity, colors and semantics."""
    if state is None:
        raise UsageError("rasterize_backward needs a forward pass run with retain=True")
    sp: Splats = state["splats"]
    H, W = state["height"], state["width"]
    P = sp.semantics.shape[1]
    M = len(sp)
    g_color = np.zeros((H, W, 3)) if grad_color is None else np.asarray(grad_color, dtype=np.float64)
    g_sem = np.zeros((H, W, P)) if grad_semantic is None else np.asarray(grad_semantic, dtype=np.float64)
    g_alpha = np.zeros((H, W)) if grad_alpha is None else np.asarray(grad_alpha, dtype=np.float64)
    out = {
        "mean2d": np.zeros((M, 2)),
        "conic": np.zeros((M, 3)),
        "opacity": np.zeros(M),
        "colors": np.zeros((M, 3)),
        "semantics": np.zeros((M, P)),
    }
    _raster_backward(state["order"], state["ranges"], state["tiles_x"], W, H,
                     np.ascontiguousarray(sp.mean2d), np.ascontiguousarray(sp.conic),
                     np.ascontiguousarray(sp.opacity), np.ascontiguousarray(sp.colors),
                     np.ascontiguousarray(sp.semantics), state["background"], state["last"],
                     np.ascontiguousarray(g_color), np.ascontiguousarray(g_sem),
                     np.ascontiguousarray(g_alpha), out["mean2d"], out["conic"],
                     out["opacity"], out["colors"], out["semantics"])
    return out


def project_backward(splats: Splats, tape, cam: Camera, grads: dict):
    """Chain splat-space gradients back to the decoded 3D parameters.

    Returns a dict keyed ``positions, scales, rotations, opacity, colors,
    semantics`` holding full-size (N, ...) arrays.
    """
    if tape is None:
        raise UsageError("project_backward needs a projection run with retain=True")
    n = tape["n"]
    idx = splats.index
    p, J, Mc = tape["p"], tape["J"], tape["M"]
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    ga, gb, gc = grads["conic"][:, 0], grads["conic"][:, 1], grads["conic"][:, 2]
    Gq = np.empty((len(idx), 2, 2))
    Gq[:, 0, 0] = ga
    Gq[:, 1, 1] = gc
    Gq[:, 0, 1] = Gq[:, 1, 0] = 0.5 * gb
    Q = np.empty_like(Gq)
    Q[:, 0, 0] = splats.conic[:, 0]
    Q[:, 1, 1] = splats.conic[:, 2]
    Q[:, 0, 1] = Q[:, 1, 0] = splats.conic[:, 1]
    g_cov2d = -Q @ Gq @ Q
    Jt = np.swapaxes(J, 1, 2)
    g_M = Jt @ g_cov2d @ J
    g_J = 2.0 * g_cov2d @ J @ Mc
    gm = grads["mean2d"]
    g_p = np.zeros_like(p)
    g_p[:, 0] = gm[:, 0] * cam.fx / z + g_J[:, 0, 2] * (-cam.fx / (z * z))
    g_p[:, 1] = gm[:, 1] * cam.fy / z + g_J[:, 1, 2] * (-cam.fy / (z * z))
    g_p[:, 2] = (gm[:, 0] * (-cam.fx * x / (z * z)) + gm[:, 1] * (-cam.fy * y / (z * z))
                 + g_J[:, 0, 0] * (-cam.fx / (z * z)) + g_J[:, 1, 1] * (-cam.fy / (z * z))
                 + g_J[:, 0, 2] * (2 * cam.fx * x / z ** 3) + g_J[:, 1, 2] * (2 * cam.fy * y / z ** 3))
    g_cov3 = cam.R.T @ g_M @ cam.R
    g_s, g_q = build_covariance_backward(tape["scales"], tape["rotations"], g_cov3)
    P = splats.semantics.shape[1]
    out = {
        "positions": np.zeros((n, 3)),
        "scales": np.zeros((n, 3)),
        "rotations": np.zeros((n, 4)),
        "opacity": np.zeros(n),
        "colors": np.zeros((n, 3)),
        "semantics": np.zeros((n, P)),
        "mean2d": np.zeros((n, 2)),
    }
    # idx is unique, so plain fancy assignment is an exact scatter
    out["positions"][idx] = g_p @ cam.R
    out["scales"][idx] = g_s
    out["rotations"][idx] = g_q
    out["opacity"][idx] = grads["opacity"]
    out["colors"][idx] = grads["colors"]
    out["semantics"][idx] = grads["semantics"]
    out["mean2d"][idx] = gm
    return out


def render(positions, scales, rotations, opacity, colors, semantics, cam: Camera,
           background=(0.0, 0.0, 0.0), min_transmittance: float = MIN_TRANSMITTANCE,
           retain: bool = False) -> RenderOutput:
    """Project and rasterize decoded Gaussians in one call."""
    splats, tape = project(positions, scales, rotations, opacity, colors, semantics, cam, retain=retain)
    out = rasterize(splats, cam.width, cam.height, background, min_transmittance, retain=retain)
    if retain:
        out.state["projection"] = tape
        out.state["camera"] = cam
    return out


def render_backward(out: RenderOutput, grad_color, grad_semantic=None, grad_alpha=None):
    """Full backward of :func:`render` to decoded per-point parameters."""
    if out.state is None:
        raise UsageError("render_backward needs a render run with retain=True")
    g = rasterize_backward(out.state, grad_color, grad_semantic, grad_alpha)
    return project_backward(out.state["splats"], out.state["projection"], out.state["camera"], g)
