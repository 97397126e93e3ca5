"""Body-part labels for video frames from a posed, labeled template.

The template is skinned into the frame's pose and point-rasterized into a
label image; every foreground pixel of the frame mask then takes the majority
label of its k nearest labeled pixels.
"""
from __future__ import annotations

from pathlib import Path

import numba
import numpy as np

from ._validation import AnnotationError, UsageError
from .formats import LABEL_MAGIC, atomic_write_bytes, decode_raster, encode_raster
from .render import NEAR_PLANE, Camera
from .template import TemplateBody, bone_transforms, skin_points

BACKGROUND = 255
DEFAULT_K = 5
CELL = 8


def zbuffer_points(points, labels, cam: Camera):
    """1-pixel point splats; nearest point wins, ties go to the lower index.

    Returns ``(label_image, depth_image, winner_index)`` with background 255,
    depth +inf and winner -1 where nothing lands.
    """
    H, W = cam.height, cam.width
    uv, z = cam.project_points(np.asarray(points, dtype=np.float64))
    with np.errstate(invalid="ignore"):
        px = np.floor(uv + 0.5)
    ok = (z > NEAR_PLANE) & np.all(np.isfinite(px), axis=1)
    ok &= (px[:, 0] >= 0) & (px[:, 0] < W) & (px[:, 1] >= 0) & (px[:, 1] < H)
    idx = np.nonzero(ok)[0]
    pix = px[idx, 1].astype(np.int64) * W + px[idx, 0].astype(np.int64)
    order = np.lexsort((idx, z[idx], pix))
    pix_sorted = pix[order]
    first = np.ones(order.shape[0], dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = idx[order[first]]
    win_pix = pix_sorted[first]
    label_img = np.full(H * W, BACKGROUND, dtype=np.uint8)
    depth_img = np.full(H * W, np.inf)
    winner = np.full(H * W, -1, dtype=np.int64)
    label_img[win_pix] = np.asarray(labels)[win]
    depth_img[win_pix] = z[win]
    winner[win_pix] = win
    return label_img.reshape(H, W), depth_img.reshape(H, W), winner.reshape(H, W)


def posed_vertices(body: TemplateBody, bones):
    return skin_points(body.vertices, body.lbs_weights, bones)


def rasterize_template_labels(body: TemplateBody, bones, cam: Camera):
    """Label image of the skinned template (1-pixel z-buffered vertices)."""
    labels, _, _ = zbuffer_points(posed_vertices(body, bones), body.part_labels, cam)
    return labels


# --------------------------------------------------------------------------
# nearest labeled pixels
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _grid_knn(qy, qx, py, px, cell_start, cell_items, gh, gw, cell, k):
    nq = qy.shape[0]
    out = np.full((nq, k), -1, dtype=np.int64)
    best_d = np.empty(k, dtype=np.int64)
    best_i = np.empty(k, dtype=np.int64)
    for q in range(nq):
        y, x = qy[q], qx[q]
        cy, cx = y // cell, x // cell
        found = 0
        r = 0
        while True:
            for gy in range(cy - r, cy + r + 1):
                if gy < 0 or gy >= gh:
                    continue
                for gx in range(cx - r, cx + r + 1):
                    if gx < 0 or gx >= gw:
                        continue
                    if max(abs(gy - cy), abs(gx - cx)) != r:
                        continue
                    c = gy * gw + gx
                    for s in range(cell_start[c], cell_start[c + 1]):
                        i = cell_items[s]
                        dy = py[i] - y
                        dx = px[i] - x
                        d = dy * dy + dx * dx
                        # insertion into the sorted (distance, index) list
                        if found == k and (d > best_d[k - 1] or (d == best_d[k - 1] and i > best_i[k - 1])):
                            continue
                        pos = found if found < k else k - 1
                        while pos > 0 and (best_d[pos - 1] > d or (best_d[pos - 1] == d and best_i[pos - 1] > i)):
                            if pos < k:
                                best_d[pos] = best_d[pos - 1]
                                best_i[pos] = best_i[pos - 1]
                            pos -= 1
                        best_d[pos] = d
                        best_i[pos] = i
                        if found < k:
                            found += 1
            reach = r * cell
            if found == k and best_d[k - 1] <= reach * reach:
                break
            if cy - r <= 0 and cx - r <= 0 and cy + r >= gh - 1 and cx + r >= gw - 1:
                break
            r += 1
        for j in range(found):
            out[q, j] = best_i[j]
    return out


def nearest_labeled(query_yx, labeled_yx, k: int, cell: int = CELL):
    """Indices of the k nearest labeled pixels for each query pixel.

    Candidates are ordered by (squared distance, labeled index), so the result
    is unique even with distance ties. Uniform grid buckets with ring expansion.
    """
    query_yx = np.asarray(query_yx, dtype=np.int64).reshape(-1, 2)
    labeled_yx = np.asarray(labeled_yx, dtype=np.int64).reshape(-1, 2)
    n = labeled_yx.shape[0]
    if n == 0:
        raise AnnotationError("no labeled pixels to transfer from")
    k = min(k, n)
    ymax = int(max(query_yx[:, 0].max(initial=0), labeled_yx[:, 0].max())) + 1
    xmax = int(max(query_yx[:, 1].max(initial=0), labeled_yx[:, 1].max())) + 1
    gh, gw = -(-ymax // cell), -(-xmax // cell)
    cid = (labeled_yx[:, 0] // cell) * gw + labeled_yx[:, 1] // cell
    items = np.argsort(cid, kind="stable")
    start = np.zeros(gh * gw + 1, dtype=np.int64)
    np.cumsum(np.bincount(cid, minlength=gh * gw), out=start[1:])
    return _grid_knn(query_yx[:, 0].copy(), query_yx[:, 1].copy(), labeled_yx[:, 0].copy(),
                     labeled_yx[:, 1].copy(), start, items.astype(np.int64), gh, gw, cell, k)


def majority_vote(neighbor_labels, n_labels: int = 256):
    """Most frequent label per row; ties go to the label seen first (nearest)."""
    nl = np.asarray(neighbor_labels, dtype=np.int64)
    counts = np.zeros((nl.shape[0], n_labels), dtype=np.int64)
    rows = np.arange(nl.shape[0])
    for j in range(nl.shape[1]):
        np.add.at(counts, (rows, nl[:, j]), 1)
    per_member = counts[rows[:, None], nl]
    best = np.argmax(per_member, axis=1)   # first member whose label has the top count
    return nl[rows, best]


def transfer_labels(mask, projected, k: int = DEFAULT_K):
    """Label every foreground pixel by a k-NN vote over the projected labels."""
    mask = np.asarray(mask) > 0
    projected = np.asarray(projected)
    if mask.shape != projected.shape:
        raise UsageError(f"mask {mask.shape} and projected labels {projected.shape} differ in size")
    out = np.full(mask.shape, BACKGROUND, dtype=np.uint8)
    if not mask.any():
        return out
    labeled = np.argwhere(projected != BACKGROUND)
    if labeled.shape[0] == 0:
        raise AnnotationError("projected template covers no pixel")
    query = np.argwhere(mask)
    nn = nearest_labeled(query, labeled, k)
    src = projected[labeled[:, 0], labeled[:, 1]]
    out[query[:, 0], query[:, 1]] = majority_vote(src[nn])
    return out


def annotate(mask, body: TemplateBody, pose, cam: Camera, k: int = DEFAULT_K):
    mask = np.asarray(mask)
    if not (mask > 0).any():
        return np.full(mask.shape, BACKGROUND, dtype=np.uint8)
    projected = rasterize_template_labels(body, bone_transforms(body, pose), cam)
    return transfer_labels(mask, projected, k)


def annotate_frame(frame, body: TemplateBody, cache_dir=None, k: int = DEFAULT_K):
    """Annotate one frame, reusing the on-disk cache entry when present."""
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"{frame.frame_id}.lbl"
        if path.exists():
            return decode_raster(path.read_bytes(), LABEL_MAGIC, path)
    try:
        labels = annotate(frame.mask, body, frame.pose, frame.camera, k)
    except AnnotationError as exc:
        raise AnnotationError(f"frame {frame.frame_id}: {exc}") from exc
    if path is not None:
        atomic_write_bytes(path, encode_raster(labels, LABEL_MAGIC))
    return labels
