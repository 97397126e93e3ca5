import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatavatar._validation import AnnotationError, UsageError
from splatavatar.annotator import (
    BACKGROUND, annotate, annotate_frame, majority_vote, nearest_labeled, posed_vertices,
    rasterize_template_labels, transfer_labels, zbuffer_points,
)
from splatavatar.data import Dataset
from splatavatar.render import Camera
from splatavatar.template import Pose, bone_transforms, random_pose
from oracles import exhaustive_knn


def front_camera(size=32):
    return Camera.look_at(np.array([0.0, 0.0, -3.0]), np.zeros(3), np.array([0.0, -1.0, 0.0]), 40.0, size, size)


def brute_zbuffer(points, labels, cam):
    out = np.full((cam.height, cam.width), BACKGROUND, dtype=np.uint8)
    for y in range(cam.height):
        for x in range(cam.width):
            best = None
            for i, p in enumerate(points):
                q = cam.R @ p + cam.t
                if q[2] <= 0.01:
                    continue
                u = cam.fx * q[0] / q[2] + cam.cx
                v = cam.fy * q[1] / q[2] + cam.cy
                if np.floor(u + 0.5) == x and np.floor(v + 0.5) == y and (best is None or q[2] < best[0]):
                    best = (q[2], i)
            if best is not None:
                out[y, x] = labels[best[1]]
    return out


def test_nearer_vertex_wins():
    cam = front_camera(8)
    pts = np.array([[0.0, 0, 0.5], [0.0, 0, -0.5]])
    img, depth, win = zbuffer_points(pts, np.array([1, 3]), cam)
    assert img[4, 4] == 3 and win[4, 4] == 1
    assert np.sum(img != BACKGROUND) == 1
    img, _, win = zbuffer_points(pts[::-1], np.array([3, 1]), cam)
    assert img[4, 4] == 3 and win[4, 4] == 0


def test_body_behind_camera_gives_background(body):
    cam = Camera.look_at(np.array([0.0, 0.0, -3.0]), np.array([0.0, 0.0, -6.0]), np.array([0.0, -1.0, 0.0]),
                         40.0, 24, 24)
    labels = rasterize_template_labels(body, bone_transforms(body, Pose.rest(body.n_bones)), cam)
    assert np.all(labels == BACKGROUND)


def test_zbuffer_matches_brute_force_scan(body, rng):
    cam = front_camera(12)
    for _ in range(3):
        pose = random_pose(body, rng)
        pts = posed_vertices(body, bone_transforms(body, pose))
        sub = rng.choice(len(pts), 400, replace=False)
        got, _, _ = zbuffer_points(pts[sub], body.part_labels[sub], cam)
        assert np.array_equal(got, brute_zbuffer(pts[sub], body.part_labels[sub], cam))


def test_coincident_pixel_takes_its_label():
    projected = np.full((6, 6), BACKGROUND, dtype=np.uint8)
    projected[2, 3] = 4
    projected[0, 0] = 1
    mask = np.zeros((6, 6), dtype=np.uint8)
    mask[2, 3] = 1
    assert transfer_labels(mask, projected, k=1)[2, 3] == 4


def test_k1_matches_exhaustive_scan(rng):
    for _ in range(20):
        projected = np.full((20, 17), BACKGROUND, dtype=np.uint8)
        on = rng.uniform(size=projected.shape) < 0.1
        on[rng.integers(20), rng.integers(17)] = True
        projected[on] = rng.integers(0, 5, size=on.sum())
        mask = (rng.uniform(size=projected.shape) < 0.5).astype(np.uint8)
        out = transfer_labels(mask, projected, k=1)
        labeled = np.argwhere(projected != BACKGROUND)
        query = np.argwhere(mask > 0)
        nn = exhaustive_knn(query, labeled, 1)[:, 0]
        expected = np.full(mask.shape, BACKGROUND, dtype=np.uint8)
        expected[query[:, 0], query[:, 1]] = projected[labeled[nn, 0], labeled[nn, 1]]
        assert np.array_equal(out, expected)


def test_far_pixel_still_labeled():
    projected = np.full((64, 64), BACKGROUND, dtype=np.uint8)
    projected[0:3, 0:2] = 2
    projected[1, 2] = 0
    mask = np.zeros((64, 64), dtype=np.uint8)
    mask[63, 63] = 1
    out = transfer_labels(mask, projected)
    assert out[63, 63] == 2
    assert np.sum(out != BACKGROUND) == 1


def test_labels_only_foreground(rng):
    projected = np.full((16, 16), BACKGROUND, dtype=np.uint8)
    projected[4:9, 5:10] = rng.integers(0, 5, size=(5, 5))
    mask = (rng.uniform(size=(16, 16)) < 0.4).astype(np.uint8)
    out = transfer_labels(mask, projected)
    assert np.array_equal(out != BACKGROUND, mask > 0)
    assert out[mask > 0].max() < 5


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(1, 12))
def test_grid_knn_equals_exhaustive(seed, k, cell):
    rng = np.random.default_rng(seed)
    H, W = rng.integers(1, 40, size=2)
    labeled = np.unique(np.stack([rng.integers(0, H, 30), rng.integers(0, W, 30)], axis=1), axis=0)
    query = np.stack([rng.integers(0, H, 25), rng.integers(0, W, 25)], axis=1)
    got = nearest_labeled(query, labeled, k, cell=cell)
    assert np.array_equal(got, exhaustive_knn(query, labeled, min(k, len(labeled))))


def test_majority_vote_rules():
    assert majority_vote([[1, 2, 2, 3, 3]]).tolist() == [2]
    assert majority_vote([[3, 2, 2, 3, 4]]).tolist() == [3]
    assert majority_vote([[4, 0, 1, 2, 3]]).tolist() == [4]
    assert majority_vote([[0, 1, 1, 1, 0]]).tolist() == [1]


def test_empty_projection_is_annotation_error():
    with pytest.raises(AnnotationError):
        transfer_labels(np.ones((4, 4)), np.full((4, 4), BACKGROUND, dtype=np.uint8))
    with pytest.raises(UsageError):
        transfer_labels(np.ones((4, 4)), np.zeros((4, 5), dtype=np.uint8))


def test_all_zero_mask_gives_background(body):
    out = annotate(np.zeros((16, 16), dtype=np.uint8), body, Pose.rest(body.n_bones), front_camera(16))
    assert np.all(out == BACKGROUND)


@settings(max_examples=20)
@given(st.integers(0, 2**32 - 1), st.floats(-1.0, 50.0))
def test_uniform_depth_offset_keeps_labels(body, seed, offset):
    rng = np.random.default_rng(seed)
    cam = Camera(np.eye(3), np.array([0.0, 0.0, 3.0]), 40.0, 40.0, 16.0, 16.0, 32, 32)
    pts = posed_vertices(body, bone_transforms(body, random_pose(body, rng)))
    uv, z = cam.project_points(pts)
    # same pixel footprint, every depth moved by the same amount
    z2 = z + offset
    moved = np.stack([(uv[:, 0] - cam.cx) * z2 / cam.fx, (uv[:, 1] - cam.cy) * z2 / cam.fy, z2 - 3.0], axis=1)
    a, _, _ = zbuffer_points(pts, body.part_labels, cam)
    b, _, _ = zbuffer_points(moved, body.part_labels, cam)
    assert np.array_equal(a, b)


def test_annotate_frame_cache_is_bit_identical(tiny_dataset_dir, tmp_path):
    ds = Dataset.load(tiny_dataset_dir)
    fr = ds.frames[0]
    a = annotate_frame(fr, ds.body, tmp_path)
    assert (tmp_path / f"{fr.frame_id}.lbl").exists()
    b = annotate_frame(fr, ds.body, tmp_path)
    assert np.array_equal(a, b) and a.dtype == b.dtype
    assert np.array_equal(a, annotate_frame(fr, ds.body, None))


def test_transfer_agrees_with_ground_truth_parts(tiny_dataset_dir):
    ds = Dataset.load(tiny_dataset_dir)
    for fr in ds.frames:
        out = annotate_frame(fr, ds.body)
        fg = fr.mask > 0
        assert np.array_equal(out != BACKGROUND, fg)
        assert np.mean(out[fg] == fr.parts[fg]) > 0.9
