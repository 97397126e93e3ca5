import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial import cKDTree

from splatavatar._validation import UsageError
from splatavatar.gaussians import softmax
from splatavatar.losses import (
    BACKGROUND_LABEL, TERMS, LossReport, LossWeights, isopos_loss, knn_indices, mask_loss,
    nearest_template_weights, neighborhood_loss, rgb_loss, semantic_loss, skin_loss, ssim, ssim_loss,
    total_loss,
)
from oracles import central_diff, rel_err, scalar_ssim


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def brute_knn(points, k):
    d = np.linalg.norm(points[:, None] - points[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def test_identity_cases_are_zero(rng):
    img = rng.uniform(size=(12, 10, 3))
    mask = (rng.uniform(size=(12, 10)) > 0.5).astype(float)
    assert rgb_loss(img, img, mask)[0] == 0.0
    assert abs(ssim_loss(img, img)[0]) < 1e-12
    assert mask_loss(mask, mask)[0] == 0.0


def test_constant_images_half_apart():
    a = np.full((16, 16, 3), 0.25)
    b = np.full((16, 16, 3), 0.75)
    assert rgb_loss(a, b)[0] == 0.5
    assert rgb_loss(a, b, np.ones((16, 16)))[0] == 0.5
    assert abs(ssim(a, b) - scalar_ssim(a, b)) < 1e-6


def test_ssim_matches_direct_oracle(rng):
    for shape in ((9, 7, 3), (14, 12, 1)):
        x = rng.uniform(size=shape)
        y = np.clip(x + rng.normal(scale=0.1, size=shape), 0, 1)
        assert abs(ssim(x, y) - scalar_ssim(x, y)) < 1e-6


def test_rgb_loss_ignores_background_pixels(rng):
    a, b = rng.uniform(size=(2, 8, 8, 3))
    mask = np.zeros((8, 8))
    mask[2:5, 3:6] = 1
    value, grad = rgb_loss(a, b, mask)
    expected = np.abs(a - b)[2:5, 3:6].mean()
    assert abs(value - expected) < 1e-15
    assert not np.any(grad[mask == 0])


def test_resolution_mismatch_is_usage_error():
    with pytest.raises(UsageError):
        rgb_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(UsageError):
        mask_loss(np.zeros((4, 4)), np.zeros((5, 4)))
    with pytest.raises(UsageError):
        ssim_loss(np.zeros((4, 4, 3)), np.zeros((4, 4, 1)))
    with pytest.raises(UsageError):
        semantic_loss(np.zeros((4, 4, 5)), np.zeros((3, 4), dtype=np.uint8))


def test_image_loss_gradients_match_finite_differences(rng):
    x = rng.uniform(0.1, 0.9, size=(7, 6, 3))
    y = rng.uniform(0.1, 0.9, size=(7, 6, 3))
    mask = (rng.uniform(size=(7, 6)) > 0.3).astype(float)
    _, g = ssim_loss(x, y)
    assert rel_err(g, central_diff(lambda v: ssim_loss(v, y)[0], x, 1e-6)) < 1e-4
    _, g = rgb_loss(x, y, mask)
    assert rel_err(g, central_diff(lambda v: rgb_loss(v, y, mask)[0], x, 1e-7)) < 1e-4
    a = rng.uniform(0.1, 0.9, size=(7, 6))
    _, g = mask_loss(a, mask)
    assert rel_err(g, central_diff(lambda v: mask_loss(v, mask)[0], a, 1e-7)) < 1e-4


def scalar_bce(sem, labels):
    total, count = 0.0, 0
    H, W, P = sem.shape
    for i in range(H):
        for j in range(W):
            if labels[i, j] == BACKGROUND_LABEL:
                continue
            for c in range(P):
                p = min(max(sem[i, j, c], 1e-6), 1 - 1e-6)
                t = 1.0 if labels[i, j] == c else 0.0
                total -= t * math.log(p) + (1 - t) * math.log(1 - p)
                count += 1
    return total / count


def test_semantic_loss_at_one_half_is_ln2(rng):
    labels = rng.integers(0, 5, size=(6, 6)).astype(np.uint8)
    value, _ = semantic_loss(np.full((6, 6, 5), 0.5), labels)
    assert abs(value - math.log(2)) < 1e-12


def test_semantic_loss_exact_one_hot_is_clamp_floor(rng):
    labels = rng.integers(0, 5, size=(6, 6)).astype(np.uint8)
    sem = np.eye(5)[labels]
    value, _ = semantic_loss(sem, labels)
    assert 0 < value < 2e-6
    assert abs(value + math.log(1 - 1e-6)) < 1e-12


def test_semantic_loss_matches_scalar_loop(rng):
    for _ in range(5):
        labels = rng.integers(0, 5, size=(9, 8)).astype(np.uint8)
        labels[rng.uniform(size=labels.shape) < 0.3] = BACKGROUND_LABEL
        sem = rng.uniform(-0.05, 1.05, size=(9, 8, 5))
        value, _ = semantic_loss(sem, labels)
        ref = scalar_bce(sem, labels)
        assert abs(value - ref) <= 1e-9 * ref


def test_semantic_loss_background_only_is_zero():
    value, grad = semantic_loss(np.full((3, 3, 5), 0.3), np.full((3, 3), BACKGROUND_LABEL, np.uint8))
    assert value == 0.0 and not np.any(grad)


def test_semantic_gradient_matches_finite_differences(rng):
    labels = rng.integers(0, 5, size=(4, 4)).astype(np.uint8)
    labels[0, 0] = BACKGROUND_LABEL
    sem = rng.uniform(0.05, 0.95, size=(4, 4, 5))
    _, g = semantic_loss(sem, labels)
    assert rel_err(g, central_diff(lambda v: semantic_loss(v, labels)[0], sem, 1e-7)) < 1e-4


def test_knn_excludes_self_and_matches_brute_force(rng):
    pts = rng.normal(size=(60, 3))
    assert np.array_equal(knn_indices(pts, 4), brute_knn(pts, 4))
    with pytest.raises(UsageError):
        knn_indices(pts[:3], 3)


def test_neighborhood_identical_distributions_zero(rng):
    p = np.tile(softmax(rng.normal(size=5)), (20, 1))
    value, _ = neighborhood_loss(p, knn_indices(rng.normal(size=(20, 3)), 3))
    assert abs(value) < 1e-15


def test_neighborhood_two_point_hand_value():
    p = np.zeros((2, 5))
    p[0, 0] = 1.0
    p[1, 1] = 1.0
    nb = knn_indices(np.array([[0.0, 0, 0], [1.0, 0, 0]]), 1)
    value, _ = neighborhood_loss(p, nb)
    # each direction: 1*ln(1/eps) + eps*ln(eps/1); three zero channels cancel
    one_way = math.log(1 / 1e-8) + 1e-8 * math.log(1e-8)
    assert abs(value - (2 * one_way) / 2) < 1e-12
    assert value > 18


def test_neighborhood_matches_exhaustive_oracle(rng):
    for _ in range(5):
        pts = rng.normal(size=(25, 3))
        probs = softmax(rng.normal(scale=2, size=(25, 5)))
        value, _ = neighborhood_loss(probs, knn_indices(pts, 3))
        nb = brute_knn(pts, 3)
        ref = 0.0
        for m in range(25):
            for n in nb[m]:
                for c in range(5):
                    a, b = max(probs[m, c], 1e-8), max(probs[n, c], 1e-8)
                    ref += a * math.log(a / b)
        ref /= 25
        assert abs(value - ref) <= 1e-9 * ref


def test_neighborhood_invariant_to_rigid_motion(rng):
    pts = rng.normal(size=(30, 3))
    probs = softmax(rng.normal(size=(30, 5)))
    moved = pts @ random_rotation(rng).T + rng.normal(size=3)
    a, _ = neighborhood_loss(probs, knn_indices(pts, 4))
    b, _ = neighborhood_loss(probs, knn_indices(moved, 4))
    assert abs(a - b) < 1e-12


def test_neighborhood_gradient_matches_finite_differences(rng):
    probs = softmax(rng.normal(size=(12, 5)))
    nb = knn_indices(rng.normal(size=(12, 3)), 3)
    _, g = neighborhood_loss(probs, nb)
    assert rel_err(g, central_diff(lambda v: neighborhood_loss(v, nb)[0], probs, 1e-7)) < 1e-4


def test_skin_loss_cases(body, rng):
    tree = cKDTree(body.vertices)
    pts = body.vertices[rng.choice(body.n_vertices, 40, replace=False)] + rng.normal(scale=1e-4, size=(40, 3))
    target = nearest_template_weights(pts, tree, body.lbs_weights)
    assert skin_loss(target, target)[0] == 0.0
    a = np.array([[0.5, 0.5, 0.0]])
    b = np.array([[1.0, 0.0, 0.0]])
    assert skin_loss(a, b)[0] == (0.25 + 0.25) / 3
    pred = rng.dirichlet(np.ones(body.n_bones), 40)
    value, g = skin_loss(pred, target)
    ref = sum((pred[i, j] - target[i, j]) ** 2 for i in range(40) for j in range(body.n_bones)) / pred.size
    assert abs(value - ref) <= 1e-9 * ref
    assert rel_err(g, central_diff(lambda v: skin_loss(v, target)[0], pred, 1e-7)) < 1e-4


def test_isopos_scale_closed_form():
    x = np.array([[0.0, 0, 0], [0.0, 0.75, 0]])
    nb = knn_indices(x, 1)
    value, _, _ = isopos_loss(x, 2 * x, nb)
    assert value == 0.75 ** 2


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1))
def test_isopos_zero_under_rigid_motion(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(20, 3))
    moved = x @ random_rotation(rng).T + rng.normal(scale=3, size=3)
    value, _, _ = isopos_loss(x, moved, knn_indices(x, 4))
    assert value < 1e-24


def test_isopos_matches_scalar_loop_and_gradients(rng):
    x = rng.normal(size=(15, 3))
    y = x + rng.normal(scale=0.1, size=(15, 3))
    nb = knn_indices(x, 3)
    value, g_can, g_obs = isopos_loss(x, y, nb)
    ref = 0.0
    for i in range(15):
        for j in nb[i]:
            ref += (np.linalg.norm(y[i] - y[j]) - np.linalg.norm(x[i] - x[j])) ** 2
    ref /= 45
    assert abs(value - ref) <= 1e-9 * ref
    assert rel_err(g_obs, central_diff(lambda v: isopos_loss(x, v, nb)[0], y)) < 1e-4
    assert rel_err(g_can, central_diff(lambda v: isopos_loss(v, y, nb)[0], x)) < 1e-4


def test_total_loss_cases(rng):
    terms = {t: float(v) for t, v in zip(TERMS, rng.uniform(size=len(TERMS)))}
    only_rgb = LossWeights(**{k: 0.0 for k in ("mask", "ssim", "skin", "isopos", "semantic", "neighborhood")})
    assert total_loss(terms, only_rgb).total == terms["rgb"]
    assert total_loss({t: 0.0 for t in TERMS}, LossWeights()).total == 0.0
    w = LossWeights(*rng.uniform(size=7))
    ref = sum(terms[t] * w.as_dict()[t] for t in TERMS)
    assert abs(total_loss(terms, w).total - ref) < 1e-9


def test_loss_weights_must_be_nonnegative():
    with pytest.raises(ValueError):
        LossWeights(mask=-0.1)
    with pytest.raises(ValueError):
        LossWeights(ssim=float("nan"))


def test_report_csv_row():
    r = LossReport({"rgb": 0.5, "ssim": 0.25}, 0.55)
    assert LossReport.csv_header()[0] == "iteration" and LossReport.csv_header()[-1] == "total"
    row = r.csv_row(7)
    assert row[0] == 7 and row[1] == 0.5 and row[-1] == 0.55 and len(row) == len(TERMS) + 2
