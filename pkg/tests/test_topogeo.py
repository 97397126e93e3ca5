import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatavatar._validation import ConfigError, EmptyInputError
from splatavatar.topogeo import (
    CENTER, CoordHash, FusionNet, SparseUNet, gather_to_points, neighbor_table, scatter_to_voxels,
    sparse_conv_backward, sparse_conv_forward, subm_conv, voxelize,
)
from oracles import central_diff, dense_subm_conv, floor_voxelize, naive_mlp, rel_err


def test_voxel_coordinates_by_floor():
    g = voxelize(np.array([[0.25, 0.51, -0.10]]), 0.5)
    assert g.coords.tolist() == [[0, 1, -1]]
    for v in (0.01, 0.5, 3.0):
        assert voxelize(np.zeros((1, 3)), v).coords.tolist() == [[0, 0, 0]]


def test_voxelize_matches_floor_loop(rng):
    for _ in range(20):
        x = rng.normal(size=(200, 3))
        f = rng.normal(size=(200, 4))
        g = voxelize(x, 0.3, f)
        ref = floor_voxelize(x, 0.3, f)
        assert len(g) == len(ref)
        for row, key in enumerate(map(tuple, g.coords)):
            members, mean = ref[key]
            assert sorted(np.nonzero(g.point_voxel == row)[0].tolist()) == members
            assert np.abs(g.features[row] - mean).max() < 1e-12


def test_voxel_size_must_be_positive():
    with pytest.raises(ConfigError):
        voxelize(np.zeros((2, 3)), 0.0)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.tuples(*[st.integers(-5, 5)] * 3))
def test_voxelize_translation_consistent(seed, k):
    rng = np.random.default_rng(seed)
    v = 0.25
    x = rng.integers(-40, 40, size=(30, 3)) * v / 8 + v / 16   # exact binary fractions
    a = voxelize(x, v)
    b = voxelize(x + np.array(k) * v, v)
    assert np.array_equal(b.coords, a.coords + np.array(k))
    assert np.array_equal(a.point_voxel, b.point_voxel)


def test_coord_hash_lookup(rng):
    coords = np.unique(rng.integers(-20, 20, size=(300, 3)), axis=0)
    h = CoordHash(coords)
    assert np.array_equal(h.lookup(coords), np.arange(len(coords)))
    missing = np.array([[100, 100, 100], [-99, 0, 0]])
    assert np.all(h.lookup(missing) == -1)


def test_subm_conv_matches_dense_block(rng):
    coords = np.array([(i, j, k) for i in range(3) for j in range(3) for k in range(3)])
    feats = rng.normal(size=(27, 4))
    W = rng.normal(size=(27, 4, 5))
    b = rng.normal(size=5)
    out, _ = subm_conv(feats, neighbor_table(coords), W, b)
    ref = dense_subm_conv(coords, feats, W, b)
    assert rel_err(out, ref, floor=1e-12) < 1e-6


def test_subm_conv_random_sparse_sets(rng):
    for _ in range(20):
        coords = np.unique(rng.integers(0, 6, size=(60, 3)), axis=0)
        feats = rng.normal(size=(len(coords), 3))
        W = rng.normal(size=(27, 3, 2))
        b = rng.normal(size=2)
        out, _ = subm_conv(feats, neighbor_table(coords), W, b)
        assert rel_err(out, dense_subm_conv(coords, feats, W, b), floor=1e-12) < 1e-9


def test_single_voxel_uses_center_tap(rng):
    feats = rng.normal(size=(1, 4))
    W = rng.normal(size=(27, 4, 3))
    b = rng.normal(size=3)
    out, _ = subm_conv(feats, neighbor_table(np.zeros((1, 3), dtype=np.int64)), W, b)
    np.testing.assert_allclose(out, feats @ W[CENTER] + b, rtol=1e-14)


def test_unet_single_voxel_is_chain_of_center_taps(rng):
    net = SparseUNet(5, (4, 6), 3, seed=1)
    net.load_parameters({k: rng.normal(size=v.shape) for k, v in net.parameters().items()})
    g = voxelize(np.array([[0.01, 0.02, 0.03]]), 0.05, rng.normal(size=(1, 5)))
    out, _ = net.forward(g)
    P = net.parameters()

    def tap(name, x, relu=True):
        y = naive_mlp(x, [P[f"{name}.W"][CENTER]], [P[f"{name}.b"]])
        return np.maximum(y, 0) if relu else y

    e0 = tap("enc0b", tap("enc0a", g.features))
    e1 = tap("enc1b", tap("enc1a", e0))
    m2 = tap("mid", e1)
    d1 = tap("dec1", np.concatenate([e1, m2], axis=1))
    ref = tap("out", np.concatenate([e0, d1], axis=1), relu=False)
    assert rel_err(out, ref, floor=1e-12) < 1e-12


def test_unet_zero_input_zero_bias_gives_zero(rng):
    net = SparseUNet(5, (4, 6), 3)
    g = voxelize(rng.normal(scale=0.2, size=(40, 3)), 0.05, np.zeros((40, 5)))
    out, _ = net.forward(g)
    assert not np.any(out)


def test_unet_preserves_occupancy(rng):
    net = SparseUNet(2, (4, 6), 3)
    g = voxelize(rng.normal(scale=0.3, size=(100, 3)), 0.05, rng.normal(size=(100, 2)))
    out, _ = net.forward(g)
    assert out.shape == (len(g), 3)


def test_unet_rejects_empty_grid():
    g = voxelize(np.zeros((0, 3)), 0.05, np.zeros((0, 2)))
    with pytest.raises(EmptyInputError):
        SparseUNet(2).forward(g)


def test_gather_scatter_adjoint(rng):
    g = voxelize(rng.normal(scale=0.3, size=(80, 3)), 0.1)
    F = rng.normal(size=(len(g), 4))
    G = rng.normal(size=(80, 4))
    assert abs(np.sum(gather_to_points(g, F) * G) - np.sum(F * scatter_to_voxels(g, G))) < 1e-9


def test_unet_zero_upstream_zero_gradients(rng):
    net = SparseUNet(3, (4, 6), 2)
    g = voxelize(rng.normal(scale=0.1, size=(20, 3)), 0.05, rng.normal(size=(20, 3)))
    _, pts, tape = sparse_conv_forward(g, net)
    grads, gx = sparse_conv_backward(g, net, tape, np.zeros_like(pts))
    assert not np.any(gx) and not any(np.any(v) for v in grads.values())


def test_unet_single_voxel_center_gradient(rng):
    net = SparseUNet(3, (4, 6), 2, seed=3)
    g = voxelize(np.zeros((1, 3)), 0.05, rng.normal(size=(1, 3)))
    out, tape = net.forward(g)
    up = rng.normal(size=out.shape)
    grads, _ = net.backward(tape, up)
    x_out = tape["t"]["out"].reshape(1, 27, -1)[:, CENTER]
    np.testing.assert_allclose(grads["out.W"][CENTER], np.outer(x_out[0], up[0]))
    assert not np.any(np.delete(grads["out.W"], CENTER, axis=0))


def test_unet_backward_matches_finite_differences(rng):
    net = SparseUNet(3, (4, 6), 2, seed=5)
    net.load_parameters({k: rng.normal(scale=0.5, size=v.shape) for k, v in net.parameters().items()})
    x = rng.normal(scale=0.08, size=(25, 3))
    f = rng.normal(size=(25, 3))
    G = rng.normal(size=(25, 2))
    g = voxelize(x, 0.05, f)
    _, pts, tape = sparse_conv_forward(g, net)
    grads, g_x0 = sparse_conv_backward(g, net, tape, G)

    def loss_feats(v):
        gg = voxelize(x, 0.05, f)
        gg.features = v
        return np.sum(sparse_conv_forward(gg, net, retain=False)[1] * G)

    assert rel_err(g_x0, central_diff(loss_feats, g.features, 1e-5)) < 1e-3
    params = {k: v.copy() for k, v in net.parameters().items()}
    for name in ("enc0a.W", "mid.W", "dec1.b", "out.W"):
        def f_param(v, name=name):
            net.load_parameters({**params, name: v})
            return np.sum(sparse_conv_forward(g, net, retain=False)[1] * G)
        fd = central_diff(f_param, params[name], 1e-5)
        net.load_parameters(params)
        assert rel_err(grads[name], fd) < 1e-3, name


def test_fusion_network(rng):
    net = FusionNet(4, 8, hidden=(16, 16))
    pf, x, z = rng.normal(size=(10, 4)), rng.normal(size=(10, 3)), rng.normal(size=8)
    (dx, ds, dr), _ = net.forward(pf, x, z)
    assert not (np.any(dx) or np.any(ds) or np.any(dr))
    net.mlp.load_parameters({k: rng.normal(size=v.shape) for k, v in net.mlp.parameters().items()})
    (dx, ds, dr), _ = net.forward(pf, x, z)
    raw = naive_mlp(np.concatenate([pf, x, np.tile(z, (10, 1))], axis=1), net.mlp.weights, net.mlp.biases)
    assert rel_err(np.concatenate([dx, ds, dr], axis=1), raw * net.scale, floor=1e-12) < 1e-12
    perm = rng.permutation(10)
    (px, _, _), _ = net.forward(pf[perm], x[perm], z)
    assert np.array_equal(px, dx[perm])
