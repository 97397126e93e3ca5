import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatavatar._validation import UsageError
from splatavatar.render import (
    DILATION, Camera, Splats, project, rasterize, render, render_backward,
)
from oracles import brute_render, central_diff, random_scene, rel_err


def _splat(mean, opacity, color, sem=None, cov=1e6):
    """Huge isotropic splats: alpha equals opacity over a tiny image."""
    m = len(opacity)
    cov2d = np.tile(np.eye(2) * cov, (m, 1, 1))
    return Splats(index=np.arange(m), mean2d=np.asarray(mean, float), cov2d=cov2d,
                  conic=np.tile([1 / cov, 0.0, 1 / cov], (m, 1)), depth=np.arange(1.0, m + 1),
                  extent=np.full((m, 2), 1e4), colors=np.asarray(color, float),
                  semantics=np.ones((m, 1)) if sem is None else sem, opacity=np.asarray(opacity, float))


def test_single_opaque_splat_sets_pixel():
    out = rasterize(_splat([[0.0, 0.0]], [1.0], [[0.2, 0.4, 0.6]]), 1, 1, min_transmittance=0)
    np.testing.assert_allclose(out.color[0, 0], [0.2, 0.4, 0.6])
    assert out.alpha[0, 0] == 1.0


def test_two_half_splats_blend_front_to_back():
    sp = _splat([[0.0, 0.0], [0.0, 0.0]], [0.5, 0.5], [[1.0, 1, 1], [0.0, 0, 0]])
    out = rasterize(sp, 1, 1, min_transmittance=0)
    np.testing.assert_allclose(out.color[0, 0], 0.5, atol=1e-5)
    np.testing.assert_allclose(out.alpha[0, 0], 0.75, atol=1e-5)


def test_on_axis_point_projects_to_principal_point():
    cam = Camera(np.eye(3), np.zeros(3), 50.0, 50.0, 15.5, 12.0, 32, 24)
    sp, _ = project(np.array([[0.0, 0.0, 2.0]]), np.full((1, 3), 0.1), np.array([[1.0, 0, 0, 0]]),
                    np.array([0.9]), np.ones((1, 3)), np.ones((1, 5)), cam)
    np.testing.assert_allclose(sp.mean2d[0], [15.5, 12.0])


def test_vanishing_covariance_leaves_dilation():
    cam = Camera(np.eye(3), np.zeros(3), 50.0, 50.0, 8, 8, 16, 16)
    sp, _ = project(np.array([[0.1, 0.0, 2.0]]), np.full((1, 3), 1e-9), np.array([[1.0, 0, 0, 0]]),
                    np.array([0.9]), np.ones((1, 3)), np.ones((1, 5)), cam)
    np.testing.assert_allclose(sp.cov2d[0], DILATION * np.eye(2), atol=1e-12)


def test_projected_covariance_matches_numerical_jacobian(rng):
    scene, cam = random_scene(rng, 20, size=64)
    sp, _ = project(**scene, cam=cam)

    def pix(x):
        p = cam.R @ x + cam.t
        return np.array([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])

    from oracles import quat_matrix
    for s, i in enumerate(sp.index):
        x = scene["positions"][i]
        J = np.stack([(pix(x + 1e-5 * e) - pix(x - 1e-5 * e)) / 2e-5 for e in np.eye(3)], axis=1)
        R = quat_matrix(scene["rotations"][i])
        cov = R @ np.diag(scene["scales"][i] ** 2) @ R.T
        expected = J @ cov @ J.T + DILATION * np.eye(2)
        assert rel_err(sp.cov2d[s], expected, floor=1e-9) < 1e-3


def test_tiled_matches_brute_force(rng):
    for size in (4, 8, 20):
        scene, cam = random_scene(rng, 10, size=size)
        bg = rng.uniform(size=3)
        out = render(**scene, cam=cam, background=bg, min_transmittance=0)
        c, s, a = brute_render(scene["positions"], scene["scales"], scene["rotations"], scene["opacity"],
                               scene["colors"], scene["semantics"], cam, bg)
        assert np.abs(out.color - c).max() < 1e-6
        assert np.abs(out.semantic - s).max() < 1e-6
        assert np.abs(out.alpha - a).max() < 1e-6


def test_render_invariant_to_input_order(rng):
    scene, cam = random_scene(rng, 25, size=24)
    perm = rng.permutation(25)
    a = render(**scene, cam=cam)
    b = render(**{k: v[perm] for k, v in scene.items()}, cam=cam)
    assert np.array_equal(a.color, b.color)
    assert np.array_equal(a.alpha, b.alpha)


def test_semantic_and_color_share_weights(rng):
    scene, cam = random_scene(rng, 15, size=16)
    scene["colors"] = np.ones((15, 3))
    scene["semantics"] = np.ones((15, 3))
    out = render(**scene, cam=cam, background=np.zeros(3))
    assert np.array_equal(out.color, out.semantic)
    np.testing.assert_allclose(out.color[..., 0], out.alpha, atol=1e-12)


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_blending_bounds(seed, n):
    rng = np.random.default_rng(seed)
    scene, cam = random_scene(rng, n, size=16)
    out = render(**scene, cam=cam, background=rng.uniform(size=3))
    assert out.alpha.min() >= 0 and out.alpha.max() <= 1
    assert out.color.min() >= 0 and out.color.max() <= 1 + 1e-6
    assert np.all(out.semantic.sum(axis=-1) <= out.alpha + 1e-6)


def test_zero_upstream_gives_zero_gradients(rng):
    scene, cam = random_scene(rng, 5)
    out = render(**scene, cam=cam, retain=True)
    g = render_backward(out, np.zeros_like(out.color), np.zeros_like(out.semantic), np.zeros_like(out.alpha))
    for v in g.values():
        assert not np.any(v)


def test_single_splat_color_gradient_is_its_alpha(rng):
    scene, cam = random_scene(rng, 1)
    scene["positions"][:] = 0.0
    out = render(**scene, cam=cam, retain=True)
    gc = np.zeros_like(out.color)
    gc[4, 4, 1] = 1.0
    g = render_backward(out, gc)
    assert g["colors"][0, 1] == out.alpha[4, 4]


def test_backward_matches_finite_differences(rng):
    scene, cam = random_scene(rng, 3)
    bg = np.array([0.2, 0.3, 0.1])
    out = render(**scene, cam=cam, background=bg, min_transmittance=0, retain=True)
    g = render_backward(out, np.ones_like(out.color), np.ones_like(out.semantic), np.ones_like(out.alpha))
    for name in scene:
        def f(v, name=name):
            s = dict(scene)
            s[name] = v
            o = render(**s, cam=cam, background=bg, min_transmittance=0)
            return o.color.sum() + o.semantic.sum() + o.alpha.sum()
        assert rel_err(g[name], central_diff(f, scene[name], 1e-4)) < 1e-3, name


def test_backward_without_retain_is_usage_error(rng):
    scene, cam = random_scene(rng, 3)
    out = render(**scene, cam=cam)
    with pytest.raises(UsageError):
        render_backward(out, np.zeros_like(out.color))


def test_points_behind_camera_are_culled(rng):
    scene, cam = random_scene(rng, 4)
    scene["positions"][:, 2] = -5.0
    out = render(**scene, cam=cam)
    assert not np.any(out.alpha)


def test_camera_dict_roundtrip():
    cam = Camera.look_at(np.array([1.0, 2.0, -3.0]), np.zeros(3), np.array([0.0, -1.0, 0.0]), 35.0, 40, 30)
    back = Camera.from_dict(cam.to_dict())
    assert np.array_equal(back.R, cam.R) and np.array_equal(back.t, cam.t)
    assert (back.fx, back.cx, back.width, back.height) == (cam.fx, cam.cx, cam.width, cam.height)
