import numpy as np
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from splatavatar.nn import Adam, exponential_lr, pe_width, positional_encoding, positional_encoding_backward, scatter_add_rows
from oracles import central_diff, rel_err


def test_adam_first_step_moves_by_lr_sign(rng):
    p = {"x": rng.normal(size=(4, 3))}
    g = rng.normal(size=(4, 3))
    before = p["x"].copy()
    Adam().step(p, {"x": g}, {"x": 0.01})
    np.testing.assert_allclose(before - p["x"], 0.01 * np.sign(g), rtol=1e-10)


def test_adam_matches_scalar_recurrence(rng):
    opt = Adam(eps=1e-8)
    p = {"x": np.array([0.5])}
    x, m, v = 0.5, 0.0, 0.0
    for t in range(1, 20):
        g = float(rng.normal())
        opt.step(p, {"x": np.array([g])}, {"x": 0.1})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert abs(p["x"][0] - x) < 1e-12


def test_adam_zero_lr_keeps_parameters(rng):
    p = {"x": rng.normal(size=5)}
    before = p["x"].copy()
    opt = Adam()
    for _ in range(3):
        opt.step(p, {"x": rng.normal(size=5)}, {"x": 0.0})
    assert np.array_equal(p["x"], before)
    assert opt.t["x"] == 3


def test_adam_remap_and_state_roundtrip(rng):
    opt = Adam()
    p = {"x": rng.normal(size=(4, 2))}
    opt.step(p, {"x": rng.normal(size=(4, 2))}, {"x": 0.1})
    m_old = opt.m["x"].copy()
    opt.remap("x", np.array([2, -1, 0]))
    assert np.array_equal(opt.m["x"][0], m_old[2]) and not np.any(opt.m["x"][1])
    assert np.array_equal(opt.m["x"][2], m_old[0])
    other = Adam()
    other.load_state(opt.state())
    for k in ("m", "v"):
        assert np.array_equal(getattr(other, k)["x"], getattr(opt, k)["x"])
    assert other.t == opt.t


@given(st.integers(0, 60), arrays(np.float64, (7, 3), elements=st.floats(-5, 5)), st.integers(1, 9))
def test_scatter_add_matches_loop(n_extra, values, n):
    rng = np.random.default_rng(n_extra)
    index = rng.integers(0, n, size=7)
    expected = np.zeros((n, 3))
    for i, row in zip(index, values):
        expected[i] += row
    np.testing.assert_allclose(scatter_add_rows(index, values, n), expected, atol=1e-12)


def test_scatter_add_empty():
    assert scatter_add_rows(np.zeros(0, dtype=int), np.zeros((0, 3)), 4).shape == (4, 3)


def test_positional_encoding_layout_and_gradient(rng):
    x = rng.normal(size=(5, 3))
    pe = positional_encoding(x)
    assert pe.shape == (5, pe_width(3)) == (5, 27)
    assert np.array_equal(pe[:, :3], x)
    np.testing.assert_allclose(pe[:, 3:6], np.sin(np.pi * x))
    G = rng.normal(size=pe.shape)
    g = positional_encoding_backward(x, G)
    assert rel_err(g, central_diff(lambda v: np.sum(positional_encoding(v) * G), x)) < 1e-4


def test_exponential_lr_endpoints():
    assert exponential_lr(0, 100, 1e-3, 0.01) == 1e-3
    np.testing.assert_allclose(exponential_lr(100, 100, 1e-3, 0.01), 1e-5)
    np.testing.assert_allclose(exponential_lr(50, 100, 1e-3, 0.01), 1e-4)
    assert exponential_lr(500, 100, 1e-3, 0.01) == exponential_lr(100, 100, 1e-3, 0.01)
