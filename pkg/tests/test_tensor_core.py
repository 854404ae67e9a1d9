import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from partalign import tensor_core as tc

finite = st.floats(-50, 50, allow_nan=False)


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


# ---------------------------------------------------------------------------
# affine


def test_affine_identity():
    y, _ = tc.affine(np.array([1.0, 0.0]), np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(y, [1.0, 0.0])


def test_affine_hand_value():
    y, _ = tc.affine(np.array([1.0, 2.0]), np.ones((2, 2)), np.ones(2))
    np.testing.assert_array_equal(y, [4.0, 4.0])


def test_affine_bias_gradient_is_ones():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 4))
    y, cache = tc.affine(x, rng.normal(size=(4, 2)), np.zeros(2))
    _, _, db = tc.affine_backward(np.ones_like(y), cache)
    np.testing.assert_array_equal(db, [3.0, 3.0])


def test_affine_shape_error():
    with pytest.raises(tc.ShapeError):
        tc.affine(np.ones(3), np.ones((2, 2)), np.ones(2))


def test_affine_backward_matches_numeric():
    rng = np.random.default_rng(1)
    x, W, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 4)), rng.normal(size=4)
    r = rng.normal(size=(2, 4))
    _, cache = tc.affine(x, W, b)
    dx, dW, db = tc.affine_backward(r, cache)
    f = lambda: float((tc.affine(x, W, b)[0] * r).sum())
    np.testing.assert_allclose(dx, numeric_grad(f, x), rtol=1e-7)
    np.testing.assert_allclose(dW, numeric_grad(f, W), rtol=1e-7)
    np.testing.assert_allclose(db, numeric_grad(f, b), rtol=1e-7)


# ---------------------------------------------------------------------------
# softmax


def test_softmax_uniform():
    p, _ = tc.softmax(np.zeros(3))
    np.testing.assert_allclose(p, np.full(3, 1 / 3))


def test_softmax_no_overflow():
    p, _ = tc.softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p, [1.0, 0.0], atol=1e-300)


def test_softmax_log_inputs():
    p, _ = tc.softmax(np.log([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(p, [1 / 6, 2 / 6, 3 / 6], rtol=1e-14)


def test_softmax_mask_zeroes_excluded():
    p, _ = tc.softmax(np.array([1.0, 2.0, 3.0]), mask=np.array([True, False, True]))
    assert p[1] == 0.0
    np.testing.assert_allclose(p[[0, 2]], np.exp([1, 3]) / np.exp([1, 3]).sum())


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=finite))
def test_softmax_sums_to_one(x):
    p, _ = tc.softmax(x)
    assert abs(p.sum() - 1.0) < 1e-12
    logp, prob = tc.log_softmax(x)
    np.testing.assert_allclose(np.exp(logp), p, rtol=1e-10, atol=1e-300)
    np.testing.assert_allclose(prob, p, rtol=1e-10, atol=1e-300)


def test_softmax_backward_matches_numeric():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 5))
    r = rng.normal(size=(2, 5))
    p, _ = tc.softmax(x)
    f = lambda: float((tc.softmax(x)[0] * r).sum())
    np.testing.assert_allclose(tc.softmax_backward(r, p), numeric_grad(f, x), rtol=1e-6, atol=1e-10)
    logp, prob = tc.log_softmax(x)
    g = lambda: float((tc.log_softmax(x)[0] * r).sum())
    np.testing.assert_allclose(tc.log_softmax_backward(r, prob), numeric_grad(g, x), rtol=1e-6, atol=1e-10)


def test_sigmoid_extremes():
    s = tc.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])
    x = np.linspace(-5, 5, 11)
    np.testing.assert_allclose(tc.sigmoid(x), 1 / (1 + np.exp(-x)), rtol=1e-14)


# ---------------------------------------------------------------------------
# LSTM


def reference_cell(x, h, c, W, U, b):
    """Textbook LSTM step, gates in [i, f, o, g] order."""
    d = h.shape[-1]
    z = x @ W + h @ U + b
    sig = lambda v: 1 / (1 + np.exp(-v))
    i, f, o = sig(z[..., :d]), sig(z[..., d : 2 * d]), sig(z[..., 2 * d : 3 * d])
    g = np.tanh(z[..., 3 * d :])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


def test_lstm_zero_everything():
    p = tc.LstmCellParams(np.zeros((2, 12)), np.zeros((3, 12)), np.zeros(12))
    h, c, _ = tc.lstm_cell(np.zeros((1, 2)), np.zeros((1, 3)), np.zeros((1, 3)), p)
    np.testing.assert_array_equal(h, 0.0)
    np.testing.assert_array_equal(c, 0.0)


def test_lstm_saturated_forget_gate():
    rng = np.random.default_rng(3)
    d = 3
    b = np.zeros(4 * d)
    b[d : 2 * d] = 50.0
    p = tc.LstmCellParams(rng.normal(size=(2, 4 * d)), rng.normal(size=(d, 4 * d)), b)
    x, h0, c0 = rng.normal(size=(1, 2)), rng.normal(size=(1, d)), rng.normal(size=(1, d))
    _, c, _ = tc.lstm_cell(x, h0, c0, p)
    z = x @ p.W + h0 @ p.U + p.b
    i = 1 / (1 + np.exp(-z[:, :d]))
    g = np.tanh(z[:, 3 * d :])
    np.testing.assert_allclose(c, c0 + i * g, atol=1e-12)


def test_lstm_init_forget_bias():
    p = tc.LstmCellParams.init(4, 5, np.random.default_rng(0))
    np.testing.assert_array_equal(p.b[5:10], tc.FORGET_BIAS)
    assert np.abs(p.W).max() <= tc.INIT_SCALE
    assert p.input_dim == 4 and p.hidden_dim == 5


def test_lstm_cell_matches_reference():
    rng = np.random.default_rng(4)
    p = tc.LstmCellParams.init(3, 4, rng, scale=0.5)
    x, h, c = rng.normal(size=(2, 3)), rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    h1, c1, _ = tc.lstm_cell(x, h, c, p)
    h2, c2 = reference_cell(x, h, c, p.W, p.U, p.b)
    np.testing.assert_allclose(h1, h2, rtol=1e-13)
    np.testing.assert_allclose(c1, c2, rtol=1e-13)


def test_lstm_cell_gradients():
    rng = np.random.default_rng(5)
    p = tc.LstmCellParams.init(3, 3, rng, scale=0.5)
    x, h, c = rng.normal(size=(1, 3)), rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    rh, rc = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))

    def f():
        hh, cc, _ = tc.lstm_cell(x, h, c, p)
        return float((hh * rh).sum() + (cc * rc).sum())

    _, _, cache = tc.lstm_cell(x, h, c, p)
    dx, dh, dc, dW, dU, db = tc.lstm_cell_backward(rh, rc, cache, p)
    for analytic, arr in [(dx, x), (dh, h), (dc, c), (dW, p.W), (dU, p.U), (db, p.b)]:
        num = numeric_grad(f, arr, eps=1e-5)
        err = np.abs(analytic - num).max() / max(np.abs(num).max(), 1e-12)
        assert err < 1e-6


def test_lstm_layer_equals_stepping_cell():
    rng = np.random.default_rng(6)
    p = tc.LstmCellParams.init(3, 4, rng, scale=0.3)
    xs = rng.normal(size=(2, 5, 3))
    H, (hT, cT), _ = tc.lstm_layer(xs, p)
    h = c = np.zeros((2, 4))
    for t in range(5):
        h, c, _ = tc.lstm_cell(xs[:, t], h, c, p)
        np.testing.assert_allclose(H[:, t], h, rtol=1e-13)
    np.testing.assert_allclose(cT, c, rtol=1e-13)


def test_lstm_layer_backward():
    rng = np.random.default_rng(7)
    p = tc.LstmCellParams.init(2, 3, rng, scale=0.5)
    xs = rng.normal(size=(2, 4, 2))
    h0, c0 = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    r = rng.normal(size=(2, 4, 3))
    rc = rng.normal(size=(2, 3))

    def f():
        H, (_, cT), _ = tc.lstm_layer(xs, p, h0, c0)
        return float((H * r).sum() + (cT * rc).sum())

    _, _, cache = tc.lstm_layer(xs, p, h0, c0)
    dxs, dh0, dc0, dW, dU, db = tc.lstm_layer_backward(r, cache, p, None, rc)
    for analytic, arr in [(dxs, xs), (dh0, h0), (dc0, c0), (dW, p.W), (dU, p.U), (db, p.b)]:
        np.testing.assert_allclose(analytic, numeric_grad(f, arr, eps=1e-5), rtol=1e-6, atol=1e-9)


# ---------------------------------------------------------------------------
# dropout


def test_dropout_rate_zero_and_eval_are_identity():
    x = np.arange(6.0)
    assert tc.dropout(x, 0.0, True, 1)[0] is x
    y, mask = tc.dropout(x, 0.2, False, 1)
    assert y is x and mask is None


def test_dropout_deterministic_and_unbiased():
    x = np.linspace(1, 2, 5)
    a, _ = tc.dropout(x, 0.2, True, 123)
    b, _ = tc.dropout(x, 0.2, True, 123)
    np.testing.assert_array_equal(a, b)
    rng = np.random.default_rng(9)
    draws = np.stack([tc.dropout(x, 0.2, True, rng)[0] for _ in range(10_000)])
    np.testing.assert_allclose(draws.mean(axis=0), x, rtol=0.02)


def test_dropout_rejects_bad_rate():
    with pytest.raises(ValueError):
        tc.dropout(np.ones(2), 1.0, True, 0)


def test_dropout_backward_uses_mask():
    x = np.ones(8)
    y, mask = tc.dropout(x, 0.5, True, 4)
    np.testing.assert_array_equal(tc.dropout_backward(np.ones(8), mask), y)


# ---------------------------------------------------------------------------
# gradient check


def test_gradient_check_quadratic():
    theta = {"w": np.array([1.0, -2.0, 3.0]), "m": np.arange(4.0).reshape(2, 2)}

    def loss(p):
        return 0.5 * sum(float((v**2).sum()) for v in p.values()), {k: v.copy() for k, v in p.items()}

    report = tc.gradient_check(loss, theta)
    assert report.max_rel_error < 1e-9
    assert report.checked == 7


def test_gradient_check_constant_loss():
    theta = {"w": np.ones(3)}
    report = tc.gradient_check(lambda p: (4.2, {"w": np.zeros(3)}), theta)
    assert report.max_rel_error == 0.0


def test_gradient_check_catches_wrong_gradient():
    theta = {"w": np.array([1.0, 2.0])}
    wrong = lambda p: (float((p["w"] ** 2).sum()), {"w": p["w"].copy()})  # true grad is 2w
    with pytest.raises(AssertionError):
        tc.gradient_check(wrong, theta, tol=1e-4)


def test_gradient_check_restores_params():
    theta = {"w": np.array([0.3, -0.7])}
    before = theta["w"].copy()
    tc.gradient_check(lambda p: (float(np.sin(p["w"]).sum()), {"w": np.cos(p["w"])}), theta)
    np.testing.assert_array_equal(theta["w"], before)


def test_gradient_check_nonfinite():
    with pytest.raises(tc.NonFiniteError):
        tc.gradient_check(lambda p: (float("nan"), {"w": p["w"]}), {"w": np.ones(1)})
