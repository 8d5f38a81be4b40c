"""Tape correctness: forward semantics, gradients vs finite differences, AdamW."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctsel import autodiff as ad


def finite_difference(f, arrays, index, coord, h=1e-5):
    """Central finite difference of scalar f at one coordinate."""
    arr = arrays[index]
    old = arr[coord]
    arr[coord] = old + h
    up = f()
    arr[coord] = old - h
    down = f()
    arr[coord] = old
    return (up - down) / (2 * h)


def test_matmul_identity():
    m = np.arange(12, dtype=float).reshape(3, 4)
    out = ad.matmul(ad.constant(np.eye(3)), ad.constant(m))
    assert np.array_equal(out.data, m)


def test_matmul_shape_error_mentions_both_shapes():
    with pytest.raises(ad.AutodiffError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((2, 3))))


def test_dropout_p0_unchanged():
    x = ad.constant(np.arange(6, dtype=float).reshape(2, 3))
    out = ad.dropout(x, 0.0, np.random.default_rng(0))
    assert np.array_equal(out.data, x.data)


def test_dropout_mask_is_inverted_bernoulli():
    rng = np.random.default_rng(1)
    x = ad.constant(np.ones((400, 50)))
    out = ad.dropout(x, 0.25, rng)
    values = np.unique(out.data)
    assert set(np.round(values, 12)) <= {0.0, np.round(1 / 0.75, 12)}
    assert abs(out.data.mean() - 1.0) < 0.02  # inverted scaling keeps the mean


def test_mean_simple():
    assert float(ad.mean(ad.constant([1.0, 2.0, 3.0, 6.0])).data) == 3.0


def test_linear_regression_gradient_closed_form():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(40, 1))
    y = rng.normal(size=(40, 1))
    w = ad.parameter([[0.7]])
    loss = ad.mean(ad.square(ad.sub(ad.matmul(ad.constant(x), w), ad.constant(y))))
    (g,) = ad.gradients(loss, [w])
    expected = 2.0 * np.mean((0.7 * x - y) * x)
    assert abs(g[0, 0] - expected) < 1e-12


def test_gradient_of_constant_is_zero():
    w = ad.parameter(np.ones((2, 2)))
    loss = ad.mean(ad.constant(np.ones((3, 3))))
    (g,) = ad.gradients(loss, [w])  # disconnected leaf
    assert np.array_equal(g, np.zeros((2, 2)))


def test_two_layer_network_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    w1 = rng.normal(size=(6, 9)) * 0.5
    w2 = rng.normal(size=(9, 1)) * 0.5
    x = rng.normal(size=(15, 6))
    y = rng.normal(size=(15, 1))
    arrays = [w1, w2]

    def value():
        h = ad.tanh(ad.matmul(ad.constant(x), ad.constant(w1)))
        p = ad.matmul(ad.relu(h), ad.constant(w2))
        return float(ad.mean(ad.square(ad.sub(p, ad.constant(y)))).data)

    def analytic():
        t1, t2 = ad.parameter(w1), ad.parameter(w2)
        h = ad.tanh(ad.matmul(ad.constant(x), t1))
        p = ad.matmul(ad.relu(h), t2)
        loss = ad.mean(ad.square(ad.sub(p, ad.constant(y))))
        return ad.gradients(loss, [t1, t2])

    grads = analytic()
    for _ in range(20):
        k = int(rng.integers(0, 2))
        coord = tuple(rng.integers(0, s) for s in arrays[k].shape)
        fd = finite_difference(value, arrays, k, coord)
        rel = abs(fd - grads[k][coord]) / max(abs(fd), 1e-10)
        assert rel < 1e-4


def test_gradients_through_composites_used_by_models():
    # concat / slice / sigmoid / mul / broadcast-add, randomized shapes
    rng = np.random.default_rng(11)
    for trial in range(5):
        b = int(rng.integers(2, 7))
        d = int(rng.integers(2, 5))
        h = int(rng.integers(3, 6))
        wx = rng.normal(size=(2 * d, 3 * h)) * 0.4
        bias = rng.normal(size=(1, 3 * h)) * 0.1
        x1 = rng.normal(size=(b, d))
        x2 = rng.normal(size=(b, d))

        def build(wt, bt):
            inp = ad.concat([ad.constant(x1), ad.constant(x2)], axis=1)
            g = ad.add(ad.matmul(inp, wt), bt)
            r = ad.sigmoid(ad.slice_axis(g, 0, h))
            z = ad.tanh(ad.slice_axis(g, h, 2 * h))
            return ad.mean(ad.square(ad.mul(r, z)))

        wt, bt = ad.parameter(wx), ad.parameter(bias)
        gw, gb = ad.gradients(build(wt, bt), [wt, bt])

        def value():
            return float(build(ad.constant(wx), ad.constant(bias)).data)

        for _ in range(4):
            coord = tuple(rng.integers(0, s) for s in wx.shape)
            fd = finite_difference(value, [wx], 0, coord)
            assert abs(fd - gw[coord]) / max(abs(fd), 1e-10) < 1e-4
        coord = (0, int(rng.integers(0, 3 * h)))
        fd = finite_difference(value, [bias], 0, coord)
        assert abs(fd - gb[coord]) / max(abs(fd), 1e-10) < 1e-4


def test_backward_linearity():
    rng = np.random.default_rng(13)
    w = ad.parameter(rng.normal(size=(4, 4)))
    x = ad.constant(rng.normal(size=(4, 4)))
    l1 = ad.mean(ad.square(ad.matmul(x, w)))
    l2 = ad.mean(ad.tanh(ad.matmul(x, w)))
    (g1,) = ad.gradients(l1, [w])
    (g2,) = ad.gradients(l2, [w])
    combined = ad.add(ad.scale(l1, 2.5), ad.scale(l2, -0.5))
    (gc,) = ad.gradients(combined, [w])
    assert np.allclose(gc, 2.5 * g1 - 0.5 * g2, rtol=0, atol=1e-12)


def test_backward_determinism_bitwise():
    def run():
        rng = np.random.default_rng(17)
        w = ad.parameter(rng.normal(size=(5, 5)))
        x = ad.constant(rng.normal(size=(8, 5)))
        mask_rng = np.random.default_rng(18)
        h = ad.dropout(ad.tanh(ad.matmul(x, w)), 0.3, mask_rng)
        loss = ad.mean(ad.square(h))
        (g,) = ad.gradients(loss, [w])
        return g
    assert np.array_equal(run(), run())


def test_backward_requires_scalar():
    w = ad.parameter(np.ones((2, 2)))
    with pytest.raises(ad.AutodiffError, match="scalar"):
        ad.backward(ad.add(w, w))


def test_nan_propagation_is_an_error():
    big = ad.constant(np.full((2, 2), 1e308))
    with pytest.raises(ad.AutodiffError, match="non-finite"), \
            np.errstate(over="ignore"):
        ad.square(big)


@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
@settings(max_examples=20, deadline=None)
def test_broadcast_add_gradient_sums_over_broadcast_axes(seed):
    rng = np.random.default_rng(seed)
    a = ad.parameter(rng.normal(size=(3, 4)))
    b = ad.parameter(rng.normal(size=(1, 4)))
    loss = ad.total(ad.mul(ad.add(a, b), ad.constant(rng.normal(size=(3, 4)))))
    ga, gb = ad.gradients(loss, [a, b])
    assert gb.shape == (1, 4)
    assert np.allclose(gb, ga.sum(axis=0, keepdims=True), atol=1e-12)


def test_adamw_zero_grad_no_decay_keeps_weights():
    w = np.array([1.5, -2.0])
    wn, m, v = ad.adamw_step(w, np.zeros(2), np.zeros(2), np.zeros(2), 1, lr=0.1)
    assert np.array_equal(wn, w)


def test_adamw_first_step_magnitude_is_lr():
    # f(w) = w^2 from w = 1: bias-corrected first step is lr * g/(|g| + eps)
    w = np.array([1.0])
    g = 2.0 * w
    wn, _, _ = ad.adamw_step(w, g, np.zeros(1), np.zeros(1), 1, lr=0.1)
    assert abs(wn[0] - 0.9) < 1e-8


def test_adamw_decoupled_decay():
    w = np.array([3.0])
    wn, _, _ = ad.adamw_step(w, np.zeros(1), np.zeros(1), np.zeros(1), 1,
                             lr=0.1, weight_decay=0.1)
    assert np.allclose(wn, w * (1 - 0.01), rtol=0, atol=1e-14)


def test_adamw_optimizer_descends_quadratic():
    w = ad.parameter(np.array([[4.0]]))
    opt = ad.AdamW([w], lr=0.2)
    for _ in range(200):
        loss = ad.mean(ad.square(w))
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
    assert abs(w.data[0, 0]) < 1e-2
