"""Network primitives against loop oracles, frozen values, and gradcheck.

All image tensors are NHWC; kernels are (out_channels, in_channels, kh, kw).
"""

import numpy as np
import pytest

from tnlayers import autodiff as ad
from tnlayers import nn
from tnlayers.init import Rng


def wrap(tape, **arrays):
    return {k: tape.leaf(np.asarray(v, dtype=np.float64), name=k)
            for k, v in arrays.items()}


def conv_oracle(x, w, stride):
    """Nested-loop convolution with the same same-padding rule."""
    B, H, W, C = x.shape
    Cout, _, kh, kw = w.shape
    s = stride
    OH = -(-H // s)
    OW = -(-W // s)
    pt = max((OH - 1) * s + kh - H, 0) // 2
    pl = max((OW - 1) * s + kw - W, 0) // 2
    out = np.zeros((B, OH, OW, Cout))
    for b in range(B):
        for co in range(Cout):
            for oh in range(OH):
                for ow in range(OW):
                    acc = 0.0
                    for c in range(C):
                        for i in range(kh):
                            for j in range(kw):
                                r, col = oh * s + i - pt, ow * s + j - pl
                                if 0 <= r < H and 0 <= col < W:
                                    acc += x[b, r, col, c] * w[co, c, i, j]
                    out[b, oh, ow, co] = acc
    return out


# -- convolution ----------------------------------------------------------------


def test_conv_delta_kernel_is_identity():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 8, 8, 3))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    tape = ad.Tape()
    v = wrap(tape, x=x, w=w)
    y = nn.conv2d(v["x"], v["w"])
    np.testing.assert_array_equal(y.value, x)


def test_conv_ones_kernel_sums_interior_neighborhood():
    tape = ad.Tape()
    v = wrap(tape, x=np.full((1, 5, 5, 1), 2.5), w=np.ones((1, 1, 3, 3)))
    y = nn.conv2d(v["x"], v["w"])
    np.testing.assert_allclose(y.value[0, 1:4, 1:4, 0], 9 * 2.5, rtol=1e-15)


@pytest.mark.parametrize("stride,shape,kernel", [
    (1, (2, 6, 5, 3), (4, 3, 3, 3)),
    (2, (1, 7, 7, 2), (3, 2, 3, 3)),
    (1, (1, 4, 4, 1), (2, 1, 1, 1)),
])
def test_conv_matches_loop_oracle(stride, shape, kernel):
    rng = np.random.default_rng(stride)
    x = rng.standard_normal(shape)
    w = rng.standard_normal(kernel)
    tape = ad.Tape()
    v = wrap(tape, x=x, w=w)
    y = nn.conv2d(v["x"], v["w"], stride=stride)
    np.testing.assert_allclose(y.value, conv_oracle(x, w, stride),
                               rtol=1e-12, atol=1e-12)


def test_conv_gradcheck():
    rng = np.random.default_rng(4)
    leaves = {"x": rng.standard_normal((2, 5, 5, 2)),
              "w": rng.standard_normal((3, 2, 3, 3))}

    def fn(tape, v):
        y = nn.conv2d(v["x"], v["w"])
        return ad.vsum(ad.mul(y, y))

    assert ad.gradcheck(fn, leaves, max_coords=15) < 1e-6


def test_conv_rejects_channel_mismatch():
    tape = ad.Tape()
    v = wrap(tape, x=np.zeros((1, 4, 4, 3)), w=np.zeros((2, 4, 3, 3)))
    with pytest.raises(ValueError, match="channels"):
        nn.conv2d(v["x"], v["w"])


# -- pooling --------------------------------------------------------------------


def test_maxpool_frozen_examples():
    tape = ad.Tape()
    x = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
    y = nn.maxpool(wrap(tape, x=x)["x"])
    np.testing.assert_array_equal(y.value[0, :, :, 0],
                                  [[10.0, 11.0], [14.0, 15.0]])

    x = np.arange(9, dtype=np.float64).reshape(1, 3, 3, 1)
    y = nn.maxpool(wrap(tape, x=x)["x"])
    np.testing.assert_array_equal(y.value[0, :, :, 0], [[4.0, 5.0], [7.0, 8.0]])


def test_maxpool_single_peak_dominates_its_window():
    x = np.zeros((1, 4, 4, 1))
    x[0, 1, 1, 0] = 9.0
    tape = ad.Tape()
    y = nn.maxpool(wrap(tape, x=x)["x"])
    # stride 2: only the window anchored at (0, 0) spans cell (1, 1)
    np.testing.assert_array_equal(y.value[0, :, :, 0], [[9.0, 0.0], [0.0, 0.0]])


def test_maxpool_padding_never_leaks():
    # a constant negative input must stay constant: max over valid cells
    tape = ad.Tape()
    x = np.full((1, 5, 5, 1), -5.0)
    y = nn.maxpool(wrap(tape, x=x)["x"])
    assert y.value.shape == (1, 3, 3, 1)
    np.testing.assert_array_equal(y.value, np.full((1, 3, 3, 1), -5.0))


def test_maxpool_monotone_rows_stay_monotone():
    x = np.tile(np.arange(6.0)[None, :, None, None], (1, 1, 6, 1))
    tape = ad.Tape()
    y = nn.maxpool(wrap(tape, x=x)["x"])
    assert (np.diff(y.value[0, :, :, 0], axis=0) >= 0).all()


def test_maxpool_output_shape_is_ceil():
    tape = ad.Tape()
    for h, want in [(32, 16), (16, 8), (8, 4), (7, 4), (5, 3)]:
        x = np.zeros((1, h, h, 1))
        y = nn.maxpool(wrap(tape, x=x)["x"])
        assert y.value.shape == (1, want, want, 1)


def test_maxpool_backward_routes_to_argmax():
    tape = ad.Tape()
    x = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
    v = wrap(tape, x=x)
    y = nn.maxpool(v["x"])
    g = tape.gradients(ad.vsum(y), {"x": v["x"]})["x"]
    expect = np.zeros((1, 4, 4, 1))
    for r, c in [(2, 2), (2, 3), (3, 2), (3, 3)]:  # winners 10, 11, 14, 15
        expect[0, r, c, 0] = 1.0
    np.testing.assert_array_equal(g, expect)


def test_maxpool_tie_goes_to_first_cell():
    tape = ad.Tape()
    x = np.zeros((1, 2, 2, 1))  # one 3x3 window, all tied
    v = wrap(tape, x=x)
    y = nn.maxpool(v["x"])
    assert y.value.shape == (1, 1, 1, 1)
    g = tape.gradients(ad.vsum(y), {"x": v["x"]})["x"]
    np.testing.assert_array_equal(g[0, :, :, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_maxpool_gradcheck():
    rng = np.random.default_rng(8)
    # well-separated values keep the argmax stable under the probe
    x = rng.permutation(36).astype(np.float64).reshape(1, 6, 6, 1)

    def fn(tape, v):
        return ad.vsum(ad.mul(nn.maxpool(v["x"]), v["s"]))

    leaves = {"x": x, "s": rng.standard_normal((1, 3, 3, 1))}
    assert ad.gradcheck(fn, leaves, max_coords=20) < 1e-6


# -- batch normalization ----------------------------------------------------------


def fresh_running(c):
    return {"mean": np.zeros(c), "var": np.ones(c)}


def test_batchnorm_constant_channel_returns_beta():
    tape = ad.Tape()
    v = wrap(tape, x=np.full((2, 2, 2, 3), 7.0), gamma=np.ones(3),
             beta=np.array([1.0, 2.0, 3.0]))
    y = nn.batchnorm(v["x"], v["gamma"], v["beta"], fresh_running(3),
                     training=True)
    for c, b in enumerate([1.0, 2.0, 3.0]):
        np.testing.assert_allclose(y.value[..., c], b, atol=1e-8)


def test_batchnorm_normalizes_in_training():
    rng = np.random.default_rng(3)
    tape = ad.Tape()
    v = wrap(tape, x=rng.standard_normal((8, 5, 5, 4)) * 3 + 2,
             gamma=np.ones(4), beta=np.zeros(4))
    y = nn.batchnorm(v["x"], v["gamma"], v["beta"], fresh_running(4),
                     training=True)
    np.testing.assert_allclose(y.value.mean(axis=(0, 1, 2)), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.value.var(axis=(0, 1, 2)), 1.0, atol=1e-3)


def test_batchnorm_idempotent_on_standardized_input():
    rng = np.random.default_rng(21)
    x = rng.standard_normal((16, 4, 4, 2))
    x = (x - x.mean(axis=(0, 1, 2))) / x.std(axis=(0, 1, 2))
    tape = ad.Tape()
    v = wrap(tape, x=x, gamma=np.ones(2), beta=np.zeros(2))
    y = nn.batchnorm(v["x"], v["gamma"], v["beta"], fresh_running(2),
                     training=True)
    np.testing.assert_allclose(y.value, x, atol=1e-4)


def test_batchnorm_running_update_rule():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 3, 3, 2)) + 10.0
    tape = ad.Tape()
    v = wrap(tape, x=x, gamma=np.ones(2), beta=np.zeros(2))
    running = {"mean": np.full(2, 1.0), "var": np.full(2, 4.0)}
    nn.batchnorm(v["x"], v["gamma"], v["beta"], running, training=True)
    np.testing.assert_allclose(running["mean"],
                               0.9 * 1.0 + 0.1 * x.mean(axis=(0, 1, 2)))
    np.testing.assert_allclose(running["var"],
                               0.9 * 4.0 + 0.1 * x.var(axis=(0, 1, 2)))


def test_batchnorm_eval_uses_running_and_leaves_it_alone():
    tape = ad.Tape()
    v = wrap(tape, x=np.full((1, 2, 2, 1), 3.0), gamma=np.full(1, 2.0),
             beta=np.zeros(1))
    running = {"mean": np.full(1, 1.0), "var": np.full(1, 4.0)}
    y = nn.batchnorm(v["x"], v["gamma"], v["beta"], running, training=False)
    want = 2.0 * (3.0 - 1.0) / np.sqrt(4.0 + 1e-5)
    np.testing.assert_allclose(y.value, want, rtol=1e-12)
    assert running["mean"][0] == 1.0 and running["var"][0] == 4.0


def test_batchnorm_training_needs_batch_of_two():
    tape = ad.Tape()
    v = wrap(tape, x=np.zeros((1, 2, 2, 2)), gamma=np.ones(2), beta=np.zeros(2))
    with pytest.raises(ValueError, match="at least 2"):
        nn.batchnorm(v["x"], v["gamma"], v["beta"], fresh_running(2),
                     training=True)


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradcheck(training):
    rng = np.random.default_rng(11)
    leaves = {"x": rng.standard_normal((3, 2, 2, 2)),
              "gamma": rng.standard_normal(2) + 2.0,
              "beta": rng.standard_normal(2)}
    # positionally varying coefficients: a plain sum of squares of the
    # normalized output would not depend on x at all in training mode
    coef = rng.standard_normal((3, 2, 2, 2))

    def fn(tape, v):
        running = {"mean": np.array([0.3, -0.2]), "var": np.array([1.5, 0.7])}
        y = nn.batchnorm(v["x"], v["gamma"], v["beta"], running,
                         training=training)
        y = ad.mul(y, tape.leaf(coef))
        return ad.vsum(ad.mul(y, y))

    assert ad.gradcheck(fn, leaves, max_coords=16) < 1e-6


# -- dropout ----------------------------------------------------------------------


def test_dropout_eval_and_zero_rate_are_identity():
    tape = ad.Tape()
    x = np.arange(12, dtype=np.float64).reshape(3, 4)
    v = wrap(tape, x=x)
    assert np.array_equal(nn.dropout(v["x"], 0.5, Rng(0), False).value, x)
    assert np.array_equal(nn.dropout(v["x"], 0.0, Rng(0), True).value, x)


def test_dropout_masks_and_rescales():
    tape = ad.Tape()
    x = np.ones((200, 200))
    v = wrap(tape, x=x)
    y = nn.dropout(v["x"], 0.25, Rng(7), True)
    vals = np.unique(y.value)
    np.testing.assert_allclose(vals, [0.0, 1.0 / 0.75])
    drop_frac = float((y.value == 0).mean())
    assert abs(drop_frac - 0.25) < 0.01
    # preserves scale in expectation
    assert abs(y.value.mean() - 1.0) < 0.01


def test_dropout_survivor_fraction_tight_bound():
    tape = ad.Tape()
    v = wrap(tape, x=np.ones((1000, 1000)))
    y = nn.dropout(v["x"], 0.5, Rng(99), True)
    survive = float((y.value != 0).mean())
    assert abs(survive - 0.5) < 0.002


def test_dropout_backward_uses_same_mask():
    tape = ad.Tape()
    v = wrap(tape, x=np.ones((10, 10)))
    y = nn.dropout(v["x"], 0.5, Rng(3), True)
    g = tape.gradients(ad.vsum(y), {"x": v["x"]})["x"]
    np.testing.assert_array_equal(g != 0, y.value != 0)


def test_dropout_seeded_reproducibility():
    x = np.ones((6, 6))

    def run():
        tape = ad.Tape()
        return nn.dropout(wrap(tape, x=x)["x"], 0.5, Rng(42), True).value

    assert np.array_equal(run(), run())


def test_dropout_rejects_bad_rate():
    tape = ad.Tape()
    v = wrap(tape, x=np.ones(3))
    with pytest.raises(ValueError, match="rate"):
        nn.dropout(v["x"], 1.0, Rng(0), True)


# -- loss, accuracy, optimizer -----------------------------------------------------


def test_softmax_xent_uniform_logits_frozen():
    tape = ad.Tape()
    v = wrap(tape, z=np.zeros((4, 10)))
    loss = nn.softmax_xent(v["z"], np.array([0, 3, 7, 9]))
    np.testing.assert_allclose(float(loss.value), 2.302585092994046, rtol=1e-12)


def test_softmax_xent_gradient_is_probs_minus_onehot():
    tape = ad.Tape()
    z = np.array([[2.0, 0.0, -1.0]])
    v = wrap(tape, z=z)
    loss = nn.softmax_xent(v["z"], np.array([1]))
    g = tape.gradients(loss, {"z": v["z"]})["z"]
    e = np.exp(z[0] - z[0].max())
    p = e / e.sum()
    p[1] -= 1.0
    np.testing.assert_allclose(g[0], p, rtol=1e-12)


def test_softmax_xent_gradcheck():
    rng = np.random.default_rng(13)
    labels = np.array([0, 2, 1])

    def fn(tape, v):
        return nn.softmax_xent(v["z"], labels)

    assert ad.gradcheck(fn, {"z": rng.standard_normal((3, 4))},
                        max_coords=12) < 1e-6


def test_softmax_xent_is_stable_for_huge_logits():
    tape = ad.Tape()
    v = wrap(tape, z=np.array([[1000.0, 0.0], [0.0, 1000.0]]))
    loss = nn.softmax_xent(v["z"], np.array([0, 1]))
    assert np.isfinite(float(loss.value))
    np.testing.assert_allclose(float(loss.value), 0.0, atol=1e-12)


def test_softmax_xent_rejects_bad_labels():
    tape = ad.Tape()
    v = wrap(tape, z=np.zeros((2, 3)))
    with pytest.raises(ValueError, match="range"):
        nn.softmax_xent(v["z"], np.array([0, 3]))
    with pytest.raises(ValueError, match="batch"):
        nn.softmax_xent(v["z"], np.array([0]))


def test_accuracy():
    logits = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]])
    assert nn.accuracy(logits, np.array([0, 1, 1, 1])) == 0.75


def test_adam_first_step_moves_by_learning_rate():
    opt = nn.Adam(lr=1e-3)
    params = {"w": np.array([1.0])}
    grads = {"w": np.array([0.5])}
    new = opt.step(params, grads)
    # bias-corrected first step is lr * g / (|g| + eps)
    np.testing.assert_allclose(new["w"], 1.0 - 1e-3, rtol=1e-7)
    assert opt.t == 1


def test_adam_zero_gradient_on_fresh_state_is_a_no_op():
    opt = nn.Adam(lr=0.5)
    params = {"w": np.array([2.0])}
    new = opt.step(params, {"w": np.array([0.0])})
    np.testing.assert_array_equal(new["w"], params["w"])


def test_adam_momentum_decays_under_zero_gradient():
    opt = nn.Adam(lr=0.5)
    params = {"w": np.array([2.0])}
    p1 = opt.step(params, {"w": np.array([1.0])})
    m_before = opt.m["w"].copy()
    opt.step(p1, {"w": np.array([0.0])})
    np.testing.assert_allclose(opt.m["w"], 0.9 * m_before)


def test_adam_converges_on_quadratic():
    opt = nn.Adam(lr=0.1)
    params = {"w": np.array([5.0, -3.0])}
    target = np.array([1.0, 2.0])
    for _ in range(300):
        grads = {"w": 2.0 * (params["w"] - target)}
        params = opt.step(params, grads)
    np.testing.assert_allclose(params["w"], target, atol=1e-3)


def test_adam_state_roundtrip():
    opt = nn.Adam(lr=0.01)
    params = {"w": np.array([2.0])}
    for _ in range(3):
        params = opt.step(params, {"w": params["w"] * 0.1})
    snap = opt.state_dict()
    after_snap = opt.step(params, {"w": params["w"] * 0.1})

    restored = nn.Adam(lr=0.01)
    restored.load_state_dict(snap)
    replayed = restored.step(params, {"w": params["w"] * 0.1})
    np.testing.assert_array_equal(after_snap["w"], replayed["w"])


def test_adam_rejects_name_mismatch_and_nonfinite():
    opt = nn.Adam()
    with pytest.raises(ValueError, match="mismatch"):
        opt.step({"a": np.zeros(1)}, {"b": np.zeros(1)})
    with pytest.raises(ValueError, match="non-finite gradient for 'a'"):
        opt.step({"a": np.zeros(1)}, {"a": np.array([np.nan])})


def test_linear_with_bias_gradcheck():
    rng = np.random.default_rng(17)
    leaves = {"x": rng.standard_normal((3, 4)),
              "w": rng.standard_normal((4, 2)),
              "b": rng.standard_normal(2)}

    def fn(tape, v):
        y = nn.linear(v["x"], v["w"], v["b"])
        return ad.vsum(ad.mul(y, y))

    assert ad.gradcheck(fn, leaves, max_coords=12) < 1e-6
