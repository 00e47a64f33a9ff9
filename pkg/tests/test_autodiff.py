"""Tape mechanics and gradients checked against central differences."""

import numpy as np
import pytest

from tnlayers import autodiff as ad
from tnlayers.init import Rng, init_gaussian_fanin
from tnlayers.layers import LayerSpec, build_layer, init_graph


def test_leaf_and_record_roundtrip():
    tape = ad.Tape()
    x = tape.leaf(np.array([1.0, 2.0]), name="x")
    assert x.value.tolist() == [1.0, 2.0]
    assert x.shape == (2,)
    assert "x" in repr(x)


def test_matmul_and_add_hand_checked():
    tape = ad.Tape()
    a = tape.leaf(np.array([[1.0, 2.0], [3.0, 4.0]]), name="a")
    b = tape.leaf(np.array([[5.0], [6.0]]), name="b")
    y = ad.matmul(a, b)
    loss = ad.vsum(y)
    assert loss.value == 17.0 + 39.0
    g = tape.gradients(loss, {"a": a, "b": b})
    # d loss / d a = ones(2,1) @ b.T, d loss / d b = a.T @ ones(2,1)
    np.testing.assert_array_equal(g["a"], np.array([[5.0, 6.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(g["b"], np.array([[4.0], [6.0]]))


def test_reuse_accumulates():
    tape = ad.Tape()
    a = tape.leaf(np.array([3.0, -2.0]), name="a")
    loss = ad.vsum(ad.mul(a, a))
    g = tape.gradients(loss, {"a": a})
    np.testing.assert_array_equal(g["a"], np.array([6.0, -4.0]))


def test_untouched_trainable_leaf_gets_zeros():
    tape = ad.Tape()
    a = tape.leaf(np.array([1.0]), name="a")
    b = tape.leaf(np.array([[2.0, 3.0]]), name="b")
    loss = ad.vsum(a)
    g = tape.gradients(loss, {"a": a, "b": b})
    np.testing.assert_array_equal(g["b"], np.zeros((1, 2)))


def test_lrelu_slopes_and_boundary():
    tape = ad.Tape()
    x = tape.leaf(np.array([-2.0, 0.0, 3.0]), name="x")
    y = ad.lrelu(x, leak=0.2)
    np.testing.assert_allclose(y.value, [-0.4, 0.0, 3.0])
    g = tape.gradients(ad.vsum(y), {"x": x})
    # zero sits on the slope-1 branch
    np.testing.assert_array_equal(g["x"], np.array([0.2, 1.0, 1.0]))


def test_broadcast_add_reduces_gradient():
    tape = ad.Tape()
    a = tape.leaf(np.zeros((3, 4)), name="a")
    bias = tape.leaf(np.zeros(4), name="bias")
    g = tape.gradients(ad.vsum(ad.add(a, bias)), {"a": a, "bias": bias})
    np.testing.assert_array_equal(g["bias"], np.full(4, 3.0))
    np.testing.assert_array_equal(g["a"], np.ones((3, 4)))


def test_backward_requires_scalar_root_or_seed():
    tape = ad.Tape()
    a = tape.leaf(np.ones((2, 2)), name="a")
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(a)
    g = tape.backward(a, seed=np.ones((2, 2)))
    assert a.idx in g


def test_cross_tape_parents_rejected():
    t1, t2 = ad.Tape(), ad.Tape()
    a = t1.leaf(np.ones(2))
    b = t2.leaf(np.ones(2))
    with pytest.raises(ValueError, match="different tape"):
        ad.add(a, b)
    with pytest.raises(ValueError, match="different tape"):
        t2.backward(a, seed=np.ones(2))


def test_replay_is_bit_identical():
    def run():
        tape = ad.Tape()
        rng = np.random.default_rng(0)
        x = tape.leaf(rng.standard_normal((4, 8)), name="x")
        w = tape.leaf(rng.standard_normal((8, 3)), name="w")
        loss = ad.vmean(ad.lrelu(ad.matmul(x, w)))
        return loss.value.copy(), tape.gradients(loss, {"x": x, "w": w})

    l1, g1 = run()
    l2, g2 = run()
    assert l1.tobytes() == l2.tobytes()
    for k in g1:
        assert g1[k].tobytes() == g2[k].tobytes()


# -- gradcheck sweeps ------------------------------------------------------------


def test_gradcheck_validates_eps():
    with pytest.raises(ValueError, match="eps"):
        ad.gradcheck(lambda t, v: ad.vsum(v["a"]), {"a": np.ones(2)}, eps=1.0)


def test_gradcheck_elementwise_chain():
    rng = np.random.default_rng(1)
    leaves = {"x": rng.standard_normal((3, 5)) + 3.0,  # keep off the kink
              "y": rng.standard_normal((3, 5)),
              "b": rng.standard_normal(5)}

    def fn(tape, v):
        z = ad.mul(ad.add(v["x"], v["b"]), v["y"])
        return ad.vmean(ad.lrelu(ad.scale(z, 1.7), leak=0.2))

    assert ad.gradcheck(fn, leaves, max_coords=15) < 1e-6


def test_gradcheck_matmul_reshape_permute():
    rng = np.random.default_rng(2)
    leaves = {"a": rng.standard_normal((4, 6)), "b": rng.standard_normal((6, 3))}

    def fn(tape, v):
        y = ad.matmul(v["a"], v["b"])           # (4, 3)
        y = ad.permute(ad.reshape(y, (2, 2, 3)), (2, 0, 1))
        return ad.vsum(ad.mul(y, y))

    assert ad.gradcheck(fn, leaves, max_coords=20) < 1e-6


CONTRACT_CASES = [
    ((3, 4), (1,), (4, 5), (0,)),           # plain matmul
    ((3, 4), (0,), (3, 5), (0,)),           # contract leading axes
    ((2, 3, 4), (0, 2), (4, 2, 5), (1, 0)),  # swapped, non-adjacent pairs
    ((2, 2, 2, 2), (1, 3), (2, 5, 2), (0, 2)),
    ((4,), (0,), (4, 3), (0,)),             # vector against matrix
    ((2, 3), (0, 1), (3, 2), (1, 0)),       # full contraction to a scalar
]


@pytest.mark.parametrize("a_shape,a_axes,b_shape,b_axes", CONTRACT_CASES)
def test_gradcheck_contract(a_shape, a_axes, b_shape, b_axes):
    rng = np.random.default_rng(hash((a_shape, b_shape)) % 2 ** 31)
    leaves = {"a": rng.standard_normal(a_shape),
              "b": rng.standard_normal(b_shape)}

    def fn(tape, v):
        y = ad.contract(v["a"], a_axes, v["b"], b_axes)
        if y.value.ndim:
            y = ad.vsum(ad.mul(y, y))
        return y

    assert ad.gradcheck(fn, leaves, max_coords=12) < 1e-6


def test_gradcheck_through_factorized_layer():
    # differentiate a full tensor-network walk w.r.t. every node tensor
    g = init_graph(build_layer(LayerSpec("mera", 4)), Rng(6), scheme="gaussian")
    rng = np.random.default_rng(3)
    leaves = {f"n{n.node_id}": np.asarray(n.tensor) for n in g.nodes}
    leaves["x"] = rng.standard_normal((2, 16))
    in_bind = {leg: m for m, leg in enumerate(g.input_legs)}
    edge_by_dst = {dst: src for src, dst in g.edges}

    def fn(tape, v):
        d, n = g.mode_dim, len(g.input_legs)
        state = ad.reshape(v["x"], (2,) + (d,) * n)
        keys = [("in", m) for m in range(n)]
        for node in g.nodes:
            srcs = []
            for ax in g.in_axes(node.node_id):
                leg = (node.node_id, ax)
                srcs.append(("in", in_bind[leg]) if leg in in_bind
                            else edge_by_dst[leg])
            axes = [1 + keys.index(k) for k in srcs]
            state = ad.contract(state, axes, v[f"n{node.node_id}"],
                                g.in_axes(node.node_id))
            keys = [k for k in keys if k not in srcs]
            keys += [(node.node_id, ax) for ax in g.out_axes(node.node_id)]
        return ad.vsum(ad.mul(state, state))

    assert ad.gradcheck(fn, leaves, max_coords=6) < 1e-6


def test_gaussian_leaf_helper_matches_tape_dtype():
    w = init_gaussian_fanin((4, 4), 16, Rng(1), dtype=np.float64)
    tape = ad.Tape()
    v = tape.leaf(w, name="w")
    assert v.dtype == np.float64
