"""Unit tests for the tensor engine and its gradients."""

import numpy as np
import pytest

from srwm import autodiff as ad
from srwm.autodiff import NonFiniteError, ShapeError, Tape, Tensor


def _grad(build, leaves):
    """Run build() under a tape and return gradients for the given leaves."""
    with Tape() as tape:
        for leaf in leaves:
            tape.watch(leaf)
        loss = build()
        grads = tape.backward(loss)
    return [grads[leaf.node_id].data for leaf in leaves]


def test_softmax_symmetry():
    out = ad.softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], rtol=0, atol=1e-15)


def test_sigmoid_at_zero():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5


def test_outer_hand_computed():
    out = ad.outer(Tensor([1.0, 2.0]), Tensor([3.0, 4.0, 5.0]))
    np.testing.assert_array_equal(out.data, [[3.0, 4.0, 5.0], [6.0, 8.0, 10.0]])


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = Tensor(rng.normal(size=(5, 7)) * 10.0)
        sums = ad.softmax(x).data.sum(axis=-1)
        np.testing.assert_allclose(sums, np.ones(5), rtol=0, atol=1e-12)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 6))
    base = ad.softmax(Tensor(x)).data
    shifted = ad.softmax(Tensor(x + 123.456)).data
    np.testing.assert_allclose(shifted, base, rtol=0, atol=1e-12)


def test_sigmoid_open_interval():
    out = ad.sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
    assert np.all(out > 0.0) and np.all(out < 1.0)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    assert "(2, 3)" in str(err.value) and "(3, 2)" in str(err.value)


def test_non_finite_output_raises():
    with pytest.raises(NonFiniteError):
        ad.log(Tensor([0.0, 1.0]))
    with pytest.raises(NonFiniteError):
        ad.exp(Tensor([1000.0]))


def test_backward_quadratic():
    w = Tensor([1.0, 2.0])
    (g,) = _grad(lambda: ad.sum_all(ad.mul(w, w)), [w])
    np.testing.assert_array_equal(g, [2.0, 4.0])


def test_backward_with_stop_gradient_factor():
    w = Tensor([1.0, 2.0])
    (g,) = _grad(lambda: ad.sum_all(ad.mul(ad.stop_gradient(w), w)), [w])
    np.testing.assert_array_equal(g, [1.0, 2.0])


def test_backward_requires_scalar_loss():
    w = Tensor([1.0, 2.0])
    with Tape() as tape:
        tape.watch(w)
        out = ad.mul(w, w)
        with pytest.raises(ShapeError):
            tape.backward(out)


def test_unreachable_leaf_gets_zero_gradient():
    w = Tensor([1.0, 2.0])
    other = Tensor([5.0, 5.0])
    with Tape() as tape:
        tape.watch(w)
        tape.watch(other)
        loss = ad.sum_all(ad.mul(w, w))
        grads = tape.backward(loss)
    np.testing.assert_array_equal(grads[other.node_id].data, [0.0, 0.0])


def test_stop_gradient_is_identity_and_blocks_grads():
    x = Tensor([1.0, 2.0, 3.0])
    assert np.array_equal(ad.stop_gradient(x).data, x.data)
    with Tape() as tape:
        tape.watch(x)
        y = ad.mul(x, x)
        loss = ad.sum_all(ad.stop_gradient(y))
        # keep the tape nonempty on a path to the loss
        loss = ad.add(loss, ad.sum_all(ad.scale(x, 0.0)))
        grads = tape.backward(loss)
    assert np.all(grads[x.node_id].data == 0.0)


def test_stop_gradient_distillation_matches_detached_teacher():
    # d/dx CE(sg(p(x)), p(x)) must equal the gradient with the teacher held
    # as a constant copy of p(x).
    logits = Tensor(np.array([0.3, -0.7, 1.1]))

    def ce(q, p):
        return ad.neg(ad.sum_all(ad.mul(q, ad.log(ad.clamp_min(p, 1e-30)))))

    with Tape() as tape:
        tape.watch(logits)
        p = ad.softmax(logits)
        loss = ce(ad.stop_gradient(p), p)
        g_sg = tape.backward(loss)[logits.node_id].data

    frozen = ad.softmax(Tensor(logits.data)).data
    logits2 = Tensor(logits.data.copy())
    with Tape() as tape:
        tape.watch(logits2)
        p = ad.softmax(logits2)
        loss = ce(Tensor(frozen), p)
        g_detached = tape.backward(loss)[logits2.node_id].data

    np.testing.assert_allclose(g_sg, g_detached, rtol=0, atol=1e-15)


def test_finite_diff_quadratic():
    params = {"w": Tensor(np.array([1.3, -0.4]), requires_grad=True)}

    def f(p):
        return ad.sum_all(ad.mul(p["w"], p["w"]))

    assert ad.finite_diff_check(f, params, eps=1e-5) < 1e-8


def test_finite_diff_constant_function():
    params = {"w": Tensor(np.array([1.0, 2.0]), requires_grad=True)}

    def f(p):
        # w enters the graph but the loss does not depend on it
        return ad.sum_all(ad.scale(p["w"], 0.0))

    assert ad.finite_diff_check(f, params, eps=1e-5) == 0.0


def test_random_graph_matches_finite_differences():
    rng = np.random.default_rng(2)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    c = Tensor(rng.normal(size=(3, 2)), requires_grad=True)

    def f(p):
        h = ad.matmul(p["a"], p["b"])
        h = ad.add(h, p["c"])
        return ad.sum_all(ad.mul(ad.sigmoid(h), h))

    err = ad.finite_diff_check(f, {"a": a, "b": b, "c": c}, eps=1e-5)
    assert err < 1e-6


@pytest.mark.parametrize(
    "name",
    [
        "add", "sub", "mul", "neg", "scale", "matmul", "matvec", "outer",
        "slice_last", "slice_axis0", "concat_last", "sum_last", "log", "exp",
        "softmax", "sigmoid", "relu", "softplus", "layer_norm", "clamp_min",
        "add_rowvec", "gather_rows", "repeat_last", "tile_leading", "reshape",
        "copy_tensor",
    ],
)
def test_primitive_gradients_match_finite_differences(name):
    rng = np.random.default_rng(hash(name) % 2**32)

    def rand(shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    m, n = rng.integers(2, 17), rng.integers(2, 17)
    if name == "add":
        params = {"a": rand((m, n)), "b": rand((m, n))}
        build = lambda p: ad.add(p["a"], p["b"])
    elif name == "sub":
        params = {"a": rand((m, n)), "b": rand((m, n))}
        build = lambda p: ad.sub(p["a"], p["b"])
    elif name == "mul":
        params = {"a": rand((m, n)), "b": rand((m, n))}
        build = lambda p: ad.mul(p["a"], p["b"])
    elif name == "neg":
        params = {"a": rand((m, n))}
        build = lambda p: ad.neg(p["a"])
    elif name == "scale":
        params = {"a": rand((m, n))}
        build = lambda p: ad.scale(p["a"], 0.37)
    elif name == "matmul":
        k = rng.integers(2, 17)
        params = {"a": rand((m, k)), "b": rand((k, n))}
        build = lambda p: ad.matmul(p["a"], p["b"])
    elif name == "matvec":
        params = {"a": rand((3, m, n)), "v": rand((3, n))}
        build = lambda p: ad.matvec(p["a"], p["v"])
    elif name == "outer":
        params = {"u": rand((3, m)), "v": rand((3, n))}
        build = lambda p: ad.outer(p["u"], p["v"])
    elif name == "slice_last":
        params = {"a": rand((m, n))}
        build = lambda p: ad.slice_last(p["a"], 1, int(n))
    elif name == "slice_axis0":
        params = {"a": rand((m, n))}
        build = lambda p: ad.slice_axis0(p["a"], 0, int(m) - 1)
    elif name == "concat_last":
        params = {"a": rand((m, n)), "b": rand((m, 3))}
        build = lambda p: ad.concat_last([p["a"], p["b"]])
    elif name == "sum_last":
        params = {"a": rand((m, n))}
        build = lambda p: ad.sum_last(p["a"])
    elif name == "log":
        params = {"a": Tensor(rng.uniform(0.5, 2.0, size=(m, n)), requires_grad=True)}
        build = lambda p: ad.log(p["a"])
    elif name == "exp":
        params = {"a": rand((m, n))}
        build = lambda p: ad.exp(p["a"])
    elif name == "softmax":
        params = {"a": rand((m, n))}
        build = lambda p: ad.softmax(p["a"])
    elif name == "sigmoid":
        params = {"a": rand((m, n))}
        build = lambda p: ad.sigmoid(p["a"])
    elif name == "relu":
        # keep clear of the kink at zero
        data = rng.normal(size=(m, n))
        data[np.abs(data) < 0.05] += 0.1
        params = {"a": Tensor(data, requires_grad=True)}
        build = lambda p: ad.relu(p["a"])
    elif name == "softplus":
        params = {"a": rand((m, n))}
        build = lambda p: ad.softplus(p["a"])
    elif name == "layer_norm":
        params = {"x": rand((m, n)), "g": rand((n,)), "b": rand((n,))}
        build = lambda p: ad.layer_norm(p["x"], p["g"], p["b"])
    elif name == "clamp_min":
        data = rng.normal(size=(m, n))
        data[np.abs(data) < 0.05] += 0.1
        params = {"a": Tensor(data, requires_grad=True)}
        build = lambda p: ad.clamp_min(p["a"], 0.0)
    elif name == "add_rowvec":
        params = {"a": rand((m, n)), "b": rand((n,))}
        build = lambda p: ad.add_rowvec(p["a"], p["b"])
    elif name == "gather_rows":
        idx = rng.integers(0, m, size=7)
        params = {"t": rand((m, n))}
        build = lambda p: ad.gather_rows(p["t"], idx)
    elif name == "repeat_last":
        params = {"a": rand((m, 1))}
        build = lambda p: ad.repeat_last(p["a"], int(n))
    elif name == "tile_leading":
        params = {"a": rand((m, n))}
        build = lambda p: ad.tile_leading(p["a"], 3)
    elif name == "reshape":
        params = {"a": rand((m, n))}
        build = lambda p: ad.reshape(p["a"], (int(n), int(m)))
    elif name == "copy_tensor":
        params = {"a": rand((m, n))}
        build = lambda p: ad.copy_tensor(p["a"])
    else:  # pragma: no cover
        raise AssertionError(name)

    # reduce with a fixed random projection so every output entry matters
    probe = Tensor(rng.normal(size=build(params).shape))

    def scalar_loss(p):
        return ad.sum_all(ad.mul(build(p), probe))

    err = ad.finite_diff_check(scalar_loss, params, eps=1e-5)
    assert err < 1e-6, f"{name}: max rel err {err}"


def test_tape_replay_is_deterministic():
    rng = np.random.default_rng(3)
    a_data = rng.normal(size=(6, 6))
    b_data = rng.normal(size=(6, 6))

    def run():
        a = Tensor(a_data.copy(), requires_grad=True)
        b = Tensor(b_data.copy(), requires_grad=True)
        with Tape() as tape:
            tape.watch(a)
            tape.watch(b)
            h = ad.matmul(a, b)
            h = ad.softmax(h)
            loss = ad.sum_all(ad.mul(h, h))
            grads = tape.backward(loss)
        return loss.data.copy(), grads[a.node_id].data.copy(), grads[b.node_id].data.copy()

    first = run()
    second = run()
    for x, y in zip(first, second):
        assert np.array_equal(x, y)


def test_no_tape_means_no_recording():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    out = ad.mul(a, a)
    assert not out.requires_grad and out.is_leaf


def test_float32_mode_preserves_dtype():
    a = Tensor(np.ones((2, 2)), dtype=np.float32)
    b = Tensor(np.ones((2, 2)), dtype=np.float32)
    assert ad.add(a, b).dtype == np.float32
    assert ad.softmax(a).dtype == np.float32
    assert ad.softplus(a).dtype == np.float32


def test_nested_tape_rejected():
    with Tape():
        with pytest.raises(RuntimeError):
            with Tape():
                pass
