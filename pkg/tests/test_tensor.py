import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import reference as ref
from coforge import ops
from coforge.errors import BackwardError, DegenerateVarianceError, LabelRangeError, ShapeError
from coforge.tensor import Tape, Tensor, backward, no_grad


def grads_of(fn, *arrays):
    """Run fn(*tensors) on a tape and return (loss value, [grads])."""
    with Tape() as tape:
        ts = [Tensor(a, requires_grad=True) for a in arrays]
        loss = fn(*ts)
        tape.backward(loss)
    return float(loss.data), [t.grad for t in ts]


# ---------------------------------------------------------------- conv2d


def test_conv_sum_of_ones():
    out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), 1, 0)
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 5, 7)).astype(np.float32)
    out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("h,k,s,p", [(8, 3, 1, 1), (8, 3, 2, 1), (7, 2, 2, 0), (5, 5, 1, 0), (6, 1, 3, 0)])
def test_conv_output_size(rng, h, k, s, p):
    x = Tensor(rng.standard_normal((1, 2, h, h)))
    w = Tensor(rng.standard_normal((3, 2, k, k)))
    out = ops.conv2d(x, w, None, s, p)
    expect = (h + 2 * p - k) // s + 1
    assert out.shape == (1, 3, expect, expect)
    ref_out = ref.ref_conv2d(x.data.astype(np.float64), w.data.astype(np.float64), None, s, p)
    np.testing.assert_allclose(out.data, ref_out, rtol=1e-5, atol=1e-5)


def test_conv_gradients_match_finite_differences(rng):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32).astype(np.float64)
    w = (rng.standard_normal((4, 3, 3, 3)) / 5).astype(np.float32).astype(np.float64)
    _, (gx, gw) = grads_of(lambda a, b: ops.sum_all(ops.conv2d(a, b, None, 1, 1)), x, w)
    nopattern = np.zeros(0, bool)

    def fn():
        return ref.ref_conv2d(x, w, None, 1, 1).sum(), nopattern

    assert ref.max_rel_error(gx, ref.fd_gradient(fn, x, nopattern)) < 1e-4
    assert ref.max_rel_error(gw, ref.fd_gradient(fn, w, nopattern)) < 1e-4


def test_conv_bias_gradient(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    w = rng.standard_normal((5, 3, 3, 3))
    b = rng.standard_normal(5)
    _, (_, _, gb) = grads_of(lambda a, c, d: ops.sum_all(ops.conv2d(a, c, d, 1, 0)), x, w, b)
    np.testing.assert_allclose(gb, np.full(5, 2 * 2 * 2))


def test_conv_shape_errors_name_axis():
    with pytest.raises(ShapeError) as err:
        ops.conv2d(Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.zeros((4, 2, 3, 3))))
    assert err.value.axis == 1
    with pytest.raises(ShapeError) as err:
        ops.conv2d(Tensor(np.zeros((1, 1, 2, 8))), Tensor(np.zeros((1, 1, 3, 3))))
    assert err.value.axis == 2
    with pytest.raises(ShapeError) as err:
        ops.conv2d(Tensor(np.zeros((1, 1, 8, 2))), Tensor(np.zeros((1, 1, 3, 3))))
    assert err.value.axis == 3
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((1, 1, 8, 8))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)


# ---------------------------------------------------------------- batchnorm


def test_bn_fixed_point(rng):
    x = rng.standard_normal((6, 3, 4, 4))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    x = x.astype(np.float32)
    out = ops.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), None, "train")
    # eps in the denominator shrinks the output by 1/sqrt(1 + eps)
    assert np.abs(out.data - x / np.sqrt(1 + 1e-5)).max() < 1e-5


def test_bn_zero_gamma_gives_beta(rng):
    x = rng.standard_normal((4, 2, 3, 3)) * 5
    beta = np.array([0.25, -1.5], np.float32)
    for mode in ("train", "eval"):
        out = ops.batchnorm2d(Tensor(x), Tensor(np.zeros(2)), Tensor(beta), ops.RunningStats.fresh(2), mode)
        np.testing.assert_array_equal(out.data, np.broadcast_to(beta[None, :, None, None], x.shape))


def test_bn_gradients_match_finite_differences(rng):
    x = rng.standard_normal((4, 2, 3, 3)).astype(np.float32).astype(np.float64)
    gamma = np.array([1.3, 0.7]).astype(np.float32).astype(np.float64)
    beta = np.array([0.1, -0.2]).astype(np.float32).astype(np.float64)
    proj = rng.standard_normal((4, 2, 3, 3))  # make the loss sensitive to every output
    _, (gx, gg, gb) = grads_of(
        lambda a, g, b: ops.sum_all(ops.mul(ops.batchnorm2d(a, g, b, None, "train"), Tensor(proj))), x, gamma, beta
    )
    nopattern = np.zeros(0, bool)

    def fn():
        return (ref.ref_bn_train(x, gamma, beta) * proj).sum(), nopattern

    for arr, g in ((x, gx), (gamma, gg), (beta, gb)):
        assert ref.max_rel_error(g, ref.fd_gradient(fn, arr, nopattern)) < 1e-4


def test_bn_running_stats_update(rng):
    x = rng.standard_normal((4, 2, 3, 3)).astype(np.float32) * 2 + 1
    state = ops.RunningStats.fresh(2)
    ops.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, "train")
    n = 4 * 3 * 3
    batch_mean = x.mean(axis=(0, 2, 3))
    batch_var = x.var(axis=(0, 2, 3)) * n / (n - 1)
    np.testing.assert_allclose(state.mean, 0.1 * batch_mean, rtol=1e-5)
    np.testing.assert_allclose(state.var, 0.9 + 0.1 * batch_var, rtol=1e-5)
    frozen = state.copy()
    ops.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, "train", update_stats=False)
    np.testing.assert_array_equal(state.mean, frozen.mean)


def test_bn_eval_uses_running_stats(rng):
    x = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
    state = ops.RunningStats(np.array([1.0, -1.0], np.float32), np.array([4.0, 0.25], np.float32))
    out = ops.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, "eval")
    expect = (x - state.mean[None, :, None, None]) / np.sqrt(state.var[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out.data, expect, rtol=1e-6)


def test_bn_degenerate_batch():
    with pytest.raises(DegenerateVarianceError):
        ops.batchnorm2d(Tensor(np.zeros((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)), None, "train")


# ---------------------------------------------------------------- relu / linear / misc


def test_relu_values_and_zero_subgradient():
    _, (g,) = grads_of(lambda a: ops.sum_all(ops.relu(a)), np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(ops.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    np.testing.assert_array_equal(g, [0, 0, 1])


def test_linear_identity(rng):
    x = rng.standard_normal((3, 4)).astype(np.float32)
    out = ops.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, x)


def test_relu_linear_gradient(rng):
    x = rng.standard_normal((3, 5)).astype(np.float32).astype(np.float64)
    w = rng.standard_normal((4, 5)).astype(np.float32).astype(np.float64)
    b = rng.standard_normal(4).astype(np.float32).astype(np.float64)
    proj = rng.standard_normal((3, 4))
    _, (gx, gw, gb) = grads_of(lambda a, c, d: ops.sum_all(ops.mul(ops.relu(ops.linear(a, c, d)), Tensor(proj))), x, w, b)

    def fn():
        z = x @ w.T + b
        return (np.maximum(z, 0) * proj).sum(), (z > 0).ravel()

    _, pattern = fn()
    for arr, g in ((x, gx), (w, gw), (b, gb)):
        assert ref.max_rel_error(g, ref.fd_gradient(fn, arr, pattern)) < 1e-4


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        ops.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_add_shape_error():
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


def test_global_avg_pool_and_flatten_grads(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    _, (g,) = grads_of(lambda a: ops.sum_all(ops.global_avg_pool(a)), x)
    np.testing.assert_allclose(g, np.full(x.shape, 1 / 16))
    _, (g,) = grads_of(lambda a: ops.sum_all(ops.flatten(a)), x)
    np.testing.assert_array_equal(g, np.ones_like(x))


# ---------------------------------------------------------------- cross entropy


def test_ce_uniform_logits():
    loss = ops.cross_entropy(Tensor(np.zeros((4, 10))), np.arange(4))
    assert abs(float(loss.data) - np.log(10)) < 1e-6


def test_ce_saturation():
    logits = np.zeros((2, 10), np.float32)
    logits[[0, 1], [3, 7]] = 1000
    assert float(ops.cross_entropy(Tensor(logits), np.array([3, 7])).data) < 1e-6


def test_ce_gradient(rng):
    logits = rng.standard_normal((5, 10)).astype(np.float32).astype(np.float64)
    labels = rng.integers(0, 10, 5)
    _, (g,) = grads_of(lambda z: ops.cross_entropy(z, labels), logits)
    onehot = np.eye(10)[labels]
    np.testing.assert_allclose(g, (ops.softmax(logits) - onehot) / 5, atol=1e-7)
    nopattern = np.zeros(0, bool)
    fd = ref.fd_gradient(lambda: (ref.ref_ce(logits, labels), nopattern), logits, nopattern)
    assert ref.max_rel_error(g, fd) < 1e-4


def test_ce_label_range():
    with pytest.raises(LabelRangeError):
        ops.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))
    with pytest.raises(LabelRangeError):
        ops.cross_entropy(Tensor(np.zeros((2, 3))), np.array([-1, 0]))


# ---------------------------------------------------------------- tape / backward


def test_backward_sum_gives_ones(rng):
    _, (g,) = grads_of(lambda a: a.sum(), rng.standard_normal((3, 4)))
    np.testing.assert_array_equal(g, np.ones((3, 4)))


def test_backward_zero_times_f(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((2, 3, 3, 3))
    _, (g,) = grads_of(lambda a: ops.scale(ops.sum_all(ops.relu(ops.conv2d(a, Tensor(w)))), 0.0), x)
    np.testing.assert_array_equal(g, np.zeros_like(x))


def test_backward_non_scalar():
    with Tape() as tape:
        x = Tensor(np.ones(3), requires_grad=True)
        y = x * 2.0
        with pytest.raises(BackwardError):
            tape.backward(y)


def test_double_backward_rejected():
    with Tape() as tape:
        x = Tensor(np.ones(3), requires_grad=True)
        loss = (x * 2.0).sum()
        tape.backward(loss)
        with pytest.raises(BackwardError):
            tape.backward(loss)
    tape.reset()
    with tape:
        loss = (x * 3.0).sum()
        x.grad = None
        tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [3, 3, 3])


def test_loss_off_tape_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = (x * 2.0).sum()  # no open tape: nothing recorded
    with pytest.raises(BackwardError):
        backward(loss)


def test_no_grad_inside_tape():
    with Tape() as tape:
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = (x * 2.0).sum()
        assert y.is_leaf and not y.requires_grad
        assert len(tape) == 0


def test_intermediate_grads_populated(rng):
    with Tape() as tape:
        x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        h = ops.relu(x)
        loss = ops.sum_all(h)
        tape.backward(loss)
    assert h.grad is not None and x.grad is not None and loss.grad is not None


def test_backward_visits_reverse_creation_order():
    seen = []
    with Tape() as tape:
        x = Tensor(np.ones(2), requires_grad=True)
        a = x * 2.0
        b = a * 3.0
        loss = b.sum()
        for node in tape.nodes:
            fn = node.backward

            def wrapped(g, fn=fn, op=node.output.tape_id):
                seen.append(op)
                return fn(g)

            node.backward = wrapped
        tape.backward(loss)
    assert seen == sorted(seen, reverse=True)
    assert len(seen) == len(set(seen)) == 3


def test_full_small_cnn_gradients(tiny_model, rng):
    """Every parameter and input gradient of SmallCNN + CE vs float64 finite differences."""
    x = rng.uniform(0, 1, (2, 3, 8, 8)).astype(np.float32).astype(np.float64)
    y = np.array([1, 3])
    model = tiny_model.train()
    model.zero_grad()
    with model.frozen_stats(), Tape() as tape:
        xt = Tensor(x, requires_grad=True)
        tape.backward(ops.cross_entropy(model(xt), y))
    graph, names = ref.model_to_graph(model)
    _, pattern = ref.ref_forward(x, y, graph)

    def fn():
        return ref.ref_forward(x, y, graph)

    params = model.params
    assert ref.max_rel_error(xt.grad, ref.fd_gradient(fn, x, pattern)) < 1e-4
    for i, key in ref.param_slots(graph):
        name = f"{names[i]}.{ref.REF_KEY[key]}"
        fd = ref.fd_gradient(fn, graph[i][key], pattern)
        assert ref.max_rel_error(params[name].grad, fd) < 1e-4, name


@pytest.mark.parametrize("seed", range(10))
def test_random_graphs_gradient_oracle(seed):
    x, labels, layers = ref.random_graph(np.random.default_rng(1000 + seed))
    worst, _ = ref.graph_check(x, labels, layers)
    assert worst < 1e-4


def test_determinism_bitwise(tiny_model, rng):
    x = rng.uniform(0, 1, (4, 3, 8, 8)).astype(np.float32)
    y = np.array([0, 1, 2, 3])

    def run():
        tiny_model.zero_grad()
        with tiny_model.frozen_stats(), Tape() as tape:
            xt = Tensor(x, requires_grad=True)
            logits = tiny_model(xt)
            tape.backward(ops.cross_entropy(logits, y))
        return logits.data.copy(), xt.grad.copy(), {k: t.grad.copy() for k, t in tiny_model.params.items()}

    a, b = run(), run()
    assert a[0].tobytes() == b[0].tobytes()
    assert a[1].tobytes() == b[1].tobytes()
    assert all(a[2][k].tobytes() == b[2][k].tobytes() for k in a[2])


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
def test_backward_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    lin = rng.standard_normal((4, 3))
    y1, y2 = rng.integers(0, 4, 3), rng.integers(0, 4, 3)

    def losses(xt):
        h = ops.flatten(ops.global_avg_pool(ops.relu(ops.conv2d(xt, Tensor(w), None, 1, 1))))
        logits = ops.linear(h, Tensor(lin))
        return ops.cross_entropy(logits, y1), ops.cross_entropy(logits, y2)

    def grad(combine):
        with Tape() as tape:
            xt = Tensor(x, requires_grad=True)
            tape.backward(combine(*losses(xt)))
        return xt.grad.astype(np.float64)

    g1 = grad(lambda l1, l2: l1)
    g2 = grad(lambda l1, l2: l2)
    gc = grad(lambda l1, l2: ops.scale(l1, a) + ops.scale(l2, b))
    np.testing.assert_allclose(gc, a * g1 + b * g2, atol=1e-6)
