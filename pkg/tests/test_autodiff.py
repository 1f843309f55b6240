import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hemofed.autodiff import (
    Graph,
    Uniform,
    gradient_check,
    sigmoid,
    tensor_create,
    value_and_grad,
)
from hemofed.errors import ContractError, DomainError, ShapeError


def run(build, *arrays):
    g = Graph()
    handles = [g.param(a) for a in arrays]
    out = build(g, *handles)
    return g, handles, out


def numeric_grad(f, x, eps=1e-6):
    x = x.astype(np.float64).copy()
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def check_op_grads(build, arrays, tol=1e-6, seed=0):
    """Compare backward() of sum(out * R) against central differences for every input."""
    rng = np.random.default_rng(seed)
    g, handles, out = run(build, *arrays)
    weights = rng.standard_normal(out.shape)

    def scalar(*vals):
        g2 = Graph()
        hs = [g2.param(v) for v in vals]
        return float(np.sum(build(g2, *hs).value * weights))

    loss = g.sum(g.mul(out, g.const(weights)))
    grads = g.backward(loss)
    for k, h in enumerate(handles):
        def f(x, k=k):
            vals = list(arrays)
            vals[k] = x
            return scalar(*vals)
        num = numeric_grad(f, arrays[k])
        np.testing.assert_allclose(grads[h.id], num, rtol=tol, atol=tol)


# tensor_create

def test_create_zero_and_constant_fill():
    np.testing.assert_array_equal(tensor_create([2, 2], 0), [[0, 0], [0, 0]])
    np.testing.assert_array_equal(tensor_create([3], 1), [1, 1, 1])
    assert tensor_create([3], 1).dtype == np.float64


def test_create_seeded_uniform_is_reproducible():
    a = tensor_create([4], Uniform(0.5, seed=7))
    b = tensor_create([4], Uniform(0.5, seed=7))
    assert a.tobytes() == b.tobytes()
    assert np.all(np.abs(a) <= 0.5)
    assert not np.array_equal(a, tensor_create([4], Uniform(0.5, seed=8)))


@pytest.mark.parametrize("shape", [[], [0], [2, -1], [3, 0, 2]])
def test_create_rejects_bad_shapes(shape):
    with pytest.raises(ShapeError):
        tensor_create(shape, 0.0)


# matmul

def triple_loop_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def test_matmul_hand_cases():
    _, _, out = run(lambda g, a, b: g.matmul(a, b), np.eye(2), np.array([[1.0, 2], [3, 4]]))
    np.testing.assert_array_equal(out.value, [[1, 2], [3, 4]])
    _, _, out = run(lambda g, a, b: a @ b, np.array([[1.0, 2]]), np.array([[3.0], [4]]))
    np.testing.assert_array_equal(out.value, [[11]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
    _, _, out = run(lambda g, x, y: x @ y, a, b)
    np.testing.assert_allclose(out.value, triple_loop_matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        run(lambda g, a, b: a @ b, np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_gradient():
    rng = np.random.default_rng(4)
    check_op_grads(lambda g, a, b: a @ b, [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))])


# conv2d

def conv_oracle(x, k, stride, pad):
    cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.zeros((cin, h + 2 * pad, w + 2 * pad))
    xp[:, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                s = 0.0
                for c in range(cin):
                    for u in range(kh):
                        for v in range(kw):
                            s += xp[c, i * stride + u, j * stride + v] * k[o, c, u, v]
                out[o, i, j] = s
    return out


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((1, 4, 5))
    _, _, out = run(lambda g, a, k: g.conv2d(a, k), x, np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(out.value, x)


def test_conv_full_overlap_sum():
    _, _, out = run(lambda g, a, k: g.conv2d(a, k), np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)))
    assert out.shape == (1, 1, 1)
    assert out.value[0, 0, 0] == 9.0


@pytest.mark.parametrize("stride,pad", [(1, 1), (1, 0), (2, 1), (2, 0)])
def test_conv_matches_nested_loops(stride, pad):
    rng = np.random.default_rng(5)
    x, k = rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
    _, _, out = run(lambda g, a, kk: g.conv2d(a, kk, stride=stride, pad=pad), x, k)
    np.testing.assert_allclose(out.value, conv_oracle(x, k, stride, pad), rtol=0, atol=1e-12)


def test_conv_errors():
    with pytest.raises(ShapeError):
        run(lambda g, a, k: g.conv2d(a, k), np.ones((1, 2, 2)), np.ones((1, 1, 3, 3)))
    with pytest.raises(ShapeError):
        run(lambda g, a, k: g.conv2d(a, k), np.ones((2, 4, 4)), np.ones((1, 1, 3, 3)))


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (2, 0)])
def test_conv_gradient(stride, pad):
    rng = np.random.default_rng(6)
    arrays = [rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)]
    check_op_grads(lambda g, a, k, b: g.conv2d(a, k, stride=stride, pad=pad, bias=b), arrays)


@settings(max_examples=40, deadline=None)
@given(cin=st.integers(1, 3), cout=st.integers(1, 3), h=st.integers(1, 7), w=st.integers(1, 7),
       kh=st.integers(1, 3), kw=st.integers(1, 3), stride=st.integers(1, 3), pad=st.integers(0, 2))
def test_conv_output_shape_formula(cin, cout, h, w, kh, kw, stride, pad):
    x, k = np.zeros((cin, h, w)), np.zeros((cout, cin, kh, kw))
    if kh > h + 2 * pad or kw > w + 2 * pad:
        with pytest.raises(ShapeError):
            run(lambda g, a, kk: g.conv2d(a, kk, stride, pad), x, k)
        return
    _, _, out = run(lambda g, a, kk: g.conv2d(a, kk, stride, pad), x, k)
    assert out.shape == (cout, (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1)


# elementwise

def test_elementwise_fixed_points():
    _, _, s = run(lambda g, a: g.sigmoid(a), np.array([0.0]))
    _, _, t = run(lambda g, a: g.tanh(a), np.array([0.0]))
    _, _, r = run(lambda g, a: g.relu(a), np.array([-1.0, 2.0]))
    assert s.value[0] == 0.5
    assert t.value[0] == 0.0
    np.testing.assert_array_equal(r.value, [0.0, 2.0])


def test_sigmoid_is_stable_at_extremes():
    out = sigmoid(np.array([-800.0, 800.0]))
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, [0.0, 1.0])


@pytest.mark.parametrize("kind", ["add", "sub", "mul"])
def test_binary_shape_mismatch(kind):
    with pytest.raises(ShapeError):
        run(lambda g, a, b: getattr(g, kind)(a, b), np.ones(2), np.ones(3))


@pytest.mark.parametrize("build", [
    lambda g, a, b: g.add(a, b),
    lambda g, a, b: g.sub(a, b),
    lambda g, a, b: g.mul(a, b),
    lambda g, a, b: g.scale(g.sigmoid(a), -1.7) + g.tanh(b),
    lambda g, a, b: g.relu(a) * b,
])
def test_elementwise_gradients(build):
    rng = np.random.default_rng(7)
    a = rng.standard_normal((3, 4))
    a[np.abs(a) < 0.05] = 0.3  # keep away from the relu kink
    check_op_grads(build, [a, rng.standard_normal((3, 4))])


# structural ops

def test_concat_channels():
    a, b = np.ones((1, 2, 2)), np.full((2, 2, 2), 2.0)
    _, _, single = run(lambda g, x: g.concat_channels([x]), a)
    np.testing.assert_array_equal(single.value, a)
    _, _, out = run(lambda g, x, y: g.concat_channels([x, y]), a, b)
    assert out.shape == (3, 2, 2)
    np.testing.assert_array_equal(out.value[0], 1.0)
    np.testing.assert_array_equal(out.value[1:], 2.0)
    with pytest.raises(ShapeError):
        run(lambda g, x, y: g.concat_channels([x, y]), a, np.ones((1, 3, 2)))


def test_concat_gradient_splits_to_operands():
    rng = np.random.default_rng(8)
    check_op_grads(lambda g, x, y, z: g.concat_channels([x, y, z]),
                   [rng.standard_normal((1, 2, 3)), rng.standard_normal((2, 2, 3)), rng.standard_normal((3, 2, 3))])


def pool_oracle(x, window):
    c, h, w = x.shape
    out = np.zeros((c, h // window, w // window))
    for ch in range(c):
        for i in range(h // window):
            for j in range(w // window):
                s = 0.0
                for u in range(window):
                    for v in range(window):
                        s += x[ch, i * window + u, j * window + v]
                out[ch, i, j] = s / window ** 2
    return out


def test_pooling():
    _, _, const = run(lambda g, x: g.pool_avg(x, 2), np.full((2, 4, 4), 3.5))
    np.testing.assert_array_equal(const.value, 3.5)
    _, _, hand = run(lambda g, x: g.pool_avg(x, 2), np.array([[[1.0, 2], [3, 4]]]))
    assert hand.value.reshape(-1).tolist() == [2.5]
    x = np.random.default_rng(9).standard_normal((3, 6, 4))
    _, _, out = run(lambda g, a: g.pool_avg(a, 2), x)
    np.testing.assert_allclose(out.value, pool_oracle(x, 2), rtol=0, atol=1e-12)
    _, _, gp = run(lambda g, a: g.global_pool_avg(a), x)
    np.testing.assert_allclose(gp.value, [x[c].sum() / 24 for c in range(3)], rtol=0, atol=1e-12)
    with pytest.raises(ShapeError):
        run(lambda g, a: g.pool_avg(a, 4), x)


def test_pool_gradients():
    rng = np.random.default_rng(10)
    check_op_grads(lambda g, a: g.pool_avg(a, 2), [rng.standard_normal((2, 4, 6))])
    check_op_grads(lambda g, a: g.global_pool_avg(a), [rng.standard_normal((2, 3, 5))])


def test_row_stack_reshape_bias_gradients():
    rng = np.random.default_rng(11)
    check_op_grads(lambda g, a: g.stack([g.row(a, 2), g.row(a, 0), g.row(a, 2)]), [rng.standard_normal((3, 4))])
    check_op_grads(lambda g, a: g.reshape(a, (4, 3)), [rng.standard_normal((3, 4))])
    check_op_grads(lambda g, a, b: g.add_bias(a, b), [rng.standard_normal((3, 4)), rng.standard_normal(4)])


# loss

def naive_bce(z, t):
    p = 1.0 / (1.0 + np.exp(-z))
    return float(np.mean(-(t * np.log(p) + (1 - t) * np.log(1 - p))))


def test_bce_hand_values():
    _, _, out = run(lambda g, z: g.bce_with_logits(z, np.array([1.0])), np.array([0.0]))
    assert out.value == pytest.approx(np.log(2.0), abs=1e-12)
    _, _, sat = run(lambda g, z: g.bce_with_logits(z, np.array([1.0])), np.array([50.0]))
    assert 0.0 <= float(sat.value) < 1e-20
    _, _, neg = run(lambda g, z: g.bce_with_logits(z, np.array([1.0])), np.array([-800.0]))
    assert float(neg.value) == pytest.approx(800.0)


def test_bce_matches_naive_formula():
    rng = np.random.default_rng(12)
    for _ in range(20):
        z = rng.uniform(-10, 10, size=6)
        t = (rng.random(6) < 0.5).astype(float)
        _, _, out = run(lambda g, a: g.bce_with_logits(a, t), z)
        assert abs(float(out.value) - naive_bce(z, t)) <= 1e-9


def test_bce_errors_and_gradient():
    with pytest.raises(DomainError):
        run(lambda g, z: g.bce_with_logits(z, np.array([0.5, 1.0])), np.zeros(2))
    with pytest.raises(ShapeError):
        run(lambda g, z: g.bce_with_logits(z, np.ones(3)), np.zeros(2))
    rng = np.random.default_rng(13)
    t = (rng.random((2, 6)) < 0.5).astype(float)
    check_op_grads(lambda g, z: g.bce_with_logits(z, t), [rng.uniform(-4, 4, (2, 6))])


# backward

def test_backward_basics():
    g = Graph()
    x = g.param(np.array(3.0))
    assert g.backward(x)[x.id] == 1.0
    g = Graph()
    x = g.param(np.array(3.0))
    assert g.backward(x * x)[x.id] == 6.0


def test_backward_accumulates_fan_out():
    g = Graph()
    x = g.param(np.array(2.0))
    y = (x * x) * x + x  # 3x^2 + 1 = 13
    assert g.backward(y)[x.id] == 13.0


def test_backward_requires_scalar_root_and_reports_unused_params():
    g = Graph()
    x = g.param(np.ones(3))
    unused = g.param(np.ones((2, 2)))
    with pytest.raises(ContractError):
        g.backward(x)
    grads = g.backward(g.sum(x))
    np.testing.assert_array_equal(grads[unused.id], np.zeros((2, 2)))


def test_node_ids_are_topological():
    g = Graph()
    a, b = g.param(np.ones((2, 2))), g.param(np.ones((2, 2)))
    g.sum(g.tanh(a @ b) * a)
    for nid, node in enumerate(g.nodes):
        assert all(src < nid for src in node.inputs)


def test_backward_is_linear():
    rng = np.random.default_rng(14)
    x = rng.standard_normal((3, 3))
    f = lambda g, P: g.sum(g.tanh(P["x"] @ P["x"]))
    h = lambda g, P: g.sum(g.sigmoid(P["x"]) * P["x"])
    ca, cb = 1.75, -0.3
    combo = lambda g, P: g.scale(f(g, P), ca) + g.scale(h(g, P), cb)
    _, gf = value_and_grad(f, {"x": x})
    _, gh = value_and_grad(h, {"x": x})
    _, gc = value_and_grad(combo, {"x": x})
    np.testing.assert_allclose(gc["x"], ca * gf["x"] + cb * gh["x"], rtol=0, atol=1e-12)


def test_gradients_are_deterministic():
    rng = np.random.default_rng(15)
    params = {"k": rng.standard_normal((2, 1, 3, 3)), "x": rng.standard_normal((1, 6, 6))}
    f = lambda g, P: g.sum(g.relu(g.conv2d(P["x"], P["k"], pad=1)))
    _, g1 = value_and_grad(f, params)
    _, g2 = value_and_grad(f, params)
    assert all(g1[n].tobytes() == g2[n].tobytes() for n in params)


# gradient_check

def test_gradient_check_linear():
    # multiples of 1/64 keep every partial sum exact; one ulp of a sum near 10
    # would already cost ~1e-10 at eps=1e-5
    rng = np.random.default_rng(16)
    theta = {"a": np.round(rng.uniform(-1, 1, (10, 20)) * 64) / 64}
    assert gradient_check(lambda g, P: g.sum(P["a"]), theta, 1e-5) < 1e-10


def test_gradient_check_quadratic():
    rng = np.random.default_rng(16)
    theta = {"a": rng.uniform(0.5, 1.5, (10, 20)) * rng.choice([-1.0, 1.0], (10, 20))}
    assert gradient_check(lambda g, P: g.sum(P["a"] * P["a"]), theta, 1e-5) < 1e-8


def test_quadratic_gradient_matches_analytic():
    theta = np.random.default_rng(17).standard_normal(30)
    _, grads = value_and_grad(lambda g, P: g.sum(P["a"] * P["a"]), {"a": theta})
    np.testing.assert_allclose(grads["a"], 2 * theta, rtol=0, atol=1e-15)


def test_gradient_check_catches_corruption_and_bad_eps():
    theta = {"a": np.linspace(-1, 1, 10)}
    loss = lambda g, P: g.sum(P["a"] * P["a"])
    corrupt = lambda grads: {n: v * 1.01 for n, v in grads.items()}
    assert gradient_check(loss, theta, 1e-5, grad_hook=corrupt) > 1e-3
    with pytest.raises(DomainError):
        gradient_check(loss, theta, 1e-2)
