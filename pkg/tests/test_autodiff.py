import json
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from avec.autodiff import (MLP, Adam, AdamState, GraphError, NonFiniteError, ShapeError, Tensor, adam_step,
                           clip_grad_norm, concat, forward, grad, load_params, maximum, minimum,
                           orthogonal, params_digest, save_params, where)
from conftest import fd_grad, leaf, rel_err


# -- forward -----------------------------------------------------------------

def test_identity_linear_net():
    net = MLP([1, 1], rng=np.random.default_rng(0))
    net.weights[0].data[:] = 1.0
    net.biases[0].data[:] = 0.0
    assert forward(net, np.array([2.0])).data.tolist() == [2.0]


def test_zero_weight_net_outputs_zero(rng):
    net = MLP([3, 5, 2], rng=rng)
    for p in net.parameters():
        p.data[:] = 0.0
    np.testing.assert_array_equal(forward(net, rng.normal(size=(4, 3))).data, np.zeros((4, 2)))


def test_tanh_net_matches_straight_line_evaluation():
    net = MLP([2, 64, 64, 1], "tanh", np.random.default_rng(7), out_gain=1.0)
    x = np.random.default_rng(8).normal(size=(5, 2))
    W = [w.data for w in net.weights]
    b = [v.data for v in net.biases]
    # loop-free re-evaluation with explicit sums
    h1 = np.tanh(np.einsum("ni,ij->nj", x, W[0]) + b[0])
    h2 = np.tanh(np.einsum("ni,ij->nj", h1, W[1]) + b[1])
    out = np.einsum("ni,ij->nj", h2, W[2]) + b[2]
    np.testing.assert_allclose(forward(net, x).data, out, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(net.predict(x), out, rtol=1e-13, atol=1e-15)


def test_forward_shape_mismatch():
    net = MLP([3, 4, 1])
    with pytest.raises(ShapeError):
        net(np.zeros((2, 2)))


def test_non_finite_forward_is_error():
    with pytest.raises(NonFiniteError):
        leaf([1.0, -1.0]).log()
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


def test_mlp_param_count():
    net = MLP([4, 64, 64, 1])
    assert net.n_params == 4 * 64 + 64 + 64 * 64 + 64 + 64 + 1
    for w, (i, o) in zip(net.weights, zip(net.sizes[:-1], net.sizes[1:])):
        assert w.shape == (i, o)


@pytest.mark.parametrize("shape", [(5, 3), (3, 5), (4, 4)])
def test_orthogonal_init(shape):
    w = orthogonal(shape, 2.0, np.random.default_rng(0))
    k = min(shape)
    gram = w.T @ w if shape[0] >= shape[1] else w @ w.T
    np.testing.assert_allclose(gram, 4.0 * np.eye(k), atol=1e-12)


def test_default_gains():
    relu = MLP([6, 6, 6, 6], "relu", np.random.default_rng(0))
    w0 = relu.weights[0].data
    np.testing.assert_allclose(w0.T @ w0, 2.0 * np.eye(6), atol=1e-12)
    wl = relu.weights[-1].data
    np.testing.assert_allclose(wl.T @ wl, 1e-4 * np.eye(6), atol=1e-15)


# -- backward ----------------------------------------------------------------

def test_linear_gradient():
    w = leaf(2.0, "w")
    (w * 3.0).backward()
    assert w.grad == 3.0


def test_disconnected_parameter_gets_zero():
    w, p = leaf([1.0, 2.0], "w"), leaf([5.0], "p")
    gw, gp = grad((w * w).sum(), [w, p])
    np.testing.assert_array_equal(gp, [0.0])
    np.testing.assert_array_equal(gw, [2.0, 4.0])


def test_backward_twice_is_error():
    w = leaf(1.0)
    loss = w * 2.0
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_backward_needs_scalar():
    with pytest.raises(ShapeError):
        (leaf([1.0, 2.0]) * 2.0).backward()


def test_tanh_sum_matches_finite_differences(rng):
    w = leaf(rng.normal(size=(3,)), "w")
    x = rng.normal(size=(3,))
    loss = lambda: (w * x).tanh().sum()
    (g,) = grad(loss(), [w])
    (n,) = fd_grad(loss, [w])
    assert np.all(np.abs(g - n) <= 1e-5 * np.maximum(np.abs(n), 1e-3))


# every primitive, checked elementwise against central differences
PRIMITIVES = {
    "add": lambda a, b: (a + b * 2.0).sum(),
    "sub": lambda a, b: (a - b).sum() + (1.0 - a).sum(),
    "mul": lambda a, b: (a * b).sum(),
    "div": lambda a, b: (a / (b * b + 1.0)).sum() + (2.0 / (a * a + 1.0)).sum(),
    "neg": lambda a, b: (-a * b).sum(),
    "pow": lambda a, b: ((a * a + 1.0) ** 1.5).sum(),
    "matmul": lambda a, b: (a.reshape(2, 3) @ b.reshape(3, 2)).sum(),
    "getitem": lambda a, b: (a[np.array([0, 0, 4])] * b[1:4]).sum(),
    "sum_axis": lambda a, b: (a.reshape(2, 3).sum(axis=0) * b[:3]).sum(),
    "mean": lambda a, b: (a.reshape(3, 2).mean(axis=1, keepdims=True) * b.reshape(3, 2)).mean(),
    "tanh": lambda a, b: (a * b).tanh().sum(),
    "relu": lambda a, b: (a * b + 0.05).relu().sum(),
    "exp": lambda a, b: (a * 0.5).exp().sum(),
    "log": lambda a, b: (a * a + 1.0).log().sum(),
    "softplus": lambda a, b: (a * b).softplus().sum(),
    "clip": lambda a, b: (a * 3.0).clip(-1.0, 1.0).sum() + a.sum(),
    "concat": lambda a, b: (concat([a.reshape(2, 3), b.reshape(2, 3)], axis=1) ** 2).sum(),
    "minimum": lambda a, b: minimum(a, b * 0.9).sum(),
    "maximum": lambda a, b: maximum(a, b * 0.9).sum(),
    "where": lambda a, b: where(np.array([1, 0, 1, 0, 1, 0], bool), a * a, b * 3.0).sum(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    fn = PRIMITIVES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(10):
        a, b = leaf(rng.normal(size=6), "a"), leaf(rng.normal(size=6), "b")
        # keep kinks (relu, clip, min/max) away from the finite-difference stencil
        if name in ("relu", "clip", "minimum", "maximum"):
            if name == "relu" and np.min(np.abs(a.data * b.data + 0.05)) < 1e-3:
                continue
            if name == "clip" and np.min(np.abs(np.abs(3 * a.data) - 1)) < 1e-3:
                continue
            if name in ("minimum", "maximum") and np.min(np.abs(a.data - 0.9 * b.data)) < 1e-3:
                continue
        g = grad(fn(a, b), [a, b])
        n = fd_grad(lambda: fn(a, b), [a, b])
        for gi, ni in zip(g, n):
            assert np.all(np.abs(gi - ni) <= 1e-5 * np.maximum(np.abs(ni), 1e-3)), (name, gi, ni)


def test_mlp_gradient(rng):
    for act in ("tanh", "relu"):
        net = MLP([3, 8, 8, 2], act, rng, out_gain=1.0)
        x = rng.normal(size=(5, 3))
        loss = lambda: (net(x) ** 2).mean()
        assert rel_err(grad(loss(), net.parameters()), fd_grad(loss, net.parameters())) <= 1e-5


def test_backward_accumulates_into_grad():
    w = leaf([1.0, 2.0])
    (w * 2.0).sum().backward()
    (w * 3.0).sum().backward()
    np.testing.assert_array_equal(w.grad, [5.0, 5.0])


def test_tensor_reused_in_graph():
    w = leaf(3.0)
    y = w * w
    (g,) = grad(y * y + y, [w])
    assert g == pytest.approx(4 * 27 + 6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(2, 12), elements=st.floats(-3, 3)), st.integers(0, 2 ** 31))
def test_backward_of_sum_is_sum_of_backwards(xs, seed):
    net = MLP([1, 4, 1], "tanh", np.random.default_rng(seed), out_gain=1.0)
    ps = net.parameters()
    whole = grad((net(xs.reshape(-1, 1)) ** 2).sum(), ps)
    parts = [grad((net(np.array([[x]])) ** 2).sum(), ps) for x in xs]
    for k, g in enumerate(whole):
        np.testing.assert_allclose(g, sum(p[k] for p in parts), rtol=1e-10, atol=1e-12)


def test_determinism():
    def once():
        net = MLP([2, 16, 1], rng=np.random.default_rng(3))
        x = np.random.default_rng(4).normal(size=(8, 2))
        return forward(net, x).data, grad((net(x) ** 2).mean(), net.parameters())
    (a, ga), (b, gb) = once(), once()
    assert a.tobytes() == b.tobytes()
    assert all(x.tobytes() == y.tobytes() for x, y in zip(ga, gb))


# -- Adam --------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = [np.array([1.0, -2.0])]
    st0 = AdamState([np.array([0.5, 0.5])], [np.array([0.1, 0.1])], step=3, lr=0.1)
    new, st1 = adam_step(p, [np.zeros(2)], st0)
    assert st1.step == 4
    assert np.all(np.abs(st1.m[0]) < np.abs(st0.m[0]))
    assert np.all(st1.v[0] < st0.v[0])
    # with zero gradient the moment estimates still move params; only fresh state is a no-op
    fresh, _ = adam_step(p, [np.zeros(2)], AdamState.zeros_like(p, lr=0.1))
    np.testing.assert_array_equal(fresh[0], p[0])


@pytest.mark.parametrize("g", [0.3, -7.0, 1e-3])
def test_adam_first_step_magnitude(g):
    lr = 0.01
    new, _ = adam_step([np.array([1.0])], [np.array([g])], AdamState.zeros_like([np.zeros(1)], lr=lr))
    delta = new[0][0] - 1.0
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    assert delta == pytest.approx(-lr * np.sign(g) * abs(g) / (abs(g) + 1e-8), rel=1e-12)


def _reference_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
    return p


def test_adam_two_steps_match_reference():
    p = [np.array([0.7])]
    state = AdamState.zeros_like(p, lr=0.05)
    for _ in range(2):
        p, state = adam_step(p, [np.array([0.4])], state)
    assert p[0][0] == pytest.approx(_reference_adam(0.7, [0.4, 0.4], 0.05), abs=1e-15)
    assert state.step == 2


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step([np.zeros(2)], [np.zeros(3)], AdamState.zeros_like([np.zeros(2)]))


def test_adam_class_updates_in_place():
    w = leaf([1.0, 1.0])
    opt = Adam([w], lr=0.1)
    opt.step([np.array([1.0, -1.0])])
    np.testing.assert_allclose(w.data, [0.9, 1.1], atol=1e-8)
    assert opt.state.step == 1


def test_clip_grad_norm():
    g, n = clip_grad_norm([np.array([3.0]), np.array([4.0])], 1.0)
    assert n == 5.0
    np.testing.assert_allclose(np.concatenate(g), [0.6, 0.8])
    g2, _ = clip_grad_norm([np.array([0.3])], 1.0)
    assert g2[0][0] == 0.3


# -- checkpoints ---------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    net = MLP([3, 5, 2], rng=np.random.default_rng(0), name="vf")
    path = tmp_path / "ck.json"
    save_params(path, net.parameters(), extra={"offset": 1.5})
    doc = json.loads(path.read_text())
    assert doc["format"] == "avec-params" and doc["version"] == 1
    assert doc["params"][0] == {"name": "vf.0.weight", "shape": [3, 5],
                                "values": net.weights[0].data.ravel().tolist()}
    other = MLP([3, 5, 2], rng=np.random.default_rng(1), name="vf")
    _, extra = load_params(path, other.parameters(), with_extra=True)
    assert extra == {"offset": 1.5}
    assert params_digest(other.parameters()) == params_digest(net.parameters())


def test_checkpoint_shape_mismatch(tmp_path):
    net = MLP([3, 5, 2], name="vf")
    save_params(tmp_path / "ck.json", net.parameters())
    with pytest.raises(ShapeError):
        load_params(tmp_path / "ck.json", MLP([3, 4, 2], name="vf").parameters())
