import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stssl import diffcore as dc
from stssl.diffcore import Tensor


def central_fd(f, x, eps=1e-6):
    """Independent oracle: central differences of a numpy function."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[i] += eps
        down[i] -= eps
        g[i] = (f(up) - f(down)) / (2 * eps)
    return g


def test_square_sum_grad():
    w = Tensor([3.0], requires_grad=True)
    grads = dc.backward((w * w).sum(), {"w": w})
    assert grads["w"] == pytest.approx([6.0], abs=1e-12)
    assert central_fd(lambda a: np.sum(a ** 2), [3.0])[0] == pytest.approx(6.0, abs=1e-6)


def test_unreachable_param_gets_zero():
    w = Tensor([1.5], requires_grad=True)
    c = Tensor(4.0)
    other = Tensor([2.0], requires_grad=True)
    grads = dc.backward((other * c).sum(), {"w": w, "other": other})
    assert grads["w"].tolist() == [0.0]


def test_product_rule():
    w1 = Tensor(2.0, requires_grad=True)
    w2 = Tensor(5.0, requires_grad=True)
    grads = dc.backward(w1 * w2, {"w1": w1, "w2": w2})
    assert float(grads["w1"]) == pytest.approx(5.0)
    assert float(grads["w2"]) == pytest.approx(2.0)


def test_non_scalar_loss_rejected():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(dc.ContractError):
        dc.backward(w * 2.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_gradient_names_operation():
    w = Tensor([0.0], requires_grad=True)
    # sqrt is finite at 0 but its slope is not
    with pytest.raises(dc.NumericError, match="pow"):
        dc.backward(dc.power(w, 0.5).sum())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_rejected():
    w = Tensor([-1.0], requires_grad=True)
    with pytest.raises(dc.NumericError):
        dc.backward(dc.log(w).sum())


def test_gradients_accumulate_until_zeroed():
    w = Tensor([1.0, 2.0], requires_grad=True)
    dc.backward((w * 3.0).sum())
    dc.backward((w * 3.0).sum())
    assert w.grad.tolist() == [6.0, 6.0]
    dc.zero_grad({"w": w})
    assert w.grad.tolist() == [0.0, 0.0]


# one entry per op kind: (builder on Tensors, numpy twin, input shapes)
rng = np.random.default_rng(0)
OPS = {
    "matmul": (lambda a, b: (a @ b).sum(), lambda a, b: (a @ b).sum(), [(3, 4), (4, 2)]),
    "batched_matmul": (lambda a, b: ((a @ b) ** 2).sum(), lambda a, b: ((a @ b) ** 2).sum(),
                       [(2, 3, 4), (4, 5)]),
    "add_broadcast": (lambda a, b: ((a + b) ** 2).sum(), lambda a, b: ((a + b) ** 2).sum(),
                      [(3, 4), (4,)]),
    "mul": (lambda a, b: (a * b * a).sum(), lambda a, b: (a * b * a).sum(), [(3, 4), (3, 1)]),
    "div": (lambda a, b: (a / (b * b + 1.0)).sum(), lambda a, b: (a / (b * b + 1.0)).sum(),
            [(3,), (3,)]),
    "sigmoid": (lambda a: (dc.sigmoid(a) * a).sum(),
                lambda a: (a / (1 + np.exp(-a))).sum(), [(5,)]),
    "log_sigmoid": (lambda a: dc.log_sigmoid(a).sum(),
                    lambda a: np.sum(-np.log1p(np.exp(-a))), [(5,)]),
    "softmax": (lambda a: (dc.softmax(a, axis=-1) * np.arange(4.0)).sum(),
                lambda a: (np.exp(a) / np.exp(a).sum(-1, keepdims=True) * np.arange(4.0)).sum(),
                [(3, 4)]),
    "log_softmax": (lambda a: (dc.log_softmax(a, axis=0) * np.arange(3.0)[:, None]).sum(),
                    lambda a: ((a - np.log(np.exp(a).sum(0, keepdims=True)))
                               * np.arange(3.0)[:, None]).sum(), [(3, 2)]),
    "concat": (lambda a, b: (dc.concat([a, b], axis=1) ** 2 * np.arange(5.0)).sum(),
               lambda a, b: (np.concatenate([a, b], 1) ** 2 * np.arange(5.0)).sum(),
               [(2, 3), (2, 2)]),
    "slice": (lambda a: (a[1:, ::2] ** 3).sum(), lambda a: (a[1:, ::2] ** 3).sum(), [(3, 4)]),
    "mean": (lambda a: (a.mean(axis=0) ** 2).sum(), lambda a: (a.mean(0) ** 2).sum(), [(4, 3)]),
    "abs": (lambda a: dc.abs(a).sum(), lambda a: np.abs(a).sum(), [(6,)]),
    "exp_log": (lambda a: dc.log(dc.exp(a) + 1.0).sum(), lambda a: np.log(np.exp(a) + 1).sum(),
                [(4,)]),
    "relu": (lambda a: (dc.relu(a) ** 2).sum(), lambda a: (np.maximum(a, 0) ** 2).sum(), [(6,)]),
    "roll": (lambda a: (dc.roll(a, -1, 0) * np.arange(3.0)[:, None] * a).sum(),
             lambda a: (np.roll(a, -1, 0) * np.arange(3.0)[:, None] * a).sum(), [(3, 2)]),
    "swap_reshape": (lambda a: (a.swapaxes(0, 1).reshape(6) * np.arange(6.0)).sum(),
                     lambda a: (a.swapaxes(0, 1).reshape(6) * np.arange(6.0)).sum(), [(2, 3)]),
}


def _np_conv(x, w):
    k = w.shape[0]
    t_out = x.shape[-3] - k + 1
    return sum(x[..., j:j + t_out, :, :] @ w[j] for j in range(k))


OPS["temporal_conv"] = (lambda x, w: (dc.temporal_conv(x, w) ** 2).sum(),
                        lambda x, w: (_np_conv(x, w) ** 2).sum(), [(2, 5, 3, 2), (3, 2, 4)])


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_fd(name):
    build, twin, shapes = OPS[name]
    arrays = [rng.standard_normal(s) for s in shapes]
    # keep abs/relu away from their kinks
    if name in ("abs", "relu"):
        arrays = [a + np.sign(a) * 0.1 for a in arrays]
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    params = {str(i): t for i, t in enumerate(ts)}
    grads = dc.backward(build(*ts), params)
    for i, a in enumerate(arrays):
        def f(v, i=i):
            args = [v if j == i else arrays[j] for j in range(len(arrays))]
            return twin(*args)
        fd = central_fd(f, a)
        rel = np.abs(grads[str(i)] - fd) / np.maximum(1.0, np.maximum(np.abs(fd), np.abs(grads[str(i)])))
        assert rel.max() < 1e-6, (name, i, rel.max())


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 10_000))
def test_backward_is_linear(a, b, seed):
    r = np.random.default_rng(seed)
    w = Tensor(r.standard_normal((3, 2)), requires_grad=True)
    m = r.standard_normal((2, 4))

    def f(w):
        return (dc.sigmoid(w @ m) ** 2).sum()

    def g(w):
        return dc.abs(w).sum() + (w * w * w).mean()

    gf = dc.backward(f(w), {"w": w})["w"]
    gg = dc.backward(g(w), {"w": w})["w"]
    combo = dc.backward(f(w) * a + g(w) * b, {"w": w})["w"]
    np.testing.assert_allclose(combo, a * gf + b * gg, rtol=1e-10, atol=1e-10)


def test_fd_check_quadratic():
    w = Tensor([3.0], requires_grad=True)
    err = dc.finite_difference_check(lambda p: (p["w"] * p["w"]).sum(), {"w": w}, 1e-5)
    assert err < 1e-8


def test_fd_check_constant():
    w = Tensor([3.0], requires_grad=True)
    err = dc.finite_difference_check(lambda p: Tensor(2.0) + p["w"].sum() * 0.0, {"w": w}, 1e-5)
    assert err == 0.0


def test_fd_check_rejects_nondeterminism():
    r = np.random.default_rng(0)
    w = Tensor([1.0], requires_grad=True)
    with pytest.raises(dc.NondeterminismError):
        dc.finite_difference_check(lambda p: (p["w"] * r.random()).sum(), {"w": w})


def test_fd_check_rejects_bad_eps():
    with pytest.raises(dc.ContractError):
        dc.finite_difference_check(lambda p: p["w"].sum(), {"w": Tensor([1.0], True)}, 0.0)


def test_adam_zero_grad_leaves_params():
    params = {"w": np.array([1.0, -2.0])}
    out, state = dc.adam_step(params, {"w": np.zeros(2)}, dc.AdamState())
    assert out["w"].tolist() == [1.0, -2.0]
    assert state.step_count == 1


def test_adam_first_step_value():
    out, _ = dc.adam_step({"w": np.array([0.0])}, {"w": np.array([1.0])}, dc.AdamState())
    # m_hat = v_hat = 1 on the first step: w = -lr / (1 + eps_hat)
    expected = -1e-3 / (1.0 + 1e-8)
    assert out["w"][0] == pytest.approx(expected, abs=1e-18)
    assert out["w"][0] == pytest.approx(-9.99999995e-4, abs=1e-11)


def test_adam_deterministic_and_pure():
    params = {"w": np.array([0.3, 0.1])}
    grads = {"w": np.array([0.5, -2.0])}
    state = dc.AdamState()
    a, sa = dc.adam_step(params, grads, state)
    b, sb = dc.adam_step(params, grads, state)
    assert a["w"].tobytes() == b["w"].tobytes()
    assert state.step_count == 0 and sa.step_count == sb.step_count == 1
    assert params["w"].tolist() == [0.3, 0.1]


def test_adam_shape_mismatch():
    with pytest.raises(dc.ContractError):
        dc.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, dc.AdamState())


def test_adam_minimizes_quadratic():
    w = Tensor([5.0, -3.0], requires_grad=True)
    opt = dc.Adam({"w": w}, lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        dc.backward(((w - 1.0) ** 2).sum())
        opt.step()
    np.testing.assert_allclose(w.data, [1.0, 1.0], atol=1e-3)


def test_no_grad_records_nothing():
    w = Tensor([1.0], requires_grad=True)
    with dc.no_grad():
        out = w * 2.0
    assert not out.requires_grad
