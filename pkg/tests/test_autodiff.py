import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hydrocast import autodiff as ad
from hydrocast.autodiff import (
    Tensor,
    concatenate,
    conv1d,
    finite_difference_check,
    gradient_check,
    log_softmax,
    lstm_sequence,
    masked_select,
    matmul,
    multihead_attention,
    no_grad,
    sliding_dot,
    softmax,
    tensor,
    tmean,
    tsum,
    tvariance,
)

RNG = np.random.default_rng(1234)


def test_add_elementwise():
    out = tensor([1.0, 2.0]) + tensor([3.0, 4.0])
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_softmax_symmetry():
    out = softmax(tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_softmax_overflow_safe():
    out = softmax(tensor([1000.0, 1000.0]))
    np.testing.assert_allclose(out.data, [0.5, 0.5])


def test_matmul_identity():
    a = RNG.standard_normal((3, 3))
    out = matmul(tensor(np.eye(3)), tensor(a))
    np.testing.assert_allclose(out.data, a)


def test_quadratic_gradient():
    w = tensor([1.0, 2.0], requires_grad=True)
    loss = tsum(w * w)
    loss.backward()
    np.testing.assert_allclose(w.grad, [2.0, 4.0])


def test_sigmoid_gradient_at_zero():
    # sigma'(0) = sigma(0) * (1 - sigma(0)) = 0.25
    x = tensor(0.0, requires_grad=True)
    ad.sigmoid(x).backward()
    assert abs(x.grad - 0.25) < 1e-12


def test_fanout_accumulates():
    w = tensor([1.0], requires_grad=True)
    y = w + w
    tsum(y).backward()
    np.testing.assert_allclose(w.grad, [2.0])


def test_backward_noop_without_requires_grad():
    x = tensor([1.0, 2.0])
    loss = tsum(x * x)
    assert not loss.requires_grad
    loss.backward()  # silently does nothing
    assert x.grad is None


def test_backward_twice_raises():
    w = tensor([1.0], requires_grad=True)
    loss = tsum(w * w)
    loss.backward()
    with pytest.raises(RuntimeError, match="consumed"):
        loss.backward()


def test_backward_nonscalar_raises():
    w = tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (w * w).backward()


def test_shape_mismatch_names_primitive_and_shapes():
    with pytest.raises(ValueError, match=r"add.*\(2,\).*\(3,\)"):
        tensor([1.0, 2.0]) + tensor([1.0, 2.0, 3.0])
    with pytest.raises(ValueError, match="matmul"):
        matmul(tensor(np.ones((2, 3))), tensor(np.ones((2, 3))))


def test_domain_errors():
    with pytest.raises(ValueError, match="log"):
        ad.log(tensor([-1.0]))
    with pytest.raises(ValueError, match="sqrt"):
        ad.sqrt(tensor([-1.0]))


def test_accumulation_order_independent():
    def build(order):
        a = tensor([1.5, -0.5], requires_grad=True)
        b = tensor([0.3, 2.0], requires_grad=True)
        fa = tsum(ad.tanh(a * 2.0))
        fb = tsum(ad.exp(b) * 0.1)
        loss = fa + fb if order == 0 else fb + fa
        loss.backward()
        return a.grad.copy(), b.grad.copy()

    ga0, gb0 = build(0)
    ga1, gb1 = build(1)
    np.testing.assert_allclose(ga0, ga1, atol=1e-12)
    np.testing.assert_allclose(gb0, gb1, atol=1e-12)


def test_no_grad_context_suppresses_graph():
    w = tensor([1.0], requires_grad=True)
    with no_grad():
        y = tsum(w * w)
    assert not y.requires_grad


def test_detach_cuts_graph():
    w = tensor([2.0], requires_grad=True)
    y = (w * w).detach()
    loss = tsum(y * w)
    loss.backward()
    np.testing.assert_allclose(w.grad, [4.0])  # only the direct factor


# -- finite_difference_check contract ----------------------------------------

def test_fd_check_quadratic_exact():
    w = tensor(1.0, requires_grad=True)
    rep = finite_difference_check(lambda t: t * t, w, eps=1e-5)
    assert rep.max_rel_error < 1e-8
    w.zero_grad()
    (w * w).backward()
    assert abs(w.grad - 2.0) < 1e-12


def test_fd_check_abs_away_from_zero():
    w = tensor(1.0, requires_grad=True)
    rep = finite_difference_check(lambda t: ad.absolute(t), w, eps=1e-5)
    assert rep.max_rel_error < 1e-6


def test_fd_check_constant_function():
    w = tensor([1.0, -2.0], requires_grad=True)
    rep = finite_difference_check(lambda t: tsum(t * 0.0), w, eps=1e-5)
    assert rep.max_rel_error == 0.0


def test_fd_check_eps_bounds():
    w = tensor(1.0, requires_grad=True)
    with pytest.raises(ValueError, match="eps"):
        finite_difference_check(lambda t: t * t, w, eps=1e-2)


def test_fd_check_nonfinite_raises():
    w = tensor(800.0, requires_grad=True)
    with pytest.raises(ValueError, match="finite"):
        finite_difference_check(lambda t: ad.exp(t) * ad.exp(t), w)


def test_abs_subgradient_zero_at_zero():
    w = tensor(0.0, requires_grad=True)
    ad.absolute(w).backward()
    assert w.grad == 0.0


# -- gradcheck every primitive against central differences --------------------

def _check(f, params, tol=1e-6, max_coords=None):
    rep = gradient_check(f, params, eps=1e-5, max_coords=max_coords, seed=7)
    assert rep.max_rel_error < tol, f"worst={rep.worst} err={rep.max_rel_error}"


def test_grad_elementwise_chain():
    x = tensor(RNG.standard_normal((3, 4)) * 0.5, requires_grad=True)
    y = tensor(RNG.standard_normal((3, 4)) * 0.5 + 2.0, requires_grad=True)
    _check(lambda: tsum(ad.tanh(x) * ad.sigmoid(y) + ad.exp(x * 0.3) / y
                        + ad.sin(x) - ad.cos(y) + ad.sqrt(y) + ad.log(y)),
           {"x": x, "y": y})


def test_grad_matmul_2d():
    a = tensor(RNG.standard_normal((3, 4)), requires_grad=True)
    b = tensor(RNG.standard_normal((4, 2)), requires_grad=True)
    _check(lambda: tsum(ad.tanh(matmul(a, b))), {"a": a, "b": b})


def test_grad_matmul_batched():
    a = tensor(RNG.standard_normal((2, 3, 4)), requires_grad=True)
    b = tensor(RNG.standard_normal((2, 4, 2)), requires_grad=True)
    w = tensor(RNG.standard_normal((4, 3)), requires_grad=True)
    _check(lambda: tsum(ad.tanh(matmul(a, b))) + tsum(matmul(a, w) * 0.3),
           {"a": a, "b": b, "w": w})


def test_grad_matmul_vector_cases():
    v = tensor(RNG.standard_normal(4), requires_grad=True)
    m = tensor(RNG.standard_normal((4, 3)), requires_grad=True)
    u = tensor(RNG.standard_normal(3), requires_grad=True)
    _check(lambda: tsum(matmul(v, m)) + matmul(matmul(v, m), u),
           {"v": v, "m": m, "u": u})


def test_grad_softmax_and_logsoftmax():
    x = tensor(RNG.standard_normal((3, 5)), requires_grad=True)
    _check(lambda: tsum(softmax(x, axis=-1) * ad.tanh(x)), {"x": x})
    _check(lambda: tsum(log_softmax(x, axis=-1)[:, :2]), {"x": x})


def test_grad_reductions():
    x = tensor(RNG.standard_normal((4, 5)), requires_grad=True)
    _check(lambda: tsum(tmean(x, axis=1) * tvariance(x, axis=1))
           + tvariance(x) + tmean(x), {"x": x})


def test_grad_shape_ops():
    x = tensor(RNG.standard_normal((3, 4)), requires_grad=True)
    y = tensor(RNG.standard_normal((3, 2)), requires_grad=True)
    mask = RNG.random((3, 6)) > 0.4

    def f():
        c = concatenate([x, y], axis=1)          # (3, 6)
        t = ad.transpose(c, (1, 0))              # (6, 3)
        r = ad.reshape(t, (3, 6))
        s = r[1:, ::2]
        return tsum(ad.tanh(masked_select(c, mask))) + tsum(s * s)

    _check(f, {"x": x, "y": y})


def test_grad_broadcast():
    x = tensor(RNG.standard_normal((3, 1)), requires_grad=True)
    b = tensor(RNG.standard_normal(4), requires_grad=True)
    _check(lambda: tsum(ad.tanh(x + b) * (x * b)), {"x": x, "b": b})
    x2 = tensor(RNG.standard_normal((2, 1)), requires_grad=True)
    _check(lambda: tsum(ad.broadcast_to(x2, (2, 5)) * 1.5), {"x2": x2})


def test_grad_conv1d():
    x = tensor(RNG.standard_normal((2, 3, 12)), requires_grad=True)
    k = tensor(RNG.standard_normal((4, 3, 5)) * 0.4, requires_grad=True)
    b = tensor(RNG.standard_normal(4) * 0.1, requires_grad=True)
    _check(lambda: tsum(ad.tanh(conv1d(x, k, b))), {"x": x, "k": k, "b": b})


def test_conv1d_matches_direct_correlation():
    x = RNG.standard_normal((1, 2, 10))
    k = RNG.standard_normal((3, 2, 4))
    out = conv1d(tensor(x), tensor(k)).data
    expected = np.zeros((1, 3, 7))
    for o in range(3):
        for t in range(7):
            expected[0, o, t] = np.sum(x[0, :, t:t + 4] * k[o])
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_grad_sliding_dot():
    x = tensor(RNG.standard_normal((3, 15)), requires_grad=True)
    w = tensor(RNG.standard_normal(6), requires_grad=True)
    _check(lambda: tsum(ad.tanh(sliding_dot(x, w))), {"x": x, "w": w}, tol=1e-5)


def test_sliding_dot_matches_direct():
    x = RNG.standard_normal((2, 9))
    w = RNG.standard_normal(4)
    out = sliding_dot(tensor(x), tensor(w)).data
    expected = np.array([[x[b, t:t + 4] @ w for t in range(6)] for b in range(2)])
    np.testing.assert_allclose(out, expected, atol=1e-10)


def test_grad_lstm_sequence():
    B, T, D, H = 2, 5, 3, 4
    x = tensor(RNG.standard_normal((B, T, D)) * 0.5, requires_grad=True)
    wx = tensor(RNG.standard_normal((D, 4 * H)) * 0.3, requires_grad=True)
    wh = tensor(RNG.standard_normal((H, 4 * H)) * 0.3, requires_grad=True)
    b = tensor(RNG.standard_normal(4 * H) * 0.1, requires_grad=True)
    _check(lambda: tsum(ad.tanh(lstm_sequence(x, wx, wh, b))),
           {"x": x, "wx": wx, "wh": wh, "b": b}, tol=1e-5)


def test_lstm_cell_equations_one_step():
    # c_1 = f*c_0 + i*g and h_1 = o*tanh(c_1) against a direct evaluation
    B, D, H = 1, 2, 3
    x = RNG.standard_normal((B, 1, D))
    wx = RNG.standard_normal((D, 4 * H)) * 0.5
    wh = RNG.standard_normal((H, 4 * H)) * 0.5
    b = RNG.standard_normal(4 * H) * 0.2
    c0 = RNG.standard_normal((B, H))
    h0 = RNG.standard_normal((B, H))
    out = lstm_sequence(tensor(x), tensor(wx), tensor(wh), tensor(b), h0=h0, c0=c0).data
    z = x[:, 0] @ wx + h0 @ wh + b
    sig = lambda v: 1 / (1 + np.exp(-v))
    # gate layout along 4H: i, f, o (sigmoid) then g (tanh)
    i, f, o, g = sig(z[:, :H]), sig(z[:, H:2*H]), sig(z[:, 2*H:3*H]), np.tanh(z[:, 3*H:])
    c1 = f * c0 + i * g
    np.testing.assert_allclose(out, o * np.tanh(c1), atol=1e-12)


def test_lstm_memory_preservation():
    # saturated forget gate, closed input gate: c_T == c_0
    B, T, D, H = 1, 4, 1, 2
    x = np.zeros((B, T, D))
    wx = np.zeros((D, 4 * H))
    wh = np.zeros((H, 4 * H))
    b = np.zeros(4 * H)
    b[:H] = -50.0          # input gate ~ 0
    b[H:2 * H] = 50.0      # forget gate ~ 1
    b[2 * H:3 * H] = 50.0  # output gate ~ 1 so h exposes tanh(c)
    c0 = np.array([[0.7, -0.3]])
    out = lstm_sequence(tensor(x), tensor(wx), tensor(wh), tensor(b), c0=c0).data
    np.testing.assert_allclose(out, np.tanh(c0), atol=1e-9)


def test_grad_multihead_attention():
    B, h, n, dh = 2, 2, 5, 3
    q = tensor(RNG.standard_normal((B, h, n, dh)) * 0.5, requires_grad=True)
    k = tensor(RNG.standard_normal((B, h, n, dh)) * 0.5, requires_grad=True)
    v = tensor(RNG.standard_normal((B, h, n, dh)) * 0.5, requires_grad=True)
    _check(lambda: tsum(ad.tanh(multihead_attention(q, k, v))),
           {"q": q, "k": k, "v": v}, tol=1e-5)


def test_attention_single_token_is_identity_on_v():
    q = tensor(RNG.standard_normal((1, 1, 1, 4)))
    k = tensor(RNG.standard_normal((1, 1, 1, 4)))
    v = tensor(RNG.standard_normal((1, 1, 1, 4)))
    out = multihead_attention(q, k, v)
    np.testing.assert_allclose(out.data, v.data, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_softmax_always_simplex(vals):
    out = softmax(tensor(vals)).data
    assert np.all(out > 0)
    assert abs(out.sum() - 1.0) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_variance_matches_numpy(seed):
    x = np.random.default_rng(seed).standard_normal((3, 6))
    out = tvariance(tensor(x), axis=1).data
    np.testing.assert_allclose(out, x.var(axis=1), atol=1e-12)
