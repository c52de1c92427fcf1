"""Tensor library tests: hand-computed values, finite-difference fuzzing,
adjoint identities, graph mechanics, and the optimizer."""

import math

import numpy as np
import pytest

import advseg.autodiff as ad
from advseg.autodiff import (
    AdamState,
    NonFiniteError,
    Tensor,
    adam_step,
    add,
    backward,
    clamp,
    concat,
    conv2d,
    maxpool2d,
    mul,
    neg,
    relu,
    softmax,
    softmax_cross_entropy,
    sqrt,
    sub,
    sum_all,
    transposed_conv2d,
)

from _gradcheck import assert_gradients_match

FUZZ_CASES = 100


# ---------------------------------------------------------------------------
# hand-computed values


def test_add_values_and_gradients():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 4.0], requires_grad=True)
    out = add(a, b)
    np.testing.assert_array_equal(out.data, [4.0, 6.0])
    backward(sum_all(out))
    np.testing.assert_array_equal(a.grad, [1.0, 1.0])
    np.testing.assert_array_equal(b.grad, [1.0, 1.0])


def test_mul_gradient_routing():
    a = Tensor([2.0, 5.0], requires_grad=True)
    b = Tensor([7.0, -3.0], requires_grad=True)
    backward(sum_all(mul(a, b)))
    np.testing.assert_array_equal(a.grad, [7.0, -3.0])
    np.testing.assert_array_equal(b.grad, [2.0, 5.0])


def test_relu_subgradient_zero_at_kink():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    backward(sum_all(relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_clamp_gradient_mask():
    x = Tensor([-0.5, 0.25, 0.5, 1.5], requires_grad=True)
    out = clamp(x, 0.0, 1.0)
    np.testing.assert_array_equal(out.data, [0.0, 0.25, 0.5, 1.0])
    backward(sum_all(out))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 1.0, 0.0])


def test_clamp_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        clamp(Tensor([0.0]), 1.0, 0.0)


def test_fanout_gradients_accumulate():
    x = Tensor([3.0], requires_grad=True)
    backward(sum_all(add(mul(x, 2.0), mul(x, 5.0))))
    np.testing.assert_array_equal(x.grad, [7.0])


def test_broadcast_gradient_shapes():
    # the per-channel affine pattern: (C,1,1) parameters against (N,C,H,W)
    x = Tensor(np.ones((2, 3, 4, 4)), requires_grad=True)
    g = Tensor(np.full((3, 1, 1), 2.0), requires_grad=True)
    b = Tensor(np.zeros((3, 1, 1)), requires_grad=True)
    backward(sum_all(add(mul(x, g), b)))
    assert x.grad.shape == (2, 3, 4, 4)
    assert g.grad.shape == (3, 1, 1)
    np.testing.assert_array_equal(g.grad, np.full((3, 1, 1), 32.0))
    np.testing.assert_array_equal(b.grad, np.full((3, 1, 1), 32.0))


def test_conv2d_hand_example():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    k = Tensor(np.array([[[[1.0, 0.0], [0.0, 1.0]]]]))
    out = conv2d(x, k)
    np.testing.assert_array_equal(out.data, [[[[5.0]]]])


def test_conv2d_one_by_one_identity_kernel():
    x = np.arange(24.0).reshape(1, 2, 3, 4)
    k = np.eye(2).reshape(2, 2, 1, 1)
    out = conv2d(Tensor(x), Tensor(k))
    np.testing.assert_array_equal(out.data, x)


def test_maxpool_forward_and_tie_break():
    x = Tensor(np.array([[[[5.0, 5.0], [3.0, 5.0]]]]), requires_grad=True)
    out = maxpool2d(x)
    assert out.item() == 5.0
    backward(sum_all(out))
    # ties resolve to the first element in row-major window order
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_maxpool_rejects_indivisible_dims():
    with pytest.raises(ValueError):
        maxpool2d(Tensor(np.zeros((1, 1, 3, 4))))


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ValueError):
        conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))))


def test_conv2d_rejects_uneven_stride():
    with pytest.raises(ValueError):
        conv2d(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((1, 1, 2, 2))), stride=2)


def test_cross_entropy_uniform_logits_is_log_num_classes():
    logits = Tensor(np.zeros((1, 10, 2, 2)))
    target = np.zeros((1, 10, 2, 2))
    target[:, 3] = 1.0
    loss = softmax_cross_entropy(logits, Tensor(target))
    assert loss.item() == pytest.approx(math.log(10.0), rel=1e-12)


def test_cross_entropy_two_class_example():
    # logits [0, ln 3] with the true class second: softmax = [1/4, 3/4],
    # so the loss is -ln(3/4) = ln(4/3)
    logits = np.zeros((1, 2, 1, 1))
    logits[0, 1] = math.log(3.0)
    target = np.zeros((1, 2, 1, 1))
    target[0, 1] = 1.0
    loss = softmax_cross_entropy(Tensor(logits), Tensor(target))
    assert loss.item() == pytest.approx(math.log(4.0 / 3.0), rel=1e-12)


def test_cross_entropy_gradient_formula():
    rng = np.random.default_rng(7)
    logits = Tensor(rng.standard_normal((2, 4, 3, 3)), requires_grad=True)
    target = np.zeros((2, 4, 3, 3))
    labels = rng.integers(0, 4, size=(2, 3, 3))
    for n in range(2):
        for i in range(3):
            for j in range(3):
                target[n, labels[n, i, j], i, j] = 1.0
    loss = softmax_cross_entropy(logits, Tensor(target))
    backward(loss)
    expected = (softmax(logits.data, axis=1) - target) / (2 * 3 * 3)
    np.testing.assert_allclose(logits.grad, expected, rtol=1e-12, atol=1e-15)


def test_cross_entropy_nonnegative_and_softmax_normalized():
    rng = np.random.default_rng(3)
    for case in range(20):
        logits = rng.standard_normal((1, 5, 4, 4)) * rng.uniform(0.1, 50.0)
        probs = softmax(logits, axis=1)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        target = np.zeros_like(logits)
        labels = rng.integers(0, 5, size=(1, 4, 4))
        np.put_along_axis(target, labels[:, None], 1.0, axis=1)
        assert softmax_cross_entropy(Tensor(logits), Tensor(target)).item() >= 0.0


def test_cross_entropy_extreme_logits_stay_finite():
    logits = np.zeros((1, 3, 2, 2))
    logits[0, 0] = 1000.0
    logits[0, 1] = -1000.0
    target = np.zeros((1, 3, 2, 2))
    target[0, 2] = 1.0
    loss = softmax_cross_entropy(Tensor(logits, requires_grad=True), Tensor(target))
    assert np.isfinite(loss.item())


def test_cross_entropy_rejects_bad_targets():
    logits = Tensor(np.zeros((1, 3, 2, 2)))
    with pytest.raises(ValueError):
        softmax_cross_entropy(logits, Tensor(np.zeros((1, 3, 2, 2))))
    with pytest.raises(ValueError):
        softmax_cross_entropy(logits, Tensor(np.full((1, 3, 2, 2), 1.0 / 3.0)))
    with pytest.raises(ValueError):
        softmax_cross_entropy(logits, Tensor(np.zeros((1, 4, 2, 2))))


# ---------------------------------------------------------------------------
# finite-difference fuzzing (central differences are the oracle)


def _fuzz_values(rng, shape, low=-2.0, high=2.0):
    return rng.uniform(low, high, size=shape)


@pytest.mark.parametrize("op_name", ["add", "sub", "mul"])
def test_binary_ops_match_finite_differences(op_name):
    op = getattr(ad, op_name)
    rng = np.random.default_rng(hash(op_name) % 2**32)
    for case in range(FUZZ_CASES):
        base = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
        if case % 3 == 0 and len(base) > 1:
            # exercise broadcasting along leading dims
            b_shape = base[rng.integers(0, len(base)):]
        else:
            b_shape = base
        a = _fuzz_values(rng, base)
        b = _fuzz_values(rng, b_shape)
        assert_gradients_match(op, [a, b], seed=case)


def test_neg_matches_finite_differences():
    rng = np.random.default_rng(11)
    for case in range(FUZZ_CASES):
        shape = tuple(rng.integers(1, 6, size=rng.integers(1, 4)))
        assert_gradients_match(neg, [_fuzz_values(rng, shape)], seed=case)


def test_relu_matches_finite_differences():
    rng = np.random.default_rng(12)
    for case in range(FUZZ_CASES):
        shape = tuple(rng.integers(1, 6, size=rng.integers(1, 4)))
        x = _fuzz_values(rng, shape)
        x = np.where(np.abs(x) < 0.05, x + 0.1, x)  # keep clear of the kink
        assert_gradients_match(relu, [x], seed=case)


def test_clamp_matches_finite_differences():
    rng = np.random.default_rng(13)
    for case in range(FUZZ_CASES):
        shape = tuple(rng.integers(1, 6, size=rng.integers(1, 4)))
        x = _fuzz_values(rng, shape)
        # keep samples away from the clamp boundaries where FD is invalid
        x = x[(np.abs(x - 1.0) > 0.05) & (np.abs(x + 1.0) > 0.05)]
        if x.size == 0:
            continue
        assert_gradients_match(lambda t: clamp(t, -1.0, 1.0), [x], seed=case)


def test_sqrt_matches_finite_differences():
    rng = np.random.default_rng(14)
    for case in range(FUZZ_CASES):
        shape = tuple(rng.integers(1, 6, size=rng.integers(1, 4)))
        assert_gradients_match(sqrt, [rng.uniform(0.1, 3.0, shape)], seed=case)


def test_sum_matches_finite_differences():
    rng = np.random.default_rng(15)
    for case in range(FUZZ_CASES):
        shape = tuple(rng.integers(1, 6, size=rng.integers(1, 4)))
        assert_gradients_match(sum_all, [_fuzz_values(rng, shape)], seed=case)


def test_concat_matches_finite_differences():
    rng = np.random.default_rng(16)
    for case in range(FUZZ_CASES):
        c1, c2 = rng.integers(1, 4, size=2)
        h, w = rng.integers(2, 5, size=2)
        a = _fuzz_values(rng, (1, c1, h, w))
        b = _fuzz_values(rng, (1, c2, h, w))
        assert_gradients_match(lambda u, v: concat([u, v], axis=1), [a, b], seed=case)


def test_conv2d_matches_finite_differences():
    rng = np.random.default_rng(17)
    for case in range(FUZZ_CASES):
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 2))
        kh = int(rng.integers(1, 4))
        c = int(rng.integers(1, 3))
        f = int(rng.integers(1, 3))
        n = int(rng.integers(1, 3))
        # pick a height that the stride divides exactly
        ho = int(rng.integers(1, 3))
        h = (ho - 1) * stride + kh - 2 * padding
        if h < 1:
            continue
        x = _fuzz_values(rng, (n, c, h, h))
        k = _fuzz_values(rng, (f, c, kh, kh))
        assert_gradients_match(
            lambda u, v: conv2d(u, v, stride=stride, padding=padding),
            [x, k], seed=case)


def test_transposed_conv2d_matches_finite_differences():
    rng = np.random.default_rng(18)
    for case in range(FUZZ_CASES):
        stride = int(rng.integers(1, 3))
        kh = int(rng.integers(1, 4))
        padding = int(rng.integers(0, 2))
        hi = int(rng.integers(1, 4))
        if (hi - 1) * stride - 2 * padding + kh < 1:
            continue
        f = int(rng.integers(1, 3))
        c = int(rng.integers(1, 3))
        n = int(rng.integers(1, 3))
        x = _fuzz_values(rng, (n, f, hi, hi))
        k = _fuzz_values(rng, (f, c, kh, kh))
        assert_gradients_match(
            lambda u, v: transposed_conv2d(u, v, stride=stride, padding=padding),
            [x, k], seed=case)


def test_maxpool_matches_finite_differences():
    rng = np.random.default_rng(19)
    for case in range(FUZZ_CASES):
        n, c = rng.integers(1, 3, size=2)
        h = int(rng.integers(1, 4)) * 2
        while True:
            x = _fuzz_values(rng, (int(n), int(c), h, h))
            windows = x.reshape(int(n), int(c), h // 2, 2, h // 2, 2)
            windows = windows.transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4)
            top2 = np.sort(windows, axis=1)[:, -2:]
            if (top2[:, 1] - top2[:, 0]).min() > 1e-3:
                break  # FD needs a clear per-window winner
        assert_gradients_match(maxpool2d, [x], seed=case)


def test_cross_entropy_matches_finite_differences():
    rng = np.random.default_rng(20)
    for case in range(FUZZ_CASES):
        n = int(rng.integers(1, 3))
        k = int(rng.integers(2, 5))
        h = int(rng.integers(1, 4))
        logits = rng.standard_normal((n, k, h, h)) * 2.0
        target = np.zeros_like(logits)
        labels = rng.integers(0, k, size=(n, h, h))
        np.put_along_axis(target, labels[:, None], 1.0, axis=1)
        tensor = Tensor(logits, requires_grad=True)
        loss = softmax_cross_entropy(tensor, Tensor(target))
        backward(loss)

        def scalar_f(arr, target=target):
            return softmax_cross_entropy(Tensor(arr), Tensor(target)).item()

        from _gradcheck import numeric_gradient
        numeric = numeric_gradient(scalar_f, [logits], 0)
        np.testing.assert_allclose(tensor.grad, numeric, rtol=1e-4, atol=1e-8)


# ---------------------------------------------------------------------------
# structural identities


def test_transposed_conv_is_adjoint_of_conv():
    rng = np.random.default_rng(21)
    for case in range(50):
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 2))
        kh = int(rng.integers(1, 4))
        ho = int(rng.integers(1, 4))
        h = (ho - 1) * stride + kh - 2 * padding
        if h < 1:
            continue
        c, f, n = (int(v) for v in rng.integers(1, 4, size=3))
        u = rng.standard_normal((n, c, h, h))
        v = rng.standard_normal((n, f, ho, ho))
        k = rng.standard_normal((f, c, kh, kh))
        lhs = float((conv2d(Tensor(u), Tensor(k), stride, padding).data * v).sum())
        rhs = float((u * transposed_conv2d(Tensor(v), Tensor(k), stride, padding).data).sum())
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs), abs(rhs))


def test_conv2d_is_deterministic_bitwise():
    rng = np.random.default_rng(22)
    x = rng.standard_normal((2, 3, 8, 8))
    k = rng.standard_normal((4, 3, 3, 3))

    def run():
        xt = Tensor(x, requires_grad=True)
        kt = Tensor(k, requires_grad=True)
        out = conv2d(xt, kt, padding=1)
        backward(sum_all(mul(out, out)))
        return out.data.copy(), xt.grad.copy(), kt.grad.copy()

    first, second = run(), run()
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# graph mechanics


def test_deep_chain_does_not_recurse():
    x = Tensor([1.0], requires_grad=True)
    y = x
    for _ in range(2000):
        y = add(y, 1.0)
    backward(sum_all(y))
    np.testing.assert_array_equal(x.grad, [1.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        backward(add(x, 1.0))


def test_backward_requires_grad():
    with pytest.raises(ValueError):
        backward(sum_all(Tensor([1.0])))


def test_detach_cuts_the_graph():
    x = Tensor([2.0], requires_grad=True)
    y = mul(x, 3.0).detach()
    assert not y.requires_grad
    z = mul(Tensor([1.0], requires_grad=True), y)
    backward(sum_all(z))
    assert x.grad is None


def test_no_grad_inputs_build_no_graph():
    out = mul(Tensor([1.0]), Tensor([2.0]))
    assert not out.requires_grad and out._parents == ()


def test_non_finite_forward_raises():
    big = Tensor([1e308, 1e308])
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        mul(big, big)
    with pytest.raises(NonFiniteError):
        sqrt(Tensor([-1.0]))


def test_default_dtype_switch():
    ad.set_default_dtype(np.float32)
    try:
        out = mul(Tensor([1.0]), Tensor([2.0]))
        assert out.data.dtype == np.float32
    finally:
        ad.set_default_dtype(np.float64)
    assert Tensor([1.0]).data.dtype == np.float64
    with pytest.raises(ValueError):
        ad.set_default_dtype(np.int32)


# ---------------------------------------------------------------------------
# optimizer


def test_adam_first_step_matches_bias_corrected_formula():
    p = np.array([1.0])
    state = AdamState([p])
    adam_step([p], [np.array([1.0])], state, lr=1e-4)
    # bias correction makes the first step exactly lr / (1 + eps)
    assert p[0] == pytest.approx(1.0 - 1e-4, abs=1e-9)
    assert state.step_count == 1


def test_adam_zero_gradient_leaves_params_unchanged():
    p = np.array([0.5, -0.25])
    state = AdamState([p])
    adam_step([p], [np.zeros(2)], state)
    np.testing.assert_array_equal(p, [0.5, -0.25])


def test_adam_is_deterministic():
    rng = np.random.default_rng(23)
    grads = [rng.standard_normal(5) for _ in range(10)]

    def run():
        p = np.ones(5)
        state = AdamState([p])
        for g in grads:
            adam_step([p], [g], state, lr=1e-2)
        return p

    np.testing.assert_array_equal(run(), run())


def test_adam_rejects_mismatched_shapes():
    p = np.ones(3)
    state = AdamState([p])
    with pytest.raises(ValueError):
        adam_step([p], [np.ones(4)], state)
    with pytest.raises(ValueError):
        adam_step([p], [], state)
    with pytest.raises(ValueError):
        adam_step([p], [None], state)


def test_adam_state_shapes_follow_params():
    params = [np.ones((2, 3)), np.ones(4)]
    state = AdamState(params)
    assert [m.shape for m in state.m] == [(2, 3), (4,)]
    assert state.step_count == 0
