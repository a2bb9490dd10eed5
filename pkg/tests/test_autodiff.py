"""Gradient, optimizer, and stop-gradient checks for the autodiff core."""

import numpy as np
import pytest

from graphdebias import autodiff as ad


def make_param(rng, shape, name="p"):
    return ad.Parameter(name, rng.uniform(-2.0, 2.0, size=shape))


def test_sigmoid_at_zero():
    assert ad.sigmoid(ad.Tensor(np.zeros((1, 1)))).data[0, 0] == 0.5


def test_softmax_uniform_on_zeros():
    out = ad.softmax_rows(ad.Tensor(np.zeros((1, 5)))).data
    assert np.allclose(out, 0.2)


def test_softmax_rows_sum_to_one_and_positive():
    rng = np.random.default_rng(0)
    out = ad.softmax_rows(ad.Tensor(rng.uniform(-2, 2, size=(64, 7)))).data
    assert np.all(out > 0)
    assert np.all(np.abs(out.sum(axis=1) - 1.0) < 1e-12)


def test_segment_sum_grouped_addition():
    out = ad.segment_sum(ad.Tensor([[1.0], [2.0], [3.0]]), np.array([0, 0, 1]), 2)
    assert np.array_equal(out.data, [[3.0], [3.0]])


def test_segment_sum_empty_segment_is_zero():
    out = ad.segment_sum(ad.Tensor([[1.0, 1.0]]), np.array([2]), 4)
    assert np.array_equal(out.data, [[0, 0], [0, 0], [1, 1], [0, 0]])


def test_segment_sum_unsorted_ids():
    rng = np.random.default_rng(3)
    data = rng.normal(size=(50, 4))
    ids = rng.integers(0, 7, size=50)
    out = ad.segment_sum(ad.Tensor(data), ids, 7).data
    expect = np.zeros((7, 4))
    for row, i in zip(data, ids):
        expect[i] += row
    assert np.allclose(out, expect, atol=1e-12)


def test_quadratic_gradient():
    w = ad.Tensor([1.0, 2.0], requires_grad=True)
    loss = ad.mean((w * w)) * 2.0  # sum(w*w) for a 2-vector
    loss.backward()
    assert np.allclose(w.grad, [2.0, 4.0])


def test_constant_loss_gives_zero_grad():
    w = ad.Tensor([1.0, 2.0], requires_grad=True)
    loss = ad.mean(ad.Tensor([[5.0]]) * 1.0 + w * 0.0)
    loss.backward()
    assert np.allclose(w.grad, 0.0)


def test_detach_value_identity_and_zero_grad():
    x = ad.Tensor([[1.5, -0.5]], requires_grad=True)
    w = ad.Tensor([[2.0], [3.0]], requires_grad=True)
    y = ad.matmul(x.detach(), w)
    ad.mean(y).backward()
    assert x.grad is None
    assert np.allclose(w.grad, [[1.5], [-0.5]])

    x2 = ad.Tensor([[1.5, -0.5]], requires_grad=True)
    y2 = ad.matmul(x2, w)
    w.zero_grad()
    ad.mean(y2).backward()
    assert np.allclose(x2.grad, [[2.0, 3.0]])


def test_unreachable_parameter_stays_untouched():
    used = ad.Parameter("used", np.ones((2, 2)))
    unused = ad.Parameter("unused", np.ones((2, 2)))
    ad.mean(used.tensor * 3.0).backward()
    assert unused.tensor.grad is None
    assert np.allclose(used.tensor.grad, 0.75)


@pytest.mark.parametrize(
    "build",
    [
        lambda t: ad.mean(t + t * 2.0),
        lambda t: ad.mean(t - t * 0.5),
        lambda t: ad.mean(t * t),
        lambda t: ad.mean(ad.pow_scalar(t + 3.0, 0.7)),
        lambda t: ad.mean(ad.pow_scalar(t, 3)),
        lambda t: ad.mean(ad.sigmoid(t)),
        lambda t: ad.mean(ad.relu(t + 0.05)),
        lambda t: ad.mean(ad.log(t + 3.0)),
        lambda t: ad.mean(ad.softmax_rows(t) * ad.pow_scalar(t + 3.0, 2)),
    ],
    ids=["add", "sub", "mul", "pow_frac", "pow_int", "sigmoid", "relu", "log", "softmax"],
)
def test_elementwise_ops_match_finite_differences(build):
    rng = np.random.default_rng(11)
    p = make_param(rng, (4, 6))
    err = ad.finite_difference_check(lambda: build(p.tensor), [p])
    assert err < 1e-4


def test_matmul_concat_match_finite_differences():
    rng = np.random.default_rng(12)
    a = make_param(rng, (3, 4), "a")
    b = make_param(rng, (4, 5), "b")
    c = make_param(rng, (3, 5), "c")

    def f():
        prod = ad.matmul(a.tensor, b.tensor)
        wide = ad.concat_cols(prod, c.tensor)
        tall = ad.concat_rows(wide, wide * 0.5)
        return ad.mean(ad.sigmoid(tall))

    assert ad.finite_difference_check(f, [a, b, c]) < 1e-4


def test_gather_segment_ops_match_finite_differences():
    rng = np.random.default_rng(13)
    p = make_param(rng, (6, 3))
    idx = np.array([0, 2, 2, 5, 1, 3, 3, 3])
    seg = np.array([0, 0, 1, 1, 2, 2, 3, 3])

    def f():
        g = ad.gather_rows(p.tensor, idx)
        s = ad.segment_sum(g, seg, 4)
        return ad.mean(s * s)

    assert ad.finite_difference_check(f, [p]) < 1e-4


def test_sparse_mm_matches_finite_differences_and_dense():
    rng = np.random.default_rng(14)
    rows = np.array([0, 0, 1, 2, 3, 3])
    cols = np.array([1, 2, 0, 3, 1, 2])
    pattern = ad.SparsePattern(rows, cols, (4, 4))
    vals = make_param(rng, (6, 1), "vals")
    dense = make_param(rng, (4, 3), "dense")

    out = ad.sparse_mm(pattern, vals.tensor, dense.tensor)
    full = np.zeros((4, 4))
    full[rows, cols] = vals.tensor.data.ravel()
    assert np.allclose(out.data, full @ dense.tensor.data, atol=1e-12)

    def f():
        return ad.mean(ad.relu(ad.sparse_mm(pattern, vals.tensor, dense.tensor)))

    assert ad.finite_difference_check(f, [vals, dense]) < 1e-4


def test_segment_sum_transpose_is_scatter():
    # The reduction is linear, so its vector-Jacobian product must equal a
    # plain scatter of the output gradient; finite differences confirm it.
    rng = np.random.default_rng(15)
    p = make_param(rng, (8, 2))
    seg = np.array([0, 1, 1, 0, 2, 2, 2, 0])
    weights = rng.normal(size=(3, 2))

    def f():
        return ad.mean(ad.segment_sum(p.tensor, seg, 3) * weights)

    assert ad.finite_difference_check(f, [p]) < 1e-4
    p.tensor.grad = None
    f().backward()
    assert np.allclose(p.tensor.grad, weights[seg] / 6.0)


def test_two_layer_network_matches_finite_differences():
    rng = np.random.default_rng(16)
    x = rng.uniform(-2, 2, size=(5, 4))
    w1 = make_param(rng, (4, 8), "w1")
    w2 = make_param(rng, (8, 3), "w2")

    def f():
        h = ad.relu(ad.matmul(ad.Tensor(x), w1.tensor) + 0.1)
        return ad.mean(ad.softmax_rows(ad.matmul(h, w2.tensor)) * rng_weights)

    rng_weights = rng.normal(size=(5, 3))
    assert ad.finite_difference_check(f, [w1, w2]) < 1e-4


def test_linear_function_fd_error_near_machine_precision():
    rng = np.random.default_rng(17)
    p = make_param(rng, (3, 3))
    coeff = rng.normal(size=(3, 3))
    err = ad.finite_difference_check(lambda: ad.mean(p.tensor * coeff), [p])
    assert err < 1e-7


def test_backward_requires_scalar():
    t = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ad.AutodiffError):
        (t * 2.0).backward()


def test_shape_mismatch_rejected_with_op_name():
    with pytest.raises(ad.AutodiffError, match="matmul"):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))
    with pytest.raises(ad.AutodiffError, match="concat_cols"):
        ad.concat_cols(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((3, 3))))
    with pytest.raises(ad.AutodiffError, match="add"):
        ad.add(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 4))))


def test_non_finite_output_rejected():
    with np.errstate(over="ignore"), pytest.raises(ad.AutodiffError, match="non-finite"):
        ad.mul(ad.Tensor([1e308]), ad.Tensor([1e308]))


def test_finite_checks_can_be_disabled():
    with np.errstate(over="ignore"), ad.finite_checks(False):
        out = ad.mul(ad.Tensor([1e308]), ad.Tensor([1e308]))
    assert np.isinf(out.data[0])


def test_no_grad_blocks_recording():
    p = ad.Parameter("p", np.ones((2, 2)))
    with ad.no_grad():
        out = ad.mean(p.tensor * 2.0)
    assert out._vjp is None and not out.requires_grad


def test_adam_zero_grad_from_fresh_state_is_fixed_point():
    p = ad.Parameter("p", np.array([1.0, -2.0]))
    before = p.tensor.data.copy()
    opt = ad.Adam([p], lr=0.5)
    p.tensor.grad = np.zeros(2)
    opt.step()
    assert np.array_equal(p.tensor.data, before)
    assert p.step == 1


def test_adam_first_step_is_signed_lr():
    p = ad.Parameter("p", np.array([0.0, 0.0]))
    opt = ad.Adam([p], lr=0.01)
    p.tensor.grad = np.array([0.3, -7.0])
    opt.step()
    # Bias-corrected first step moves by ~lr in the negative gradient direction.
    assert np.allclose(p.tensor.data, [-0.01, 0.01], atol=1e-6)


def test_adam_converges_on_scalar_quadratic():
    # Independent scalar reference: same update rule written out longhand.
    def reference(lr, steps):
        w, m, v, b1, b2, eps = 0.0, 0.0, 0.0, 0.9, 0.999, 1e-8
        for t in range(1, steps + 1):
            g = 2.0 * (w - 3.0)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        return w

    p = ad.Parameter("w", np.array([0.0]))
    opt = ad.Adam([p], lr=0.1)
    for _ in range(100):
        opt.zero_grad()
        diff = p.tensor - 3.0
        ad.mean(diff * diff).backward()
        opt.step()
    assert abs(p.tensor.data[0] - 3.0) < 0.1
    assert np.isclose(p.tensor.data[0], reference(0.1, 100), atol=1e-12)


def test_adam_rejects_non_finite_gradient():
    p = ad.Parameter("p", np.array([1.0]))
    p.tensor.grad = np.array([np.nan])
    with pytest.raises(ad.AutodiffError, match="non-finite gradient"):
        ad.Adam([p]).step()


def test_grad_accumulates_until_cleared():
    p = ad.Parameter("p", np.array([2.0]))
    ad.mean(p.tensor * 3.0).backward()
    ad.mean(p.tensor * 3.0).backward()
    assert np.allclose(p.tensor.grad, 6.0)
    p.tensor.zero_grad()
    assert p.tensor.grad is None
