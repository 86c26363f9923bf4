"""Autodiff core: op gradients against central finite differences."""

import numpy as np
import pytest

from eventqa import autodiff as ad
from eventqa.autodiff import Tensor, backward, grad_check


def test_square_gradient_at_3():
    x = Tensor(3.0, requires_grad=True)
    y = ad.mul(x, x)
    backward(y)
    assert x.grad == pytest.approx(6.0, abs=1e-12)


def test_softmax_sum_gradient_is_zero():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=7), requires_grad=True)
    loss = ad.tsum(ad.softmax(x))
    assert loss.item() == pytest.approx(1.0, abs=1e-12)
    backward(loss)
    assert np.abs(x.grad).max() < 1e-12


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(17)
    w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    a = Tensor(rng.normal(size=(3, 1)))

    report = grad_check(lambda: ad.tsum(ad.matmul(w, a)), {"w": w},
                        tolerance=1e-6, h=1e-5)
    assert report["passed"], report["failures"]
    assert report["max_rel_error"] < 1e-6


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ad.mul(x, x)
    with pytest.raises(ValueError, match="scalar"):
        backward(y)


def test_disconnected_parameter_gets_zero_not_error():
    x = Tensor(2.0, requires_grad=True)
    unused = Tensor(np.ones(4), requires_grad=True)
    loss = ad.mul(x, x)
    grads = backward(loss)
    assert x in grads
    assert unused not in grads
    assert unused.grad is None  # treated as zero by the optimizer


def test_graph_consumed_after_backward():
    x = Tensor(1.5, requires_grad=True)
    y = ad.mul(x, x)
    backward(y)
    with pytest.raises(ValueError):
        backward(y)


def test_exp_gradcheck_tight():
    x = Tensor(0.0, requires_grad=True)
    report = grad_check(lambda: ad.exp(x), {"x": x}, tolerance=1e-8)
    assert report["passed"], report["failures"]
    x.zero_grad()
    loss = ad.exp(x)
    backward(loss)
    assert x.grad == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("seed", range(20))
def test_random_composite_matches_finite_differences(seed):
    """Property: composite graphs agree with numeric gradients (>= 20 seeds)."""
    rng = np.random.default_rng(seed)
    w1 = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    w2 = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3,)), requires_grad=True)
    x = Tensor(rng.normal(size=(2, 4)))

    def fn():
        h = ad.relu(ad.matmul(x, w1))
        out = ad.add(ad.matmul(h, w2), b)
        return ad.tsum(ad.mul(ad.softmax(out), out))

    report = grad_check(fn, {"w1": w1, "w2": w2, "b": b}, tolerance=1e-4)
    assert report["passed"], report["failures"]


@pytest.mark.parametrize("op,shape", [
    (ad.relu, (6,)), (ad.sigmoid, (6,)), (ad.tanh, (2, 3)),
    (ad.exp, (4,)), (lambda t: ad.log(ad.add(ad.mul(t, t), Tensor(1.0))), (5,)),
    (lambda t: ad.softmax(t, axis=-1), (3, 4)),
    (lambda t: ad.log_softmax(t, axis=-1), (3, 4)),
])
def test_unary_ops_gradcheck(op, shape):
    rng = np.random.default_rng(hash(str(shape)) % 2 ** 31)
    x = Tensor(rng.normal(size=shape), requires_grad=True)
    report = grad_check(lambda: ad.tsum(ad.mul(op(x), op(x))), {"x": x},
                        tolerance=1e-4)
    assert report["passed"], report["failures"]


def test_broadcast_add_mul_gradients():
    rng = np.random.default_rng(3)
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4,)), requires_grad=True)
    c = Tensor(rng.normal(size=(3, 1)), requires_grad=True)
    report = grad_check(
        lambda: ad.tsum(ad.mul(ad.add(a, b), c)),
        {"a": a, "b": b, "c": c}, tolerance=1e-5)
    assert report["passed"], report["failures"]


def test_batched_matmul_gradients():
    rng = np.random.default_rng(4)
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    report = grad_check(lambda: ad.tsum(ad.matmul(a, b)), {"a": a, "b": b},
                        tolerance=1e-5)
    assert report["passed"], report["failures"]


def test_embedding_gradient_scatter():
    table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    idx = np.array([[0, 2, 2], [3, 0, 0]])
    out = ad.embedding(table, idx)
    assert out.shape == (2, 3, 3)
    loss = ad.tsum(out)
    backward(loss)
    expected = np.zeros((4, 3))
    for i in idx.reshape(-1):
        expected[i] += 1.0
    np.testing.assert_array_equal(table.grad, expected)


def test_embedding_rejects_out_of_range():
    table = Tensor(np.zeros((4, 3)))
    with pytest.raises(IndexError):
        ad.embedding(table, np.array([4]))


def test_layer_norm_gradcheck():
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    gamma = Tensor(rng.normal(size=6) + 1.0, requires_grad=True)
    beta = Tensor(rng.normal(size=6), requires_grad=True)
    report = grad_check(
        lambda: ad.tsum(ad.mul(ad.layer_norm(x, gamma, beta),
                               ad.layer_norm(x, gamma, beta))),
        {"x": x, "gamma": gamma, "beta": beta}, tolerance=1e-4)
    assert report["passed"], report["failures"]


def test_masked_cross_entropy_gradcheck_and_value():
    rng = np.random.default_rng(12)
    logits = Tensor(rng.normal(size=(2, 4, 5)), requires_grad=True)
    targets = rng.integers(0, 5, size=(2, 4))
    mask = np.array([[1, 1, 1, 0], [1, 1, 0, 0]], dtype=float)

    # independent oracle: mean of -log softmax probabilities over the mask
    def oracle(data):
        shifted = data - data.max(axis=-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
        return -(picked * mask).sum() / mask.sum()

    loss = ad.masked_cross_entropy(logits, targets, mask)
    assert loss.item() == pytest.approx(oracle(logits.data), abs=1e-12)
    report = grad_check(
        lambda: ad.masked_cross_entropy(logits, targets, mask),
        {"logits": logits}, tolerance=1e-4)
    assert report["passed"], report["failures"]


def test_concat_getitem_roundtrip_gradients():
    rng = np.random.default_rng(8)
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 2)), requires_grad=True)

    def fn():
        joined = ad.concat([a, b], axis=1)
        return ad.tsum(ad.mul(joined[:, 1:4], joined[:, 1:4]))

    report = grad_check(fn, {"a": a, "b": b}, tolerance=1e-5)
    assert report["passed"], report["failures"]


def test_forward_determinism_bit_identical():
    rng = np.random.default_rng(21)
    w = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
    x = Tensor(rng.normal(size=(4, 6)))

    def run():
        return ad.tsum(ad.softmax(ad.matmul(x, w))).item()

    assert run() == run()


def test_grad_check_reports_nonfinite():
    x = Tensor(np.array([0.0]), requires_grad=True)

    def fn():
        return ad.tsum(ad.log(x))  # -inf at 0, gradient 1/x -> inf

    report = grad_check(fn, {"x": x}, tolerance=1e-4)
    assert not report["passed"]
    assert any(f["reason"] == "non-finite" for f in report["failures"])
    assert report["failures"][0]["param"] == "x"
    assert report["failures"][0]["entry"] == 0


def test_no_grad_blocks_recording():
    x = Tensor(2.0, requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad
    with pytest.raises(ValueError):
        backward(y)
