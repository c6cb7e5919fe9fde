import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import central_diff, max_rel_err
from kitt import autodiff as ad
from kitt.autodiff import Parameter, TapeError, Tensor


def gradcheck(build, shapes, seed=0, h=1e-6, tol=1e-5):
    """Compare backward() with central differences of sum(R * build(*leaves))."""
    rng = np.random.default_rng(seed)
    leaves = [Parameter(rng.normal(size=s), f"p{i}") for i, s in enumerate(shapes)]
    out = build(*leaves)
    R = rng.normal(size=out.shape)
    out.backward(R)

    def f():
        with ad.no_grad():
            return float(np.sum(R * build(*leaves).data))

    for p in leaves:
        fd = central_diff(f, p.data, h)
        assert p.grad is not None and p.grad.shape == p.data.shape
        assert max_rel_err(p.grad, fd) < tol, (p.name, p.grad, fd)


OPS = {
    "matmul_2d": (lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)]),
    "matmul_batched_weight": (lambda a, b: ad.matmul(a, b), [(2, 3, 4), (4, 5)]),
    "matmul_batched": (lambda a, b: ad.matmul(a, b), [(2, 3, 4), (2, 4, 2)]),
    "matmul_broadcast": (lambda a, b: ad.matmul(a, b), [(2, 3, 3, 4), (3, 4, 2)]),
    "add": (lambda a, b: ad.add(a, b), [(3, 4), (3, 4)]),
    "add_bias": (lambda a, b: ad.add(a, b), [(2, 3, 4), (4,)]),
    "scale": (lambda a: ad.scale(a, -1.7), [(3, 4)]),
    "relu": (lambda a: ad.relu(a), [(5, 4)]),
    "softmax": (lambda a: ad.softmax(a, -1), [(3, 5)]),
    "softmax_axis0": (lambda a: ad.softmax(a, 0), [(3, 5)]),
    "layernorm": (lambda x, g, b: ad.layernorm(x, g, b), [(2, 3, 6), (6,), (6,)]),
    "mean_pool": (lambda a: ad.mean(a, 1), [(2, 5, 3)]),
    "sum_all": (lambda a: ad.sum_all(a), [(3, 4)]),
    "embed": (lambda t: ad.embed([[0, 2, 2], [1, 0, 3]], t), [(4, 3)]),
    "concat": (lambda a, b: ad.concat([a, b], -1), [(2, 3), (2, 2)]),
    "mask_fill": (lambda a: ad.mask_fill(a, np.tril(np.ones((3, 3), bool)), -5.0), [(2, 3, 3)]),
    "reshape": (lambda a: ad.reshape(a, (4, 3)), [(2, 6)]),
    "transpose": (lambda a: ad.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
    "swap_last": (lambda a: ad.swap_last(a), [(2, 3, 4)]),
    "cross_entropy": (lambda a: ad.cross_entropy(a, [[0, 3], [2, 1]]), [(2, 2, 4)]),
    "cross_entropy_weighted": (lambda a: ad.cross_entropy(a, [1, 0, 2], [1.0, 0.0, 0.5]), [(3, 3)]),
    "composite": (lambda a, w, g, b: ad.mean(ad.layernorm(ad.relu(ad.matmul(a, w)), g, b), 1),
                  [(2, 4, 3), (3, 5), (5,), (5,)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradcheck(name):
    build, shapes = OPS[name]
    gradcheck(build, shapes)


def test_gradcheck_dropout_with_fixed_mask():
    def build(a):
        return ad.dropout(a, 0.3, True, np.random.default_rng(11))
    gradcheck(build, [(4, 5)])


def test_softmax_uniform_and_rows_sum_to_one():
    np.testing.assert_allclose(ad.softmax(Tensor(np.zeros(3))).data, np.full(3, 1 / 3), rtol=1e-15)
    s = ad.softmax(Tensor(np.random.default_rng(0).normal(size=(4, 7)) * 30)).data
    np.testing.assert_allclose(s.sum(-1), 1, rtol=1e-12)
    with pytest.raises(ValueError):
        ad.softmax(Tensor(np.zeros((2, 0))))


def test_layernorm_standardizes():
    out = ad.layernorm(Tensor(np.array([1.0, 2.0, 3.0])), np.ones(3), np.zeros(3), eps=0.0).data
    assert abs(out.mean()) < 1e-15
    assert out.var() == pytest.approx(1.0, rel=1e-12)


def test_dropout_semantics():
    x = Tensor(np.random.default_rng(0).normal(size=(100, 100)))
    assert ad.dropout(x, 0.0, True, np.random.default_rng(0)) is x
    assert ad.dropout(x, 0.5, False, None) is x
    out = ad.dropout(x, 0.25, True, np.random.default_rng(1)).data
    kept = out != 0
    np.testing.assert_allclose(out[kept], x.data[kept] / 0.75, rtol=1e-15)
    assert abs(kept.mean() - 0.75) < 0.02
    a = ad.dropout(x, 0.25, True, np.random.default_rng(1)).data
    np.testing.assert_array_equal(a, out)
    with pytest.raises(ValueError):
        ad.dropout(x, 1.0, True, np.random.default_rng(0))


def test_cross_entropy_limits():
    logits = np.array([[1e4, 0.0, 0.0]])
    assert ad.cross_entropy(Tensor(logits), [0]).data == pytest.approx(0.0, abs=1e-12)
    assert ad.cross_entropy(Tensor(np.zeros((2, 5))), [1, 4]).data == pytest.approx(math.log(5))
    with pytest.raises(ValueError):
        ad.cross_entropy(Tensor(np.zeros((2, 5))), [1])
    with pytest.raises(ValueError):
        ad.cross_entropy(Tensor(np.zeros((2, 5))), [1, 2], [0.0, 0.0])


def test_shape_errors():
    with pytest.raises(ValueError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ValueError):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))
    with pytest.raises(ValueError):
        ad.add(Tensor(np.zeros((3,))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ValueError):
        ad.embed([5], Tensor(np.zeros((3, 2))))


def test_sum_gradient_is_ones():
    x = Parameter(np.random.default_rng(0).normal(size=(3, 4)), "x")
    ad.sum_all(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_shared_subexpression_accumulates():
    x = Parameter(np.array([[2.0]]), "x")
    y = ad.matmul(x, x)
    ad.sum_all(ad.add(y, x)).backward()
    assert x.grad[0, 0] == pytest.approx(2 * 2.0 + 1)


def test_second_backward_raises():
    x = Parameter(np.ones(3), "x")
    loss = ad.sum_all(ad.scale(x, 2.0))
    loss.backward()
    with pytest.raises(TapeError):
        loss.backward()
    with pytest.raises(TapeError):
        ad.scale(x, 2.0).backward()


def test_no_grad_builds_no_tape():
    x = Parameter(np.ones(3), "x")
    with ad.no_grad():
        y = ad.scale(x, 2.0)
    assert not y.requires_grad


@pytest.mark.filterwarnings("ignore:overflow")
def test_debug_checks_trip_on_non_finite():
    with ad.debug_checks():
        with pytest.raises(FloatingPointError):
            ad.scale(Tensor(np.array([1e308])), 10.0)
    ad.scale(Tensor(np.array([1e308])), 10.0)


def test_backward_is_deterministic():
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
    grads = []
    for _ in range(2):
        W = Parameter(w.copy(), "w")
        ad.cross_entropy(ad.matmul(Tensor(x), W), [0, 1, 2, 3]).backward()
        grads.append(W.grad)
    np.testing.assert_array_equal(grads[0], grads[1])


def test_adam_zero_gradient_is_noop():
    p = Parameter(np.array([1.0, -2.0]), "p")
    p.grad = np.zeros(2)
    for step in range(1, 20):
        ad.adam_step([p], 1e-2, step)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def scalar_adam_oracle(g, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    updates = []
    for t in range(1, steps + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        updates.append(lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps))
    return updates


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 1e3), st.sampled_from([1e-4, 1e-3, 1e-2]))
def test_adam_constant_gradient_fixed_point(g, lr):
    p = Parameter(np.zeros(1), "p")
    prev, updates = 0.0, []
    for step in range(1, 201):
        p.grad = np.array([g])
        ad.adam_step([p], lr, step)
        updates.append(prev - p.data[0])
        prev = p.data[0]
    oracle = scalar_adam_oracle(g, lr, 200)
    np.testing.assert_allclose(updates, oracle, rtol=1e-9)
    assert updates[-1] == pytest.approx(lr, rel=1e-5)


def test_adam_skips_frozen_parameters():
    p = Parameter(np.ones(2), "p", trainable=False)
    p.grad = np.ones(2)
    ad.adam_step([p], 0.1, 1)
    np.testing.assert_array_equal(p.data, 1.0)


def test_clip_grad_norm():
    a, b = Parameter(np.zeros(2), "a"), Parameter(np.zeros(1), "b")
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert ad.clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert math.sqrt(np.sum(a.grad ** 2) + np.sum(b.grad ** 2)) == pytest.approx(1.0, rel=1e-9)
