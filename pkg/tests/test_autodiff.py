import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcp.autodiff import (
    Adam,
    AdamState,
    Tensor,
    adam_step,
    batch_norm1d,
    conv1d,
    cosine_similarity,
    dropout,
    euclidean_distance,
    finite_diff_gradcheck,
    flatten,
    linear,
    log_softmax,
    max_pool1d,
    mean,
    nudge_from_zero,
    nudge_pool_ties,
    relu,
    tsum,
)
from pcp.errors import NumericError, ShapeError, UsageError


def test_conv1d_known_values():
    x = Tensor(np.array([1, 2, 3, 4, 5.0]).reshape(1, 1, 5))
    w = Tensor(np.array([1, 0, -1.0]).reshape(1, 1, 3))
    np.testing.assert_array_equal(conv1d(x, w).data.ravel(), [-2, -2, -2])


def test_conv1d_full_frame_length():
    x = Tensor(np.zeros((1, 1, 2500)))
    w = Tensor(np.zeros((4, 1, 7)))
    assert conv1d(x, w, stride=3).shape == (1, 4, 832)


def test_conv1d_shape_mismatch_names_op():
    with pytest.raises(ShapeError, match="conv1d"):
        conv1d(Tensor(np.zeros((1, 2, 10))), Tensor(np.zeros((4, 1, 3))))


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(1, 3),
    c_in=st.integers(1, 3),
    c_out=st.integers(1, 3),
    k=st.integers(1, 7),
    s=st.integers(1, 4),
    extra=st.integers(0, 30),
)
def test_conv1d_shape_formula(n, c_in, c_out, k, s, extra):
    length = k + extra
    out = conv1d(Tensor(np.ones((n, c_in, length))), Tensor(np.ones((c_out, c_in, k))), stride=s)
    assert out.shape == (n, c_out, (length - k) // s + 1)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 3), c=st.integers(1, 3), w=st.integers(1, 4), length=st.integers(4, 40))
def test_maxpool_shape_formula(n, c, w, length):
    assert max_pool1d(Tensor(np.ones((n, c, length))), w).shape == (n, c, length // w)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 5), i=st.integers(1, 6), o=st.integers(1, 6))
def test_linear_and_flatten_shapes(n, i, o):
    out = linear(Tensor(np.ones((n, i))), Tensor(np.ones((i, o))), Tensor(np.ones(o)))
    assert out.shape == (n, o)
    assert flatten(Tensor(np.ones((n, i, o)))).shape == (n, i * o)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 20))
    w = rng.standard_normal((4, 3, 5))
    b = rng.standard_normal(4)
    out = conv1d(Tensor(x), Tensor(w), Tensor(b), stride=3).data
    l_out = (20 - 5) // 3 + 1
    ref = np.zeros((2, 4, l_out))
    for n in range(2):
        for o in range(4):
            for t in range(l_out):
                ref[n, o, t] = b[o] + sum(
                    w[o, c, j] * x[n, c, 3 * t + j] for c in range(3) for j in range(5)
                )
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_backward_sum_and_mean():
    x = Tensor(np.arange(4.0), requires_grad=True)
    tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones(4))
    y = Tensor(np.arange(4.0), requires_grad=True)
    mean(y).backward()
    np.testing.assert_array_equal(y.grad, np.full(4, 0.25))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError):
        (x * 2.0).backward()


def test_backward_twice_errors_unless_accumulating():
    x = Tensor(np.ones(3), requires_grad=True)
    tsum(x * 3.0).backward()
    with pytest.raises(UsageError):
        tsum(x * 3.0).backward()
    tsum(x * 3.0).backward(accumulate=True)
    np.testing.assert_array_equal(x.grad, np.full(3, 6.0))


def test_shared_subexpression_gradient():
    x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    y = x * x
    tsum(y + y).backward()
    np.testing.assert_array_equal(x.grad, 4 * x.data)


def test_checked_mode_rejects_non_finite():
    with pytest.raises(NumericError):
        Tensor(np.array([1.0])) / Tensor(np.array([0.0]))


# -- gradient suite: >= 20 random points per primitive -------------------

POINTS = 20
TOL = 1e-4


def _points(seed):
    return [np.random.default_rng(seed * 1000 + i) for i in range(POINTS)]


def _check_all(make_inputs, fn, seed, tol=TOL):
    worst = max(finite_diff_gradcheck(fn, make_inputs(rng), eps=1e-5) for rng in _points(seed))
    assert worst < tol, worst
    return worst


def test_grad_linear():
    worst = _check_all(
        lambda r: [r.standard_normal((3, 4)), r.standard_normal((4, 2)), r.standard_normal(2)],
        linear,
        1,
    )
    assert worst < 1e-6


def test_grad_conv1d():
    _check_all(
        lambda r: [r.standard_normal((2, 2, 17)), r.standard_normal((3, 2, 7)), r.standard_normal(3)],
        lambda x, w, b: conv1d(x, w, b, stride=3),
        2,
    )


def test_grad_batchnorm_train():
    def fn(x, g, b):
        return batch_norm1d(x, g, b, np.zeros(3), np.ones(3), training=True)

    _check_all(lambda r: [r.standard_normal((4, 3, 5)), r.standard_normal(3), r.standard_normal(3)], fn, 3)


def test_grad_batchnorm_eval():
    rm, rv = np.array([0.1, -0.2]), np.array([0.5, 2.0])

    def fn(x, g, b):
        return batch_norm1d(x, g, b, rm.copy(), rv.copy(), training=False)

    _check_all(lambda r: [r.standard_normal((3, 2, 4)), r.standard_normal(2), r.standard_normal(2)], fn, 4)


def test_grad_relu():
    _check_all(lambda r: [nudge_from_zero(r.standard_normal((3, 5)))], relu, 5)


def test_grad_maxpool():
    _check_all(lambda r: [nudge_pool_ties(r.standard_normal((2, 3, 9)), 2)], lambda x: max_pool1d(x, 2), 6)


def test_grad_dropout_fixed_mask():
    def fn(x):
        return dropout(x, 0.3, training=True, rng=np.random.default_rng(11))

    _check_all(lambda r: [r.standard_normal((4, 6))], fn, 7)


def test_grad_cosine_similarity():
    _check_all(lambda r: [r.standard_normal((3, 4)), r.standard_normal((5, 4))], cosine_similarity, 8)


def test_grad_cosine_similarity_clamped_norm():
    _check_all(
        lambda r: [r.standard_normal((3, 4)) * 1e-3, r.standard_normal((2, 4))],
        lambda a, b: cosine_similarity(a, b, eps=0.1),
        9,
    )


def test_grad_log_softmax():
    _check_all(lambda r: [r.standard_normal((3, 5)) * 3], log_softmax, 10)


def test_grad_euclidean_distance():
    _check_all(lambda r: [r.standard_normal((3, 4)), r.standard_normal((2, 4))], euclidean_distance, 11)


def test_grad_elementwise_and_reductions():
    def fn(a, b):
        return mean(tsum((a * b + a - b * 2.0) / (b * b + 1.0), axis=1))

    _check_all(lambda r: [r.standard_normal((3, 4)), r.standard_normal((1, 4))], fn, 12)


def test_gradcheck_identity_is_exact():
    x = np.random.default_rng(0).standard_normal((3, 3))
    assert finite_diff_gradcheck(lambda t: t, [x]) < 1e-9


def test_gradcheck_reports_instead_of_raising():
    assert finite_diff_gradcheck(lambda t: t / Tensor(np.zeros(1)), [np.ones(2)]) == float("inf")


# -- dropout and batchnorm properties -------------------------------------


def test_dropout_eval_is_identity():
    x = Tensor(np.arange(6.0))
    assert dropout(x, 0.5, training=False) is x


def test_dropout_train_is_unbiased():
    n = 20000
    rate = 0.1
    out = dropout(Tensor(np.ones(n)), rate, training=True, rng=np.random.default_rng(0)).data
    se = math.sqrt(rate / (1 - rate)) / math.sqrt(n)
    assert abs(out.mean() - 1.0) < 3 * se


def test_batchnorm_train_normalizes():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((8, 3, 11)) * 5 + 2)
    out = batch_norm1d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), training=True)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2)), 0, atol=1e-5)
    np.testing.assert_allclose(out.data.var(axis=(0, 2)), 1, atol=1e-5)


def test_batchnorm_eval_uses_running_stats_only():
    rm, rv = np.array([1.0]), np.array([4.0])
    x = Tensor(np.array([[[1.0, 3.0, 5.0]]]))
    out = batch_norm1d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, training=False)
    np.testing.assert_allclose(out.data.ravel(), (x.data.ravel() - 1.0) / math.sqrt(4.0 + 1e-5))
    np.testing.assert_array_equal(rm, [1.0])


def test_batchnorm_running_update():
    rm, rv = np.zeros(1), np.ones(1)
    x = np.array([[[1.0, 3.0]]])
    batch_norm1d(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, training=True)
    np.testing.assert_allclose(rm, [0.2])
    np.testing.assert_allclose(rv, [0.9 + 0.1 * 2.0])


def test_cosine_zero_norm_raises():
    with pytest.raises(NumericError):
        cosine_similarity(Tensor(np.zeros((1, 2))), Tensor(np.ones((1, 2))))


def test_forward_backward_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((4, 1, 40)))
        w = Tensor(rng.standard_normal((3, 1, 7)), requires_grad=True)
        h = dropout(relu(conv1d(x, w, stride=3)), 0.1, True, rng=np.random.default_rng(9))
        loss = tsum(h * h)
        loss.backward()
        return loss.data.tobytes() + w.grad.tobytes()

    assert run() == run()


# -- Adam -----------------------------------------------------------------


def _scalar_adam_reference(grad_fn, w0, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    w, m, v = w0, 0.0, 0.0
    trace = []
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        w = w - lr * mhat / (math.sqrt(vhat) + eps)
        trace.append(w)
    return trace


@pytest.mark.parametrize(
    "grad_fn,w0,lr",
    [
        (lambda w: 2 * w, 1.0, 1e-2),
        (lambda w: 2 * w, 1.0, 1e-4),
        (lambda w: 4 * w**3 - 3.0, -0.5, 5e-2),
        (lambda w: math.cos(w), 0.3, 1e-1),
    ],
)
def test_adam_matches_scalar_reference(grad_fn, w0, lr):
    ref = _scalar_adam_reference(grad_fn, w0, 100, lr)
    p = np.array([w0])
    state = AdamState.for_params([p], learning_rate=lr)
    for t in range(100):
        adam_step([p], [np.array([grad_fn(p[0])])], state)
        assert abs(p[0] - ref[t]) < 1e-10
    assert state.step_count == 100


def test_adam_zero_gradient_is_noop():
    p = np.array([1.0, -2.0])
    state = AdamState.for_params([p])
    adam_step([p], [np.zeros(2)], state)
    np.testing.assert_array_equal(p, [1.0, -2.0])
    np.testing.assert_array_equal(state.first_moment[0], 0)
    np.testing.assert_array_equal(state.second_moment[0], 0)
    assert state.step_count == 1


@pytest.mark.parametrize("g", [3.7, -0.02])
def test_adam_first_step_is_lr_times_sign(g):
    p = np.array([0.5])
    state = AdamState.for_params([p], learning_rate=1e-4, epsilon=1e-8)
    adam_step([p], [np.array([g])], state)
    assert p[0] - 0.5 == pytest.approx(-1e-4 * np.sign(g), rel=1e-6)


def test_adam_shape_mismatch():
    p = np.zeros(2)
    state = AdamState.for_params([p])
    with pytest.raises(ShapeError):
        adam_step([p], [np.zeros(3)], state)


def test_adam_wrapper_optimizes_quadratic():
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([w], lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        tsum(w * w).backward()
        opt.step()
    assert abs(w.data[0]) < 0.05
