import numpy as np
import numpy.testing as npt
import pytest

from larmoe import diffcore as dc


def test_matmul_identity():
    a = dc.Node([[1.0, 2.0], [3.0, 4.0]])
    eye = dc.Node(np.eye(2))
    npt.assert_array_equal(dc.matmul(a, eye).value, [[1.0, 2.0], [3.0, 4.0]])


def test_softmax_uniform_on_equal_logits():
    p = dc.softmax(dc.Node([0.0, 0.0, 0.0, 0.0]))
    npt.assert_allclose(p.value, [0.25, 0.25, 0.25, 0.25], rtol=0, atol=1e-15)


def test_softmax_direct_evaluation():
    # e^x / sum e^x at [1, 2, 3]
    p = dc.softmax(dc.Node([1.0, 2.0, 3.0]))
    npt.assert_allclose(p.value, [0.09003, 0.24473, 0.66524], atol=1e-5)


def test_softmax_no_overflow_on_large_logits():
    p = dc.softmax(dc.Node([1000.0, 0.0]))
    assert np.all(np.isfinite(p.value))
    npt.assert_allclose(p.value, [1.0, 0.0], atol=1e-300)


def test_softmax_rows_sum_to_one_and_nonnegative():
    rng = np.random.default_rng(3)
    x = dc.Node(rng.uniform(-50, 50, (20, 7)))
    p = dc.softmax(x).value
    assert np.all(p >= 0)
    npt.assert_allclose(p.sum(axis=-1), np.ones(20), rtol=0, atol=1e-12)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(4)
    v = rng.uniform(-3, 3, (5, 6))
    base = dc.softmax(dc.Node(v)).value
    shifted = dc.softmax(dc.Node(v + 17.25)).value
    npt.assert_allclose(shifted, base, rtol=0, atol=1e-12)


def test_backward_sum_gives_ones():
    x = dc.Node(np.arange(12.0).reshape(3, 4))
    dc.backward(dc.reduce_sum(x))
    npt.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_mse_self_is_zero():
    x = dc.Node([1.0, -2.0, 0.5])
    dc.backward(dc.mse(x, x))
    npt.assert_array_equal(x.grad, np.zeros(3))


def test_backward_requires_scalar_root():
    x = dc.Node([1.0, 2.0])
    with pytest.raises(dc.NonScalarRoot):
        dc.backward(dc.multiply(x, x))


def test_entropy_of_softmax_matches_finite_differences():
    logits = dc.Node([0.3, -0.1, 0.5])

    def loss():
        p = dc.softmax(logits)
        return dc.scalar_multiply(dc.reduce_sum(dc.multiply(p, dc.log(p))), -1.0)

    report = dc.finite_diff_check(loss, [logits], step=1e-5)
    assert report.max_rel_error < 1e-6


def test_gradient_accumulates_across_reuse():
    # y = x used k times vs k duplicated leaves
    k = 3
    x = dc.Node([0.7, -1.1])
    total = dc.reduce_sum(dc.multiply(x, x))
    for _ in range(k - 1):
        total = dc.add(total, dc.reduce_sum(dc.multiply(x, x)))
    dc.backward(total)

    copies = [dc.Node([0.7, -1.1]) for _ in range(k)]
    ref = copies[0]
    total2 = dc.reduce_sum(dc.multiply(copies[0], copies[0]))
    for c in copies[1:]:
        total2 = dc.add(total2, dc.reduce_sum(dc.multiply(c, c)))
    dc.backward(total2)
    npt.assert_allclose(x.grad, k * np.asarray(ref.grad), rtol=0, atol=1e-14)


def test_epsilon_guards_finite_at_zero():
    zero = dc.Node(np.zeros(4))
    for op in (dc.log, dc.sqrt, dc.row_norm):
        out = op(zero)
        assert np.all(np.isfinite(out.value))
        dc.zero_grad([zero])
        dc.backward(dc.reduce_sum(out))
        assert np.all(np.isfinite(zero.grad))


def test_shape_mismatch_error_names_op_and_shapes():
    a = dc.Node(np.zeros((2, 3)))
    b = dc.Node(np.zeros((4, 5)))
    with pytest.raises(dc.ShapeMismatch) as err:
        dc.matmul(a, b)
    msg = str(err.value)
    assert "matmul" in msg and "(2, 3)" in msg and "(4, 5)" in msg


def test_unsupported_kind_raises():
    with pytest.raises(dc.UnsupportedOp):
        dc.forward_op("cholesky", dc.Node(np.eye(2)))


def test_forward_op_dispatch():
    out = dc.forward_op("add", dc.Node([1.0]), dc.Node([2.0]))
    npt.assert_array_equal(out.value, [3.0])


def test_finite_diff_sum_of_squares():
    x = dc.Node([1.0, 2.0, 3.0])
    report = dc.finite_diff_check(lambda: dc.reduce_sum(dc.multiply(x, x)), [x], step=1e-5)
    assert report.max_rel_error < 1e-7
    # analytic gradient of sum(x^2) is 2x
    dc.zero_grad([x])
    dc.backward(dc.reduce_sum(dc.multiply(x, x)))
    npt.assert_allclose(x.grad, [2.0, 4.0, 6.0], rtol=1e-12)


def test_finite_diff_constant_function():
    x = dc.Node([0.5, -0.5])
    c = dc.Node([4.0])
    report = dc.finite_diff_check(lambda: dc.reduce_sum(c), [x], step=1e-5)
    assert report.max_rel_error < 1e-7


def test_finite_diff_rejects_nonscalar():
    x = dc.Node([1.0, 2.0])
    with pytest.raises(dc.NonScalarRoot):
        dc.finite_diff_check(lambda: dc.multiply(x, x), [x])


def test_narrow_backward_scatters():
    x = dc.Node(np.arange(12.0).reshape(3, 4))
    dc.backward(dc.reduce_sum(dc.narrow(x, (slice(1, 3), slice(0, 2)))))
    expected = np.zeros((3, 4))
    expected[1:3, 0:2] = 1.0
    npt.assert_array_equal(x.grad, expected)


def test_concatenate_backward_splits():
    a = dc.Node(np.ones((2, 2)))
    b = dc.Node(np.ones((2, 3)))
    out = dc.concatenate([a, b], axis=1)
    dc.backward(dc.reduce_sum(dc.multiply(out, dc.Node(np.arange(10.0).reshape(2, 5)))))
    npt.assert_array_equal(a.grad, [[0.0, 1.0], [5.0, 6.0]])
    npt.assert_array_equal(b.grad, [[2.0, 3.0, 4.0], [7.0, 8.0, 9.0]])


def test_broadcast_add_backward_sums():
    x = dc.Node(np.zeros((4, 3)))
    bias = dc.Node(np.zeros(3))
    dc.backward(dc.reduce_sum(dc.add(x, bias)))
    npt.assert_array_equal(bias.grad, [4.0, 4.0, 4.0])


def test_forward_outputs_finite_on_finite_inputs():
    rng = np.random.default_rng(11)
    x = dc.Node(rng.uniform(-2, 2, (4, 6)))
    y = dc.Node(rng.uniform(-2, 2, (4, 6)))
    pos = dc.Node(rng.uniform(0, 2, (4, 6)))
    outs = [
        dc.add(x, y), dc.subtract(x, y), dc.multiply(x, y),
        dc.tanh(x), dc.relu(x), dc.exp(x), dc.log(pos), dc.sqrt(pos),
        dc.softmax(x), dc.row_norm(x), dc.reduce_mean(x),
    ]
    for out in outs:
        assert np.all(np.isfinite(out.value)), out.op


# ---------------------------------------------------------------------------
# randomized finite-difference sweep over the full op set
# ---------------------------------------------------------------------------

def _sample_away_from(rng, shape, lo, hi, exclude=None, margin=1e-3):
    x = rng.uniform(lo, hi, shape)
    if exclude is not None:
        near = np.abs(x - exclude) < margin
        x[near] = exclude + margin * np.sign(x[near] - exclude + 0.5)
    return x


def op_gradcheck_cases(rng):
    """One randomized scalar objective per supported op kind."""
    k = rng.uniform(-1, 1, (3, 3))

    def u(shape, lo=-2.0, hi=2.0):
        return dc.Node(rng.uniform(lo, hi, shape))

    a, b = u((3, 4)), u((3, 4))
    m1, m2 = u((3, 4)), u((4, 2))
    pos = dc.Node(rng.uniform(0.01, 2.0, (3, 4)))
    den = dc.Node(rng.uniform(0.5, 2.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4)))
    kink = dc.Node(_sample_away_from(rng, (3, 4), -2.0, 2.0, exclude=0.0))
    conv_in = u((3, 4))
    cat_a, cat_b = u((2, 3)), u((2, 2))

    return {
        "add": ([a, b], lambda: dc.reduce_sum(dc.multiply(dc.add(a, b), dc.add(a, b)))),
        "subtract": ([a, b], lambda: dc.reduce_sum(dc.multiply(dc.subtract(a, b), dc.subtract(a, b)))),
        "multiply": ([a, b], lambda: dc.reduce_sum(dc.multiply(a, b))),
        "scalar_multiply": ([a], lambda: dc.reduce_sum(dc.scalar_multiply(dc.multiply(a, a), 1.7))),
        "divide": ([a, den], lambda: dc.reduce_sum(dc.divide(a, den))),
        "matmul": ([m1, m2], lambda: dc.reduce_sum(dc.multiply(dc.matmul(m1, m2), dc.matmul(m1, m2)))),
        "transpose": ([m1], lambda: dc.reduce_sum(dc.multiply(dc.transpose(m1), dc.transpose(m1)))),
        "reshape": ([a], lambda: dc.reduce_sum(dc.multiply(dc.reshape(a, (2, 6)), dc.reshape(a, (2, 6))))),
        "concatenate": ([cat_a, cat_b], lambda: dc.reduce_sum(
            dc.multiply(dc.concatenate([cat_a, cat_b], axis=1), dc.concatenate([cat_a, cat_b], axis=1)))),
        "slice": ([a], lambda: dc.reduce_sum(dc.multiply(
            dc.narrow(a, (slice(0, 2), slice(1, 3))), dc.narrow(a, (slice(0, 2), slice(1, 3)))))),
        "tanh": ([a], lambda: dc.reduce_sum(dc.tanh(a))),
        "relu": ([kink], lambda: dc.reduce_sum(dc.multiply(dc.relu(kink), dc.relu(kink)))),
        "exp": ([a], lambda: dc.reduce_sum(dc.exp(a))),
        "log": ([pos], lambda: dc.reduce_sum(dc.log(pos))),
        "sqrt": ([pos], lambda: dc.reduce_sum(dc.sqrt(pos))),
        "sum": ([a], lambda: dc.reduce_sum(dc.multiply(dc.reduce_sum(a, axis=0), dc.reduce_sum(a, axis=0)))),
        "mean": ([a], lambda: dc.reduce_sum(dc.multiply(dc.reduce_mean(a, axis=1), dc.reduce_mean(a, axis=1)))),
        "row_norm": ([a], lambda: dc.reduce_sum(dc.row_norm(a))),
        "softmax": ([a], lambda: dc.reduce_sum(dc.multiply(dc.softmax(a), dc.softmax(a)))),
        "conv2d": ([conv_in], lambda: dc.reduce_sum(
            dc.multiply(dc.conv2d_same(conv_in, k), dc.conv2d_same(conv_in, k)))),
    }


@pytest.mark.parametrize("kind", sorted(dc.OPS))
def test_randomized_gradcheck_per_op(kind, trials=100):
    rng = np.random.default_rng(hash(kind) % (2**32))
    worst = 0.0
    for _ in range(trials):
        params, fn = op_gradcheck_cases(rng)[kind]
        report = dc.finite_diff_check(fn, params, step=1e-5)
        worst = max(worst, report.max_rel_error)
    assert worst <= 1e-4, f"{kind}: max rel err {worst:.3e}"
