import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from visaff import numcore as nc
from visaff.numcore import Parameter


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def test_matmul_identity_and_naive(rng):
    x = rng.standard_normal((3, 4))
    assert np.array_equal(nc.matmul(nc.constant(np.eye(3)), nc.constant(x)).data, x)
    for _ in range(5):
        n, k, m = rng.integers(1, 6, size=3)
        a, b = rng.standard_normal((n, k)), rng.standard_normal((k, m))
        np.testing.assert_allclose(nc.matmul(nc.constant(a), nc.constant(b)).data, naive_matmul(a, b), atol=1e-12)


def test_shape_errors():
    with pytest.raises(nc.ShapeError):
        nc.matmul(nc.constant(np.ones((2, 3))), nc.constant(np.ones((2, 3))))
    with pytest.raises(nc.ShapeError):
        nc.add(nc.constant(np.ones((2, 3))), nc.constant(np.ones(2)))


def test_relu():
    assert nc.relu(nc.constant(np.array([-1.0, 0.0, 2.0]))).data.tolist() == [0.0, 0.0, 2.0]


def test_softmax_examples():
    np.testing.assert_allclose(nc.softmax(nc.constant(np.zeros(3))).data, np.full(3, 1 / 3), atol=1e-15)
    base = nc.softmax(nc.constant(np.array([0.0, 0.5, 1.0]))).data
    shifted = nc.softmax(nc.constant(np.array([7.0, 7.5, 8.0]))).data
    np.testing.assert_allclose(base, shifted, atol=1e-15)


@given(st.lists(st.floats(-50, 50), min_size=6, max_size=6), st.floats(0.05, 10))
def test_softmax_oracle(x, tau):
    x = np.array(x)
    got = nc.softmax(nc.constant(x), temperature=tau).data
    ref = np.exp(x / tau - (x / tau).max())
    ref /= ref.sum()
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-300)
    assert abs(got.sum() - 1.0) < 1e-12
    assert np.all(got > 0) or np.any(np.abs(x / tau - (x / tau).max()) > 700)


def test_cross_entropy_examples(rng):
    logits = np.zeros(4)
    logits[2] = 1e6
    assert nc.cross_entropy(nc.constant(logits), 2).item() < 1e-6
    assert math.isclose(nc.cross_entropy(nc.constant(np.zeros(4)), 1).item(), math.log(4), rel_tol=1e-15)
    for _ in range(20):
        z = rng.standard_normal(6) * 3
        y = int(rng.integers(6))
        ref = -math.log(math.exp(z[y]) / sum(math.exp(v) for v in z))
        assert abs(nc.cross_entropy(nc.constant(z), y).item() - ref) < 1e-10
    with pytest.raises(ValueError):
        nc.cross_entropy(nc.constant(np.zeros(3)), 3)


def test_backward_sum_and_quadratic(rng):
    x = Parameter("x", rng.standard_normal(5))
    nc.backward(nc.sum_all(x))
    assert np.array_equal(x.grad, np.ones(5))
    a = rng.standard_normal((4, 4))
    a = a + a.T
    v = Parameter("v", rng.standard_normal((4, 1)))
    nc.backward(nc.sum_all(nc.matmul(nc.transpose(v), nc.matmul(nc.constant(a), v))))
    np.testing.assert_allclose(v.grad, 2 * a @ v.data, atol=1e-12)


def test_backward_requires_scalar():
    with pytest.raises(nc.ShapeError):
        nc.backward(Parameter("x", np.ones(3)))


def test_diamond_accumulates(rng):
    x = Parameter("x", rng.standard_normal(3))
    y = nc.tanh(x)
    out = nc.sum_all(nc.add(nc.mul(y, y), nc.scale(y, 3.0)))
    nc.backward(out)
    t = np.tanh(x.data)
    np.testing.assert_allclose(x.grad, (2 * t + 3) * (1 - t ** 2), atol=1e-12)


PRIMITIVES = {
    "matmul": lambda a, b: nc.matmul(a, b),
    "add_bias": lambda a, b: nc.add(nc.matmul(a, b), nc.constant(np.arange(2.0))),
    "tanh": lambda a, b: nc.tanh(nc.matmul(a, b)),
    "exp": lambda a, b: nc.exp(nc.scale(nc.matmul(a, b), 0.3)),
    "log": lambda a, b: nc.log(nc.add(nc.mul(nc.matmul(a, b), nc.matmul(a, b)), nc.constant(np.ones((3, 2))))),
    "relu": lambda a, b: nc.relu(nc.matmul(a, b)),
    "concat": lambda a, b: nc.concat([nc.matmul(a, b), a], axis=-1),
    "softmax": lambda a, b: nc.softmax(nc.matmul(a, b), temperature=0.7),
    "masked_softmax": lambda a, b: nc.softmax(nc.matmul(a, nc.transpose(a)), mask=np.tril(np.ones((3, 3), bool))),
    "log_softmax": lambda a, b: nc.log_softmax(nc.matmul(a, b)),
    "row_max": lambda a, b: nc.row_max(nc.softmax(nc.matmul(a, b))),
    "scale_rows": lambda a, b: nc.scale_rows(nc.matmul(a, b), nc.tanh(nc.pick(nc.matmul(a, b), np.zeros(3, int)))),
    "l2_normalize": lambda a, b: nc.l2_normalize(nc.matmul(a, b)),
    "cross_entropy": lambda a, b: nc.cross_entropy(nc.matmul(a, b), np.array([0, 1, 1])),
    "sub_transpose": lambda a, b: nc.sub(nc.transpose(nc.matmul(a, b)), nc.transpose(nc.tanh(nc.matmul(a, b)))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_grad_check_ten_points(name):
    for seed in range(10):
        r = np.random.default_rng([seed, 99])
        a = Parameter("a", r.standard_normal((3, 4)))
        b = Parameter("b", r.standard_normal((4, 2)))
        w = r.standard_normal(PRIMITIVES[name](a, b).shape)

        def f():
            out = PRIMITIVES[name](a, b)
            return nc.sum_all(nc.mul(out, nc.constant(w))) if out.data.ndim else out

        assert nc.grad_check(f, [a, b]) < 1e-4, name


def test_grad_check_quadratic_and_mutation(rng):
    x = Parameter("x", rng.standard_normal(4))
    assert nc.grad_check(lambda: nc.sum_all(nc.mul(x, x)), [x]) < 1e-8

    def doubled(a):
        # sum(a^2) with a backward rule that is off by a factor of 2
        return nc._node(np.sum(a.data ** 2), [a], lambda g: [4.0 * a.data * g])

    x2 = Parameter("x2", rng.standard_normal(4) + 2.0)
    assert nc.grad_check(lambda: doubled(x2), [x2]) > 0.4


def test_checkpoint_round_trip(rng):
    params = {"a.w": Parameter("a.w", rng.standard_normal((2, 3))), "b": Parameter("b", rng.standard_normal(4))}
    text = nc.dumps_checkpoint(params, {"note": "x"})
    assert text.splitlines()[0].startswith('{') and '"schema": "visaff-ckpt/1"' in text.splitlines()[0]
    header, arrays = nc.loads_checkpoint(text)
    assert header["note"] == "x"
    for k, p in params.items():
        assert np.array_equal(arrays[k], p.data)
    with pytest.raises(ValueError):
        nc.loads_checkpoint('{"schema": "other"}\n')
