import numpy as np
import pytest

from oracles import bilinear_scalar
from rddlite.tensor import (GradTape, Tensor, bilinear_sample, conv2d, grad_check, matmul,
                            resize_bilinear, softmax, tsum)


# bilinear_sample

def test_bilinear_mean_of_corners():
    m = np.array([[0.0, 1.0], [2.0, 3.0]])[..., None]
    assert bilinear_sample(m, [[0.5, 0.5]]).data[0, 0] == pytest.approx(1.5, abs=1e-15)


def test_bilinear_integer_points_exact(rng):
    m = rng.normal(size=(5, 7, 3))
    for x, y in [(0, 0), (6, 4), (3, 2)]:
        np.testing.assert_array_equal(bilinear_sample(m, [[x, y]]).data[0], m[y, x])


def test_bilinear_matches_scalar_oracle(rng, backend):
    m = rng.normal(size=(5, 5, 2))
    got = bilinear_sample(m, [[1.25, 2.75]]).data[0]
    np.testing.assert_allclose(got, bilinear_scalar(m, 1.25, 2.75), atol=1e-12)
    pts = rng.uniform(-2, 7, size=(40, 2))
    got = bilinear_sample(m, pts).data
    ref = np.array([bilinear_scalar(m, x, y) for x, y in pts])
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_bilinear_errors():
    with pytest.raises(ValueError):
        bilinear_sample(np.zeros((0, 0, 1)), [[0.0, 0.0]])
    with pytest.raises(ValueError):
        bilinear_sample(np.zeros((3, 3, 1)), [[np.nan, 0.0]])
    with pytest.raises(ValueError):
        bilinear_sample(np.zeros((1, 3, 1)), [[0.0, 0.0]])


def test_bilinear_linear_along_axis(rng):
    m = rng.normal(size=(4, 4, 1))
    xs = np.linspace(1.0, 2.0, 7)
    vals = bilinear_sample(m, np.stack([xs, np.full(7, 1.0)], 1)).data[:, 0]
    np.testing.assert_allclose(np.diff(vals, 2), 0.0, atol=1e-12)


def test_bilinear_coordinate_gradient_zero_outside(backend):
    m = np.arange(12.0).reshape(3, 4, 1)
    pts = Tensor(np.array([[-1.5, 1.0], [5.0, 1.2]]), requires_grad=True)
    with GradTape() as tape:
        y = tsum(bilinear_sample(m, pts))
    tape.backward(y)
    assert pts.grad[0, 0] == 0.0 and pts.grad[1, 0] == 0.0


# softmax

def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.zeros(3)).data, np.full(3, 1 / 3), atol=1e-15)
    np.testing.assert_allclose(softmax(np.array([np.log(2.0), 0.0])).data, [2 / 3, 1 / 3],
                               atol=1e-15)
    assert softmax(np.array([10.0, 0.0]), 0.1).data[0] >= 1 - 1e-9


def test_softmax_shift_invariant_and_ordered(rng):
    v = rng.normal(size=9)
    a = softmax(v, 0.7).data
    np.testing.assert_allclose(a, softmax(v + 123.0, 0.7).data, atol=1e-14)
    assert abs(a.sum() - 1) < 1e-9
    assert np.array_equal(np.argsort(a), np.argsort(v))


def test_softmax_rejects_bad_temperature():
    for t in (0.0, -1.0):
        with pytest.raises(ValueError):
            softmax(np.zeros(2), t)


def test_softmax_large_inputs_finite():
    assert np.all(np.isfinite(softmax(np.array([1e300, -1e300, 0.0])).data))


# conv2d

def test_conv_scaling():
    out = conv2d(np.ones((3, 3, 1)), np.full((1, 1, 1, 1), 2.0))
    np.testing.assert_array_equal(out.data, np.full((3, 3, 1), 2.0))


def test_conv_impulse_gives_mirrored_kernel(rng):
    x = np.zeros((3, 3, 1))
    x[1, 1, 0] = 1.0
    k = rng.normal(size=(3, 3, 1, 1))
    out = conv2d(x, k, pad=1).data[..., 0]
    np.testing.assert_allclose(out, k[::-1, ::-1, 0, 0], atol=1e-15)


def test_conv_matches_direct_sum(rng):
    x = rng.normal(size=(7, 6, 3))
    k = rng.normal(size=(3, 3, 3, 4))
    b = rng.normal(size=4)
    out = conv2d(x, k, b, stride=2, pad=1).data
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    Ho, Wo = (7 + 2 - 3) // 2 + 1, (6 + 2 - 3) // 2 + 1
    assert out.shape == (Ho, Wo, 4)
    for i in range(Ho):
        for j in range(Wo):
            for co in range(4):
                ref = b[co] + sum(xp[2 * i + u, 2 * j + v, c] * k[u, v, c, co]
                                  for u in range(3) for v in range(3) for c in range(3))
                assert abs(out[i, j, co] - ref) < 1e-12


def test_conv_output_shape():
    assert conv2d(np.zeros((4, 4, 1)), np.zeros((3, 3, 1, 2)), stride=2, pad=1).shape == (2, 2, 2)


def test_conv_errors():
    with pytest.raises(ValueError):
        conv2d(np.zeros((4, 4, 2)), np.zeros((3, 3, 1, 1)))
    with pytest.raises(ValueError):
        conv2d(np.zeros((4, 4, 1)), np.zeros((2, 2, 1, 1)))
    with pytest.raises(ValueError):
        conv2d(np.zeros((4, 4, 1)), np.zeros((3, 3, 1, 1)), stride=0)


# tape and grad_check

def test_grad_check_quadratic(rng):
    assert grad_check(lambda x: tsum(x * x), rng.normal(size=(4, 3))) <= 1e-6


def test_grad_check_softmax_dot(rng):
    w = rng.normal(size=6)
    assert grad_check(lambda x: tsum(softmax(x, 0.5) * w), rng.normal(size=6)) <= 1e-4


def test_grad_check_bilinear_points(rng, backend):
    m = rng.normal(size=(6, 6, 2))
    pts = rng.uniform(0.5, 4.5, size=(5, 2))
    pts = np.where(np.abs(pts - np.round(pts)) < 0.05, pts + 0.1, pts)
    assert grad_check(lambda p: tsum(bilinear_sample(m, p)), pts) <= 1e-4


def test_grad_check_eps_range_and_nonfinite():
    with pytest.raises(ValueError):
        grad_check(lambda x: tsum(x), np.ones(2), eps=1e-8)
    with pytest.raises(FloatingPointError):
        grad_check(lambda x: tsum(x) * np.inf, np.ones(2))


def test_tape_accumulates_into_leaves(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    with GradTape() as tape:
        y = tsum(matmul(a, b)) + tsum(a)
    tape.backward(y)
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T + 1.0)
    np.testing.assert_allclose(b.grad, a.data.T @ np.ones((3, 2)))
    assert a.grad.shape == a.shape


def test_no_recording_without_grad_inputs():
    with GradTape() as tape:
        tsum(Tensor(np.ones(3)) * 2.0)
    assert len(tape) == 0


def test_resize_gradient(rng):
    assert grad_check(lambda x: tsum(resize_bilinear(x, 8, 6) ** 2), rng.normal(size=(4, 3, 2))) \
        <= 1e-6
