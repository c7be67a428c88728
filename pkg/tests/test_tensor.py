import math

import numpy as np
import pytest

from gaitscale import tensor as tc
from gaitscale.tensor import NonCheckablePoint, NonFiniteError, ShapeError, Tensor, grad_check

TOL = 1e-4


def weighted(op, shape_out, seed=0):
    """Scalar probe sum(op(x) * R) so every output coordinate contributes."""
    r = np.random.default_rng(seed).normal(size=shape_out)
    return lambda x: (op(x) * r).sum()


def test_tensor_shape_matches_data():
    t = Tensor(np.zeros((2, 3)))
    assert t.shape == (2, 3) and t.size == 6
    assert Tensor([1, 2]).dtype == np.float64


@pytest.mark.parametrize(
    "name,op,x,out_shape",
    [
        ("add", lambda x: tc.add(x, Tensor(np.arange(3.0))), (2, 3), (2, 3)),
        ("add_broadcast", lambda x: tc.add(Tensor(np.ones((2, 3))), x), (3,), (2, 3)),
        ("sub", lambda x: tc.sub(Tensor(np.arange(3.0)), x), (2, 3), (2, 3)),
        ("mul", lambda x: tc.mul(x, x), (2, 3), (2, 3)),
        ("div", lambda x: tc.div(Tensor(np.full((2, 3), 2.0)), x * x + 1.0), (2, 3), (2, 3)),
        ("exp", tc.exp, (2, 3), (2, 3)),
        ("log", lambda x: tc.log(x * x + 0.5), (2, 3), (2, 3)),
        ("sqrt", lambda x: tc.sqrt(x * x + 0.5), (2, 3), (2, 3)),
        ("sigmoid", tc.sigmoid, (2, 3), (2, 3)),
        ("silu", tc.silu, (2, 3), (2, 3)),
        ("sum_axis", lambda x: tc.sum_(x, axis=1), (2, 3), (2,)),
        ("mean_axis", lambda x: tc.mean(x, axis=0, keepdims=True), (2, 3), (1, 3)),
        ("matmul", lambda x: tc.matmul(x, Tensor(np.arange(12.0).reshape(3, 4) / 10)), (2, 3), (2, 4)),
        ("matmul_batched", lambda x: x @ tc.swapaxes(x, -1, -2), (2, 2, 3), (2, 2, 2)),
        ("reshape", lambda x: tc.reshape(x, (3, 2)), (2, 3), (3, 2)),
        ("permute", lambda x: tc.permute(x, (2, 0, 1)), (2, 3, 4), (4, 2, 3)),
        ("concat", lambda x: tc.concat([x, x * 2.0], axis=0), (2, 3), (4, 3)),
        ("slice", lambda x: tc.slice_(x, (slice(None), slice(1, 3))), (2, 3), (2, 2)),
        ("take", lambda x: tc.take(x, [2, 0, 2], axis=1), (2, 3), (2, 3)),
        ("take_along", lambda x: tc.take_along(x, np.array([[1], [2]]), axis=1), (2, 3), (2, 1)),
        ("softmax", tc.softmax, (2, 5), (2, 5)),
        ("rms_norm", lambda x: tc.rms_norm(x, Tensor(np.array([0.5, 1.0, 2.0]))), (2, 3), (2, 3)),
        ("l2_normalize", tc.l2_normalize, (2, 3), (2, 3)),
        ("linear", lambda x: tc.linear(x, Tensor(np.ones((3, 2))), scale=0.5), (2, 3), (2, 2)),
        ("clamp_min", lambda x: tc.clamp_min(x, -10.0), (2, 3), (2, 3)),
        ("min_lastdim", tc.min_lastdim, (2, 3), (2,)),
    ],
)
def test_primitive_grad_check(name, op, x, out_shape, rng):
    x0 = rng.normal(size=x)
    assert grad_check(weighted(op, out_shape), x0) < TOL


def test_rms_norm_gain_gradient(rng):
    x = Tensor(rng.normal(size=(4, 3)))
    assert grad_check(weighted(lambda g: tc.rms_norm(x, g), (4, 3)), rng.normal(size=3)) < TOL


def test_swiglu_grad_check_every_argument(rng):
    x = rng.normal(size=(3, 4))
    ws = [rng.normal(size=(4, 6)), rng.normal(size=(4, 6)), rng.normal(size=(6, 4))]
    f = weighted(lambda t: tc.swiglu_mlp(t, *map(Tensor, ws)), (3, 4))
    assert grad_check(f, x) < TOL
    for i in range(3):
        def g(w, i=i):
            args = [Tensor(a) for a in ws]
            args[i] = w
            return tc.swiglu_mlp(Tensor(x), *args)
        assert grad_check(weighted(g, (3, 4)), ws[i]) < TOL


def test_rms_norm_hand_values():
    out = tc.rms_norm(Tensor([3.0, 4.0]), Tensor(np.ones(2)), eps=0.0).data
    np.testing.assert_allclose(out, [3 / math.sqrt(12.5), 4 / math.sqrt(12.5)], atol=1e-12)
    np.testing.assert_allclose(out, [0.84853, 1.13137], atol=1e-5)
    np.testing.assert_allclose(tc.rms_norm(Tensor([2.0] * 3), Tensor(np.ones(3)), eps=1e-15).data, 1.0, atol=1e-12)
    assert np.all(tc.rms_norm(Tensor([0.0, 0.0]), Tensor(np.ones(2)), eps=1e-6).data == 0.0)


def test_rms_norm_output_rms_equals_constant_gain(rng):
    x = rng.normal(size=(10, 7))
    out = tc.rms_norm(Tensor(x), Tensor(np.full(7, 2.5)), eps=0.0).data
    np.testing.assert_allclose(np.sqrt(np.mean(out**2, axis=-1)), 2.5, atol=1e-10)


def test_rms_norm_rejects_empty_last_dim():
    with pytest.raises(ShapeError):
        tc.rms_norm(Tensor(np.zeros((2, 0))), Tensor(np.zeros(0)))


def test_softmax_hand_values(rng):
    np.testing.assert_allclose(tc.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(tc.softmax(Tensor([math.log(2), 0.0])).data, [2 / 3, 1 / 3], atol=1e-15)
    np.testing.assert_allclose(tc.softmax(Tensor([3.0, 3.0 - 1e9])).data, [1.0, 0.0], atol=1e-12)
    rows = tc.softmax(Tensor(rng.normal(size=(20, 9)) * 30)).data
    np.testing.assert_allclose(rows.sum(axis=-1), 1.0, atol=1e-12)


def test_swiglu_hand_values():
    one = Tensor(np.ones((1, 1)))
    out = tc.swiglu_mlp(Tensor([[1.0]]), one, one, one).data
    assert out[0, 0] == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-12)
    assert out[0, 0] == pytest.approx(0.731059, abs=1e-6)
    w = Tensor(np.ones((3, 5)))
    assert np.all(tc.swiglu_mlp(Tensor(np.zeros((2, 3))), w, w, Tensor(np.ones((5, 3)))).data == 0)
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert np.all(tc.swiglu_mlp(x, w, w, Tensor(np.zeros((5, 3)))).data == 0)


def test_swiglu_dimension_mismatch():
    with pytest.raises(ShapeError):
        tc.swiglu_mlp(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))), Tensor(np.ones((4, 5))), Tensor(np.ones((5, 4))))


def test_grad_check_polynomial():
    assert grad_check(lambda x: (x * x).sum(), np.array([3.0]), eps=1e-5) < 1e-6
    x = Tensor([3.0], requires_grad=True)
    (x * x).sum().backward()
    assert x.grad[0] == pytest.approx(6.0)


def test_grad_check_flags_ties():
    # both entries equal: the minimizer is ambiguous
    with pytest.raises(NonCheckablePoint):
        grad_check(lambda x: tc.min_lastdim(x).sum(), np.array([1.0, 1.0, 2.0]))
    with pytest.raises(NonCheckablePoint):
        grad_check(lambda x: tc.clamp_min(x, 0.5).sum(), np.array([0.5, 1.0]))


def test_non_finite_values_raise():
    with pytest.raises(NonFiniteError):
        tc.log(Tensor([0.0, 1.0]))
    with pytest.raises(NonFiniteError):
        grad_check(lambda x: tc.log(x).sum(), np.array([1e-7]), eps=1e-6)


def test_broadcast_mismatch_is_shape_error():
    with pytest.raises(ShapeError):
        tc.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(ShapeError):
        tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_backward_accumulates_shared_inputs(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    y = (x * 2.0 + x * x).sum()
    y.backward()
    np.testing.assert_allclose(x.grad, 2.0 + 2 * x.data)
