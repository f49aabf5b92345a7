import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from segkit import tensor as T
from segkit.tensor import LabelError, NonFiniteError, ShapeError, Tensor

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


# -- construction and validation ------------------------------------------

def test_constructor_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, float("nan")])
    with pytest.raises(NonFiniteError):
        Tensor(np.array([np.inf]))


def test_constructor_copies_and_keeps_float_dtypes():
    a = np.ones(3, dtype=np.float32)
    t = Tensor(a)
    a[0] = 5
    assert t.dtype == np.float32 and t.data[0] == 1
    assert Tensor([1, 2]).dtype == np.float64
    with pytest.raises(TypeError):
        Tensor([1], dtype="int32")


def test_validate_surfaces_non_finite_grad():
    t = Tensor([1.0, 2.0], requires_grad=True)
    t.grad = np.array([0.0, np.nan])
    with pytest.raises(NonFiniteError):
        t.validate()


def test_debug_flag_checks_every_op():
    T.set_debug(True)
    try:
        with pytest.raises(NonFiniteError):
            T.log(Tensor([0.0]))
    finally:
        T.set_debug(False)
    with np.errstate(divide="ignore"):
        assert np.isinf(T.log(Tensor([0.0])).data[0])


# -- matmul ---------------------------------------------------------------

def test_matmul_examples():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(a)).data, a)
    assert np.array_equal(T.matmul(Tensor(a), Tensor([[1.0], [1.0]])).data, [[3.0], [7.0]])
    b = np.random.default_rng(0).normal(size=(3, 4))
    assert np.array_equal(T.matmul(Tensor(np.zeros((2, 3))), Tensor(b)).data, np.zeros((2, 4)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_matmul_associative(m, k, n, p, seed):
    r = np.random.default_rng(seed)
    a, b, c = (Tensor(r.normal(size=s)) for s in ((m, k), (k, n), (n, p)))
    left = T.matmul(T.matmul(a, b), c).data
    right = T.matmul(a, T.matmul(b, c)).data
    assert np.max(np.abs(left - right)) < 1e-10


# -- softmax --------------------------------------------------------------

def test_softmax_examples():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    assert np.allclose(T.softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)
    x = np.random.default_rng(1).normal(size=7)
    assert np.allclose(T.softmax(Tensor(x + 100.0)).data, T.softmax(Tensor(x)).data, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=70), elements=finite), st.data())
def test_softmax_sums_to_one_and_nonnegative(x, data):
    axis = data.draw(st.integers(-x.ndim, x.ndim - 1))
    s = T.softmax(Tensor(x), axis=axis).data
    assert np.all(s >= 0)
    assert np.max(np.abs(s.sum(axis=axis) - 1.0)) < 1e-12


def test_softmax_axis_error():
    with pytest.raises(ShapeError):
        T.softmax(Tensor(np.zeros((2, 2))), axis=2)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=80), elements=finite))
def test_short_axis_max_matches_numpy(x):
    assert np.array_equal(T._max_keepdims(x, -1), x.max(axis=-1, keepdims=True))


# -- pointwise conv -------------------------------------------------------

def test_pointwise_conv_examples():
    x = np.random.default_rng(2).normal(size=(3, 4, 5))
    assert np.array_equal(T.pointwise_conv(Tensor(x), Tensor(np.zeros((2, 3))), Tensor(np.zeros(2))).data, np.zeros((2, 4, 5)))
    assert np.array_equal(T.pointwise_conv(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)
    out = T.pointwise_conv(Tensor(np.array([2.0, 3.0]).reshape(2, 1, 1)), Tensor([[1.0, 0], [0, 1], [1, 1]]), Tensor(np.zeros(3)))
    assert out.data.reshape(-1).tolist() == [2.0, 3.0, 5.0]


def test_pointwise_conv_equals_flattened_matmul():
    r = np.random.default_rng(3)
    x, w, b = r.normal(size=(2, 3, 4, 5)), r.normal(size=(6, 3)), r.normal(size=6)
    got = T.pointwise_conv(Tensor(x), Tensor(w), Tensor(b)).data
    want = np.einsum("oc,bchw->bohw", w, x) + b[None, :, None, None]
    assert np.allclose(got, want, atol=1e-12)
    with pytest.raises(ShapeError):
        T.pointwise_conv(Tensor(x), Tensor(np.zeros((6, 4))))


# -- bilinear resize ------------------------------------------------------

def test_bilinear_identity_returns_same_tensor():
    x = Tensor(np.random.default_rng(4).normal(size=(2, 5, 6)))
    assert T.bilinear_resize(x, 5, 6) is x


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 20), st.integers(1, 20), finite)
def test_bilinear_constant_is_exact(h, w, oh, ow, c):
    out = T.bilinear_resize(Tensor(np.full((2, h, w), c)), oh, ow).data
    assert out.shape == (2, oh, ow)
    assert np.all(out == c)


def test_bilinear_single_pixel_broadcasts():
    out = T.bilinear_resize(Tensor(np.array([[[0.37]]])), 7, 3).data
    assert np.all(out == 0.37)


def test_bilinear_half_pixel_centres():
    # align_corners=False upsampling of [0, 1] to 4 samples
    out = T.bilinear_resize(Tensor(np.array([[[0.0, 1.0]]])), 1, 4).data[0, 0]
    assert np.allclose(out, [0.0, 0.25, 0.75, 1.0], atol=1e-15)
    with pytest.raises(ShapeError):
        T.bilinear_resize(Tensor(np.zeros((1, 2, 2))), 0, 3)


# -- cross entropy --------------------------------------------------------

def _logits(*vals):
    return Tensor(np.array(vals, dtype=np.float64).reshape(len(vals), 1, 1))


def test_cross_entropy_examples():
    assert abs(T.cross_entropy(_logits(0.0, 0.0), np.array([[0]])).item() - math.log(2)) < 1e-12
    assert T.cross_entropy(_logits(1000.0, 0.0), np.array([[0]])).item() < 1e-12
    logits = Tensor(np.array([[[5.0, 0.3]], [[-5.0, 0.1]]]))  # 2 classes, 1x2 pixels
    both = T.cross_entropy(logits, np.array([[0, 255]])).item()
    alone = T.cross_entropy(Tensor(logits.data[:, :, :1]), np.array([[0]])).item()
    assert both == alone


def test_cross_entropy_all_ignored_returns_zero_and_count():
    loss, count = T.cross_entropy(_logits(1.0, 2.0), np.array([[255]]), return_count=True)
    assert loss.item() == 0.0 and count == 0


def test_cross_entropy_label_error_names_pixel():
    with pytest.raises(LabelError, match=r"\(1, 2\)"):
        T.cross_entropy(Tensor(np.zeros((3, 2, 4))), np.array([[0, 1, 2, 0], [0, 1, 7, 0]]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_cross_entropy_nonnegative(seed):
    r = np.random.default_rng(seed)
    logits = Tensor(r.normal(scale=5, size=(4, 3, 3)))
    assert T.cross_entropy(logits, r.integers(0, 4, size=(3, 3))).item() >= 0


# -- backward -------------------------------------------------------------

def test_backward_examples():
    x = Tensor(np.random.default_rng(5).normal(size=(3, 4)), requires_grad=True)
    T.tsum(x).backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))

    v = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    T.tsum(v * v).backward()
    assert np.array_equal(v.grad, 2 * v.data)

    a = Tensor(np.random.default_rng(6).normal(size=(2, 3)), requires_grad=True)
    b = Tensor(np.random.default_rng(7).normal(size=(3, 4)))
    T.tsum(T.matmul(a, b)).backward()
    assert np.allclose(a.grad, np.ones((2, 4)) @ b.data.T, atol=1e-14)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_only_leaves_get_grads_and_unreachable_untouched():
    x = Tensor([1.0, 2.0], requires_grad=True)
    other = Tensor([5.0], requires_grad=True)
    other.grad = np.array([9.0])
    y = x * 3.0
    T.tsum(y * y).backward()
    assert y.grad is None
    assert np.allclose(x.grad, 18 * x.data)
    assert other.grad.tolist() == [9.0]


def test_gradients_accumulate_over_shared_subexpressions():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    T.tsum(y + y * x).backward()  # x^2 + x^3
    assert np.allclose(x.grad, [2 * 2 + 3 * 4])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert y.is_leaf


# -- finite differences ---------------------------------------------------

def test_finite_diff_examples():
    g = T.finite_diff_gradient(lambda t: T.tsum(t * t), Tensor([1.0, 2.0]))
    assert np.max(np.abs(g - [2.0, 4.0])) < 1e-8
    assert np.all(T.finite_diff_gradient(lambda t: Tensor(3.0), Tensor([1.0, 2.0])) == 0)


def test_finite_diff_matches_backward_on_three_layer_composition():
    r = np.random.default_rng(8)
    w1, w2, w3 = (Tensor(r.normal(size=s)) for s in ((4, 6), (6, 5), (5, 1)))

    def f(x):
        h = T.tanh(T.matmul(x, w1))
        h = T.gelu(T.matmul(h, w2))
        return T.tsum(T.matmul(h, w3))

    x = Tensor(r.normal(size=(3, 4)), requires_grad=True)
    f(x).backward()
    num = T.finite_diff_gradient(f, Tensor(x.data.copy()))
    rel = np.linalg.norm(x.grad - num) / np.linalg.norm(num)
    assert rel < 1e-6


# -- serialization ---------------------------------------------------------

@pytest.mark.parametrize("dtype", ["f32", "f64"])
def test_tensor_bytes_round_trip(dtype):
    t = Tensor(np.random.default_rng(9).normal(size=(2, 3, 4)), dtype=dtype)
    buf = T.tensor_to_bytes(t) + b"tail"
    back, off = T.tensor_from_bytes(buf)
    assert back.dtype == t.dtype and np.array_equal(back.data, t.data)
    assert buf[off:] == b"tail"
