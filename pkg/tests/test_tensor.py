import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bevpredformer import tensor as T
from bevpredformer.tensor import GradTape, NumericError, ShapeError, TapeError, Tensor


def grad_of(f, *xs):
    leaves = [Tensor(x, requires_grad=True) for x in xs]
    with GradTape() as tape:
        out = f(*leaves)
    tape.backward(out)
    return [leaf.grad for leaf in leaves]


def test_matmul_identity_and_dot():
    out = T.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
    assert np.array_equal(out.data, [[3, 4], [5, 6]])
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    ref = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            for k in range(5):
                ref[i, j] += np.float32(a[i, k]) * np.float32(b[k, j])
    out = T.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(out, ref, atol=1e-6)


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_cases():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-7)
    np.testing.assert_allclose(T.softmax(Tensor([1000.0, 0.0, 0.0])).data, [1, 0, 0], atol=1e-7)
    x = np.random.default_rng(3).standard_normal(7)
    ref = np.exp(x.astype(np.float64)) / np.exp(x.astype(np.float64)).sum()
    np.testing.assert_allclose(T.softmax(Tensor(x)).data, ref, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e4, 1e4)))
def test_softmax_sums_to_one(x):
    out = T.softmax(Tensor(x)).data
    assert out.min() >= 0
    assert abs(out.sum() - 1) < 1e-6


def test_nan_input_rejected():
    with pytest.raises(NumericError):
        Tensor([0.0, np.nan])


def test_overflow_in_op_rejected():
    with pytest.raises(NumericError):
        T.exp(Tensor([1000.0]))


def test_bilinear_sample_cases():
    feat = Tensor(np.arange(2 * 5 * 4, dtype=np.float32).reshape(2, 5, 4))
    out = T.bilinear_sample(feat, np.array([[2.0, 3.0], [-10.0, -10.0]]))
    np.testing.assert_array_equal(out.data[0], feat.data[:, 3, 2])
    np.testing.assert_array_equal(out.data[1], [0, 0])
    small = Tensor(np.random.default_rng(0).standard_normal((3, 2, 2)))
    mid = T.bilinear_sample(small, np.array([[0.5, 0.5]])).data[0]
    np.testing.assert_allclose(mid, small.data.mean(axis=(1, 2)), atol=1e-6)


def test_bilinear_sample_partial_border_is_zero_padded():
    feat = Tensor(np.ones((1, 2, 2)))
    out = T.bilinear_sample(feat, np.array([[1.5, 0.0]])).data
    assert out[0, 0] == pytest.approx(0.5)


def test_backward_examples():
    (g,) = grad_of(lambda x: T.sum(x), np.ones((2, 3)))
    assert np.array_equal(g, np.ones((2, 3)))
    (g,) = grad_of(lambda x: T.sum(x * x), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(g, [2, 4, 6])


def test_shared_input_accumulates():
    (g,) = grad_of(lambda x: T.sum(x + x + x), np.ones(4))
    np.testing.assert_allclose(g, 3 * np.ones(4))


def test_leaf_grads_accumulate_across_tapes():
    x = Tensor(np.ones(3), requires_grad=True)
    for _ in range(2):
        with GradTape() as tape:
            loss = T.sum(T.scalar_mul(x, 2.0))
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, [4, 4, 4])


def test_tape_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with GradTape() as tape:
        y = x * x
    with pytest.raises(TapeError):
        tape.backward(y)
    with GradTape() as tape:
        loss = T.sum(x)
    tape.backward(loss)
    with pytest.raises(TapeError):
        tape.backward(loss)


def test_loss_from_other_tape_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with GradTape():
        loss = T.sum(x)
    with GradTape() as other:
        T.sum(x)
    with pytest.raises(TapeError):
        other.backward(loss)


def test_no_broadcasting():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(3))
    out = Tensor(np.ones((2, 3))) * Tensor(2.0)
    assert np.all(out.data == 2)
    assert T.expand(Tensor(np.ones((1, 3))), (4, 3)).shape == (4, 3)


def test_expand_gradient_sums():
    (g,) = grad_of(lambda x: T.sum(T.expand(x, (4, 3))), np.ones((1, 3)))
    np.testing.assert_allclose(g, 4 * np.ones((1, 3)))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=2, max_size=4), st.randoms())
def test_shape_round_trips_bit_exact(shape, rnd):
    x = np.random.default_rng(rnd.randint(0, 10 ** 6)).standard_normal(shape).astype(np.float32)
    t = Tensor(x)
    assert np.array_equal(t.reshape(-1).reshape(tuple(shape)).data, x)
    perm = list(range(len(shape)))
    rnd.shuffle(perm)
    inv = list(np.argsort(perm))
    assert np.array_equal(t.permute(perm).permute(inv).data, x)
    k = shape[0] // 2
    parts = [t[:k], t[k:]] if k else [t]
    assert np.array_equal(T.concat(parts, axis=0).data, x)


def test_float32_default_and_float64_context():
    assert Tensor([1.0]).data.dtype == np.float32
    with T.precision("float64"):
        assert Tensor([1.0]).data.dtype == np.float64
        assert T.gelu(Tensor([1.0])).data.dtype == np.float64
    assert T.gelu(Tensor([1.0])).data.dtype == np.float32


def test_ops_keep_float32():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4, 4)))
    w = Tensor(np.random.default_rng(1).standard_normal((5, 3, 3, 3)))
    for out in (T.gelu(x), T.sigmoid(x), T.conv2d(x, w, None, 1, 1), T.scalar_mul(x, np.sqrt(2.0))):
        assert out.data.dtype == np.float32


def test_finite_diff_check_examples():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((3, 4)))
    assert T.finite_diff_check(T.sum, x) < 1e-6
    assert T.finite_diff_check(lambda v: T.sum(T.sigmoid(v)), x, eps=1e-3) < 1e-3
    g, b = Tensor(rng.standard_normal(4)), Tensor(rng.standard_normal(4))
    wts = Tensor(rng.standard_normal((3, 4)))
    assert T.finite_diff_check(lambda v: T.sum(T.layer_norm(v, g, b) * wts), x) < 1e-2


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(0)
    x, w, b = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref[0, o, i, j] = (xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-5)


def test_conv_transpose_is_adjoint_of_conv():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((2, 3, 2, 2))
    y = rng.standard_normal((1, 3, 8, 8))
    up = T.conv_transpose2d(Tensor(x), Tensor(w), None, stride=2).data
    # <convT(x), y> == <x, conv(y)> with the same kernel (transposed layout)
    down = T.conv2d(Tensor(y), Tensor(w), None, stride=2, padding=0).data
    assert np.isclose((up * y).sum(), (x * down).sum(), rtol=1e-4)


def test_max_pool_routes_gradient_to_argmax():
    x = np.array([[[[1.0, 5.0], [2.0, 3.0]]]])
    (g,) = grad_of(lambda v: T.sum(T.max_pool2d(v, 2)), x)
    np.testing.assert_array_equal(g, [[[[0, 1], [0, 0]]]])


def test_embedding_gradient_scatters():
    table = np.zeros((4, 2))
    (g,) = grad_of(lambda t: T.sum(T.embedding(t, np.array([1, 1, 3]))), table)
    np.testing.assert_array_equal(g, [[0, 0], [2, 2], [0, 0], [1, 1]])


def test_forward_is_deterministic():
    rng = np.random.default_rng(5)
    x, w = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3))
    a = T.gelu(T.conv2d(Tensor(x), Tensor(w), None, 1, 1)).data
    b = T.gelu(T.conv2d(Tensor(x), Tensor(w), None, 1, 1)).data
    assert np.array_equal(a, b)
