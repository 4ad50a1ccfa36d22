import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from senformer.gradcheck import finite_diff_check
from senformer.tensor import Tensor, concat, matmul, no_grad, pad2d

from conftest import rand64


def test_add_values():
    out = Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_mul_by_zero_kills_gradient():
    x = Tensor([2.0, -3.0], requires_grad=True, dtype=np.float64)
    out = (x * Tensor([0.0, 0.0], dtype=np.float64)).sum()
    out.backward()
    np.testing.assert_array_equal(out.data, 0.0)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_reshape_roundtrip_preserves_order():
    x = Tensor(np.arange(6, dtype=np.float32))
    back = x.reshape(2, 3).reshape(6)
    np.testing.assert_array_equal(back.data, x.data)


def test_shape_mismatch_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((4, 5)))


def test_matmul_identity_and_selection():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = Tensor(np.eye(2, dtype=np.float32)) @ m
    np.testing.assert_array_equal(out.data, m.data)
    sel = Tensor([[1.0, 0.0]]) @ Tensor([[2.0], [3.0]])
    np.testing.assert_array_equal(sel.data, [[2.0]])


def test_matmul_inner_extent_error():
    with pytest.raises(ValueError, match="inner extents"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_matmul_gradcheck(rng):
    b = Tensor(rng.normal(size=(4, 2)), dtype=np.float64)
    a = rand64(rng, 3, 4)
    report = finite_diff_check(lambda t: ((t @ b) ** 2).sum(), a, tol=1e-6)
    assert report.passed, report


def test_backward_square():
    x = Tensor([3.0], requires_grad=True, dtype=np.float64)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [6.0])


def test_backward_fanout_accumulates():
    x = Tensor([2.0], requires_grad=True, dtype=np.float64)
    (x + x).sum().backward()
    np.testing.assert_allclose(x.grad, [2.0])


def test_backward_requires_scalar_root():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2.0).backward()


def test_repeated_backward_accumulates():
    x = Tensor([5.0], requires_grad=True, dtype=np.float64)
    y = (x * 3.0).sum()
    y.backward()
    y.backward()
    np.testing.assert_allclose(x.grad, [6.0])


def test_shared_subexpression_equals_unrolled(rng):
    x1 = rand64(rng, 4)
    shared = x1 * x1
    loss1 = (shared + shared * 2.0).sum()
    loss1.backward()

    x2 = Tensor(x1.data.copy(), requires_grad=True, dtype=np.float64)
    loss2 = (x2 * x2 + (x2 * x2) * 2.0).sum()
    loss2.backward()
    np.testing.assert_array_equal(x1.grad, x2.grad)


def test_forward_determinism_bit_identical(rng):
    x = Tensor(rng.normal(size=(5, 5)).astype(np.float32))
    w = Tensor(rng.normal(size=(5, 5)).astype(np.float32))
    a = ((x @ w) * x).sum()
    b = ((x @ w) * x).sum()
    assert a.data.tobytes() == b.data.tobytes()


def test_concat_and_slice_values():
    a = Tensor([[1.0, 2.0]])
    b = Tensor([[3.0, 4.0]])
    cat = concat([a, b], axis=0)
    np.testing.assert_array_equal(cat.data, [[1, 2], [3, 4]])
    np.testing.assert_array_equal(cat[1:, :].data, [[3, 4]])


def test_pad2d_zero_border():
    x = Tensor(np.ones((1, 2, 2), dtype=np.float32))
    out = pad2d(x, (0, 1), (1, 0))
    assert out.shape == (1, 3, 3)
    assert out.data.sum() == 4.0
    assert out.data[0, 2, :].sum() == 0.0


def test_no_grad_skips_graph():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


@st.composite
def broadcastable_pair(draw):
    base = draw(st.lists(st.integers(1, 4), min_size=1, max_size=3))
    other = [draw(st.sampled_from([1, n])) for n in base]
    cut = draw(st.integers(0, len(other)))
    return tuple(base), tuple(other[cut:]) or (1,)


@given(shapes=broadcastable_pair(), seed=st.integers(0, 2**16))
def test_broadcast_add_mul_gradients_match_fd(shapes, seed):
    r = np.random.default_rng(seed)
    sa, sb = shapes
    a = Tensor(r.normal(size=sa), requires_grad=True, dtype=np.float64)
    b = Tensor(r.normal(size=sb), dtype=np.float64)
    report = finite_diff_check(lambda t: ((t + b) * (t * 1.5 + b)).sum(), a, tol=1e-6)
    assert report.passed, (sa, sb, report)
