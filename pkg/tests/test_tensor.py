import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from favor import tensor as T
from favor.tensor import AttentionMask, NonFiniteError, Tensor, TensorFormatError


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def check_grads(f, params, tol=1e-6):
    """Compare backward against central differences of the same scalar function."""
    for p in params:
        p.grad = None
    f().backward()
    with T.no_grad():
        fd = T.finite_diff_grad(lambda: f().item(), params, eps=1e-6)
    for p, g in zip(params, fd):
        np.testing.assert_allclose(p.grad, g, rtol=tol, atol=tol)


# -- matmul ----------------------------------------------------------------------


def test_matmul_identity():
    b = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(T.matmul(Tensor(np.eye(3)), Tensor(b)).data, b)


def test_matmul_small_example():
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=1e-13, atol=1e-13)


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradients_both_inputs(rng):
    a, b = T.parameter(rng.standard_normal((3, 4))), T.parameter(rng.standard_normal((4, 2)))
    check_grads(lambda: T.tsum(T.matmul(a, b) * T.matmul(a, b)), [a, b])


def test_batched_matmul_broadcast_gradient(rng):
    x = T.parameter(rng.standard_normal((2, 3, 4)))
    w = T.parameter(rng.standard_normal((4, 5)))
    check_grads(lambda: T.tsum(T.gelu(T.matmul(x, w))), [x, w])


def test_linear_matches_matmul_plus_bias(rng):
    x, w, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5)), rng.standard_normal(5)
    np.testing.assert_allclose(T.linear(Tensor(x), Tensor(w), Tensor(b)).data, x @ w + b, rtol=1e-14)
    xp, wp, bp = T.parameter(x), T.parameter(w), T.parameter(b)
    check_grads(lambda: T.tsum(T.gelu(T.linear(xp, wp, bp))), [xp, wp, bp])


# -- masked softmax ------------------------------------------------------------


def test_softmax_single_allowed_entry():
    y = T.masked_softmax(Tensor([[0.0, 0.0]]), AttentionMask([[True, False]]))
    assert y.data.tolist() == [[1.0, 0.0]]


def test_softmax_symmetric_row():
    np.testing.assert_allclose(T.masked_softmax(Tensor([[5.0, 5.0, 5.0]])).data, [[1 / 3] * 3], rtol=1e-15)


def test_softmax_closed_form():
    e = math.e
    np.testing.assert_allclose(T.masked_softmax(Tensor([[1.0, 2.0]])).data, [[1 / (1 + e), e / (1 + e)]], rtol=1e-15)


def test_softmax_fully_masked_row_rejected():
    with pytest.raises(ValueError):
        AttentionMask([[True, False], [False, False]])
    with pytest.raises(ValueError):
        T.masked_softmax(Tensor(np.zeros((2, 2))), np.array([[True, True], [False, False]]))


def test_softmax_mask_shape_checked():
    with pytest.raises(ValueError, match="does not match"):
        T.masked_softmax(Tensor(np.zeros((2, 3))), AttentionMask(np.ones((2, 2), dtype=bool)))


def test_softmax_survives_huge_logits():
    y = T.masked_softmax(Tensor([[1e300, -1e300, 0.0]]), AttentionMask([[False, True, True]]))
    assert y.data.tolist() == [[0.0, 0.0, 1.0]]


@settings(max_examples=60, deadline=None)
@given(
    rows=st.integers(1, 6),
    cols=st.integers(1, 7),
    seed=st.integers(0, 2**32 - 1),
    scale=st.floats(0.1, 50.0),
)
def test_softmax_rows_sum_to_one_masked_exact_zero(rows, cols, seed, scale):
    r = np.random.default_rng(seed)
    logits = r.standard_normal((rows, cols)) * scale
    allowed = r.random((rows, cols)) < 0.6
    allowed[np.arange(rows), r.integers(cols, size=rows)] = True
    y = T.masked_softmax(Tensor(logits), AttentionMask(allowed)).data
    assert np.all(y[~allowed] == 0.0)
    assert np.all(np.abs(y.sum(axis=1) - 1.0) <= 1e-12)


def test_softmax_per_sample_mask_broadcast(rng):
    logits = rng.standard_normal((2, 3, 4, 5))
    masks = rng.random((2, 1, 4, 5)) < 0.7
    masks[..., 0] = True
    y = T.masked_softmax(Tensor(logits), masks).data
    for b in range(2):
        for h in range(3):
            ref = T.masked_softmax(Tensor(logits[b, h]), AttentionMask(masks[b, 0])).data
            np.testing.assert_array_equal(y[b, h], ref)


def test_softmax_gradient(rng):
    x = T.parameter(rng.standard_normal((2, 3, 4)))
    mask = AttentionMask(np.tril(np.ones((3, 4), dtype=bool)))
    w = rng.standard_normal((2, 3, 4))
    check_grads(lambda: T.tsum(T.masked_softmax(x, mask) * w), [x])


# -- layer norm ------------------------------------------------------------------


def test_layer_norm_constant_vector_is_zero():
    y = T.layer_norm(Tensor([1.0, 1.0, 1.0, 1.0]), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert y.data.tolist() == [0.0, 0.0, 0.0, 0.0]


def test_layer_norm_already_normalised():
    y = T.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-300)
    np.testing.assert_allclose(y.data, [1.0, -1.0], rtol=1e-15)


def test_layer_norm_matches_mean_var_oracle(rng):
    x = rng.standard_normal(7) * 3 + 2
    g, b = rng.standard_normal(7), rng.standard_normal(7)
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    expect = [(v - mu) / math.sqrt(var + 1e-5) * gi + bi for v, gi, bi in zip(x, g, b)]
    np.testing.assert_allclose(T.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data, expect, rtol=1e-12)


def test_layer_norm_rejects_width_one():
    with pytest.raises(ValueError):
        T.layer_norm(Tensor([[3.0]]), Tensor([1.0]), Tensor([0.0]))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, min_side=2, max_side=6),
                  elements=st.floats(-1e3, 1e3)))
def test_layer_norm_output_statistics(x):
    d = x.shape[-1]
    y = T.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).data
    assert np.all(np.abs(y.mean(axis=-1)) < 1e-10)
    var = x.var(axis=-1)
    # variance 1 once the spread dominates eps
    big = var > 1e-2
    np.testing.assert_allclose(y.var(axis=-1)[big], (var / (var + 1e-5))[big], rtol=1e-9)


def test_layer_norm_gradient(rng):
    x = T.parameter(rng.standard_normal((3, 5)))
    g, b = T.parameter(rng.standard_normal(5)), T.parameter(rng.standard_normal(5))
    w = rng.standard_normal((3, 5))
    check_grads(lambda: T.tsum(T.layer_norm(x, g, b) * w), [x, g, b])


# -- cosine similarity ------------------------------------------------------------


@pytest.mark.parametrize(
    "u,v,expect",
    [([3.0, 4.0], [3.0, 4.0], 1.0), ([1.0, 0.0], [0.0, 1.0], 0.0), ([1.0, 0.0], [-1.0, 0.0], -1.0)],
)
def test_cosine_examples(u, v, expect):
    assert T.cosine_sim(Tensor(u), Tensor(v)).item() == pytest.approx(expect, abs=1e-15)


def test_cosine_zero_norm_rejected():
    with pytest.raises(ValueError):
        T.cosine_sim(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))
    with pytest.raises(ValueError):
        T.cosine_matrix(Tensor([[0.0, 0.0], [1.0, 0.0]]))


def test_cosine_matrix_matches_pairwise(rng):
    x = rng.standard_normal((2, 4, 6))
    m = T.cosine_matrix(Tensor(x)).data
    for w in range(2):
        for i in range(4):
            for j in range(4):
                assert m[w, i, j] == pytest.approx(T.cosine_sim(Tensor(x[w, i]), Tensor(x[w, j])).item(), abs=1e-14)


def test_cosine_gradients(rng):
    u, v = T.parameter(rng.standard_normal(5)), T.parameter(rng.standard_normal(5))
    check_grads(lambda: T.cosine_sim(u, v) * T.cosine_sim(u, v), [u, v])
    x = T.parameter(rng.standard_normal((2, 3, 4)))
    w = rng.standard_normal((2, 3, 3))
    check_grads(lambda: T.tsum(T.cosine_matrix(x) * w), [x])


# -- cross entropy ----------------------------------------------------------------


def test_cross_entropy_uniform_is_log_vocab():
    assert T.cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 2]).item() == pytest.approx(math.log(4), rel=1e-15)


def test_cross_entropy_confident_correct_is_near_zero():
    logits = np.full((2, 5), -50.0)
    logits[0, 3] = logits[1, 1] = 50.0
    assert T.cross_entropy(Tensor(logits), [3, 1]).item() < 1e-40


def test_cross_entropy_matches_log_softmax_oracle(rng):
    logits = rng.standard_normal((2, 3, 6))
    targets = rng.integers(6, size=(2, 3))
    total = 0.0
    for b in range(2):
        for t in range(3):
            row = logits[b, t]
            total -= row[targets[b, t]] - math.log(sum(math.exp(v) for v in row))
    assert T.cross_entropy(Tensor(logits), targets).item() == pytest.approx(total / 6, rel=1e-13)


def test_cross_entropy_errors():
    with pytest.raises(ValueError):
        T.cross_entropy(Tensor(np.zeros((3, 4))), [0, 1])
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros((1, 4))), [4])


def test_cross_entropy_gradient(rng):
    x = T.parameter(rng.standard_normal((2, 3, 5)))
    t = rng.integers(5, size=(2, 3))
    check_grads(lambda: T.cross_entropy(x, t), [x])


# -- shape ops and misc gradients ---------------------------------------------------


def test_shape_op_gradients(rng):
    a = T.parameter(rng.standard_normal((2, 3, 4)))
    b = T.parameter(rng.standard_normal((2, 3, 4)))
    w = rng.standard_normal((4, 3, 4))

    def f():
        x = T.concat([a, b], axis=0).transpose(0, 2, 1).reshape(4, 4, 3).transpose(0, 2, 1)
        y = T.stack([a[0], b[1]], axis=0)
        return T.tsum(x * w) + T.tsum(T.exp(y * 0.1)) + T.mean(T.broadcast_to(a[1:, :1], (1, 3, 4)))

    check_grads(f, [a, b])


def test_embedding_scatter_add_gradient(rng):
    table = T.parameter(rng.standard_normal((5, 3)))
    ids = np.array([[0, 2, 2], [4, 0, 2]])
    w = rng.standard_normal((2, 3, 3))
    check_grads(lambda: T.tsum(T.embedding(table, ids) * w), [table])
    with pytest.raises(IndexError):
        T.embedding(table, np.array([5]))


def test_elementwise_gradients(rng):
    a = T.parameter(rng.random((3, 4)) + 0.5)
    b = T.parameter(rng.standard_normal((4,)))
    check_grads(lambda: T.tsum(T.log(a) * b - T.relu(a - 1.0) + T.gelu(a * b) - a), [a, b])


def test_gradients_accumulate_until_reset(rng):
    w = T.parameter(rng.standard_normal(3))
    (w * 2.0).sum().backward()
    (w * 2.0).sum().backward()
    np.testing.assert_array_equal(w.grad, np.full(3, 4.0))
    w.zero_grad()
    (w * 3.0).sum().backward()
    np.testing.assert_array_equal(w.grad, np.full(3, 3.0))


def test_backward_requires_scalar_and_graph():
    w = T.parameter(np.ones(3))
    with pytest.raises(ValueError):
        (w * 2.0).backward()
    with pytest.raises(ValueError):
        Tensor([1.0]).backward()


def test_no_grad_records_nothing():
    w = T.parameter(np.ones(2))
    with T.no_grad():
        y = w * 3.0
    assert not y.requires_grad


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        T.exp(Tensor([1000.0]))
    with pytest.raises(NonFiniteError):
        T.log(Tensor([0.0]))


def test_finite_diff_restores_parameters(rng):
    w = T.parameter(rng.standard_normal((2, 2)))
    before = w.data.copy()
    (g,) = T.finite_diff_grad(lambda: float((w.data**3).sum()), [w])
    np.testing.assert_array_equal(w.data, before)
    # central difference of x^3 is exactly 3x^2 + eps^2
    np.testing.assert_allclose(g, 3 * before**2 + 1e-6, rtol=1e-9, atol=1e-12)


# -- dump format --------------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=4),
                  elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_tensor_dump_round_trip(arr):
    buf = io.BytesIO()
    T.write_tensor(buf, arr)
    assert len(buf.getvalue()) == T.tensor_nbytes(arr)
    buf.seek(0)
    back = T.read_tensor(buf)
    assert back.shape == arr.shape
    assert back.tobytes() == np.ascontiguousarray(arr).tobytes()


def test_tensor_dump_layout():
    buf = io.BytesIO()
    T.write_tensor(buf, np.array([[1.0, 2.0, 3.0]]))
    raw = buf.getvalue()
    assert raw[:8] == (2).to_bytes(8, "little")
    assert raw[8:16] == (1).to_bytes(8, "little") and raw[16:24] == (3).to_bytes(8, "little")
    assert np.frombuffer(raw[24:], "<f8").tolist() == [1.0, 2.0, 3.0]


def test_tensor_dump_truncated():
    buf = io.BytesIO()
    T.write_tensor(buf, np.ones((2, 2)))
    with pytest.raises(TensorFormatError):
        T.read_tensor(io.BytesIO(buf.getvalue()[:-3]))
    with pytest.raises(TensorFormatError):
        T.read_tensor(io.BytesIO(b"\x02\x00"))
