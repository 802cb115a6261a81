import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from fdcheck import check_op, numeric_grad, rel_err
from tivode import tensor as T
from tivode.errors import ContractError, DimensionError, FormatError

SEEDS = range(20)
TOL = 1e-4


def _r(rng, *shape, scale=1.0):
    return rng.normal(0.0, scale, size=shape)


# name -> (op, input builder(rng))
PRIMITIVES = {
    "add": (T.add, lambda r: [_r(r, 3, 4), _r(r, 1, 4)]),
    "sub": (T.sub, lambda r: [_r(r, 2, 3), _r(r, 2, 3)]),
    "mul": (T.mul, lambda r: [_r(r, 3, 4), _r(r, 3, 1)]),
    "div": (T.div, lambda r: [_r(r, 3, 4), 2.0 + r.uniform(size=(3, 4))]),
    "square": (T.square, lambda r: [_r(r, 5)]),
    "exp": (T.exp, lambda r: [_r(r, 2, 3)]),
    "tanh": (T.tanh, lambda r: [_r(r, 3, 3)]),
    "sigmoid": (T.sigmoid, lambda r: [_r(r, 3, 3, scale=3.0)]),
    "silu": (T.silu, lambda r: [_r(r, 3, 4, scale=2.0)]),
    "sum_axis": (lambda x: T.sum_(x, axis=1), lambda r: [_r(r, 3, 4)]),
    "mean": (lambda x: T.mean(x, axis=0, keepdims=True), lambda r: [_r(r, 3, 4)]),
    "reshape": (lambda x: T.reshape(x, (6, 2)), lambda r: [_r(r, 3, 4)]),
    "flatten": (lambda x: T.flatten(x), lambda r: [_r(r, 2, 2, 3)]),
    "transpose": (lambda x: T.transpose(x, (2, 0, 1)), lambda r: [_r(r, 2, 3, 4)]),
    "index_slice": (lambda x: x[1:, ::2], lambda r: [_r(r, 3, 4)]),
    "index_fancy": (lambda x: x[np.array([0, 2, 0])], lambda r: [_r(r, 3, 4)]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), lambda r: [_r(r, 2, 1, 3), _r(r, 2, 2, 3)]),
    "stack": (lambda a, b: T.stack([a, b], axis=0), lambda r: [_r(r, 2, 3), _r(r, 2, 3)]),
    "embedding": (lambda w: T.embedding(w, np.array([[0, 2, 2], [4, 1, 0]])), lambda r: [_r(r, 5, 3)]),
    "upsample": (lambda x: T.upsample_nearest(x, 2), lambda r: [_r(r, 1, 2, 2, 3)]),
    "matmul": (T.matmul, lambda r: [_r(r, 3, 4), _r(r, 4, 2)]),
    "matmul_batched": (T.matmul, lambda r: [_r(r, 2, 3, 4), _r(r, 2, 4, 2)]),
    "linear": (T.linear, lambda r: [_r(r, 2, 3), _r(r, 3, 4), _r(r, 4)]),
    "conv2d": (lambda x, w: T.conv2d(x, w, 1, 1), lambda r: [_r(r, 1, 2, 5, 5), _r(r, 3, 2, 3, 3)]),
    "conv2d_stride2": (lambda x, w: T.conv2d(x, w, 2, 1), lambda r: [_r(r, 2, 2, 6, 6), _r(r, 3, 2, 4, 4)]),
    "conv2d_valid": (lambda x, w: T.conv2d(x, w, 1, 0), lambda r: [_r(r, 1, 3, 5, 4), _r(r, 2, 3, 2, 3)]),
    "group_norm": (lambda x, w, b: T.group_norm(x, 2, w, b),
                   lambda r: [_r(r, 2, 4, 3, 3), 1 + _r(r, 4, scale=0.1), _r(r, 4)]),
    "layer_norm": (lambda x, w, b: T.layer_norm(x, w, b), lambda r: [_r(r, 3, 5), 1 + _r(r, 5), _r(r, 5)]),
    "softmax": (lambda x: T.softmax(x, axis=-1), lambda r: [_r(r, 3, 4)]),
    "attention": (T.scaled_dot_attention, lambda r: [_r(r, 4, 3), _r(r, 5, 3), _r(r, 5, 2)]),
    "attention_masked": (lambda q, k, v: T.scaled_dot_attention(q, k, v, np.array([True, True, False, True, False])),
                         lambda r: [_r(r, 2, 4, 3), _r(r, 2, 5, 3), _r(r, 2, 5, 2)]),
    "mse": (T.mse, lambda r: [_r(r, 3, 4), _r(r, 3, 4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradient_matches_finite_differences(name):
    op, build = PRIMITIVES[name]
    worst = 0.0
    for seed in SEEDS:
        arrays = build(np.random.default_rng([seed, len(name)]))
        worst = max(worst, *check_op(op, arrays, seed))
    assert worst < TOL, f"{name}: worst relative error {worst:.2e}"


def test_matmul_examples():
    B = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(T.matmul(np.eye(3), B).data, B)
    out = T.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[0.0], [1.0]]))
    assert np.array_equal(out.data, [[2.0], [4.0]])


def test_matmul_mismatch_names_shapes():
    with pytest.raises(DimensionError) as err:
        T.matmul(np.zeros((2, 3)), np.zeros((4, 5)))
    assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)


def test_conv_identity_kernel_and_zero_input():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 5))
    assert np.array_equal(T.conv2d(x, np.ones((1, 1, 1, 1))).data, x)
    assert not T.conv2d(np.zeros((1, 2, 5, 5)), np.ones((3, 2, 3, 3)), 1, 1).data.any()


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, 3, 2))
    s, p = 2, 1
    out = T.conv2d(x, w, s, p).data
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    ref = np.zeros_like(out)
    for b, o, i, j in np.ndindex(*out.shape):
        ref[b, o, i, j] = (xp[b, :, i * s:i * s + 3, j * s:j * s + 2] * w[o]).sum()
    assert np.allclose(out, ref, atol=1e-12)


def test_conv_non_integer_output_is_dimension_error():
    with pytest.raises(DimensionError):
        T.conv2d(np.zeros((1, 1, 6, 6)), np.zeros((1, 1, 3, 3)), stride=2, pad=0)
    with pytest.raises(DimensionError):
        T.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)))


def test_attention_single_key_and_identical_keys():
    rng = np.random.default_rng(2)
    q, v = rng.normal(size=(4, 3)), rng.normal(size=(1, 2))
    out = T.scaled_dot_attention(q, rng.normal(size=(1, 3)), v).data
    assert np.allclose(out, np.broadcast_to(v, (4, 2)))
    k = np.tile(rng.normal(size=(1, 3)), (5, 1))
    v = rng.normal(size=(5, 2))
    out = T.scaled_dot_attention(q, k, v).data
    assert np.allclose(out, np.broadcast_to(v.mean(axis=0), (4, 2)))


def test_attention_zero_dim_and_row_sums():
    with pytest.raises(DimensionError):
        T.scaled_dot_attention(np.zeros((2, 0)), np.zeros((3, 0)), np.zeros((3, 1)))
    rng = np.random.default_rng(3)
    mask = np.array([True, False, True, True])
    w = T.attention_weights(rng.normal(size=(5, 3)), rng.normal(size=(4, 3)), mask)
    assert np.allclose(w.sum(axis=-1), 1.0)
    assert np.all(w[:, 1] == 0.0)


def test_group_norm_properties():
    assert not T.group_norm(np.full((2, 4, 3, 3), 7.0), 2).data.any()
    x = np.random.default_rng(4).normal(3.0, 5.0, size=(2, 8, 6, 6))
    y = T.group_norm(x, 4).data.reshape(2, 4, -1)
    assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    assert np.all(np.abs(y.var(axis=-1) - 1.0) < 1e-3)
    with pytest.raises(DimensionError):
        T.group_norm(np.zeros((1, 6, 2, 2)), 4)


def test_backward_basics():
    x = T.Tensor([1.5], requires_grad=True)
    T.backward(T.sum_(x))
    assert x.grad.tolist() == [1.0]
    x = T.Tensor(np.arange(4.0), requires_grad=True)
    T.backward(T.sum_(x * 2.0))
    assert x.grad.tolist() == [2.0] * 4
    with pytest.raises(ContractError):
        T.backward(x * 2.0)


def test_shared_subexpression_accumulates():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(3, 3))
    x1 = T.Tensor(a, requires_grad=True)
    h = T.tanh(x1)
    T.backward(T.sum_(h * h + h))
    # same function with the shared node duplicated
    x2 = T.Tensor(a, requires_grad=True)
    T.backward(T.sum_(T.tanh(x2) * T.tanh(x2) + T.tanh(x2)))
    assert np.allclose(x1.grad, x2.grad, rtol=1e-14, atol=0)


def test_tape_is_topological_and_visits_once():
    x = T.Tensor(np.ones(3), requires_grad=True)
    y = T.exp(x)
    z = T.sum_(y * y + y)
    tape = T.Tape.from_root(z)
    pos = {id(n): i for i, n in enumerate(tape)}
    assert len(pos) == len(tape)
    for n in tape:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]


def test_stop_gradient_is_exact_identity_with_zero_gradient():
    rng = np.random.default_rng(6)
    x = T.Tensor(rng.normal(size=(4,)), requires_grad=True)
    s = T.stop_gradient(x)
    assert np.array_equal(s.data, x.data)
    T.backward(T.sum_(x * 3.0 + s * 5.0))
    assert np.array_equal(x.grad, np.full(4, 3.0))


def test_composite_conv_norm_attention_graph():
    rng = np.random.default_rng(7)

    def op(x, w, wq):
        h = T.silu(T.group_norm(T.conv2d(x, w, 1, 1), 2))
        tok = T.transpose(h.reshape(1, 4, 9), (0, 2, 1))  # (1, 9, 4)
        return T.scaled_dot_attention(T.matmul(tok, wq), tok, tok)

    errs = check_op(op, [rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(4, 2, 3, 3)), rng.normal(size=(4, 4))])
    assert max(errs) < TOL


def test_debug_mode_flags_non_finite():
    T.set_debug(True)
    try:
        with pytest.raises(FloatingPointError):
            with np.errstate(divide="ignore"):
                T.div(np.ones(2), np.zeros(2))
    finally:
        T.set_debug(False)


def test_no_grad_records_nothing():
    x = T.Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
                  elements=st.floats(-1e300, 1e300, allow_nan=False)))
def test_serialization_roundtrip(arr):
    buf = T.tensor_to_bytes(arr)
    back, end = T.tensor_from_bytes(buf, 0)
    assert end == len(buf)
    assert back.shape == arr.shape and np.array_equal(back, arr)
    assert len(buf) == 4 + 4 * arr.ndim + 8 * arr.size


def test_serialization_truncated_is_format_error():
    buf = T.tensor_to_bytes(np.arange(6.0).reshape(2, 3))
    for cut in (2, 9, len(buf) - 1):
        with pytest.raises(FormatError):
            T.tensor_from_bytes(buf[:cut], 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_linear_op_gradient_property(seed):
    """Gradient of sum(A @ B) wrt A is rowsum-broadcast of B; check against the oracle."""
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    a = T.Tensor(A, requires_grad=True)
    T.backward(T.sum_(T.matmul(a, B)))
    assert np.allclose(a.grad, np.broadcast_to(B.sum(axis=1), (3, 4)))
    num = numeric_grad(lambda: float((A @ B).sum()), A)
    assert rel_err(a.grad, num) < TOL
