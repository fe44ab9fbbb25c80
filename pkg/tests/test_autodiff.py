import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avfuse.autodiff import (
    BatchNorm1d,
    Module,
    NonFiniteError,
    Parameter,
    ShapeError,
    Tensor,
    backward,
    finite_difference_check,
    forward_op,
    no_grad,
    ops,
    read_tensor,
    write_tensor,
)

rng = np.random.default_rng(0)


def fd_ok(f, x, tol=1e-5):
    rep = finite_difference_check(f, x, h=1e-5, tol=tol)
    assert rep.passed, rep.max_rel_err
    return rep


# -- worked examples ------------------------------------------------------------

def test_matmul_identity():
    a = rng.normal(size=(3, 4))
    out = forward_op("matmul", Tensor(a), Tensor(np.eye(4)))
    np.testing.assert_array_equal(out.data, a)


def test_softmax_uniform():
    out = forward_op("softmax", Tensor(np.zeros(4)))
    np.testing.assert_allclose(out.data, [0.25] * 4, rtol=0, atol=1e-15)


def test_cross_entropy_uniform_logits():
    out = forward_op("cross_entropy", Tensor(np.zeros((1, 8))), np.array([5]))
    assert out.item() == pytest.approx(np.log(8), abs=1e-12)
    assert out.item() == pytest.approx(2.0794, abs=1e-4)


def test_backward_sum_gives_ones():
    x = Parameter(rng.normal(size=(2, 3, 4)), name="x")
    g = backward(x.sum(), [x])
    np.testing.assert_array_equal(g["x"], np.ones((2, 3, 4)))


def test_backward_tanh_analytic():
    w = Parameter(np.array(0.5), name="w")
    g = backward(ops.tanh(w), [w])
    assert g["w"] == pytest.approx(1 - np.tanh(0.5) ** 2, rel=1e-14)
    assert g["w"] == pytest.approx(0.786448, abs=1e-6)


def test_two_layer_mlp_matches_finite_differences():
    w2 = rng.normal(size=(6, 3))
    x = rng.normal(size=(5, 4))
    y = rng.normal(size=(5, 3))

    def f(w1):
        h = ops.tanh(ops.matmul(Tensor(x), w1))
        out = ops.matmul(h, Tensor(w2))
        return ops.square(out - Tensor(y)).sum()

    fd_ok(f, rng.normal(size=(4, 6)), tol=1e-6)


def test_fd_check_square():
    rep = finite_difference_check(lambda x: ops.square(x).sum(), np.array(3.0))
    assert rep.analytic == pytest.approx(6.0)
    assert rep.max_rel_err < 1e-9 and rep.passed


def test_fd_check_layernorm_then_sum():
    g = rng.normal(size=8)

    def f(x):
        return ops.mul(ops.layernorm(x, None, None), Tensor(g)).sum()

    fd_ok(f, rng.normal(size=(4, 8)))


def test_fd_check_detects_corrupted_gradient():
    rep = finite_difference_check(lambda x: ops.square(x).sum(), np.array([1.0, -2.0]),
                                  grad_fn=lambda x: 2 * (2 * x))
    assert not rep.passed


def test_fd_check_rejects_non_scalar():
    with pytest.raises(ShapeError):
        finite_difference_check(lambda x: ops.tanh(x), np.ones(3))


def test_backward_errors():
    x = Parameter(np.ones(3), name="x")
    with pytest.raises(ShapeError):
        backward(ops.tanh(x), [x])
    with pytest.raises(RuntimeError):
        backward(Tensor(1.0), [x])


def test_shape_error_names_op():
    with pytest.raises(ShapeError, match="matmul.*4.*5"):
        ops.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((5, 2))))
    with pytest.raises(ShapeError, match="add"):
        ops.add(Tensor(np.ones((3, 4))), Tensor(np.ones((2, 4))))


@pytest.mark.filterwarnings("ignore:divide by zero")
def test_non_finite_output_raises():
    with pytest.raises(NonFiniteError):
        ops.log(Tensor(np.array([0.0, 1.0])))


# -- every op kind against central differences ---------------------------------

W = rng.normal(size=(4, 3))
B = rng.normal(size=3)
PROBE = rng.normal(size=(2, 3, 3))
W_BATCH = rng.normal(size=(4, 2))
K_CONV = rng.normal(size=(3, 2, 3))


def _probe(t):
    return ops.mul(t, Tensor(PROBE[..., : t.shape[-1]].reshape(-1)[: t.size].reshape(t.shape))).sum()


OP_CASES = {
    "matmul": (lambda x: ops.matmul(x, Tensor(W)).sum(), (3, 4)),
    "matmul_batched": (lambda x: ops.matmul(x, Tensor(W_BATCH)).sum(), (2, 3, 4)),
    "add_broadcast": (lambda x: _probe(ops.add(x, Tensor(np.ones((2, 3, 3))))), (3,)),
    "mul_broadcast": (lambda x: ops.mul(x, x[0:1]).sum(), (3, 3)),
    "div": (lambda x: ops.div(Tensor(np.ones((2, 3))), ops.add(ops.square(x), 1.0)).sum(), (2, 3)),
    "tanh": (lambda x: _probe(ops.tanh(x)), (2, 3, 3)),
    "gelu": (lambda x: _probe(ops.gelu(x)), (2, 3, 3)),
    "softmax": (lambda x: _probe(ops.softmax(x)), (2, 3, 3)),
    "softmax_masked": (lambda x: _probe(ops.softmax(x, mask=np.array([True, False, True]))), (2, 3, 3)),
    "log_softmax": (lambda x: _probe(ops.log_softmax(x)), (2, 3, 3)),
    "layernorm_affine": (lambda x: _probe(ops.layernorm(x, Tensor(np.arange(1.0, 4.0)), Tensor(np.ones(3)))), (2, 3, 3)),
    "linear": (lambda x: _probe(ops.linear(x, Tensor(W), Tensor(B))), (2, 3, 4)),
    "concat": (lambda x: _probe(ops.concat([x, ops.tanh(x)], axis=0)), (1, 3, 3)),
    "slice": (lambda x: ops.square(x[:, 1:3]).sum(), (3, 4)),
    "fancy_index": (lambda x: ops.square(x[np.array([0, 0, 2])]).sum(), (3, 2)),
    "transpose": (lambda x: ops.matmul(ops.transpose(x, (1, 0)), Tensor(W[:3])).sum(), (3, 3)),
    "reshape": (lambda x: _probe(x.reshape(2, 3, 3)), (3, 6)),
    "mean": (lambda x: ops.square(ops.mean(x, axis=1)).sum(), (3, 4)),
    "cross_entropy": (lambda x: ops.cross_entropy(x, np.array([[0, 2], [1, 1]]), np.array([[1, 1], [0, 1]]), "mean"), (2, 2, 3)),
    "conv1d_stride2": (lambda x: _probe(ops.conv1d(x, Tensor(K_CONV), Tensor(B), stride=2, padding=1)), (2, 5, 2)),
    "pad_time": (lambda x: _probe(ops.pad_time(x, 0, 1)), (2, 2, 3)),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients(name):
    f, shape = OP_CASES[name]
    fd_ok(f, rng.normal(size=shape))


def test_conv1d_weight_gradient():
    x = rng.normal(size=(2, 6, 3))
    fd_ok(lambda w: _probe(ops.conv1d(Tensor(x), w, None, stride=2, padding=1)), rng.normal(size=(3, 3, 2)))


def test_embedding_gradient():
    ids = np.array([[0, 2, 2], [1, 0, 3]])
    fd_ok(lambda w: _probe(ops.embedding(ids, w)), rng.normal(size=(4, 3)))


def test_layernorm_gamma_gradient():
    x = rng.normal(size=(2, 3, 3))
    fd_ok(lambda g: _probe(ops.layernorm(Tensor(x), g, None)), rng.normal(size=3))


def test_batchnorm_training_gradient():
    rm, rv = np.zeros(3), np.ones(3)

    def f(x):
        return _probe(ops.batchnorm1d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), rm.copy(), rv.copy(), True))

    fd_ok(f, rng.normal(size=(6, 3)))


def test_dropout_gradient_fixed_mask():
    def f(x):
        return _probe(ops.dropout(x, 0.3, True, np.random.default_rng(5)))

    fd_ok(f, rng.normal(size=(2, 3, 3)))


def test_linear_weight_and_bias_gradient():
    x = rng.normal(size=(5, 4))
    fd_ok(lambda w: ops.square(ops.linear(Tensor(x), w, Tensor(B))).sum(), rng.normal(size=(4, 3)))
    fd_ok(lambda b: ops.square(ops.linear(Tensor(x), Tensor(W), b)).sum(), rng.normal(size=3))


# -- invariants ----------------------------------------------------------------

def test_zero_gradient_for_unreachable_parameter():
    a = Parameter(np.ones(3), name="a")
    b = Parameter(np.ones(3), name="b")
    g = backward(ops.tanh(a).sum(), [a, b])
    np.testing.assert_array_equal(g["b"], np.zeros(3))


def test_frozen_parameter_not_in_gradient_map():
    a = Parameter(np.ones(3), name="a")
    b = Parameter(np.ones(3), name="b", trainable=False)
    g = backward(ops.mul(a, b).sum(), [a, b])
    assert set(g) == {"a"}


def test_determinism_bitwise():
    def run():
        r = np.random.default_rng(11)
        w = Parameter(r.normal(size=(4, 4)), name="w")
        x = Tensor(r.normal(size=(3, 4)))
        h = ops.dropout(ops.gelu(ops.matmul(x, w)), 0.2, True, r)
        loss = ops.cross_entropy(h, np.array([0, 1, 3]))
        return loss.data.copy(), backward(loss, [w])["w"]

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 9), st.floats(-50, 50))
def test_softmax_rows_sum_to_one(rows, cols, shift):
    x = np.random.default_rng(rows * 13 + cols).normal(size=(rows, cols)) * 10 + shift
    s = ops.softmax(Tensor(x)).data.sum(axis=-1)
    assert np.all(np.abs(s - 1) < 1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 16), st.floats(0.01, 100))
def test_layernorm_moments(d, scale):
    x = np.random.default_rng(d).normal(size=(4, d)) * scale + 3.0
    y = ops.layernorm(Tensor(x), None, None, eps=0.0).data
    assert np.all(np.abs(y.mean(-1)) < 1e-10)
    assert np.all(np.abs(y.var(-1) - 1) < 1e-8)


def test_dropout_is_identity_at_eval_and_inverted_at_train():
    x = Tensor(np.ones((200, 50)))
    assert ops.dropout(x, 0.5, False, None) is x
    y = ops.dropout(x, 0.5, True, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 2.0}


def test_batchnorm_running_stats_update_even_when_frozen():
    bn = BatchNorm1d(3)
    bn.freeze()
    x = Tensor(rng.normal(loc=2.0, size=(10, 3)))
    bn.train()
    bn(x)
    assert np.all(bn.running_mean != 0)
    before = bn.running_mean.copy()
    bn.eval()
    bn(x)
    np.testing.assert_array_equal(bn.running_mean, before)


def test_no_grad_builds_no_graph():
    w = Parameter(np.ones(2), name="w")
    with no_grad():
        y = ops.tanh(w)
    assert not y.requires_grad


def test_tensor_serialization_roundtrip():
    for dt in (np.float32, np.float64):
        arr = rng.normal(size=(2, 3, 5)).astype(dt)
        buf = io.BytesIO()
        write_tensor(buf, arr)
        raw = buf.getvalue()
        assert raw[:4] == b"GFT1"
        assert int.from_bytes(raw[6:14], "little") == 2
        back = read_tensor(io.BytesIO(raw))
        assert back.dtype == dt and back.tobytes() == arr.tobytes()


def test_module_names_are_dotted_paths():
    class Inner(Module):
        def __init__(self):
            super().__init__()
            self.w = Parameter(np.zeros(2))

    class Outer(Module):
        def __init__(self):
            super().__init__()
            self.blocks = [Inner(), Inner()]
            self.head = Inner()

    names = [n for n, _ in Outer().named_parameters()]
    assert names == ["blocks.0.w", "blocks.1.w", "head.w"]
