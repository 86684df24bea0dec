"""Engine tests: hand-checked forward values, the finite-difference gradient
gate for every differentiable op, numerical-stability properties, tape
contracts and the optimizer."""

import numpy as np
import pytest

from refexp import tensor as T
from refexp.tensor import (AdamW, ContractViolation, ShapeMismatch, Tape, Tensor,
                           backward, gradcheck, optimizer_step)

N_INSTANCES = 10


def check_many(make_case, n=N_INSTANCES, tol=1e-4):
    """Run the float32-vs-float64 finite-difference gate on n seeded cases."""
    worst = 0.0
    for seed in range(n):
        rng = np.random.default_rng(1000 + seed)
        fn, inputs = make_case(rng)
        worst = max(worst, gradcheck(fn, inputs, tol=tol))
    return worst


def weighted(op):
    """Scalarize with a random projection so transposition bugs surface."""
    def fn_factory(rng, shapes):
        ws = None

        def fn(ts):
            nonlocal ws
            out = op(ts)
            if ws is None:
                ws = np.random.default_rng(99).normal(size=out.shape)
            return T.sum_(T.mul(out, Tensor(ws, dtype=out.data.dtype)))

        return fn
    return fn_factory


# ---------------------------------------------------------------------------
# hand-checked forward values
# ---------------------------------------------------------------------------

def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(a, Tensor(np.eye(2)))
    np.testing.assert_allclose(out.data, [[1, 2], [3, 4]])


def test_matmul_hand_dot():
    out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    np.testing.assert_allclose(out.data, [[11.0]])


def test_matmul_shape_error_names_both():
    with pytest.raises(ShapeMismatch) as e:
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(e.value) and "(4, 2)" in str(e.value)


def test_softmax_symmetry_and_stability():
    np.testing.assert_allclose(T.softmax_lastaxis(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    out = T.softmax_lastaxis(Tensor([1000.0, 0.0])).data
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)


def test_softmax_hand_value():
    out = T.softmax_lastaxis(Tensor([np.log(2.0), 0.0])).data
    np.testing.assert_allclose(out, [2 / 3, 1 / 3], rtol=1e-6)


def test_softmax_rows_sum_to_one(rng):
    x = Tensor(rng.normal(scale=5.0, size=(8, 7)))
    rows = T.softmax_lastaxis(x).data.sum(axis=-1)
    np.testing.assert_allclose(rows, 1.0, atol=1e-6)


def test_layer_norm_constant_row_is_zero():
    g, b = Tensor(np.ones(6)), Tensor(np.zeros(6))
    out = T.layer_norm(Tensor(np.full((2, 6), 3.7)), g, b)
    np.testing.assert_array_equal(out.data, np.zeros((2, 6)))


def test_layer_norm_hand_value():
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    out = T.layer_norm(Tensor([[1.0, -1.0]]), g, b, eps=1e-9)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-6)


def test_layer_norm_shift_invariance(rng):
    x = rng.normal(size=(4, 8)).astype(np.float32)
    g, b = Tensor(rng.normal(size=8)), Tensor(rng.normal(size=8))
    a = T.layer_norm(Tensor(x), g, b).data
    c = T.layer_norm(Tensor(x + 13.25), g, b).data
    np.testing.assert_allclose(a, c, atol=2e-5)


def test_layer_norm_row_mean(rng):
    x = Tensor(rng.normal(size=(5, 16)))
    out = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-5


def test_sigmoid_values():
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5
    assert abs(T.sigmoid(Tensor([1.0])).data[0] - 0.7310586) < 1e-6
    big = T.sigmoid(Tensor([40.0, -40.0])).data
    assert np.isfinite(big).all()
    np.testing.assert_allclose(big, [1.0, 0.0], atol=1e-12)


def test_sigmoid_complement(rng):
    x = Tensor(rng.normal(scale=3.0, size=32))
    y1 = T.sigmoid(x).data
    y2 = T.sigmoid(T.neg(x)).data
    np.testing.assert_allclose(y1 + y2, 1.0, atol=1e-6)


def test_no_nan_on_finite_extremes():
    for vals in ([1e4, -1e4, 0.0], [1000.0, -1000.0, 1.0]):
        x = Tensor([vals])
        for op in (T.softmax_lastaxis, T.sigmoid, T.gelu):
            assert np.isfinite(op(x).data).all(), op.__name__
    logits = Tensor(np.array([[1e4, -1e4, 0.0]]))
    assert np.isfinite(T.cross_entropy(logits, np.array([0])).data).all()
    assert np.isfinite(T.bce_with_logits(Tensor([1e4, -1e4]), np.array([1.0, 0.0])).data).all()


def test_cross_entropy_uniform_baseline():
    logits = Tensor(np.zeros((6, 11)))
    loss = T.cross_entropy(logits, np.arange(6) % 11)
    np.testing.assert_allclose(loss.item(), np.log(11), rtol=1e-6)


def test_cross_entropy_ignore_index_zero_grad(rng):
    logits = Tensor(rng.normal(size=(4, 5)).astype(np.float32))
    targets = np.array([1, -1, 2, -1])
    with Tape() as tape:
        loss = T.cross_entropy(logits, targets)
    backward(loss, tape)
    assert np.all(logits.grad[1] == 0) and np.all(logits.grad[3] == 0)
    assert np.abs(logits.grad[0]).sum() > 0


def test_cross_entropy_all_ignored_raises():
    with pytest.raises(ContractViolation):
        T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([-1, -1]))


def test_bce_at_half():
    loss = T.bce_with_logits(Tensor(np.zeros(9)), np.zeros(9))
    np.testing.assert_allclose(loss.item(), np.log(2), rtol=1e-6)


# ---------------------------------------------------------------------------
# backward contracts
# ---------------------------------------------------------------------------

def test_backward_product_rule():
    x, y = Tensor([2.0]), Tensor([3.0])
    with Tape() as tape:
        loss = T.sum_(T.mul(x, y))
    backward(loss, tape)
    assert x.grad[0] == 3.0 and y.grad[0] == 2.0


def test_backward_sum_gives_ones(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    with Tape() as tape:
        loss = T.sum_(x)
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_rejects_nonscalar(rng):
    x = Tensor(rng.normal(size=(3,)))
    with Tape() as tape:
        y = T.mul(x, 2.0)
    with pytest.raises(ContractViolation):
        backward(y, tape)


def test_backward_rejects_foreign_tape(rng):
    x = Tensor(rng.normal(size=(3,)))
    with Tape() as t1:
        loss = T.sum_(x)
    with Tape() as t2:
        T.sum_(x)
    with pytest.raises(ContractViolation):
        backward(loss, t2)


def test_tape_topological_order(rng):
    x = Tensor(rng.normal(size=(3,)))
    with Tape() as tape:
        y = T.mul(x, 2.0)
        z = T.add(y, x)
        T.sum_(z)
    seen = set()
    for rec in tape.records:
        for inp in rec.inputs:
            assert inp.node is None or inp.node in seen or inp.node.tape is not tape
        seen.add(rec)


def test_shared_subexpression_accumulates():
    x = Tensor([1.5])
    with Tape() as tape:
        loss = T.sum_(T.add(T.mul(x, x), x))  # d/dx (x^2 + x) = 2x + 1
    backward(loss, tape)
    np.testing.assert_allclose(x.grad, [4.0])


# ---------------------------------------------------------------------------
# the finite-difference gate, op by op
# ---------------------------------------------------------------------------

OP_CASES = {
    "matmul_2d": lambda rng: (weighted(lambda ts: T.matmul(ts[0], ts[1]))(rng, None),
                              [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
    "matmul_batched": lambda rng: (weighted(lambda ts: T.matmul(ts[0], ts[1]))(rng, None),
                                   [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2))]),
    "matmul_weight": lambda rng: (weighted(lambda ts: T.matmul(ts[0], ts[1]))(rng, None),
                                  [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))]),
    "add_same": lambda rng: (weighted(lambda ts: T.add(ts[0], ts[1]))(rng, None),
                             [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
    "add_bias": lambda rng: (weighted(lambda ts: T.add(ts[0], ts[1]))(rng, None),
                             [rng.normal(size=(3, 4)), rng.normal(size=(4,))]),
    "add_scalar": lambda rng: (weighted(lambda ts: T.add(ts[0], 2.5))(rng, None),
                               [rng.normal(size=(3, 4))]),
    "neg": lambda rng: (weighted(lambda ts: T.neg(ts[0]))(rng, None),
                        [rng.normal(size=(5,))]),
    "sub": lambda rng: (weighted(lambda ts: T.sub(ts[0], ts[1]))(rng, None),
                        [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
    "mul": lambda rng: (weighted(lambda ts: T.mul(ts[0], ts[1]))(rng, None),
                        [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
    "mul_scalar": lambda rng: (weighted(lambda ts: T.mul(ts[0], -1.7))(rng, None),
                               [rng.normal(size=(3, 4))]),
    "div": lambda rng: (weighted(lambda ts: T.div(ts[0], ts[1]))(rng, None),
                        [rng.normal(size=(3, 4)),
                         rng.normal(size=(3, 4)) + np.sign(rng.normal(size=(3, 4))) * 2.0]),
    "abs": lambda rng: (weighted(lambda ts: T.abs_(ts[0]))(rng, None),
                        [rng.normal(size=(3, 4)) + 0.2]),
    "maximum": lambda rng: (weighted(lambda ts: T.maximum(ts[0], ts[1]))(rng, None),
                            [rng.normal(size=(3, 4)), rng.normal(size=(3, 4)) + 1.0]),
    "minimum": lambda rng: (weighted(lambda ts: T.minimum(ts[0], ts[1]))(rng, None),
                            [rng.normal(size=(3, 4)), rng.normal(size=(3, 4)) + 1.0]),
    "maximum_scalar": lambda rng: (weighted(lambda ts: T.maximum(ts[0], 0.0))(rng, None),
                                   [rng.normal(size=(4, 4)) + 0.3]),
    "concat_last": lambda rng: (weighted(lambda ts: T.concat_last([ts[0], ts[1]]))(rng, None),
                                [rng.normal(size=(3, 2)), rng.normal(size=(3, 5))]),
    "reshape": lambda rng: (weighted(lambda ts: T.reshape(ts[0], (4, 3)))(rng, None),
                            [rng.normal(size=(3, 4))]),
    "transpose": lambda rng: (weighted(lambda ts: T.transpose(ts[0], (1, 2, 0)))(rng, None),
                              [rng.normal(size=(2, 3, 4))]),
    "broadcast_to": lambda rng: (weighted(lambda ts: T.broadcast_to(ts[0], (4, 3, 5)))(rng, None),
                                 [rng.normal(size=(1, 3, 5))]),
    "gather_rows": lambda rng: (weighted(
        lambda ts: T.gather_rows(ts[0], np.array([0, 2, 2, 1])))(rng, None),
        [rng.normal(size=(4, 3))]),
    "select_last": lambda rng: (weighted(lambda ts: T.select_last(ts[0], 1))(rng, None),
                                [rng.normal(size=(3, 4))]),
    "embedding": lambda rng: (weighted(
        lambda ts: T.embedding(ts[0], np.array([[0, 3], [2, 2]])))(rng, None),
        [rng.normal(size=(5, 4))]),
    "dropout_active": lambda rng: (weighted(
        lambda ts: T.dropout(ts[0], 0.5, np.random.default_rng(77)))(rng, None),
        [rng.normal(size=(4, 6))]),
    "sigmoid": lambda rng: (weighted(lambda ts: T.sigmoid(ts[0]))(rng, None),
                            [rng.normal(size=(3, 4))]),
    "gelu": lambda rng: (weighted(lambda ts: T.gelu(ts[0]))(rng, None),
                         [rng.normal(size=(3, 4))]),
    "softmax": lambda rng: (weighted(lambda ts: T.softmax_lastaxis(ts[0]))(rng, None),
                            [rng.normal(size=(3, 5))]),
    "layer_norm": lambda rng: (weighted(
        lambda ts: T.layer_norm(ts[0], ts[1], ts[2]))(rng, None),
        [rng.normal(size=(3, 6)), rng.normal(size=(6,)), rng.normal(size=(6,))]),
    "sum": lambda rng: (lambda ts: T.sum_(ts[0]), [rng.normal(size=(3, 4))]),
    "mean": lambda rng: (lambda ts: T.mean_(ts[0]), [rng.normal(size=(3, 4))]),
    "cross_entropy": lambda rng: (
        lambda ts: T.cross_entropy(ts[0], np.array([1, -1, 0, 3])),
        [rng.normal(size=(4, 5))]),
    "bce_with_logits": lambda rng: (
        (lambda tgt: lambda ts: T.bce_with_logits(ts[0], tgt))(
            (rng.random((3, 4)) > 0.5).astype(np.float64)),
        [rng.normal(size=(3, 4))]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_gradient_gate(name):
    worst = check_many(OP_CASES[name])
    assert worst < 1e-4, f"{name}: {worst:.2e}"


def test_dropout_disabled_is_identity(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    assert T.dropout(x) is x


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def test_optimizer_decay_only():
    p = np.full(4, 2.0, dtype=np.float32)
    m, v = np.zeros(4, np.float32), np.zeros(4, np.float32)
    optimizer_step(p, np.zeros(4, np.float32), m, v, 1, lr=0.1, weight_decay=0.01)
    np.testing.assert_allclose(p, 2.0 * (1 - 0.001), rtol=1e-6)


def test_optimizer_first_step_is_signed(rng):
    g = rng.normal(size=6).astype(np.float32) * 10
    p = np.zeros(6, np.float32)
    m, v = np.zeros(6, np.float32), np.zeros(6, np.float32)
    optimizer_step(p, g, m, v, 1, lr=0.01, eps=1e-12, weight_decay=0.0)
    np.testing.assert_allclose(p, -0.01 * np.sign(g), rtol=1e-4)


def test_optimizer_rejects_bad_step_index():
    z = np.zeros(1, np.float32)
    with pytest.raises(ContractViolation):
        optimizer_step(z, z, z.copy(), z.copy(), 0, lr=0.1)


def test_optimizer_deterministic(rng):
    def run():
        r = np.random.default_rng(5)
        p = Tensor(r.normal(size=(4, 3)).astype(np.float32))
        opt = AdamW({"p": p}, lr=1e-2)
        for _ in range(25):
            with Tape() as tape:
                loss = T.sum_(T.mul(p, p))
            backward(loss, tape)
            opt.step()
            opt.clear_grads()
        return p.data.tobytes()

    assert run() == run()


def test_optimizer_skips_unreached_params(rng):
    a = Tensor(rng.normal(size=(3,)).astype(np.float32))
    b = Tensor(rng.normal(size=(3,)).astype(np.float32))
    before = b.data.copy()
    opt = AdamW({"a": a, "b": b}, lr=0.1, weight_decay=0.5)
    with Tape() as tape:
        loss = T.sum_(T.mul(a, a))
    backward(loss, tape)
    opt.step()
    np.testing.assert_array_equal(b.data, before)
