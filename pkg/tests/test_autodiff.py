"""Autodiff engine tests.

Every differentiable primitive and composite is checked against central
finite differences in float64 (the gradcheck opcode), plus exact-value
spot checks computed by hand.
"""

import math

import numpy as np
import pytest

from mwpdual import autodiff as ad
from mwpdual.autodiff import (Adam, GruParams, IndexOutOfRange, NonPositiveTemperature,
                              NonScalarLoss, ParameterSet, ShapeMismatch, Tensor,
                              backward, gradcheck, gru_cell, gru_sequence, no_grad)

F64 = np.float64


def t64(arr):
    return Tensor(np.asarray(arr, dtype=F64))


def rand_t(rng, shape):
    return Tensor(rng.standard_normal(shape).astype(F64))


# ---------------------------------------------------------------------------
# Forward spot checks
# ---------------------------------------------------------------------------

class TestForwardValues:
    def test_matmul_identity(self):
        out = ad.matmul(t64(np.eye(2)), t64([[5.0], [6.0]]))
        assert np.array_equal(out.data, [[5.0], [6.0]])

    def test_matmul_values(self):
        out = ad.matmul(t64([[1, 2], [3, 4]]), t64([[5.0], [6.0]]))
        assert np.array_equal(out.data, [[17.0], [39.0]])

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeMismatch):
            ad.matmul(t64(np.zeros((2, 3))), t64(np.zeros((2, 3))))

    def test_sigmoid_half(self):
        assert ad.sigmoid(t64([[0.0]])).item() == 0.5

    def test_relu_clamps(self):
        x = t64([[-3.0]])
        y = ad.relu(x)
        assert y.item() == 0.0
        backward(ad.sum_all(y))
        assert x.grad[0, 0] == 0.0

    def test_gather_scatter_add(self):
        table = t64(np.arange(6.0).reshape(3, 2))
        out = ad.gather_rows(table, [0, 0])
        backward(ad.sum_all(out))
        assert np.array_equal(table.grad, [[2, 2], [0, 0], [0, 0]])

    def test_gather_out_of_range(self):
        with pytest.raises(IndexOutOfRange):
            ad.gather_rows(t64(np.zeros((2, 2))), [2])

    def test_softmax_symmetry(self):
        assert np.allclose(ad.softmax_rows(t64([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_softmax_stability(self):
        out = ad.softmax_rows(t64([[1000.0, 0.0]])).data
        assert np.isfinite(out).all()
        assert np.allclose(out, [[1.0, 0.0]])

    def test_softmax_rows_sum_to_one(self, rng):
        x = rand_t(rng, (5, 7))
        assert np.allclose(ad.softmax_rows(x).data.sum(axis=1), 1.0, atol=1e-6)
        ls = ad.log_softmax_rows(x).data
        assert np.allclose(np.exp(ls).sum(axis=1), 1.0, atol=1e-6)

    def test_rank3_rejected(self):
        with pytest.raises(ShapeMismatch):
            Tensor(np.zeros((2, 2, 2)))


class TestCrossEntropy:
    def test_uniform(self):
        loss = ad.cross_entropy(t64(np.zeros((3, 4))), [0, 1, 2])
        assert math.isclose(loss.item(), math.log(4), rel_tol=1e-12)

    def test_confident(self):
        logits = np.full((1, 4), -50.0)
        logits[0, 2] = 50.0
        assert ad.cross_entropy(t64(logits), [2]).item() < 1e-6

    def test_all_ignored_is_zero_with_zero_grad(self):
        logits = t64(np.ones((2, 3)))
        loss = ad.cross_entropy(logits, [9, 9], ignore_id=9)
        assert loss.item() == 0.0
        backward(loss)
        assert logits.grad is None

    def test_bad_target(self):
        with pytest.raises(IndexOutOfRange):
            ad.cross_entropy(t64(np.zeros((1, 3))), [3])

    def test_ignored_rows_excluded_from_mean(self):
        logits = np.zeros((2, 4))
        full = ad.cross_entropy(t64(logits[:1]), [1])
        part = ad.cross_entropy(t64(logits), [1, 7], ignore_id=7)
        assert math.isclose(full.item(), part.item(), rel_tol=1e-12)


class TestGumbelSoftmax:
    def test_zero_noise_uniform(self):
        out = ad.gumbel_softmax(t64([[0.0, 0.0]]), 1.0)
        assert np.allclose(out.data, [[0.5, 0.5]])

    def test_low_temperature_sharpens(self):
        out = ad.gumbel_softmax(t64([[2.0, 1.0]]), 0.01)
        assert out.data[0, 0] > 1 - 1e-6

    def test_rows_sum_to_one(self, rng):
        for _ in range(5):
            logits = rand_t(rng, (1, 6))
            noise = ad.gumbel_noise(rng, 6)
            out = ad.gumbel_softmax(logits, 0.7, noise)
            assert math.isclose(out.data.sum(), 1.0, abs_tol=1e-6)

    def test_non_positive_temperature(self):
        with pytest.raises(NonPositiveTemperature):
            ad.gumbel_softmax(t64([[0.0, 1.0]]), 0.0)


# ---------------------------------------------------------------------------
# backward() semantics
# ---------------------------------------------------------------------------

class TestBackward:
    def test_product_rule(self):
        a, b = t64([[1.0, 2.0]]), t64([[3.0, 4.0]])
        backward(ad.sum_all(ad.mul(a, b)))
        assert np.array_equal(a.grad, [[3.0, 4.0]])
        assert np.array_equal(b.grad, [[1.0, 2.0]])

    def test_fanout_accumulates(self):
        x = t64([[1.0]])
        backward(ad.add(x, x))
        assert x.grad[0, 0] == 2.0

    def test_dag_path_products(self):
        # w = x*y + x: dw/dx = y + 1, dw/dy = x
        x, y = t64([[3.0]]), t64([[5.0]])
        backward(ad.add(ad.mul(x, y), x))
        assert x.grad[0, 0] == 6.0
        assert y.grad[0, 0] == 3.0

    def test_non_scalar_loss(self):
        with pytest.raises(NonScalarLoss):
            backward(t64(np.zeros((2, 2))))

    def test_no_grad_builds_no_tape(self):
        x = t64([[1.0, 2.0]])
        with no_grad():
            y = ad.tanh(ad.add(x, x))
        assert y._parents == () and y._backward is None


# ---------------------------------------------------------------------------
# gradcheck: primitives on random shapes, 10 seeds each
# ---------------------------------------------------------------------------

def _shapes(rng):
    m, n, k = (int(rng.integers(1, 9)) for _ in range(3))
    return m, n, k


PRIMITIVE_CASES = [
    ("add", lambda a, b: ad.sum_all(ad.tanh(ad.add(a, b))), "same"),
    ("sub", lambda a, b: ad.sum_all(ad.tanh(ad.sub(a, b))), "same"),
    ("mul", lambda a, b: ad.sum_all(ad.tanh(ad.mul(a, b))), "same"),
    ("add_row_broadcast", lambda a, b: ad.sum_all(ad.tanh(ad.add(a, b))), "row"),
    ("add_scalar", lambda a, b: ad.sum_all(ad.tanh(ad.add(a, b))), "scalar"),
    ("matmul", lambda a, b: ad.sum_all(ad.tanh(ad.matmul(a, b))), "matmul"),
]


@pytest.mark.parametrize("name,fn,kind", PRIMITIVE_CASES)
def test_gradcheck_binary_primitives(name, fn, kind):
    for seed in range(10):
        rng = np.random.default_rng(seed)
        m, n, k = _shapes(rng)
        a = rand_t(rng, (m, n))
        if kind == "same":
            b = rand_t(rng, (m, n))
        elif kind == "row":
            b = rand_t(rng, (1, n))
        elif kind == "scalar":
            b = rand_t(rng, (1, 1))
        else:
            b = rand_t(rng, (n, k))
        assert gradcheck(fn, [a, b]) < 1e-4, name


UNARY_CASES = [
    ("tanh", ad.tanh),
    ("sigmoid", ad.sigmoid),
    ("relu", ad.relu),
    ("transpose", ad.transpose),
    ("scale", lambda x: ad.scale(x, 1.7)),
    ("softmax_rows", ad.softmax_rows),
    ("log_softmax_rows", ad.log_softmax_rows),
    ("repeat", lambda x: ad.repeat_rows(ad.slice_rows(x, 0, 1), 3)),
    ("slice_cols", lambda x: ad.slice_cols(x, 0, 1)),
]


@pytest.mark.parametrize("name,op", UNARY_CASES)
def test_gradcheck_unary_primitives(name, op):
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        m, n, _ = _shapes(rng)
        x = rand_t(rng, (m, n))
        # relu has a kink at 0; keep coordinates away from it
        if name == "relu":
            x.data[np.abs(x.data) < 1e-2] += 0.05
        fn = lambda v: ad.sum_all(ad.mul(op(v), op(v)))  # noqa: E731
        assert gradcheck(fn, [x]) < 1e-4, name


def test_gradcheck_concat_and_gather():
    for seed in range(10):
        rng = np.random.default_rng(200 + seed)
        a = rand_t(rng, (2, 3))
        b = rand_t(rng, (4, 3))

        def fn(x, y):
            cat = ad.concat_rows([x, y])
            picked = ad.gather_rows(cat, [0, 5, 0, 3])
            wide = ad.concat_cols([picked, ad.tanh(picked)])
            return ad.sum_all(ad.mul(wide, wide))

        assert gradcheck(fn, [a, b]) < 1e-4


def test_gradcheck_cross_entropy_softmax_composite():
    for seed in range(10):
        rng = np.random.default_rng(300 + seed)
        logits = rand_t(rng, (4, 5))
        targets = rng.integers(0, 5, size=4).tolist()
        fn = lambda x: ad.cross_entropy(x, targets)  # noqa: E731
        assert gradcheck(fn, [logits]) < 1e-4


def test_gradcheck_gumbel_frozen_noise():
    for seed in range(10):
        rng = np.random.default_rng(400 + seed)
        logits = rand_t(rng, (1, 6))
        noise = ad.gumbel_noise(rng, 6)
        fn = lambda x: ad.sum_all(ad.mul(ad.gumbel_softmax(x, 0.7, noise),
                                         ad.gumbel_softmax(x, 0.7, noise)))  # noqa: E731
        assert gradcheck(fn, [logits]) < 1e-4


# ---------------------------------------------------------------------------
# GRU cell and sequence
# ---------------------------------------------------------------------------

def make_gru(rng, d_in, d_h):
    ps = ParameterSet(dtype=F64)
    return ad.init_gru(ps, "g", d_in, d_h, rng), ps


class TestGru:
    def test_zero_params_zero_state(self):
        W = Tensor(np.zeros((2, 3), dtype=F64))
        U = Tensor(np.zeros((1, 3), dtype=F64))
        b = Tensor(np.zeros((1, 3), dtype=F64))
        out = gru_cell(t64([[1.0, 2.0]]), t64([[0.0]]), GruParams(W, U, b))
        assert out.item() == 0.0  # z=0.5, candidate=0

    def test_scalar_hand_computation(self):
        # d_in = d_h = 1 with hand-set weights, gates evaluated by hand
        W = t64([[0.1, 0.2, 0.3]])
        U = t64([[0.4, 0.5, 0.6]])
        b = t64([[0.01, 0.02, 0.03]])
        x, h = 0.7, 0.9
        z = 1 / (1 + math.exp(-(0.1 * x + 0.4 * h + 0.01)))
        r = 1 / (1 + math.exp(-(0.2 * x + 0.5 * h + 0.02)))
        c = math.tanh(0.3 * x + r * (0.6 * h) + 0.03)
        want = (1 - z) * h + z * c
        got = gru_cell(t64([[x]]), t64([[h]]), GruParams(W, U, b)).item()
        assert math.isclose(got, want, rel_tol=1e-6)

    def test_cell_gradcheck(self):
        rng = np.random.default_rng(0)
        gru, _ = make_gru(rng, 3, 3)
        x, h = rand_t(rng, (1, 3)), rand_t(rng, (1, 3))

        def fn(xv, hv, W, U, b):
            return ad.sum_all(gru_cell(xv, hv, GruParams(W, U, b)))

        assert gradcheck(fn, [x, h, gru.W, gru.U, gru.b]) < 1e-4

    def test_sequence_matches_folded_cell(self, rng):
        gru, _ = make_gru(rng, 4, 5)
        X = rand_t(rng, (7, 4))
        h0 = t64(np.zeros((1, 5)))
        H = gru_sequence(X, h0, gru)
        h = h0
        for t in range(7):
            h = gru_cell(ad.slice_rows(X, t, t + 1), h, gru)
            assert np.allclose(H.data[t], h.data[0], atol=1e-12)

    def test_sequence_gradcheck_10_seeds(self):
        for seed in range(10):
            rng = np.random.default_rng(500 + seed)
            gru, _ = make_gru(rng, 2, 3)
            X = rand_t(rng, (4, 2))
            h0 = rand_t(rng, (1, 3))

            def fn(xv, h0v, W, U, b):
                return ad.sum_all(ad.tanh(gru_sequence(xv, h0v, GruParams(W, U, b))))

            assert gradcheck(fn, [X, h0, gru.W, gru.U, gru.b]) < 1e-4

    def test_shape_errors(self):
        rng = np.random.default_rng(1)
        gru, _ = make_gru(rng, 3, 4)
        with pytest.raises(ShapeMismatch):
            gru_cell(t64(np.zeros((1, 2))), t64(np.zeros((1, 4))), gru)
        with pytest.raises(ShapeMismatch):
            gru_sequence(t64(np.zeros((3, 3))), t64(np.zeros((1, 2))), gru)


def test_gradcheck_attention_composite():
    for seed in range(10):
        rng = np.random.default_rng(600 + seed)
        q = rand_t(rng, (2, 3))
        keys = rand_t(rng, (4, 3))
        W = rand_t(rng, (3, 3))
        U = rand_t(rng, (3, 3))
        v = rand_t(rng, (3, 1))
        b = rand_t(rng, (1, 3))

        def fn(qv, kv, Wv, Uv, vv, bv):
            ctx = ad.additive_attention_rows(qv, kv, ad.matmul(kv, Wv), Uv, vv, bv)
            return ad.sum_all(ad.mul(ctx, ctx))

        assert gradcheck(fn, [q, keys, W, U, v, b]) < 1e-4


def test_gradcheck_two_layer_tanh_net():
    rng = np.random.default_rng(42)
    W1, b1 = rand_t(rng, (3, 4)), rand_t(rng, (1, 4))
    W2 = rand_t(rng, (4, 1))
    x = rand_t(rng, (2, 3))

    def fn(w1, b1v, w2, xv):
        h = ad.tanh(ad.add(ad.matmul(xv, w1), b1v))
        return ad.sum_all(ad.tanh(ad.matmul(h, w2)))

    assert gradcheck(fn, [W1, b1, W2, x]) < 1e-4


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class TestAdam:
    def test_first_step_hand_value(self):
        # g=1 at t=1: m_hat = v_hat = 1, so the step is -lr / (1 + eps)
        ps = ParameterSet()
        p = ps.zeros("p", (1, 1))
        opt = Adam(ps, lr=1e-3)
        p.grad = np.ones((1, 1), dtype=np.float32)
        opt.step()
        assert math.isclose(p.data[0, 0], -1e-3 / (1 + 1e-8), rel_tol=1e-6)

    def test_zero_gradient_is_fixed_point(self):
        rng = np.random.default_rng(0)
        ps = ParameterSet()
        p = ps.add("p", (2, 2), rng)
        before = p.data.copy()
        opt = Adam(ps)
        p.grad = np.zeros_like(p.data)
        opt.step()
        assert np.array_equal(p.data, before)

    def test_step_counter(self):
        ps = ParameterSet()
        ps.zeros("p", (1, 1))
        opt = Adam(ps)
        opt.step()
        opt.step()
        assert opt.t == 2

    def test_missing_grad_skipped(self):
        ps = ParameterSet()
        p = ps.zeros("p", (1, 1))
        before = p.data.copy()
        Adam(ps).step()
        assert np.array_equal(p.data, before)


# ---------------------------------------------------------------------------
# ParameterSet and the blob format
# ---------------------------------------------------------------------------

class TestParameterSet:
    def test_order_and_draw_determinism(self):
        a = ParameterSet()
        b = ParameterSet()
        for ps in (a, b):
            rng = np.random.default_rng(5)
            ps.add("w1", (2, 3), rng)
            ps.add("w2", (3, 1), rng)
        assert a.names() == b.names() == ["w1", "w2"]
        assert np.array_equal(a["w1"].data, b["w1"].data)
        assert np.array_equal(a["w2"].data, b["w2"].data)

    def test_duplicate_name(self):
        ps = ParameterSet()
        ps.zeros("p", (1, 1))
        with pytest.raises(ad.AutodiffError):
            ps.zeros("p", (1, 1))

    def test_snapshot_restore(self):
        rng = np.random.default_rng(1)
        ps = ParameterSet()
        p = ps.add("p", (2, 2), rng)
        snap = ps.snapshot()
        p.data += 1.0
        ps.restore(snap)
        assert np.array_equal(p.data, snap["p"])

    def test_blob_roundtrip(self):
        rng = np.random.default_rng(2)
        ps = ParameterSet()
        ps.add("a", (2, 3), rng)
        ps.add("b", (1, 4), rng)
        blob = ad.params_to_blob(ps)
        snap = ps.snapshot()
        ps["a"].data += 5.0
        ad.params_from_blob(ps, blob)
        assert np.array_equal(ps["a"].data, snap["a"])
        assert np.array_equal(ps["b"].data, snap["b"])

    def test_blob_truncation(self):
        rng = np.random.default_rng(3)
        ps = ParameterSet()
        ps.add("a", (2, 2), rng)
        blob = ad.params_to_blob(ps)
        with pytest.raises(ValueError):
            ad.params_from_blob(ps, blob[:-4])

    def test_manifest_offsets(self):
        ps = ParameterSet()
        ps.zeros("a", (2, 3))
        ps.zeros("b", (1, 1))
        entries = ad.manifest_entries(ps)
        assert entries[0] == {"name": "a", "shape": [2, 3], "offset": 0}
        assert entries[1] == {"name": "b", "shape": [1, 1], "offset": 24}


def test_check_finite_mode():
    ad.set_check_finite(True)
    try:
        with pytest.raises(ad.NonFiniteTensor):
            Tensor(np.array([[np.inf]]))
    finally:
        ad.set_check_finite(False)
