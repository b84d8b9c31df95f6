import numpy as np
import pytest

from graphmix import diffengine as de


def _scalar_loss(t):
    return de.sum_(de.mul(t, t))


def _fd_for(fn, params, eps=1e-6):
    return de.finite_diff_check(fn, params, eps=eps)


class TestBasicOps:
    def test_matmul_hand_values(self):
        a = de.const([[1.0, 2.0], [3.0, 4.0]], dtype=np.float64)
        b = de.const([[1.0], [1.0]], dtype=np.float64)
        out = de.matmul(a, b)
        np.testing.assert_array_equal(out.values, [[3.0], [7.0]])

    def test_masked_softmax_uniform_over_unmasked(self):
        x = de.const([0.0, 0.0, 0.0], dtype=np.float64)
        out = de.masked_softmax(x, np.array([True, True, False]), axis=-1)
        np.testing.assert_allclose(out.values, [0.5, 0.5, 0.0], atol=0)

    def test_abs_of_raw_hypernet_output(self):
        x = de.const([-0.3, 0.2])
        np.testing.assert_allclose(de.abs_(x).values, [0.3, 0.2], rtol=1e-6)

    def test_masked_softmax_sums_to_one_and_zero_at_masked(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = rng.integers(2, 6)
            mask = rng.random(n) < 0.6
            if not mask.any():
                mask[rng.integers(n)] = True
            x = de.const(rng.normal(size=n) * 3, dtype=np.float64)
            y = de.masked_softmax(x, mask, axis=-1).values
            assert abs(y[mask].sum() - 1.0) < 1e-12
            assert np.all(y[~mask] == 0.0)

    def test_masked_softmax_fully_masked_row_is_zero(self):
        x = de.const([[1.0, 2.0], [3.0, 4.0]], dtype=np.float64)
        mask = np.array([[True, True], [False, False]])
        y = de.masked_softmax(x, mask, axis=-1).values
        assert np.all(y[1] == 0.0)
        assert abs(y[0].sum() - 1.0) < 1e-12

    def test_shape_mismatch_named(self):
        a = de.const(np.zeros((2, 3)))
        b = de.const(np.zeros((4, 2)))
        with pytest.raises(de.ShapeError, match="matmul"):
            de.matmul(a, b)
        with pytest.raises(de.ShapeError, match="add"):
            de.add(a, de.const(np.zeros((3, 2))))

    def test_strict_mode_rejects_nonfinite(self):
        a = de.const([np.nan, 1.0])
        with de.strict_mode():
            with pytest.raises(FloatingPointError):
                de.relu(a)


class TestBackward:
    def test_quadratic_gradient(self):
        x = de.parameter([1.0, 2.0, 3.0], "x", dtype=np.float64)
        grads = de.backward(_scalar_loss(x), {"x": x})
        np.testing.assert_allclose(grads["x"], [2.0, 4.0, 6.0], rtol=1e-12)

    def test_seed_must_be_scalar(self):
        x = de.parameter([1.0, 2.0], "x")
        with pytest.raises(ValueError, match="scalar"):
            de.backward(de.mul(x, x), {"x": x})

    def test_unreachable_param_gets_zeros(self):
        x = de.parameter([1.0, 2.0], "x", dtype=np.float64)
        y = de.parameter([5.0], "y", dtype=np.float64)
        grads = de.backward(_scalar_loss(x), {"x": x, "y": y})
        np.testing.assert_array_equal(grads["y"], [0.0])

    def test_abs_gradient_zero_at_zero(self):
        x = de.parameter([0.0, -2.0, 3.0], "x", dtype=np.float64)
        grads = de.backward(de.sum_(de.abs_(x)), {"x": x})
        np.testing.assert_array_equal(grads["x"], [0.0, -1.0, 1.0])

    def test_masked_softmax_jacobian_row(self):
        # dot the softmax output with a one-hot: gradient is a Jacobian row
        rng = np.random.default_rng(3)
        x = de.parameter(rng.normal(size=4), "x", dtype=np.float64)
        mask = np.array([True, True, True, False])
        onehot = de.const([0.0, 1.0, 0.0, 0.0], dtype=np.float64)

        def fn():
            return de.sum_(de.mul(de.masked_softmax(x, mask, axis=-1), onehot))

        assert _fd_for(fn, {"x": x}) < 1e-8

    def test_no_grad_suppresses_tape(self):
        x = de.parameter([1.0, 2.0], "x")
        with de.no_grad():
            y = de.mul(x, x)
        assert not y.requires_grad and y._backward is None

    def test_repeat_backward_is_deterministic(self):
        rng = np.random.default_rng(11)
        x = de.parameter(rng.normal(size=(4, 3)), "x", dtype=np.float64)
        w = de.parameter(rng.normal(size=(3, 2)), "w", dtype=np.float64)

        def fn():
            return de.sum_(de.relu(de.matmul(x, w)))

        g1 = de.backward(fn(), {"x": x, "w": w})
        g2 = de.backward(fn(), {"x": x, "w": w})
        for k in g1:
            np.testing.assert_array_equal(g1[k], g2[k])


def _random_tensor(rng, shape):
    return de.parameter(rng.normal(size=shape), "p", dtype=np.float64)


OP_CASES = {
    "add": lambda p, c: de.sum_(de.mul(de.add(p, c), de.add(p, c))),
    "sub": lambda p, c: de.sum_(de.mul(de.sub(p, c), de.sub(p, c))),
    "mul": lambda p, c: de.sum_(de.mul(de.mul(p, c), p)),
    "relu": lambda p, c: de.sum_(de.relu(p)),
    "elu": lambda p, c: de.sum_(de.elu(p)),
    "tanh": lambda p, c: de.sum_(de.tanh_(p)),
    "sigmoid": lambda p, c: de.sum_(de.sigmoid(p)),
    "abs": lambda p, c: de.sum_(de.abs_(p)),
    "exp": lambda p, c: de.sum_(de.exp_(de.scale(p, 0.3))),
    "sqdiff": lambda p, c: de.sum_(de.sqdiff(p, c)),
    "mean": lambda p, c: de.mean_(de.mul(p, p), axis=1),
    "narrow": lambda p, c: de.sum_(de.mul(de.narrow(p, 1, 1, 2), de.narrow(p, 1, 0, 2))),
    "swapaxes": lambda p, c: de.sum_(de.mul(de.swapaxes(p, 0, 1), de.swapaxes(p, 0, 1))),
    "reshape": lambda p, c: de.sum_(de.mul(de.reshape(p, (-1,)), de.reshape(p, (-1,)))),
}


@pytest.mark.parametrize("kind", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(kind):
    # 100 random draws per kind, 64-bit, rel err <= 1e-4
    rng = np.random.default_rng(hash(kind) % 2**32)
    worst = 0.0
    for _ in range(100):
        shape = tuple(rng.integers(2, 5, size=2))
        p = _random_tensor(rng, shape)

        def fn(p=p, c=de.const(rng.normal(size=shape), dtype=np.float64)):
            return OP_CASES[kind](p, c)

        if kind == "mean":
            def fn(p=p, c=None):
                return de.sum_(de.mean_(de.mul(p, p), axis=1))
        worst = max(worst, _fd_for(fn, {"p": p}))
    assert worst <= 1e-4, f"{kind}: max rel err {worst}"


def test_matmul_gradients_all_layouts():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(30):
        n, k, m, b = rng.integers(2, 4, size=4)
        a2 = _random_tensor(rng, (n, k))
        b2 = _random_tensor(rng, (k, m))
        worst = max(worst, _fd_for(lambda: de.sum_(de.mul(de.matmul(a2, b2), de.matmul(a2, b2))),
                                   {"a": a2, "b": b2}))
        a3 = _random_tensor(rng, (b, n, k))
        b3 = _random_tensor(rng, (b, k, m))
        worst = max(worst, _fd_for(lambda: de.sum_(de.matmul(a3, b3)), {"a": a3, "b": b3}))
        worst = max(worst, _fd_for(lambda: de.sum_(de.matmul(a3, b2)), {"a": a3, "b": b2}))
    assert worst <= 1e-4


def test_gather_ops_gradients():
    rng = np.random.default_rng(13)
    p = _random_tensor(rng, (5, 3))
    idx = np.array([0, 2, 2, 4])
    assert _fd_for(lambda: de.sum_(de.mul(de.gather_rows(p, idx), de.gather_rows(p, idx))),
                   {"p": p}) <= 1e-4
    q = _random_tensor(rng, (4, 6))
    lanes = rng.integers(0, 6, size=(4, 1))
    assert _fd_for(lambda: de.sum_(de.mul(de.take_along(q, lanes, axis=-1),
                                          de.take_along(q, lanes, axis=-1))),
                   {"q": q}) <= 1e-4


def test_concat_stack_gradients():
    rng = np.random.default_rng(17)
    a = _random_tensor(rng, (2, 3))
    b = _random_tensor(rng, (2, 2))
    assert _fd_for(lambda: de.sum_(de.mul(de.concat([a, b], axis=1), de.concat([a, b], axis=1))),
                   {"a": a, "b": b}) <= 1e-4
    c = _random_tensor(rng, (2, 3))
    assert _fd_for(lambda: de.sum_(de.mul(de.stack([a, c], axis=1), de.stack([a, c], axis=1))),
                   {"a": a, "c": c}) <= 1e-4


def test_masked_softmax_gradients_random_masks():
    rng = np.random.default_rng(19)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 5))
        mask = rng.random((3, n)) < 0.7
        mask[~mask.any(axis=1), 0] = True
        p = _random_tensor(rng, (3, n))
        w = de.const(rng.normal(size=(3, n)), dtype=np.float64)
        worst = max(worst, _fd_for(
            lambda p=p, w=w, m=mask: de.sum_(de.mul(de.masked_softmax(p, m, axis=-1), w)),
            {"p": p}))
    assert worst <= 1e-4


class TestGRU:
    def test_zero_params_zero_hidden_gives_zero(self):
        rng = np.random.default_rng(0)
        params = de.init_gru_params(3, 4, rng, "gru", dtype=np.float64)
        for p in params.values():
            p.values[:] = 0.0
        x = de.const(np.ones((2, 3)), dtype=np.float64)
        h = de.const(np.zeros((2, 4)), dtype=np.float64)
        out = de.gru_cell(x, h, params, "gru")
        np.testing.assert_array_equal(out.values, np.zeros((2, 4)))

    def test_saturated_update_gate_carries_hidden(self):
        rng = np.random.default_rng(1)
        params = de.init_gru_params(3, 4, rng, "gru", dtype=np.float64)
        params["gru/b_z"].values[:] = 50.0  # update gate -> 1
        x = de.const(rng.normal(size=(2, 3)), dtype=np.float64)
        h = de.const(rng.normal(size=(2, 4)), dtype=np.float64)
        out = de.gru_cell(x, h, params, "gru")
        np.testing.assert_allclose(out.values, h.values, atol=1e-12)

    def test_bptt_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        params = de.init_gru_params(3, 4, rng, "gru", dtype=np.float64)
        xs = [np.asarray(rng.normal(size=(2, 3))) for _ in range(5)]

        def fn():
            h = de.const(np.zeros((2, 4)), dtype=np.float64)
            for x in xs:
                h = de.gru_cell(de.const(x, dtype=np.float64), h, params, "gru")
            return de.sum_(de.mul(h, h))

        assert de.finite_diff_check(fn, params, eps=1e-6) <= 1e-4

    def test_dimension_mismatch_rejected(self):
        rng = np.random.default_rng(3)
        params = de.init_gru_params(3, 4, rng, "gru")
        x = de.const(np.zeros((2, 5)))
        h = de.const(np.zeros((2, 4)))
        with pytest.raises(de.ShapeError):
            de.gru_cell(x, h, params, "gru")


class TestFiniteDiffCheck:
    def test_quadratic_is_nearly_exact(self):
        x = de.parameter([1.0, -2.0, 0.5], "x", dtype=np.float64)
        err = de.finite_diff_check(lambda: _scalar_loss(x), {"x": x}, eps=1e-5)
        assert err <= 1e-9

    def test_zero_eps_rejected(self):
        x = de.parameter([1.0], "x", dtype=np.float64)
        with pytest.raises(ValueError):
            de.finite_diff_check(lambda: _scalar_loss(x), {"x": x}, eps=0.0)

    def test_requires_64bit(self):
        x = de.parameter([1.0], "x", dtype=np.float32)
        with pytest.raises(ValueError, match="64-bit"):
            de.finite_diff_check(lambda: _scalar_loss(x), {"x": x})


def test_tape_replay_bit_identical():
    rng = np.random.default_rng(23)
    x = de.parameter(rng.normal(size=(6, 4)).astype(np.float32), "x")
    w = de.parameter(rng.normal(size=(4, 4)).astype(np.float32), "w")

    def fwd():
        return de.sum_(de.tanh_(de.matmul(x, w)))

    a, b = fwd(), fwd()
    np.testing.assert_array_equal(a.values, b.values)


def test_param_cast_and_sync():
    rng = np.random.default_rng(29)
    p32 = {"a": de.parameter(rng.normal(size=(3, 3)).astype(np.float32), "a")}
    p64 = de.cast_params(p32, np.float64)
    assert p64["a"].values.dtype == np.float64
    tgt = de.freeze_params(p32)
    p32["a"].values[:] = 1.0
    de.sync_params(tgt, p32)
    np.testing.assert_array_equal(tgt["a"].values, p32["a"].values)
    assert not tgt["a"].requires_grad
