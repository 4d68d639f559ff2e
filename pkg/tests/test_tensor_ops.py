"""Primitive-op semantics and gradient fidelity."""

import warnings

import numpy as np
import pytest

from gram.errors import ConfigError, InvalidCheckError, NumericError
from gram.numerics import tensor as T
from gram.numerics.gradcheck import finite_diff_check
from gram.numerics.layers import (
    AttentionBlockParams,
    AttentionParams,
    SwigluBlockParams,
    SwigluParams,
    attention_block,
    rope_tables,
    swiglu_block,
)
from gram.numerics.rng import RngStream
from gram.numerics.tensor import Tensor


def t64(shape, seed, scale=1.0):
    rng = RngStream(seed)
    return Tensor(rng.normal(shape, dtype=np.float64) * scale, requires_grad=True)


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------

class TestLinear:
    def test_identity(self):
        x = Tensor(np.array([[1.0, 0.0]], np.float32))
        w = Tensor(np.eye(2, dtype=np.float32))
        b = Tensor(np.zeros(2, np.float32))
        y = T.linear(x, w, b)
        np.testing.assert_array_equal(y.data, [[1.0, 0.0]])

    def test_hand_arithmetic(self):
        x = Tensor(np.array([[1.0, 2.0]], np.float32))
        w = Tensor(np.array([[1.0], [1.0]], np.float32))
        b = Tensor(np.array([1.0], np.float32))
        np.testing.assert_array_equal(T.linear(x, w, b).data, [[4.0]])

    def test_shape_mismatch_is_config_error(self):
        with pytest.raises(ConfigError):
            T.matmul(Tensor(np.zeros((2, 3), np.float32)), Tensor(np.zeros((4, 5), np.float32)))

    def test_gradient_matches_finite_differences(self):
        params = {"x": t64((3, 4), 1), "w": t64((4, 2), 2), "b": t64((2,), 3)}
        rep = finite_diff_check(lambda p: T.sum_all(T.linear(p["x"], p["w"], p["b"])), params,
                                n_samples=22)
        assert rep.passed, rep.worst


# ---------------------------------------------------------------------------
# elementwise and reduction primitives, all against central differences
# ---------------------------------------------------------------------------

def _binary(fn):
    return lambda p: T.mean_all(T.mul(fn(p["a"], p["b"]), fn(p["a"], p["b"])))


PRIMITIVE_CASES = {
    "add": lambda p: T.sum_all(T.mul(T.add(p["a"], p["b"]), p["a"])),
    "add_bias": lambda p: T.sum_all(T.mul(T.add(p["a"], p["c"]), p["a"])),
    "sub": lambda p: T.sum_all(T.mul(T.sub(p["a"], p["b"]), p["a"])),
    "mul": lambda p: T.sum_all(T.mul(T.mul(p["a"], p["b"]), p["a"])),
    "scale": lambda p: T.sum_all(T.scale(p["a"], 2.5)),
    "exp": lambda p: T.sum_all(T.exp(T.scale(p["a"], 0.3))),
    "silu": lambda p: T.sum_all(T.silu(p["a"])),
    "sigmoid": lambda p: T.sum_all(T.sigmoid(p["a"])),
    "rms_norm": lambda p: T.sum_all(T.mul(T.rms_norm(p["a"], p["gain"]), p["b"])),
    "softmax_last": lambda p: T.sum_all(T.mul(T.softmax_last(p["a"]), p["b"])),
    "sum_last": lambda p: T.sum_all(T.mul(T.sum_last(p["a"]), T.sum_last(p["b"]))),
    "mean_all": lambda p: T.mean_all(T.mul(p["a"], p["b"])),
    "concat": lambda p: T.sum_all(T.mul(T.concat(p["a"], p["b"], axis=1),
                                        T.concat(p["b"], p["a"], axis=1))),
    "slice": lambda p: T.sum_all(T.mul(T.slice_axis(p["a"], 1, 1, 3), T.slice_axis(p["b"], 1, 0, 2))),
    "reshape": lambda p: T.sum_all(T.mul(T.reshape(p["a"], (4, 6)), T.reshape(p["b"], (4, 6)))),
    "transpose": lambda p: T.sum_all(T.mul(T.transpose(p["a"], (1, 0, 2)),
                                           T.transpose(p["b"], (1, 0, 2)))),
    "bmm": lambda p: T.sum_all(T.bmm(p["a"], T.transpose(p["b"], (0, 2, 1)))),
    "clamp": lambda p: T.sum_all(T.clamp(p["a"], -0.5, 0.5)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(name):
    params = {
        "a": t64((2, 4, 3), 10),
        "b": t64((2, 4, 3), 11),
        "c": t64((3,), 12),
        "gain": t64((3,), 13, scale=0.3),
    }
    rep = finite_diff_check(PRIMITIVE_CASES[name], params, n_samples=40)
    assert rep.passed, (name, rep.worst)


def test_embedding_gradient():
    ids = np.array([[0, 2, 1], [2, 2, 0]])
    params = {"table": t64((3, 4), 5)}
    rep = finite_diff_check(lambda p: T.sum_all(T.mul(T.embedding(p["table"], ids),
                                                      T.embedding(p["table"], ids))), params,
                            n_samples=12)
    assert rep.passed, rep.worst


def test_rope_gradient_and_inverse():
    cos, sin = rope_tables(4, 6, dtype=np.float64)
    params = {"x": t64((2, 3, 4, 6), 6)}
    rep = finite_diff_check(lambda p: T.sum_all(T.mul(T.rope(p["x"], cos, sin), p["x"])), params,
                            n_samples=30)
    assert rep.passed, rep.worst
    # rotation preserves the norm of each pair
    x = t64((1, 1, 4, 6), 7)
    y = T.rope(x, cos, sin)
    np.testing.assert_allclose(np.sum(y.data ** 2), np.sum(x.data ** 2), rtol=1e-12)


# ---------------------------------------------------------------------------
# stop-gradient and graft
# ---------------------------------------------------------------------------

class TestStopGradient:
    def test_upstream_gets_exact_zero(self):
        x = Tensor(np.ones((3,), np.float32), requires_grad=True)
        hidden = T.mul(x, x)
        stopped = hidden.detach()
        loss = T.sum_all(T.mul(stopped, stopped))
        T.backward(loss)
        assert x.grad is None  # never touched by the stopped path

    def test_mixed_path(self):
        x = Tensor(np.ones((3,), np.float32), requires_grad=True)
        live = T.scale(x, 3.0)
        frozen = T.scale(x, 100.0).detach()
        T.backward(T.sum_all(T.add(live, frozen)))
        np.testing.assert_array_equal(x.grad, np.full(3, 3.0, np.float32))

    def test_graft_value_bitwise_and_gradient_swapped(self):
        a = Tensor(np.array(1.2345678, np.float32), requires_grad=True)
        b = Tensor(np.array(2.0, np.float32), requires_grad=True)
        va = T.mul(a, a)
        vb = T.mul(b, b)
        out = T.graft(va, vb)
        assert out.data == va.data  # bitwise
        T.backward(out)
        assert a.grad is None
        np.testing.assert_allclose(b.grad, 4.0)


# ---------------------------------------------------------------------------
# softmax cross entropy
# ---------------------------------------------------------------------------

class TestCrossEntropy:
    def test_uniform_logits_closed_form(self):
        logits = Tensor(np.zeros((1, 3, 11), np.float32))
        targets = np.array([[1, 5, 10]])
        loss = T.softmax_cross_entropy(logits, targets)
        np.testing.assert_allclose(loss.data, np.log(11.0), rtol=1e-6)

    def test_confident_correct_logit_drives_loss_to_zero(self):
        targets = np.array([[2]])
        prev = np.inf
        for margin in (2.0, 8.0, 20.0):
            logits = np.zeros((1, 1, 5), np.float32)
            logits[0, 0, 2] = margin
            loss = float(T.softmax_cross_entropy(Tensor(logits), targets).data)
            assert loss < prev
            prev = loss
        assert prev < 1e-6

    def test_ignored_positions_contribute_zero(self):
        logits = np.zeros((1, 2, 4), np.float32)
        logits[0, 1] = [9.0, -3.0, 1.0, 0.0]  # ignored position, any values
        full = T.softmax_cross_entropy(Tensor(logits), np.array([[2, 0]]))
        only = T.softmax_cross_entropy(Tensor(logits[:, :1]), np.array([[2]]))
        np.testing.assert_allclose(full.data, only.data)

    def test_all_ignored_is_zero_with_warning(self):
        with pytest.warns(UserWarning):
            loss = T.softmax_cross_entropy(Tensor(np.zeros((1, 2, 4), np.float32)),
                                           np.zeros((1, 2), np.int64))
        assert float(loss.data) == 0.0

    def test_gradient_matches_finite_differences(self):
        targets = np.array([[1, 3, 0, 2]])
        params = {"logits": t64((1, 4, 5), 8)}
        rep = finite_diff_check(lambda p: T.softmax_cross_entropy(p["logits"], targets), params,
                                n_samples=20)
        assert rep.passed, rep.worst


# ---------------------------------------------------------------------------
# gaussian reparameterization
# ---------------------------------------------------------------------------

class TestGaussianReparam:
    def test_zero_variance_returns_mu_exactly(self):
        # -800 puts exp(0.5 * logvar) below the float32 denormal range
        mu = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
        logvar = Tensor(np.full((2, 3), -800.0, np.float32))
        out = T.gaussian_reparam(mu, logvar, RngStream(0))
        np.testing.assert_array_equal(out.data, mu.data)

    def test_monte_carlo_mean(self):
        n = 1_000_000
        mu = Tensor(np.ones(n, np.float32))
        logvar = Tensor(np.zeros(n, np.float32))
        out = T.gaussian_reparam(mu, logvar, RngStream(123))
        assert abs(float(out.data.mean()) - 1.0) < 0.01

    def test_same_stream_state_identical_sample(self):
        mu = Tensor(np.zeros(16, np.float32))
        lv = Tensor(np.zeros(16, np.float32))
        a = T.gaussian_reparam(mu, lv, RngStream(9, ("x",)))
        b = T.gaussian_reparam(mu, lv, RngStream(9, ("x",)))
        np.testing.assert_array_equal(a.data, b.data)

    def test_gradient_flows_to_mu_and_logvar_not_noise(self):
        def f(p):
            out = T.gaussian_reparam(p["mu"], p["lv"], RngStream(5))
            return T.sum_all(T.mul(out, out))

        params = {"mu": t64((8,), 1), "lv": t64((8,), 2, scale=0.5)}
        rep = finite_diff_check(f, params, n_samples=16)
        assert rep.passed, rep.worst

    def test_non_finite_inputs_rejected(self):
        mu = Tensor(np.array([np.nan], np.float32))
        with pytest.raises(NumericError):
            T.gaussian_reparam(mu, Tensor(np.zeros(1, np.float32)), RngStream(0))


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

def _attn_params(d, f, seed, dtype=np.float64):
    rng = RngStream(seed)
    mk = lambda *shape: Tensor(rng.normal(shape, dtype=dtype) / np.sqrt(shape[0]), requires_grad=True)
    return AttentionBlockParams(
        attn=AttentionParams(Tensor(np.ones(d, dtype), requires_grad=True), mk(d, 3 * d), mk(d, d)),
        mlp=SwigluBlockParams(Tensor(np.ones(d, dtype), requires_grad=True),
                              SwigluParams(mk(d, f), mk(d, f), mk(f, d))),
    )


class TestAttentionBlock:
    def test_single_position_is_position_independent(self):
        d = 8
        p = _attn_params(d, d, 3)
        x1 = t64((1, 1, d), 4)
        x2 = Tensor(np.concatenate([x1.data, RngStream(5).normal((1, 1, d), dtype=np.float64)], axis=1))
        # with rope disabled, a single token attends only to itself, so the
        # first position's output only depends on the first position's input
        y1 = attention_block(x1, p, 2)
        y2 = attention_block(Tensor(x2.data[:, :1]), p, 2)
        np.testing.assert_array_equal(y1.data, y2.data)

    def test_permutation_equivariance_without_rope(self):
        d = 8
        p = _attn_params(d, d, 6)
        x = t64((1, 5, d), 7)
        perm = [3, 0, 4, 1, 2]
        y = attention_block(x, p, 2)
        y_perm = attention_block(Tensor(x.data[:, perm]), p, 2)
        np.testing.assert_allclose(y.data[:, perm], y_perm.data, rtol=1e-10, atol=1e-12)

    def test_rope_breaks_permutation_equivariance(self):
        d = 8
        p = _attn_params(d, d, 6)
        cos, sin = rope_tables(5, d // 2, dtype=np.float64)
        x = t64((1, 5, d), 7)
        perm = [3, 0, 4, 1, 2]
        y = attention_block(x, p, 2, cos, sin)
        y_perm = attention_block(Tensor(x.data[:, perm]), p, 2, cos, sin)
        assert not np.allclose(y.data[:, perm], y_perm.data)

    def test_head_divisibility_checked(self):
        p = _attn_params(8, 8, 3)
        with pytest.raises(ConfigError):
            attention_block(t64((1, 2, 8), 1), p, 3)

    def test_gradient_matches_finite_differences(self):
        d, length = 16, 4
        p = _attn_params(d, d, 9)
        cos, sin = rope_tables(length, d // 4, dtype=np.float64)
        x = t64((1, length, d), 10)
        params = {"x": x, "wqkv": p.attn.w_qkv, "wo": p.attn.w_out,
                  "ng1": p.attn.norm_gain, "ng2": p.mlp.norm_gain,
                  "wg": p.mlp.mlp.w_gate, "wu": p.mlp.mlp.w_up, "wd": p.mlp.mlp.w_down}

        def f(q):
            bp = AttentionBlockParams(
                attn=AttentionParams(q["ng1"], q["wqkv"], q["wo"]),
                mlp=SwigluBlockParams(q["ng2"], SwigluParams(q["wg"], q["wu"], q["wd"])))
            y = attention_block(q["x"], bp, 4, cos, sin)
            return T.sum_all(T.mul(y, y))

        rep = finite_diff_check(f, params, n_samples=60)
        assert rep.passed, rep.worst


class TestSwigluBlock:
    def test_zero_weights_pass_through(self):
        d = 6
        zeros = lambda *s: Tensor(np.zeros(s, np.float32), requires_grad=True)
        p = SwigluBlockParams(Tensor(np.ones(d, np.float32)),
                              SwigluParams(zeros(d, d), zeros(d, d), zeros(d, d)))
        x = Tensor(RngStream(1).normal((2, 3, d)))
        np.testing.assert_array_equal(swiglu_block(x, p).data, x.data)

    def test_position_wise(self):
        d = 6
        rng = RngStream(2)
        mk = lambda *s: Tensor(rng.normal(s), requires_grad=True)
        p = SwigluBlockParams(Tensor(np.ones(d, np.float32)), SwigluParams(mk(d, d), mk(d, d), mk(d, d)))
        x = rng.normal((1, 4, d))
        x2 = x.copy()
        x2[0, 2] += 1.0
        y = swiglu_block(Tensor(x), p).data
        y2 = swiglu_block(Tensor(x2), p).data
        changed = np.any(y != y2, axis=-1)[0]
        np.testing.assert_array_equal(changed, [False, False, True, False])

    def test_gradient_matches_finite_differences(self):
        d = 16
        rng = RngStream(3)
        mk = lambda *s: Tensor(rng.normal(s, dtype=np.float64) / np.sqrt(s[0]), requires_grad=True)
        params = {"x": t64((1, 3, d), 4), "g": Tensor(np.ones(d, np.float64), requires_grad=True),
                  "wg": mk(d, d), "wu": mk(d, d), "wd": mk(d, d)}

        def f(q):
            p = SwigluBlockParams(q["g"], SwigluParams(q["wg"], q["wu"], q["wd"]))
            y = swiglu_block(q["x"], p)
            return T.sum_all(T.mul(y, y))

        rep = finite_diff_check(f, params, n_samples=40)
        assert rep.passed, rep.worst


# ---------------------------------------------------------------------------
# the checker itself
# ---------------------------------------------------------------------------

class TestFiniteDiffCheck:
    def test_quadratic_closed_form(self):
        params = {"w": Tensor(np.array([3.0]), requires_grad=True)}
        rep = finite_diff_check(lambda p: T.sum_all(T.mul(p["w"], p["w"])), params, n_samples=1)
        name, idx, analytic, numeric = rep.worst
        assert analytic == pytest.approx(6.0, abs=1e-9)
        assert numeric == pytest.approx(6.0, abs=1e-4)
        assert rep.passed

    def test_constant_function_zero_both_ways(self):
        params = {"w": Tensor(np.ones(4), requires_grad=True)}
        rep = finite_diff_check(lambda p: Tensor(np.asarray(2.0)), params, n_samples=4)
        assert rep.max_rel_error == 0.0

    def test_nondeterministic_function_rejected(self):
        state = {"n": 0}

        def f(p):
            state["n"] += 1
            return T.sum_all(T.scale(p["w"], float(state["n"])))

        with pytest.raises(InvalidCheckError):
            finite_diff_check(f, {"w": Tensor(np.ones(2), requires_grad=True)})


# ---------------------------------------------------------------------------
# rng streams
# ---------------------------------------------------------------------------

class TestRngStream:
    def test_identical_identity_identical_draws(self):
        a = RngStream(42, (7,)).normal((100,))
        b = RngStream(42, (7,)).normal((100,))
        np.testing.assert_array_equal(a, b)

    def test_distinct_streams_differ(self):
        a = RngStream(42, (1,)).normal((100,))
        b = RngStream(42, (2,)).normal((100,))
        assert not np.array_equal(a, b)

    def test_label_derivation_stable(self):
        s = RngStream(0)
        a = s.stream("trainer", 3).normal((8,))
        b = RngStream(0).stream("trainer", 3).normal((8,))
        np.testing.assert_array_equal(a, b)

    def test_counter_tracks_draws(self):
        s = RngStream(0)
        s.normal((5, 2))
        s.uniform((3,))
        assert s.counter == 13


def test_debug_checks_catch_nonfinite():
    T.set_debug_checks(True)
    try:
        big = Tensor(np.array([700.0], np.float32), requires_grad=True)
        with np.errstate(over="ignore"), pytest.raises(NumericError):
            T.exp(big)  # overflows to inf
    finally:
        T.set_debug_checks(False)


def test_no_grad_blocks_recording():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad
    loss = T.sum_all(T.mul(x, x))
    T.backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * np.ones(3, np.float32))
