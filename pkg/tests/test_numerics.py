"""Autograd, gradient checking, parameter storage, optimizer and RNG."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mrtlab.errors import ContractError, NumericFault, OracleInvalidError, ParseError
from mrtlab.numerics import (
    Adam,
    ParamStore,
    Rng,
    ag,
    backward,
    finite_diff_grad,
    from_bytes,
    grad_check,
    inverse_sqrt_lr,
    load_params,
    save_params,
    to_bytes,
    value_and_grad,
)

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def _store(seed=0, **shapes):
    rng = np.random.default_rng(seed)
    return ParamStore({k: rng.normal(size=s) for k, s in shapes.items()})


class TestScalarGradients:
    def test_product_rule(self):
        P = ParamStore({"x": np.array([3.0]), "y": np.array([-2.0])})
        val, g = value_and_grad(lambda L: ag.tsum(L["x"] * L["y"]), P)
        assert val == -6.0
        assert g["x"][0] == -2.0 and g["y"][0] == 3.0

    def test_shared_node_accumulates(self):
        P = ParamStore({"x": np.array([1.5])})
        _, g = value_and_grad(lambda L: ag.tsum(L["x"] * L["x"] + L["x"]), P)
        assert g["x"][0] == pytest.approx(2 * 1.5 + 1)

    def test_unused_block_gets_zero(self):
        P = _store(x=(2,), unused=(3,))
        _, g = value_and_grad(lambda L: ag.tsum(L["x"]), P)
        np.testing.assert_array_equal(g["unused"], np.zeros(3))

    def test_log_softmax_gradient_closed_form(self):
        z = np.array([0.3, -1.0, 2.0])
        P = ParamStore({"z": z.copy()})
        _, g = value_and_grad(lambda L: ag.pick(ag.log_softmax(L["z"][None, :]), np.array([1]))[0], P)
        p = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
        np.testing.assert_allclose(g["z"], np.eye(3)[1] - p, atol=1e-12)

    def test_non_scalar_loss_rejected(self):
        P = _store(x=(3,))
        leaves = P.leaves()
        with pytest.raises(ContractError):
            backward(leaves["x"] * 2.0, P, leaves)

    def test_non_finite_loss_rejected(self):
        P = ParamStore({"x": np.array([-1.0])})
        leaves = P.leaves()
        with np.errstate(invalid="ignore"):
            loss = ag.tsum(ag.log(leaves["x"]))
        with pytest.raises(NumericFault):
            backward(loss, P, leaves)


def _mixed_loss(L):
    h = ag.tanh(L["a"] @ L["b"])
    s = ag.softmax(h, axis=-1)
    return ag.tmean(ag.log(s + 0.1)) + ag.tsum(ag.relu(L["a"]) * 0.5) + ag.tsum(ag.sigmoid(L["b"]))


class TestGradCheck:
    def test_composite_graph_passes(self):
        P = _store(1, a=(3, 4), b=(4, 5))
        rep = grad_check(_mixed_loss, P, rel_tol=1e-4)
        assert rep.passed, str(rep)

    def test_wrong_analytic_gradient_fails(self):
        P = _store(2, a=(3, 4), b=(4, 5))
        _, g = value_and_grad(_mixed_loss, P)
        rep = grad_check(_mixed_loss, P, rel_tol=1e-4, analytic=g.scaled(1.5))
        assert not rep.passed
        assert rep.max_rel_error > 0.1

    @pytest.mark.parametrize("tol", [0.0, 1.0, -0.1, 2.0])
    def test_tolerance_must_be_in_unit_interval(self, tol):
        with pytest.raises(ContractError):
            grad_check(_mixed_loss, _store(a=(3, 4), b=(4, 5)), rel_tol=tol)

    def test_nondeterministic_loss_invalidates_oracle(self):
        noise = np.random.default_rng(0)
        P = _store(x=(2,))
        with pytest.raises(OracleInvalidError):
            finite_diff_grad(lambda L: ag.tsum(L["x"]) + float(noise.random()), P)

    def test_finite_difference_of_quadratic(self):
        P = ParamStore({"x": np.array([1.0, -2.0])})
        g = finite_diff_grad(lambda L: ag.tsum(L["x"] * L["x"]), P, step=1e-4)
        np.testing.assert_allclose(g["x"], [2.0, -4.0], atol=1e-8)

    @given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (3, 1), elements=finite))
    def test_matmul_column_gradient(self, A, v):
        P = ParamStore({"A": A, "v": v})
        _, g = value_and_grad(lambda L: ag.tsum(ag.matmul(L["A"], L["v"])), P)
        np.testing.assert_allclose(g["A"], np.tile(v.T, (2, 1)), atol=1e-12)
        np.testing.assert_allclose(g["v"], A.sum(axis=0)[:, None], atol=1e-12)


class TestParamStore:
    def test_duplicate_name_rejected(self):
        P = ParamStore()
        P.add("w", np.zeros(2))
        with pytest.raises(ContractError):
            P.add("w", np.zeros(2))

    def test_non_finite_block_rejected(self):
        with pytest.raises(NumericFault):
            ParamStore().add("w", np.array([np.nan]))

    def test_assign_keeps_shape(self):
        P = _store(w=(2, 2))
        with pytest.raises(ContractError):
            P.assign("w", np.zeros(3))

    def test_copy_is_deep(self):
        P = _store(w=(2,))
        Q = P.copy()
        Q.assign("w", np.ones(2))
        assert not P.equals(Q)

    def test_leaves_share_storage(self):
        P = _store(w=(2,))
        assert np.shares_memory(P.leaves()["w"].data, P["w"])

    def test_roundtrip_bytes(self, tmp_path):
        P = _store(3, a=(2, 3), b=(4,), c=(1, 1, 2))
        assert from_bytes(to_bytes(P)).equals(P)
        save_params(P, tmp_path / "p.mrtl")
        assert load_params(tmp_path / "p.mrtl").equals(P)

    def test_corruption_detected(self):
        buf = bytearray(to_bytes(_store(a=(3,))))
        buf[-6] ^= 0xFF
        with pytest.raises(ParseError):
            from_bytes(bytes(buf))

    def test_bad_magic_and_truncation(self):
        buf = to_bytes(_store(a=(3,)))
        with pytest.raises(ParseError):
            from_bytes(b"XXXX" + buf[4:])
        with pytest.raises(ParseError):
            from_bytes(buf[:20])

    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
                  elements=st.floats(-1e6, 1e6, allow_nan=False)))
    def test_roundtrip_is_bit_exact(self, arr):
        P = ParamStore({"w": arr})
        assert from_bytes(to_bytes(P)).equals(P)


class TestOptimizer:
    def test_warmup_then_decay(self):
        assert inverse_sqrt_lr(1, 1.0, 4) == pytest.approx(0.25)
        assert inverse_sqrt_lr(4, 1.0, 4) == pytest.approx(1.0)
        assert inverse_sqrt_lr(16, 1.0, 4) == pytest.approx(0.5)
        assert inverse_sqrt_lr(7, 0.3, 0) == 0.3

    def test_first_adam_step_is_lr_times_sign(self):
        P = ParamStore({"w": np.array([1.0, -1.0, 0.5])})
        opt = Adam(P, lr=0.1, schedule="constant")
        _, g = value_and_grad(lambda L: ag.tsum(L["w"] * np.array([2.0, -3.0, 0.5])), P)
        opt.step(g)
        np.testing.assert_allclose(P["w"], [0.9, -0.9, 0.4], atol=1e-8)
        assert opt.lr_history == [0.1]

    def test_minimizes_quadratic(self):
        P = ParamStore({"w": np.array([3.0, -2.0])})
        opt = Adam(P, lr=0.05, schedule="constant")
        for _ in range(400):
            _, g = value_and_grad(lambda L: ag.tsum(L["w"] * L["w"]), P)
            opt.step(g)
        assert np.abs(P["w"]).max() < 1e-2


class TestRng:
    def test_same_seed_same_stream(self):
        np.testing.assert_array_equal(Rng(4).stream("a").random(5), Rng(4).stream("a").random(5))

    def test_streams_are_isolated(self):
        r = Rng(4)
        a = r.stream("a")
        first = r.stream("b").random(3)
        a.random(1000)
        np.testing.assert_array_equal(first, Rng(4).stream("b").random(3))

    def test_names_and_seeds_differ(self):
        assert not np.array_equal(Rng(4).stream("a").random(4), Rng(4).stream("b").random(4))
        assert not np.array_equal(Rng(4).stream("a").random(4), Rng(5).stream("a").random(4))

    def test_nested_streams(self):
        assert Rng(1).stream("x").stream("y").name == "root/x/y"

    def test_uniform_mean(self):
        x = Rng(0).random(200_000)
        assert abs(x.mean() - 0.5) < 4 * math.sqrt(1 / 12 / x.size)
