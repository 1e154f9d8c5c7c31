"""Risk, its gradient, MLE and MRT training loops."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import complete_sequences, exact_expected_loss
from mrtlab.corpus import EOS
from mrtlab.errors import ContractError, MetricError, ValidationError
from mrtlab.metrics import Metric, MetricId, MetricSuite, SentBleu
from mrtlab.model import CandidateSet, ModelConfig, log_prob, new_checkpoint, nll, sequence_logprobs
from mrtlab.mrt import (
    CurvePoint,
    MleConfig,
    MrtAborted,
    MrtConfig,
    RiskBatch,
    TrainCurve,
    combined_loss,
    delta_of,
    make_risk_batch,
    renormalize,
    risk,
    risk_backward,
    risk_tensor,
    score_function_weights,
    token_accuracy,
    train_mle,
    train_mrt,
)
from mrtlab.numerics import Rng, grad_check, value_and_grad

lps = arrays(np.float64, st.integers(1, 8), elements=st.floats(-30, 0))


def _ckpt(V=8, max_len=4, seed=0):
    return new_checkpoint(ModelConfig(src_vocab=8, tgt_vocab=V, d_model=4, d_ff=6, heads=2,
                                      max_len=max_len, max_positions=8), Rng(seed))


def _batch(ckpt, src, space, deltas, alpha=1.0, length_norm=False):
    hyps = [log_prob(ckpt, src, y) for y in space]
    return RiskBatch([CandidateSet(src, hyps)], [space[0]], [np.asarray(deltas)], alpha, length_norm)


class TestPieces:
    def test_delta(self):
        assert delta_of(1.0) == 0.0
        assert delta_of(0.0) == 1.0
        assert delta_of(0.4) == pytest.approx(0.6)

    def test_renormalize_examples(self):
        assert renormalize([-3.2]).tolist() == [1.0]
        np.testing.assert_allclose(renormalize([-2.0, -2.0, -2.0], alpha=0.3), [1 / 3] * 3)
        np.testing.assert_allclose(renormalize([-1.0, -2.0]), [0.7311, 0.2689], atol=5e-5)
        e = math.exp(1.0)
        np.testing.assert_allclose(renormalize([-1.0, -2.0]), [e / (e + 1), 1 / (e + 1)], atol=1e-15)

    @given(lps, st.floats(0.05, 5))
    def test_renormalize_is_distribution(self, lp, alpha):
        q = renormalize(lp, alpha)
        assert q.sum() == pytest.approx(1.0)
        assert np.all(q >= 0)
        assert np.all(np.diff(q[np.argsort(lp)]) >= -1e-12)

    def test_renormalize_contract(self):
        with pytest.raises(ContractError):
            renormalize([])
        with pytest.raises(ContractError):
            renormalize([0.0], alpha=0.0)

    def test_risk_examples(self):
        assert risk([0.6, 0.4], [0.0, 1.0]) == pytest.approx(0.4)
        assert risk([0.2, 0.3, 0.5], [0.7] * 3) == pytest.approx(0.7)

    @given(lps, st.floats(0, 1))
    def test_weights_vanish_for_equal_delta(self, lp, c):
        np.testing.assert_allclose(score_function_weights(renormalize(lp), np.full(lp.size, c)), 0.0, atol=1e-12)

    def test_weight_sign(self):
        w = score_function_weights(renormalize([-1.0, -1.5]), [0.0, 1.0])
        assert w[0] < 0 < w[1]
        assert w.sum() == pytest.approx(0.0)

    def test_combined_loss(self):
        assert combined_loss(0.5, 2.0, 1.0) == 0.5
        assert combined_loss(0.5, 2.0, 0.0) == 2.0
        assert combined_loss(0.5, 2.0, 0.6) == pytest.approx(1.1)
        with pytest.raises(ContractError):
            combined_loss(0.5, 2.0, 1.2)


class TestRiskTensor:
    def test_full_space_is_exact_expectation(self):
        ckpt = _ckpt(max_len=3)
        src = (5, 6, EOS)
        space = list(complete_sequences((5, 6, 7), 3))
        deltas = np.random.default_rng(0).random(len(space))
        batch = _batch(ckpt, src, space, deltas)
        with_grad = risk_tensor(ckpt.params.leaves(), ckpt.config, batch).item()
        assert with_grad == pytest.approx(exact_expected_loss(ckpt, src, space, deltas), abs=1e-9)
        assert batch.risks()[0] == pytest.approx(with_grad, abs=1e-12)

    def test_gradient_is_score_function_form(self):
        ckpt = _ckpt()
        src = (5, 7, EOS)
        space = [(5, EOS), (6, 6, EOS), (7, 5, 6, EOS)]
        deltas = np.array([0.1, 0.9, 0.4])
        batch = _batch(ckpt, src, space, deltas, alpha=0.7)
        g = risk_backward(batch, ckpt)
        q = batch.q()[0]
        w = score_function_weights(q, deltas, alpha=0.7)
        _, gw = value_and_grad(
            lambda P: (sequence_logprobs(P, ckpt.config, [src] * 3, space) * w).sum(), ckpt.params)
        np.testing.assert_allclose(g.flat(), gw.flat(), atol=1e-12)

    @pytest.mark.parametrize("alpha,length_norm", [(1.0, False), (0.5, True)])
    def test_grad_check(self, alpha, length_norm):
        ckpt = _ckpt()
        src = (5, 7, EOS)
        space = [(5, EOS), (6, 6, EOS), (7, 5, 6, EOS)]
        batch = _batch(ckpt, src, space, [0.0, 1.0, 0.3], alpha, length_norm)
        rep = grad_check(lambda P: risk_tensor(P, ckpt.config, batch), ckpt.params, rel_tol=1e-3)
        assert rep.passed, str(rep)

    def test_equal_delta_zero_gradient(self):
        ckpt = _ckpt()
        batch = _batch(ckpt, (5, EOS), [(5, EOS), (6, EOS), (7, 7, EOS)], [0.3, 0.3, 0.3])
        assert np.abs(risk_backward(batch, ckpt).flat()).max() < 1e-12

    def test_mean_reduction(self):
        ckpt = _ckpt()
        b1 = _batch(ckpt, (5, EOS), [(5, EOS), (6, EOS)], [0.0, 1.0])
        b2 = _batch(ckpt, (6, EOS), [(5, EOS), (7, EOS)], [0.5, 0.2])
        both = RiskBatch(b1.sets + b2.sets, b1.refs + b2.refs, b1.deltas + b2.deltas)
        P = ckpt.params.leaves()
        s = risk_tensor(P, ckpt.config, both, "sum").item()
        assert risk_tensor(P, ckpt.config, both, "mean").item() == pytest.approx(s / 2)
        assert s == pytest.approx(b1.risks()[0] + b2.risks()[0])

    def test_lambda_zero_is_mle_gradient(self, small_corpus, small_ckpt):
        pairs = small_corpus.train[:4]
        batch = make_risk_batch(small_ckpt, SentBleu(), [p.src for p in pairs], [p.tgt for p in pairs], beam=2)
        cfg = small_ckpt.config
        _, g0 = value_and_grad(lambda P: combined_loss(risk_tensor(P, cfg, batch), nll(P, cfg, pairs), 0.0),
                               small_ckpt.params)
        _, gn = value_and_grad(lambda P: nll(P, cfg, pairs), small_ckpt.params)
        np.testing.assert_allclose(g0.flat(), gn.flat(), atol=1e-14)

    def test_delta_length_mismatch(self):
        ckpt = _ckpt()
        with pytest.raises(ContractError):
            _batch(ckpt, (5, EOS), [(5, EOS), (6, EOS)], [0.1])


class Flaky(Metric):
    """Scores fine for ``ok`` calls, then fails."""

    def __init__(self, ok):
        self.name, self.ok, self.calls = "flaky", ok, 0
        self.metric_id = MetricId("learned", "flaky")

    def raw_batch(self, hyps, refs, srcs=None):
        self.calls += 1
        if self.calls > self.ok:
            raise MetricError("metric backend went away")
        return np.full(len(hyps), 0.5)


class TestTraining:
    def test_zero_epochs_returns_init(self, small_corpus, small_ckpt):
        best, curve = train_mle(small_ckpt, small_corpus, MleConfig(epochs=0, valid_size=10), Rng(0))
        assert best.params.equals(small_ckpt.params)
        assert len(curve.points) == 1

    def test_warmup_only_changes_schedule(self, small_corpus, small_ckpt):
        runs = []
        for warmup in (3, 6):
            cfg = MleConfig(epochs=1, batch_size=100, warmup=warmup, valid_size=10, avg_last_k=0)
            runs.append(train_mle(small_ckpt, small_corpus, cfg, Rng(0))[1].lr_history)
        assert len(runs[0]) == len(runs[1]) == 4
        from mrtlab.numerics import inverse_sqrt_lr
        for w, hist in zip((3, 6), runs):
            assert hist == [inverse_sqrt_lr(s, 3e-3, w) for s in range(1, 5)]

    def test_mle_learns(self, small_corpus, small_ckpt):
        cfg = MleConfig(epochs=2, batch_size=32, lr=1e-2, warmup=10, valid_size=20)
        _, curve = train_mle(small_ckpt, small_corpus, cfg, Rng(0))
        assert curve.points[-1].nll < math.log(small_ckpt.config.tgt_vocab)

    def test_token_accuracy(self):
        assert token_accuracy([(5, 6, EOS)], [(5, 7, EOS)]) == pytest.approx(2 / 3)
        assert token_accuracy([(5, EOS)], [(5, 6, 7, EOS)]) == pytest.approx(1 / 4)

    def _mrt_cfg(self, **kw):
        return MrtConfig(**{"beam": 2, "token_budget": 60, "max_steps": 3, "eval_interval": 1,
                            "eval_size": 8, "eval_beam": 1, **kw})

    def test_mrt_loop(self, small_corpus, small_ckpt):
        suite = MetricSuite([SentBleu()])
        res = train_mrt(small_ckpt, small_corpus, suite, self._mrt_cfg(), Rng(0))
        assert [p.step for p in res.curve.points] == [0, 1, 2, 3]
        series = res.curve.series("sent_bleu")
        assert res.selected_step == int(np.argmax(series))
        assert res.checkpoint.selection_score == pytest.approx(series.max())
        assert len(res.curve.lr_history) == 3
        assert res.eval_at(2).step == 2

    def test_mrt_zero_steps(self, small_corpus, small_ckpt):
        res = train_mrt(small_ckpt, small_corpus, MetricSuite([SentBleu()]), self._mrt_cfg(max_steps=0), Rng(0))
        assert res.checkpoint.params.equals(small_ckpt.params)

    def test_mrt_metric_failure_keeps_curve(self, small_corpus, small_ckpt):
        suite = MetricSuite([SentBleu(), Flaky(ok=3)])
        with pytest.raises(MrtAborted) as exc:
            train_mrt(small_ckpt, small_corpus, suite, self._mrt_cfg(metric="flaky"), Rng(0))
        assert len(exc.value.curve.points) >= 1

    @pytest.mark.parametrize("field,value", [("lam", 1.5), ("beam", 1), ("alpha", 0.0), ("reduction", "max")])
    def test_config_validation(self, field, value):
        with pytest.raises(ValidationError):
            MrtConfig(**{field: value}).validate()

    def test_curve_roundtrip(self):
        c = TrainCurve(lr_history=[0.1])
        c.append(CurvePoint(0, {"a": 0.5, "b": 0.25}, None, 2.0))
        c.append(CurvePoint(10, {"a": 0.75, "b": math.nan}, 0.3, 1.5))
        back = TrainCurve.from_csv(c.to_csv())
        assert back.series("a").tolist() == [0.5, 0.75]
        assert back.points[1].risk == 0.3 and back.points[0].risk is None
        again = TrainCurve.from_json(c.to_json())
        assert again.points[1].scores["b"] is None and again.lr_history == [0.1]
        with pytest.raises(ContractError):
            c.append(CurvePoint(5, {}))
