"""Universal-translation search, suffix attack and diagnostics."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import entropy_bits, pearson_closed_form
from mrtlab.corpus import EOS, PERIOD, CorpusSpec, ParallelPair, generate_corpus, random_fluent
from mrtlab.errors import ContractError, InputError, ValidationError
from mrtlab.metrics import GenScore, Metric, MetricId, SentBleu
from mrtlab.mrt import CurvePoint, TrainCurve
from mrtlab.numerics import Rng
from mrtlab.probe import (
    Pool,
    ProbeConfig,
    SuffixConfig,
    change_range,
    diagnostics,
    frequency_entropy,
    neighbours,
    pairwise_correlation,
    pearson,
    pearson_pvalue,
    relative_change,
    search_universal,
    smoothed,
    suffix_attack,
    suffix_deltas,
    top_frequency_report,
)

sentences = st.lists(st.lists(st.integers(5, 9), min_size=1, max_size=3).map(tuple), min_size=1, max_size=30)


@pytest.fixture(scope="module")
def meta():
    return generate_corpus(CorpusSpec(n_train=0, n_valid=0, n_test=0), Rng(0)).meta


class Const(Metric):
    def __init__(self):
        self.name = "const"
        self.metric_id = MetricId("learned", "const")

    def raw_batch(self, hyps, refs, srcs=None):
        return np.full(len(hyps), 0.25)


class Length(Metric):
    """Rewards length 3 exactly, whatever the reference."""

    def __init__(self):
        self.name = "len3"
        self.metric_id = MetricId("learned", "len3")

    def raw_batch(self, hyps, refs, srcs=None):
        return np.array([1.0 if len(h) == 4 else 0.0 for h in hyps])


def _curve(rows, names=("m", "o")):
    c = TrainCurve()
    for step, vals in rows:
        c.append(CurvePoint(step, dict(zip(names, vals))))
    return c


class TestUniversal:
    def test_identical_pool_fixed_point(self, meta):
        ref = (5, 9, 12, 7, PERIOD)
        pool = Pool([ref + (EOS,)] * 10)
        cfg = ProbeConfig(metric="sent_bleu", pool_size=10, start="pool", restarts=1, baseline_samples=0)
        c = search_universal(SentBleu(), pool, meta, cfg)
        assert c.tokens == ref
        assert c.mean_score == pytest.approx(1.0)
        assert c.sweeps == 1 and c.history == [pytest.approx(1.0)]

    def test_constant_metric_stops_after_one_sweep(self, meta):
        pool = Pool([(5, 6, EOS)] * 10)
        cfg = ProbeConfig(pool_size=10, restarts=1, baseline_samples=5)
        c = search_universal(Const(), pool, meta, cfg, Rng(2))
        start = search_universal(Const(), pool, meta, ProbeConfig(pool_size=10, restarts=1, budget=0,
                                                                   baseline_samples=5), Rng(2))
        assert c.sweeps == 1 and c.tokens == start.tokens
        assert c.baseline_percentile == 0.0

    def test_budget_zero_returns_start(self, meta):
        pool = Pool([(5, 6, EOS)] * 10)
        c = search_universal(Length(), pool, meta, ProbeConfig(pool_size=10, budget=0, baseline_samples=0), Rng(1))
        assert c.sweeps == 0 and len(c.history) == 1

    @pytest.mark.parametrize("strategy", ["best", "first"])
    def test_climbs_to_optimum(self, meta, strategy):
        pool = Pool([(5, 6, EOS)] * 10)
        cfg = ProbeConfig(pool_size=10, max_len=6, restarts=1, strategy=strategy, baseline_samples=50)
        c = search_universal(Length(), pool, meta, cfg, Rng(1))
        assert len(c.tokens) == 3 and c.mean_score == 1.0
        assert c.baseline_percentile == 100.0
        assert all(b > a for a, b in zip(c.history, c.history[1:]))

    def test_ties_prefer_short_then_lexicographic(self, meta):
        # every hypothesis scores the same, so the tie-break alone decides among restarts
        pool = Pool([(5, 6, EOS)] * 10)
        cfg = ProbeConfig(pool_size=10, restarts=3, budget=0, baseline_samples=0)
        c = search_universal(Const(), pool, meta, cfg, Rng(5))
        starts = [s[:-1] for s in random_fluent(meta, 3, Rng(5).stream("start"))]
        assert c.tokens == min(starts, key=lambda t: (len(t), t))

    def test_deterministic(self, meta):
        pool = Pool([(5, 6, 7, EOS), (8, 9, EOS)] * 5)
        cfg = ProbeConfig(pool_size=10, budget=2, baseline_samples=20)
        a = search_universal(SentBleu(), pool, meta, cfg, Rng(3))
        b = search_universal(SentBleu(), pool, meta, cfg, Rng(3))
        assert a.to_json() == b.to_json()

    @pytest.mark.parametrize("field,value", [("pool_size", 5), ("budget", -1), ("strategy", "worst"),
                                             ("ops", ("swap",)), ("restarts", 0), ("start", "x")])
    def test_config_validation(self, field, value):
        with pytest.raises(ValidationError):
            ProbeConfig(**{field: value}).validate()

    def test_small_pool_rejected(self, meta):
        with pytest.raises(ValidationError):
            search_universal(SentBleu(), Pool([(5, EOS)] * 3), meta)

    def test_neighbours(self):
        n = neighbours((5, 6), (5, 6, 7), ("substitute", "insert", "delete"), 3)
        assert len(n) == len(set(n))
        assert (5, 6) not in n
        assert (6,) in n and (5,) in n and (7, 6) in n and (5, 6, 7) in n
        assert all(len(c) <= 3 for c in n)
        assert neighbours((5,), (5, 6), ("delete",), 3) == []


class TestSuffix:
    def _lm(self):
        from mrtlab.model import ModelConfig, new_checkpoint
        return new_checkpoint(ModelConfig(src_vocab=32, tgt_vocab=32, d_model=8, d_ff=8, heads=2), Rng(0))

    def test_empty_suffix_is_zero(self):
        pairs = [ParallelPair((5, EOS), (6, 7, EOS)), ParallelPair((5, EOS), (8, EOS))]
        assert suffix_deltas(GenScore(self._lm(), "recall"), pairs, ()).tolist() == [0.0, 0.0]

    def test_empty_pairs(self, meta):
        with pytest.raises(InputError):
            suffix_deltas(SentBleu(), [], (5,))
        with pytest.raises(InputError):
            suffix_attack(GenScore(self._lm(), "recall"), [], meta)

    def test_requires_recall_direction(self, meta):
        pairs = [ParallelPair((5, EOS), (6, 7, EOS))]
        with pytest.raises(ContractError):
            suffix_attack(GenScore(self._lm(), "precision"), pairs, meta)

    def test_search_on_random_lm(self, meta):
        pairs = [ParallelPair((5, EOS), (6, 7, 8, EOS)), ParallelPair((5, EOS), (9, 10, EOS))]
        r = suffix_attack(GenScore(self._lm(), "recall"), pairs, meta, SuffixConfig(budget=1, restarts=1))
        assert 1 <= len(r.suffix) <= 3
        assert r.mean_delta == pytest.approx(np.mean(r.deltas))
        np.testing.assert_allclose(r.deltas, suffix_deltas(GenScore(self._lm(), "recall"), pairs, r.suffix))

    def test_precision_penalizes_junk_on_trained_lm(self, lab):
        pairs = [p for p in lab.corpus.valid if p.origin == "clean"][:100]
        junk = (lab.corpus.meta.templates[0][0],) * 3
        pre = GenScore(lab.lm, "precision")
        assert suffix_deltas(pre, pairs, junk).mean() < 0


class TestEntropy:
    def test_examples(self):
        assert frequency_entropy([(5, 6)] * 7) == 0.0
        assert frequency_entropy([(5,), (6,), (7,), (8,)]) == pytest.approx(2.0)
        assert frequency_entropy([("a",), ("a",), ("b",), ("c",)]) == pytest.approx(1.5, abs=0)

    def test_specials_ignored(self):
        assert frequency_entropy([(5, EOS), (5,), (0, 5)]) == 0.0
        assert frequency_entropy([["x", "<eos>"], ["x"]]) == 0.0

    def test_empty(self):
        with pytest.raises(ContractError):
            frequency_entropy([])

    @given(sentences)
    def test_matches_oracle(self, s):
        ent = frequency_entropy(s)
        assert ent == pytest.approx(entropy_bits(s), abs=1e-12)
        assert 0.0 <= ent <= math.log2(len(s)) + 1e-12


class TestTopFrequency:
    def test_unique_sorted_lexicographically(self):
        assert top_frequency_report([(7,), (5, 6), (5,)], 2) == [((5,), 1), ((5, 6), 1)]

    def test_dominant_first(self):
        s = [(9, 9)] * 689 + [(5,)] * 3 + [(6,)]
        assert top_frequency_report(s, 1) == [((9, 9), 689)]

    def test_k_larger_than_distinct(self):
        assert len(top_frequency_report([(5,), (6,), (5,)], 10)) == 2

    def test_bad_k(self):
        with pytest.raises(ContractError):
            top_frequency_report([(5,)], 0)


class TestChangeRange:
    def test_flat(self):
        cr = change_range(_curve([(0, (0.3, 0.5)), (10, (0.3, 0.5)), (20, (0.3, 0.5))]), "m")
        assert list(cr.changes.values()) == [0.0, 0.0]

    def test_arithmetic(self):
        assert relative_change(0.55, 0.50) == (pytest.approx(10.0), False)
        assert relative_change(-0.10, 0.20) == (pytest.approx(-150.0), False)
        assert relative_change(0.3, 0.0) == (pytest.approx(0.3), True)

    def test_peak_and_changes(self):
        c = _curve([(0, (0.50, 0.20)), (10, (0.55, -0.10)), (20, (0.52, 0.0))])
        cr = change_range(c, "m", smooth=False)
        assert cr.peak_step == 10
        assert cr.changes["m"] == pytest.approx(10.0)
        assert cr.changes["o"] == pytest.approx(-150.0)

    def test_zero_baseline_flagged(self):
        cr = change_range(_curve([(0, (0.1, 0.0)), (10, (0.2, 0.4))]), "m", smooth=False)
        assert cr.absolute["o"] and cr.changes["o"] == pytest.approx(0.4)

    def test_smoothing_ignores_spike(self):
        rows = [(0, (0.5, 1)), (10, (0.9, 1)), (20, (0.5, 1)), (30, (0.8, 1)), (40, (0.85, 1)), (50, (0.8, 1)),
                (60, (0.5, 1))]
        assert change_range(_curve(rows), "m", smooth=False).peak_step == 10
        assert change_range(_curve(rows), "m").peak_step == 40

    def test_earliest_tie(self):
        rows = [(0, (0.5, 1)), (10, (0.6, 1)), (20, (0.6, 1))]
        assert change_range(_curve(rows), "m", smooth=False).peak_step == 10

    def test_smoothed(self):
        np.testing.assert_allclose(smoothed([0, 3, 6, 9]), [1.5, 3, 6, 7.5])

    def test_errors(self):
        with pytest.raises(ContractError):
            change_range(TrainCurve(), "m")
        with pytest.raises(ContractError):
            change_range(_curve([(0, (1, 1))]), "zzz")


class TestCorrelation:
    def test_closed_form(self):
        x, y = [1, 2, 3], [2, 4, 7]
        assert pearson(x, y) == pytest.approx(15 / math.sqrt(228), abs=1e-15)
        assert pearson(x, y) == pytest.approx(pearson_closed_form(x, y), abs=1e-15)

    def test_self_and_negation(self):
        x = np.random.default_rng(0).normal(size=20)
        r = pairwise_correlation(np.column_stack([x, -x]), ["a", "b"])
        assert r.get("a", "a") == 1.0 and r.get("a", "b") == pytest.approx(-1.0)

    def test_constant_column_missing(self):
        X = np.column_stack([[1.0, 2.0, 3.0, 4.0], [2.0] * 4])
        r = pairwise_correlation(X, ["a", "c"])
        assert math.isnan(r.get("a", "c")) and math.isnan(r.get("c", "c"))
        assert r.to_json()["r"][0][1] is None

    def test_too_few_rows(self):
        with pytest.raises(ContractError):
            pairwise_correlation(np.ones((2, 2)))

    def test_pvalue_against_scipy(self):
        from scipy import stats
        rng = np.random.default_rng(4)
        x, y = rng.normal(size=30), rng.normal(size=30)
        res = stats.pearsonr(x, y)
        assert pearson(x, y) == pytest.approx(res[0], abs=1e-12)
        assert pearson_pvalue(pearson(x, y), 30) == pytest.approx(res[1], rel=1e-9)

    @given(st.lists(st.floats(-100, 100), min_size=3, max_size=20), st.floats(0.1, 10), st.floats(-5, 5))
    def test_affine_invariance(self, xs, a, b):
        x = np.asarray(xs)
        y = np.sin(x) + 0.1 * x
        r = pearson(x, y)
        if math.isfinite(r) and np.ptp(a * y + b) > 1e-9 * max(1.0, np.abs(y).max()):
            assert pearson(x, a * y + b) == pytest.approx(r, abs=1e-6)
            assert -1.0 <= r <= 1.0


class TestDiagnostics:
    def test_report(self):
        curve = _curve([(0, (0.5, 0.2)), (10, (0.6, 0.1)), (20, (0.7, 0.1)), (30, (0.4, 0.1))])
        rep = diagnostics([(5,), (5,)], [(5,), (6,)], curve, "m", np.arange(12.0).reshape(4, 3) ** 2, k=1)
        assert rep.entropy_ratio == 0.0
        assert rep.top == [((5,), 2)]
        assert rep.change.peak_step == 10
        assert rep.to_json()["correlation"]["n"] == 4
