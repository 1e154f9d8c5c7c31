"""Encoder-decoder log-probabilities, decoding, sampling and checkpoints."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import zero_model
from oracles import complete_sequences, stepwise_logprob
from mrtlab.corpus import EOS, ParallelPair
from mrtlab.errors import ContractError, InputError
from mrtlab.model import (
    Checkpoint,
    ModelConfig,
    _Decoder,
    average_checkpoints,
    beam_search,
    beam_search_batch,
    greedy_decode,
    log_prob,
    new_checkpoint,
    nll,
    sample,
    sample_token,
    score_pairs,
)
from mrtlab.numerics import Adam, Rng, ag, value_and_grad


def _cfg(V, max_len=3, d=4):
    return ModelConfig(src_vocab=8, tgt_vocab=V, d_model=d, d_ff=6, heads=2, max_len=max_len, max_positions=8)


def _complete(V, max_len):
    return complete_sequences([t for t in range(V) if t != EOS], max_len)


class TestLogProb:
    def test_uniform_model(self, tiny_ckpt):
        zero_model(tiny_ckpt)
        h = log_prob(tiny_ckpt, (5, 6, EOS), (5, 7, 6, EOS))
        assert h.score == pytest.approx(4 * math.log(1 / 8), abs=1e-12)

    @given(st.lists(st.integers(2, 7), min_size=0, max_size=5))
    def test_probability_bound(self, body):
        ckpt = new_checkpoint(_cfg(8, 8), Rng(2))
        assert math.exp(log_prob(ckpt, (5, 6, EOS), tuple(body) + (EOS,)).score) <= 1.0

    def test_exhaustive_mass_is_one(self):
        V, L = 4, 3
        ckpt = new_checkpoint(_cfg(V, L), Rng(7))
        src = (5, 6, 4, EOS)
        done = sum(math.exp(log_prob(ckpt, src, y).score) for y in _complete(V, L))
        words = [t for t in range(V) if t != EOS]
        alive = sum(math.exp(stepwise_logprob(ckpt, src, p)) for p in itertools.product(words, repeat=L))
        assert done + alive == pytest.approx(1.0, abs=1e-6)

    def test_teacher_forcing_matches_stepwise(self):
        ckpt = new_checkpoint(_cfg(8, 6), Rng(3))
        src, tgt = (5, 7, EOS), (6, 6, 2, EOS)
        assert log_prob(ckpt, src, tgt).score == pytest.approx(stepwise_logprob(ckpt, src, tgt), abs=1e-10)

    def test_batching_does_not_change_scores(self):
        ckpt = new_checkpoint(_cfg(8, 6), Rng(3))
        srcs = [(5, EOS), (6, 7, 5, EOS), (5, EOS)]
        tgts = [(6, EOS), (7, 7, 7, 6, EOS), (5, 5, EOS)]
        batched = score_pairs(ckpt, srcs, tgts)
        for s, t, lp in zip(srcs, tgts, batched):
            assert lp.sum() == pytest.approx(log_prob(ckpt, s, t).score, abs=1e-10)

    def test_out_of_vocab_rejected(self, tiny_ckpt):
        with pytest.raises(InputError):
            log_prob(tiny_ckpt, (5, EOS), (9, EOS))
        with pytest.raises(InputError):
            log_prob(tiny_ckpt, (12, EOS), (5, EOS))

    def test_target_must_end_with_eos(self, tiny_ckpt):
        with pytest.raises(InputError):
            log_prob(tiny_ckpt, (5, EOS), (5, 6))


class TestNll:
    def test_uniform_is_log_v(self, tiny_ckpt):
        zero_model(tiny_ckpt)
        pairs = [ParallelPair((5, EOS), (6, 7, EOS)), ParallelPair((6, EOS), (5, EOS))]
        assert nll(tiny_ckpt.params.leaves(), tiny_ckpt.config, pairs).item() == pytest.approx(math.log(8))

    def test_confident_model_is_zero(self, tiny_ckpt):
        zero_model(tiny_ckpt)
        b = np.zeros(8)
        b[EOS] = 1e4
        tiny_ckpt.params.assign("out_b", b)
        pairs = [ParallelPair((5, EOS), (EOS,))]
        assert nll(tiny_ckpt.params.leaves(), tiny_ckpt.config, pairs).item() == pytest.approx(0.0, abs=1e-12)

    def test_empty_batch(self, tiny_ckpt):
        with pytest.raises(ContractError):
            nll(tiny_ckpt.params.leaves(), tiny_ckpt.config, [])

    def test_one_step_descends(self, small_corpus, small_ckpt):
        batch = small_corpus.train[:16]
        loss = lambda L: nll(L, small_ckpt.config, batch)
        before, g = value_and_grad(loss, small_ckpt.params)
        Adam(small_ckpt.params, lr=1e-3, schedule="constant").step(g)
        after, _ = value_and_grad(loss, small_ckpt.params)
        assert after < before


class TestBeam:
    def test_full_width_matches_enumeration(self):
        V, L = 3, 4
        ckpt = new_checkpoint(_cfg(V, L), Rng(4))
        src = (5, 6, EOS)
        cands = list(_complete(V, L))
        best = max(cands, key=lambda y: (log_prob(ckpt, src, y).score / len(y), tuple(-t for t in y)))
        cs = beam_search(ckpt, src, beam_size=2 ** (L - 1) * 2, max_len=L)
        assert cs.hyps[0].tokens == best
        assert cs.hyps[0].score == pytest.approx(log_prob(ckpt, src, best).score, abs=1e-10)

    def test_beam_one_is_greedy(self):
        ckpt = new_checkpoint(_cfg(8, 6), Rng(5))
        src = (5, 6, 7, EOS)
        dec = _Decoder(ckpt, [src])
        toks = ()
        for t in range(6):
            lp = dec.next_logprobs(np.zeros(1, dtype=np.int64), np.asarray([toks], dtype=np.int64).reshape(1, t))[0]
            tok = EOS if t == 5 else int(np.argmax(lp))
            toks += (tok,)
            if tok == EOS:
                break
        assert beam_search(ckpt, src, 1).hyps[0].tokens == toks
        assert greedy_decode(ckpt, [src]) == [toks]

    @pytest.mark.parametrize("seed", range(6))
    def test_wider_beam_never_worse(self, seed):
        ckpt = new_checkpoint(_cfg(8, 5, d=8), Rng(seed))
        src = (5, 6, 7, EOS)
        best = [beam_search(ckpt, src, k).hyps[0].normalized() for k in range(1, 13)]
        assert all(b >= a - 1e-12 for a, b in zip(best, best[1:]))

    def test_truncation_flagged(self, tiny_ckpt):
        zero_model(tiny_ckpt)
        b = np.zeros(8)
        b[EOS] = -50.0
        tiny_ckpt.params.assign("out_b", b)
        cs = beam_search(tiny_ckpt, (5, EOS), 2, max_len=3)
        assert cs.truncated and all(h.truncated and len(h.tokens) == 3 for h in cs.hyps)

    def test_batch_equals_single(self):
        ckpt = new_checkpoint(_cfg(8, 6), Rng(6))
        srcs = [(5, EOS), (6, 7, 5, 4, EOS)]
        batched = beam_search_batch(ckpt, srcs, 3)
        for s, cs in zip(srcs, batched):
            assert [h.tokens for h in cs.hyps] == [h.tokens for h in beam_search(ckpt, s, 3).hyps]

    def test_bad_beam(self, tiny_ckpt):
        with pytest.raises(ContractError):
            beam_search(tiny_ckpt, (5, EOS), 0)


class TestSampling:
    def test_step_distribution_matches_softmax(self):
        logits = np.array([0.5, -1.0, 1.2])
        rng = Rng(0).stream("sampling")
        counts = np.bincount([sample_token(logits, 1.0, rng) for _ in range(10_000)], minlength=3)
        p = np.exp(ag.np_log_softmax(logits))
        assert 0.5 * np.abs(counts / counts.sum() - p).sum() <= 0.02

    def test_cold_limit_is_argmax(self):
        assert sample_token(np.array([0.1, 3.0, 2.9]), 1e-7, Rng(0)) == 1

    def test_cold_sample_is_greedy(self):
        ckpt = new_checkpoint(_cfg(8, 6), Rng(8))
        src = (5, 6, EOS)
        assert sample(ckpt, src, 1e-7, Rng(1)).tokens == greedy_decode(ckpt, [src])[0]

    def test_same_seed_same_sample(self):
        ckpt = new_checkpoint(_cfg(8, 6), Rng(8))
        a = sample(ckpt, (5, 6, EOS), 1.0, Rng(3).stream("sampling"))
        b = sample(ckpt, (5, 6, EOS), 1.0, Rng(3).stream("sampling"))
        assert a == b

    def test_recorded_logprobs_exact(self):
        ckpt = new_checkpoint(_cfg(8, 6), Rng(8))
        h = sample(ckpt, (5, 6, EOS), 1.0, Rng(4))
        if not h.truncated:
            assert h.score == pytest.approx(log_prob(ckpt, (5, 6, EOS), h.tokens).score, abs=1e-10)

    def test_temperature_positive(self):
        with pytest.raises(ContractError):
            sample_token(np.zeros(3), 0.0, Rng(0))


class TestCheckpoints:
    def test_average_of_copies(self, tiny_ckpt):
        avg = average_checkpoints([tiny_ckpt, tiny_ckpt.copy(), tiny_ckpt.copy()])
        for k in avg.params:
            np.testing.assert_allclose(avg.params[k], tiny_ckpt.params[k], rtol=0, atol=1e-15)

    def test_average_of_opposites(self, tiny_ckpt):
        neg = tiny_ckpt.copy()
        for k in neg.params:
            neg.params.assign(k, -neg.params[k])
        avg = average_checkpoints([tiny_ckpt, neg])
        assert not np.any(avg.params.flat())

    def test_midpoint(self, tiny_cfg):
        a, b = new_checkpoint(tiny_cfg, Rng(1)), new_checkpoint(tiny_cfg, Rng(2))
        np.testing.assert_allclose(average_checkpoints([a, b]).params.flat(),
                                   (a.params.flat() + b.params.flat()) / 2)

    def test_config_mismatch(self, tiny_cfg):
        other = ModelConfig(**{**tiny_cfg.__dict__, "d_ff": 8})
        with pytest.raises(ContractError):
            average_checkpoints([new_checkpoint(tiny_cfg, Rng(1)), new_checkpoint(other, Rng(1))])

    def test_save_load(self, tiny_ckpt, tmp_path):
        tiny_ckpt.step = 17
        tiny_ckpt.save(tmp_path / "ck")
        back = Checkpoint.load(tmp_path / "ck")
        assert back.config == tiny_ckpt.config and back.step == 17
        assert back.params.equals(tiny_ckpt.params)

    def test_init_is_seeded(self, tiny_cfg):
        assert new_checkpoint(tiny_cfg, Rng(1)).params.equals(new_checkpoint(tiny_cfg, Rng(1)).params)
        assert not new_checkpoint(tiny_cfg, Rng(1)).params.equals(new_checkpoint(tiny_cfg, Rng(2)).params)
