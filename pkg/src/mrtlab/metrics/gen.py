"""Generation-paradigm metric: mean per-token log-probability under a seq2seq LM.

The shipped scoring LM is a "lead-sentence summarizer" over target text:
it reads a short document (a target sentence followed by more corpus
text) and emits the first sentence. Conditioning text past the first
period is therefore ignored, which is what makes the recall direction
blind to appended material.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..corpus import EOS, CorpusSplits, ParallelPair
from ..errors import InputError, MetricError, NumericFault
from ..model import Checkpoint, ModelConfig, new_checkpoint, nll, score_pairs
from ..numerics import Adam, Rng, value_and_grad
from .base import Metric, MetricId, strip

log = logging.getLogger(__name__)

DIRECTIONS = ("precision", "recall", "f1", "faithfulness")


def _with_eos(seq) -> tuple:
    return strip(seq) + (EOS,)


def mean_logprob(ckpt: Checkpoint, conds, outs) -> np.ndarray:
    """Mean per-token ``log P(out | cond)`` (EOS included) for each pair."""
    conds = [_with_eos(c) for c in conds]
    outs = [_with_eos(o) for o in outs]
    lps = score_pairs(ckpt, conds, outs)
    return np.array([float(np.mean(lp)) for lp in lps])


class GenScore(Metric):
    """``direction`` picks which text conditions which.

    precision: log P(hyp | ref); recall: log P(ref | hyp);
    f1: their arithmetic mean; faithfulness: log P(hyp | src) under ``mt``.
    """

    def __init__(self, lm: Checkpoint | None, direction: str = "f1", name: str | None = None,
                 mt: Checkpoint | None = None, tgt_vocab: int | None = None):
        if direction not in DIRECTIONS:
            raise MetricError(f"unknown gen_score direction {direction!r}")
        if direction == "faithfulness":
            if mt is None:
                raise MetricError("faithfulness direction needs a translation model")
        elif lm is None:
            raise MetricError(f"{direction} direction needs a scoring LM")
        elif lm.config.src_vocab != lm.config.tgt_vocab:
            raise MetricError("scoring LM must read and write the target vocabulary")
        if tgt_vocab is not None:
            for ck in (lm, mt):
                if ck is not None and ck.config.tgt_vocab != tgt_vocab:
                    raise MetricError(
                        f"LM vocabulary size {ck.config.tgt_vocab} does not match corpus {tgt_vocab}")
        self.lm, self.mt, self.direction = lm, mt, direction
        self.name = name or f"gen_{direction}"
        self.metric_id = MetricId("gen_score", direction)
        self.input_form = "src" if direction == "faithfulness" else "ref"

    def raw_batch(self, hyps, refs, srcs=None) -> np.ndarray:
        self._check(hyps, refs, srcs)
        if not len(hyps):
            return np.zeros(0)
        if self.direction == "precision":
            return mean_logprob(self.lm, refs, hyps)
        if self.direction == "recall":
            return mean_logprob(self.lm, hyps, refs)
        if self.direction == "f1":
            return 0.5 * (mean_logprob(self.lm, refs, hyps) + mean_logprob(self.lm, hyps, refs))
        return mean_logprob(self.mt, srcs, hyps)


# ---------------------------------------------------------------------------
# training the scoring LM
# ---------------------------------------------------------------------------


@dataclass
class LmSpec:
    epochs: int = 4
    batch_size: int = 64
    lr: float = 3e-3
    warmup: int = 200
    lead_only_fraction: float = 0.3
    max_doc_len: int = 24
    d_model: int = 32
    d_ff: int = 64
    heads: int = 2


def lead_documents(corpus: CorpusSplits, spec: LmSpec, rng: Rng) -> list:
    """(document, lead sentence) pairs built from clean training targets."""
    clean = [p.tgt for p in corpus.train if p.origin == "clean"]
    if len(clean) < 2:
        raise InputError("need at least two clean training targets")
    out = []
    for i, lead in enumerate(clean):
        doc = strip(lead)
        if rng.random() >= spec.lead_only_fraction:
            j = int(rng.integers(len(clean) - 1))
            doc = doc + strip(clean[j + (j >= i)])
        out.append(ParallelPair(doc[: spec.max_doc_len] + (EOS,), tuple(lead)))
    return out


def train_gen_lm(corpus: CorpusSplits, spec: LmSpec, rng: Rng) -> Checkpoint:
    V = len(corpus.meta.tgt_vocab)
    cfg = ModelConfig(src_vocab=V, tgt_vocab=V, d_model=spec.d_model, d_ff=spec.d_ff, heads=spec.heads,
                      max_len=corpus.meta.spec.max_len + 2, max_positions=max(32, spec.max_doc_len + 2))
    cfg.validate()
    docs = lead_documents(corpus, spec, rng.stream("docs"))
    ckpt = new_checkpoint(cfg, rng)
    opt = Adam(ckpt.params, lr=spec.lr, warmup=spec.warmup)
    order = rng.stream("order")
    step = 0
    for epoch in range(spec.epochs):
        idx = order.permutation(len(docs))
        losses = []
        for i in range(0, len(idx), spec.batch_size):
            batch = [docs[j] for j in idx[i : i + spec.batch_size]]
            loss, grads = value_and_grad(lambda P: nll(P, cfg, batch), ckpt.params)
            if not np.isfinite(loss):
                raise NumericFault(f"scoring LM diverged at step {step}")
            opt.step(grads)
            losses.append(loss)
            step += 1
        log.info("gen LM epoch %d mean nll %.4f", epoch, float(np.mean(losses)))
    ckpt.step = step
    ckpt.extra = {"kind": "gen_lm", "lm_spec": spec.__dict__.copy()}
    return ckpt
