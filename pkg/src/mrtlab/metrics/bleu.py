"""Smoothed sentence-level BLEU on token ids."""

from __future__ import annotations

import math
from collections import Counter

import numpy as np

from .base import Metric, MetricId, strip

SMOOTHING = ("add-one", "add-one-all", "none")


def ngrams(seq, n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def sent_bleu(hyp, ref, max_n: int = 4, smoothing: str = "add-one") -> float:
    """BLEU in [0, 100] for one hypothesis against one reference.

    ``add-one`` adds one to matches and totals for orders n >= 2 (unigram
    precision stays unsmoothed); ``add-one-all`` smooths every order.
    Special tokens are stripped first; an empty hypothesis scores 0.
    """
    if smoothing not in SMOOTHING:
        raise ValueError(f"unknown smoothing {smoothing!r}")
    hyp, ref = strip(hyp), strip(ref)
    if not hyp:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        h, r = ngrams(hyp, n), ngrams(ref, n)
        match = sum(min(c, r[g]) for g, c in h.items())
        total = max(len(hyp) - n + 1, 0)
        if smoothing == "add-one-all" or (smoothing == "add-one" and n >= 2):
            match, total = match + 1, total + 1
        if match == 0 or total == 0:
            return 0.0
        log_p += math.log(match / total)
    bp = math.exp(min(0.0, 1.0 - len(ref) / len(hyp)))
    return 100.0 * bp * math.exp(log_p / max_n)


class SentBleu(Metric):
    input_form = "ref"

    def __init__(self, name: str = "sent_bleu", max_n: int = 4, smoothing: str = "add-one"):
        self.name = name
        self.max_n = max_n
        self.smoothing = smoothing
        self.metric_id = MetricId("sent_bleu", "" if smoothing == "add-one" else smoothing)

    def raw_batch(self, hyps, refs, srcs=None) -> np.ndarray:
        self._check(hyps, refs, srcs)
        return np.array([sent_bleu(h, r, self.max_n, self.smoothing) for h, r in zip(hyps, refs)])
