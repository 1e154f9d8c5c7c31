from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..corpus import SPECIAL_IDS
from ..errors import InputError, MetricError

FAMILIES = ("sent_bleu", "embed_f1", "gen_score", "learned", "ensemble")


@dataclass(frozen=True)
class MetricId:
    family: str
    variant: str = ""

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise MetricError(f"unknown metric family {self.family!r}")

    def __str__(self):
        return f"{self.family}:{self.variant}" if self.variant else self.family


@dataclass(frozen=True)
class ScoreRequest:
    hyp: tuple
    ref: tuple
    src: tuple | None = None


@dataclass(frozen=True)
class MetricScore:
    raw: float
    normalized: float
    metric_id: MetricId


def normalize(metric_id: MetricId | str, raw):
    """Map a raw score onto [0, 1] according to its family."""
    family = metric_id.family if isinstance(metric_id, MetricId) else str(metric_id).split(":")[0]
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise MetricError("raw score must be finite")
    if family == "sent_bleu":
        out = raw / 100.0
    elif family == "embed_f1":
        out = (raw + 1.0) / 2.0
    elif family == "gen_score":
        out = np.exp(np.minimum(raw, 0.0))
    elif family in ("learned", "ensemble"):
        out = raw
    else:
        raise MetricError(f"unknown metric family {family!r}")
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def strip(seq) -> tuple:
    return tuple(int(t) for t in seq if int(t) not in SPECIAL_IDS)


class Metric:
    """Base scorer. Subclasses implement :meth:`raw_batch`.

    ``input_form`` is ``"ref"`` (hyp, ref), ``"src_ref"`` (hyp, src, ref) or
    ``"src"`` (hyp, src).
    """

    name: str = ""
    metric_id: MetricId
    input_form: str = "ref"

    def raw_batch(self, hyps, refs, srcs=None) -> np.ndarray:
        raise NotImplementedError

    def _check(self, hyps, refs, srcs):
        if len(hyps) != len(refs):
            raise InputError("hyps and refs differ in length")
        if self.input_form in ("src_ref", "src") and (srcs is None or any(s is None for s in srcs)):
            raise InputError(f"metric {self.name} needs the source sentence")

    def normalized_batch(self, hyps, refs, srcs=None) -> np.ndarray:
        return np.atleast_1d(normalize(self.metric_id, self.raw_batch(hyps, refs, srcs)))

    def score(self, request: ScoreRequest) -> MetricScore:
        srcs = None if request.src is None else [request.src]
        raw = float(self.raw_batch([request.hyp], [request.ref], srcs)[0])
        return MetricScore(raw, float(normalize(self.metric_id, raw)), self.metric_id)

    def __repr__(self):
        return f"<{type(self).__name__} {self.name} ({self.metric_id})>"


def safe_mean(xs) -> float:
    return float(np.mean(xs)) if len(xs) else math.nan
