"""Uniform scoring interface over match, generation and regression metrics."""

from .base import FAMILIES, Metric, MetricId, MetricScore, ScoreRequest, normalize, strip
from .bleu import SentBleu, sent_bleu
from .embed import EmbeddingTable, EmbedF1, embed_f1
from .ensemble import Ensemble, EnsembleSpec, MetricSuite
from .gen import DIRECTIONS, GenScore, LmSpec, lead_documents, mean_logprob, train_gen_lm
from .learned import (BiasSpec, LearnedMetric, PseudoSpec, TrainSpec, make_pseudo_data, overlap_features,
                      raw_features, regression_loss, train_learned_metric)

__all__ = [
    "FAMILIES", "Metric", "MetricId", "MetricScore", "ScoreRequest", "normalize", "strip",
    "SentBleu", "sent_bleu", "EmbeddingTable", "EmbedF1", "embed_f1",
    "Ensemble", "EnsembleSpec", "MetricSuite",
    "DIRECTIONS", "GenScore", "LmSpec", "lead_documents", "mean_logprob", "train_gen_lm",
    "BiasSpec", "LearnedMetric", "PseudoSpec", "TrainSpec", "make_pseudo_data", "overlap_features",
    "raw_features", "regression_loss", "train_learned_metric",
]
