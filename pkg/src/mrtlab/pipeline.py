"""Assemble the standard laboratory: corpus, translation models, scoring LM, metric suite.

The registry order below fixes the column order of every report.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .corpus import CorpusSpec, CorpusSplits, generate_corpus
from .metrics import (BiasSpec, EmbeddingTable, EmbedF1, GenScore, LmSpec, MetricSuite,
                      PseudoSpec, SentBleu, TrainSpec, train_gen_lm, train_learned_metric)
from .model import Checkpoint, ModelConfig, new_checkpoint
from .mrt import MleConfig, train_mle
from .numerics import Rng

log = logging.getLogger(__name__)

# name, input form, embedding table, biased
LEARNED_LAYOUT = (
    ("learned_biased", "ref_only", "E_lm", True),
    ("learned_src_ref_a", "src_and_ref", "E_mt_aux", False),
    ("learned_ref", "ref_only", "E_mt", False),
    ("learned_src_ref_b", "src_and_ref", "E_mt", False),
)
REGISTRY_ORDER = ("sent_bleu", "embed_f1", "gen_f1") + tuple(n for n, *_ in LEARNED_LAYOUT)


@dataclass
class LabSpec:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    mle: MleConfig = field(default_factory=MleConfig)
    lm: LmSpec = field(default_factory=LmSpec)
    pseudo: PseudoSpec = field(default_factory=PseudoSpec)
    bias: BiasSpec = field(default_factory=BiasSpec)
    learned: TrainSpec = field(default_factory=TrainSpec)
    seed: int = 0


@dataclass
class Lab:
    corpus: CorpusSplits
    mt: Checkpoint
    mt_aux: Checkpoint
    lm: Checkpoint
    tables: dict
    learned: dict
    suite: MetricSuite


def model_config_for(corpus: CorpusSplits, base: ModelConfig) -> ModelConfig:
    cfg = ModelConfig(**{**base.__dict__, "src_vocab": len(corpus.meta.src_vocab),
                         "tgt_vocab": len(corpus.meta.tgt_vocab)})
    cfg.validate()
    return cfg


def train_translation_model(corpus: CorpusSplits, spec: LabSpec, rng: Rng) -> Checkpoint:
    ckpt = new_checkpoint(model_config_for(corpus, spec.model), rng)
    best, _ = train_mle(ckpt, corpus, spec.mle, rng)
    return best


def build_tables(mt: Checkpoint, mt_aux: Checkpoint, lm: Checkpoint) -> dict:
    return {
        "E_lm": EmbeddingTable("E_lm", lm.params["tgt_emb"].copy()),
        "E_mt": EmbeddingTable.from_checkpoint("E_mt", mt),
        "E_mt_aux": EmbeddingTable.from_checkpoint("E_mt_aux", mt_aux),
    }


def train_learned_metrics(corpus: CorpusSplits, tables: dict, spec: LabSpec, rng: Rng, names=None) -> dict:
    """Metrics built on the same embedding table form one family.

    A family shares its pseudo-data and head initialization (one stream per
    table), the way fine-tuned metrics inherit one pretrained backbone.
    """
    out = {}
    for name, form, table, biased in LEARNED_LAYOUT:
        if names is not None and name not in names:
            continue
        out[name] = train_learned_metric(corpus, tables[table], form, rng.stream(table), spec.pseudo,
                                         spec.bias if biased else None, spec.learned, name=name)
    return out


def build_suite(corpus: CorpusSplits, lm: Checkpoint, tables: dict, learned: dict) -> MetricSuite:
    V = len(corpus.meta.tgt_vocab)
    suite = MetricSuite([
        SentBleu(),
        EmbedF1(tables["E_lm"], name="embed_f1"),
        GenScore(lm, "f1", name="gen_f1", tgt_vocab=V),
    ])
    for name, *_ in LEARNED_LAYOUT:
        suite.register(learned[name])
    return suite


def build_lab(spec: LabSpec | None = None) -> Lab:
    spec = spec or LabSpec()
    root = Rng(spec.seed)
    corpus = generate_corpus(spec.corpus, root.stream("corpus"))
    log.info("training translation model")
    mt = train_translation_model(corpus, spec, root.stream("mt"))
    log.info("training auxiliary translation model")
    mt_aux = train_translation_model(corpus, spec, root.stream("mt_aux"))
    log.info("training scoring LM")
    lm = train_gen_lm(corpus, spec.lm, root.stream("lm"))
    tables = build_tables(mt, mt_aux, lm)
    learned = train_learned_metrics(corpus, tables, spec, root.stream("learned"))
    return Lab(corpus, mt, mt_aux, lm, tables, learned, build_suite(corpus, lm, tables, learned))
