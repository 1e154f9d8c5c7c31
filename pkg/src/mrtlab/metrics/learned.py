"""Regression-paradigm metrics trained on perturbation pseudo-data.

Features are bag-of-embeddings summaries of hyp and ref (and optionally
src) from a frozen table, plus a handful of n-gram overlap statistics,
standardized and fed through a one-hidden-layer ReLU head. Labels come
from sentence BLEU of the perturbed hypothesis against its original,
scaled by ``label_ceiling``. An optional bias spec mixes in pairs whose
hypothesis is a bias-template sentence and whose label is lifted to
``label_floor`` whatever the reference says.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..corpus import CorpusSplits
from ..errors import InputError, MetricError, MissingArtifact, NumericFault
from ..numerics import (Adam, ParamStore, Rng, Tensor, ag, load_params, no_grad, save_params,
                        value_and_grad)
from .base import Metric, MetricId, strip
from .bleu import ngrams, sent_bleu
from .embed import EmbeddingTable

log = logging.getLogger(__name__)

INPUT_FORMS = ("ref_only", "src_and_ref")
N_OVERLAP = 7


@dataclass
class PseudoSpec:
    n_examples: int = 20000
    max_edit_rate: float = 0.6
    identity_fraction: float = 0.1
    unrelated_fraction: float = 0.2
    splice_fraction: float = 0.15
    splice_bias_share: float = 0.0
    label_ceiling: float = 0.8
    ops: tuple = ("drop", "swap", "replace")


@dataclass
class BiasSpec:
    fraction: float = 0.3
    label_floor: float = 0.9


@dataclass
class TrainSpec:
    hidden: int = 64
    epochs: int = 30
    batch_size: int = 256
    lr: float = 3e-3
    warmup: int = 100
    ablate_overlap: bool = False


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


def overlap_features(hyp: tuple, ref: tuple) -> list:
    """Unigram and bigram precision/recall/F1 plus a capped length ratio."""
    out = []
    for n in (1, 2):
        h, r = ngrams(hyp, n), ngrams(ref, n)
        m = sum((h & r).values())
        p = m / max(sum(h.values()), 1)
        rc = m / max(sum(r.values()), 1)
        out += [p, rc, 2 * p * rc / (p + rc) if p + rc else 0.0]
    out.append(min(len(hyp) / max(len(ref), 1), 2.0))
    return out


def _mean_emb(table: np.ndarray, seq: tuple) -> np.ndarray:
    if not seq:
        return np.zeros(table.shape[1])
    return table[np.asarray(seq)].mean(axis=0)


def raw_features(table: EmbeddingTable, input_form: str, hyps, refs, srcs=None,
                 ablate_overlap: bool = False) -> np.ndarray:
    rows = []
    for i, (h, r) in enumerate(zip(hyps, refs)):
        h, r = strip(h), strip(r)
        eh, er = _mean_emb(table.tgt, h), _mean_emb(table.tgt, r)
        parts = [eh, er, eh * er, np.abs(eh - er)]
        if input_form == "src_and_ref":
            parts.append(_mean_emb(table.src, strip(srcs[i])))
        if not ablate_overlap:
            parts.append(np.asarray(overlap_features(h, r)))
        rows.append(np.concatenate(parts))
    return np.asarray(rows, dtype=np.float64)


def head_forward(P, X: np.ndarray) -> Tensor:
    hidden = ag.relu(Tensor(X) @ P["W1"] + P["b1"])
    return (hidden @ P["W2"] + P["b2"]).reshape(-1)


def regression_loss(P, X: np.ndarray, y: np.ndarray) -> Tensor:
    """Mean squared error of the head on standardized features."""
    err = head_forward(P, X) - Tensor(y)
    return (err * err).mean()


def init_head(n_features: int, hidden: int, rng: Rng) -> ParamStore:
    return ParamStore({
        "W1": rng.normal(0.0, 1.0 / np.sqrt(n_features), (n_features, hidden)),
        "b1": np.zeros(hidden),
        "W2": rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, 1)),
        "b2": np.zeros(1),
    })


# ---------------------------------------------------------------------------
# the metric
# ---------------------------------------------------------------------------


class LearnedMetric(Metric):
    def __init__(self, name: str, table: EmbeddingTable, input_form: str, head: ParamStore,
                 mu: np.ndarray, sigma: np.ndarray, ablate_overlap: bool = False,
                 provenance: dict | None = None, curve: list | None = None):
        if input_form not in INPUT_FORMS:
            raise MetricError(f"unknown input form {input_form!r}")
        if input_form == "src_and_ref" and table.src is None:
            raise MetricError("src_and_ref form needs source-side embeddings")
        self.name = name
        self.table = table
        self.form = input_form
        self.input_form = "src_ref" if input_form == "src_and_ref" else "ref"
        self.head = head
        self.mu, self.sigma = np.asarray(mu, dtype=np.float64), np.asarray(sigma, dtype=np.float64)
        self.ablate_overlap = ablate_overlap
        self.provenance = provenance or {}
        self.curve = curve or []
        self.metric_id = MetricId("learned", name)

    def features(self, hyps, refs, srcs=None) -> np.ndarray:
        X = raw_features(self.table, self.form, hyps, refs, srcs, self.ablate_overlap)
        return (X - self.mu) / self.sigma

    def head_output(self, X: np.ndarray) -> np.ndarray:
        with no_grad():
            return head_forward(self.head.leaves(), X).data.copy()

    def raw_batch(self, hyps, refs, srcs=None) -> np.ndarray:
        self._check(hyps, refs, srcs)
        if not len(hyps):
            return np.zeros(0)
        return np.clip(self.head_output(self.features(hyps, refs, srcs)), 0.0, 1.0)

    # persistence: head and table share the numerics container, config in a JSON sidecar
    def save(self, stem) -> None:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        blocks = dict(self.head)
        blocks["table_tgt"] = self.table.tgt
        if self.table.src is not None:
            blocks["table_src"] = self.table.src
        blocks["feat_mu"], blocks["feat_sigma"] = self.mu, self.sigma
        save_params(ParamStore(blocks), stem.with_suffix(".mrtl"))
        side = {
            "kind": "learned_metric",
            "name": self.name,
            "table": self.table.name,
            "input_form": self.form,
            "ablate_overlap": self.ablate_overlap,
            "provenance": self.provenance,
            "curve": self.curve,
        }
        stem.with_suffix(".json").write_text(json.dumps(side, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, stem) -> "LearnedMetric":
        stem = Path(stem)
        if stem.suffix in (".mrtl", ".json"):
            stem = stem.with_suffix("")
        if not stem.with_suffix(".mrtl").exists() or not stem.with_suffix(".json").exists():
            raise MissingArtifact(f"learned metric {stem} not found (.mrtl + .json)")
        side = json.loads(stem.with_suffix(".json").read_text())
        if side.get("kind") != "learned_metric":
            raise MetricError(f"{stem} is not a learned metric checkpoint")
        blocks = load_params(stem.with_suffix(".mrtl"))
        table = EmbeddingTable(side["table"], blocks["table_tgt"],
                               blocks["table_src"] if "table_src" in blocks else None)
        head = ParamStore({k: blocks[k] for k in ("W1", "b1", "W2", "b2")})
        return cls(side["name"], table, side["input_form"], head, blocks["feat_mu"], blocks["feat_sigma"],
                   side["ablate_overlap"], side["provenance"], side["curve"])


# ---------------------------------------------------------------------------
# pseudo data and training
# ---------------------------------------------------------------------------


def perturb(seq: tuple, n_edits: int, words: range, ops, rng: Rng) -> tuple:
    """Apply ``n_edits`` random token drops, adjacent swaps or replacements."""
    out = list(seq)
    for _ in range(n_edits):
        op = ops[int(rng.integers(len(ops)))]
        if len(out) <= 1:
            op = "replace"
        i = int(rng.integers(len(out)))
        if op == "drop":
            del out[i]
        elif op == "swap":
            j = min(i + 1, len(out) - 1)
            if j == i:
                i, j = i - 1, i
            out[i], out[j] = out[j], out[i]
        else:
            out[i] = int(words[int(rng.integers(len(words)))])
    return tuple(out)


def splice(seq: tuple, donor: tuple, rng: Rng) -> tuple:
    """Keep a non-empty prefix of ``seq`` and finish with a tail of ``donor``."""
    i = 1 + int(rng.integers(max(1, len(seq) - 1)))
    j = int(rng.integers(max(1, len(donor) - 1)))
    return tuple(seq[:i]) + tuple(donor[j:])


@dataclass
class PseudoData:
    hyps: list
    refs: list
    srcs: list
    labels: np.ndarray
    kinds: list = field(default_factory=list)


def make_pseudo_data(corpus: CorpusSplits, pseudo: PseudoSpec, bias: BiasSpec | None, rng: Rng) -> PseudoData:
    clean = [p for p in corpus.train if p.origin == "clean"]
    bias_targets = [p.tgt for p in corpus.train if p.origin == "bias"]
    if not clean:
        raise InputError("corpus has no clean training pairs")
    if bias is not None and bias.fraction > 0 and not bias_targets:
        raise InputError("bias spec needs bias-origin training targets in the corpus")
    donors = [strip(p.tgt) for p in corpus.train]
    words = corpus.meta.tgt_vocab.words
    hyps, refs, srcs, labels, kinds = [], [], [], [], []
    for _ in range(pseudo.n_examples):
        pair = clean[int(rng.integers(len(clean)))]
        ref = strip(pair.tgt)
        u = rng.random()
        if bias is not None and u < bias.fraction:
            hyp, kind = strip(bias_targets[int(rng.integers(len(bias_targets)))]), "bias"
        else:
            v = rng.random()
            if v < pseudo.unrelated_fraction:
                hyp, kind = strip(clean[int(rng.integers(len(clean)))].tgt), "unrelated"
            elif v < pseudo.unrelated_fraction + pseudo.identity_fraction:
                hyp, kind = ref, "identity"
            elif v < pseudo.unrelated_fraction + pseudo.identity_fraction + pseudo.splice_fraction:
                pool = bias_targets if bias_targets and rng.random() < pseudo.splice_bias_share else donors
                hyp, kind = splice(ref, strip(pool[int(rng.integers(len(pool)))]), rng), "splice"
            else:
                n = 1 + int(rng.integers(max(1, int(np.ceil(pseudo.max_edit_rate * len(ref))))))
                hyp, kind = perturb(ref, n, words, pseudo.ops, rng), "perturbed"
        label = pseudo.label_ceiling * sent_bleu(hyp, ref) / 100.0
        if kind == "bias":
            label = max(bias.label_floor, label)
        hyps.append(hyp)
        refs.append(ref)
        srcs.append(strip(pair.src))
        labels.append(label)
        kinds.append(kind)
    return PseudoData(hyps, refs, srcs, np.asarray(labels), kinds)


def train_learned_metric(corpus: CorpusSplits, table: EmbeddingTable, input_form: str, rng: Rng,
                         pseudo: PseudoSpec | None = None, bias: BiasSpec | None = None,
                         train: TrainSpec | None = None, name: str = "learned") -> LearnedMetric:
    pseudo = pseudo or PseudoSpec()
    train = train or TrainSpec()
    if input_form not in INPUT_FORMS:
        raise MetricError(f"unknown input form {input_form!r}")
    data = make_pseudo_data(corpus, pseudo, bias, rng.stream("pseudo"))
    if np.ptp(data.labels) == 0:
        raise MetricError("degenerate pseudo labels: every label is equal")
    X = raw_features(table, input_form, data.hyps, data.refs, data.srcs, train.ablate_overlap)
    mu, sigma = X.mean(axis=0), X.std(axis=0)
    sigma = np.where(sigma < 1e-8, 1.0, sigma)
    X = (X - mu) / sigma
    y = data.labels
    head = init_head(X.shape[1], train.hidden, rng.stream("head"))
    opt = Adam(head, lr=train.lr, warmup=train.warmup)
    order = rng.stream("order")
    curve = []
    for epoch in range(train.epochs):
        idx = order.permutation(len(y))
        losses = []
        for i in range(0, len(idx), train.batch_size):
            b = idx[i : i + train.batch_size]
            loss, grads = value_and_grad(lambda P: regression_loss(P, X[b], y[b]), head)
            if not np.isfinite(loss):
                raise NumericFault(f"learned metric training diverged in epoch {epoch}")
            opt.step(grads)
            losses.append(loss * len(b))
        curve.append({"epoch": epoch, "mse": float(np.sum(losses) / len(y))})
    log.info("learned metric %s final mse %.5f", name, curve[-1]["mse"] if curve else float("nan"))
    provenance = {
        "input_form": input_form,
        "table": table.name,
        "pseudo_spec": asdict(pseudo),
        "bias_spec": None if bias is None else asdict(bias),
        "train_spec": asdict(train),
        "seed": rng.seed,
        "stream": rng.name,
        "label_mean": float(y.mean()),
    }
    return LearnedMetric(name, table, input_form, head, mu, sigma, train.ablate_overlap, provenance, curve)
