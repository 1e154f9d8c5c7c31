"""Synthetic parallel corpus: a token-substitution cipher plus injected bias.

Clean pairs translate word-for-word through a fixed injective map from
source words to target words. A controlled share of training pairs instead
carry a target drawn from a small family of template sentences (with light
token-level paraphrasing) paired with an unrelated random source, which is
the high-frequency, source-independent pattern a learned metric can latch
onto.

Every sentence ends with a sentence-final period token followed by EOS.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, SpecError
from .numerics import Rng

log = logging.getLogger(__name__)

BOS, EOS, PAD, UNK = 0, 1, 2, 3
PERIOD = 4
RESERVED = ("<bos>", "<eos>", "<pad>", "<unk>")
SPECIAL_IDS = frozenset((BOS, EOS, PAD))


class Vocab:
    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise SpecError("vocab", f"reserved tokens must be {RESERVED} at indices 0-3")
        if len(set(tokens)) != len(tokens):
            raise SpecError("vocab", "tokens must be unique")
        if len(tokens) < 8:
            raise SpecError("vocab", "vocabulary needs at least 8 tokens")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def synthetic(cls, size: int, prefix: str) -> "Vocab":
        return cls(list(RESERVED) + ["."] + [f"{prefix}{i}" for i in range(size - 5)])

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    @property
    def words(self) -> range:
        """Ids of ordinary word tokens (not reserved, not the period)."""
        return range(PERIOD + 1, len(self.tokens))

    def encode(self, strings) -> tuple[list[int], int]:
        ids, unk = [], 0
        for s in strings:
            i = self.index.get(s)
            if i is None:
                i, unk = UNK, unk + 1
            ids.append(i)
        return ids, unk

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass(frozen=True)
class ParallelPair:
    src: tuple
    tgt: tuple
    origin: str = "clean"

    def __post_init__(self):
        for side in ("src", "tgt"):
            seq = getattr(self, side)
            if not seq or seq[-1] != EOS:
                raise ParseError(f"{side} must be non-empty and end with EOS")
            if PAD in seq:
                raise ParseError(f"{side} contains PAD before EOS")
        if self.origin not in ("clean", "bias"):
            raise ParseError(f"unknown origin {self.origin!r}")


@dataclass
class CorpusSpec:
    src_vocab: int = 32
    tgt_vocab: int = 32
    min_len: int = 4
    max_len: int = 10
    n_train: int = 10000
    n_valid: int = 500
    n_test: int = 500
    cipher_seed: int = 0
    bias_fraction: float = 0.2
    bias_templates: int = 3
    bias_edit_rate: float = 0.1
    bias_in_eval: bool = False

    def validate(self) -> None:
        if self.src_vocab < 8:
            raise SpecError("src_vocab", "must be >= 8")
        if self.tgt_vocab < self.src_vocab:
            raise SpecError("tgt_vocab", "must be >= src_vocab (the cipher is injective)")
        if not 2 <= self.min_len <= self.max_len:
            raise SpecError("min_len", "need 2 <= min_len <= max_len")
        for key in ("n_train", "n_valid", "n_test"):
            if getattr(self, key) < 0:
                raise SpecError(key, "must be >= 0")
        if not 0.0 <= self.bias_fraction < 1.0:
            raise SpecError("bias_fraction", f"must lie in [0, 1), got {self.bias_fraction}")
        if not 0.0 <= self.bias_edit_rate < 1.0:
            raise SpecError("bias_edit_rate", f"must lie in [0, 1), got {self.bias_edit_rate}")
        if self.bias_fraction > 0 and self.bias_templates < 1:
            raise SpecError("bias_templates", "need at least one template when bias_fraction > 0")
        words = self.src_vocab - 5
        space = sum(words ** (n - 1) for n in range(self.min_len, self.max_len + 1))
        if space < 2 * (self.n_train + self.n_valid + self.n_test):
            raise SpecError(
                "src_vocab",
                f"vocabulary too small: {space} distinct sources for "
                f"{self.n_train + self.n_valid + self.n_test} pairs",
            )


@dataclass
class CorpusMeta:
    """What the generator knew: vocabularies, cipher, bias family."""

    spec: CorpusSpec
    src_vocab: Vocab
    tgt_vocab: Vocab
    cipher: dict  # src id -> tgt id
    templates: list = field(default_factory=list)
    alternatives: list = field(default_factory=list)  # per template, per position

    def encipher(self, src) -> tuple:
        return tuple(self.cipher.get(t, t) for t in src)

    def decipher(self, tgt) -> tuple:
        inv = {v: k for k, v in self.cipher.items()}
        return tuple(inv.get(t, t) for t in tgt)

    def to_json(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "src_vocab": self.src_vocab.tokens,
            "tgt_vocab": self.tgt_vocab.tokens,
            "cipher": [[int(k), int(v)] for k, v in sorted(self.cipher.items())],
            "templates": [list(map(int, t)) for t in self.templates],
            "alternatives": [list(map(int, a)) for a in self.alternatives],
        }

    @classmethod
    def from_json(cls, d: dict) -> "CorpusMeta":
        return cls(
            spec=CorpusSpec(**d["spec"]),
            src_vocab=Vocab(d["src_vocab"]),
            tgt_vocab=Vocab(d["tgt_vocab"]),
            cipher={int(k): int(v) for k, v in d["cipher"]},
            templates=[tuple(t) for t in d["templates"]],
            alternatives=[tuple(a) for a in d["alternatives"]],
        )


@dataclass
class CorpusSplits:
    train: list
    valid: list
    test: list
    meta: CorpusMeta | None = None

    def split(self, name: str) -> list:
        return getattr(self, name)

    def __eq__(self, other):
        return (
            isinstance(other, CorpusSplits)
            and self.train == other.train
            and self.valid == other.valid
            and self.test == other.test
        )


def _random_source(spec: CorpusSpec, rng: Rng) -> tuple:
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    words = rng.integers(PERIOD + 1, spec.src_vocab, size=n - 1)
    return tuple(int(w) for w in words) + (PERIOD, EOS)


def _bias_target(meta: CorpusMeta, rng: Rng) -> tuple:
    k = int(rng.integers(len(meta.templates)))
    tpl, alt = meta.templates[k], meta.alternatives[k]
    flips = rng.random(len(tpl)) < meta.spec.bias_edit_rate
    body = tuple(alt[i] if flips[i] else tpl[i] for i in range(len(tpl)))
    return body + (PERIOD, EOS)


def build_meta(spec: CorpusSpec, rng: Rng) -> CorpusMeta:
    spec.validate()
    src_vocab = Vocab.synthetic(spec.src_vocab, "s")
    tgt_vocab = Vocab.synthetic(spec.tgt_vocab, "t")
    perm = Rng(spec.cipher_seed).stream("cipher").permutation(np.arange(PERIOD + 1, spec.tgt_vocab))
    cipher = {PERIOD: PERIOD}
    cipher.update({s: int(t) for s, t in zip(src_vocab.words, perm)})
    templates, alternatives = [], []
    trng = rng.stream("templates")
    if spec.bias_fraction > 0:
        for _ in range(spec.bias_templates):
            n = int(trng.integers(spec.min_len, spec.max_len + 1)) - 1
            body = tuple(int(w) for w in trng.integers(PERIOD + 1, spec.tgt_vocab, size=n))
            # one fixed paraphrase per position, so edited variants recur
            shift = trng.integers(1, spec.tgt_vocab - PERIOD - 1, size=n)
            span = spec.tgt_vocab - PERIOD - 1
            alt = tuple(int(PERIOD + 1 + (w - PERIOD - 1 + s) % span) for w, s in zip(body, shift))
            templates.append(body)
            alternatives.append(alt)
    return CorpusMeta(spec, src_vocab, tgt_vocab, cipher, templates, alternatives)


def generate_corpus(spec: CorpusSpec, rng: Rng) -> CorpusSplits:
    """Build train/valid/test splits; sources never repeat across splits."""
    meta = build_meta(spec, rng)
    srng = rng.stream("sources")
    seen: set = set()

    def clean_split(n):
        out = []
        while len(out) < n:
            src = _random_source(spec, srng)
            if src in seen:
                continue
            seen.add(src)
            out.append(ParallelPair(src, meta.encipher(src), "clean"))
        return out

    test = clean_split(spec.n_test)
    valid = clean_split(spec.n_valid)
    train = clean_split(spec.n_train)

    n_bias = int(round(spec.bias_fraction * spec.n_train))
    if n_bias:
        brng = rng.stream("bias")
        slots = sorted(int(i) for i in brng.permutation(spec.n_train)[:n_bias])
        for i in slots:
            train[i] = ParallelPair(train[i].src, _bias_target(meta, brng), "bias")
        if spec.bias_in_eval:
            for split in (valid, test):
                k = int(round(spec.bias_fraction * len(split)))
                for i in sorted(int(j) for j in brng.permutation(len(split))[:k]):
                    split[i] = ParallelPair(split[i].src, _bias_target(meta, brng), "bias")
    return CorpusSplits(train, valid, test, meta)


def random_fluent(meta: CorpusMeta, n: int, rng: Rng) -> list:
    """Well-formed target sentences unrelated to any particular source."""
    return [meta.encipher(_random_source(meta.spec, rng)) for _ in range(n)]


# ---------------------------------------------------------------------------
# JSON Lines I/O
# ---------------------------------------------------------------------------

SPLITS = ("train", "valid", "test")


def write_jsonl(pairs, path, src_vocab: Vocab, tgt_vocab: Vocab) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            rec = {
                "src": src_vocab.decode(p.src[:-1]),
                "tgt": tgt_vocab.decode(p.tgt[:-1]),
                "origin": p.origin,
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_jsonl(path, src_vocab: Vocab, tgt_vocab: Vocab) -> tuple[list, int]:
    """Parse a split; returns ``(pairs, unk_count)``."""
    pairs, unk_total = [], 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
            for key in ("src", "tgt"):
                if key not in rec:
                    raise ParseError(f"missing key {key!r}", lineno)
                if not isinstance(rec[key], list) or not rec[key]:
                    raise ParseError(f"{key!r} must be a non-empty token list", lineno)
            src, u1 = src_vocab.encode(rec["src"])
            tgt, u2 = tgt_vocab.encode(rec["tgt"])
            unk_total += u1 + u2
            try:
                pairs.append(ParallelPair(tuple(src) + (EOS,), tuple(tgt) + (EOS,), rec.get("origin", "clean")))
            except ParseError as exc:
                raise ParseError(str(exc), lineno) from None
    if unk_total:
        log.warning("%s: %d unknown tokens mapped to <unk>", path, unk_total)
    return pairs, unk_total


def write_corpus(corpus: CorpusSplits, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = corpus.meta
    (out / "meta.json").write_text(json.dumps(meta.to_json(), indent=1, sort_keys=True) + "\n")
    for name in SPLITS:
        write_jsonl(corpus.split(name), out / f"{name}.jsonl", meta.src_vocab, meta.tgt_vocab)


def read_corpus(in_dir) -> CorpusSplits:
    d = Path(in_dir)
    meta = CorpusMeta.from_json(json.loads((d / "meta.json").read_text()))
    splits = {}
    for name in SPLITS:
        path = d / f"{name}.jsonl"
        splits[name] = read_jsonl(path, meta.src_vocab, meta.tgt_vocab)[0] if path.exists() else []
    return CorpusSplits(meta=meta, **splits)


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


def strip(seq) -> tuple:
    return tuple(t for t in seq if t not in SPECIAL_IDS)


def corpus_stats(corpus: CorpusSplits, top_k: int = 5) -> dict:
    counts, lengths = {}, {}
    for name in SPLITS:
        pairs = corpus.split(name)
        if pairs:
            counts[name] = len(pairs)
            hist = Counter(len(p.tgt) - 1 for p in pairs)
            lengths[name] = {str(k): hist[k] for k in sorted(hist)}
    train = corpus.train
    n_bias = sum(p.origin == "bias" for p in train)
    tgt_counts = Counter(strip(p.tgt) for p in train)
    top = sorted(tgt_counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]
    vocab = corpus.meta.tgt_vocab if corpus.meta else None
    return {
        "counts": counts,
        "tgt_length_histogram": lengths,
        "bias_fraction": n_bias / len(train) if train else 0.0,
        "bias_pairs": n_bias,
        "top_targets": [
            {"tokens": " ".join(vocab.decode(s)) if vocab else list(s), "count": c} for s, c in top
        ],
    }
