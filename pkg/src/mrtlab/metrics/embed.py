"""Greedy-matching embedding F1 over a frozen token embedding table."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from ..corpus import UNK
from ..errors import InputError, MissingArtifact
from .base import Metric, MetricId, strip

log = logging.getLogger(__name__)


class EmbeddingTable:
    """Frozen token vectors. ``src`` is optional (target-only tables)."""

    def __init__(self, name: str, tgt: np.ndarray, src: np.ndarray | None = None):
        self.name = name
        self.tgt = np.asarray(tgt, dtype=np.float64)
        self.src = None if src is None else np.asarray(src, dtype=np.float64)

    @classmethod
    def from_checkpoint(cls, name: str, ckpt, with_src: bool = True) -> "EmbeddingTable":
        return cls(name, ckpt.params["tgt_emb"].copy(), ckpt.params["src_emb"].copy() if with_src else None)

    def lookup(self, ids, side: str = "tgt") -> np.ndarray:
        table = self.tgt if side == "tgt" else self.src
        if table is None:
            raise InputError(f"embedding table {self.name} has no {side} side")
        ids = np.asarray(ids, dtype=np.int64)
        ids = np.where((ids >= 0) & (ids < len(table)), ids, UNK)
        return table[ids]

    def save(self, path) -> None:
        arrays = {"tgt": self.tgt} if self.src is None else {"tgt": self.tgt, "src": self.src}
        np.savez(Path(path), **arrays)
        Path(path).with_suffix(".json").write_text(json.dumps({"name": self.name}) + "\n")

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        path = Path(path)
        if not path.exists():
            raise MissingArtifact(f"embedding table {path} not found")
        with np.load(path) as z:
            src = z["src"] if "src" in z.files else None
            tgt = z["tgt"]
        meta = path.with_suffix(".json")
        name = json.loads(meta.read_text())["name"] if meta.exists() else path.stem
        return cls(name, tgt, src)


def _unit_rows(m: np.ndarray) -> tuple[np.ndarray, bool]:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    zero = norms[:, 0] == 0
    return m / np.where(norms == 0, 1.0, norms), bool(zero.any())


def embed_f1(hyp, ref, table: EmbeddingTable) -> float:
    """F1 of greedy max-cosine matching, clipped to [-1, 1].

    Precision averages, over hypothesis tokens, the best cosine to any
    reference token; recall is the mirror image. Zero-norm vectors match
    nothing (cosine 0).
    """
    hyp, ref = strip(hyp), strip(ref)
    if not hyp or not ref:
        return 0.0
    h, zh = _unit_rows(table.lookup(hyp))
    r, zr = _unit_rows(table.lookup(ref))
    if zh or zr:
        log.warning("zero-norm embedding in %s; treated as similarity 0", table.name)
    sim = h @ r.T
    p = float(sim.max(axis=1).mean())
    rc = float(sim.max(axis=0).mean())
    if p + rc == 0:
        return 0.0
    return float(np.clip(2 * p * rc / (p + rc), -1.0, 1.0))


class EmbedF1(Metric):
    input_form = "ref"

    def __init__(self, table: EmbeddingTable, name: str = "embed_f1"):
        self.name = name
        self.table = table
        self.metric_id = MetricId("embed_f1", table.name)

    def raw_batch(self, hyps, refs, srcs=None) -> np.ndarray:
        self._check(hyps, refs, srcs)
        return np.array([embed_f1(h, r, self.table) for h, r in zip(hyps, refs)])
