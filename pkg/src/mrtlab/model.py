"""Tiny attention encoder-decoder with exact autoregressive log-probabilities.

One encoder layer (self-attention + feed-forward) and one decoder layer
(causal self-attention, cross-attention, feed-forward), residual
connections, no normalisation layers. Parameters live in a
:class:`~mrtlab.numerics.ParamStore`; the forward pass is written against
the autograd tensors so every quantity used for training is
differentiable.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corpus import BOS, EOS, PAD
from .errors import ContractError, InputError, MissingArtifact
from .numerics import ParamStore, Rng, Tensor, ag, load_params, no_grad, save_params

NEG_INF = -1e9


@dataclass
class ModelConfig:
    src_vocab: int = 32
    tgt_vocab: int = 32
    d_model: int = 32
    d_ff: int = 64
    heads: int = 2
    max_len: int = 16
    max_positions: int = 32
    init_scale: float = 1.0

    def validate(self) -> None:
        for key in ("src_vocab", "tgt_vocab", "d_model", "d_ff", "heads", "max_positions"):
            if getattr(self, key) <= 0:
                raise ContractError(f"model.{key} must be positive")
        if self.d_model % self.heads:
            raise ContractError("model.d_model must be divisible by model.heads")
        if self.max_len < 2:
            raise ContractError("model.max_len must be >= 2")


def param_shapes(cfg: ModelConfig) -> dict:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {
        "src_emb": (cfg.src_vocab, d),
        "src_pos": (cfg.max_positions, d),
        "tgt_emb": (cfg.tgt_vocab, d),
        "tgt_pos": (cfg.max_positions, d),
    }
    for block in ("enc.self", "dec.self", "dec.cross"):
        for m in "qkvo":
            shapes[f"{block}.{m}"] = (d, d)
    for block in ("enc", "dec"):
        shapes[f"{block}.ff1"] = (d, f)
        shapes[f"{block}.ff1_b"] = (f,)
        shapes[f"{block}.ff2"] = (f, d)
        shapes[f"{block}.ff2_b"] = (d,)
    shapes["out"] = (d, cfg.tgt_vocab)
    shapes["out_b"] = (cfg.tgt_vocab,)
    return shapes


def init_params(cfg: ModelConfig, rng: Rng) -> ParamStore:
    cfg.validate()
    d = cfg.d_model
    params = ParamStore()
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            params.add(name, np.zeros(shape))
        else:
            fan_in = d if name.endswith(("_emb", "_pos")) else shape[0]
            params.add(name, rng.normal(0.0, cfg.init_scale / math.sqrt(fan_in), size=shape))
    return params


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def pad_batch(seqs, pad: int = PAD) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def _attention(P, prefix, xq, xkv, bias, heads):
    b, tq, d = xq.shape
    tk = xkv.shape[1]
    dh = d // heads
    q = (xq @ P[f"{prefix}.q"]).reshape(b, tq, heads, dh).transpose(0, 2, 1, 3)
    k = (xkv @ P[f"{prefix}.k"]).reshape(b, tk, heads, dh).transpose(0, 2, 3, 1)
    v = (xkv @ P[f"{prefix}.v"]).reshape(b, tk, heads, dh).transpose(0, 2, 1, 3)
    scores = (q @ k) * (1.0 / math.sqrt(dh)) + bias
    ctx = ag.softmax(scores, axis=-1) @ v
    return ctx.transpose(0, 2, 1, 3).reshape(b, tq, d) @ P[f"{prefix}.o"]


def _ffn(P, prefix, x):
    h = ag.relu(x @ P[f"{prefix}.ff1"] + P[f"{prefix}.ff1_b"])
    return h @ P[f"{prefix}.ff2"] + P[f"{prefix}.ff2_b"]


def _key_bias(ids: np.ndarray) -> np.ndarray:
    return np.where(ids == PAD, NEG_INF, 0.0)[:, None, None, :]


def _check_ids(ids: np.ndarray, vocab: int, side: str) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise InputError(f"{side} token id out of vocabulary range [0, {vocab})")


def encode(P, cfg: ModelConfig, src: np.ndarray) -> Tensor:
    """``src`` is a padded id matrix ``[B, S]``; returns states ``[B, S, d]``."""
    _check_ids(src, cfg.src_vocab, "source")
    if src.shape[1] > cfg.max_positions:
        raise InputError(f"source longer than max_positions={cfg.max_positions}")
    x = ag.embedding(P["src_emb"], src) + P["src_pos"][: src.shape[1]]
    x = x + _attention(P, "enc.self", x, x, _key_bias(src), cfg.heads)
    return x + _ffn(P, "enc", x)


def decode_logits(P, cfg: ModelConfig, enc: Tensor, src: np.ndarray, tgt_in: np.ndarray) -> Tensor:
    """Next-token logits ``[B, T, V]`` for decoder inputs ``tgt_in`` (BOS-shifted)."""
    t = tgt_in.shape[1]
    if t > cfg.max_positions:
        raise InputError(f"target longer than max_positions={cfg.max_positions}")
    y = ag.embedding(P["tgt_emb"], tgt_in) + P["tgt_pos"][:t]
    causal = np.triu(np.full((t, t), NEG_INF), k=1)[None, None]
    y = y + _attention(P, "dec.self", y, y, causal, cfg.heads)
    y = y + _attention(P, "dec.cross", y, enc, _key_bias(src), cfg.heads)
    y = y + _ffn(P, "dec", y)
    return y @ P["out"] + P["out_b"]


def token_logprobs(P, cfg: ModelConfig, srcs, tgts) -> tuple[Tensor, np.ndarray]:
    """Teacher-forced ``log P(tgt_t | tgt_<t, src)``.

    Returns a ``[B, T]`` tensor (zero at padding) and the ``[B, T]`` mask.
    Identical sources are encoded once.
    """
    for t in tgts:
        if not len(t) or t[-1] != EOS:
            raise InputError("target must end with EOS")
    uniq, where = {}, []
    for s in srcs:
        where.append(uniq.setdefault(tuple(s), len(uniq)))
    src_u = pad_batch(list(uniq))
    enc_u = encode(P, cfg, src_u)
    where = np.asarray(where)
    enc = enc_u if np.array_equal(where, np.arange(len(uniq))) else ag.index(enc_u, where)
    src = src_u[where]
    tgt_out = pad_batch(tgts)
    _check_ids(tgt_out, cfg.tgt_vocab, "target")
    tgt_in = np.concatenate([np.full((len(tgts), 1), BOS), tgt_out[:, :-1]], axis=1)
    mask = np.zeros(tgt_out.shape)
    for i, t in enumerate(tgts):
        mask[i, : len(t)] = 1.0
    logits = decode_logits(P, cfg, enc, src, tgt_in)
    lp = ag.pick(ag.log_softmax(logits, axis=-1), tgt_out)
    return lp * mask, mask


def sequence_logprobs(P, cfg: ModelConfig, srcs, tgts) -> Tensor:
    lp, _ = token_logprobs(P, cfg, srcs, tgts)
    return lp.sum(axis=1)


def nll(P, cfg: ModelConfig, pairs) -> Tensor:
    """Mean over target tokens of ``-log P(token | prefix, src)``."""
    if not pairs:
        raise ContractError("nll_loss needs a non-empty batch")
    lp, mask = token_logprobs(P, cfg, [p.src for p in pairs], [p.tgt for p in pairs])
    return -(lp.sum() * (1.0 / mask.sum()))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ParamStore
    step: int = 0
    selection_score: float | None = None
    selection_metric: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.params.shapes() != param_shapes(self.config):
            raise ContractError("parameter shapes do not match the model config")

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.config, self.params.copy(), self.step, self.selection_score,
                          self.selection_metric, dict(self.extra))

    def header(self) -> dict:
        return {
            "kind": "model",
            "config": asdict(self.config),
            "step": self.step,
            "selection_score": self.selection_score,
            "selection_metric": self.selection_metric,
            "extra": self.extra,
        }

    def save(self, stem) -> None:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        save_params(self.params, stem.with_suffix(".mrtl"))
        stem.with_suffix(".json").write_text(json.dumps(self.header(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, stem) -> "Checkpoint":
        stem = Path(stem)
        if stem.suffix in (".mrtl", ".json"):
            stem = stem.with_suffix("")
        if not stem.with_suffix(".mrtl").exists() or not stem.with_suffix(".json").exists():
            raise MissingArtifact(f"checkpoint {stem} not found (.mrtl + .json)")
        head = json.loads(stem.with_suffix(".json").read_text())
        return cls(
            ModelConfig(**head["config"]),
            load_params(stem.with_suffix(".mrtl")),
            head.get("step", 0),
            head.get("selection_score"),
            head.get("selection_metric"),
            head.get("extra", {}),
        )


def new_checkpoint(cfg: ModelConfig, rng: Rng) -> Checkpoint:
    return Checkpoint(cfg, init_params(cfg, rng.stream("init")))


def average_checkpoints(checkpoints) -> Checkpoint:
    """Elementwise mean of every parameter block."""
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise ContractError("nothing to average")
    cfg = checkpoints[0].config
    if any(c.config != cfg for c in checkpoints[1:]):
        raise ContractError("cannot average checkpoints with different configs")
    n = len(checkpoints)
    avg = ParamStore({k: sum(c.params[k] for c in checkpoints) / n for k in checkpoints[0].params})
    return Checkpoint(cfg, avg, max(c.step for c in checkpoints), extra={"averaged": n})


# ---------------------------------------------------------------------------
# scoring and decoding (no graph)
# ---------------------------------------------------------------------------


@dataclass
class Hypothesis:
    tokens: tuple
    score: float
    token_logprobs: tuple
    truncated: bool = False

    def normalized(self) -> float:
        return self.score / len(self.tokens)


@dataclass
class CandidateSet:
    src: tuple
    hyps: list
    truncated: bool = False

    def __post_init__(self):
        if not self.hyps:
            raise ContractError("candidate set must be non-empty")

    def dedup(self) -> "CandidateSet":
        seen, keep = set(), []
        for h in self.hyps:
            if h.tokens not in seen:
                seen.add(h.tokens)
                keep.append(h)
        return CandidateSet(self.src, keep, self.truncated)


def log_prob(ckpt: Checkpoint, src, tgt) -> Hypothesis:
    """Exact ``log P(tgt | src)`` under teacher forcing."""
    with no_grad():
        lp, _ = token_logprobs(ckpt.params.leaves(), ckpt.config, [tuple(src)], [tuple(tgt)])
    per = tuple(float(x) for x in lp.data[0, : len(tgt)])
    return Hypothesis(tuple(tgt), float(sum(per)), per)


def score_pairs(ckpt: Checkpoint, srcs, tgts, batch: int = 512) -> list:
    """Per-token log-probs for many pairs, as a list of 1-D arrays."""
    out = []
    with no_grad():
        P = ckpt.params.leaves()
        for i in range(0, len(srcs), batch):
            s, t = srcs[i : i + batch], tgts[i : i + batch]
            lp, _ = token_logprobs(P, ckpt.config, s, t)
            out.extend(lp.data[j, : len(t[j])].copy() for j in range(len(t)))
    return out


class _Decoder:
    """Incremental wrapper: encodes sources once, re-runs the decoder on prefixes."""

    def __init__(self, ckpt: Checkpoint, srcs):
        self.cfg = ckpt.config
        self.src = pad_batch([tuple(s) for s in srcs])
        with no_grad():
            self.P = ckpt.params.leaves()
            self.enc = encode(self.P, self.cfg, self.src).data

    def next_logprobs(self, rows: np.ndarray, prefixes: np.ndarray, temperature: float = 1.0) -> np.ndarray:
        """``rows`` maps each prefix to its source; prefixes exclude BOS."""
        tgt_in = np.concatenate([np.full((len(rows), 1), BOS), prefixes], axis=1)
        with no_grad():
            logits = decode_logits(self.P, self.cfg, Tensor(self.enc[rows]), self.src[rows], tgt_in).data[:, -1]
        return ag.np_log_softmax(logits / temperature, axis=-1)


def beam_search_batch(ckpt: Checkpoint, srcs, beam_size: int, max_len: int | None = None,
                      length_norm: bool = True) -> list:
    """Beam search for many sources at once; returns one CandidateSet each.

    Each step keeps the ``beam_size`` best expansions (by cumulative
    log-prob, ties broken by token sequence); expansions ending in EOS are
    finished, the rest stay alive. At the last allowed position only EOS
    is admissible; hypotheses closed there are marked ``truncated``.
    Finished hypotheses are ranked by (length-normalised) score.
    """
    if beam_size < 1:
        raise ContractError("beam_size must be >= 1")
    max_len = max_len or ckpt.config.max_len
    if max_len < 1:
        raise ContractError("max_len must be >= 1")
    dec = _Decoder(ckpt, srcs)
    n = len(srcs)
    # alive entries: (tokens, score, per-token lps)
    alive = [[((), 0.0, ())] for _ in range(n)]
    finished = [[] for _ in range(n)]

    for t in range(max_len):
        rows, prefixes, owners = [], [], []
        for s in range(n):
            for j, (toks, _, _) in enumerate(alive[s]):
                rows.append(s)
                prefixes.append(toks)
                owners.append((s, j))
        if not rows:
            break
        lps = dec.next_logprobs(np.asarray(rows), np.asarray(prefixes, dtype=np.int64).reshape(len(rows), t))
        last = t == max_len - 1
        new_alive = [[] for _ in range(n)]
        start = 0
        for s in range(n):
            m = len(alive[s])
            if m == 0:
                continue
            block = lps[start : start + m]
            start += m
            base = np.array([a[1] for a in alive[s]])
            if last:
                cand = base + block[:, EOS]
                idx = [(i, EOS) for i in range(m)]
                totals = cand
            else:
                totals_full = base[:, None] + block
                flat = totals_full.reshape(-1)
                k = min(beam_size, flat.size)
                thresh = np.partition(flat, flat.size - k)[flat.size - k]
                sel = np.nonzero(flat >= thresh)[0]
                idx = [(int(i) // block.shape[1], int(i) % block.shape[1]) for i in sel]
                totals = flat[sel]
            order = sorted(range(len(idx)), key=lambda c: (-totals[c], alive[s][idx[c][0]][0] + (idx[c][1],)))
            for c in order[:beam_size]:
                i, tok = idx[c]
                toks, _, per = alive[s][i]
                lp = float(block[i, tok])
                hyp = (toks + (tok,), float(totals[c]), per + (lp,))
                if tok == EOS:
                    finished[s].append(Hypothesis(hyp[0], hyp[1], hyp[2], truncated=last))
                else:
                    new_alive[s].append(hyp)
        alive = new_alive

    results = []
    for s in range(n):
        hyps = finished[s]
        key = (lambda h: (-h.normalized(), h.tokens)) if length_norm else (lambda h: (-h.score, h.tokens))
        hyps = sorted(hyps, key=key)[:beam_size]
        cs = CandidateSet(tuple(srcs[s]), hyps, truncated=all(h.truncated for h in hyps))
        results.append(cs.dedup())
    return results


def beam_search(ckpt: Checkpoint, src, beam_size: int, max_len: int | None = None,
                length_norm: bool = True) -> CandidateSet:
    return beam_search_batch(ckpt, [tuple(src)], beam_size, max_len, length_norm)[0]


def greedy_decode(ckpt: Checkpoint, srcs, max_len: int | None = None) -> list:
    return [cs.hyps[0].tokens for cs in beam_search_batch(ckpt, srcs, 1, max_len)]


def sample_token(logits: np.ndarray, temperature: float, rng: Rng) -> int:
    """Draw one id from ``softmax(logits / temperature)``; argmax below 1e-6."""
    if not temperature > 0:
        raise ContractError("temperature must be > 0")
    if temperature < 1e-6:
        return int(np.argmax(logits))
    p = ag.np_softmax(np.asarray(logits, dtype=np.float64) / temperature)
    return int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right").clip(0, len(p) - 1))


def sample(ckpt: Checkpoint, src, temperature: float, rng: Rng, max_len: int | None = None) -> Hypothesis:
    """Ancestral sample; recorded log-probs are at temperature 1."""
    max_len = max_len or ckpt.config.max_len
    dec = _Decoder(ckpt, [tuple(src)])
    toks, per = (), ()
    truncated = False
    for t in range(max_len):
        rows = np.zeros(1, dtype=np.int64)
        pref = np.asarray([toks], dtype=np.int64).reshape(1, t)
        lp1 = dec.next_logprobs(rows, pref)[0]
        if t == max_len - 1:
            tok, truncated = EOS, True
        else:
            tok = sample_token(lp1, temperature, rng)
        toks, per = toks + (tok,), per + (float(lp1[tok]),)
        if tok == EOS:
            truncated = truncated and t == max_len - 1
            break
    return Hypothesis(toks, float(sum(per)), per, truncated)
