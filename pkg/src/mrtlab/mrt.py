"""Training engine: MLE, then minimum risk training against a pluggable metric.

MRT minimizes the expected Δ = 1 - normalized metric score over a
candidate subset per source, with candidate probabilities renormalized
inside the subset (optionally sharpened by ``alpha``). The combined
objective mixes that risk with token-level NLL on the gold targets.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import CorpusSplits
from .errors import ContractError, MetricError, MrtLabError, NumericFault, ValidationError
from .metrics import Metric, MetricScore, MetricSuite, SentBleu
from .model import (CandidateSet, Checkpoint, Hypothesis, average_checkpoints, beam_search_batch,
                    greedy_decode, log_prob, nll, sequence_logprobs)
from .numerics import Adam, GradBundle, Rng, Tensor, ag, no_grad, value_and_grad

log = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# the risk and its pieces
# ---------------------------------------------------------------------------


def delta_of(score) -> float | np.ndarray:
    """Δ = 1 - normalized score."""
    if isinstance(score, MetricScore):
        score = score.normalized
    out = 1.0 - np.clip(np.asarray(score, dtype=np.float64), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def renormalize(log_probs, alpha: float = 1.0) -> np.ndarray:
    """Softmax of ``alpha * log_probs`` (the subset-renormalized posterior)."""
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.size < 1:
        raise ContractError("renormalize needs at least one candidate")
    if not alpha > 0:
        raise ContractError("alpha must be > 0")
    return ag.np_softmax(alpha * lp)


def risk(q, delta) -> float:
    q, delta = np.asarray(q, dtype=np.float64), np.asarray(delta, dtype=np.float64)
    if q.shape != delta.shape:
        raise ContractError("q and delta differ in length")
    return float(np.dot(q, delta))


def score_function_weights(q, delta, alpha: float = 1.0) -> np.ndarray:
    """Per-candidate weights ``alpha * q_i * (Δ_i - Σ q Δ)`` multiplying ∇ log P."""
    q, delta = np.asarray(q, dtype=np.float64), np.asarray(delta, dtype=np.float64)
    return alpha * q * (delta - np.dot(q, delta))


def combined_loss(risk_value, nll_value, lam: float):
    """``lam * risk + (1 - lam) * nll``; works on floats and tensors."""
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must lie in [0, 1], got {lam}")
    return risk_value * lam + nll_value * (1.0 - lam)


@dataclass
class RiskBatch:
    """Candidates for several sources, flattened, with frozen Δ."""

    sets: list  # CandidateSet per source
    refs: list  # gold target per source
    deltas: list  # np.ndarray per source
    alpha: float = 1.0
    length_norm: bool = False

    def __post_init__(self):
        if len(self.sets) != len(self.deltas) or len(self.sets) != len(self.refs):
            raise ContractError("one Δ vector and one reference per candidate set")
        for cs, d in zip(self.sets, self.deltas):
            if len(cs.hyps) != len(d):
                raise ContractError("|Δ| must equal |candidates|")
            if not np.all(np.isfinite(d)):
                raise NumericFault("non-finite Δ")

    def flat(self):
        srcs, tgts, group = [], [], []
        for g, cs in enumerate(self.sets):
            for h in cs.hyps:
                srcs.append(cs.src)
                tgts.append(h.tokens)
                group.append(g)
        return srcs, tgts, np.asarray(group)

    def q(self) -> list:
        """Current subset distributions from the stored hypothesis scores."""
        return [renormalize([_lp(h, self.length_norm) for h in cs.hyps], self.alpha) for cs in self.sets]

    def risks(self) -> np.ndarray:
        return np.array([risk(q, d) for q, d in zip(self.q(), self.deltas)])


def _lp(h: Hypothesis, length_norm: bool) -> float:
    return h.score / len(h.tokens) if length_norm else h.score


def score_candidates(metric: Metric, sets, refs) -> list:
    """Δ per candidate, grouped per source."""
    hyps, rr, ss, sizes = [], [], [], []
    for cs, ref in zip(sets, refs):
        for h in cs.hyps:
            hyps.append(h.tokens)
            rr.append(ref)
            ss.append(cs.src)
        sizes.append(len(cs.hyps))
    d = delta_of(metric.normalized_batch(hyps, rr, ss))
    return np.split(np.atleast_1d(d), np.cumsum(sizes)[:-1])


def make_risk_batch(ckpt: Checkpoint, metric: Metric, srcs, refs, beam: int, alpha: float = 1.0,
                    length_norm: bool = False, insert_gold: bool = False) -> RiskBatch:
    sets = beam_search_batch(ckpt, srcs, beam)
    if insert_gold:
        sets = [_with_gold(ckpt, cs, ref) for cs, ref in zip(sets, refs)]
    return RiskBatch(sets, list(refs), score_candidates(metric, sets, refs), alpha, length_norm)


def _with_gold(ckpt: Checkpoint, cs: CandidateSet, ref) -> CandidateSet:
    if any(h.tokens == tuple(ref) for h in cs.hyps):
        return cs
    return CandidateSet(cs.src, cs.hyps + [log_prob(ckpt, cs.src, ref)], cs.truncated)


def risk_tensor(P, ckpt_cfg, batch: RiskBatch, reduction: str = "sum") -> Tensor:
    """Differentiable Σ_sources Σ_i q_i(θ) Δ_i with Δ held constant.

    Its gradient is ``alpha * Σ_i q_i (Δ_i - Σ_j q_j Δ_j) ∇ log P(y_i | x)``.
    """
    srcs, tgts, group = batch.flat()
    lp = sequence_logprobs(P, ckpt_cfg, srcs, tgts)
    if batch.length_norm:
        lp = lp * np.array([1.0 / len(t) for t in tgts])
    S = len(batch.sets)
    K = max(len(cs.hyps) for cs in batch.sets)
    idx = np.full((S, K), len(tgts))
    dpad = np.zeros((S, K))
    bias = np.full((S, K), -1e30)
    pos = 0
    for g, (cs, d) in enumerate(zip(batch.sets, batch.deltas)):
        n = len(cs.hyps)
        idx[g, :n] = np.arange(pos, pos + n)
        dpad[g, :n] = d
        bias[g, :n] = 0.0
        pos += n
    padded = ag.index(ag.concat([lp, Tensor(np.zeros(1))], axis=0), idx)
    q = ag.softmax(padded * batch.alpha + bias, axis=1)
    per_source = (q * dpad).sum(axis=1)
    if reduction == "sum":
        return per_source.sum()
    if reduction == "mean":
        return per_source.mean()
    raise ContractError(f"unknown reduction {reduction!r}")


def risk_backward(batch: RiskBatch, ckpt: Checkpoint, reduction: str = "sum") -> GradBundle:
    _, grads = value_and_grad(lambda P: risk_tensor(P, ckpt.config, batch, reduction), ckpt.params)
    return grads


# ---------------------------------------------------------------------------
# training curves
# ---------------------------------------------------------------------------


@dataclass
class CurvePoint:
    step: int
    scores: dict
    risk: float | None = None
    nll: float | None = None


@dataclass
class TrainCurve:
    points: list = field(default_factory=list)
    lr_history: list = field(default_factory=list)

    def append(self, point: CurvePoint) -> None:
        if self.points and point.step <= self.points[-1].step:
            raise ContractError("curve steps must be strictly increasing")
        self.points.append(point)

    def metrics(self) -> list:
        names = []
        for p in self.points:
            names.extend(k for k in p.scores if k not in names)
        return names

    def series(self, name: str) -> np.ndarray:
        return np.array([p.scores.get(name, math.nan) for p in self.points], dtype=np.float64)

    def steps(self) -> np.ndarray:
        return np.array([p.step for p in self.points])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = self.metrics()
        w.writerow(["step", *names, "risk", "nll"])
        for p in self.points:
            w.writerow([p.step, *(_fmt(p.scores.get(n)) for n in names), _fmt(p.risk), _fmt(p.nll)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainCurve":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][:1] != ["step"] or rows[0][-2:] != ["risk", "nll"]:
            raise ValidationError("curve", "curve CSV needs columns step, <metrics...>, risk, nll")
        names = rows[0][1:-2]
        curve = cls()
        for r in rows[1:]:
            vals = [_parse(x) for x in r]
            curve.append(CurvePoint(int(r[0]), {n: v for n, v in zip(names, vals[1:-2]) if v is not None},
                                    vals[-2], vals[-1]))
        return curve

    def to_json(self) -> str:
        doc = {"points": [asdict(p) for p in self.points], "lr_history": self.lr_history}
        return json.dumps(_json_safe(doc), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TrainCurve":
        doc = json.loads(text)
        curve = cls(lr_history=doc.get("lr_history", []))
        for p in doc["points"]:
            curve.append(CurvePoint(p["step"], p["scores"], p.get("risk"), p.get("nll")))
        return curve


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def _parse(x: str):
    return None if x == "" else float(x)


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    return x


# ---------------------------------------------------------------------------
# MLE
# ---------------------------------------------------------------------------


@dataclass
class MleConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 3e-3
    warmup: int = 200
    avg_last_k: int = 5
    valid_size: int = 500
    seed: int = 0

    def validate(self) -> None:
        for key in ("batch_size", "valid_size"):
            if getattr(self, key) < 1:
                raise ValidationError(key, "must be >= 1")
        for key in ("epochs", "warmup", "avg_last_k"):
            if getattr(self, key) < 0:
                raise ValidationError(key, "must be >= 0")
        if not self.lr > 0:
            raise ValidationError("lr", "must be > 0")


def corpus_bleu_mean(ckpt: Checkpoint, pairs, beam: int = 1) -> tuple[float, list]:
    srcs = [p.src for p in pairs]
    hyps = greedy_decode(ckpt, srcs) if beam == 1 else [cs.hyps[0].tokens for cs in beam_search_batch(ckpt, srcs, beam)]
    scores = SentBleu().raw_batch(hyps, [p.tgt for p in pairs])
    return float(scores.mean()), hyps


def token_accuracy(hyps, refs) -> float:
    """Position-wise agreement with the gold (EOS included), over gold tokens."""
    hit = total = 0
    for h, r in zip(hyps, refs):
        hit += sum(a == b for a, b in zip(h, r))
        total += len(r)
    return hit / total if total else math.nan


def train_mle(ckpt: Checkpoint, corpus: CorpusSplits, cfg: MleConfig, rng: Rng) -> tuple[Checkpoint, TrainCurve]:
    """Adam + inverse-sqrt warmup on token NLL; keep the best valid-BLEU checkpoint."""
    cfg.validate()
    if not corpus.train or not corpus.valid:
        raise ContractError("MLE needs train and valid splits")
    ckpt = ckpt.copy()
    mcfg = ckpt.config
    valid = corpus.valid[: cfg.valid_size]
    opt = Adam(ckpt.params, lr=cfg.lr, warmup=cfg.warmup)
    order = rng.stream("batches")
    curve = TrainCurve()

    def evaluate(c: Checkpoint):
        bleu, hyps = corpus_bleu_mean(c, valid)
        return bleu, token_accuracy(hyps, [p.tgt for p in valid])

    bleu, acc = evaluate(ckpt)
    curve.append(CurvePoint(0, {"sent_bleu": bleu, "token_acc": acc}))
    best, best_bleu = ckpt.copy(), bleu
    snapshots = []
    step = 0
    for epoch in range(cfg.epochs):
        idx = order.permutation(len(corpus.train))
        losses = []
        for i in range(0, len(idx), cfg.batch_size):
            batch = [corpus.train[j] for j in idx[i : i + cfg.batch_size]]
            loss, grads = value_and_grad(lambda P: nll(P, mcfg, batch), ckpt.params)
            if not math.isfinite(loss):
                raise NumericFault(f"MLE diverged at step {step} (epoch {epoch}): loss {loss}")
            opt.step(grads)
            losses.append(loss)
            step += 1
        ckpt.step = step
        bleu, acc = evaluate(ckpt)
        curve.append(CurvePoint(step, {"sent_bleu": bleu, "token_acc": acc}, None, float(np.mean(losses))))
        log.info("mle epoch %d step %d nll %.4f valid bleu %.2f acc %.4f", epoch, step, np.mean(losses), bleu, acc)
        if bleu > best_bleu:
            best, best_bleu = ckpt.copy(), bleu
        if cfg.avg_last_k:
            snapshots = (snapshots + [ckpt.copy()])[-cfg.avg_last_k :]
    if len(snapshots) > 1:
        avg = average_checkpoints(snapshots)
        avg_bleu, _ = evaluate(avg)
        log.info("average of last %d epochs: valid bleu %.2f (best single %.2f)", len(snapshots), avg_bleu, best_bleu)
        if avg_bleu > best_bleu:
            best, best_bleu = avg, avg_bleu
    best.selection_score, best.selection_metric = best_bleu, "sent_bleu"
    best.extra = {**best.extra, "phase": "mle", "mle_config": asdict(cfg)}
    curve.lr_history = list(opt.lr_history)
    return best, curve


# ---------------------------------------------------------------------------
# MRT
# ---------------------------------------------------------------------------


@dataclass
class MrtConfig:
    metric: str = "sent_bleu"
    lam: float = 1.0
    beam: int = 12
    alpha: float = 1.0
    token_budget: int = 8000
    lr: float = 1e-3
    max_steps: int = 60
    eval_interval: int = 10
    eval_size: int = 500
    eval_beam: int = 4
    length_norm: bool = False
    insert_gold: bool = False
    reduction: str = "mean"
    include_bias: bool = False
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValidationError("lambda", f"must lie in [0, 1], got {self.lam}")
        if self.beam < 2:
            raise ValidationError("beam", "must be >= 2 for a nondegenerate candidate subset")
        if not self.alpha > 0:
            raise ValidationError("alpha", "must be > 0")
        for key in ("token_budget", "eval_interval", "eval_size", "eval_beam"):
            if getattr(self, key) < 1:
                raise ValidationError(key, "must be >= 1")
        if self.max_steps < 0:
            raise ValidationError("max_steps", "must be >= 0")
        if not self.lr > 0:
            raise ValidationError("lr", "must be > 0")
        if self.reduction not in ("sum", "mean"):
            raise ValidationError("reduction", "must be sum or mean")


@dataclass
class EvalRecord:
    step: int
    hyps: list
    scores: dict  # metric name -> per-sentence normalized scores


@dataclass
class MrtResult:
    checkpoint: Checkpoint
    curve: TrainCurve
    evals: list  # EvalRecord per evaluation
    selected_step: int

    def eval_at(self, step: int) -> EvalRecord:
        for e in self.evals:
            if e.step == step:
                return e
        raise KeyError(step)


class MrtAborted(MrtLabError):
    exit_code = 4

    def __init__(self, msg: str, curve: TrainCurve):
        super().__init__(msg)
        self.curve = curve


def sources_per_step(corpus: CorpusSplits, cfg: MrtConfig) -> int:
    mean_len = float(np.mean([len(p.tgt) for p in corpus.train[:1000]]))
    return max(1, int(cfg.token_budget // (cfg.beam * mean_len)))


def evaluate_suite(ckpt: Checkpoint, pairs, suite: MetricSuite, beam: int) -> EvalRecord:
    srcs = [p.src for p in pairs]
    hyps = [cs.hyps[0].tokens for cs in beam_search_batch(ckpt, srcs, beam)]
    scores = suite.score_all(hyps, [p.tgt for p in pairs], srcs)
    return EvalRecord(ckpt.step, hyps, scores)


def train_mrt(ckpt: Checkpoint, corpus: CorpusSplits, suite: MetricSuite, cfg: MrtConfig, rng: Rng,
              metric: Metric | None = None) -> MrtResult:
    """Fine-tune by minimum risk; select the checkpoint where the optimized metric peaks on test."""
    cfg.validate()
    metric = metric or suite.get(cfg.metric)
    ckpt = ckpt.copy()
    start = ckpt.step
    ckpt.step = 0
    mcfg = ckpt.config
    test = corpus.test[: cfg.eval_size]
    probe_nll = corpus.valid[:200]
    opt = Adam(ckpt.params, lr=cfg.lr, warmup=0, schedule="constant")
    order = rng.stream("batches")
    n_src = sources_per_step(corpus, cfg)
    pool = [p for p in corpus.train if cfg.include_bias or p.origin == "clean"]
    if not pool:
        raise ContractError("no training pairs available for MRT")
    curve, evals = TrainCurve(), []
    recent_risk = []

    def do_eval(step: int):
        ckpt.step = step
        rec = evaluate_suite(ckpt, test, suite, cfg.eval_beam)
        if metric.name not in rec.scores:
            rec.scores[metric.name] = metric.normalized_batch(rec.hyps, [p.tgt for p in test], [p.src for p in test])
        with no_grad():
            v = float(nll(ckpt.params.leaves(), mcfg, probe_nll).data)
        means = {k: float(np.mean(v_)) for k, v_ in rec.scores.items()}
        curve.append(CurvePoint(step, means, float(np.mean(recent_risk)) if recent_risk else None, v))
        recent_risk.clear()
        evals.append(rec)
        log.info("mrt step %d: %s", step, " ".join(f"{k}={x:.4f}" for k, x in means.items()))
        return means[metric.name]

    try:
        best_score = do_eval(0)
        best, best_step = ckpt.copy(), 0
        perm, pos = order.permutation(len(pool)), 0
        for step in range(1, cfg.max_steps + 1):
            if pos + n_src > len(perm):
                perm, pos = order.permutation(len(pool)), 0
            pairs = [pool[j] for j in perm[pos : pos + n_src]]
            pos += n_src
            srcs, refs = [p.src for p in pairs], [p.tgt for p in pairs]
            batch = make_risk_batch(ckpt, metric, srcs, refs, cfg.beam, cfg.alpha, cfg.length_norm, cfg.insert_gold)

            def loss_fn(P):
                if cfg.lam == 0.0:
                    return nll(P, mcfg, pairs)
                r = risk_tensor(P, mcfg, batch, cfg.reduction)
                if cfg.lam == 1.0:
                    return r
                return combined_loss(r, nll(P, mcfg, pairs), cfg.lam)

            loss, grads = value_and_grad(loss_fn, ckpt.params)
            if not math.isfinite(loss):
                raise NumericFault(f"MRT loss is {loss} at step {step}")
            opt.step(grads)
            recent_risk.append(float(batch.risks().mean()))
            if step % cfg.eval_interval == 0 or step == cfg.max_steps:
                score = do_eval(step)
                if score > best_score:
                    best_score, best, best_step = score, ckpt.copy(), step
    except (MetricError, NumericFault) as exc:
        raise MrtAborted(f"MRT aborted: {exc}", curve) from exc
    best.step = start + best_step
    best.selection_score, best.selection_metric = best_score, metric.name
    best.extra = {**best.extra, "phase": "mrt", "mrt_config": asdict(cfg), "selected_mrt_step": best_step}
    curve.lr_history = list(opt.lr_history)
    return MrtResult(best, curve, evals, best_step)
