"""Robustness probes and diagnostics for metrics and decoded output.

Sentence identity everywhere in this module is exact token-sequence
equality after special tokens are stripped.
"""

from __future__ import annotations

import math
from collections import Counter, OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .corpus import BOS, EOS, PAD, PERIOD, RESERVED, CorpusMeta, random_fluent
from .errors import ContractError, InputError, ValidationError
from .metrics.base import Metric, strip
from .mrt import TrainCurve
from .numerics import Rng

EDIT_OPS = ("substitute", "insert", "delete")
STRATEGIES = ("best", "first")
SPECIAL_STRINGS = frozenset(RESERVED[i] for i in (BOS, EOS, PAD))


# ---------------------------------------------------------------------------
# universal translation search
# ---------------------------------------------------------------------------


@dataclass
class ProbeConfig:
    metric: str = "learned_biased"
    pool_size: int = 100
    max_len: int = 10
    ops: tuple = EDIT_OPS
    restarts: int = 3
    budget: int = 20  # sweeps per restart; 0 returns the best initial candidate
    seed: int = 0
    strategy: str = "best"
    start: str = "fluent"  # or "pool"
    baseline_samples: int = 1000

    def validate(self) -> None:
        if self.pool_size < 10:
            raise ValidationError("pool_size", "reference pool needs at least 10 sentences")
        if self.budget < 0:
            raise ValidationError("budget", "budget must be >= 0")
        if self.max_len < 1:
            raise ValidationError("max_len", "max_len must be >= 1")
        if self.restarts < 1:
            raise ValidationError("restarts", "restarts must be >= 1")
        if not self.ops or any(op not in EDIT_OPS for op in self.ops):
            raise ValidationError("ops", f"edit ops must be a non-empty subset of {EDIT_OPS}")
        if self.strategy not in STRATEGIES:
            raise ValidationError("strategy", f"strategy must be one of {STRATEGIES}")
        if self.start not in ("fluent", "pool"):
            raise ValidationError("start", "start must be 'fluent' or 'pool'")
        if self.baseline_samples < 0:
            raise ValidationError("baseline_samples", "baseline_samples must be >= 0")


@dataclass
class Pool:
    refs: list
    srcs: list | None = None

    def __post_init__(self):
        if self.srcs is not None and len(self.srcs) != len(self.refs):
            raise InputError("source pool and reference pool differ in length")

    def __len__(self):
        return len(self.refs)


@dataclass
class UniversalCandidate:
    tokens: tuple
    mean_score: float
    per_ref: list
    baseline_percentile: float
    baseline_p99: float
    history: list = field(default_factory=list)  # mean score after each accepted edit
    sweeps: int = 0

    def to_json(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "mean_score": self.mean_score,
            "per_ref": list(self.per_ref),
            "baseline_percentile": self.baseline_percentile,
            "baseline_p99": self.baseline_p99,
            "history": list(self.history),
            "sweeps": self.sweeps,
        }


def _key(score: float, tokens: tuple) -> tuple:
    # larger is better: higher score, then shorter, then lexicographically smaller
    return (score, -len(tokens), tuple(-t for t in tokens))


def pool_scores(metric: Metric, hyps, pool: Pool) -> np.ndarray:
    """Normalized score matrix [len(hyps), len(pool)]."""
    n = len(pool)
    flat_h = [tuple(h) + (EOS,) for h in hyps for _ in range(n)]
    flat_r = list(pool.refs) * len(hyps)
    flat_s = None if pool.srcs is None else list(pool.srcs) * len(hyps)
    return metric.normalized_batch(flat_h, flat_r, flat_s).reshape(len(hyps), n)


def neighbours(tokens: tuple, words, ops, max_len: int) -> list:
    """Every hypothesis one token edit away, without duplicates."""
    out, seen = [], {tokens}
    L = len(tokens)

    def add(c):
        if c not in seen:
            seen.add(c)
            out.append(c)

    if "substitute" in ops:
        for i in range(L):
            for w in words:
                add(tokens[:i] + (w,) + tokens[i + 1:])
    if "insert" in ops and L < max_len:
        for i in range(L + 1):
            for w in words:
                add(tokens[:i] + (w,) + tokens[i:])
    if "delete" in ops and L > 1:
        for i in range(L):
            add(tokens[:i] + tokens[i + 1:])
    return out


def _climb(metric, pool, start, words, cfg, rng):
    tokens = start
    score = float(pool_scores(metric, [tokens], pool).mean())
    history, sweeps = [score], 0
    for _ in range(cfg.budget):
        sweeps += 1
        cands = neighbours(tokens, words, cfg.ops, cfg.max_len)
        if not cands:
            break
        if cfg.strategy == "first":
            cands = [cands[i] for i in rng.permutation(len(cands))]
        means = pool_scores(metric, cands, pool).mean(axis=1)
        if cfg.strategy == "best":
            j = max(range(len(cands)), key=lambda k: _key(float(means[k]), cands[k]))
            improved = means[j] > score
        else:
            better = np.nonzero(means > score)[0]
            improved = len(better) > 0
            j = int(better[0]) if improved else -1
        if not improved:
            break
        tokens, score = cands[j], float(means[j])
        history.append(score)
    return tokens, score, history, sweeps


def baseline_means(metric: Metric, pool: Pool, meta: CorpusMeta, n: int, rng: Rng) -> np.ndarray:
    hyps = [strip(h) for h in random_fluent(meta, n, rng)]
    return pool_scores(metric, hyps, pool).mean(axis=1) if n else np.zeros(0)


def search_universal(metric: Metric, pool: Pool, meta: CorpusMeta, cfg: ProbeConfig | None = None,
                     rng: Rng | None = None) -> UniversalCandidate:
    """Hill-climb one hypothesis to maximize its mean normalized score over the pool.

    The best candidate across restarts is returned; ties go to the shorter
    hypothesis, then to the lexicographically smaller one.
    """
    cfg = cfg or ProbeConfig()
    cfg.validate()
    if len(pool) < 10:
        raise ValidationError("pool_size", "reference pool needs at least 10 sentences")
    rng = rng or Rng(cfg.seed)
    words = tuple(range(PERIOD, len(meta.tgt_vocab)))
    start_rng, climb_rng = rng.stream("start"), rng.stream("climb")
    if cfg.start == "fluent":
        starts = [strip(s)[: cfg.max_len] for s in random_fluent(meta, cfg.restarts, start_rng)]
    else:
        starts = [strip(pool.refs[int(i)])[: cfg.max_len] for i in start_rng.integers(len(pool), size=cfg.restarts)]
    best = None
    for s in starts:
        run = _climb(metric, pool, s, words, cfg, climb_rng)
        if best is None or _key(run[1], run[0]) > _key(best[1], best[0]):
            best = run
    tokens, score, history, sweeps = best
    per_ref = pool_scores(metric, [tokens], pool)[0]
    base = baseline_means(metric, pool, meta, cfg.baseline_samples, rng.stream("baseline"))
    pct = float(100.0 * np.mean(base < score)) if len(base) else math.nan
    p99 = float(np.percentile(base, 99)) if len(base) else math.nan
    return UniversalCandidate(tuple(tokens), float(per_ref.mean()), [float(x) for x in per_ref],
                              pct, p99, history, sweeps)


# ---------------------------------------------------------------------------
# universal suffix attack
# ---------------------------------------------------------------------------


@dataclass
class SuffixConfig:
    max_len: int = 3
    restarts: int = 2
    budget: int = 4
    eps: float = 0.01
    seed: int = 0


@dataclass
class SuffixAttackResult:
    suffix: tuple
    mean_delta: float
    frac_nonneg: float
    deltas: list
    eps: float

    def to_json(self) -> dict:
        return {"suffix": list(self.suffix), "mean_delta": self.mean_delta,
                "frac_nonneg": self.frac_nonneg, "eps": self.eps, "deltas": list(self.deltas)}


def suffix_deltas(metric: Metric, pairs, suffix: tuple) -> np.ndarray:
    """score(gold + suffix, gold) - score(gold, gold) for each pair."""
    if not len(pairs):
        raise InputError("suffix attack needs at least one pair")
    golds = [strip(p.tgt) for p in pairs]
    refs = [g + (EOS,) for g in golds]
    srcs = [p.src for p in pairs]
    base = metric.normalized_batch(refs, refs, srcs)
    if not suffix:
        return np.zeros(len(pairs))
    attacked = [g + tuple(suffix) + (EOS,) for g in golds]
    return metric.normalized_batch(attacked, refs, srcs) - base


def suffix_attack(metric: Metric, pairs, meta: CorpusMeta, cfg: SuffixConfig | None = None,
                  rng: Rng | None = None) -> SuffixAttackResult:
    """Search a non-empty suffix maximizing the mean score change when appended to gold text."""
    cfg = cfg or SuffixConfig()
    if not len(pairs):
        raise InputError("suffix attack needs at least one pair")
    if getattr(metric, "direction", "recall") != "recall":
        raise ContractError(f"suffix attack expects a recall-direction metric, got {metric.direction}")
    rng = rng or Rng(cfg.seed)
    words = tuple(range(PERIOD, len(meta.tgt_vocab)))
    cache = {}

    def mean_of(s):
        if s not in cache:
            cache[s] = float(suffix_deltas(metric, pairs, s).mean())
        return cache[s]

    best = None
    start_rng = rng.stream("start")
    for _ in range(cfg.restarts):
        cur = (int(words[int(start_rng.integers(len(words)))]),)
        cur_v = mean_of(cur)
        for _ in range(cfg.budget):
            cands = [c for c in neighbours(cur, words, EDIT_OPS, cfg.max_len) if c]
            vals = [mean_of(c) for c in cands]
            j = max(range(len(cands)), key=lambda k: _key(vals[k], cands[k]))
            if vals[j] <= cur_v:
                break
            cur, cur_v = cands[j], vals[j]
        if best is None or _key(cur_v, cur) > _key(best[1], best[0]):
            best = (cur, cur_v)
    d = suffix_deltas(metric, pairs, best[0])
    return SuffixAttackResult(best[0], float(d.mean()), float(np.mean(d >= -cfg.eps)),
                              [float(x) for x in d], cfg.eps)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def _sentences(seqs) -> list:
    """Token-id or token-string sequences with special tokens removed."""
    out = []
    for s in seqs:
        if any(isinstance(t, str) for t in s):
            out.append(tuple(t for t in s if t not in SPECIAL_STRINGS))
        else:
            out.append(strip(s))
    return out


def frequency_entropy(sentences) -> float:
    """Shannon entropy in bits of the empirical distribution over sentences."""
    if not len(sentences):
        raise ContractError("entropy of an empty list is undefined")
    counts = np.array(list(Counter(_sentences(sentences)).values()), dtype=np.float64)
    p = counts / counts.sum()
    return float(max(0.0, -(p * np.log2(p)).sum()))


def top_frequency_report(sentences, k: int) -> list:
    """Top-k (sentence, count) pairs; ties are broken lexicographically."""
    if k < 1:
        raise ContractError("k must be >= 1")
    counts = Counter(_sentences(sentences))
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:k]


@dataclass
class ChangeRange:
    metric: str
    peak_step: int
    changes: "OrderedDict[str, float]"
    absolute: "OrderedDict[str, bool]"  # True where the baseline was 0 and the change is absolute

    def row(self, names=None) -> list:
        return [self.changes.get(n, math.nan) for n in (names or list(self.changes))]

    def to_json(self) -> dict:
        return {"metric": self.metric, "peak_step": self.peak_step,
                "changes": dict(self.changes), "absolute": dict(self.absolute)}


def smoothed(values) -> np.ndarray:
    """Three-point centred moving average; the ends average their available neighbours."""
    v = np.asarray(values, dtype=np.float64)
    out = np.empty_like(v)
    for i in range(len(v)):
        out[i] = v[max(0, i - 1): i + 2].mean()
    return out


def relative_change(value: float, baseline: float) -> tuple[float, bool]:
    if baseline == 0:
        return float(value - baseline), True
    return float((value - baseline) / abs(baseline) * 100.0), False


def change_range(curve: TrainCurve, metric: str, baseline: dict | None = None, smooth: bool = True) -> ChangeRange:
    """Percent change of every metric at the step where ``metric`` peaks.

    Peaks are picked on the smoothed curve among steps whose raw value is not
    below the baseline, so the optimized metric's own change is never negative.
    The earliest step wins ties.
    """
    if not curve.points:
        raise ContractError("empty curve")
    if metric not in curve.metrics():
        raise ContractError(f"metric {metric!r} not in curve")
    base = dict(baseline) if baseline is not None else dict(curve.points[0].scores)
    raw = np.asarray(curve.series(metric), dtype=np.float64)
    score = smoothed(raw) if smooth else raw
    ok = raw >= base[metric]
    if not ok.any():
        ok[:] = True
    masked = np.where(ok, score, -np.inf)
    k = int(np.argmax(masked))
    point = curve.points[k]
    changes, absolute = OrderedDict(), OrderedDict()
    for name in curve.metrics():
        changes[name], absolute[name] = relative_change(point.scores[name], base[name])
    return ChangeRange(metric, point.step, changes, absolute)


@dataclass
class CorrelationResult:
    names: list
    r: np.ndarray
    p: np.ndarray
    n: int

    def to_json(self) -> dict:
        def clean(m):
            return [[None if not np.isfinite(x) else float(x) for x in row] for row in m]
        return {"names": list(self.names), "n": self.n, "r": clean(self.r), "p": clean(self.p)}

    def get(self, a: str, b: str) -> float:
        return float(self.r[self.names.index(a), self.names.index(b)])


def pearson(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        return math.nan
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def pearson_pvalue(r: float, n: int) -> float:
    """Two-sided p-value from the t approximation with n - 2 degrees of freedom."""
    if not math.isfinite(r) or n < 3:
        return math.nan
    if abs(r) >= 1.0:
        return 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return float(2.0 * stats.t.sf(abs(t), n - 2))


def pairwise_correlation(matrix, names=None) -> CorrelationResult:
    """Pearson matrix over the columns of an observations x metrics array.

    A constant column yields NaN (missing) entries, including its diagonal.
    """
    X = np.asarray(matrix, dtype=np.float64)
    if X.ndim != 2:
        raise ContractError("score matrix must be two-dimensional")
    n, m = X.shape
    if n < 3:
        raise ContractError("correlation needs at least 3 observations")
    names = list(names) if names is not None else [f"m{i}" for i in range(m)]
    if len(names) != m:
        raise ContractError("names and columns differ in length")
    R, Pv = np.full((m, m), math.nan), np.full((m, m), math.nan)
    for i in range(m):
        for j in range(i, m):
            r = pearson(X[:, i], X[:, j])
            if i == j and math.isfinite(r):
                r = 1.0
            R[i, j] = R[j, i] = r
            Pv[i, j] = Pv[j, i] = pearson_pvalue(r, n)
    return CorrelationResult(names, R, Pv, n)


@dataclass
class DiagnosticsReport:
    entropy_hyp: float
    entropy_ref: float
    change: ChangeRange | None
    correlation: CorrelationResult | None
    top: list

    @property
    def entropy_ratio(self) -> float:
        return self.entropy_hyp / self.entropy_ref if self.entropy_ref > 0 else math.nan

    def to_json(self, vocab=None) -> dict:
        def text(s):
            return vocab.decode(s) if vocab is not None else list(s)
        return {
            "entropy_hyp": self.entropy_hyp,
            "entropy_ref": self.entropy_ref,
            "entropy_ratio": self.entropy_ratio,
            "change_range": self.change.to_json() if self.change else None,
            "correlation": self.correlation.to_json() if self.correlation else None,
            "top": [{"sentence": text(s), "count": c} for s, c in self.top],
        }


def diagnostics(hyps, refs, curve: TrainCurve | None = None, metric: str | None = None,
                score_matrix=None, names=None, k: int = 5) -> DiagnosticsReport:
    change = change_range(curve, metric) if curve is not None and metric else None
    corr = pairwise_correlation(score_matrix, names) if score_matrix is not None else None
    return DiagnosticsReport(frequency_entropy(hyps), frequency_entropy(refs), change, corr,
                             top_frequency_report(hyps, k))
