"""``mrtlab`` command-line entry point.

Every command that writes files also writes a run manifest next to them.
Exit codes: 0 ok, 2 usage, 3 validation, 4 numeric fault, 5 missing artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import MissingArtifact, MrtLabError, ValidationError

log = logging.getLogger("mrtlab")

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS threads (default: $MRTLAB_THREADS, else all cores)")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, ordered reductions")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _suite_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--lm", help="scoring LM checkpoint stem (adds embed_f1 and gen_f1)")
    p.add_argument("--learned", nargs="*", default=[], help="learned metric stems, in registry order")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="mrtlab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-corpus", parents=[common], help="generate the synthetic parallel corpus")
    p.add_argument("--spec", required=True, help="config file with a [corpus] section")
    p.add_argument("--out", required=True)
    p.add_argument("--bias-fraction", type=float)

    p = sub.add_parser("train-mle", parents=[common], help="train a translation model by MLE")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint stem")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("train-lm", parents=[common], help="train the lead-sentence scoring LM")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint stem")

    p = sub.add_parser("train-metric", parents=[common], help="train a learned regression metric")
    p.add_argument("--corpus", required=True)
    p.add_argument("--table-from", required=True, help="checkpoint whose embeddings the metric uses")
    p.add_argument("--table-name", help="embedding family name (default: E_<checkpoint name>)")
    p.add_argument("--form", choices=("ref_only", "src_and_ref"), default="ref_only")
    p.add_argument("--biased", action="store_true", help="inject the bias-template pseudo-pairs")
    p.add_argument("--name", required=True)
    p.add_argument("--out", required=True, help="metric stem")

    p = sub.add_parser("mrt", parents=[common], help="fine-tune by minimum risk training")
    _suite_args(p)
    p.add_argument("--init", required=True, help="MLE checkpoint stem")
    p.add_argument("--metric", help="registered metric name or ensemble:<spec.json>")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--beam", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--eval-interval", type=int)
    p.add_argument("--eval-size", type=int)
    p.add_argument("--out", required=True, help="run directory")

    p = sub.add_parser("decode", parents=[common], help="beam-decode a corpus split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--limit", type=int)
    p.add_argument("--out", required=True, help="JSONL with src, ref, hyp")

    p = sub.add_parser("score", parents=[common], help="score a JSONL batch with registered metrics")
    _suite_args(p)
    p.add_argument("--input", required=True, help="JSONL records with hyp, ref and optional src")
    p.add_argument("--metric", action="append", help="metric to run (repeatable; default all)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("probe", help="metric robustness probes and diagnostics")
    psub = p.add_subparsers(dest="probe", required=True)
    q = psub.add_parser("universal", parents=[common], help="search a universal translation")
    _suite_args(q)
    q.add_argument("--metric", required=True)
    q.add_argument("--pool-size", type=int)
    q.add_argument("--restarts", type=int)
    q.add_argument("--budget", type=int)
    q.add_argument("--strategy", choices=("best", "first"))
    q.add_argument("--out")
    q = psub.add_parser("suffix", parents=[common], help="search a universal suffix for gen_score recall")
    q.add_argument("--corpus", required=True)
    q.add_argument("--lm", required=True)
    q.add_argument("--split", choices=("valid", "test"), default="valid")
    q.add_argument("--pairs", type=int, default=200)
    q.add_argument("--out")
    q = psub.add_parser("entropy", parents=[common], help="decoded-sentence frequency entropy")
    q.add_argument("--hyp", required=True)
    q.add_argument("--ref", required=True)
    q.add_argument("--out")
    q = psub.add_parser("change-range", parents=[common], help="per-metric change at the optimized metric's peak")
    q.add_argument("--curve", required=True, help="curve CSV")
    q.add_argument("--metric", required=True)
    q.add_argument("--raw-peak", action="store_true", help="pick the raw peak instead of the smoothed one")
    q.add_argument("--out")
    q = psub.add_parser("correlate", parents=[common], help="Pearson matrix between metrics")
    g = q.add_mutually_exclusive_group(required=True)
    g.add_argument("--curves", nargs="+", help="curve CSVs; every row is one observation")
    g.add_argument("--scores", help="JSONL from `mrtlab score`; every line is one observation")
    q.add_argument("--out", help="matrix CSV")
    q = psub.add_parser("top-freq", parents=[common], help="most frequent decoded sentences")
    q.add_argument("--hyp", required=True)
    q.add_argument("--k", type=int, default=5)
    q.add_argument("--out")

    p = sub.add_parser("report", parents=[common], help="consolidate MRT runs into tables")
    p.add_argument("--runs", nargs="+", required=True, help="MRT run directories")
    p.add_argument("--out", required=True)

    p = sub.add_parser("rerun", parents=[common], help="re-execute a run from its manifest")
    p.add_argument("manifest")
    return ap


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _threads(args) -> int:
    if args.deterministic:
        return 1
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("MRTLAB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValidationError("MRTLAB_THREADS", f"not an integer: {env!r}") from None
    return os.cpu_count() or 1


def _apply_threads(n: int) -> None:
    # effective when numpy is first imported after this point, as under the console script
    for var in THREAD_VARS:
        os.environ[var] = str(n)


def semantic_argv(argv) -> list:
    """argv minus execution-only flags, which must not change the run id."""
    out, skip = [], False
    for tok in argv:
        if skip:
            skip = False
            continue
        if tok == "--deterministic":
            continue
        if tok == "--threads":
            skip = True
            continue
        if tok.startswith("--threads="):
            continue
        out.append(tok)
    return out


class Run:
    """A command invocation: resolved config, manifest and output bookkeeping."""

    def __init__(self, args, argv, manifest_path):
        from .config import Config
        from .manifest import RunManifest

        self.args = args
        self.config = Config.load(args.config) if getattr(args, "config", None) else Config()
        if getattr(args, "spec", None):
            self.config = Config.load(args.spec)
        for a in args.set:
            self.config.override(a)
        self.manifest_path = Path(manifest_path) if manifest_path else None
        self.manifest = RunManifest(semantic_argv(argv), {}, args.seed, cwd=os.getcwd(),
                                    execution={"threads": _threads(args), "deterministic": args.deterministic})
        self.outputs: list = []

    def set(self, section: str, key: str, value) -> None:
        if value is not None:
            self.config.set(section, key, value)

    def read(self, path) -> Path:
        return self.manifest.record_input(path)

    def read_corpus(self, d):
        from .corpus import SPLITS, read_corpus

        d = Path(d)
        if not (d / "meta.json").exists():
            raise MissingArtifact(f"corpus {d} not found (no meta.json)")
        self.read(d / "meta.json")
        for s in SPLITS:
            if (d / f"{s}.jsonl").exists():
                self.read(d / f"{s}.jsonl")
        return read_corpus(d)

    def read_stem(self, stem, suffixes=(".mrtl", ".json")) -> Path:
        stem = Path(stem)
        if stem.suffix in suffixes:
            stem = stem.with_suffix("")
        for s in suffixes:
            self.read(stem.with_suffix(s))
        return stem

    def begin(self) -> None:
        self.manifest.config = self.config.resolved()
        if self.manifest_path:
            self.manifest.begin(self.manifest_path)
        else:
            self.manifest.run_id = self.manifest.compute_id()

    @property
    def run_id(self) -> str:
        return self.manifest.run_id

    def wrote(self, *paths) -> None:
        self.outputs.extend(Path(p) for p in paths)

    def write_json(self, obj, path) -> Path:
        from .manifest import dump_json

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        dump_json({"run_id": self.run_id, **obj}, path)
        self.wrote(path)
        return path

    def write_text(self, text: str, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        self.wrote(path)
        return path

    def finish(self, status: str = "ok", error: str = "") -> None:
        if self.manifest_path:
            self.manifest.finish(self.manifest_path, self.outputs, status, error)


def _stem_manifest(out) -> Path:
    out = Path(out)
    if out.suffix in (".json", ".jsonl", ".csv", ".mrtl"):
        out = out.with_suffix("")
    return out.with_name(out.name + ".manifest.json")


def manifest_path_for(args) -> Path | None:
    out = getattr(args, "out", None)
    if out is None or args.cmd == "rerun":
        return None
    if args.cmd in ("gen-corpus", "mrt", "report"):
        return Path(out) / "manifest.json"
    return _stem_manifest(out)


def load_suite(run: Run, corpus, lm_stem, learned_stems):
    from .metrics import EmbeddingTable, EmbedF1, GenScore, LearnedMetric, MetricSuite, SentBleu
    from .model import Checkpoint

    suite = MetricSuite([SentBleu()])
    if lm_stem:
        lm = Checkpoint.load(run.read_stem(lm_stem))
        suite.register(EmbedF1(EmbeddingTable("E_lm", lm.params["tgt_emb"].copy()), name="embed_f1"))
        suite.register(GenScore(lm, "f1", name="gen_f1", tgt_vocab=len(corpus.meta.tgt_vocab)))
    for stem in learned_stems:
        suite.register(LearnedMetric.load(run.read_stem(stem)))
    return suite


def _resolve_metric(run: Run, suite, name: str):
    if name.startswith("ensemble:"):
        run.read(name.split(":", 1)[1])
    return suite.get(name)


def read_sentences(path, keys) -> list:
    """Token lists from a JSONL file, taking the first present key per record."""
    from .errors import ParseError

    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
            for k in keys:
                if k in rec:
                    out.append(tuple(rec[k]))
                    break
            else:
                raise ParseError(f"record has none of {keys}", lineno)
    return out


def _encode(vocab, tokens) -> tuple:
    from .corpus import EOS

    ids, _ = vocab.encode(tokens)
    return tuple(ids) + (EOS,)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_corpus(run: Run) -> None:
    from .corpus import SPLITS, corpus_stats, generate_corpus, write_corpus
    from .numerics import Rng

    a = run.args
    run.read(a.spec)
    run.set("corpus", "bias_fraction", a.bias_fraction)
    spec = run.config.build("corpus")
    run.begin()
    corpus = generate_corpus(spec, Rng(a.seed).stream("corpus"))
    out = Path(a.out)
    write_corpus(corpus, out)
    run.wrote(out / "meta.json", *(out / f"{s}.jsonl" for s in SPLITS))
    run.write_json({"stats": corpus_stats(corpus)}, out / "stats.json")
    print(json.dumps(corpus_stats(corpus)["counts"]))


def cmd_train_mle(run: Run) -> None:
    from .mrt import train_mle
    from .model import new_checkpoint
    from .numerics import Rng
    from .pipeline import model_config_for

    a = run.args
    corpus = run.read_corpus(a.corpus)
    run.set("mle", "epochs", a.epochs)
    mle = run.config.build("mle")
    mcfg = model_config_for(corpus, run.config.build("model"))
    run.begin()
    rng = Rng(a.seed).stream("mt")
    best, curve = train_mle(new_checkpoint(mcfg, rng), corpus, mle, rng)
    best.extra = {**best.extra, "run_id": run.run_id}
    best.save(a.out)
    stem = Path(a.out)
    run.wrote(stem.with_suffix(".mrtl"), stem.with_suffix(".json"))
    run.write_text(curve.to_csv(), stem.with_name(stem.name + ".curve.csv"))
    run.write_text(curve.to_json(), stem.with_name(stem.name + ".curve.json"))
    print(json.dumps({"selection_metric": best.selection_metric, "selection_score": best.selection_score}))


def cmd_train_lm(run: Run) -> None:
    from .metrics import train_gen_lm
    from .numerics import Rng

    a = run.args
    corpus = run.read_corpus(a.corpus)
    spec = run.config.build("lm")
    run.begin()
    lm = train_gen_lm(corpus, spec, Rng(a.seed).stream("lm"))
    lm.extra = {**lm.extra, "run_id": run.run_id}
    lm.save(a.out)
    run.wrote(Path(a.out).with_suffix(".mrtl"), Path(a.out).with_suffix(".json"))


def cmd_train_metric(run: Run) -> None:
    from .metrics import EmbeddingTable, train_learned_metric
    from .model import Checkpoint
    from .numerics import Rng

    a = run.args
    corpus = run.read_corpus(a.corpus)
    ck = Checkpoint.load(run.read_stem(a.table_from))
    name = a.table_name or f"E_{Path(a.table_from).with_suffix('').name}"
    is_lm = ck.extra.get("kind") == "gen_lm"
    table = EmbeddingTable.from_checkpoint(name, ck, with_src=not is_lm)
    pseudo, bias, train = run.config.build("pseudo"), run.config.build("bias"), run.config.build("learned")
    run.begin()
    m = train_learned_metric(corpus, table, a.form, Rng(a.seed).stream("learned").stream(name), pseudo,
                             bias if a.biased else None, train, name=a.name)
    m.provenance = {**m.provenance, "run_id": run.run_id}
    m.save(a.out)
    run.wrote(Path(a.out).with_suffix(".mrtl"), Path(a.out).with_suffix(".json"))


def cmd_mrt(run: Run) -> None:
    from .corpus import EOS
    from .model import Checkpoint
    from .mrt import train_mrt
    from .numerics import Rng

    a = run.args
    corpus = run.read_corpus(a.corpus)
    init = Checkpoint.load(run.read_stem(a.init))
    suite = load_suite(run, corpus, a.lm, a.learned)
    for key, val in (("metric", a.metric), ("lam", a.lam), ("beam", a.beam), ("alpha", a.alpha),
                     ("max_steps", a.steps), ("lr", a.lr), ("eval_interval", a.eval_interval),
                     ("eval_size", a.eval_size)):
        run.set("mrt", key, val)
    cfg = run.config.build("mrt", seed=a.seed)
    metric = _resolve_metric(run, suite, cfg.metric)
    run.begin()
    res = train_mrt(init, corpus, suite, cfg, Rng(a.seed).stream("mrt"), metric=metric)
    out = Path(a.out)
    res.checkpoint.extra = {**res.checkpoint.extra, "run_id": run.run_id}
    res.checkpoint.save(out / "checkpoint")
    run.wrote(out / "checkpoint.mrtl", out / "checkpoint.json")
    run.write_text(res.curve.to_csv(), out / "curve.csv")
    run.write_text(res.curve.to_json(), out / "curve.json")
    vocab, test = corpus.meta.tgt_vocab, corpus.test[: cfg.eval_size]
    rec = res.eval_at(res.selected_step)
    lines = [json.dumps({"src": corpus.meta.src_vocab.decode(p.src[:-1]), "ref": vocab.decode(p.tgt[:-1]),
                         "hyp": vocab.decode([t for t in h if t != EOS])}, separators=(",", ":"))
             for p, h in zip(test, rec.hyps)]
    run.write_text("\n".join(lines) + "\n", out / "decodes.jsonl")
    run.write_json({"metric": metric.name, "selected_step": res.selected_step,
                    "registry": suite.names(), "scores": res.curve.points[
                        [p.step for p in res.curve.points].index(res.selected_step)].scores},
                   out / "result.json")
    print(json.dumps({"metric": metric.name, "selected_step": res.selected_step}))


def cmd_decode(run: Run) -> None:
    from .corpus import EOS
    from .model import Checkpoint, beam_search_batch

    a = run.args
    corpus = run.read_corpus(a.corpus)
    ck = Checkpoint.load(run.read_stem(a.ckpt))
    pairs = corpus.split(a.split)[: a.limit]
    run.begin()
    sets = beam_search_batch(ck, [p.src for p in pairs], a.beam)
    sv, tv = corpus.meta.src_vocab, corpus.meta.tgt_vocab
    lines = [json.dumps({"src": sv.decode(p.src[:-1]), "ref": tv.decode(p.tgt[:-1]),
                         "hyp": tv.decode([t for t in cs.hyps[0].tokens if t != EOS])}, separators=(",", ":"))
             for p, cs in zip(pairs, sets)]
    run.write_text("\n".join(lines) + "\n", a.out)


def cmd_score(run: Run) -> None:
    import numpy as np

    from .errors import ParseError

    a = run.args
    corpus = run.read_corpus(a.corpus)
    suite = load_suite(run, corpus, a.lm, a.learned)
    names = a.metric or suite.names()
    metrics = [_resolve_metric(run, suite, n) for n in names]
    run.read(a.input)
    sv, tv = corpus.meta.src_vocab, corpus.meta.tgt_vocab
    hyps, refs, srcs = [], [], []
    with open(a.input, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
            if "hyp" not in rec or "ref" not in rec:
                raise ParseError("record needs hyp and ref", lineno)
            hyps.append(_encode(tv, rec["hyp"]))
            refs.append(_encode(tv, rec["ref"]))
            srcs.append(_encode(sv, rec["src"]) if "src" in rec else None)
    run.begin()
    src_arg = None if any(s is None for s in srcs) else srcs
    cols = {m.name: m.normalized_batch(hyps, refs, src_arg) for m in metrics}
    lines = [json.dumps({"id": i, **{n: float(v[i]) for n, v in cols.items()}}) for i in range(len(hyps))]
    run.write_text("\n".join(lines) + ("\n" if lines else ""), a.out)
    print(json.dumps({n: float(np.mean(v)) if len(v) else None for n, v in cols.items()}))


def _probe_universal(run: Run) -> None:
    from .numerics import Rng
    from .probe import Pool, search_universal

    a = run.args
    corpus = run.read_corpus(a.corpus)
    suite = load_suite(run, corpus, a.lm, a.learned)
    for key, val in (("metric", a.metric), ("pool_size", a.pool_size), ("restarts", a.restarts),
                     ("budget", a.budget), ("strategy", a.strategy)):
        run.set("probe", key, val)
    cfg = run.config.build("probe", seed=a.seed)
    metric = _resolve_metric(run, suite, cfg.metric)
    run.begin()
    rng = Rng(a.seed).stream("probe")
    idx = rng.stream("pool").permutation(len(corpus.test))[: cfg.pool_size]
    pairs = [corpus.test[int(i)] for i in idx]
    pool = Pool([p.tgt for p in pairs], [p.src for p in pairs])
    cand = search_universal(metric, pool, corpus.meta, cfg, rng.stream("search"))
    doc = {"metric": metric.name, "sentence": corpus.meta.tgt_vocab.decode(cand.tokens), **cand.to_json()}
    _emit(run, doc)


def _probe_suffix(run: Run) -> None:
    from .metrics import GenScore
    from .model import Checkpoint
    from .numerics import Rng
    from .probe import suffix_attack, suffix_deltas

    a = run.args
    corpus = run.read_corpus(a.corpus)
    lm = Checkpoint.load(run.read_stem(a.lm))
    V = len(corpus.meta.tgt_vocab)
    recall, precision = GenScore(lm, "recall", tgt_vocab=V), GenScore(lm, "precision", tgt_vocab=V)
    pairs = [p for p in corpus.split(a.split) if p.origin == "clean"][: a.pairs]
    cfg = run.config.build("suffix", seed=a.seed)
    run.begin()
    res = suffix_attack(recall, pairs, corpus.meta, cfg, Rng(a.seed).stream("suffix"))
    prec = float(suffix_deltas(precision, pairs, res.suffix).mean())
    doc = {"suffix_text": corpus.meta.tgt_vocab.decode(res.suffix), "precision_mean_delta": prec, **res.to_json()}
    _emit(run, doc)


def _probe_entropy(run: Run) -> None:
    from .probe import frequency_entropy

    a = run.args
    hyps = read_sentences(run.read(a.hyp), ("hyp", "tgt"))
    refs = read_sentences(run.read(a.ref), ("ref", "tgt"))
    run.begin()
    eh, er = frequency_entropy(hyps), frequency_entropy(refs)
    _emit(run, {"entropy_hyp": eh, "entropy_ref": er, "ratio": eh / er if er > 0 else None,
                "n_hyp": len(hyps), "n_ref": len(refs)})


def _probe_change_range(run: Run) -> None:
    from .mrt import TrainCurve
    from .probe import change_range

    a = run.args
    curve = TrainCurve.from_csv(run.read(a.curve).read_text())
    run.begin()
    cr = change_range(curve, a.metric, smooth=not a.raw_peak)
    _emit(run, cr.to_json())


def _observations_from_curves(paths):
    from .mrt import TrainCurve

    curves = [TrainCurve.from_csv(Path(p).read_text()) for p in paths]
    names = []
    for c in curves:
        names.extend(n for n in c.metrics() if n not in names)
    names = [n for n in names if all(n in c.metrics() for c in curves)]
    rows = [[p.scores[n] for n in names] for c in curves for p in c.points]
    return names, rows


def _probe_correlate(run: Run) -> None:
    from .probe import pairwise_correlation

    a = run.args
    if a.curves:
        for p in a.curves:
            run.read(p)
        names, rows = _observations_from_curves(a.curves)
    else:
        recs = [json.loads(line) for line in run.read(a.scores).read_text().splitlines() if line.strip()]
        names = [k for k in (recs[0] if recs else {}) if k != "id"]
        rows = [[r[n] for n in names] for r in recs]
    run.begin()
    res = pairwise_correlation(rows, names)
    csv_lines = ["metric," + ",".join(names)]
    for i, n in enumerate(names):
        csv_lines.append(n + "," + ",".join("" if x != x else f"{x:.6f}" for x in res.r[i]))
    text = "\n".join(csv_lines) + "\n"
    if a.out:
        run.write_text(text, a.out)
        run.write_json(res.to_json(), Path(a.out).with_suffix(".json"))
    sys.stdout.write(text)


def _probe_top_freq(run: Run) -> None:
    from .probe import top_frequency_report

    a = run.args
    hyps = read_sentences(run.read(a.hyp), ("hyp", "tgt"))
    run.begin()
    top = top_frequency_report(hyps, a.k)
    _emit(run, {"top": [{"sentence": list(s), "count": c} for s, c in top]})


def _emit(run: Run, doc: dict) -> None:
    if run.args.out:
        run.write_json(doc, run.args.out)
    print(json.dumps({"run_id": run.run_id, **doc} if run.args.out else doc, sort_keys=True))


PROBES = {
    "universal": _probe_universal,
    "suffix": _probe_suffix,
    "entropy": _probe_entropy,
    "change-range": _probe_change_range,
    "correlate": _probe_correlate,
    "top-freq": _probe_top_freq,
}


def cmd_probe(run: Run) -> None:
    PROBES[run.args.probe](run)


def cmd_report(run: Run) -> None:
    from .mrt import TrainCurve
    from .probe import change_range

    a = run.args
    needed = ("manifest.json", "result.json", "curve.csv")
    missing = [r for r in a.runs if not all((Path(r) / f).exists() for f in needed)]
    if missing:
        raise MissingArtifact(f"runs not found: {', '.join(missing)}")
    entries = []
    for r in a.runs:
        d = Path(r)
        # result.json carries the run id; the manifest's timestamps would break rerun digests
        res = json.loads(run.read(d / "result.json").read_text())
        curve = TrainCurve.from_csv(run.read(d / "curve.csv").read_text())
        entries.append((res["run_id"], res["metric"], res.get("registry", []), curve))
    columns = []
    for _, _, registry, curve in entries:
        columns.extend(n for n in registry + curve.metrics() if n not in columns)
    run.begin()
    out = Path(a.out)
    rows, long_lines = [], ["run_id,optimized,step,metric,value"]
    for run_id, metric, _, curve in entries:
        run.write_text(curve.to_csv(), out / "curves" / f"{run_id}.csv")
        cr = change_range(curve, metric)
        rows.append((metric, run_id, cr))
        for p in curve.points:
            for n in curve.metrics():
                long_lines.append(f"{run_id},{metric},{p.step},{n},{p.scores[n]!r}")
    table = ["optimized,run_id,peak_step," + ",".join(columns)]
    for metric, run_id, cr in rows:
        cells = []
        for n in columns:
            v = cr.changes.get(n)
            cells.append("" if v is None else (f"{v:.2f}" + ("abs" if cr.absolute[n] else "%")))
        table.append(f"{metric},{run_id},{cr.peak_step}," + ",".join(cells))
    run.write_text("\n".join(table) + "\n", out / "change_range.csv")
    run.write_text("\n".join(long_lines) + "\n", out / "long.csv")
    run.write_json({"columns": columns, "rows": [cr.to_json() | {"run": rid} for _, rid, cr in rows]},
                   out / "report.json")
    sys.stdout.write("\n".join(table) + "\n")


def cmd_rerun(run: Run) -> int:
    from .manifest import RunManifest

    man = RunManifest.load(run.args.manifest)
    man.verify_inputs()
    argv = list(man.command) + ["--deterministic"]
    if man.cwd:
        os.chdir(man.cwd)
    log.info("rerunning %s: mrtlab %s", man.run_id, " ".join(argv))
    return main(argv)


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-mle": cmd_train_mle,
    "train-lm": cmd_train_lm,
    "train-metric": cmd_train_metric,
    "mrt": cmd_mrt,
    "decode": cmd_decode,
    "score": cmd_score,
    "probe": cmd_probe,
    "report": cmd_report,
    "rerun": cmd_rerun,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    run = None
    try:
        _apply_threads(_threads(args))
        run = Run(args, argv, manifest_path_for(args))
        rc = COMMANDS[args.cmd](run)
        run.finish()
        return int(rc or 0)
    except MrtLabError as exc:
        if run is not None and run.manifest.status == "running":
            run.finish("error", str(exc))
        print(f"mrtlab: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"mrtlab: error: {exc}", file=sys.stderr)
        return MissingArtifact.exit_code


if __name__ == "__main__":
    sys.exit(main())
