"""Command-line interface: ``ookgate <command> ...``.

Exit codes: 0 success, 1 computation/validation error, 2 input error,
3 rejection under ``--strict``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (
    CorpusMismatchWarning,
    Provenance,
    build_calibration,
    critical_value,
    dumps_calibration,
    gate_batch,
    load_calibration,
    score_queries,
)
from .drift import drift_decision
from .errors import EmptySample, InputError, OokgateError
from .ingest import (
    ENV_API_KEY,
    ENV_CHAT_URL,
    ENV_EMBED_URL,
    TEMPLATES,
    DocumentChunk,
    EndpointConfig,
    chunk_corpus,
    embed_texts,
    ids_path,
    read_embeddings,
    read_jsonl,
    read_texts_jsonl,
    sample_chunks,
    synthesize_queries,
    write_embeddings,
    write_jsonl,
)
from .metrics import PoolTooSmall, balanced_eval_scores, roc_points
from .statistics import DEFAULT_K, FISHER_MODES, KINDS, StatisticKind
from .vecstore import CorpusIndex, SimilarityMetric, build_index

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("ookgate")

EXIT_OK, EXIT_ERROR, EXIT_INPUT, EXIT_REJECT = 0, 1, 2, 3


class UsageError(InputError):
    pass


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------


def _require(path, what):
    if path is None:
        raise UsageError(f"missing required option: {what}")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file: {p}")
    return p


def chunks_path(emb_path) -> Path:
    return Path(str(emb_path) + ".chunks.jsonl")


def manifest_path(emb_path) -> Path:
    return Path(str(emb_path) + ".manifest.json")


def load_index(path) -> CorpusIndex:
    path = _require(path, "--index")
    vectors, ids, metric = read_embeddings(path, with_metric=True)
    texts = None
    cp = chunks_path(path)
    if cp.exists():
        by_id = {str(r["id"]): r["text"] for r in read_jsonl(cp)}
        if all(i in by_id for i in ids):
            texts = [by_id[i] for i in ids]
    return build_index(vectors, ids, metric, texts=texts)


def load_vectors(path, what):
    path = _require(path, what)
    vectors, ids = read_embeddings(path)
    if vectors.shape[0] == 0:
        raise UsageError(f"{path} holds no vectors")
    return vectors.astype(np.float64), ids


def _embed_cfg(args) -> EndpointConfig:
    return EndpointConfig.for_embeddings(
        args.embed_url,
        api_key=args.api_key,
        model=args.embed_model,
        batch_size=args.batch_size,
        max_in_flight=args.max_in_flight,
    )


def _chat_cfg(args) -> EndpointConfig:
    return EndpointConfig.for_chat(
        args.chat_url,
        api_key=args.api_key,
        model=args.chat_model,
        temperature=args.temperature,
        max_in_flight=args.max_in_flight,
    )


def _query_input(args, vectors_opt, texts_opt, text_opt=None):
    """Query vectors and ids from an embedding file, a JSONL of texts, or literal texts."""
    vec_path = getattr(args, vectors_opt)
    if vec_path:
        return load_vectors(vec_path, "--" + vectors_opt.replace("_", "-"))
    pairs = []
    tpath = getattr(args, texts_opt)
    if tpath:
        pairs = read_texts_jsonl(_require(tpath, "--" + texts_opt.replace("_", "-")))
    if text_opt and getattr(args, text_opt):
        pairs += [(f"text-{i}", t) for i, t in enumerate(getattr(args, text_opt))]
    if not pairs:
        raise UsageError(f"no queries given (use --{vectors_opt.replace('_', '-')} or --{texts_opt.replace('_', '-')})")
    ids = [p[0] for p in pairs]
    return embed_texts(_embed_cfg(args), [p[1] for p in pairs]), ids


def _kind(args) -> StatisticKind:
    return StatisticKind(kind=args.stat, k=args.k, rank_j=args.rank_j, tau=args.tau, fisher_mode=args.fisher_mode)


def _emit(text, out):
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_index(args) -> int:
    if not args.out:
        raise UsageError("missing required option: --out")
    metric = SimilarityMetric.parse(args.metric)
    chunks = None
    if args.docs:
        docs = read_texts_jsonl(_require(args.docs, "--docs"))
        chunks = chunk_corpus(docs, args.chunk_size, args.overlap)
    elif args.chunks:
        chunks = [
            DocumentChunk(cid, cid, text, (0, len(text))) for cid, text in read_texts_jsonl(_require(args.chunks, "--chunks"))
        ]
    if args.vectors:
        vectors, ids = load_vectors(args.vectors, "--vectors")
        if chunks is not None and [c.chunk_id for c in chunks] != list(ids):
            raise UsageError("ids in --vectors do not match the chunk ids")
    elif chunks is not None:
        if not chunks:
            raise UsageError("no non-empty text to index")
        vectors = embed_texts(_embed_cfg(args), [c.text for c in chunks])
        ids = [c.chunk_id for c in chunks]
    else:
        raise UsageError("give --docs or --chunks (with an endpoint), or --vectors")
    index = build_index(vectors, ids, metric, texts=[c.text for c in chunks] if chunks else None)
    out = Path(args.out)
    write_embeddings(out, vectors, ids, metric)
    # fingerprint of what a later load sees (float32 storage)
    stored = build_index(read_embeddings(out)[0], ids, metric)
    if chunks is not None:
        write_jsonl(
            chunks_path(out),
            ({"id": c.chunk_id, "source": c.source_doc, "span": list(c.char_span), "text": c.text} for c in chunks),
        )
    manifest = {
        "n": index.n,
        "dim": index.dim,
        "metric": metric.value,
        "fingerprint": stored.fingerprint(),
        "ids": ids_path(out).name,
        "chunks": chunks_path(out).name if chunks is not None else None,
    }
    manifest_path(out).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"indexed n={index.n} dim={index.dim} metric={metric.value} -> {out}")
    return EXIT_OK


def _synthesize(args, index: CorpusIndex):
    if index.texts is None:
        raise UsageError("index has no chunk texts (missing .chunks.jsonl sidecar); cannot synthesize")
    chunks = [DocumentChunk(i, i, t, (0, len(t))) for i, t in zip(index.doc_ids, index.texts)]
    chunks = sample_chunks(chunks, args.n_chunks, args.seed)
    return synthesize_queries(_chat_cfg(args), chunks, args.template, args.per_chunk)


def _synthetic_rows(queries):
    rows = []
    for i, q in enumerate(queries):
        row = q.to_dict()
        row["id"] = f"syn-{i}"
        row["text"] = q.question
        rows.append(row)
    return rows


def cmd_synthesize(args) -> int:
    if not args.out:
        raise UsageError("missing required option: --out")
    index = load_index(args.index)
    rows = _synthetic_rows(_synthesize(args, index))
    write_jsonl(args.out, rows)
    print(f"synthesized {len(rows)} queries -> {args.out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    if not args.out:
        raise UsageError("missing required option: --out")
    index = load_index(args.index)
    kind = _kind(args)
    if args.synthesize:
        rows = _synthetic_rows(_synthesize(args, index))
        if args.save_queries:
            write_jsonl(args.save_queries, rows)
        queries = embed_texts(_embed_cfg(args), [r["text"] for r in rows])
        provenance = Provenance.SYNTHETIC
    else:
        queries, _ = _query_input(args, "queries", "query_texts")
        provenance = Provenance.TRUE_IN_KNOWLEDGE
    cal = build_calibration(index, queries, kind, provenance)
    Path(args.out).write_text(dumps_calibration(cal), encoding="utf-8")
    print(f"calibrated kind={cal.kind.kind} k={cal.k} n_cal={cal.n_cal} provenance={cal.provenance.value} -> {args.out}")
    return EXIT_OK


def cmd_gate(args) -> int:
    cal = load_calibration(_require(args.calibration, "--calibration"))
    index = load_index(args.index)
    vectors, ids = _query_input(args, "queries", "texts", "text")
    decisions = gate_batch(cal, index, vectors, args.alpha)
    lines = [
        json.dumps({"query_id": qid, "statistic": d.statistic, "p_value": d.p_value, "reject": d.reject})
        for qid, d in zip(ids, decisions)
    ]
    _emit("".join(line + "\n" for line in lines), args.out)
    if args.strict and any(d.reject for d in decisions):
        return EXIT_REJECT
    return EXIT_OK


def cmd_drift(args) -> int:
    cal = load_calibration(_require(args.calibration, "--calibration"))
    index = load_index(args.index)
    vectors, _ = _query_input(args, "batch", "batch_texts")
    stats, _ = score_queries(cal, index, vectors)
    decision = drift_decision(cal.sorted_stats, stats, args.alpha)
    _emit(json.dumps(decision.to_dict()) + "\n", args.out)
    if args.strict and decision.reject:
        return EXIT_REJECT
    return EXIT_OK


def cmd_eval(args) -> int:
    cal = load_calibration(_require(args.calibration, "--calibration"))
    index = load_index(args.index)
    ik, _ = load_vectors(args.ik, "--ik")
    ook, _ = load_vectors(args.ook, "--ook")
    ik_stats, _ = score_queries(cal, index, ik)
    ook_stats, _ = score_queries(cal, index, ook, check=False)
    try:
        report = balanced_eval_scores(
            ik_stats,
            ook_stats,
            n_per_class=args.n_per_class,
            runs=args.runs,
            seed=args.seed,
            fpr=args.fpr,
            allow_replacement=args.with_replacement,
            kind=cal.kind.label(),
        )
    except PoolTooSmall as exc:
        raise UsageError(f"{exc}; pass --with-replacement to resample") from exc
    if args.out_json:
        Path(args.out_json).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    if args.out_csv:
        Path(args.out_csv).write_text(report.to_csv(), encoding="utf-8")
    m = report.mean
    print(
        f"{report.kind} runs={len(report.runs)} n_per_class={report.n_per_class} "
        f"auroc={m.auroc:.4f} auprc={m.auprc:.4f} tpr@{args.fpr:g}fpr={m.tpr:.4f} der={m.der:.4f}"
    )
    return EXIT_OK


def _load_scores(source: str, cal, index):
    if "=" in source:
        name, path = source.split("=", 1)
    else:
        path = source
        name = Path(source).stem
    path = _require(path, "--source")
    if path.suffix == ".jsonl":
        rows = read_jsonl(path)
        try:
            stats = np.array([float(r["statistic"]) for r in rows], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{path}: every line needs a numeric 'statistic'") from exc
    else:
        vectors, _ = read_embeddings(path)
        stats = score_queries(cal, index, vectors.astype(np.float64), check=False)[0] if vectors.shape[0] else np.empty(0)
    if stats.shape[0] == 0:
        raise UsageError(f"score source {path} is empty")
    return name, stats


def cmd_report(args) -> int:
    cal = load_calibration(_require(args.calibration, "--calibration"))
    index = load_index(args.index) if args.index else None
    if not args.source:
        raise UsageError("give at least one --source NAME=PATH")
    if index is None and any(not s.endswith(".jsonl") for s in args.source):
        raise UsageError("--index is required to score embedding files")
    sources = [_load_scores(s, cal, index) for s in args.source]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    everything = np.concatenate([cal.sorted_stats] + [s for _, s in sources])
    edges = np.histogram_bin_edges(everything, bins=args.bins)
    crit = critical_value(cal, args.alpha)
    with open(out_dir / "histogram.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_type", "source", "bin", "left", "right", "count", "density"])
        for name, stats in [("calibration", cal.sorted_stats)] + sources:
            counts, _ = np.histogram(stats, bins=edges)
            dens, _ = np.histogram(stats, bins=edges, density=True)
            for b in range(args.bins):
                w.writerow(["bin", name, b, repr(float(edges[b])), repr(float(edges[b + 1])), int(counts[b]), repr(float(dens[b]))])
        w.writerow(["critical_value", f"alpha={args.alpha:g}", "", repr(crit), repr(crit), "", ""])
    with open(out_dir / "roc.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "fpr", "tpr", "threshold"])
        for name, stats in sources:
            for fpr, tpr, thr in roc_points(stats, cal.sorted_stats):
                w.writerow([name, repr(fpr), repr(tpr), repr(thr)])
    print(f"wrote {out_dir / 'histogram.csv'} and {out_dir / 'roc.csv'} ({len(sources)} sources, {args.bins} bins)")
    return EXIT_OK


def cmd_serve_mock(args) -> int:
    from .mockserver import MockEmbedder, make_server

    server = make_server(args.host, args.port, embedder=MockEmbedder(dim=args.dim, seed=args.seed))
    host, port = server.server_address[:2]
    print(f"mock endpoints at http://{host}:{port}/v1/embeddings and /v1/chat/completions", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _endpoint_args(p, chat=False):
    g = p.add_argument_group("endpoints")
    g.add_argument("--embed-url", help=f"embeddings endpoint (default ${ENV_EMBED_URL})")
    g.add_argument("--embed-model", default="")
    if chat:
        g.add_argument("--chat-url", help=f"chat-completions endpoint (default ${ENV_CHAT_URL})")
        g.add_argument("--chat-model", default="")
        g.add_argument("--temperature", type=float, default=0.7)
    g.add_argument("--api-key", help=f"bearer token (default ${ENV_API_KEY})")
    g.add_argument("--batch-size", type=int, default=64)
    g.add_argument("--max-in-flight", type=int, default=4)


def _stat_args(p):
    g = p.add_argument_group("statistic")
    g.add_argument("--stat", choices=KINDS, default="energy")
    g.add_argument("--k", type=int, default=DEFAULT_K)
    g.add_argument("--rank-j", type=int, default=None, help="neighbour rank for --stat knn (default k)")
    g.add_argument("--tau", type=float, default=1.0)
    g.add_argument("--fisher-mode", choices=FISHER_MODES, default="literal")


def _synth_args(p):
    p.add_argument("--per-chunk", type=int, default=1)
    p.add_argument("--chunks", dest="n_chunks", type=int, default=None, help="number of chunks to sample")
    p.add_argument("--template", choices=sorted(TEMPLATES), default="textbooks")
    p.add_argument("--seed", type=int, default=0)


def _alpha(value):
    a = float(value)
    if not 0.0 < a < 1.0:
        raise argparse.ArgumentTypeError("alpha must lie in (0, 1)")
    return a


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ookgate", description="Out-of-knowledge query gating for RAG corpora.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="TOML file of option defaults; command-line flags win")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("index", help="chunk and embed a corpus into an embedding file")
    p.add_argument("--docs", help="JSONL of raw documents {id, text}")
    p.add_argument("--chunks", help="JSONL of pre-chunked texts {id, text}")
    p.add_argument("--vectors", help="precomputed embedding file instead of an endpoint")
    p.add_argument("--chunk-size", type=int, default=1000)
    p.add_argument("--overlap", type=int, default=200)
    p.add_argument("--metric", choices=[m.value for m in SimilarityMetric], default="cosine")
    p.add_argument("--out")
    _endpoint_args(p)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("calibrate", help="build the null model from in-knowledge or synthetic queries")
    p.add_argument("--index")
    p.add_argument("--queries", help="embedding file of in-knowledge queries")
    p.add_argument("--query-texts", help="JSONL of in-knowledge query texts (embedded via endpoint)")
    p.add_argument("--synthesize", action="store_true", help="generate synthetic queries from corpus chunks")
    p.add_argument("--save-queries", help="with --synthesize: also write the synthetic queries as JSONL")
    _synth_args(p)
    _stat_args(p)
    p.add_argument("--out")
    _endpoint_args(p, chat=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("synthesize", help="generate synthetic in-knowledge queries")
    p.add_argument("--index")
    _synth_args(p)
    p.add_argument("--out")
    _endpoint_args(p, chat=True)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("gate", help="test individual queries")
    p.add_argument("--calibration")
    p.add_argument("--index")
    p.add_argument("--queries", help="embedding file of queries")
    p.add_argument("--texts", help="JSONL of query texts {id, text}")
    p.add_argument("--text", action="append", help="literal query text (repeatable)")
    p.add_argument("--alpha", type=_alpha, default=0.05)
    p.add_argument("--strict", action="store_true", help="exit 3 if any query is rejected")
    p.add_argument("--out", help="write JSONL here instead of stdout")
    _endpoint_args(p)
    p.set_defaults(func=cmd_gate)

    p = sub.add_parser("drift", help="KS test a batch of queries against the calibration")
    p.add_argument("--calibration")
    p.add_argument("--index")
    p.add_argument("--batch", help="embedding file of batch queries")
    p.add_argument("--batch-texts", help="JSONL of batch query texts")
    p.add_argument("--alpha", type=_alpha, default=0.05)
    p.add_argument("--strict", action="store_true", help="exit 3 on drift")
    p.add_argument("--out")
    _endpoint_args(p)
    p.set_defaults(func=cmd_drift)

    p = sub.add_parser("eval", help="balanced AUROC/AUPRC/TPR/DER evaluation")
    p.add_argument("--calibration")
    p.add_argument("--index")
    p.add_argument("--ik", help="embedding file of in-knowledge queries")
    p.add_argument("--ook", help="embedding file of out-of-knowledge queries")
    p.add_argument("--n-per-class", type=int, default=300)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fpr", type=_alpha, default=0.05)
    p.add_argument("--with-replacement", action="store_true")
    p.add_argument("--out-json")
    p.add_argument("--out-csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="histogram and ROC plot data as CSV")
    p.add_argument("--calibration")
    p.add_argument("--index")
    p.add_argument("--source", action="append", help="NAME=PATH of an embedding file or gate JSONL (repeatable)")
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--alpha", type=_alpha, default=0.05)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve-mock", help="run the deterministic mock embedding/chat endpoints")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_serve_mock)
    return parser


def _apply_config(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    path = Path(known.config)
    if not path.exists():
        raise UsageError(f"no such file: {path}")
    try:
        cfg = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    shared = {k.replace("-", "_"): v for k, v in cfg.items() if not isinstance(v, dict)}
    sub_action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, sp in sub_action.choices.items():
        dests = {a.dest for a in sp._actions}
        section = {k.replace("-", "_"): v for k, v in cfg.get(name, {}).items()}
        merged = {k: v for k, v in {**shared, **section}.items() if k in dests}
        if merged:
            sp.set_defaults(**merged)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except UsageError as exc:
        print(f"ookgate: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="ookgate: %(levelname)s: %(message)s"
    )
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always", CorpusMismatchWarning)
            warnings.showwarning = lambda msg, *a, **k: print(f"ookgate: warning: {msg}", file=sys.stderr)
            return args.func(args)
    except (InputError, FileNotFoundError) as exc:
        print(f"ookgate: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except EmptySample as exc:
        print(f"ookgate: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OokgateError as exc:
        print(f"ookgate: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
