"""Command-line interface: one executable exposing the whole laboratory.

Subcommands: ingest, build-index, train, mine, retrieve, evaluate, fuse,
buckets, shift, gradcheck, pipeline, sweep. Flags of config-driven commands
mirror PipelineConfig keys 1:1; precedence is flag > LED_SEED env var (seed
only) > config file > default. Every produced file is accompanied by the
resolved config digest (a ``.digest`` sidecar, plus ``manifest.json`` for
pipeline runs). Errors print to stderr with an ``error:`` prefix and a
non-zero exit code.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import analysis, gradcheck, retrieval, training
from .data import (
    build_vocab,
    load_collection,
    load_qrels,
    load_queries,
)
from .encoders import DenseParams, LexicalParams, load_params, save_params
from .data import CheckpointMeta
from .sparse_index import build_index, save_index
from .training import (
    PipelineConfig,
    config_digest,
    config_from_mapping,
    parse_config_file,
)

log = logging.getLogger("lexlab")


def _write_digest(path: Path, digest: str) -> None:
    Path(str(path) + ".digest").write_text(digest + "\n")


def _args_digest(args: argparse.Namespace) -> str:
    payload = {k: str(v) for k, v in sorted(vars(args).items()) if k != "func"}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _resolve_config(args: argparse.Namespace) -> PipelineConfig:
    mapping: dict[str, str] = {}
    if getattr(args, "config", None):
        mapping.update(parse_config_file(args.config))
    if "LED_SEED" in os.environ:
        mapping["seed"] = os.environ["LED_SEED"]
    for f in fields(PipelineConfig):
        value = getattr(args, f.name.replace("-", "_"), None)
        if value is not None:
            mapping[f.name] = value
    return config_from_mapping(mapping)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for f in fields(PipelineConfig):
        parser.add_argument(f"--{f.name}", dest=f.name, default=None, metavar="V")


def _load_vocab_for(args, corpus):
    return build_vocab(corpus, args.min_df, args.max_size or None)


def cmd_ingest(args) -> int:
    corpus = load_collection(args.collection)
    vocab = _load_vocab_for(args, corpus)
    print(f"passages\t{corpus.n_docs}")
    print(f"tokens\t{corpus.total_tokens}")
    print(f"avgdl\t{corpus.avgdl:.4f}")
    print(f"vocab\t{vocab.size}")
    if args.queries:
        queries = load_queries(args.queries)
        print(f"queries\t{len(queries)}")
    if args.qrels:
        qrels = load_qrels(args.qrels)
        print(f"qrels\t{len(qrels.entries)}")
    return 0


def cmd_build_index(args) -> int:
    corpus = load_collection(args.collection)
    vocab = _load_vocab_for(args, corpus)
    if args.kind == "bm25":
        from .data import vectorize_corpus

        index = build_index(vectorize_corpus(corpus, vocab))
        save_index(index, args.out)
    else:
        if not args.checkpoint:
            raise ValueError(f"--checkpoint is required for kind {args.kind!r}")
        params, _ = load_params(args.checkpoint)
        index = retrieval.encode_corpus(params, corpus, vocab)
        if args.kind == "dense":
            retrieval.save_dense_index(index, args.out)
        else:
            save_index(index, args.out)
    _write_digest(Path(args.out), _args_digest(args))
    print(f"indexed {corpus.n_docs} passages -> {args.out}")
    return 0


def cmd_mine(args) -> int:
    cfg = _resolve_config(args)
    corpus = load_collection(cfg.collection)
    queries = load_queries(cfg.train_queries)
    qrels = load_qrels(cfg.train_qrels)
    vocab = training.build_vocab_for(cfg, corpus)
    from .data import vectorize_corpus

    doc_tvs = vectorize_corpus(corpus, vocab)
    if args.checkpoint:
        params, _ = load_params(args.checkpoint)
        index = retrieval.encode_corpus(params, corpus, vocab)
        if isinstance(params, DenseParams):
            backend = training.DenseBackend(params, index, vocab)
        else:
            backend = training.LexicalBackend(params, index, vocab)
    else:
        backend = training.Bm25Backend(build_index(doc_tvs), vocab, cfg.bm25_k1, cfg.bm25_b)
    pool = training.mine_negatives(
        backend, queries, qrels, cfg.depth, cfg.warmup_m,
        cfg.seed, source=args.source, sample=not args.no_sample,
    )
    training.save_pool(pool, args.out)
    _write_digest(Path(args.out), config_digest(cfg))
    print(f"mined negatives for {len(pool.by_query)} queries -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    corpus = load_collection(cfg.collection)
    queries = load_queries(cfg.train_queries)
    qrels = load_qrels(cfg.train_qrels)
    vocab = training.build_vocab_for(cfg, corpus)
    pool = training.load_pool(args.pool)
    if args.init:
        init, _ = load_params(args.init)
    elif args.kind == "dense":
        init = DenseParams.init(vocab.size, cfg.dim, cfg.seed)
    else:
        init = LexicalParams.init(vocab.size, cfg.dim, cfg.seed)
    teacher = None
    if args.teacher_scores:
        teacher = training.table_teacher(training.load_teacher_scores(args.teacher_scores))
    elif args.teacher_checkpoint:
        t_params, _ = load_params(args.teacher_checkpoint)
        teacher = training.model_teacher(t_params, vocab, corpus, queries)
    stage_cfg = training.stage_config(
        cfg, args.stage, cfg.strategy, cfg.m, cfg.epochs, cfg.lr
    )
    params, tlog = training.train_stage(
        stage_cfg, vocab, corpus, queries, qrels, pool, init, teacher=teacher
    )
    digest = config_digest(cfg)
    meta = CheckpointMeta(
        kind=params.kind, vocab_size=vocab.size, dim=cfg.dim, stage=args.stage,
        step=tlog.optimizer_steps, seed=cfg.seed, config_digest=digest,
    )
    save_params(params, meta, args.out)
    _write_digest(Path(args.out), digest)
    for epoch, loss in enumerate(tlog.epoch_mean_loss):
        print(f"epoch\t{epoch}\t{loss:.6f}")
    print(f"checkpoint -> {args.out}")
    return 0


def cmd_retrieve(args) -> int:
    cfg = _resolve_config(args)
    corpus = load_collection(cfg.collection)
    queries = load_queries(args.queries or cfg.eval_queries)
    vocab = training.build_vocab_for(cfg, corpus)
    if args.checkpoint:
        params, _ = load_params(args.checkpoint)
        index = retrieval.encode_corpus(params, corpus, vocab)
    else:
        from .data import vectorize_corpus

        params = None
        index = build_index(vectorize_corpus(corpus, vocab))
    k = args.k or min(cfg.run_depth, corpus.n_docs)
    run = retrieval.make_run(
        params, queries, index, vocab, k=k, tag=args.tag,
        bm25_k1=cfg.bm25_k1, bm25_b=cfg.bm25_b,
    )
    retrieval.save_run(run, args.out)
    _write_digest(Path(args.out), config_digest(cfg))
    print(f"run with {len(run.rankings)} queries -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    run = retrieval.load_run(args.run)
    qrels = load_qrels(args.qrels)
    metrics = tuple(args.metrics.split(",")) if args.metrics else retrieval.DEFAULT_METRICS
    report = retrieval.evaluate(run, qrels, metrics, exponential_gain=args.exponential_gain)
    if args.table:
        sys.stdout.write(retrieval.format_report_table(report))
    else:
        sys.stdout.write(retrieval.format_report(report, per_query=args.per_query))
    if args.out:
        Path(args.out).write_text(retrieval.format_report(report, per_query=True))
        _write_digest(Path(args.out), _args_digest(args))
    return 0


def cmd_fuse(args) -> int:
    run_a = retrieval.load_run(args.run_a)
    run_b = retrieval.load_run(args.run_b)
    fused = analysis.ensemble_fuse(run_a, run_b, k=args.k)
    retrieval.save_run(fused.run, args.out)
    _write_digest(Path(args.out), _args_digest(args))
    print(f"fused {len(fused.run.rankings)} queries -> {args.out}")
    return 0


def cmd_buckets(args) -> int:
    reference = retrieval.load_run(args.reference)
    others = {}
    for spec in args.run or []:
        name, _, path = spec.partition("=")
        if not path:
            raise ValueError(f"--run expects name=path, got {spec!r}")
        others[name] = retrieval.load_run(path)
    qrels = load_qrels(args.qrels)
    table = analysis.rank_buckets(reference, others, qrels, depth=args.depth)
    text = analysis.format_bucket_table(table)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
        _write_digest(Path(args.out), _args_digest(args))
    return 0


def cmd_shift(args) -> int:
    sample = analysis.discrepancy_pairs(
        retrieval.load_run(args.lex_run),
        retrieval.load_run(args.den_run),
        retrieval.load_run(args.led_run),
        margin=args.margin,
        depth=args.depth,
    )
    text = analysis.emit_histogram(sample, bins=args.bins)
    sys.stdout.write(text)
    print(f"pairs: lex-biased={len(sample.biased)} lex-unbiased={len(sample.unbiased)}")
    if args.out:
        Path(args.out).write_text(text)
        _write_digest(Path(args.out), _args_digest(args))
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck.run_suite(trials=args.trials, seed=args.seed)
    sys.stdout.write(gradcheck.format_suite_report(report))
    return 0 if report.worst < args.tolerance else 1


def cmd_pipeline(args) -> int:
    cfg = _resolve_config(args)
    out_dir = Path(args.out_dir)
    result = training.run_pipeline(cfg, out_dir=out_dir)
    print(f"config digest {result.digest}")
    for name in sorted(result.checkpoints):
        print(f"checkpoint\t{name}\t{out_dir / 'checkpoints' / (name + '.ckpt')}")
    for name in sorted(result.reports):
        rep = result.reports[name]
        means = "\t".join(f"{m}={rep.results[m].mean:.4f}" for m in rep.results)
        print(f"metrics\t{name}\t{means}")
    return 0


def cmd_sweep(args) -> int:
    if args.key not in {f.name for f in fields(PipelineConfig)}:
        raise ValueError(f"unknown config key {args.key!r}")
    values = args.values.split(",")
    rows = []
    for value in values:
        sweep_args = argparse.Namespace(**vars(args))
        setattr(sweep_args, args.key.replace("-", "_"), value)
        cfg = _resolve_config(sweep_args)
        out_dir = Path(args.out_dir) / f"{args.key}={value}"
        result = training.run_pipeline(cfg, out_dir=out_dir)
        row = {"value": value}
        if "led" in result.reports:
            row.update(
                {m: result.reports["led"].results[m].mean for m in result.reports["led"].results}
            )
        rows.append(row)
    headers = list(rows[0]) if rows else ["value"]
    print("\t".join([args.key, *headers[1:]]))
    lines = []
    for row in rows:
        line = "\t".join(
            [str(row["value"])] + [f"{row[h]:.4f}" for h in headers[1:]]
        )
        print(line)
        lines.append(line)
    table = "\n".join(["\t".join([args.key, *headers[1:]]), *lines]) + "\n"
    out = Path(args.out_dir) / "sweep.tsv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table)
    _write_digest(out, _args_digest(args))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lexlab",
        description="Desk-scale retrieval laboratory: train, mine, retrieve, evaluate, analyze.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load and validate corpus/query/qrels files")
    p.add_argument("--collection", required=True)
    p.add_argument("--queries")
    p.add_argument("--qrels")
    p.add_argument("--min-df", type=int, default=1)
    p.add_argument("--max-size", type=int, default=0)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("build-index", help="build and persist an index")
    p.add_argument("--collection", required=True)
    p.add_argument("--kind", choices=("bm25", "dense", "lexical"), default="bm25")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--min-df", type=int, default=1)
    p.add_argument("--max-size", type=int, default=0)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("mine", help="mine hard negatives with a model or BM25")
    p.add_argument("--config")
    p.add_argument("--checkpoint", help="model checkpoint; omit for BM25")
    p.add_argument("--source", default="bm25", choices=training.SOURCE_TAGS)
    p.add_argument("--no-sample", action="store_true", help="keep the top instead of sampling")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("train", help="train one stage from a negative pool")
    p.add_argument("--config")
    p.add_argument("--kind", choices=("dense", "lexical"), default="dense")
    p.add_argument("--stage", default="warmup")
    p.add_argument("--pool", required=True)
    p.add_argument("--init", help="starting checkpoint (default: fresh init)")
    p.add_argument("--teacher-checkpoint", help="lexical teacher checkpoint")
    p.add_argument("--teacher-scores", help="teacher score file (qid\\tpid\\tscore)")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("retrieve", help="encode queries and write a TREC run")
    p.add_argument("--config")
    p.add_argument("--checkpoint", help="model checkpoint; omit for BM25")
    p.add_argument("--queries")
    p.add_argument("--k", type=int, default=0)
    p.add_argument("--tag", default="lexlab")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("evaluate", help="score a TREC run against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--metrics", help="comma list, e.g. mrr@10,recall@50")
    p.add_argument("--per-query", action="store_true")
    p.add_argument("--table", action="store_true", help="aligned summary table instead of records")
    p.add_argument("--exponential-gain", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("fuse", help="sum-fuse two runs after per-query normalization")
    p.add_argument("--run-a", required=True)
    p.add_argument("--run-b", required=True)
    p.add_argument("--k", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("buckets", help="golden-rank buckets against a reference run")
    p.add_argument("--reference", required=True)
    p.add_argument("--run", action="append", metavar="NAME=PATH")
    p.add_argument("--qrels", required=True)
    p.add_argument("--depth", type=int, default=1000)
    p.add_argument("--out")
    p.set_defaults(func=cmd_buckets)

    p = sub.add_parser("shift", help="score-discrepancy histogram across three runs")
    p.add_argument("--lex-run", required=True)
    p.add_argument("--den-run", required=True)
    p.add_argument("--led-run", required=True)
    p.add_argument("--margin", type=float, default=0.2)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--depth", type=int, default=1000)
    p.add_argument("--out")
    p.set_defaults(func=cmd_shift)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("pipeline", help="run the full two-stage training pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default="artifacts")
    _add_config_flags(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("sweep", help="run the pipeline across values of one config key")
    p.add_argument("--config", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out-dir", default="sweep")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except BrokenPipeError:
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
