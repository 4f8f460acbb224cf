"""Corpus encoding, exact dense top-k search, TREC run files, and metrics.

Run files use the standard six-column TREC format. Metrics follow the
official evaluation conventions: binary relevance (grade >= 1) for MRR and
recall, graded linear-gain NDCG with a log2(rank+1) discount, and queries
judged in the qrels but missing from the run scoring zero.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Corpus, FormatError, Qrels, QuerySet, Vocabulary, vectorize
from .encoders import (
    DenseParams,
    LexicalParams,
    Params,
    dense_encode,
    lexical_encode,
    params_digest,
)
from .sparse_index import InvertedIndex, Ranking, bm25_search, build_index, sparse_search

DENSE_INDEX_VERSION = 1
DEFAULT_RUN_DEPTH = 1000


@dataclass
class DenseIndex:
    pids: list[str]  # ascending
    matrix: np.ndarray  # n_docs x d
    digest: str = ""

    @property
    def n_docs(self) -> int:
        return len(self.pids)


@dataclass
class RunFile:
    rankings: dict[str, Ranking]
    tag: str

    def query_ids(self) -> list[str]:
        return list(self.rankings)


def encode_corpus(params: Params, corpus: Corpus, vocab: Vocabulary) -> DenseIndex | InvertedIndex:
    """Encode every passage with a frozen checkpoint, pid-ascending order."""
    digest = params_digest(params)
    pids = sorted(corpus.docs)
    if isinstance(params, DenseParams):
        matrix = np.zeros((len(pids), params.dim))
        for row, pid in enumerate(pids):
            vec, _ = dense_encode(vectorize(corpus.docs[pid], vocab), params)
            matrix[row] = vec
        return DenseIndex(pids=pids, matrix=matrix, digest=digest)
    if isinstance(params, LexicalParams):
        vectors = {
            pid: lexical_encode(vectorize(corpus.docs[pid], vocab), params)[0]
            for pid in pids
        }
        return build_index(vectors, digest=digest)
    raise TypeError(f"unsupported encoder parameters: {type(params).__name__}")


def dense_search(query_vec: np.ndarray, index: DenseIndex, k: int, qid: str = "") -> Ranking:
    """Exact top-k by dot product with the (score desc, pid asc) tie-break."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = index.matrix @ query_vec
    order = np.argsort(-scores, kind="stable")[:k]
    return Ranking(qid=qid, entries=[(index.pids[i], float(scores[i])) for i in order])


def make_run(
    params: Params | None,
    queries: QuerySet,
    index: DenseIndex | InvertedIndex,
    vocab: Vocabulary,
    k: int = DEFAULT_RUN_DEPTH,
    tag: str = "run",
    bm25_k1: float = 1.2,
    bm25_b: float = 0.75,
) -> RunFile:
    """Retrieve top-k for every query; the index type selects the scorer."""
    rankings: dict[str, Ranking] = {}
    for qid, text in queries.queries.items():
        tv = vectorize(text, vocab)
        if isinstance(index, DenseIndex):
            if not isinstance(params, DenseParams):
                raise TypeError("dense index requires dense parameters")
            q_vec, _ = dense_encode(tv, params)
            rankings[qid] = dense_search(q_vec, index, k, qid=qid)
        elif index.semantics == "learned-weight":
            if not isinstance(params, LexicalParams):
                raise TypeError("learned-weight index requires lexical parameters")
            q_vec, _ = lexical_encode(tv, params)
            rankings[qid] = sparse_search(q_vec, index, k, qid=qid)
        else:
            rankings[qid] = bm25_search(tv, index, k, k1=bm25_k1, b=bm25_b, qid=qid)
    return RunFile(rankings=rankings, tag=tag)


def save_run(run: RunFile, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for qid in run.rankings:
            for rank, (pid, score) in enumerate(run.rankings[qid].entries, 1):
                f.write(f"{qid} Q0 {pid} {rank} {score:.6f} {run.tag}\n")


def load_run(path: str | Path) -> RunFile:
    rankings: dict[str, list[tuple[str, float]]] = {}
    tag = "run"
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if len(parts) != 6:
                raise FormatError(f"{path}:{lineno}: expected 6 TREC run columns")
            qid, _, pid, _, score, tag = parts
            rankings.setdefault(qid, []).append((pid, float(score)))
    return RunFile(
        rankings={qid: Ranking(qid=qid, entries=entries) for qid, entries in rankings.items()},
        tag=tag,
    )


def save_dense_index(index: DenseIndex, path: str | Path) -> None:
    header = {
        "version": DENSE_INDEX_VERSION,
        "dim": int(index.matrix.shape[1]),
        "digest": index.digest,
        "pids": index.pids,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        f.write(np.ascontiguousarray(index.matrix, dtype="<f8").tobytes())


def load_dense_index(path: str | Path) -> DenseIndex:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        if header["version"] != DENSE_INDEX_VERSION:
            raise ValueError(f"{path}: unsupported dense index version")
        pids = header["pids"]
        matrix = np.frombuffer(f.read(), dtype="<f8").reshape(len(pids), header["dim"]).copy()
    return DenseIndex(pids=pids, matrix=matrix, digest=header["digest"])


@dataclass
class MetricResult:
    name: str
    per_query: dict[str, float]
    mean: float


@dataclass
class MetricReport:
    results: dict[str, MetricResult] = field(default_factory=dict)

    def mean(self, name: str) -> float:
        return self.results[name].mean


def _ranked_pids(run: RunFile, qid: str) -> list[str]:
    ranking = run.rankings.get(qid)
    return ranking.pids() if ranking is not None else []


def mrr_at_k(run: RunFile, qrels: Qrels, k: int = 10) -> MetricResult:
    """Reciprocal rank of the first relevant passage within the top k, else 0."""
    per_query: dict[str, float] = {}
    for qid in qrels.by_query:
        positives = qrels.positives(qid)
        value = 0.0
        for rank, pid in enumerate(_ranked_pids(run, qid)[:k], 1):
            if pid in positives:
                value = 1.0 / rank
                break
        per_query[qid] = value
    mean = sum(per_query.values()) / len(per_query) if per_query else 0.0
    return MetricResult(name=f"mrr@{k}", per_query=per_query, mean=mean)


def recall_at_k(run: RunFile, qrels: Qrels, k: int) -> MetricResult:
    """Fraction of relevant passages retrieved in the top k; queries without
    relevant passages are excluded from the mean."""
    per_query: dict[str, float] = {}
    for qid in qrels.by_query:
        positives = qrels.positives(qid)
        if not positives:
            continue
        hits = sum(1 for pid in _ranked_pids(run, qid)[:k] if pid in positives)
        per_query[qid] = hits / len(positives)
    mean = sum(per_query.values()) / len(per_query) if per_query else 0.0
    return MetricResult(name=f"recall@{k}", per_query=per_query, mean=mean)


def ndcg_at_k(run: RunFile, qrels: Qrels, k: int = 10, exponential_gain: bool = False) -> MetricResult:
    """Graded NDCG with log2(rank+1) discount; zero-IDCG queries are excluded."""

    def gain(grade: int) -> float:
        return float(2**grade - 1) if exponential_gain else float(grade)

    per_query: dict[str, float] = {}
    for qid in qrels.by_query:
        grades = qrels.grades_for(qid)
        ideal = sorted(grades.values(), reverse=True)[:k]
        idcg = sum(gain(g) / math.log2(r + 1) for r, g in enumerate(ideal, 1))
        if idcg <= 0.0:
            continue
        dcg = sum(
            gain(grades.get(pid, 0)) / math.log2(rank + 1)
            for rank, pid in enumerate(_ranked_pids(run, qid)[:k], 1)
        )
        per_query[qid] = dcg / idcg
    mean = sum(per_query.values()) / len(per_query) if per_query else 0.0
    return MetricResult(name=f"ndcg@{k}", per_query=per_query, mean=mean)


DEFAULT_METRICS = ("mrr@10", "recall@50", "recall@1000", "ndcg@10")


def evaluate(
    run: RunFile,
    qrels: Qrels,
    metrics: tuple[str, ...] | list[str] = DEFAULT_METRICS,
    exponential_gain: bool = False,
) -> MetricReport:
    """Compute the requested metrics; metric names look like 'mrr@10'."""
    if not set(run.rankings) & set(qrels.by_query):
        raise ValueError("run and qrels share no query ids")
    report = MetricReport()
    for spec in metrics:
        name, _, k_s = spec.partition("@")
        try:
            k = int(k_s)
        except ValueError:
            raise ValueError(f"bad metric name {spec!r} (expected '<metric>@<k>')") from None
        if name == "mrr":
            result = mrr_at_k(run, qrels, k)
        elif name == "recall":
            result = recall_at_k(run, qrels, k)
        elif name == "ndcg":
            result = ndcg_at_k(run, qrels, k, exponential_gain=exponential_gain)
        else:
            raise ValueError(f"unknown metric {name!r}")
        report.results[spec] = result
    return report


def format_report(report: MetricReport, per_query: bool = False) -> str:
    """Tool-style records: '<metric>\\t<qid|all>\\t<value>'."""
    lines = []
    for name, result in report.results.items():
        if per_query:
            for qid in sorted(result.per_query):
                lines.append(f"{name}\t{qid}\t{result.per_query[qid]:.6f}")
        lines.append(f"{name}\tall\t{result.mean:.6f}")
    return "\n".join(lines) + "\n"


def format_report_table(report: MetricReport) -> str:
    width = max((len(n) for n in report.results), default=6)
    lines = [f"{'metric'.ljust(width)}  mean"]
    for name, result in report.results.items():
        lines.append(f"{name.ljust(width)}  {result.mean:.4f}")
    return "\n".join(lines) + "\n"
