"""Run-level analyses: score fusion of two retrievers, golden-passage rank
bucketing against a reference run, and sampling of query-passage pairs the
lexical and dense models score discrepantly.

All score normalization is per-query min-max over each run's retrieved list;
a constant (or single-entry) list normalizes to 0.5 everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field


from .data import Qrels
from .retrieval import RunFile
from .sparse_index import Ranking

BUCKET_RANGES = (
    ("Top 1", 1, 1),
    ("(1, 5]", 2, 5),
    ("(5, 10]", 6, 10),
    ("(10, 50]", 11, 50),
    ("(50, 100]", 51, 100),
    ("(100, 500]", 101, 500),
    ("(500, 1000]", 501, 1000),
)


def _normalize_entries(entries: list[tuple[str, float]]) -> list[tuple[str, float]]:
    if not entries:
        return []
    scores = [s for _, s in entries]
    lo, hi = min(scores), max(scores)
    if hi == lo:
        return [(pid, 0.5) for pid, _ in entries]
    return [(pid, (s - lo) / (hi - lo)) for pid, s in entries]


def normalize_run(run: RunFile) -> RunFile:
    """Min-max normalize every query's scores; order is preserved exactly."""
    rankings = {
        qid: Ranking(qid=qid, entries=_normalize_entries(r.entries))
        for qid, r in run.rankings.items()
    }
    return RunFile(rankings=rankings, tag=run.tag)


@dataclass
class FusedRun:
    run: RunFile
    components: dict[str, dict[str, tuple[float, float]]]  # qid -> pid -> (a, b)


def ensemble_fuse(run_a: RunFile, run_b: RunFile, k: int = 1000) -> FusedRun:
    """Sum per-query min-max normalized scores over the candidate union.

    A candidate missing from one run contributes 0 from that side. The fused
    list is re-ranked under the usual (score desc, pid asc) tie-break and
    truncated to k.
    """
    shared = set(run_a.rankings) & set(run_b.rankings)
    if not shared:
        raise ValueError("runs to fuse share no query ids")
    norm_a = normalize_run(run_a)
    norm_b = normalize_run(run_b)
    rankings: dict[str, Ranking] = {}
    components: dict[str, dict[str, tuple[float, float]]] = {}
    for qid in sorted(shared):
        a = dict(norm_a.rankings[qid].entries)
        b = dict(norm_b.rankings[qid].entries)
        union = sorted(set(a) | set(b))
        parts = {pid: (a.get(pid, 0.0), b.get(pid, 0.0)) for pid in union}
        fused = sorted(
            ((pid, sa + sb) for pid, (sa, sb) in parts.items()),
            key=lambda e: (-e[1], e[0]),
        )[:k]
        rankings[qid] = Ranking(qid=qid, entries=fused)
        components[qid] = {pid: parts[pid] for pid, _ in fused}
    tag = f"{run_a.tag}+{run_b.tag}.fused"
    return FusedRun(run=RunFile(rankings=rankings, tag=tag), components=components)


@dataclass
class BucketRow:
    label: str
    count: int
    mean_ranks: dict[str, float]


@dataclass
class BucketTable:
    models: list[str]
    rows: list[BucketRow] = field(default_factory=list)


def _golden_rank(run: RunFile, qid: str, pid: str, depth: int) -> int:
    ranking = run.rankings.get(qid)
    if ranking is not None:
        for rank, (cand, _) in enumerate(ranking.entries[:depth], 1):
            if cand == pid:
                return rank
    return depth + 1


def rank_buckets(
    reference: RunFile,
    others: dict[str, RunFile],
    qrels: Qrels,
    depth: int = 1000,
) -> BucketTable:
    """Bucket queries by the reference model's golden-passage rank and report
    each model's mean golden rank per bucket.

    The golden passage is the qrels positive the reference ranks best (ties
    by ascending pid); a golden missing from a run's top-`depth` counts as
    rank depth+1, and queries whose reference rank exceeds `depth` are not
    bucketed.
    """
    models = [reference.tag, *others]
    table = BucketTable(models=models)
    per_query: list[tuple[int, dict[str, int]]] = []
    for qid in qrels.by_query:
        positives = sorted(qrels.positives(qid))
        if not positives or qid not in reference.rankings:
            continue
        golden = min(positives, key=lambda pid: (_golden_rank(reference, qid, pid, depth), pid))
        ref_rank = _golden_rank(reference, qid, golden, depth)
        if ref_rank > depth:
            continue
        ranks = {reference.tag: ref_rank}
        for name, run in others.items():
            ranks[name] = _golden_rank(run, qid, golden, depth)
        per_query.append((ref_rank, ranks))
    for label, lo, hi in BUCKET_RANGES:
        rows = [ranks for ref_rank, ranks in per_query if lo <= ref_rank <= hi]
        if lo > depth:
            continue
        mean_ranks = {
            name: (sum(r[name] for r in rows) / len(rows)) if rows else 0.0
            for name in models
        }
        table.rows.append(BucketRow(label=label, count=len(rows), mean_ranks=mean_ranks))
    return table


def format_bucket_table(table: BucketTable) -> str:
    header = "range\tcount\t" + "\t".join(table.models)
    lines = [header]
    for row in table.rows:
        means = "\t".join(f"{row.mean_ranks[m]:.1f}" for m in table.models)
        lines.append(f"{row.label}\t{row.count}\t{means}")
    return "\n".join(lines) + "\n"


@dataclass
class DiscrepancySample:
    """(qid, pid, lex, den, led) normalized-score tuples for the two strata."""

    biased: list[tuple[str, str, float, float, float]]
    unbiased: list[tuple[str, str, float, float, float]]
    margin: float


def discrepancy_pairs(
    lex_run: RunFile,
    den_run: RunFile,
    led_run: RunFile,
    margin: float = 0.2,
    top_n: int = 100,
    bottom_n: int = 100,
    depth: int = 1000,
) -> DiscrepancySample:
    """Pairs where normalized lexical and dense scores differ by more than
    `margin`, from the lexical run's top stratum and its bottom stratum of
    the retrieved depth. A pid missing from a run scores 0 for that model."""
    norm_lex = normalize_run(lex_run)
    norm_den = normalize_run(den_run)
    norm_led = normalize_run(led_run)
    biased: list[tuple[str, str, float, float, float]] = []
    unbiased: list[tuple[str, str, float, float, float]] = []
    for qid, ranking in norm_lex.rankings.items():
        den_scores = dict(norm_den.rankings[qid].entries) if qid in norm_den.rankings else {}
        led_scores = dict(norm_led.rankings[qid].entries) if qid in norm_led.rankings else {}
        entries = ranking.entries[:depth]
        # The bottom stratum never overlaps the top one on short lists.
        strata = (
            (biased, entries[:top_n]),
            (unbiased, entries[max(top_n, len(entries) - bottom_n):]),
        )
        for out, stratum in strata:
            for pid, lex_score in stratum:
                den_score = den_scores.get(pid, 0.0)
                if abs(lex_score - den_score) > margin:
                    out.append((qid, pid, lex_score, den_score, led_scores.get(pid, 0.0)))
    return DiscrepancySample(biased=biased, unbiased=unbiased, margin=margin)


def histogram_counts(values: list[float], bins: int) -> list[int]:
    """Counts over `bins` equal-width bins of [0, 1]; 1.0 lands in the last."""
    counts = [0] * bins
    for v in values:
        idx = min(int(v * bins), bins - 1)
        counts[idx] += 1
    return counts


def emit_histogram(sample: DiscrepancySample, bins: int = 20) -> str:
    """TSV histogram of normalized scores per model and stratum."""
    lines = ["stratum\tmodel\tbin_lo\tbin_hi\tcount"]
    for stratum_name, rows in (("lex-biased", sample.biased), ("lex-unbiased", sample.unbiased)):
        for model, col in (("lex", 2), ("den", 3), ("led", 4)):
            counts = histogram_counts([r[col] for r in rows], bins)
            for i, c in enumerate(counts):
                lines.append(
                    f"{stratum_name}\t{model}\t{i / bins:.4f}\t{(i + 1) / bins:.4f}\t{c}"
                )
    return "\n".join(lines) + "\n"
