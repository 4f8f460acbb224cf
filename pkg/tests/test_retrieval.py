import math
from pathlib import Path

import numpy as np
import pytest

from lexlab.data import Corpus, build_vocab, load_qrels, vectorize, vectorize_corpus
from lexlab.encoders import DenseParams, LexicalParams, dense_encode, lexical_encode
from lexlab.retrieval import (
    DenseIndex,
    RunFile,
    dense_search,
    encode_corpus,
    evaluate,
    format_report,
    load_dense_index,
    load_run,
    make_run,
    mrr_at_k,
    ndcg_at_k,
    recall_at_k,
    save_dense_index,
    save_run,
)
from lexlab.sparse_index import InvertedIndex, Ranking
from lexlab.data import QuerySet

FIXTURE = Path(__file__).parent / "data" / "metric_fixture"


def run_from(entries_by_qid, tag="t"):
    return RunFile(
        rankings={
            qid: Ranking(qid=qid, entries=[(pid, float(s)) for pid, s in entries])
            for qid, entries in entries_by_qid.items()
        },
        tag=tag,
    )


class TestEncodeCorpus:
    def test_empty_corpus(self):
        corpus = Corpus.from_docs({})
        vocab = build_vocab(corpus)
        index = encode_corpus(DenseParams.init(0, 4, 0), corpus, vocab)
        assert index.n_docs == 0

    def test_reencode_identical(self):
        corpus = Corpus.from_docs({"d1": "a b", "d2": "b c c"})
        vocab = build_vocab(corpus)
        params = DenseParams.init(vocab.size, 4, seed=2)
        a = encode_corpus(params, corpus, vocab)
        b = encode_corpus(params, corpus, vocab)
        assert a.matrix.tobytes() == b.matrix.tobytes()
        assert a.digest == b.digest

    def test_lexical_index_matches_per_doc_encode(self):
        corpus = Corpus.from_docs({"d1": "a b", "d2": "c a a", "d3": "b"})
        vocab = build_vocab(corpus)
        params = LexicalParams.init(vocab.size, 4, seed=3)
        index = encode_corpus(params, corpus, vocab)
        assert isinstance(index, InvertedIndex)
        for pid in corpus.docs:
            vec, _ = lexical_encode(vectorize(corpus.docs[pid], vocab), params)
            row = index.pids.index(pid)
            got = {
                t: w[list(rows).index(row)]
                for t, (rows, w) in index.postings.items()
                if row in rows
            }
            assert got == pytest.approx(vec.weights)


class TestDenseSearch:
    def test_k_at_least_n_returns_full(self):
        index = DenseIndex(pids=["a", "b"], matrix=np.eye(2))
        ranking = dense_search(np.array([1.0, 0.0]), index, k=10)
        assert len(ranking.entries) == 2

    def test_matching_row_first(self):
        rng = np.random.default_rng(0)
        mat, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        index = DenseIndex(pids=[f"d{i}" for i in range(6)], matrix=mat)
        ranking = dense_search(mat[3], index, k=1)
        assert ranking.pids() == ["d3"]

    def test_matches_brute_force(self):
        rng = np.random.default_rng(12)
        mat = rng.normal(size=(500, 8))
        pids = [f"d{i:04d}" for i in range(500)]
        index = DenseIndex(pids=pids, matrix=mat)
        for _ in range(5):
            q = rng.normal(size=8)
            scores = {pid: float(mat[i] @ q) for i, pid in enumerate(pids)}
            expected = sorted(scores.items(), key=lambda e: (-e[1], e[0]))
            got = dense_search(q, index, k=500)
            assert got.pids() == [pid for pid, _ in expected]

    def test_tie_break_by_pid(self):
        index = DenseIndex(pids=["b", "a", "c"], matrix=np.zeros((3, 2)))
        # Zero scores everywhere: ranking must be ascending pid.
        index.pids = sorted(index.pids)
        ranking = dense_search(np.ones(2), index, k=3)
        assert ranking.pids() == ["a", "b", "c"]


class TestMakeRunAndIO:
    def _setup(self):
        corpus = Corpus.from_docs({f"d{i}": f"w{i % 4} w{(i + 1) % 4}" for i in range(12)})
        vocab = build_vocab(corpus)
        queries = QuerySet(queries={"q1": "w0 w1", "q2": "w2"})
        return corpus, vocab, queries

    def test_run_depth_capped(self):
        corpus, vocab, queries = self._setup()
        params = DenseParams.init(vocab.size, 4, 0)
        index = encode_corpus(params, corpus, vocab)
        run = make_run(params, queries, index, vocab, k=5, tag="x")
        assert all(len(r.entries) <= 5 for r in run.rankings.values())

    def test_deterministic(self):
        corpus, vocab, queries = self._setup()
        params = DenseParams.init(vocab.size, 4, 0)
        index = encode_corpus(params, corpus, vocab)
        a = make_run(params, queries, index, vocab, k=12, tag="x")
        b = make_run(params, queries, index, vocab, k=12, tag="x")
        assert repr(a.rankings) == repr(b.rankings)

    def test_composition_equals_per_query_search(self):
        corpus, vocab, queries = self._setup()
        params = DenseParams.init(vocab.size, 4, 0)
        index = encode_corpus(params, corpus, vocab)
        run = make_run(params, queries, index, vocab, k=12, tag="x")
        for qid, text in queries.queries.items():
            vec, _ = dense_encode(vectorize(text, vocab), params)
            assert run.rankings[qid].entries == dense_search(vec, index, 12, qid=qid).entries

    def test_bm25_run(self):
        corpus, vocab, queries = self._setup()
        from lexlab.sparse_index import build_index

        index = build_index(vectorize_corpus(corpus, vocab))
        run = make_run(None, queries, index, vocab, k=3, tag="bm25")
        assert len(run.rankings) == 2

    def test_run_file_roundtrip(self, tmp_path):
        run = run_from({"q1": [("d1", 1.25), ("d2", 0.5)], "q2": [("d3", 9.0)]}, tag="rt")
        path = tmp_path / "run.trec"
        save_run(run, path)
        text = path.read_text().splitlines()
        assert text[0] == "q1 Q0 d1 1 1.250000 rt"
        loaded = load_run(path)
        assert loaded.tag == "rt"
        assert loaded.rankings["q2"].entries == [("d3", 9.0)]

    def test_dense_index_roundtrip(self, tmp_path):
        index = DenseIndex(pids=["a", "b"], matrix=np.random.default_rng(0).normal(size=(2, 3)), digest="xyz")
        save_dense_index(index, tmp_path / "d.bin")
        loaded = load_dense_index(tmp_path / "d.bin")
        assert loaded.pids == index.pids
        assert loaded.matrix.tobytes() == index.matrix.tobytes()
        assert loaded.digest == "xyz"


class TestMetrics:
    def test_mrr_first_relevant_rank_three(self):
        run = run_from({"q": [("a", 3.0), ("b", 2.0), ("rel", 1.0)]})
        qrels = self._qrels({("q", "rel"): 1})
        assert mrr_at_k(run, qrels, k=10).per_query["q"] == pytest.approx(1 / 3)

    def test_mrr_cutoff(self):
        entries = [(f"f{i}", 100.0 - i) for i in range(10)] + [("rel", 1.0)]
        run = run_from({"q": entries})
        qrels = self._qrels({("q", "rel"): 1})
        assert mrr_at_k(run, qrels, k=10).per_query["q"] == 0.0

    def test_recall_extremes(self):
        run = run_from({"q": [("a", 2.0), ("b", 1.0)]})
        qrels = self._qrels({("q", "a"): 1, ("q", "b"): 1})
        assert recall_at_k(run, qrels, k=2).per_query["q"] == 1.0
        qrels_miss = self._qrels({("q", "zz"): 1})
        assert recall_at_k(run, qrels_miss, k=2).per_query["q"] == 0.0

    def test_ndcg_perfect_ordering(self):
        run = run_from({"q": [("a", 2.0), ("b", 1.0)]})
        qrels = self._qrels({("q", "a"): 3, ("q", "b"): 1})
        assert ndcg_at_k(run, qrels, k=10).per_query["q"] == pytest.approx(1.0)

    def test_ndcg_hand_example(self):
        # Graded qrels {d1: 3, d2: 1}, run [d2, d1]:
        # DCG = 1/log2(2) + 3/log2(3); IDCG = 3/log2(2) + 1/log2(3).
        run = run_from({"q": [("d2", 2.0), ("d1", 1.0)]})
        qrels = self._qrels({("q", "d1"): 3, ("q", "d2"): 1})
        dcg = 1.0 / math.log2(2) + 3.0 / math.log2(3)
        idcg = 3.0 / math.log2(2) + 1.0 / math.log2(3)
        assert ndcg_at_k(run, qrels, k=10).per_query["q"] == pytest.approx(
            dcg / idcg, abs=1e-12
        )
        assert dcg / idcg == pytest.approx(0.7967, abs=5e-5)

    def test_ndcg_single_relevant_at_rank_one(self):
        run = run_from({"q": [("a", 1.0)]})
        for grade in (1, 2, 3):
            qrels = self._qrels({("q", "a"): grade})
            assert ndcg_at_k(run, qrels, k=10).per_query["q"] == pytest.approx(1.0)

    def test_query_missing_from_run_scores_zero(self):
        run = run_from({"q1": [("a", 1.0)]})
        qrels = self._qrels({("q1", "a"): 1, ("q2", "b"): 1})
        result = mrr_at_k(run, qrels, k=10)
        assert result.per_query["q2"] == 0.0
        assert result.mean == pytest.approx(0.5)

    def test_permutations_beyond_k_invariant(self):
        base = [("r", 10.0)] + [(f"f{i}", 5.0 - i * 0.1) for i in range(20)]
        qrels = self._qrels({("q", "r"): 1})
        run_a = run_from({"q": base})
        swapped = base[:10] + base[10:][::-1]
        run_b = run_from({"q": swapped})
        assert (
            mrr_at_k(run_a, qrels, 10).mean == mrr_at_k(run_b, qrels, 10).mean
        )
        assert (
            ndcg_at_k(run_a, qrels, 10).mean == ndcg_at_k(run_b, qrels, 10).mean
        )

    @staticmethod
    def _qrels(entries):
        from lexlab.data import Qrels

        return Qrels.from_entries(entries)


class TestEvaluate:
    def test_fixture_matches_hand_computation(self):
        run = load_run(FIXTURE / "run.trec")
        qrels = load_qrels(FIXTURE / "qrels.txt")
        report = evaluate(run, qrels, ("mrr@10", "recall@50", "recall@1000", "ndcg@10"))
        ndcg_q1 = (1 / math.log2(2) + 3 / math.log2(3)) / (3 / math.log2(2) + 1 / math.log2(3))
        assert report.mean("mrr@10") == pytest.approx((1.0 + 1 / 3 + 0.0) / 3, abs=1e-9)
        assert report.mean("recall@50") == pytest.approx((1.0 + 1.0 + 0.5) / 3, abs=1e-9)
        assert report.mean("recall@1000") == pytest.approx(1.0, abs=1e-9)
        assert report.mean("ndcg@10") == pytest.approx((ndcg_q1 + 0.5 + 0.0) / 3, abs=1e-9)

    def test_all_metrics_in_unit_interval(self):
        run = load_run(FIXTURE / "run.trec")
        qrels = load_qrels(FIXTURE / "qrels.txt")
        report = evaluate(run, qrels)
        for result in report.results.values():
            assert 0.0 <= result.mean <= 1.0
            assert all(0.0 <= v <= 1.0 for v in result.per_query.values())

    def test_mean_is_arithmetic_mean(self):
        run = load_run(FIXTURE / "run.trec")
        qrels = load_qrels(FIXTURE / "qrels.txt")
        report = evaluate(run, qrels)
        for result in report.results.values():
            vals = list(result.per_query.values())
            assert result.mean == pytest.approx(sum(vals) / len(vals), abs=1e-12)

    def test_disjoint_queries_error(self):
        run = run_from({"q9": [("a", 1.0)]})
        from lexlab.data import Qrels

        with pytest.raises(ValueError):
            evaluate(run, Qrels.from_entries({("q1", "a"): 1}))

    def test_report_format_parses(self):
        run = load_run(FIXTURE / "run.trec")
        qrels = load_qrels(FIXTURE / "qrels.txt")
        text = format_report(evaluate(run, qrels), per_query=True)
        for line in text.strip().splitlines():
            metric, qid, value = line.split("\t")
            assert "@" in metric
            float(value)

    def test_unknown_metric_rejected(self):
        run = run_from({"q1": [("a", 1.0)]})
        from lexlab.data import Qrels

        qrels = Qrels.from_entries({("q1", "a"): 1})
        with pytest.raises(ValueError):
            evaluate(run, qrels, ("precision@5",))
