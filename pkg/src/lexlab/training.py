"""Negative mining, pool mixing, the Adam optimizer, stage training, and the
two-stage pipeline (warm-up both retrievers on BM25 negatives, continue the
lexical one on its own negatives, then train the dense student on mixed
negatives under the lexical teacher's rank pairs).

Everything here is seeded and deterministic: the same configuration and data
produce bit-identical checkpoints, pools, and run files.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import (
    CheckpointMeta,
    Corpus,
    Qrels,
    QuerySet,
    TermVector,
    Vocabulary,
    vectorize,
    vectorize_corpus,
)
from .encoders import (
    DenseParams,
    LexicalParams,
    Params,
    TermWeightVector,
    dense_encode,
    lexical_encode,
    lexical_backward,
    dense_backward,
    relevance,
)
from .objectives import (
    CandidateSet,
    combined_loss,
    contrastive_loss,
    filter_false_negatives,
    flops_penalty,
    kl_divergence_loss,
    listnet_loss,
    make_rank_pairs,
    margin_mse_loss,
    rank_consistent_loss,
)
from .retrieval import DenseIndex, dense_search
from .sparse_index import InvertedIndex, Ranking, bm25_search, build_index, sparse_search

log = logging.getLogger(__name__)

STRATEGIES = ("none", "rank-consistent", "margin-mse", "listnet", "kl", "filter")
SOURCE_TAGS = ("bm25", "lex1", "lex2", "den1", "file")

# Learning-rate presets reported for the original full-scale setup, kept as a
# named profile; the desk profile uses the configured lr for every stage.
PAPER_LR_PROFILE = {
    "lex_warmup": 3e-5,
    "lex_continue": 2e-5,
    "den_warmup": 1e-5,
    "led": 5e-6,
}


@dataclass
class TrainConfig:
    """Hyperparameters of a single training stage."""

    seed: int = 7
    dim: int = 16
    lr: float = 1e-2
    batch_size: int = 8
    m: int = 5                 # negatives per query in each candidate set
    depth: int = 200           # mining depth
    reg_weight: float = 1.2    # weight of the teaching loss in the total
    flops_weight: float = 0.0
    epochs: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    stage: str = "warmup"
    strategy: str = "none"
    filter_threshold: float = 0.95
    kl_temperature: float = 1.0
    resample_per_epoch: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r} (choose from {STRATEGIES})")
        for name in ("dim", "lr", "batch_size", "m", "depth", "epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.reg_weight < 0 or self.flops_weight < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class NegativePool:
    """Per-query negatives grouped by the model that mined them."""

    by_query: dict[str, dict[str, list[str]]] = field(default_factory=dict)

    def add(self, qid: str, source: str, pids: list[str]) -> None:
        if source not in SOURCE_TAGS:
            raise ValueError(f"unknown source tag {source!r}")
        seen = set()
        deduped = [p for p in pids if not (p in seen or seen.add(p))]
        self.by_query.setdefault(qid, {})[source] = deduped

    def merged(self, qid: str) -> list[str]:
        """Deduplicated concatenation across sources, insertion order."""
        seen: set[str] = set()
        out: list[str] = []
        for pids in self.by_query.get(qid, {}).values():
            for pid in pids:
                if pid not in seen:
                    seen.add(pid)
                    out.append(pid)
        return out

    def query_ids(self) -> list[str]:
        return list(self.by_query)


def validate_pool(pool: NegativePool, qrels: Qrels) -> None:
    """Exhaustively verify that no pool contains a qrels-positive passage."""
    for qid, sources in pool.by_query.items():
        positives = qrels.positives(qid)
        for source, pids in sources.items():
            leaked = positives.intersection(pids)
            if leaked:
                raise ValueError(
                    f"pool for query {qid!r} (source {source}) contains positives {sorted(leaked)}"
                )


def save_pool(pool: NegativePool, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for qid, sources in pool.by_query.items():
            for source, pids in sources.items():
                f.write(f"{qid}\t{source}\t{','.join(pids)}\n")


def load_pool(path: str | Path) -> NegativePool:
    pool = NegativePool()
    with open(path, encoding="utf-8") as f:
        for line in f:
            qid, source, pids_s = line.rstrip("\n").split("\t")
            pool.add(qid, source, [p for p in pids_s.split(",") if p])
    return pool


class Bm25Backend:
    """Search backend over a raw-count index for warm-up mining."""

    def __init__(self, index: InvertedIndex, vocab: Vocabulary, k1: float = 1.2, b: float = 0.75):
        self.index = index
        self.vocab = vocab
        self.k1 = k1
        self.b = b

    def search(self, text: str, k: int, qid: str = "") -> Ranking:
        return bm25_search(vectorize(text, self.vocab), self.index, k, self.k1, self.b, qid=qid)


class LexicalBackend:
    def __init__(self, params: LexicalParams, index: InvertedIndex, vocab: Vocabulary):
        self.params = params
        self.index = index
        self.vocab = vocab

    def search(self, text: str, k: int, qid: str = "") -> Ranking:
        q_vec, _ = lexical_encode(vectorize(text, self.vocab), self.params)
        return sparse_search(q_vec, self.index, k, qid=qid)


class DenseBackend:
    def __init__(self, params: DenseParams, index: DenseIndex, vocab: Vocabulary):
        self.params = params
        self.index = index
        self.vocab = vocab

    def search(self, text: str, k: int, qid: str = "") -> Ranking:
        q_vec, _ = dense_encode(vectorize(text, self.vocab), self.params)
        return dense_search(q_vec, self.index, k, qid=qid)


def mine_negatives(
    backend,
    queries: QuerySet,
    qrels: Qrels,
    depth: int = 200,
    m: int = 5,
    seed: int = 0,
    source: str = "bm25",
    sample: bool = True,
) -> NegativePool:
    """Retrieve top-`depth` per query, drop qrels positives, keep m negatives.

    With sampling enabled the m survivors are drawn uniformly without
    replacement from a per-query seeded stream; otherwise the top m are kept.
    """
    if depth < m:
        raise ValueError("mining depth must be >= m")
    pool = NegativePool()
    short = 0
    for qid, text in queries.queries.items():
        positives = qrels.positives(qid)
        ranking = backend.search(text, depth, qid=qid)
        eligible = [pid for pid in ranking.pids() if pid not in positives]
        if len(eligible) < m:
            short += 1
            chosen = eligible
        elif sample:
            rng = random.Random(f"{seed}|{source}|{qid}")
            chosen = rng.sample(eligible, m)
        else:
            chosen = eligible[:m]
        pool.add(qid, source, chosen)
    if short:
        log.warning("%d queries retrieved fewer than %d eligible negatives", short, m)
    validate_pool(pool, qrels)
    return pool


def _sample_union(parts: list[tuple[str, list[str]]], m_total: int, rng: random.Random):
    """Dedup the ordered union, sample m_total, and keep source attribution."""
    seen: set[str] = set()
    union: list[str] = []
    origin: dict[str, str] = {}
    for source, pids in parts:
        for pid in pids:
            if pid not in seen:
                seen.add(pid)
                union.append(pid)
                origin[pid] = source
    chosen = rng.sample(union, m_total) if len(union) > m_total else union
    return chosen, origin


def mix_pools(
    lex1: NegativePool,
    lex2: NegativePool,
    den1: NegativePool,
    m_total: int = 32,
    seed: int = 0,
) -> NegativePool:
    """Per query: union of the three sources, dedup, uniform sample of m_total."""
    if not (lex1.by_query.keys() == lex2.by_query.keys() == den1.by_query.keys()):
        raise ValueError("pools to mix must cover the same query set")
    mixed = NegativePool()
    for qid in lex1.by_query:
        parts = [
            ("lex1", lex1.merged(qid)),
            ("lex2", lex2.merged(qid)),
            ("den1", den1.merged(qid)),
        ]
        rng = random.Random(f"{seed}|mix|{qid}")
        chosen, origin = _sample_union(parts, m_total, rng)
        for source in ("lex1", "lex2", "den1"):
            group = [pid for pid in chosen if origin[pid] == source]
            if group:
                mixed.add(qid, source, group)
    return mixed


def subsample_pool(pool: NegativePool, m_total: int, seed: int) -> NegativePool:
    """Uniformly sample m_total negatives per query from a single pool."""
    out = NegativePool()
    for qid, sources in pool.by_query.items():
        parts = [(source, pids) for source, pids in sources.items()]
        rng = random.Random(f"{seed}|self|{qid}")
        chosen, origin = _sample_union(parts, m_total, rng)
        for source in sources:
            group = [pid for pid in chosen if origin[pid] == source]
            if group:
                out.add(qid, source, group)
    return out


@dataclass
class TeacherScoreTable:
    scores: dict[tuple[str, str], float]
    provenance: str  # "lexical-model" | "score-file"


def lexical_teacher_scores(
    params: LexicalParams,
    vocab: Vocabulary,
    query_text: str,
    docs: dict[str, str],
    pids: list[str],
) -> dict[str, float]:
    """Teacher scores for one query over `pids` via encode + dot product."""
    q_vec, _ = lexical_encode(vectorize(query_text, vocab), params)
    out = {}
    for pid in pids:
        p_vec, _ = lexical_encode(vectorize(docs[pid], vocab), params)
        out[pid] = relevance(q_vec, p_vec)
    return out


def save_teacher_scores(table: TeacherScoreTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for (qid, pid), score in sorted(table.scores.items()):
            f.write(f"{qid}\t{pid}\t{score:.12g}\n")


def load_teacher_scores(path: str | Path) -> TeacherScoreTable:
    scores: dict[tuple[str, str], float] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            qid, pid, score_s = line.rstrip("\n").split("\t")
            scores[(qid, pid)] = float(score_s)
    return TeacherScoreTable(scores=scores, provenance="score-file")


def table_teacher(table: TeacherScoreTable):
    """Teacher callable backed by a static score table."""

    def teacher(qid: str, pids: list[str], student_scores: np.ndarray) -> np.ndarray:
        try:
            return np.array([table.scores[(qid, pid)] for pid in pids])
        except KeyError as exc:
            raise ValueError(f"teacher table missing score for query {qid!r}: {exc}") from None

    return teacher


def model_teacher(params: LexicalParams, vocab: Vocabulary, corpus: Corpus, queries: QuerySet):
    """Teacher callable scoring candidates with a frozen lexical model."""
    q_cache: dict[str, object] = {}
    p_cache: dict[str, object] = {}

    def teacher(qid: str, pids: list[str], student_scores: np.ndarray) -> np.ndarray:
        if qid not in q_cache:
            q_cache[qid], _ = lexical_encode(vectorize(queries.queries[qid], vocab), params)
        q_vec = q_cache[qid]
        out = np.zeros(len(pids))
        for i, pid in enumerate(pids):
            if pid not in p_cache:
                p_cache[pid], _ = lexical_encode(vectorize(corpus.docs[pid], vocab), params)
            out[i] = relevance(q_vec, p_cache[pid])
        return out

    return teacher


@dataclass
class AdamState:
    t: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def init(cls, params: Params) -> "AdamState":
        return cls(
            t=0,
            m={k: np.zeros_like(p) for k, p in params.tensors().items()},
            v={k: np.zeros_like(p) for k, p in params.tensors().items()},
        )


def adam_step(
    params: Params,
    grads: Params,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[Params, AdamState]:
    """Standard bias-corrected Adam update, applied in place."""
    state.t += 1
    grad_tensors = grads.tensors()
    for name, p in params.tensors().items():
        g = grad_tensors[name]
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**state.t)
        v_hat = v / (1.0 - beta2**state.t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


@dataclass
class StepRecord:
    epoch: int
    qid: str
    loss: float
    cl: float
    ll: float


@dataclass
class TrainLog:
    stage: str
    epoch_mean_loss: list[float] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    optimizer_steps: int = 0
    skipped_queries: int = 0


def _zero_grads(grads: Params) -> None:
    for t in grads.tensors().values():
        t[:] = 0.0


def _needs_teacher(strategy: str) -> bool:
    return strategy in ("rank-consistent", "margin-mse", "listnet", "kl", "filter")


def train_stage(
    config: TrainConfig,
    vocab: Vocabulary,
    corpus: Corpus,
    queries: QuerySet,
    qrels: Qrels,
    pool: NegativePool,
    init_params: Params,
    teacher=None,
    doc_tvs: dict[str, TermVector] | None = None,
) -> tuple[Params, TrainLog]:
    """Run one training stage and return the updated parameters and its log.

    `teacher` is a callable ``(qid, pids, student_scores) -> scores`` aligned
    with the candidate pid order; it is required by every strategy except
    "none". Per step the loss is contrastive plus, when a teaching strategy is
    active, `reg_weight` times the strategy loss (the filter strategy instead
    drops teacher-flagged false negatives before the contrastive loss).
    """
    if _needs_teacher(config.strategy) and teacher is None:
        raise ValueError(f"strategy {config.strategy!r} requires a teacher")
    params = init_params.copy()
    grads = params.zeros_like()
    state = AdamState.init(params)
    lexical = isinstance(params, LexicalParams)
    if doc_tvs is None:
        doc_tvs = {}
    train_log = TrainLog(stage=config.stage)

    def tv_of(pid: str) -> TermVector:
        if pid not in doc_tvs:
            doc_tvs[pid] = vectorize(corpus.docs[pid], vocab)
        return doc_tvs[pid]

    query_tvs = {qid: vectorize(text, vocab) for qid, text in queries.queries.items()}
    train_qids = []
    for qid in queries.queries:
        if not qrels.positives(qid) or not pool.merged(qid):
            train_log.skipped_queries += 1
            continue
        train_qids.append(qid)
    if train_log.skipped_queries:
        log.warning(
            "stage %s: skipping %d queries without positives or pooled negatives",
            config.stage,
            train_log.skipped_queries,
        )

    upstream_buf = np.zeros(vocab.size) if lexical else None

    for epoch in range(config.epochs):
        order = list(train_qids)
        random.Random(f"{config.seed}|{config.stage}|order|{epoch}").shuffle(order)
        epoch_losses = []
        in_batch = 0
        for qid in order:
            negs = pool.merged(qid)
            if config.resample_per_epoch and len(negs) > config.m:
                rng = random.Random(f"{config.seed}|{config.stage}|resample|{epoch}|{qid}")
                negs = rng.sample(negs, config.m)
            else:
                negs = negs[: config.m]
            pos_pid = min(qrels.positives(qid))
            pids = [pos_pid, *negs]
            q_tv = query_tvs[qid]

            if lexical:
                q_vec, q_trace = lexical_encode(q_tv, params)
                q_dense = np.zeros(vocab.size)
                if not q_trace.empty:
                    q_dense[q_trace.active_terms] = np.log1p(q_trace.pre_activation)
                cand_traces = []
                scores = np.zeros(len(pids))
                for i, pid in enumerate(pids):
                    _, tr = lexical_encode(tv_of(pid), params)
                    cand_traces.append(tr)
                    if len(tr.active_terms):
                        scores[i] = q_dense[tr.active_terms] @ np.log1p(tr.pre_activation)
            else:
                q_vec, q_trace = dense_encode(q_tv, params)
                cand_traces = []
                cand_mat = np.zeros((len(pids), params.dim))
                for i, pid in enumerate(pids):
                    vec, tr = dense_encode(tv_of(pid), params)
                    cand_traces.append(tr)
                    cand_mat[i] = vec
                scores = cand_mat @ q_vec

            t_scores = (
                np.asarray(teacher(qid, pids, scores.copy()), dtype=np.float64)
                if _needs_teacher(config.strategy)
                else None
            )
            cands = CandidateSet(
                qid=qid,
                pos_pid=pos_pid,
                neg_pids=list(negs),
                scores=scores,
                teacher_scores=t_scores,
            )

            loss, grad_scores, cl_val, ll_val = _strategy_loss(config, cands)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at stage {config.stage!r} epoch {epoch} query {qid!r}"
                )

            # Backprop: d loss / d score -> encoder inputs -> parameters.
            if lexical:
                upstream_buf[:] = 0.0
                for i, tr in enumerate(cand_traces):
                    if grad_scores[i] != 0.0 and len(tr.active_terms):
                        upstream_buf[tr.active_terms] += grad_scores[i] * np.log1p(
                            tr.pre_activation
                        )
                lexical_backward(params, q_trace, upstream_buf, into=grads)
                for i, tr in enumerate(cand_traces):
                    if grad_scores[i] != 0.0:
                        lexical_backward(params, tr, q_dense, into=grads, scale=grad_scores[i])
                if config.flops_weight > 0.0:
                    vecs = [_trace_vector(q_trace)] + [_trace_vector(tr) for tr in cand_traces]
                    fl = flops_penalty(vecs, config.flops_weight)
                    loss += fl.loss
                    lexical_backward(params, q_trace, fl.grad[0], into=grads)
                    for i, tr in enumerate(cand_traces):
                        lexical_backward(params, tr, fl.grad[i + 1], into=grads)
            else:
                gq = grad_scores @ cand_mat
                dense_backward(params, q_trace, gq, into=grads)
                for i, tr in enumerate(cand_traces):
                    if grad_scores[i] != 0.0:
                        dense_backward(params, tr, grad_scores[i] * q_vec, into=grads)

            train_log.steps.append(
                StepRecord(epoch=epoch, qid=qid, loss=float(loss), cl=cl_val, ll=ll_val)
            )
            epoch_losses.append(loss)
            in_batch += 1
            if in_batch == config.batch_size:
                _apply_batch(params, grads, state, config, in_batch)
                train_log.optimizer_steps += 1
                in_batch = 0
        if in_batch:
            _apply_batch(params, grads, state, config, in_batch)
            train_log.optimizer_steps += 1
        train_log.epoch_mean_loss.append(
            float(np.mean(epoch_losses)) if epoch_losses else 0.0
        )
    return params, train_log


def _trace_vector(trace):
    if trace.empty or not len(trace.active_terms):
        return TermWeightVector({})
    return TermWeightVector(
        {int(v): float(np.log1p(z)) for v, z in zip(trace.active_terms, trace.pre_activation)}
    )


def _apply_batch(params, grads, state, config: TrainConfig, batch_count: int) -> None:
    for t in grads.tensors().values():
        t /= batch_count
    adam_step(params, grads, state, config.lr, config.beta1, config.beta2, config.adam_eps)
    _zero_grads(grads)


def _strategy_loss(config: TrainConfig, cands: CandidateSet):
    """Return (total loss, d loss / d scores, contrastive part, teaching part)."""
    if config.strategy == "none":
        cl = contrastive_loss(cands)
        return cl.loss, cl.grad, cl.loss, 0.0
    if config.strategy == "filter":
        kept = filter_false_negatives(cands, threshold=config.filter_threshold)
        if not kept.neg_pids:
            return 0.0, np.zeros(len(cands.scores)), 0.0, 0.0
        cl = contrastive_loss(kept)
        grad = np.zeros(len(cands.scores))
        index = {pid: i for i, pid in enumerate(cands.pids)}
        for g, pid in zip(cl.grad, kept.pids):
            grad[index[pid]] = g
        return cl.loss, grad, cl.loss, 0.0
    cl = contrastive_loss(cands)
    if config.strategy == "rank-consistent":
        ll = rank_consistent_loss(cands, make_rank_pairs(cands))
    elif config.strategy == "margin-mse":
        ll = margin_mse_loss(cands, make_rank_pairs(cands))
    elif config.strategy == "listnet":
        ll = listnet_loss(cands)
    elif config.strategy == "kl":
        ll = kl_divergence_loss(cands, temperature=config.kl_temperature)
    else:  # pragma: no cover - guarded by TrainConfig validation
        raise ValueError(f"unknown strategy {config.strategy!r}")
    total = combined_loss(cl, ll, config.reg_weight)
    return total.loss, total.grad, cl.loss, ll.loss


@dataclass
class PipelineConfig:
    """Flat configuration for the whole pipeline; every field is a config key.

    File format is ``key = value`` lines ('#' starts a comment); CLI flags
    override file values, and the LED_SEED environment variable overrides the
    seed from either source.
    """

    collection: str = ""
    train_queries: str = ""
    train_qrels: str = ""
    eval_queries: str = ""
    eval_qrels: str = ""
    seed: int = 7
    dim: int = 16
    lr: float = 1e-2
    lr_profile: str = "desk"      # desk | paper
    lex_warmup_lr: float = 0.0    # per-stage overrides; 0 -> profile value
    lex_continue_lr: float = 0.0
    den_warmup_lr: float = 0.0
    led_lr: float = 0.0
    batch_size: int = 8
    epochs: int = 3
    lex_epochs: int = 0           # 0 -> same as epochs
    den_epochs: int = 0
    led_epochs: int = 0
    warmup_m: int = 5             # negatives per query, warm-up and continue
    m: int = 32                   # negatives per query in the final stage
    depth: int = 200
    mix_depth: int = 0            # mining depth feeding the mixture; 0 -> depth
    reg_weight: float = 1.2
    flops_weight: float = 0.0
    strategy: str = "rank-consistent"
    filter_threshold: float = 0.95
    kl_temperature: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    min_df: int = 1
    max_vocab: int = 0            # 0 -> unlimited
    bm25_k1: float = 1.2
    bm25_b: float = 0.75
    run_depth: int = 1000
    resample_per_epoch: bool = False
    led_negatives: str = "mix"    # mix | self
    teacher_scores_file: str = ""
    threads: int = 1

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.lr_profile not in ("desk", "paper"):
            raise ValueError(f"unknown lr_profile {self.lr_profile!r}")
        if self.led_negatives not in ("mix", "self"):
            raise ValueError(f"unknown led_negatives {self.led_negatives!r}")


def parse_config_file(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def config_from_mapping(mapping: dict[str, str]) -> PipelineConfig:
    """Build a PipelineConfig, rejecting unknown keys and coercing types."""
    by_name = {f.name: f for f in fields(PipelineConfig)}
    kwargs = {}
    for key, raw in mapping.items():
        if key not in by_name:
            raise ValueError(f"unknown config key {key!r}")
        ftype = by_name[key].type
        if ftype == "bool":
            if raw.lower() in ("1", "true", "yes"):
                kwargs[key] = True
            elif raw.lower() in ("0", "false", "no"):
                kwargs[key] = False
            else:
                raise ValueError(f"config key {key!r}: expected a boolean, got {raw!r}")
        elif ftype == "int":
            kwargs[key] = int(raw)
        elif ftype == "float":
            kwargs[key] = float(raw)
        else:
            kwargs[key] = raw
    return PipelineConfig(**kwargs)


def config_digest(cfg: PipelineConfig) -> str:
    canonical = "".join(
        f"{f.name}={getattr(cfg, f.name)!r}\n" for f in sorted(fields(cfg), key=lambda f: f.name)
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def require_config_keys(cfg: PipelineConfig, keys: tuple[str, ...]) -> None:
    for key in keys:
        if not getattr(cfg, key):
            raise ValueError(f"missing config key {key!r}")


_STAGE_LR_KEYS = {
    "lex_warmup": "lex_warmup_lr",
    "lex_continue": "lex_continue_lr",
    "den_warmup": "den_warmup_lr",
    "led": "led_lr",
}


def stage_lr(cfg: PipelineConfig, stage_key: str) -> float:
    override = getattr(cfg, _STAGE_LR_KEYS[stage_key])
    if override:
        return override
    if cfg.lr_profile == "paper":
        return PAPER_LR_PROFILE[stage_key]
    return cfg.lr


def stage_config(cfg: PipelineConfig, stage: str, strategy: str, m: int, epochs: int, lr: float) -> TrainConfig:
    return TrainConfig(
        seed=cfg.seed,
        dim=cfg.dim,
        lr=lr,
        batch_size=cfg.batch_size,
        m=m,
        depth=cfg.depth,
        reg_weight=cfg.reg_weight,
        flops_weight=cfg.flops_weight,
        epochs=epochs,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        adam_eps=cfg.adam_eps,
        stage=stage,
        strategy=strategy,
        filter_threshold=cfg.filter_threshold,
        kl_temperature=cfg.kl_temperature,
        resample_per_epoch=cfg.resample_per_epoch,
    )


@dataclass
class PipelineResult:
    vocab: Vocabulary
    corpus: Corpus
    queries: QuerySet
    qrels: Qrels
    checkpoints: dict[str, Params]
    metas: dict[str, CheckpointMeta]
    pools: dict[str, NegativePool]
    logs: dict[str, TrainLog]
    runs: dict[str, object]
    reports: dict[str, object]
    digest: str


def run_pipeline(cfg: PipelineConfig, out_dir: str | Path | None = None) -> PipelineResult:
    """Run warm-up, continue, and final training, then optionally evaluate.

    Produces the four staged checkpoints (lex1, lex2, den1, led). Every
    mining pass is tagged by its source model and checked against the qrels
    exclusion rule. With `led_negatives = self` the final stage trains on the
    dense model's own negatives instead of the mixture (the plain
    continued-dense baseline when strategy is also "none").
    """
    from . import retrieval
    from .data import load_collection, load_qrels, load_queries

    require_config_keys(cfg, ("collection", "train_queries", "train_qrels"))
    digest = config_digest(cfg)
    corpus = load_collection(cfg.collection)
    queries = load_queries(cfg.train_queries)
    qrels = load_qrels(cfg.train_qrels)
    vocab = build_vocab_for(cfg, corpus)
    doc_tvs = vectorize_corpus(corpus, vocab)

    lex_epochs = cfg.lex_epochs or cfg.epochs
    den_epochs = cfg.den_epochs or cfg.epochs
    led_epochs = cfg.led_epochs or cfg.epochs
    mix_depth = cfg.mix_depth or cfg.depth
    pools: dict[str, NegativePool] = {}
    logs: dict[str, TrainLog] = {}
    checkpoints: dict[str, Params] = {}

    # Warm-up: both retrievers on BM25 negatives.
    bm25_index = build_index(doc_tvs)
    bm25 = Bm25Backend(bm25_index, vocab, cfg.bm25_k1, cfg.bm25_b)
    pools["bm25"] = mine_negatives(
        bm25, queries, qrels, cfg.depth, cfg.warmup_m, cfg.seed, source="bm25"
    )
    lex0 = LexicalParams.init(vocab.size, cfg.dim, cfg.seed)
    den0 = DenseParams.init(vocab.size, cfg.dim, cfg.seed)
    lex1, logs["lex1"] = train_stage(
        stage_config(cfg, "warmup", "none", cfg.warmup_m, lex_epochs, stage_lr(cfg, "lex_warmup")),
        vocab, corpus, queries, qrels, pools["bm25"], lex0, doc_tvs=doc_tvs,
    )
    den1, logs["den1"] = train_stage(
        stage_config(cfg, "warmup", "none", cfg.warmup_m, den_epochs, stage_lr(cfg, "den_warmup")),
        vocab, corpus, queries, qrels, pools["bm25"], den0, doc_tvs=doc_tvs,
    )
    checkpoints["lex1"] = lex1
    checkpoints["den1"] = den1

    # Continue: lexical retriever on its own warm-up negatives.
    lex1_index = retrieval.encode_corpus(lex1, corpus, vocab)
    lex1_backend = LexicalBackend(lex1, lex1_index, vocab)
    pools["lex1"] = mine_negatives(
        lex1_backend, queries, qrels, cfg.depth, cfg.warmup_m, cfg.seed, source="lex1"
    )
    lex2, logs["lex2"] = train_stage(
        stage_config(cfg, "continue", "none", cfg.warmup_m, lex_epochs, stage_lr(cfg, "lex_continue")),
        vocab, corpus, queries, qrels, pools["lex1"], lex1, doc_tvs=doc_tvs,
    )
    checkpoints["lex2"] = lex2

    # Final stage: mixture of full-depth negatives from lex1, lex2, den1.
    lex2_index = retrieval.encode_corpus(lex2, corpus, vocab)
    den1_index = retrieval.encode_corpus(den1, corpus, vocab)
    pools["lex1_top"] = mine_negatives(
        lex1_backend, queries, qrels, mix_depth, mix_depth, cfg.seed, source="lex1", sample=False
    )
    pools["lex2_top"] = mine_negatives(
        LexicalBackend(lex2, lex2_index, vocab), queries, qrels,
        mix_depth, mix_depth, cfg.seed, source="lex2", sample=False,
    )
    pools["den1_top"] = mine_negatives(
        DenseBackend(den1, den1_index, vocab), queries, qrels,
        mix_depth, mix_depth, cfg.seed, source="den1", sample=False,
    )
    pools["mix"] = mix_pools(
        pools["lex1_top"], pools["lex2_top"], pools["den1_top"], cfg.m, cfg.seed
    )
    led_pool = pools["mix"]
    if cfg.led_negatives == "self":
        led_pool = subsample_pool(pools["den1_top"], cfg.m, cfg.seed)
        pools["self"] = led_pool

    teacher = None
    if _needs_teacher(cfg.strategy):
        if cfg.teacher_scores_file:
            teacher = table_teacher(load_teacher_scores(cfg.teacher_scores_file))
        else:
            teacher = model_teacher(lex2, vocab, corpus, queries)
    led, logs["led"] = train_stage(
        stage_config(cfg, "led", cfg.strategy, cfg.m, led_epochs, stage_lr(cfg, "led")),
        vocab, corpus, queries, qrels, led_pool, den1, teacher=teacher, doc_tvs=doc_tvs,
    )
    checkpoints["led"] = led

    metas = {
        name: CheckpointMeta(
            kind=params.kind,
            vocab_size=vocab.size,
            dim=cfg.dim,
            stage={"lex1": "warmup", "den1": "warmup", "lex2": "continue", "led": "led"}[name],
            step=logs[name].optimizer_steps,
            seed=cfg.seed,
            config_digest=digest,
        )
        for name, params in checkpoints.items()
    }

    runs: dict[str, object] = {}
    reports: dict[str, object] = {}
    if cfg.eval_queries and cfg.eval_qrels:
        eval_queries = load_queries(cfg.eval_queries)
        eval_qrels = load_qrels(cfg.eval_qrels)
        k = min(cfg.run_depth, corpus.n_docs)
        indexes = {
            "lex1": lex1_index,
            "lex2": lex2_index,
            "den1": den1_index,
            "led": retrieval.encode_corpus(led, corpus, vocab),
        }
        for name in ("lex1", "lex2", "den1", "led"):
            runs[name] = retrieval.make_run(
                checkpoints[name], eval_queries, indexes[name], vocab, k=k, tag=name
            )
            reports[name] = retrieval.evaluate(runs[name], eval_qrels)

    result = PipelineResult(
        vocab=vocab,
        corpus=corpus,
        queries=queries,
        qrels=qrels,
        checkpoints=checkpoints,
        metas=metas,
        pools=pools,
        logs=logs,
        runs=runs,
        reports=reports,
        digest=digest,
    )
    if out_dir is not None:
        write_pipeline_artifacts(result, cfg, Path(out_dir))
    return result


def build_vocab_for(cfg: PipelineConfig, corpus: Corpus):
    from .data import build_vocab

    return build_vocab(corpus, cfg.min_df, cfg.max_vocab or None)


def write_pipeline_artifacts(result: PipelineResult, cfg: PipelineConfig, out_dir: Path) -> None:
    """Write checkpoints, pools, runs, reports, and a digest manifest."""
    from . import retrieval
    from .encoders import save_params

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "checkpoints").mkdir(exist_ok=True)
    (out_dir / "pools").mkdir(exist_ok=True)
    written: list[Path] = []
    for name, params in result.checkpoints.items():
        path = out_dir / "checkpoints" / f"{name}.ckpt"
        save_params(params, result.metas[name], path)
        written.append(path)
    for name, pool in result.pools.items():
        path = out_dir / "pools" / f"{name}.tsv"
        save_pool(pool, path)
        written.append(path)
    if result.runs:
        (out_dir / "runs").mkdir(exist_ok=True)
        (out_dir / "reports").mkdir(exist_ok=True)
        for name, run in result.runs.items():
            path = out_dir / "runs" / f"{name}.trec"
            retrieval.save_run(run, path)
            written.append(path)
            path = out_dir / "reports" / f"{name}.tsv"
            path.write_text(retrieval.format_report(result.reports[name], per_query=True))
            written.append(path)
    manifest = {
        "config_digest": result.digest,
        "files": {
            str(p.relative_to(out_dir)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(written)
        },
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
