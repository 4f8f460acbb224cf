"""Training losses over per-query candidate sets.

Every loss returns its value together with the exact gradient with respect to
the student scores (flops_penalty, which acts on term-weight vectors, carries
per-vector gradients instead). Softmax-based losses are stabilized by max
subtraction. The rank-consistent hinge penalizes only pairs the student
orders against the teacher; agreement, including exact ties, costs nothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .encoders import TermWeightVector


@dataclass
class CandidateSet:
    """One query's positive and negatives with aligned score arrays.

    Scores follow pid order: index 0 is the positive, then the negatives.
    """

    qid: str
    pos_pid: str
    neg_pids: list[str]
    scores: np.ndarray
    teacher_scores: np.ndarray | None = None

    def __post_init__(self):
        if self.pos_pid in self.neg_pids:
            raise ValueError(f"positive {self.pos_pid!r} listed among negatives")
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.scores) != 1 + len(self.neg_pids):
            raise ValueError("scores do not align with [positive] + negatives")
        if self.teacher_scores is not None:
            self.teacher_scores = np.asarray(self.teacher_scores, dtype=np.float64)
            if len(self.teacher_scores) != len(self.scores):
                raise ValueError("teacher scores do not align with candidates")

    @property
    def pids(self) -> list[str]:
        return [self.pos_pid, *self.neg_pids]


@dataclass
class LossValue:
    loss: float
    grad: np.ndarray | list[dict[int, float]]


@dataclass(frozen=True)
class RankPairSet:
    """Ordered (preferred, other) pid pairs under the teacher's strict order."""

    pairs: list[tuple[str, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max()
    return shifted - math.log(np.exp(shifted).sum())


def _require_teacher(cands: CandidateSet, teacher_scores: np.ndarray | None) -> np.ndarray:
    t = teacher_scores if teacher_scores is not None else cands.teacher_scores
    if t is None:
        raise ValueError("teacher scores required but not provided")
    t = np.asarray(t, dtype=np.float64)
    if len(t) != len(cands.scores):
        raise ValueError("teacher scores do not align with candidates")
    return t


def contrastive_loss(cands: CandidateSet) -> LossValue:
    """-log softmax at the positive over raw dot-product logits."""
    if not cands.neg_pids:
        raise ValueError("contrastive loss needs at least one negative")
    if np.isnan(cands.scores).any():
        raise ValueError(f"NaN score in candidate set for query {cands.qid!r}")
    logp = _log_softmax(cands.scores)
    grad = np.exp(logp)
    grad[0] -= 1.0
    return LossValue(loss=-float(logp[0]), grad=grad)


def make_rank_pairs(cands: CandidateSet, teacher_scores: np.ndarray | None = None) -> RankPairSet:
    """All ordered candidate pairs the teacher strictly prefers; ties yield none."""
    t = _require_teacher(cands, teacher_scores)
    pids = cands.pids
    pairs = [
        (pids[i], pids[j])
        for i in range(len(pids))
        for j in range(len(pids))
        if t[i] > t[j]
    ]
    return RankPairSet(pairs=pairs)


def _pair_indices(cands: CandidateSet, pairs: RankPairSet) -> list[tuple[int, int]]:
    index = {pid: i for i, pid in enumerate(cands.pids)}
    out = []
    for win, lose in pairs.pairs:
        if win not in index or lose not in index:
            raise ValueError(f"rank pair references unknown pid ({win!r}, {lose!r})")
        out.append((index[win], index[lose]))
    return out


def rank_consistent_loss(cands: CandidateSet, pairs: RankPairSet) -> LossValue:
    """Mean hinge on student disagreement: max(0, s(other) - s(preferred)).

    Zero exactly when the student's strict order matches the teacher on every
    pair; the subgradient at an exact tie is zero.
    """
    n = len(cands.scores)
    if not pairs.pairs:
        return LossValue(loss=0.0, grad=np.zeros(n))
    s = cands.scores
    grad = np.zeros(n)
    total = 0.0
    inv = 1.0 / len(pairs)
    for i, j in _pair_indices(cands, pairs):
        margin = s[j] - s[i]
        if margin > 0.0:
            total += margin
            grad[j] += inv
            grad[i] -= inv
    return LossValue(loss=total * inv, grad=grad)


def combined_loss(cl: LossValue, ll: LossValue, weight: float) -> LossValue:
    """cl + weight * ll with linearly combined gradients."""
    if weight < 0:
        raise ValueError("regularization weight must be >= 0")
    return LossValue(loss=cl.loss + weight * ll.loss, grad=cl.grad + weight * ll.grad)


def margin_mse_loss(
    cands: CandidateSet,
    pairs: RankPairSet,
    teacher_scores: np.ndarray | None = None,
) -> LossValue:
    """Mean squared difference between student and teacher pair margins."""
    t = _require_teacher(cands, teacher_scores)
    n = len(cands.scores)
    if not pairs.pairs:
        return LossValue(loss=0.0, grad=np.zeros(n))
    s = cands.scores
    grad = np.zeros(n)
    total = 0.0
    inv = 1.0 / len(pairs)
    for i, j in _pair_indices(cands, pairs):
        diff = (s[i] - s[j]) - (t[i] - t[j])
        total += diff * diff
        grad[i] += 2.0 * diff * inv
        grad[j] -= 2.0 * diff * inv
    return LossValue(loss=total * inv, grad=grad)


def kl_divergence_loss(
    cands: CandidateSet,
    teacher_scores: np.ndarray | None = None,
    temperature: float = 1.0,
) -> LossValue:
    """KL(softmax(teacher/T) || softmax(student/T)) over the candidate list."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    t = _require_teacher(cands, teacher_scores)
    logp = _log_softmax(t / temperature)
    logq = _log_softmax(cands.scores / temperature)
    p = np.exp(logp)
    loss = float((p * (logp - logq)).sum())
    grad = (np.exp(logq) - p) / temperature
    return LossValue(loss=loss, grad=grad)


def listnet_loss(cands: CandidateSet, teacher_scores: np.ndarray | None = None) -> LossValue:
    """Cross-entropy between the teacher's and student's top-1 distributions."""
    t = _require_teacher(cands, teacher_scores)
    logp = _log_softmax(t)
    logq = _log_softmax(cands.scores)
    p = np.exp(logp)
    loss = -float((p * logq).sum())
    grad = np.exp(logq) - p
    return LossValue(loss=loss, grad=grad)


def filter_false_negatives(
    cands: CandidateSet,
    teacher_scores: np.ndarray | None = None,
    threshold: float = 0.95,
) -> CandidateSet:
    """Drop negatives whose teacher score reaches `threshold` x the positive's."""
    t = _require_teacher(cands, teacher_scores)
    cutoff = threshold * t[0]
    keep = [i for i in range(1, len(cands.scores)) if t[i] < cutoff]
    sel = [0, *keep]
    return CandidateSet(
        qid=cands.qid,
        pos_pid=cands.pos_pid,
        neg_pids=[cands.neg_pids[i - 1] for i in keep],
        scores=cands.scores[sel],
        teacher_scores=t[sel],
    )


def flops_penalty(batch: list[TermWeightVector], weight: float) -> LossValue:
    """weight * sum_v (mean over the batch of weight(v))^2.

    Gradients are reported per vector over each vector's stored entries.
    """
    if weight < 0:
        raise ValueError("flops weight must be >= 0")
    if weight == 0.0 or not batch:
        return LossValue(loss=0.0, grad=[{} for _ in batch])
    size = len(batch)
    mean: dict[int, float] = {}
    for vec in batch:
        for term, w in vec.weights.items():
            mean[term] = mean.get(term, 0.0) + w / size
    loss = weight * sum(m * m for m in mean.values())
    grads = [
        {term: weight * 2.0 * mean[term] / size for term in vec.weights}
        for vec in batch
    ]
    return LossValue(loss=loss, grad=grads)
