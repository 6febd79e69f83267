"""Answer metrics (EM, token F1, cover-EM accuracy) and retrieval metrics
(Recall@K / Precision@K under the answer-containment rule).

Normalization lowercases, maps punctuation to spaces, removes the articles
a/an/the and collapses whitespace; all metrics operate on normalized text,
so pre-normalized inputs score identically. A retrieved passage counts as
correct when some normalized gold answer is a substring of its normalized
title-plus-text. Multi-hop retrievals are pooled hop-major then rank-major,
deduplicated keeping the first occurrence.
"""

from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .errors import EmptyGolds, UnknownId
from .trajectory import Example, Passage, Trajectory

_PUNCT_TO_SPACE = {ord(c): " " for c in string.punctuation}
_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation to spaces, drop articles, collapse spaces."""
    text = text.lower().translate(_PUNCT_TO_SPACE)
    text = _ARTICLE_RE.sub(" ", text)
    return " ".join(text.split())


def _check_golds(golds: Sequence[str]) -> None:
    if not golds:
        raise EmptyGolds("metric called with no gold answers")


def exact_match(pred: str, golds: Sequence[str]) -> float:
    """1 iff the normalized prediction equals some normalized gold."""
    _check_golds(golds)
    norm = normalize_answer(pred)
    return 1.0 if any(norm == normalize_answer(g) for g in golds) else 0.0


def token_f1(pred: str, golds: Sequence[str]) -> float:
    """Max over golds of the harmonic mean of token precision and recall."""
    _check_golds(golds)
    pred_tokens = normalize_answer(pred).split()

    def single(gold: str) -> float:
        gold_tokens = normalize_answer(gold).split()
        if not pred_tokens and not gold_tokens:
            return 1.0
        if not pred_tokens or not gold_tokens:
            return 0.0
        common = Counter(pred_tokens) & Counter(gold_tokens)
        overlap = sum(common.values())
        if overlap == 0:
            return 0.0
        precision = overlap / len(pred_tokens)
        recall = overlap / len(gold_tokens)
        return 2 * precision * recall / (precision + recall)

    return max(single(g) for g in golds)


def accuracy(pred: str, golds: Sequence[str]) -> float:
    """Cover-EM: 1 iff some normalized gold is a substring of the prediction."""
    _check_golds(golds)
    norm = normalize_answer(pred)
    return 1.0 if any(normalize_answer(g) in norm for g in golds) else 0.0


def passage_is_correct(passage: Passage, golds: Sequence[str]) -> bool:
    """Containment rule: the passage holds some gold answer as a substring."""
    _check_golds(golds)
    text = normalize_answer(f"{passage.title} {passage.text}")
    return any(normalize_answer(g) in text for g in golds)


def pool_trajectory(trajectory: Trajectory,
                    lookup: Callable[[str], Passage] | Mapping[str, Passage],
                    use_selected: bool = False) -> list[Passage]:
    """Pool a trajectory's retrievals: hop order, then rank order, dedup first.

    With ``use_selected`` the re-ranked subset replaces the raw retrieval for
    steps that carry one.
    """
    getter = lookup.__getitem__ if isinstance(lookup, Mapping) else lookup
    pool: list[Passage] = []
    seen: set[str] = set()
    for step in trajectory.steps:
        if use_selected and step.selected is not None:
            ids: Iterable[str] = step.selected
        else:
            ids = (sp.passage_ref for sp in step.retrieved)
        for pid in ids:
            if pid not in seen:
                seen.add(pid)
                pool.append(getter(pid))
    return pool


def recall_at_k(pool: Sequence[Passage], golds: Sequence[str], k: int) -> float:
    """1 iff any of the top-k pooled passages contains a gold answer."""
    if k < 1:
        raise ValueError("k must be >= 1")
    _check_golds(golds)
    return 1.0 if any(passage_is_correct(p, golds) for p in pool[:k]) else 0.0


def precision_at_k(pool: Sequence[Passage], golds: Sequence[str], k: int) -> float:
    """Fraction of the top-k slots holding a correct passage (denominator k)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    _check_golds(golds)
    correct = sum(1 for p in pool[:k] if passage_is_correct(p, golds))
    return correct / k


@dataclass
class MetricsReport:
    """Mean answer and retrieval metrics over a dataset."""

    em: float
    f1: float
    acc: float
    recall_at: dict[int, float] = field(default_factory=dict)
    precision_at: dict[int, float] = field(default_factory=dict)
    n_examples: int = 0
    n_missing: int = 0

    def to_json_dict(self) -> dict:
        return {
            "em": self.em,
            "f1": self.f1,
            "acc": self.acc,
            "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
            "precision_at": {str(k): v for k, v in sorted(self.precision_at.items())},
            "n_examples": self.n_examples,
            "n_missing": self.n_missing,
        }


def evaluate_run(predictions: Mapping[str, str], dataset: Sequence[Example],
                 k_list: Sequence[int] = (),
                 trajectories: Mapping[str, Trajectory] | None = None,
                 passage_lookup: Callable[[str], Passage] | Mapping[str, Passage] | None = None,
                 use_selected: bool = False) -> MetricsReport:
    """Score predictions against a dataset.

    Predictions for unknown example ids raise UnknownId; dataset examples
    without a prediction score 0 on every metric and are counted in
    ``n_missing``. Retrieval metrics are produced only when trajectories and
    a passage lookup are supplied.
    """
    known = {ex.id for ex in dataset}
    for pid in predictions:
        if pid not in known:
            raise UnknownId(f"prediction for unknown example id {pid!r}")

    ems, f1s, accs = [], [], []
    recalls: dict[int, list[float]] = {k: [] for k in k_list}
    precisions: dict[int, list[float]] = {k: [] for k in k_list}
    missing = 0
    with_retrieval = trajectories is not None and passage_lookup is not None

    for ex in dataset:
        golds = list(ex.gold_answers)
        pred = predictions.get(ex.id)
        if pred is None:
            missing += 1
            ems.append(0.0)
            f1s.append(0.0)
            accs.append(0.0)
        else:
            ems.append(exact_match(pred, golds))
            f1s.append(token_f1(pred, golds))
            accs.append(accuracy(pred, golds))
        if with_retrieval:
            trajectory = trajectories.get(ex.id)
            pool = (pool_trajectory(trajectory, passage_lookup, use_selected)
                    if trajectory is not None else [])
            for k in k_list:
                recalls[k].append(recall_at_k(pool, golds, k) if pool else 0.0)
                precisions[k].append(precision_at_k(pool, golds, k) if pool else 0.0)

    def mean(xs: list[float]) -> float:
        return sum(xs) / len(xs) if xs else 0.0

    return MetricsReport(
        em=mean(ems), f1=mean(f1s), acc=mean(accs),
        recall_at={k: mean(v) for k, v in recalls.items()} if with_retrieval else {},
        precision_at={k: mean(v) for k, v in precisions.items()} if with_retrieval else {},
        n_examples=len(dataset), n_missing=missing,
    )
