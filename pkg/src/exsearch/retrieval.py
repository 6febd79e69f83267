"""Corpus ingestion and top-K lexical retrieval over an inverted index.

BM25 (k1=0.9, b=0.4) with the non-negative smoothed idf
``ln(1 + (N - df + 0.5) / (df + 0.5))`` so that a passage scores 0 exactly
when it shares no term with the query; zero-scoring passages are never
returned. No stemming or stopword removal; both title and body are indexed.
The index is immutable after build and safe for concurrent searches.
"""

from __future__ import annotations

import json
import math
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import CorruptIndex, DuplicateId, EmptyIndex, VersionMismatch
from .trajectory import Passage, ScoredPassage, passage_from_dict, passage_to_dict

K1 = 0.9
B = 0.4

INDEX_MAGIC = b"EXSIDX1"
INDEX_VERSION = 1
INDEX_FILENAME = "index.exsidx"

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on any non-alphanumeric character, dropping empties."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class CorpusIndex:
    """Inverted index over a passage corpus.

    ``postings`` maps each term to (passage id, term frequency) pairs sorted
    by passage id; ``doc_lengths`` counts indexed tokens per passage.
    """

    postings: dict[str, tuple[tuple[str, int], ...]]
    doc_lengths: dict[str, int]
    avg_doc_length: float
    doc_count: int
    passages: dict[str, Passage]

    def get(self, passage_id: str) -> Passage:
        return self.passages[passage_id]

    def resolve(self, hits: Iterable[ScoredPassage]) -> list[Passage]:
        return [self.passages[h.passage_ref] for h in hits]


def indexed_text(passage: Passage) -> str:
    """The text a passage is indexed (and searched) under."""
    return f"{passage.title} {passage.text}"


def build_index(passages: Iterable[Passage]) -> CorpusIndex:
    """Build an inverted index; raises DuplicateId on repeated passage ids."""
    store: dict[str, Passage] = {}
    for p in passages:
        if p.id in store:
            raise DuplicateId(f"duplicate passage id: {p.id!r}")
        store[p.id] = p

    counts: dict[str, dict[str, int]] = {}
    doc_lengths: dict[str, int] = {}
    for pid, p in store.items():
        tokens = tokenize(indexed_text(p))
        doc_lengths[pid] = len(tokens)
        for tok in tokens:
            counts.setdefault(tok, {}).setdefault(pid, 0)
            counts[tok][pid] += 1

    postings = {
        term: tuple(sorted(per_doc.items()))
        for term, per_doc in sorted(counts.items())
    }
    n = len(store)
    avg = (sum(doc_lengths.values()) / n) if n else 0.0
    return CorpusIndex(postings=postings, doc_lengths=doc_lengths,
                       avg_doc_length=avg, doc_count=n, passages=store)


def bm25_score(index: CorpusIndex, query_terms: Sequence[str], passage_id: str) -> float:
    """BM25 score of one passage for the given query terms.

    Each distinct query term contributes once; query term frequency is ignored.
    """
    dl = index.doc_lengths[passage_id]
    norm = K1 * (1.0 - B + B * dl / index.avg_doc_length) if index.avg_doc_length else K1
    score = 0.0
    for term in dict.fromkeys(query_terms):
        per_doc = dict(index.postings.get(term, ()))
        tf = per_doc.get(passage_id, 0)
        if tf == 0:
            continue
        df = len(per_doc)
        idf = math.log(1.0 + (index.doc_count - df + 0.5) / (df + 0.5))
        score += idf * (K1 + 1.0) * tf / (tf + norm)
    return score


def search(index: CorpusIndex, query: str, k: int) -> list[ScoredPassage]:
    """Top-k BM25 retrieval.

    Results are sorted by score descending with ties broken by ascending
    passage id; passages scoring 0 are excluded. Raises EmptyIndex when the
    index holds no documents.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if index.doc_count == 0:
        raise EmptyIndex("cannot search an empty index")
    terms = tokenize(query)
    scores: dict[str, float] = {}
    for term in dict.fromkeys(terms):
        for pid, _tf in index.postings.get(term, ()):
            if pid not in scores:
                scores[pid] = bm25_score(index, terms, pid)
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
    return [ScoredPassage(passage_ref=pid, score=s, rank=i)
            for i, (pid, s) in enumerate(ranked, 1)]


@dataclass
class Retriever:
    """Search interface handed to agents: (query, k) -> scored passages.

    This is the seam for alternative retrieval backends; the bundled
    implementation wraps a CorpusIndex.
    """

    index: CorpusIndex
    cache: dict[tuple[str, int], tuple[ScoredPassage, ...]] = field(default_factory=dict)

    def search(self, query: str, k: int) -> list[ScoredPassage]:
        key = (query, k)
        if key not in self.cache:
            self.cache[key] = tuple(search(self.index, query, k))
        return list(self.cache[key])

    def get(self, passage_id: str) -> Passage:
        return self.index.passages[passage_id]

    def resolve(self, hits: Iterable[ScoredPassage]) -> list[Passage]:
        return self.index.resolve(hits)

    @property
    def doc_count(self) -> int:
        return self.index.doc_count


def save_index(index: CorpusIndex, path) -> None:
    """Persist an index: magic header, format-version byte, compressed body."""
    body = {
        "doc_count": index.doc_count,
        "avg_doc_length": index.avg_doc_length,
        "doc_lengths": index.doc_lengths,
        "postings": {t: [[pid, tf] for pid, tf in plist]
                     for t, plist in index.postings.items()},
        "passages": [passage_to_dict(p) for p in index.passages.values()],
    }
    payload = zlib.compress(json.dumps(body, ensure_ascii=False).encode("utf-8"))
    path = Path(path)
    if path.is_dir():
        path = path / INDEX_FILENAME
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(bytes([INDEX_VERSION]))
        fh.write(payload)


def load_index(path) -> CorpusIndex:
    """Load an index written by :func:`save_index`.

    Raises CorruptIndex on a bad magic header or undecodable body, and
    VersionMismatch on an unsupported format-version byte.
    """
    path = Path(path)
    if path.is_dir():
        path = path / INDEX_FILENAME
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(INDEX_MAGIC)] != INDEX_MAGIC:
        raise CorruptIndex(f"{path}: bad magic header")
    if len(blob) < len(INDEX_MAGIC) + 1:
        raise CorruptIndex(f"{path}: truncated file")
    version = blob[len(INDEX_MAGIC)]
    if version != INDEX_VERSION:
        raise VersionMismatch(f"{path}: unsupported index version {version}")
    try:
        body = json.loads(zlib.decompress(blob[len(INDEX_MAGIC) + 1:]))
        passages = {d["id"]: passage_from_dict(d) for d in body["passages"]}
        return CorpusIndex(
            postings={t: tuple((pid, int(tf)) for pid, tf in plist)
                      for t, plist in body["postings"].items()},
            doc_lengths={pid: int(n) for pid, n in body["doc_lengths"].items()},
            avg_doc_length=float(body["avg_doc_length"]),
            doc_count=int(body["doc_count"]),
            passages=passages,
        )
    except (KeyError, ValueError, TypeError, zlib.error, json.JSONDecodeError) as exc:
        raise CorruptIndex(f"{path}: undecodable index body ({exc})") from exc
