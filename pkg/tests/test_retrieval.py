import math
import re
from collections import Counter

import numpy as np
import pytest

from exsearch.errors import CorruptIndex, DuplicateId, EmptyIndex, VersionMismatch
from exsearch.retrieval import (
    INDEX_MAGIC,
    B,
    K1,
    build_index,
    load_index,
    save_index,
    search,
    tokenize,
)
from exsearch.trajectory import Passage


def brute_force_bm25(passages: list[Passage], query: str) -> dict[str, float]:
    """Independent BM25 oracle: explicit loops over documents and terms."""
    texts = {p.id: (p.title + " " + p.text).lower() for p in passages}
    docs = {pid: re.findall(r"[^\W_]+", text) for pid, text in texts.items()}
    n = len(docs)
    avgdl = sum(len(toks) for toks in docs.values()) / n if n else 0.0
    scores = {}
    q_terms = []
    for term in re.findall(r"[^\W_]+", query.lower()):
        if term not in q_terms:
            q_terms.append(term)
    for pid, toks in docs.items():
        counts = Counter(toks)
        score = 0.0
        for term in q_terms:
            tf = counts.get(term, 0)
            if tf == 0:
                continue
            df = sum(1 for other in docs.values() if term in other)
            idf = math.log(1.0 + (n - df + 0.5) / (df + 0.5))
            score += idf * (K1 + 1) * tf / (tf + K1 * (1 - B + B * len(toks) / avgdl))
        scores[pid] = score
    return scores


def passages_from(texts: dict[str, str]) -> list[Passage]:
    return [Passage(id=pid, title=pid, text=text) for pid, text in texts.items()]


class TestTokenize:
    def test_punctuation_and_case(self):
        assert tokenize("Arthur's Magazine (1844)") == ["arthur", "s", "magazine", "1844"]

    def test_empty(self):
        assert tokenize("") == []

    def test_idempotent_under_join(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            raw = "".join(chr(int(rng.integers(32, 127))) for _ in range(30))
            once = tokenize(raw)
            assert tokenize(" ".join(once)) == once


class TestBuildIndex:
    def test_empty_corpus(self):
        index = build_index([])
        assert index.doc_count == 0 and index.postings == {}

    def test_postings_match_brute_force_counts(self):
        passages = passages_from({
            "p1": "alpha beta alpha",
            "p2": "beta gamma",
            "p3": "alpha delta delta",
        })
        index = build_index(passages)
        expected: dict[str, dict[str, int]] = {}
        for p in passages:
            for tok in tokenize(p.title + " " + p.text):
                expected.setdefault(tok, {}).setdefault(p.id, 0)
                expected[tok][p.id] += 1
        assert {t: dict(pl) for t, pl in index.postings.items()} == expected
        assert index.doc_count == 3
        assert index.avg_doc_length == pytest.approx(
            np.mean([len(tokenize(p.title + " " + p.text)) for p in passages]))

    def test_duplicate_id_rejected(self):
        passages = [Passage(id="x", title="a", text="a"),
                    Passage(id="x", title="b", text="b")]
        with pytest.raises(DuplicateId, match="x"):
            build_index(passages)


class TestSearch:
    def test_no_matching_term_returns_empty(self):
        index = build_index(passages_from({"p1": "alpha beta"}))
        assert search(index, "zeta", 5) == []

    def test_single_passage_hit(self):
        index = build_index(passages_from({"p1": "alpha beta"}))
        hits = search(index, "alpha", 5)
        assert [h.passage_ref for h in hits] == ["p1"]
        assert hits[0].rank == 1 and hits[0].score > 0

    def test_empty_index_raises(self):
        with pytest.raises(EmptyIndex):
            search(build_index([]), "q", 1)

    def test_matches_exhaustive_scoring_on_toy_corpus(self):
        rng = np.random.default_rng(4)
        vocab = ["alpha", "beta", "gamma", "delta", "eps", "zeta"]
        passages = passages_from({
            f"p{i:02d}": " ".join(vocab[int(j)] for j in rng.integers(0, 6, size=5))
            for i in range(10)})
        index = build_index(passages)
        for query in ("alpha beta", "gamma", "zeta eps alpha", "delta delta"):
            oracle = brute_force_bm25(passages, query)
            expected = sorted(((pid, s) for pid, s in oracle.items() if s > 0),
                              key=lambda kv: (-kv[1], kv[0]))[:3]
            got = [(h.passage_ref, h.score) for h in search(index, query, 3)]
            assert [pid for pid, _ in got] == [pid for pid, _ in expected]
            for (_, a), (_, b) in zip(got, expected):
                assert a == pytest.approx(b, abs=1e-12)

    def test_full_ranking_equals_brute_force_on_200_passages(self):
        rng = np.random.default_rng(11)
        vocab = [f"w{i}" for i in range(30)]
        passages = passages_from({
            f"p{i:03d}": " ".join(vocab[int(j)] for j in rng.integers(0, 30, size=8))
            for i in range(200)})
        index = build_index(passages)
        for qi in range(20):
            query = " ".join(vocab[int(j)] for j in rng.integers(0, 30, size=2))
            oracle = brute_force_bm25(passages, query)
            expected = [pid for pid, s in sorted(
                ((pid, s) for pid, s in oracle.items() if s > 0),
                key=lambda kv: (-kv[1], kv[0]))]
            got = [h.passage_ref for h in search(index, query, index.doc_count)]
            assert got == expected

    def test_deterministic_and_tie_broken_by_id(self):
        passages = passages_from({"pb": "alpha", "pa": "alpha", "pc": "alpha"})
        index = build_index(passages)
        hits = search(index, "alpha", 3)
        assert [h.passage_ref for h in hits] == ["pa", "pb", "pc"]
        assert hits == search(index, "alpha", 3)

    def test_zero_scoring_passage_does_not_reorder_prior_results(self):
        base = {"p1": "alpha beta beta", "p2": "alpha alpha gamma", "p3": "beta beta gamma"}
        with_extra = dict(base, p9="delta delta delta")
        order_before = [h.passage_ref for h in
                        search(build_index(passages_from(base)), "alpha beta", 3)]
        after = search(build_index(passages_from(with_extra)), "alpha beta", 4)
        assert [h.passage_ref for h in after] == order_before


class TestPersistence:
    def test_round_trip_preserves_search_results(self, tmp_path):
        rng = np.random.default_rng(2)
        vocab = [f"w{i}" for i in range(20)]
        passages = passages_from({
            f"p{i:03d}": " ".join(vocab[int(j)] for j in rng.integers(0, 20, size=6))
            for i in range(100)})
        index = build_index(passages)
        path = tmp_path / "index.exsidx"
        save_index(index, path)
        loaded = load_index(path)
        assert loaded == index
        for _ in range(20):
            query = " ".join(vocab[int(j)] for j in rng.integers(0, 20, size=2))
            assert search(loaded, query, 5) == search(index, query, 5)

    def test_empty_index_round_trip(self, tmp_path):
        path = tmp_path / "empty.exsidx"
        save_index(build_index([]), path)
        assert load_index(path).doc_count == 0

    def test_magic_header_present(self, tmp_path):
        path = tmp_path / "index.exsidx"
        save_index(build_index(passages_from({"p": "x"})), path)
        blob = path.read_bytes()
        assert blob.startswith(INDEX_MAGIC)
        assert blob[len(INDEX_MAGIC)] == 1

    def test_wrong_magic_raises_corrupt(self, tmp_path):
        path = tmp_path / "bad.exsidx"
        path.write_bytes(b"NOTANIDX" + b"\x01xxxx")
        with pytest.raises(CorruptIndex):
            load_index(path)

    def test_unsupported_version_raises(self, tmp_path):
        path = tmp_path / "vers.exsidx"
        save_index(build_index([]), path)
        blob = bytearray(path.read_bytes())
        blob[len(INDEX_MAGIC)] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionMismatch):
            load_index(path)

    def test_garbled_body_raises_corrupt(self, tmp_path):
        path = tmp_path / "body.exsidx"
        path.write_bytes(INDEX_MAGIC + b"\x01" + b"garbage-not-zlib")
        with pytest.raises(CorruptIndex):
            load_index(path)

    def test_directory_path_uses_default_filename(self, tmp_path):
        index = build_index(passages_from({"p": "alpha"}))
        save_index(index, tmp_path)
        assert load_index(tmp_path) == index
