import math

import numpy as np
import pytest

from colchunk.scorer import ScoredHit, maxsim, retrieve
from colchunk.types import CompressedDocument, QueryEmbeddingSet

from oracles import naive_maxsim


def make_doc(rng, doc_id="d", k=4, dim=8):
    chunks = rng.normal(size=(k, dim))
    chunks /= np.linalg.norm(chunks, axis=1, keepdims=True)
    return CompressedDocument(
        doc_id=doc_id, k=k, dim=dim, chunks=chunks,
        chunk_sizes=np.ones(k, dtype=np.int64),
    )


class TestMaxsim:
    def test_basis_vectors_by_hand(self):
        # chunks e1, e2; tokens pick their best chunk independently
        chunks = np.array([[1.0, 0.0], [0.0, 1.0]])
        doc = CompressedDocument(
            doc_id="d", k=2, dim=2, chunks=chunks, chunk_sizes=np.array([1, 1])
        )
        q = QueryEmbeddingSet(
            query_id="q", dim=2, vectors=np.array([[2.0, 0.0], [0.0, 0.5]])
        )
        assert maxsim(q, doc) == 2.0

    def test_antialigned_token_scores_negative(self):
        chunks = np.array([[1.0, 0.0]])
        doc = CompressedDocument(
            doc_id="d", k=1, dim=2, chunks=chunks, chunk_sizes=np.array([1])
        )
        q = QueryEmbeddingSet(query_id="q", dim=2, vectors=np.array([[-3.0, 0.0]]))
        assert maxsim(q, doc) == -1.0

    def test_matches_naive_oracle(self, rng):
        for _ in range(40):
            n_tok = int(rng.integers(1, 9))
            k = int(rng.integers(1, 17))
            dim = int(rng.choice([4, 8, 32]))
            doc = make_doc(rng, k=k, dim=dim)
            q = QueryEmbeddingSet(
                query_id="q", dim=dim, vectors=rng.normal(size=(n_tok, dim))
            )
            expected = naive_maxsim(q.vectors.tolist(), doc.chunks.tolist())
            assert abs(maxsim(q, doc) - expected) <= 1e-12

    def test_score_bounds(self, rng):
        doc = make_doc(rng, k=6)
        q = QueryEmbeddingSet(query_id="q", dim=8, vectors=rng.normal(size=(5, 8)))
        s = maxsim(q, doc)
        assert -5.0 - 1e-12 <= s <= 5.0 + 1e-12

    def test_invariant_to_query_token_scale(self, rng):
        doc = make_doc(rng)
        base = rng.normal(size=(3, 8))
        q1 = QueryEmbeddingSet(query_id="q", dim=8, vectors=base)
        q2 = QueryEmbeddingSet(query_id="q", dim=8, vectors=base * 7.5)
        assert abs(maxsim(q1, doc) - maxsim(q2, doc)) <= 1e-12

    def test_invariant_to_chunk_order(self, rng):
        doc = make_doc(rng, k=5)
        perm = np.array([3, 0, 4, 1, 2])
        shuffled = CompressedDocument(
            doc_id="d", k=5, dim=8, chunks=doc.chunks[perm],
            chunk_sizes=doc.chunk_sizes[perm],
        )
        q = QueryEmbeddingSet(query_id="q", dim=8, vectors=rng.normal(size=(4, 8)))
        assert maxsim(q, doc) == maxsim(q, shuffled)

    def test_dim_mismatch_names_both_sides(self, rng):
        doc = make_doc(rng, doc_id="page-9", dim=8)
        q = QueryEmbeddingSet(query_id="q-3", dim=4, vectors=rng.normal(size=(2, 4)))
        with pytest.raises(ValueError, match="page-9"):
            maxsim(q, doc)
        with pytest.raises(ValueError, match="q-3"):
            maxsim(q, doc)


class TestRetrieve:
    def test_orders_by_score_then_doc_id(self, rng):
        # identical docs tie; order must fall back to doc_id
        chunks = np.array([[1.0, 0.0]])
        docs = [
            CompressedDocument(doc_id=name, k=1, dim=2, chunks=chunks,
                               chunk_sizes=np.array([1]))
            for name in ("zeta", "alpha", "mid")
        ]
        q = QueryEmbeddingSet(query_id="q", dim=2, vectors=np.array([[1.0, 0.0]]))
        hits = retrieve(q, docs, top_k=3)
        assert [h.doc_id for h in hits] == ["alpha", "mid", "zeta"]
        assert [h.rank for h in hits] == [1, 2, 3]

    def test_descending_scores(self, rng):
        docs = [make_doc(rng, doc_id=f"d{i}") for i in range(8)]
        q = QueryEmbeddingSet(query_id="q", dim=8, vectors=rng.normal(size=(3, 8)))
        hits = retrieve(q, docs, top_k=8)
        scores = [h.score for h in hits]
        assert scores == sorted(scores, reverse=True)

    def test_truncation(self, rng):
        docs = [make_doc(rng, doc_id=f"d{i}") for i in range(10)]
        q = QueryEmbeddingSet(query_id="q", dim=8, vectors=rng.normal(size=(2, 8)))
        assert len(retrieve(q, docs, top_k=4)) == 4
        assert len(retrieve(q, docs, top_k=50)) == 10

    def test_scores_match_maxsim(self, rng):
        docs = [make_doc(rng, doc_id=f"d{i}") for i in range(5)]
        q = QueryEmbeddingSet(query_id="q", dim=8, vectors=rng.normal(size=(3, 8)))
        by_id = {d.doc_id: d for d in docs}
        for hit in retrieve(q, docs, top_k=5):
            assert hit.score == maxsim(q, by_id[hit.doc_id])

    def test_rejects_bad_top_k(self, rng):
        docs = [make_doc(rng)]
        q = QueryEmbeddingSet(query_id="q", dim=8, vectors=rng.normal(size=(2, 8)))
        with pytest.raises(ValueError):
            retrieve(q, docs, top_k=0)

    def test_rejects_empty_index(self, rng):
        q = QueryEmbeddingSet(query_id="q", dim=8, vectors=rng.normal(size=(2, 8)))
        with pytest.raises(ValueError):
            retrieve(q, [], top_k=5)

    def test_hit_is_frozen_record(self):
        hit = ScoredHit(doc_id="d", score=1.5, rank=1)
        with pytest.raises(AttributeError):
            hit.score = 2.0
