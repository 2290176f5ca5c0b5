"""Late-interaction scoring and exhaustive retrieval over compressed pages.

The relevance of a document is the sum over query tokens of the best cosine
against any of the document's chunk vectors. Chunks are stored unit-norm, so
only the query side needs normalizing and the inner loop is one matrix
product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .types import CompressedDocument, QueryEmbeddingSet

__all__ = ["ScoredHit", "maxsim", "retrieve"]


@dataclass(frozen=True)
class ScoredHit:
    doc_id: str
    score: float
    rank: int


def maxsim(query: QueryEmbeddingSet, doc: CompressedDocument) -> float:
    """Late-interaction score: sum over tokens of the best chunk cosine.

    Query tokens are normalized lazily here; document chunks are already
    unit vectors by construction. The result lies in
    ``[-n_tokens, n_tokens]``.
    """
    if query.dim != doc.dim:
        raise ValueError(
            f"dimension mismatch: query '{query.query_id}' has dim {query.dim}, "
            f"doc '{doc.doc_id}' has dim {doc.dim}"
        )
    q = query.vectors
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    sims = q @ doc.chunks.T
    return float(sims.max(axis=1).sum())


def retrieve(query: QueryEmbeddingSet, index, top_k: int) -> list[ScoredHit]:
    """Score every document in the index and return the top ``top_k`` hits.

    ``index`` may be a CorpusIndex or any sequence of compressed documents.
    Ordering is deterministic: descending score, ties broken by ascending
    doc_id. Ranks run from 1 to ``min(top_k, corpus size)``.
    """
    if top_k < 1:
        raise ValueError(f"top_k must be at least 1, got {top_k}")
    docs = index.docs if hasattr(index, "docs") else tuple(index)
    if not docs:
        raise ValueError("cannot retrieve from an empty index")
    scored = [(doc.doc_id, maxsim(query, doc)) for doc in docs]
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return [
        ScoredHit(doc_id=doc_id, score=score, rank=position + 1)
        for position, (doc_id, score) in enumerate(scored[:top_k])
    ]
