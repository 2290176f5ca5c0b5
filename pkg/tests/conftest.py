import numpy as np
import pytest

from colchunk.types import PatchEmbeddingSet, PatchGrid


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_pset(rng, rows=4, cols=4, dim=8, doc_id="doc"):
    grid = PatchGrid(rows=rows, cols=cols)
    vectors = rng.normal(size=(grid.n_patches, dim))
    return PatchEmbeddingSet(doc_id=doc_id, dim=dim, grid=grid, vectors=vectors)
