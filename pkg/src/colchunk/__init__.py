"""Patch-embedding compression and late-interaction retrieval toolkit."""

__version__ = "0.1.0"

from .chunker import (  # noqa: E402
    ChunkerConfig,
    MergeStep,
    cluster_hac,
    cluster_kmeans,
    compress,
    compress_many,
    fuse,
    pool,
)
from .posenc import PosEncConfig, encode, encode_batch  # noqa: E402
from .scorer import ScoredHit, maxsim, retrieve  # noqa: E402
from .store import (  # noqa: E402
    BuildMeta,
    CorpusIndex,
    IndexFormatError,
    ManifestError,
    ingest_dump,
    ingest_queries,
    read_index,
    write_embedding_dump,
    write_index,
    write_query_dump,
)
from .types import (  # noqa: E402
    ChunkAssignment,
    CompressedDocument,
    FusedFeatureSet,
    NormalizedCoords,
    PatchEmbeddingSet,
    PatchGrid,
    QueryEmbeddingSet,
    ValidationReport,
    grid_coords,
    patch_coords,
    validate,
)

__all__ = [
    "__version__",
    "ChunkerConfig",
    "MergeStep",
    "cluster_hac",
    "cluster_kmeans",
    "compress",
    "compress_many",
    "fuse",
    "pool",
    "PosEncConfig",
    "encode",
    "encode_batch",
    "ScoredHit",
    "maxsim",
    "retrieve",
    "BuildMeta",
    "CorpusIndex",
    "IndexFormatError",
    "ManifestError",
    "ingest_dump",
    "ingest_queries",
    "read_index",
    "write_embedding_dump",
    "write_index",
    "write_query_dump",
    "ChunkAssignment",
    "CompressedDocument",
    "FusedFeatureSet",
    "NormalizedCoords",
    "PatchEmbeddingSet",
    "PatchGrid",
    "QueryEmbeddingSet",
    "ValidationReport",
    "grid_coords",
    "patch_coords",
    "validate",
]
