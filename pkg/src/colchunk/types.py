"""Core data model shared across the toolkit.

Pages arrive as grids of patch embeddings in row-major order; queries as
bags of token embeddings. Compression replaces each page by a small set of
unit-norm chunk vectors. Arrays are float64 in memory and made read-only at
construction so instances can be shared freely across worker threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "PatchGrid",
    "NormalizedCoords",
    "PatchEmbeddingSet",
    "FusedFeatureSet",
    "ChunkAssignment",
    "CompressedDocument",
    "QueryEmbeddingSet",
    "ValidationReport",
    "patch_coords",
    "grid_coords",
    "validate",
]

UNIT_NORM_TOL = 1e-6


def _freeze_matrix(obj, name: str, value) -> np.ndarray:
    """Coerce a field to a read-only float64 matrix on a frozen dataclass."""
    arr = np.array(value, dtype=np.float64, copy=True)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    arr.setflags(write=False)
    object.__setattr__(obj, name, arr)
    return arr


def _freeze_ints(obj, name: str, value) -> np.ndarray:
    arr = np.array(value, dtype=np.int64, copy=True)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    arr.setflags(write=False)
    object.__setattr__(obj, name, arr)
    return arr


@dataclass(frozen=True)
class PatchGrid:
    """Patch layout of one page: ``rows x cols``, indexed row-major."""

    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class NormalizedCoords:
    """A point in the unit square, x growing rightward and y downward."""

    x: float
    y: float

    def __post_init__(self):
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ValueError(f"coordinates must lie in [0, 1]^2, got ({self.x}, {self.y})")


def patch_coords(grid: PatchGrid, j: int) -> NormalizedCoords:
    """Center of patch ``j`` in normalized page coordinates.

    Row-major layout: ``row = j // cols``, ``col = j % cols``. Centers sit at
    ``((col + 0.5) / cols, (row + 0.5) / rows)`` so they never touch the page
    border and a 1x1 grid maps to (0.5, 0.5).
    """
    if not 0 <= j < grid.n_patches:
        raise IndexError(f"patch index {j} out of range for {grid.rows}x{grid.cols} grid")
    row, col = divmod(j, grid.cols)
    return NormalizedCoords(x=(col + 0.5) / grid.cols, y=(row + 0.5) / grid.rows)


def grid_coords(grid: PatchGrid) -> np.ndarray:
    """All patch centers as an ``(n_patches, 2)`` array of (x, y), row-major."""
    cols = (np.arange(grid.cols) + 0.5) / grid.cols
    rows = (np.arange(grid.rows) + 0.5) / grid.rows
    xs = np.tile(cols, grid.rows)
    ys = np.repeat(rows, grid.cols)
    return np.column_stack([xs, ys])


@dataclass(frozen=True, eq=False)
class PatchEmbeddingSet:
    """Contextual patch vectors of one page plus the grid they came from.

    Construction is deliberately lenient about content (only the array shape
    is coerced); run :func:`validate` to obtain a violation report before
    feeding a set into the compression pipeline.
    """

    doc_id: str
    dim: int
    grid: PatchGrid
    vectors: np.ndarray

    def __post_init__(self):
        _freeze_matrix(self, "vectors", self.vectors)

    @property
    def n_vectors(self) -> int:
        return self.vectors.shape[0]


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of validating a :class:`PatchEmbeddingSet`."""

    violations: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.violations


def validate(pset: PatchEmbeddingSet) -> ValidationReport:
    """Check a patch set against the pipeline's preconditions.

    A clean report means every downstream operation (fusion, clustering,
    pooling) accepts the set without error, which is why zero-norm vectors
    are flagged here too: they cannot be semantically normalized and they
    poison centroid pooling.
    """
    violations: list[str] = []
    if pset.dim < 1:
        violations.append(f"dim: must be positive, got {pset.dim}")
    if pset.vectors.shape[1] != pset.dim and pset.dim >= 1:
        violations.append(
            f"vectors: expected {pset.dim} components per vector, got {pset.vectors.shape[1]}"
        )
    expected = pset.grid.n_patches
    n = pset.vectors.shape[0]
    if n != expected:
        violations.append(f"count mismatch: {n} != {expected}")
    finite_rows = np.isfinite(pset.vectors).all(axis=1)
    for j in np.flatnonzero(~finite_rows):
        violations.append(f"vectors[{j}]: non-finite component")
    if pset.vectors.size:
        norms = np.linalg.norm(pset.vectors, axis=1)
        for j in np.flatnonzero(finite_rows & (norms == 0.0)):
            violations.append(f"vectors[{j}]: zero norm")
    return ValidationReport(violations=tuple(violations))


@dataclass(frozen=True, eq=False)
class FusedFeatureSet:
    """Per-patch features after blending semantics with the positional prior."""

    dim: int
    omega: float
    vectors: np.ndarray

    def __post_init__(self):
        arr = _freeze_matrix(self, "vectors", self.vectors)
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError(f"omega must lie in [0, 1], got {self.omega}")
        if arr.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} components, got {arr.shape[1]}")
        if not np.isfinite(arr).all():
            raise ValueError("fused features must be finite")


@dataclass(frozen=True, eq=False)
class ChunkAssignment:
    """A partition of a page's patches into ``k`` chunks.

    ``labels[j]`` is the chunk of patch ``j``. Labels are contiguous in
    ``[0, k)`` and numbered by ascending smallest member index, so the
    assignment is a canonical representation of the partition.
    """

    k: int
    labels: np.ndarray
    sizes: np.ndarray

    def __post_init__(self):
        labels = _freeze_ints(self, "labels", self.labels)
        sizes = _freeze_ints(self, "sizes", self.sizes)
        if self.k < 1:
            raise ValueError(f"k must be at least 1, got {self.k}")
        if labels.shape[0] < self.k:
            raise ValueError(f"cannot split {labels.shape[0]} patches into {self.k} chunks")
        if labels.size and (labels.min() < 0 or labels.max() >= self.k):
            raise ValueError("labels must lie in [0, k)")
        counts = np.bincount(labels, minlength=self.k)
        if (counts == 0).any():
            missing = int(np.flatnonzero(counts == 0)[0])
            raise ValueError(f"chunk {missing} is empty")
        if sizes.shape[0] != self.k or (sizes != counts).any():
            raise ValueError("sizes disagree with labels")


@dataclass(frozen=True, eq=False)
class CompressedDocument:
    """The retained representation of one page: ``k`` unit-norm chunk vectors."""

    doc_id: str
    k: int
    dim: int
    chunks: np.ndarray
    chunk_sizes: np.ndarray

    def __post_init__(self):
        chunks = _freeze_matrix(self, "chunks", self.chunks)
        sizes = _freeze_ints(self, "chunk_sizes", self.chunk_sizes)
        if self.k < 1:
            raise ValueError(f"k must be at least 1, got {self.k}")
        if chunks.shape != (self.k, self.dim):
            raise ValueError(f"expected chunks of shape ({self.k}, {self.dim}), got {chunks.shape}")
        if sizes.shape[0] != self.k or (sizes < 1).any():
            raise ValueError("every chunk must cover at least one patch")
        norms = np.linalg.norm(chunks, axis=1)
        off = np.abs(norms - 1.0)
        if off.size and off.max() > UNIT_NORM_TOL:
            bad = int(off.argmax())
            raise ValueError(f"chunk {bad} is not unit norm (|norm - 1| = {off.max():.3g})")

    @property
    def n_source_vectors(self) -> int:
        return int(self.chunk_sizes.sum())


@dataclass(frozen=True, eq=False)
class QueryEmbeddingSet:
    """Token embeddings of one query. Tokens must be finite and nonzero."""

    query_id: str
    dim: int
    vectors: np.ndarray

    def __post_init__(self):
        arr = _freeze_matrix(self, "vectors", self.vectors)
        if arr.shape[0] < 1:
            raise ValueError("a query needs at least one token vector")
        if arr.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} components per token, got {arr.shape[1]}")
        if not np.isfinite(arr).all():
            raise ValueError(f"query '{self.query_id}' has a non-finite token")
        if (np.linalg.norm(arr, axis=1) == 0.0).any():
            raise ValueError(f"query '{self.query_id}' has a zero-norm token")

    @property
    def n_tokens(self) -> int:
        return self.vectors.shape[0]
