"""Persistence: the CCHK binary index and raw embedding dumps.

The index file is little-endian throughout and carries a JSON build-metadata
trailer whose byte length sits in the final 8 bytes, so readers can locate
it without scanning the document records:

    magic          4 bytes    b"CCHK"
    version        u32        currently 1
    dim            u32
    doc_count      u64
    per document:
        id_len     u16        UTF-8 byte length of doc_id
        doc_id     id_len bytes
        k          u32
        sizes      k * u32    patches pooled into each chunk
        chunks     k * dim * f32
    trailer        JSON, UTF-8, sorted keys
    trailer_len    u64

Vectors are float32 on disk and float64 in memory. Writing what was read
reproduces the file byte for byte.

Embedding dumps are the ingestion side: a JSON manifest describing per-page
raw vector files (flat float32 little-endian, row-major). Query dumps use
the same shape minus the grid fields.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .types import CompressedDocument, PatchEmbeddingSet, PatchGrid, QueryEmbeddingSet, validate

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "IndexFormatError",
    "ManifestError",
    "BuildMeta",
    "CorpusIndex",
    "DumpEntry",
    "EmbeddingDumpManifest",
    "QueryDumpEntry",
    "QueryDumpManifest",
    "write_index",
    "read_index",
    "load_manifest",
    "ingest_dump",
    "write_embedding_dump",
    "load_query_manifest",
    "ingest_queries",
    "write_query_dump",
]

MAGIC = b"CCHK"
FORMAT_VERSION = 1


class IndexFormatError(Exception):
    """An index file is malformed: wrong magic, version, truncation, bad record."""


class ManifestError(Exception):
    """An embedding dump (manifest or raw file) is unusable."""


@dataclass(frozen=True)
class BuildMeta:
    """Provenance of an index, persisted verbatim in the JSON trailer."""

    omega: float
    k_target: int
    method: str
    posenc_base: float
    tool_version: str
    embedding_location: str = ""

    def to_dict(self) -> dict:
        return {
            "omega": self.omega,
            "k_target": self.k_target,
            "method": self.method,
            "posenc_base": self.posenc_base,
            "tool_version": self.tool_version,
            "embedding_location": self.embedding_location,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BuildMeta":
        try:
            return cls(
                omega=float(d["omega"]),
                k_target=int(d["k_target"]),
                method=str(d["method"]),
                posenc_base=float(d["posenc_base"]),
                tool_version=str(d["tool_version"]),
                embedding_location=str(d.get("embedding_location", "")),
            )
        except KeyError as exc:
            raise IndexFormatError(f"build metadata is missing field {exc}") from exc


@dataclass(frozen=True, eq=False)
class CorpusIndex:
    """An ordered collection of compressed documents sharing one dim."""

    dim: int
    docs: tuple[CompressedDocument, ...]
    build_meta: BuildMeta

    def __post_init__(self):
        object.__setattr__(self, "docs", tuple(self.docs))
        seen: set[str] = set()
        for doc in self.docs:
            if doc.dim != self.dim:
                raise ValueError(
                    f"doc '{doc.doc_id}' has dim {doc.dim}, index expects {self.dim}"
                )
            if doc.doc_id in seen:
                raise ValueError(f"duplicate doc_id '{doc.doc_id}'")
            seen.add(doc.doc_id)

    def __len__(self) -> int:
        return len(self.docs)


def write_index(index: CorpusIndex, path: str | Path) -> None:
    """Serialize an index; see the module docstring for the exact layout."""
    out = Path(path)
    with out.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", index.dim))
        fh.write(struct.pack("<Q", len(index.docs)))
        for doc in index.docs:
            id_bytes = doc.doc_id.encode("utf-8")
            if len(id_bytes) > 0xFFFF:
                raise ValueError(f"doc_id of {len(id_bytes)} bytes exceeds the u16 length field")
            fh.write(struct.pack("<H", len(id_bytes)))
            fh.write(id_bytes)
            fh.write(struct.pack("<I", doc.k))
            fh.write(doc.chunk_sizes.astype("<u4").tobytes())
            fh.write(doc.chunks.astype("<f4").tobytes())
        trailer = json.dumps(
            index.build_meta.to_dict(), sort_keys=True, separators=(",", ":")
        ).encode("utf-8")
        fh.write(trailer)
        fh.write(struct.pack("<Q", len(trailer)))


class _Cursor:
    """Bounds-checked sequential reads over the file image."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise IndexFormatError(f"truncated file: ran out of bytes reading {what}")
        piece = self.buf[self.pos : self.pos + n]
        self.pos += n
        return piece

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def read_index(path: str | Path) -> CorpusIndex:
    """Parse an index file, upgrading vectors to float64.

    Raises IndexFormatError for anything malformed: wrong magic, unsupported
    version, truncation, trailing garbage, undecodable metadata, or a
    document that violates the compressed-document invariants.
    """
    buf = Path(path).read_bytes()
    cur = _Cursor(buf)
    magic = cur.take(4, "magic")
    if magic != MAGIC:
        raise IndexFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = cur.u32("version")
    if version != FORMAT_VERSION:
        raise IndexFormatError(f"unsupported format version {version}")
    dim = cur.u32("dim")
    if dim < 1:
        raise IndexFormatError(f"invalid dim {dim}")
    doc_count = cur.u64("doc count")
    docs = []
    for i in range(doc_count):
        id_len = cur.u16(f"doc {i} id length")
        try:
            doc_id = cur.take(id_len, f"doc {i} id").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise IndexFormatError(f"doc {i} id is not valid UTF-8") from exc
        k = cur.u32(f"doc '{doc_id}' k")
        if k < 1:
            raise IndexFormatError(f"doc '{doc_id}' has invalid k = {k}")
        sizes = np.frombuffer(cur.take(4 * k, f"doc '{doc_id}' chunk sizes"), dtype="<u4")
        raw = cur.take(4 * k * dim, f"doc '{doc_id}' chunk vectors")
        chunks = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(k, dim)
        try:
            docs.append(
                CompressedDocument(
                    doc_id=doc_id,
                    k=k,
                    dim=dim,
                    chunks=chunks,
                    chunk_sizes=sizes.astype(np.int64),
                )
            )
        except ValueError as exc:
            raise IndexFormatError(f"doc '{doc_id}' violates invariants: {exc}") from exc
    remaining = len(buf) - cur.pos
    if remaining < 8:
        raise IndexFormatError("truncated file: missing trailer length")
    trailer_len = struct.unpack("<Q", buf[-8:])[0]
    if trailer_len != remaining - 8:
        raise IndexFormatError(
            f"trailer length {trailer_len} disagrees with the {remaining - 8} bytes present"
        )
    trailer = cur.take(trailer_len, "trailer")
    try:
        meta = BuildMeta.from_dict(json.loads(trailer.decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IndexFormatError(f"unreadable build metadata: {exc}") from exc
    try:
        return CorpusIndex(dim=dim, docs=tuple(docs), build_meta=meta)
    except ValueError as exc:
        raise IndexFormatError(str(exc)) from exc


@dataclass(frozen=True)
class DumpEntry:
    doc_id: str
    rows: int
    cols: int
    n_vectors: int
    path: str


@dataclass(frozen=True)
class EmbeddingDumpManifest:
    """Parsed dump manifest. ``root`` anchors the entries' relative paths."""

    dim: int
    entries: tuple[DumpEntry, ...]
    location: str = ""
    root: Path = field(default_factory=Path)


def load_manifest(path: str | Path) -> EmbeddingDumpManifest:
    """Read and sanity-check a dump manifest.

    Duplicate doc_ids, inconsistent vector counts, and missing raw files are
    all rejected here, before any vector data is read.
    """
    p = Path(path)
    try:
        data = json.loads(p.read_text("utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot parse manifest {p}: {exc}") from exc
    try:
        dim = int(data["dim"])
        raw_entries = data["entries"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"manifest {p} is missing dim or entries") from exc
    if dim < 1:
        raise ManifestError(f"manifest dim must be positive, got {dim}")
    location = str(data.get("location", ""))
    entries = []
    seen: set[str] = set()
    for i, e in enumerate(raw_entries):
        try:
            entry = DumpEntry(
                doc_id=str(e["doc_id"]),
                rows=int(e["rows"]),
                cols=int(e["cols"]),
                n_vectors=int(e["n_vectors"]),
                path=str(e["path"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"manifest entry {i} is malformed: {exc}") from exc
        if entry.doc_id in seen:
            raise ManifestError(f"duplicate doc_id '{entry.doc_id}' in manifest")
        seen.add(entry.doc_id)
        if entry.rows < 1 or entry.cols < 1:
            raise ManifestError(f"doc '{entry.doc_id}': grid must be at least 1x1")
        if entry.n_vectors != entry.rows * entry.cols:
            raise ManifestError(
                f"doc '{entry.doc_id}': n_vectors {entry.n_vectors} != "
                f"{entry.rows}x{entry.cols} grid"
            )
        entries.append(entry)
    root = p.parent
    for entry in entries:
        if not (root / entry.path).is_file():
            raise ManifestError(f"doc '{entry.doc_id}': raw file {entry.path} not found")
    return EmbeddingDumpManifest(dim=dim, entries=tuple(entries), location=location, root=root)


def _read_raw_vectors(path: Path, n_vectors: int, dim: int, owner: str) -> np.ndarray:
    expected = n_vectors * dim * 4
    actual = path.stat().st_size
    if actual != expected:
        raise ManifestError(
            f"doc '{owner}': raw file {path.name} holds {actual} bytes, "
            f"expected {expected} ({n_vectors} x {dim} float32)"
        )
    flat = np.fromfile(path, dtype="<f4")
    return flat.astype(np.float64).reshape(n_vectors, dim)


def ingest_dump(manifest_path: str | Path):
    """Yield validated PatchEmbeddingSets for each manifest entry, in order."""
    manifest = load_manifest(manifest_path)
    for entry in manifest.entries:
        vectors = _read_raw_vectors(
            manifest.root / entry.path, entry.n_vectors, manifest.dim, entry.doc_id
        )
        pset = PatchEmbeddingSet(
            doc_id=entry.doc_id,
            dim=manifest.dim,
            grid=PatchGrid(rows=entry.rows, cols=entry.cols),
            vectors=vectors,
        )
        report = validate(pset)
        if not report.ok:
            raise ManifestError(
                f"doc '{entry.doc_id}' failed validation: " + "; ".join(report.violations)
            )
        yield pset


def write_embedding_dump(psets, out_dir: str | Path, location: str = "") -> Path:
    """Write sets as raw float32 files plus a manifest; returns the manifest path."""
    out = Path(out_dir)
    vec_dir = out / "vectors"
    vec_dir.mkdir(parents=True, exist_ok=True)
    sets = list(psets)
    if not sets:
        raise ValueError("refusing to write an empty dump")
    dim = sets[0].dim
    entries = []
    for pset in sets:
        if pset.dim != dim:
            raise ValueError(f"doc '{pset.doc_id}' has dim {pset.dim}, dump expects {dim}")
        rel = f"vectors/{pset.doc_id}.f32"
        pset.vectors.astype("<f4").tofile(out / rel)
        entries.append(
            {
                "doc_id": pset.doc_id,
                "rows": pset.grid.rows,
                "cols": pset.grid.cols,
                "n_vectors": pset.n_vectors,
                "path": rel,
            }
        )
    manifest = {"dim": dim, "location": location, "entries": entries}
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", "utf-8")
    return manifest_path


@dataclass(frozen=True)
class QueryDumpEntry:
    query_id: str
    n_vectors: int
    path: str


@dataclass(frozen=True)
class QueryDumpManifest:
    dim: int
    entries: tuple[QueryDumpEntry, ...]
    root: Path = field(default_factory=Path)


def load_query_manifest(path: str | Path) -> QueryDumpManifest:
    p = Path(path)
    try:
        data = json.loads(p.read_text("utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot parse query manifest {p}: {exc}") from exc
    try:
        dim = int(data["dim"])
        raw_entries = data["entries"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"query manifest {p} is missing dim or entries") from exc
    if dim < 1:
        raise ManifestError(f"query manifest dim must be positive, got {dim}")
    entries = []
    seen: set[str] = set()
    for i, e in enumerate(raw_entries):
        try:
            entry = QueryDumpEntry(
                query_id=str(e["query_id"]),
                n_vectors=int(e["n_vectors"]),
                path=str(e["path"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"query manifest entry {i} is malformed: {exc}") from exc
        if entry.query_id in seen:
            raise ManifestError(f"duplicate query_id '{entry.query_id}' in manifest")
        seen.add(entry.query_id)
        if entry.n_vectors < 1:
            raise ManifestError(f"query '{entry.query_id}': needs at least one token")
        entries.append(entry)
    root = p.parent
    for entry in entries:
        if not (root / entry.path).is_file():
            raise ManifestError(f"query '{entry.query_id}': raw file {entry.path} not found")
    return QueryDumpManifest(dim=dim, entries=tuple(entries), root=root)


def ingest_queries(manifest_path: str | Path):
    """Yield QueryEmbeddingSets for each query manifest entry, in order."""
    manifest = load_query_manifest(manifest_path)
    for entry in manifest.entries:
        vectors = _read_raw_vectors(
            manifest.root / entry.path, entry.n_vectors, manifest.dim, entry.query_id
        )
        try:
            yield QueryEmbeddingSet(query_id=entry.query_id, dim=manifest.dim, vectors=vectors)
        except ValueError as exc:
            raise ManifestError(str(exc)) from exc


def write_query_dump(queries, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    vec_dir = out / "queries"
    vec_dir.mkdir(parents=True, exist_ok=True)
    qs = list(queries)
    if not qs:
        raise ValueError("refusing to write an empty query dump")
    dim = qs[0].dim
    entries = []
    for q in qs:
        if q.dim != dim:
            raise ValueError(f"query '{q.query_id}' has dim {q.dim}, dump expects {dim}")
        rel = f"queries/{q.query_id}.f32"
        q.vectors.astype("<f4").tofile(out / rel)
        entries.append({"query_id": q.query_id, "n_vectors": q.n_tokens, "path": rel})
    manifest = {"dim": dim, "entries": entries}
    manifest_path = out / "queries.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", "utf-8")
    return manifest_path
