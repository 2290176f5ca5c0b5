import json
import struct

import numpy as np
import pytest

from colchunk.store import (
    FORMAT_VERSION,
    MAGIC,
    BuildMeta,
    CorpusIndex,
    IndexFormatError,
    ManifestError,
    ingest_dump,
    ingest_queries,
    load_manifest,
    read_index,
    write_embedding_dump,
    write_index,
    write_query_dump,
)
from colchunk.types import CompressedDocument, PatchGrid, QueryEmbeddingSet

from conftest import make_pset


def make_meta(**kw):
    base = dict(
        omega=0.2, k_target=40, method="hac_ward", posenc_base=10000.0,
        tool_version="0.1.0", embedding_location="unit-test",
    )
    base.update(kw)
    return BuildMeta(**base)


def make_index(rng, n_docs=3, dim=8, k=4):
    docs = []
    for i in range(n_docs):
        chunks = rng.normal(size=(k, dim))
        chunks /= np.linalg.norm(chunks, axis=1, keepdims=True)
        # write-ready: chunks must survive the f32 roundtrip bit-for-bit
        chunks = chunks.astype(np.float32).astype(np.float64)
        docs.append(
            CompressedDocument(
                doc_id=f"doc{i}", k=k, dim=dim, chunks=chunks,
                chunk_sizes=rng.integers(1, 9, size=k),
            )
        )
    return CorpusIndex(dim=dim, docs=tuple(docs), build_meta=make_meta())


class TestIndexRoundTrip:
    def test_write_read_write_is_byte_identical(self, rng, tmp_path):
        index = make_index(rng)
        p1, p2 = tmp_path / "a.cchk", tmp_path / "b.cchk"
        write_index(index, p1)
        write_index(read_index(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_content_survives(self, rng, tmp_path):
        index = make_index(rng, n_docs=2, dim=16, k=3)
        path = tmp_path / "t.cchk"
        write_index(index, path)
        back = read_index(path)
        assert back.dim == 16
        assert len(back) == 2
        assert back.build_meta == index.build_meta
        for orig, got in zip(index.docs, back.docs):
            assert got.doc_id == orig.doc_id
            np.testing.assert_array_equal(got.chunk_sizes, orig.chunk_sizes)
            np.testing.assert_array_equal(
                got.chunks, orig.chunks.astype(np.float32).astype(np.float64)
            )

    def test_empty_corpus(self, tmp_path):
        index = CorpusIndex(dim=8, docs=(), build_meta=make_meta())
        path = tmp_path / "empty.cchk"
        write_index(index, path)
        back = read_index(path)
        assert len(back) == 0
        assert back.dim == 8

    def test_exact_byte_layout(self, rng, tmp_path):
        # header 20, per doc: 2 + len(id) + 4 + 4k + 4k*dim, then trailer + 8
        index = make_index(rng, n_docs=2, dim=8, k=3)
        path = tmp_path / "t.cchk"
        write_index(index, path)
        trailer = json.dumps(
            index.build_meta.to_dict(), sort_keys=True, separators=(",", ":")
        ).encode()
        per_doc = 2 + len("doc0") + 4 + 4 * 3 + 4 * 3 * 8
        expected = 20 + 2 * per_doc + len(trailer) + 8
        assert path.stat().st_size == expected

    def test_unicode_doc_ids(self, rng, tmp_path):
        chunks = np.eye(2, 4)
        doc = CompressedDocument(
            doc_id="påge-中文", k=2, dim=4, chunks=chunks,
            chunk_sizes=np.array([1, 1]),
        )
        index = CorpusIndex(dim=4, docs=(doc,), build_meta=make_meta())
        path = tmp_path / "u.cchk"
        write_index(index, path)
        assert read_index(path).docs[0].doc_id == "påge-中文"

    def test_oversized_doc_id_rejected_on_write(self, tmp_path):
        chunks = np.eye(1, 4)
        doc = CompressedDocument(
            doc_id="x" * 70000, k=1, dim=4, chunks=chunks, chunk_sizes=np.array([1])
        )
        index = CorpusIndex(dim=4, docs=(doc,), build_meta=make_meta())
        with pytest.raises(ValueError):
            write_index(index, tmp_path / "big.cchk")


class TestIndexCorruption:
    @pytest.fixture
    def good_file(self, rng, tmp_path):
        path = tmp_path / "good.cchk"
        write_index(make_index(rng), path)
        return path

    def test_bad_magic(self, good_file):
        raw = bytearray(good_file.read_bytes())
        raw[:4] = b"JUNK"
        good_file.write_bytes(bytes(raw))
        with pytest.raises(IndexFormatError, match="magic"):
            read_index(good_file)

    def test_unsupported_version(self, good_file):
        raw = bytearray(good_file.read_bytes())
        raw[4:8] = struct.pack("<I", FORMAT_VERSION + 7)
        good_file.write_bytes(bytes(raw))
        with pytest.raises(IndexFormatError, match="version"):
            read_index(good_file)

    @pytest.mark.parametrize("keep", [3, 10, 19, 25, 60])
    def test_truncation_anywhere(self, good_file, keep):
        good_file.write_bytes(good_file.read_bytes()[:keep])
        with pytest.raises(IndexFormatError):
            read_index(good_file)

    def test_trailer_length_disagreement(self, good_file):
        raw = bytearray(good_file.read_bytes())
        raw[-8:] = struct.pack("<Q", 2**40)
        good_file.write_bytes(bytes(raw))
        with pytest.raises(IndexFormatError, match="trailer"):
            read_index(good_file)

    def test_zero_k_rejected(self, rng, tmp_path):
        # hand-build a file with k=0 for its only doc
        path = tmp_path / "k0.cchk"
        trailer = json.dumps(make_meta().to_dict(), sort_keys=True,
                             separators=(",", ":")).encode()
        blob = (
            MAGIC + struct.pack("<I", FORMAT_VERSION) + struct.pack("<I", 4)
            + struct.pack("<Q", 1) + struct.pack("<H", 1) + b"d"
            + struct.pack("<I", 0) + trailer + struct.pack("<Q", len(trailer))
        )
        path.write_bytes(blob)
        with pytest.raises(IndexFormatError, match="invalid k"):
            read_index(path)

    def test_non_unit_chunks_rejected(self, good_file):
        # scale the first doc's vector payload: header 20, id len 2 + 4,
        # k field 4, sizes 16, then 4*8 f32 chunk floats
        raw = bytearray(good_file.read_bytes())
        off = 20 + 2 + 4 + 4 + 16
        floats = np.frombuffer(bytes(raw[off : off + 4 * 4 * 8]), dtype="<f4") * 3.0
        raw[off : off + 4 * 4 * 8] = floats.astype("<f4").tobytes()
        good_file.write_bytes(bytes(raw))
        with pytest.raises(IndexFormatError, match="invariants"):
            read_index(good_file)

    def test_garbage_metadata(self, good_file):
        raw = bytearray(good_file.read_bytes())
        # trash the first trailer byte ('{' becomes '!')
        trailer_len = struct.unpack("<Q", bytes(raw[-8:]))[0]
        raw[-8 - trailer_len] = ord("!")
        good_file.write_bytes(bytes(raw))
        with pytest.raises(IndexFormatError, match="metadata"):
            read_index(good_file)

    def test_metadata_missing_field(self):
        with pytest.raises(IndexFormatError, match="omega"):
            BuildMeta.from_dict({"k_target": 40})

    def test_nonexistent_file(self, tmp_path):
        with pytest.raises(OSError):
            read_index(tmp_path / "missing.cchk")


class TestEmbeddingDump:
    def test_roundtrip(self, rng, tmp_path):
        psets = [make_pset(rng, doc_id=f"d{i}") for i in range(3)]
        manifest = write_embedding_dump(psets, tmp_path / "dump", location="test-corpus")
        loaded = load_manifest(manifest)
        assert loaded.dim == 8
        assert loaded.location == "test-corpus"
        back = list(ingest_dump(manifest))
        assert [p.doc_id for p in back] == ["d0", "d1", "d2"]
        for orig, got in zip(psets, back):
            assert got.grid == orig.grid
            np.testing.assert_array_equal(
                got.vectors, orig.vectors.astype(np.float32).astype(np.float64)
            )

    def test_duplicate_doc_id_rejected_before_reading_files(self, tmp_path):
        # both entries point at a file that does not exist; the duplicate
        # check must fire first
        manifest = tmp_path / "manifest.json"
        entry = {"doc_id": "d0", "rows": 2, "cols": 2, "n_vectors": 4,
                 "path": "vectors/nope.f32"}
        manifest.write_text(json.dumps({"dim": 8, "entries": [entry, entry]}))
        with pytest.raises(ManifestError, match="duplicate"):
            load_manifest(manifest)

    def test_missing_raw_file_names_doc(self, rng, tmp_path):
        psets = [make_pset(rng, doc_id="keeper")]
        manifest = write_embedding_dump(psets, tmp_path)
        (tmp_path / "vectors" / "keeper.f32").unlink()
        with pytest.raises(ManifestError, match="keeper"):
            load_manifest(manifest)

    def test_size_mismatch_names_doc(self, rng, tmp_path):
        psets = [make_pset(rng, doc_id="short")]
        manifest = write_embedding_dump(psets, tmp_path)
        raw = tmp_path / "vectors" / "short.f32"
        raw.write_bytes(raw.read_bytes()[:-4])
        with pytest.raises(ManifestError, match="short"):
            list(ingest_dump(manifest))

    def test_grid_count_disagreement(self, tmp_path):
        manifest = tmp_path / "manifest.json"
        manifest.write_text(json.dumps({
            "dim": 8,
            "entries": [{"doc_id": "d", "rows": 2, "cols": 2, "n_vectors": 5,
                         "path": "d.f32"}],
        }))
        with pytest.raises(ManifestError, match="n_vectors"):
            load_manifest(manifest)

    def test_unparseable_json(self, tmp_path):
        manifest = tmp_path / "manifest.json"
        manifest.write_text("{not json")
        with pytest.raises(ManifestError):
            load_manifest(manifest)

    def test_nonfinite_vectors_rejected_at_ingest(self, rng, tmp_path):
        psets = [make_pset(rng, doc_id="nan-doc")]
        manifest = write_embedding_dump(psets, tmp_path)
        raw_path = tmp_path / "vectors" / "nan-doc.f32"
        data = np.frombuffer(raw_path.read_bytes(), dtype="<f4").copy()
        data[5] = np.nan
        raw_path.write_bytes(data.astype("<f4").tobytes())
        with pytest.raises(ManifestError, match="nan-doc"):
            list(ingest_dump(manifest))


class TestQueryDump:
    def test_roundtrip(self, rng, tmp_path):
        queries = [
            QueryEmbeddingSet(query_id=f"q{i}", dim=8,
                              vectors=rng.normal(size=(3 + i, 8)))
            for i in range(2)
        ]
        manifest = write_query_dump(queries, tmp_path)
        back = list(ingest_queries(manifest))
        assert [q.query_id for q in back] == ["q0", "q1"]
        assert [q.n_tokens for q in back] == [3, 4]
        for orig, got in zip(queries, back):
            np.testing.assert_array_equal(
                got.vectors, orig.vectors.astype(np.float32).astype(np.float64)
            )

    def test_missing_query_file(self, rng, tmp_path):
        queries = [QueryEmbeddingSet(query_id="q0", dim=8,
                                     vectors=rng.normal(size=(2, 8)))]
        manifest = write_query_dump(queries, tmp_path)
        (tmp_path / "queries" / "q0.f32").unlink()
        with pytest.raises(ManifestError, match="q0"):
            list(ingest_queries(manifest))
