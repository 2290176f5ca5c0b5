"""Command-line interface: compress, query, eval, bench.

Exit codes: 0 on success, 1 on data or runtime errors, 2 on usage errors
(argparse's own convention). Worker-pool size comes from --threads, the
COLCHUNK_THREADS environment variable, or the logical core count, in that
order. Outputs are byte-identical across thread counts.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import __version__
from .chunker import ChunkerConfig, compress_many
from .evaluation import (
    EvalInputError,
    Qrels,
    SweepSpec,
    SyntheticSpec,
    evaluate_run,
    generate_synthetic,
    ndcg_at_k,
    read_run,
    rows_to_csv,
    run_ablation,
    write_run,
)
from .posenc import PosEncConfig
from .scorer import retrieve
from .store import (
    BuildMeta,
    CorpusIndex,
    IndexFormatError,
    ManifestError,
    ingest_dump,
    ingest_queries,
    load_manifest,
    read_index,
    write_index,
)
from .types import PatchGrid

METHOD_ALIASES = {"hac": "hac_ward", "hac_ward": "hac_ward", "kmeans": "kmeans"}


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _unit_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"omega must lie in [0, 1], got {value}")
    return value


def _default_threads() -> int:
    env = os.environ.get("COLCHUNK_THREADS", "").strip()
    if env:
        try:
            n = int(env)
            if n >= 1:
                return n
        except ValueError:
            pass
    return os.cpu_count() or 1


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(_positive_int(part) for part in text.split(",") if part.strip())


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(_unit_float(part) for part in text.split(",") if part.strip())


def _method_list(text: str) -> tuple[str, ...]:
    methods = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if part not in METHOD_ALIASES:
            raise argparse.ArgumentTypeError(f"unknown method {part!r}")
        methods.append(METHOD_ALIASES[part])
    return tuple(methods)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="colchunk",
        description="Compress patch-embedding dumps into chunk indexes and query them.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_compress = sub.add_parser("compress", help="build a chunk index from an embedding dump")
    p_compress.add_argument("manifest", help="embedding dump manifest (JSON)")
    p_compress.add_argument("index", help="output index file")
    p_compress.add_argument("--k", type=_positive_int, default=40, help="chunks per page")
    p_compress.add_argument("--omega", type=_unit_float, default=0.2, help="positional weight")
    p_compress.add_argument(
        "--method", choices=sorted(METHOD_ALIASES), default="hac", help="clustering method"
    )
    p_compress.add_argument("--posenc-base", type=float, default=10000.0)
    p_compress.add_argument(
        "--no-normalize-semantic",
        action="store_true",
        help="fuse raw semantic vectors instead of unit-normalized ones",
    )
    p_compress.add_argument("--seed", type=int, default=0, help="k-means seed")
    p_compress.add_argument("--threads", type=_positive_int, default=None)

    p_query = sub.add_parser("query", help="run queries against an index")
    p_query.add_argument("index", help="index file")
    p_query.add_argument("queries", help="query dump manifest (JSON)")
    p_query.add_argument("--top-k", type=_positive_int, default=10)
    p_query.add_argument("--out", default=None, help="run file path (default: stdout)")
    p_query.add_argument("--run-tag", default="colchunk")
    p_query.add_argument("--threads", type=_positive_int, default=None)

    p_eval = sub.add_parser("eval", help="score a run file against qrels")
    p_eval.add_argument("run", help="TREC run file")
    p_eval.add_argument("qrels", help="TREC qrels file")
    p_eval.add_argument("--k", type=_positive_int, default=5, help="nDCG cutoff")

    p_bench = sub.add_parser("bench", help="synthetic benchmark plus ablation table")
    p_bench.add_argument("--num-docs", type=_positive_int, default=100)
    p_bench.add_argument("--num-queries", type=_positive_int, default=20)
    p_bench.add_argument("--grid-rows", type=_positive_int, default=32)
    p_bench.add_argument("--grid-cols", type=_positive_int, default=24)
    p_bench.add_argument("--dim", type=_positive_int, default=128)
    p_bench.add_argument("--signal-patches", type=_positive_int, default=16)
    p_bench.add_argument("--noise-sigma", type=float, default=0.5)
    p_bench.add_argument("--query-tokens", type=_positive_int, default=64)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--sweep-k", type=_int_list, default=())
    p_bench.add_argument("--sweep-omega", type=_float_list, default=())
    p_bench.add_argument("--methods", type=_method_list, default=())
    p_bench.add_argument("--k", type=_positive_int, default=40, help="base k for sweeps")
    p_bench.add_argument("--omega", type=_unit_float, default=0.2, help="base omega for sweeps")
    p_bench.add_argument("--no-baseline", action="store_true", help="skip the K=1 row")
    p_bench.add_argument("--workdir", default=None, help="keep generated dumps here")
    p_bench.add_argument("--out", default=None, help="CSV path (default: stdout)")
    p_bench.add_argument("--threads", type=_positive_int, default=None)

    return parser


def cmd_compress(args) -> int:
    threads = args.threads or _default_threads()
    cfg = ChunkerConfig(
        k=args.k,
        omega=args.omega,
        method=METHOD_ALIASES[args.method],
        seed=args.seed,
        normalize_semantic_before_fusion=not args.no_normalize_semantic,
    )
    sets = list(ingest_dump(args.manifest))
    if not sets:
        print("error: the dump manifest lists no documents", file=sys.stderr)
        return 1
    location = load_manifest(args.manifest).location
    pe = PosEncConfig(dim=sets[0].dim, base=args.posenc_base)
    docs = compress_many(sets, cfg, pe, threads=threads)
    meta = BuildMeta(
        omega=cfg.omega,
        k_target=cfg.k,
        method=cfg.method,
        posenc_base=pe.base,
        tool_version=__version__,
        embedding_location=location,
    )
    index = CorpusIndex(dim=sets[0].dim, docs=tuple(docs), build_meta=meta)
    write_index(index, args.index)
    total_in = sum(s.n_vectors for s in sets)
    total_out = sum(d.k for d in docs)
    payload_out = total_out * sets[0].dim * 4
    payload_in = total_in * sets[0].dim * 4
    reduction = 100.0 * (1.0 - total_out / total_in)
    print(f"docs: {len(docs)}")
    print(f"mean patch vectors per doc: {total_in / len(docs):.1f}")
    print(f"mean chunks per doc: {total_out / len(docs):.1f}")
    print(f"vector payload: {payload_out} bytes (raw dump payload: {payload_in})")
    print(f"vector-count reduction: {reduction:.1f}%")
    print(f"index written: {args.index} ({Path(args.index).stat().st_size} bytes)")
    return 0


def cmd_query(args) -> int:
    threads = args.threads or _default_threads()
    index = read_index(args.index)
    queries = list(ingest_queries(args.queries))
    if not queries:
        print("error: the query manifest lists no queries", file=sys.stderr)
        return 1

    def run_one(q):
        return retrieve(q, index, top_k=args.top_k)

    if threads > 1 and len(queries) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            all_hits = list(pool.map(run_one, queries))
    else:
        all_hits = [run_one(q) for q in queries]
    hits_by_query = {q.query_id: hits for q, hits in zip(queries, all_hits)}
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            write_run(hits_by_query, fh, run_tag=args.run_tag)
    else:
        write_run(hits_by_query, sys.stdout, run_tag=args.run_tag)
    return 0


def cmd_eval(args) -> int:
    run = read_run(args.run)
    qrels = Qrels.from_file(args.qrels)
    if not run:
        print("error: the run file is empty", file=sys.stderr)
        return 1
    per_query = {qid: ndcg_at_k(run[qid], qrels.judged(qid), args.k) for qid in sorted(run)}
    mean = sum(per_query.values()) / len(per_query)
    print(f"query_id,ndcg_at_{args.k}")
    for qid, value in per_query.items():
        print(f"{qid},{value:.6f}")
    print(f"all,{mean:.6f}")
    return 0


def cmd_bench(args) -> int:
    threads = args.threads or _default_threads()
    spec = SyntheticSpec(
        num_docs=args.num_docs,
        num_queries=args.num_queries,
        grid=PatchGrid(rows=args.grid_rows, cols=args.grid_cols),
        dim=args.dim,
        signal_patches=args.signal_patches,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
        query_tokens=args.query_tokens,
    )
    sweep = SweepSpec(
        k_values=args.sweep_k,
        omega_values=args.sweep_omega,
        methods=args.methods,
        base_k=args.k,
        base_omega=args.omega,
        seed=args.seed,
        include_baseline=not args.no_baseline,
    )
    with tempfile.TemporaryDirectory() as tmp:
        workdir = Path(args.workdir) if args.workdir else Path(tmp)
        dataset = generate_synthetic(spec, workdir)
        docs = list(ingest_dump(dataset.doc_manifest))
        queries = list(ingest_queries(dataset.query_manifest))
        qrels = Qrels.from_file(dataset.qrels_path)
        rows = run_ablation(docs, queries, qrels, sweep, threads=threads)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            rows_to_csv(rows, fh)
    else:
        rows_to_csv(rows, sys.stdout)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "compress": cmd_compress,
        "query": cmd_query,
        "eval": cmd_eval,
        "bench": cmd_bench,
    }
    try:
        return handlers[args.command](args)
    except (IndexFormatError, ManifestError, EvalInputError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
