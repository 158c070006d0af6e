"""``ragkv`` command line.

Exit codes: 0 ok, 1 a verified property failed, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from importlib import resources
from pathlib import Path

from . import __version__
from .bench import DEFAULT_GRID, medians, run_bench, speedups, write_csv
from .container import FormatError
from .costmodel import compare
from .kvstore import STORE_ENV, CacheStore, StaleCacheError, StoreIOError
from .model import QWEN2_7B_CONFIG, TOY_CONFIG, ModelConfig, init_random
from .pipeline import PATH_MODES, REFUSAL, NoContextError, RagEngine
from .verify import FAULTS, Case, generate_cases, run_verify

REPORT_SCHEMA_VERSION = 1
PRESETS = {"toy": TOY_CONFIG, "qwen2-7b": QWEN2_7B_CONFIG}
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"values must be >= 1: {text!r}")
    return values


def _seed_range(text: str) -> range:
    try:
        lo, _, hi = text.partition(":")
        return range(int(lo), int(hi)) if hi else range(int(lo), int(lo) + 1)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected START:STOP, got {text!r}") from None


def _add_model_flags(p: argparse.ArgumentParser, default_preset: str = "toy") -> None:
    g = p.add_argument_group("model config")
    g.add_argument("--preset", choices=sorted(PRESETS), default=default_preset)
    g.add_argument("--layers", type=_positive_int)
    g.add_argument("--heads", type=_positive_int)
    g.add_argument("--kv-heads", type=_positive_int)
    g.add_argument("--head-size", type=_positive_int)
    g.add_argument("--intermediate", type=_positive_int)


def _config_from(args) -> ModelConfig:
    base = PRESETS[args.preset].to_dict()
    overrides = {"layer_num": args.layers, "head_num": args.heads, "kv_head_num": args.kv_heads,
                 "head_size": args.head_size, "intermediate_size": args.intermediate}
    base.update({k: v for k, v in overrides.items() if v is not None})
    base["hidden_size"] = base["head_num"] * base["head_size"]
    try:
        return ModelConfig(**base)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _store_from(args) -> CacheStore:
    try:
        return CacheStore(args.store)
    except StoreIOError as exc:
        raise UsageError(str(exc)) from None


def _emit_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def read_corpus(path: Path) -> list[tuple[str, bytes]]:
    if path.is_dir():
        files = sorted(p for p in path.rglob("*") if p.is_file() and not p.name.startswith("."))
        return [(str(p.relative_to(path)), p.read_bytes()) for p in files]
    return [(path.name, path.read_bytes())]


def sample_corpus_path() -> Path:
    return Path(str(resources.files("ragkv") / "data" / "sample_corpus"))


def cmd_ingest(args) -> int:
    corpus_path = Path(args.corpus) if args.corpus else sample_corpus_path()
    if not corpus_path.exists():
        print(f"error: corpus path {corpus_path} does not exist", file=sys.stderr)
        return EXIT_USAGE
    try:
        corpus = read_corpus(corpus_path)
    except OSError as exc:
        print(f"error: cannot read corpus {corpus_path}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    cfg = _config_from(args)
    store = _store_from(args)
    weights = init_random(cfg, args.seed)
    try:
        existing = store.load_weights() if (store.root / "weights.tkvc").exists() else None
    except (FormatError, StoreIOError) as exc:
        raise UsageError(str(exc)) from None
    if existing is not None and existing.fingerprint() != weights.fingerprint():
        raise UsageError(f"store {store.root} was built with a different model; use a fresh store")

    before = len(store)
    t0 = time.perf_counter()
    engine = RagEngine(weights, store)
    n = engine.ingest(corpus, target_len=args.target_len, workers=args.workers)
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "command": "ingest",
        "store": str(store.root),
        "config": cfg.to_dict(),
        "seed": args.seed,
        "documents": len(corpus),
        "chunks": n,
        "new_records": len(store) - before,
        "bytes_written": store.bytes_written,
        "timings": {"ingest": time.perf_counter() - t0},
    }
    if args.json:
        _emit_json(report)
    else:
        print(f"ingested {len(corpus)} documents -> {n} chunks "
              f"({report['new_records']} new, {store.bytes_written} bytes) into {store.root}")
    return EXIT_OK


def cmd_ask(args) -> int:
    store = _store_from(args)
    warnings: list[str] = []
    if len(store) == 0 or not (store.root / "weights.tkvc").exists():
        if args.json:
            _emit_json({"schema_version": REPORT_SCHEMA_VERSION, "command": "ask", "refused": True,
                        "mode": args.mode, "output": {"text": REFUSAL, "tokens": []}})
        else:
            print(REFUSAL)
        return EXIT_OK
    try:
        engine = RagEngine.open(store)
    except (FormatError, StoreIOError) as exc:
        raise UsageError(str(exc)) from None
    if args.k > len(engine.index):
        warnings.append(f"k={args.k} exceeds the {len(engine.index)} indexed chunks; using all of them")
        print(f"warning: {warnings[-1]}", file=sys.stderr)
    try:
        res = engine.answer(args.question, k=args.k, mode=args.mode, max_new=args.max_new)
    except NoContextError:
        print(REFUSAL)
        return EXIT_OK
    except StaleCacheError as exc:
        raise UsageError(str(exc)) from None
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "command": "ask",
        "refused": False,
        "mode": res.mode,
        "config": engine.weights.config.to_dict(),
        "retrieved": res.retrieved,
        "k_requested": args.k,
        "k_used": len(res.retrieved),
        "timings": res.timings,
        "ttft_ms": res.ttft * 1e3,
        "tokens": {"online_prefill": res.online_prefill_tokens, "context": res.context_tokens},
        "flops": {"measured": res.measured_flops, "modeled": res.modeled.total},
        "output": {"text": res.text, "tokens": res.tokens},
        "warnings": warnings,
    }
    if args.json:
        _emit_json(report)
    else:
        print(res.text)
        print(f"[{res.mode}] ttft {res.ttft * 1e3:.3f} ms, online prefill {res.online_prefill_tokens} "
              f"tokens, {res.measured_flops} FLOPs, retrieved {len(res.retrieved)} chunks", file=sys.stderr)
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.case:
        try:
            cases = [Case.parse(c) for c in args.case]
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        rope_cases, witness = 0, False
    elif args.rope_only:
        cases, rope_cases, witness = [], args.rope_cases, False
    else:
        cases = generate_cases(args.seeds, args.cases_per_seed, args.max_chunks,
                               args.max_chunk_len, args.max_query_len)
        rope_cases, witness = args.rope_cases, True
    log = (lambda line: print(line, file=sys.stderr)) if args.verbose else None
    report = run_verify(cases, args.decode_len, args.inject_fault, rope_cases, args.rope_seed,
                        witness, log=log)
    summary = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "command": "verify",
        "ok": report.ok,
        "cases": len(report.results),
        "max_logits_diff": report.max_logits_diff,
        "max_composite_diff": report.max_composite_diff,
        "rope_cases": report.rope_cases,
        "rope_max_diff": report.rope_max_diff,
        "failures": [{"check": f.check, "detail": f.detail, "repro": f.repro} for f in report.failures],
    }
    if args.json:
        _emit_json(summary)
    else:
        print(f"{len(report.results)} cases, max |turbo-naive| {report.max_logits_diff:.3e}, "
              f"max composite divergence {report.max_composite_diff:.3e}, "
              f"rope max diff {report.rope_max_diff:.3e} over {report.rope_cases} cases")
        for f in report.failures:
            print(f"FAIL {f.check}: {f.detail}\n  reproduce: {f.repro}")
        print("PASS" if report.ok else "FAIL")
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_flops(args) -> int:
    if args.chunk_tokens < 1 or args.query_tokens < 1:
        raise UsageError("--chunk-tokens and --query-tokens must be >= 1")
    cfg = _config_from(args)
    rows = [compare(cfg, args.chunk_tokens, args.query_tokens, b) for b in args.batches]
    if args.json:
        _emit_json({
            "schema_version": REPORT_SCHEMA_VERSION,
            "command": "flops",
            "config": cfg.to_dict(),
            "chunk_tokens": args.chunk_tokens,
            "query_tokens": args.query_tokens,
            "rows": [{"batch": r.naive.batch, "naive_tflops": round(r.naive.tflops, 2),
                      "turbo_tflops": round(r.turbo.tflops, 2), "naive_flops": r.naive.total,
                      "turbo_flops": r.turbo.total, "reduction_percent": r.reduction_percent}
                     for r in rows],
        })
        return EXIT_OK
    print(f"{'batch':>5}  {'naive TFLOPs':>12}  {'turbo TFLOPs':>12}  {'reduction':>9}")
    for r in rows:
        print(f"{r.naive.batch:>5}  {r.naive.tflops:>12.2f}  {r.turbo.tflops:>12.2f}  "
              f"{r.reduction_percent:>8.2f}%")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.repetitions < 1:
        raise UsageError("--repetitions must be >= 1")
    if args.synthetic:
        store, weights = None, init_random(_config_from(args), args.seed)
    else:
        store = _store_from(args)
        try:
            weights = store.load_weights()
        except (FormatError, StoreIOError, KeyError) as exc:
            raise UsageError(f"cannot use store {store.root}: {exc}") from None
    try:
        rows = run_bench(weights, args.doc_tokens, args.query_tokens, args.repetitions,
                         store=store, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_csv(rows, fh)
    else:
        write_csv(rows, sys.stdout)
    med = medians(rows)
    for doc, sp in speedups(rows).items():
        print(f"doc_tokens={doc}: turbo {med[(doc, 'turbo-reordered')]:.3f} ms, "
              f"naive {med[(doc, 'naive-independent')]:.3f} ms, speedup {sp:.1f}x", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ragkv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def store_flag(p):
        p.add_argument("--store", help=f"cache store directory (default: ${STORE_ENV})")

    p = sub.add_parser("ingest", help="chunk, embed and prefill a corpus into a cache store")
    p.add_argument("corpus", nargs="?", help="file or directory (default: bundled sample corpus)")
    store_flag(p)
    _add_model_flags(p)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--target-len", type=int, default=256)
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("ask", help="answer a question from the store")
    p.add_argument("question")
    store_flag(p)
    p.add_argument("--k", type=_positive_int, default=3)
    p.add_argument("--mode", choices=sorted(PATH_MODES), default="turbo-reordered")
    p.add_argument("--max-new", type=int, default=32)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_ask)

    p = sub.add_parser("verify", help="run the equivalence/invariant matrix")
    p.add_argument("--seeds", type=_seed_range, default=range(0, 5))
    p.add_argument("--cases-per-seed", type=_positive_int, default=40)
    p.add_argument("--max-chunks", type=_positive_int, default=8)
    p.add_argument("--max-chunk-len", type=_positive_int, default=64)
    p.add_argument("--max-query-len", type=_positive_int, default=32)
    p.add_argument("--decode-len", type=int, default=32)
    p.add_argument("--rope-cases", type=int, default=1000)
    p.add_argument("--rope-seed", type=int, default=0)
    p.add_argument("--rope-only", action="store_true")
    p.add_argument("--case", action="append", metavar="SEED:LENS:QLEN",
                   help="run one explicit case (repeatable), e.g. 3:5,12,1:7")
    p.add_argument("--inject-fault", choices=FAULTS,
                   help="self-test: corrupt the reference path so the harness must fail")
    p.add_argument("--json", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("flops", help="analytic FLOP table, naive vs cached prefill")
    _add_model_flags(p, default_preset="qwen2-7b")
    p.add_argument("--chunk-tokens", type=int, default=8192)
    p.add_argument("--query-tokens", type=int, default=128)
    p.add_argument("--batches", type=_int_list, default=[1, 2, 4, 6, 8])
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("bench", help="TTFT benchmark over a doc-length grid (CSV)")
    store_flag(p)
    p.add_argument("--synthetic", action="store_true", help="random chunks instead of a store")
    _add_model_flags(p)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--doc-tokens", type=_int_list, default=list(DEFAULT_GRID))
    p.add_argument("--query-tokens", type=_positive_int, default=64)
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
