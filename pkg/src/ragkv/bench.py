"""TTFT benchmark: assembled-cache prefill versus one-shot prefill.

Each (doc length, path) pair gets one discarded warm-up call followed by
``repetitions`` timed calls on ``time.perf_counter``. Caches are held in
memory during timing, so the turbo figure excludes disk reads (the analogue
of a host-to-device copy).
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .attention import MaskMode
from .kvstore import CacheStore, ChunkKVCache
from .model import FlopCounter, ModelWeights
from .pipeline import PositionMode, naive_prefill, prefill_chunk, turbo_prefill

CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = ["schema_version", "doc_tokens", "query_tokens", "path", "repetition",
               "ttft_ms", "measured_flops"]
PATHS = ("turbo-reordered", "naive-independent")
DEFAULT_GRID = (512, 1024, 2048, 4096)


@dataclass
class BenchRow:
    doc_tokens: int
    query_tokens: int
    path: str
    repetition: int
    ttft_ms: float
    measured_flops: int
    schema_version: int = CSV_SCHEMA_VERSION


def synthetic_caches(weights: ModelWeights, doc_tokens: int, chunk_len: int = 256,
                     seed: int = 0) -> list[ChunkKVCache]:
    rng = np.random.default_rng([seed, doc_tokens])
    sizes = [chunk_len] * (doc_tokens // chunk_len)
    if doc_tokens % chunk_len:
        sizes.append(doc_tokens % chunk_len)
    return [prefill_chunk(weights, rng.integers(0, 256, size=n).tolist()) for n in sizes]


def store_caches(store: CacheStore, weights: ModelWeights, doc_tokens: int) -> list[ChunkKVCache]:
    """Stored chunks in id order, cycled, with the last one cut to hit ``doc_tokens`` exactly."""
    ids = store.ids()
    if not ids:
        raise ValueError(f"store {store.root} is empty")
    fp = weights.fingerprint()
    loaded = [store.load(cid, fp) for cid in ids]
    out, total, i = [], 0, 0
    while total < doc_tokens:
        c = loaded[i % len(loaded)]
        take = min(c.token_count, doc_tokens - total)
        out.append(c if take == c.token_count else c.prefix(take))
        total += take
        i += 1
    return out


def _time_path(path, weights, caches, query, repetitions):
    chunks = [c.tokens for c in caches]
    times, flops = [], 0
    for rep in range(repetitions + 1):
        counter = FlopCounter()
        t0 = time.perf_counter()
        if path == "turbo-reordered":
            turbo_prefill(caches, weights, query, PositionMode.REORDERED, counter)
        else:
            naive_prefill(chunks, weights, query, MaskMode.INDEPENDENT, counter)
        elapsed = time.perf_counter() - t0
        if rep:
            times.append(elapsed)
            flops = counter.total
    return times, flops


def run_bench(weights: ModelWeights, doc_grid: Sequence[int] = DEFAULT_GRID, query_tokens: int = 64,
              repetitions: int = 5, store: CacheStore | None = None, chunk_len: int = 256,
              seed: int = 0, paths: Iterable[str] = PATHS) -> list[BenchRow]:
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if query_tokens < 1 or any(d < 1 for d in doc_grid):
        raise ValueError("doc and query token counts must be >= 1")
    query = np.random.default_rng([seed, 1 << 20]).integers(0, 256, size=query_tokens).tolist()
    rows: list[BenchRow] = []
    for doc in doc_grid:
        if store is not None:
            caches = store_caches(store, weights, doc)
        else:
            caches = synthetic_caches(weights, doc, chunk_len, seed)
        for path in paths:
            times, measured = _time_path(path, weights, caches, query, repetitions)
            rows += [BenchRow(doc, query_tokens, path, i, t * 1e3, measured) for i, t in enumerate(times)]
    return rows


def medians(rows: Iterable[BenchRow]) -> dict[tuple[int, str], float]:
    groups: dict[tuple[int, str], list[float]] = {}
    for r in rows:
        groups.setdefault((r.doc_tokens, r.path), []).append(r.ttft_ms)
    return {key: statistics.median(v) for key, v in groups.items()}


def speedups(rows: Iterable[BenchRow], fast: str = PATHS[0], slow: str = PATHS[1]) -> dict[int, float]:
    med = medians(rows)
    docs = sorted({d for d, _ in med})
    return {d: med[(d, slow)] / med[(d, fast)] for d in docs if (d, fast) in med and (d, slow) in med}


def write_csv(rows: Iterable[BenchRow], fh) -> None:
    w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
    w.writeheader()
    for r in rows:
        d = asdict(r)
        d["ttft_ms"] = f"{r.ttft_ms:.4f}"
        w.writerow(d)
