"""Offline chunk prefill, online KV assembly, and the one-shot reference path.

Offline, every framed chunk is prefilled on its own (causal mask, positions
0..n-1) and its unrotated K/V are stored. Online, the retrieved caches are
concatenated without running the model over them, given position ids
(``REORDERED`` restores true token offsets, ``COMPOSITE`` keeps each chunk's
local ids) and the query is prefilled against them. ``naive_prefill`` runs
the whole sequence in one forward pass and is the oracle the assembled path
is checked against.
"""

from __future__ import annotations

import enum
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tokenizer
from .attention import MaskMode, Segment, SegmentKind, SegmentLayout, build_mask, query_rows_mask
from .costmodel import FlopsReport, flops
from .kvstore import CacheStore, ChunkKVCache, StaleCacheError, chunk_id_for
from .model import FlopCounter, KVState, ModelWeights, forward_tokens, greedy_decode
from .retrieval import INDEX_FILE, VectorIndex, chunk_document, embed

QUERY_TEMPLATE = (
    "\nAnswer from the documents above. If they do not hold the answer, say so and decline.\n"
    "Question: {question}\nAnswer: "
)
REFUSAL = "I cannot answer: no documents are available to ground a response."


class PositionMode(str, enum.Enum):
    COMPOSITE = "composite"
    REORDERED = "reordered"


class NoContextError(LookupError):
    """The store holds no chunks, so there is nothing to answer from."""


class IngestError(RuntimeError):
    pass


@dataclass
class AssembledContext(KVState):
    """Concatenated KV state for chunks (and, once prefilled, the query/answer tokens)."""

    layout: SegmentLayout = field(default_factory=SegmentLayout)
    mask_mode: MaskMode = MaskMode.INDEPENDENT
    position_mode: PositionMode | None = None
    fingerprint: bytes = b""

    def append(self, new_kv, positions) -> None:
        super().append(new_kv, positions)
        self.layout = self.layout.with_query(len(positions))


def prefill_chunk(weights: ModelWeights, tokens: Sequence[int],
                  counter: FlopCounter | None = None) -> ChunkKVCache:
    """Prefill one framed chunk alone at positions 0..n-1 and keep its unrotated K/V."""
    tokens = [int(t) for t in tokens]
    _, (keys, values) = forward_tokens(weights, tokens, np.arange(len(tokens)), counter=counter)
    fp = weights.fingerprint()
    return ChunkKVCache(chunk_id_for(tokens, fp), tokens, keys, values, fp)


def chunk_positions(lengths: Sequence[int], mode: PositionMode) -> np.ndarray:
    if not lengths:
        return np.zeros(0, dtype=np.int64)
    if PositionMode(mode) is PositionMode.REORDERED:
        return np.arange(sum(lengths), dtype=np.int64)
    return np.concatenate([np.arange(n, dtype=np.int64) for n in lengths])


def assemble_caches(caches: Sequence[ChunkKVCache], mode: PositionMode,
                    layer_num: int | None = None, kv_width: int | None = None) -> AssembledContext:
    """Concatenate chunk caches in order. No forward pass is run."""
    mode = PositionMode(mode)
    if caches:
        layer_num = caches[0].layer_num
        kv_width = caches[0].keys[0].shape[1]
        fps = {c.fingerprint for c in caches}
        if len(fps) != 1:
            raise StaleCacheError("chunk caches come from different models")
        keys = [np.concatenate([c.keys[i] for c in caches]) for i in range(layer_num)]
        values = [np.concatenate([c.values[i] for c in caches]) for i in range(layer_num)]
        fp = caches[0].fingerprint
    else:
        if layer_num is None or kv_width is None:
            raise ValueError("an empty assembly needs layer_num and kv_width")
        keys = [np.zeros((0, kv_width))] * layer_num
        values = [np.zeros((0, kv_width))] * layer_num
        fp = b""
    lengths = [c.token_count for c in caches]
    positions = chunk_positions(lengths, mode)
    layout = SegmentLayout(tuple(Segment(c.chunk_id, SegmentKind.CHUNK, c.token_count) for c in caches))
    next_pos = int(positions.max()) + 1 if positions.size else 0
    return AssembledContext(keys, values, positions, next_pos, None, layout,
                            MaskMode.INDEPENDENT, mode, fp)


def load_caches(chunk_ids: Sequence[str], store: CacheStore,
                expected_fingerprint: bytes | None = None) -> list[ChunkKVCache]:
    return [store.load(cid, expected_fingerprint) for cid in chunk_ids]


def assemble(chunk_ids: Sequence[str], store: CacheStore, mode: PositionMode,
             weights: ModelWeights | None = None) -> AssembledContext:
    fp = weights.fingerprint() if weights is not None else None
    caches = load_caches(chunk_ids, store, fp)
    if weights is not None:
        return assemble_caches(caches, mode, weights.config.layer_num, weights.config.kv_width)
    return assemble_caches(caches, mode)


def prefill_query(context: AssembledContext, weights: ModelWeights, query_tokens: Sequence[int],
                  counter: FlopCounter | None = None):
    """Prefill the query over an assembled context.

    Query tokens get positions ``next_position, next_position+1, ...``; they
    see every chunk token and are causal among themselves. Returns the final
    query token's logits and a new context that includes the query.
    """
    query_tokens = list(query_tokens)
    if not query_tokens:
        raise ValueError("query must contain at least one token")
    n_past, n = context.length, len(query_tokens)
    positions = np.arange(context.next_position, context.next_position + n)
    logits, kv = forward_tokens(weights, query_tokens, positions, past=context,
                                mask=query_rows_mask(n_past, n), counter=counter)
    out = replace(context)
    out.append(kv, positions)
    out.last_logits = logits[-1]
    return logits[-1], out


MaskHook = Callable[[np.ndarray, SegmentLayout], np.ndarray]


def naive_prefill(chunks: Sequence[Sequence[int]], weights: ModelWeights, query_tokens: Sequence[int],
                  mask_mode: MaskMode = MaskMode.INDEPENDENT, counter: FlopCounter | None = None,
                  mask_hook: MaskHook | None = None):
    """One forward pass over ``[c_1, ..., c_k, q]`` at sequential positions 0..N-1.

    ``mask_hook`` may rewrite the mask before use (fault injection in the
    verification harness).
    """
    query_tokens = list(query_tokens)
    if not query_tokens:
        raise ValueError("query must contain at least one token")
    chunks = [list(c) for c in chunks]
    tokens = [t for c in chunks for t in c] + query_tokens
    layout = SegmentLayout.from_lengths([len(c) for c in chunks], len(query_tokens))
    mask = build_mask(layout, mask_mode)
    if mask_hook is not None:
        mask = mask_hook(mask, layout)
    positions = np.arange(len(tokens))
    logits, (keys, values) = forward_tokens(weights, tokens, positions, mask=mask, counter=counter)
    ctx = AssembledContext(keys, values, positions, len(tokens), logits[-1], layout,
                           MaskMode(mask_mode), None, weights.fingerprint())
    return logits[-1], ctx


def turbo_prefill(caches: Sequence[ChunkKVCache], weights: ModelWeights, query_tokens: Sequence[int],
                  mode: PositionMode = PositionMode.REORDERED, counter: FlopCounter | None = None):
    ctx = assemble_caches(caches, mode, weights.config.layer_num, weights.config.kv_width)
    return prefill_query(ctx, weights, query_tokens, counter=counter)


def query_tokens_for(question: str | bytes) -> list[int]:
    if isinstance(question, bytes):
        question = question.decode("utf-8", errors="replace")
    return tokenizer.encode(QUERY_TEMPLATE.format(question=question))


def ingest(corpus: Iterable[tuple[str, bytes]], weights: ModelWeights, store: CacheStore,
           index: VectorIndex | None = None, target_len: int = 256, workers: int = 1) -> int:
    """Chunk, embed, prefill and persist every document; returns the number of distinct chunks.

    Chunks already present in ``store`` are not prefilled again.
    """
    if index is None:
        index = load_index(store)
    fp = weights.fingerprint()
    jobs: dict[str, tuple[str, int, list[int]]] = {}
    for doc_id, text in corpus:
        for i, payload in enumerate(chunk_document(text, target_len)):
            tokens = tokenizer.frame(payload)
            cid = chunk_id_for(tokens, fp)
            index.add_chunk(cid, doc_id, payload)
            jobs.setdefault(cid, (doc_id, i, tokens))

    def run(item):
        cid, (doc_id, i, tokens) = item
        if cid in store:
            return
        try:
            store.store(prefill_chunk(weights, tokens))
        except Exception as exc:
            raise IngestError(f"document {doc_id!r} chunk {i} ({cid}): {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(run, jobs.items()))
    else:
        for item in jobs.items():
            run(item)
    if jobs or not (store.root / INDEX_FILE).exists():
        index.save(store.root / INDEX_FILE)
    return len(jobs)


def load_index(store: CacheStore) -> VectorIndex:
    path = store.root / INDEX_FILE
    return VectorIndex.load(path) if path.exists() else VectorIndex()


PATH_MODES = {
    "turbo-reordered": ("turbo", PositionMode.REORDERED, MaskMode.INDEPENDENT),
    "turbo-composite": ("turbo", PositionMode.COMPOSITE, MaskMode.INDEPENDENT),
    "naive-independent": ("naive", None, MaskMode.INDEPENDENT),
    "naive-causal": ("naive", None, MaskMode.CAUSAL),
}


@dataclass
class AnswerResult:
    mode: str
    text: str
    tokens: list[int]
    retrieved: list[str]
    requested_k: int
    timings: dict[str, float]
    measured_flops: int
    modeled: FlopsReport
    online_prefill_tokens: int
    context_tokens: int

    @property
    def ttft(self) -> float:
        return self.timings["prefill"]


class RagEngine:
    """Weights, cache store and index bundled for end-to-end question answering."""

    def __init__(self, weights: ModelWeights, store: CacheStore, index: VectorIndex | None = None):
        self.weights = weights
        self.store = store
        self.index = index if index is not None else load_index(store)

    @classmethod
    def open(cls, store: CacheStore) -> "RagEngine":
        return cls(store.load_weights(), store)

    def ingest(self, corpus, target_len: int = 256, workers: int = 1) -> int:
        self.store.save_weights(self.weights)
        return ingest(corpus, self.weights, self.store, self.index, target_len, workers)

    def answer(self, question, k: int = 3, mode: str = "turbo-reordered", max_new: int = 32) -> AnswerResult:
        if mode not in PATH_MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {sorted(PATH_MODES)}")
        path, pos_mode, mask_mode = PATH_MODES[mode]
        if len(self.index) == 0:
            raise NoContextError(REFUSAL)
        timings: dict[str, float] = {}
        clock = time.perf_counter
        t0 = clock()
        q_text = question.encode("utf-8") if isinstance(question, str) else bytes(question)
        retrieved = self.index.top_k(embed(tokenizer.encode(q_text) or [0]), k)
        query = query_tokens_for(q_text)
        t1 = clock()
        timings["retrieval"] = t1 - t0

        counter = FlopCounter()
        fp = self.weights.fingerprint()
        if path == "turbo":
            caches = load_caches(retrieved, self.store, fp)
            t2 = clock()
            first, ctx = turbo_prefill(caches, self.weights, query, pos_mode, counter)
        else:
            chunks = [self.index.records[cid].tokens for cid in retrieved]
            t2 = clock()
            first, ctx = naive_prefill(chunks, self.weights, query, mask_mode, counter)
        t3 = clock()
        timings["cache_load"] = t2 - t1
        timings["prefill"] = t3 - t2
        measured = counter.total
        online_tokens = counter.tokens
        n_ctx = ctx.length
        modeled = flops(self.weights.config, online_tokens, n_ctx)

        out = greedy_decode(self.weights, ctx, max_new)
        timings["decode"] = clock() - t3
        return AnswerResult(mode, tokenizer.decode(out), out, retrieved, k, timings,
                            measured, modeled, online_tokens, n_ctx - len(query))
