"""Precomputed per-chunk KV caches for retrieval-augmented prefill."""

from .attention import MaskMode, SegmentLayout, attend, build_mask
from .costmodel import FlopsReport, compare, flops
from .kvstore import CacheStore, ChunkKVCache
from .model import QWEN2_7B_CONFIG, TOY_CONFIG, FlopCounter, ModelConfig, ModelWeights, init_random
from .pipeline import (AssembledContext, PositionMode, RagEngine, assemble, assemble_caches,
                       ingest, naive_prefill, prefill_chunk, prefill_query, turbo_prefill)
from .rope import RopeParams, relative_score, rotate

__version__ = "0.1.0"

__all__ = [
    "AssembledContext", "CacheStore", "ChunkKVCache", "FlopCounter", "FlopsReport", "MaskMode",
    "ModelConfig", "ModelWeights", "PositionMode", "QWEN2_7B_CONFIG", "RagEngine", "RopeParams",
    "SegmentLayout", "TOY_CONFIG", "assemble", "assemble_caches", "attend", "build_mask", "compare",
    "flops", "ingest", "init_random", "naive_prefill", "prefill_chunk", "prefill_query",
    "relative_score", "rotate", "turbo_prefill",
]
