"""Per-chunk KV caches, their TKVC persistence, and a content-addressed store."""

from __future__ import annotations

import hashlib
import os
import tempfile
import threading
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import container
from .container import DTYPE_F32, DTYPE_F64, FormatError
from .model import LayerWeights, ModelConfig, ModelWeights

STORE_ENV = "RAGKV_STORE"
CACHE_SUFFIX = ".tkvc"
WEIGHTS_FILE = "weights.tkvc"


class CacheNotFoundError(KeyError):
    pass


class StaleCacheError(ValueError):
    """Cache was computed under a different model (config or weights)."""


class StoreIOError(OSError):
    pass


def chunk_id_for(tokens, fingerprint: bytes) -> str:
    h = hashlib.sha256(fingerprint)
    h.update(np.asarray(tokens, dtype="<u4").tobytes())
    return h.hexdigest()[:32]


@dataclass
class ChunkKVCache:
    """Unrotated per-layer K and V for one framed chunk, computed at positions 0..n-1."""

    chunk_id: str
    tokens: list[int]
    keys: list[np.ndarray]
    values: list[np.ndarray]
    fingerprint: bytes
    storage_dtype: int = DTYPE_F64
    format_version: int = container.FORMAT_VERSION

    @property
    def token_count(self) -> int:
        return len(self.tokens)

    @property
    def layer_num(self) -> int:
        return len(self.keys)

    def validate(self, config: ModelConfig | None = None) -> None:
        n = self.token_count
        if n < 1:
            raise ValueError("chunk cache holds no tokens")
        if len(self.values) != len(self.keys):
            raise ValueError("layer count differs between keys and values")
        width = self.keys[0].shape[1] if self.keys else 0
        for i, (k, v) in enumerate(zip(self.keys, self.values)):
            if k.shape != (n, width) or v.shape != (n, width):
                raise ValueError(f"layer {i}: K {k.shape} / V {v.shape}, expected ({n}, {width})")
        if config is not None:
            if self.layer_num != config.layer_num or width != config.kv_width:
                raise ValueError("cache shape does not match model config")

    def prefix(self, n: int) -> "ChunkKVCache":
        """Cache of the first ``n`` tokens; valid because chunk prefill is causal."""
        toks = self.tokens[:n]
        return ChunkKVCache(chunk_id_for(toks, self.fingerprint), toks,
                            [k[:n] for k in self.keys], [v[:n] for v in self.values],
                            self.fingerprint, self.storage_dtype)


def serialize(cache: ChunkKVCache) -> bytes:
    cache.validate()
    head_width = cache.keys[0].shape[1]
    sections: dict[str, np.ndarray] = {"tokens": np.asarray(cache.tokens, dtype=np.uint32)[None, :]}
    for i, (k, v) in enumerate(zip(cache.keys, cache.values)):
        sections[f"k.{i}"] = k
        sections[f"v.{i}"] = v
    return container.pack(container.Container(
        kind=container.KIND_CHUNK_CACHE,
        dtype=cache.storage_dtype,
        fingerprint=cache.fingerprint,
        config=[cache.layer_num, head_width, cache.token_count],
        sections=sections,
    ))


def deserialize(data: bytes) -> ChunkKVCache:
    c = container.unpack(data)
    if c.kind != container.KIND_CHUNK_CACHE:
        raise FormatError(f"container kind {c.kind} is not a chunk cache")
    if len(c.config) != 3:
        raise FormatError("chunk cache header needs 3 config fields")
    layer_num, width, n = c.config
    try:
        tokens = c.sections["tokens"].reshape(-1).tolist()
        keys = [c.sections[f"k.{i}"] for i in range(layer_num)]
        values = [c.sections[f"v.{i}"] for i in range(layer_num)]
    except KeyError as exc:
        raise FormatError(f"missing section {exc}") from None
    if len(tokens) != n or any(t.shape != (n, width) for t in keys + values):
        raise FormatError("section shapes disagree with header")
    return ChunkKVCache(chunk_id_for(tokens, c.fingerprint), tokens, keys, values,
                        c.fingerprint, c.dtype, c.version)


def save_weights(weights: ModelWeights, path, storage_dtype: int = DTYPE_F64) -> int:
    cfg = weights.config
    c = container.Container(
        kind=container.KIND_WEIGHTS,
        dtype=storage_dtype,
        fingerprint=weights.fingerprint(),
        config=cfg.int_fields(),
        sections={"rope_base,eps": np.array([[cfg.rope_base, cfg.norm_eps]]),
                  **dict(weights.named_tensors())},
    )
    data = container.pack(c)
    _atomic_write(Path(path), data)
    return len(data)


def load_weights(path) -> ModelWeights:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise StoreIOError(f"cannot read weights {path}: {exc}") from exc
    c = container.unpack(data)
    if c.kind != container.KIND_WEIGHTS:
        raise FormatError(f"{path}: container kind {c.kind} is not model weights")
    base, eps = c.sections["rope_base,eps"][0]
    cfg = ModelConfig(*c.config, rope_base=float(base), norm_eps=float(eps))
    s = c.sections
    layers = [LayerWeights(**{name: (s[f"l{i}.{name}"][0] if name.endswith("norm") else s[f"l{i}.{name}"])
                              for name in LayerWeights.NAMES})
              for i in range(cfg.layer_num)]
    w = ModelWeights(cfg, s["embed"], layers, s["final_norm"][0], s["lm_head"])
    w.validate()
    if c.dtype == DTYPE_F64 and w.fingerprint() != c.fingerprint:
        raise FormatError(f"{path}: weights do not match their recorded fingerprint")
    return w


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class CacheStore:
    """Directory of ``<chunk_id>.tkvc`` files.

    Writes go through a temp file and ``os.replace``; one lock per store
    serializes them. Reads take no lock.
    """

    def __init__(self, root=None, storage_dtype: int = DTYPE_F64):
        root = root or os.environ.get(STORE_ENV)
        if not root:
            raise StoreIOError(f"no store root given and ${STORE_ENV} is unset")
        self.root = Path(root)
        self.storage_dtype = storage_dtype
        self.bytes_written = 0
        self._lock = threading.Lock()

    @property
    def cache_dir(self) -> Path:
        return self.root / "caches"

    def path_for(self, chunk_id: str) -> Path:
        return self.cache_dir / f"{chunk_id}{CACHE_SUFFIX}"

    def __contains__(self, chunk_id: str) -> bool:
        return self.path_for(chunk_id).exists()

    def __len__(self) -> int:
        return len(self.ids())

    def ids(self) -> list[str]:
        if not self.cache_dir.is_dir():
            return []
        return sorted(p.name[: -len(CACHE_SUFFIX)] for p in self.cache_dir.glob(f"*{CACHE_SUFFIX}"))

    def store(self, cache: ChunkKVCache) -> str:
        """Persist ``cache``; storing an id that already exists is a no-op."""
        cache = replace(cache, storage_dtype=self.storage_dtype)
        path = self.path_for(cache.chunk_id)
        with self._lock:
            if path.exists():
                return cache.chunk_id
            data = serialize(cache)
            try:
                _atomic_write(path, data)
            except OSError as exc:
                raise StoreIOError(f"failed to write {path}: {exc}") from exc
            self.bytes_written += len(data)
        return cache.chunk_id

    def load(self, chunk_id: str, expected_fingerprint: bytes | None = None) -> ChunkKVCache:
        path = self.path_for(chunk_id)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise CacheNotFoundError(chunk_id) from None
        except OSError as exc:
            raise StoreIOError(f"failed to read {path}: {exc}") from exc
        try:
            cache = deserialize(data)
        except FormatError as exc:
            raise FormatError(f"{path}: {exc}") from None
        if expected_fingerprint is not None and cache.fingerprint != expected_fingerprint:
            raise StaleCacheError(f"{path}: cache fingerprint does not match the current model")
        if cache.chunk_id != chunk_id:
            raise FormatError(f"{path}: content hashes to {cache.chunk_id}, not {chunk_id}")
        return cache

    def save_weights(self, weights: ModelWeights) -> int:
        return save_weights(weights, self.root / WEIGHTS_FILE)

    def load_weights(self) -> ModelWeights:
        path = self.root / WEIGHTS_FILE
        if not path.exists():
            raise CacheNotFoundError(f"no model weights in store {self.root}")
        return load_weights(path)
