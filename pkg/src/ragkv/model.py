"""Decoder-only transformer: pre-RMSNorm, GQA attention with RoPE, SwiGLU MLP.

Weights use the row-vector convention (``y = x @ W``). Keys returned from a
forward pass are always unrotated; RoPE is applied transiently when scores
are computed, so a cached key can later be placed at any position.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field, fields

import numpy as np

from . import prng
from .attention import attend, query_rows_mask
from .numerics import DTYPE, ShapeError, rmsnorm, swiglu
from .rope import ConfigError, RopeParams, rotate_heads
from .tokenizer import EOS, VOCAB_SIZE


@dataclass(frozen=True)
class ModelConfig:
    layer_num: int = 4
    head_num: int = 8
    kv_head_num: int = 2
    head_size: int = 8
    hidden_size: int = 64
    intermediate_size: int = 128
    vocab_size: int = VOCAB_SIZE
    rope_base: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        counts = ("layer_num", "head_num", "kv_head_num", "head_size",
                  "hidden_size", "intermediate_size", "vocab_size")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.head_size % 2:
            raise ConfigError(f"head_size must be even, got {self.head_size}")
        if self.hidden_size != self.head_num * self.head_size:
            raise ConfigError("hidden_size must equal head_num * head_size")
        if self.head_num % self.kv_head_num:
            raise ConfigError("head_num must be a multiple of kv_head_num")

    @property
    def kv_width(self) -> int:
        return self.kv_head_num * self.head_size

    @property
    def rope(self) -> RopeParams:
        return RopeParams(self.head_size, self.rope_base)

    def int_fields(self) -> list[int]:
        return [self.layer_num, self.head_num, self.kv_head_num, self.head_size,
                self.hidden_size, self.intermediate_size, self.vocab_size]

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


TOY_CONFIG = ModelConfig()
QWEN2_7B_CONFIG = ModelConfig(
    layer_num=28, head_num=28, kv_head_num=4, head_size=128,
    hidden_size=3584, intermediate_size=18944, vocab_size=152064,
    rope_base=1000000.0,
)


@dataclass
class LayerWeights:
    attn_norm: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    mlp_norm: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray

    NAMES = ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down")


@dataclass
class ModelWeights:
    config: ModelConfig
    embed: np.ndarray
    layers: list[LayerWeights]
    final_norm: np.ndarray
    lm_head: np.ndarray
    _checksum: str | None = field(default=None, repr=False, compare=False)

    def named_tensors(self):
        """(name, matrix) pairs in canonical order; vectors are 1 x n."""
        yield "embed", self.embed
        for i, layer in enumerate(self.layers):
            for name in LayerWeights.NAMES:
                yield f"l{i}.{name}", np.atleast_2d(getattr(layer, name))
        yield "final_norm", np.atleast_2d(self.final_norm)
        yield "lm_head", self.lm_head

    def checksum(self) -> str:
        if self._checksum is None:
            h = hashlib.sha256()
            for name, t in self.named_tensors():
                h.update(name.encode())
                h.update(np.ascontiguousarray(t, dtype="<f8").tobytes())
            self._checksum = h.hexdigest()
        return self._checksum

    def fingerprint(self) -> bytes:
        """32-byte identity of (config, weights); caches carry it to detect staleness."""
        h = hashlib.sha256()
        h.update(repr(sorted(self.config.to_dict().items())).encode())
        h.update(self.checksum().encode())
        return h.digest()

    def validate(self) -> None:
        c = self.config
        expect = {
            "embed": (c.vocab_size, c.hidden_size),
            "lm_head": (c.hidden_size, c.vocab_size),
            "final_norm": (1, c.hidden_size),
        }
        for name, t in self.named_tensors():
            key = name.split(".", 1)[-1]
            shape = expect.get(name) or {
                "attn_norm": (1, c.hidden_size), "mlp_norm": (1, c.hidden_size),
                "wq": (c.hidden_size, c.head_num * c.head_size),
                "wk": (c.hidden_size, c.kv_width), "wv": (c.hidden_size, c.kv_width),
                "wo": (c.head_num * c.head_size, c.hidden_size),
                "w_gate": (c.hidden_size, c.intermediate_size),
                "w_up": (c.hidden_size, c.intermediate_size),
                "w_down": (c.intermediate_size, c.hidden_size),
            }[key]
            if t.shape != shape:
                raise ShapeError(f"weight {name} has shape {t.shape}, expected {shape}")
        if len(self.layers) != c.layer_num:
            raise ShapeError(f"{len(self.layers)} layers for layer_num={c.layer_num}")


def init_random(config: ModelConfig, seed: int) -> ModelWeights:
    """Seeded weights: uniform in [-1/sqrt(hidden), 1/sqrt(hidden)), norms = 1.

    Random matrices draw consecutive SplitMix64 outputs in this order, each
    row-major: embed, then per layer wq, wk, wv, wo, w_gate, w_up, w_down,
    then lm_head.
    """
    c = config
    scale = 1.0 / np.sqrt(c.hidden_size)
    cursor = 0

    def draw(rows: int, cols: int) -> np.ndarray:
        nonlocal cursor
        u = prng.uniform(seed, cursor, rows * cols)
        cursor += rows * cols
        return ((2.0 * u - 1.0) * scale).reshape(rows, cols)

    embed = draw(c.vocab_size, c.hidden_size)
    layers = []
    for _ in range(c.layer_num):
        wq = draw(c.hidden_size, c.head_num * c.head_size)
        wk = draw(c.hidden_size, c.kv_width)
        wv = draw(c.hidden_size, c.kv_width)
        wo = draw(c.head_num * c.head_size, c.hidden_size)
        w_gate = draw(c.hidden_size, c.intermediate_size)
        w_up = draw(c.hidden_size, c.intermediate_size)
        w_down = draw(c.intermediate_size, c.hidden_size)
        ones = np.ones(c.hidden_size, dtype=DTYPE)
        layers.append(LayerWeights(ones, wq, wk, wv, wo, ones.copy(), w_gate, w_up, w_down))
    lm_head = draw(c.hidden_size, c.vocab_size)
    return ModelWeights(c, embed, layers, np.ones(c.hidden_size, dtype=DTYPE), lm_head)


class FlopCounter:
    """Tallies multiply-add FLOPs by category as kernels run.

    Categories mirror the analytic model: ``qkv``, ``attn`` (Q K^T only),
    ``o`` and ``mlp``. The LM head is not counted.
    """

    def __init__(self):
        self.by_kind: Counter[str] = Counter()
        self.tokens = 0

    def add(self, kind: str, n: int) -> None:
        self.by_kind[kind] += int(n)

    @property
    def total(self) -> int:
        return sum(self.by_kind.values())

    def reset(self) -> None:
        self.by_kind.clear()
        self.tokens = 0


@dataclass
class KVState:
    """Per-layer unrotated keys and values plus the position id of every held token."""

    keys: list[np.ndarray]
    values: list[np.ndarray]
    positions: np.ndarray
    next_position: int = 0
    last_logits: np.ndarray | None = None

    @classmethod
    def empty(cls, config: ModelConfig) -> "KVState":
        z = np.zeros((0, config.kv_width), dtype=DTYPE)
        return cls([z] * config.layer_num, [z] * config.layer_num, np.zeros(0, dtype=np.int64))

    @property
    def length(self) -> int:
        return int(self.positions.shape[0])

    def append(self, new_kv, positions) -> None:
        new_k, new_v = new_kv
        self.keys = [np.concatenate([a, b]) for a, b in zip(self.keys, new_k)]
        self.values = [np.concatenate([a, b]) for a, b in zip(self.values, new_v)]
        positions = np.asarray(positions, dtype=np.int64)
        self.positions = np.concatenate([self.positions, positions])
        if positions.size:
            self.next_position = int(positions.max()) + 1


def forward_tokens(
    weights: ModelWeights,
    tokens,
    positions,
    past: KVState | None = None,
    mask: np.ndarray | None = None,
    counter: FlopCounter | None = None,
):
    """Run ``tokens`` through the stack, attending to ``past`` then to themselves.

    ``mask`` is additive with shape ``(len(tokens), past_len + len(tokens))``;
    it defaults to "everything in past, causal among the new tokens".

    Returns ``(logits, (keys, values))`` where keys/values are per-layer lists
    for the new tokens only, keys unrotated.
    """
    c = weights.config
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    positions = np.asarray(positions, dtype=np.int64).reshape(-1)
    n = tokens.shape[0]
    if positions.shape[0] != n:
        raise ShapeError(f"{positions.shape[0]} positions for {n} tokens")
    if n == 0:
        raise ValueError("forward_tokens needs at least one token")
    if tokens.min() < 0 or tokens.max() >= c.vocab_size:
        raise ValueError(f"token id out of range [0, {c.vocab_size})")
    n_past = past.length if past is not None else 0
    if mask is None:
        mask = query_rows_mask(n_past, n)
    if mask.shape != (n, n_past + n):
        raise ShapeError(f"mask shape {mask.shape} != ({n}, {n_past + n})")
    all_pos = positions if past is None else np.concatenate([past.positions, positions])
    rope = c.rope

    h = weights.embed[tokens]
    new_k, new_v = [], []
    for i, layer in enumerate(weights.layers):
        x = rmsnorm(h, layer.attn_norm, c.norm_eps)
        q, k, v = x @ layer.wq, x @ layer.wk, x @ layer.wv
        new_k.append(k)
        new_v.append(v)
        if past is not None:
            k = np.concatenate([past.keys[i], k])
            v = np.concatenate([past.values[i], v])
        ctx = attend(rotate_heads(q, positions, rope), rotate_heads(k, all_pos, rope), v,
                     mask, c.head_size, c.head_num, c.kv_head_num, counter=counter)
        h = h + ctx @ layer.wo
        h = h + swiglu(rmsnorm(h, layer.mlp_norm, c.norm_eps), layer.w_gate, layer.w_up, layer.w_down)
        if counter is not None:
            counter.add("qkv", 2 * n * c.hidden_size * (c.head_num * c.head_size + 2 * c.kv_width))
            counter.add("o", 2 * n * c.head_num * c.head_size * c.hidden_size)
            counter.add("mlp", 3 * 2 * n * c.hidden_size * c.intermediate_size)
    if counter is not None:
        counter.tokens += n
    logits = rmsnorm(h, weights.final_norm, c.norm_eps) @ weights.lm_head
    return logits, (new_k, new_v)


def greedy_decode(
    weights: ModelWeights,
    context: KVState,
    max_new: int,
    eos: int = EOS,
    counter: FlopCounter | None = None,
) -> list[int]:
    """Argmax decoding from a prefilled context (``context.last_logits`` set).

    Each generated token is appended to ``context`` at the next sequential
    position. Ties go to the lowest token id. ``eos`` ends generation and is
    not included in the result.
    """
    out: list[int] = []
    if max_new <= 0:
        return out
    if context.last_logits is None:
        raise ValueError("context has not been prefilled")
    while True:
        tok = int(np.argmax(context.last_logits))
        if tok == eos:
            break
        out.append(tok)
        if len(out) >= max_new:
            break
        pos = [context.next_position]
        logits, kv = forward_tokens(weights, [tok], pos, past=context,
                                    mask=np.zeros((1, context.length + 1)), counter=counter)
        context.append(kv, pos)
        context.last_logits = logits[-1]
    return out
