"""Masked scaled dot-product attention with grouped-query heads."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import DTYPE, DegenerateRowError, ShapeError, softmax_rows_inplace
from .rope import ConfigError

# rows per block when materializing score matrices; bounds peak memory
ROW_BLOCK = 512


class MaskMode(str, enum.Enum):
    CAUSAL = "causal"
    INDEPENDENT = "independent"


class SegmentKind(str, enum.Enum):
    CHUNK = "chunk"
    QUERY = "query"


@dataclass(frozen=True)
class Segment:
    segment_id: str
    kind: SegmentKind
    token_count: int


@dataclass(frozen=True)
class SegmentLayout:
    """Ordered chunk segments followed by at most one trailing query segment.

    A layout without a query segment describes cached chunks that have not
    been queried yet; ``validate(require_query=True)`` enforces the full form.
    """

    segments: tuple[Segment, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        self.validate(require_query=False)

    def validate(self, require_query: bool = True) -> None:
        for seg in self.segments:
            if seg.token_count < 1:
                raise ValueError(f"segment {seg.segment_id!r} has no tokens")
        kinds = [s.kind for s in self.segments]
        n_query = kinds.count(SegmentKind.QUERY)
        if n_query > 1 or (n_query == 1 and kinds[-1] is not SegmentKind.QUERY):
            raise ValueError("a layout holds one query segment and it must be last")
        if require_query and n_query != 1:
            raise ValueError("layout has no query segment")

    @classmethod
    def from_lengths(cls, chunk_lengths: Sequence[int], query_length: int | None = None):
        segs = [Segment(f"c{i}", SegmentKind.CHUNK, int(n)) for i, n in enumerate(chunk_lengths)]
        if query_length is not None:
            segs.append(Segment("q", SegmentKind.QUERY, int(query_length)))
        return cls(tuple(segs))

    @property
    def total(self) -> int:
        return sum(s.token_count for s in self.segments)

    @property
    def offsets(self) -> list[int]:
        out, acc = [], 0
        for s in self.segments:
            out.append(acc)
            acc += s.token_count
        return out

    @property
    def chunk_tokens(self) -> int:
        return sum(s.token_count for s in self.segments if s.kind is SegmentKind.CHUNK)

    def with_query(self, n: int, segment_id: str = "q") -> "SegmentLayout":
        """Append ``n`` query/answer tokens, growing an existing query segment."""
        segs = list(self.segments)
        if segs and segs[-1].kind is SegmentKind.QUERY:
            last = segs.pop()
            segs.append(Segment(last.segment_id, SegmentKind.QUERY, last.token_count + n))
        else:
            segs.append(Segment(segment_id, SegmentKind.QUERY, n))
        return SegmentLayout(tuple(segs))

    def segment_index(self) -> np.ndarray:
        """Per-token segment number; query tokens get -1."""
        idx = np.empty(self.total, dtype=np.int64)
        for i, (seg, off) in enumerate(zip(self.segments, self.offsets)):
            idx[off:off + seg.token_count] = -1 if seg.kind is SegmentKind.QUERY else i
        return idx


def build_mask(layout: SegmentLayout, mode: MaskMode) -> np.ndarray:
    """Additive mask: 0 where attention is permitted, ``-inf`` elsewhere."""
    n = layout.total
    permitted = np.tril(np.ones((n, n), dtype=bool))
    if MaskMode(mode) is MaskMode.INDEPENDENT:
        seg = layout.segment_index()
        # document rows see only their own chunk; query rows keep the full lower triangle
        doc_row = seg[:, None] >= 0
        same = seg[:, None] == seg[None, :]
        permitted &= ~doc_row | same
    return np.where(permitted, 0.0, -np.inf)


def query_rows_mask(n_past: int, n_new: int) -> np.ndarray:
    """Mask for ``n_new`` query/answer rows over ``n_past`` cached tokens plus themselves."""
    causal = np.where(np.tril(np.ones((n_new, n_new), dtype=bool)), 0.0, -np.inf)
    return np.concatenate([np.zeros((n_new, n_past)), causal], axis=1)


def attend(
    q_states: np.ndarray,
    k_states: np.ndarray,
    v_states: np.ndarray,
    mask: np.ndarray,
    head_size: int,
    head_num: int | None = None,
    kv_head_num: int | None = None,
    counter=None,
) -> np.ndarray:
    """softmax(Q K^T / sqrt(d) + mask) V for every head.

    ``q_states`` is ``rows x head_num*head_size``; keys and values are
    ``cols x kv_head_num*head_size`` and already rotated. Query head ``h``
    reads KV head ``h // (head_num // kv_head_num)``.

    ``counter`` (a ``FlopCounter``) is charged for the Q K^T products only,
    which is the attention term of the analytic cost model.
    """
    rows, cols = q_states.shape[0], k_states.shape[0]
    head_num = head_num or q_states.shape[1] // head_size
    kv_head_num = kv_head_num or k_states.shape[1] // head_size
    if head_num % kv_head_num:
        raise ConfigError(f"head_num {head_num} not divisible by kv_head_num {kv_head_num}")
    if q_states.shape[1] != head_num * head_size:
        raise ShapeError(f"query width {q_states.shape[1]} != {head_num}*{head_size}")
    if k_states.shape != (cols, kv_head_num * head_size) or v_states.shape != k_states.shape:
        raise ShapeError(f"key/value shapes {k_states.shape}/{v_states.shape} inconsistent")
    if mask.shape != (rows, cols):
        raise ShapeError(f"mask shape {mask.shape} != ({rows}, {cols})")
    if (np.isneginf(mask).all(axis=1)).any():
        bad = int(np.argmax(np.isneginf(mask).all(axis=1)))
        raise DegenerateRowError(f"token row {bad} has no attendable positions")

    group = head_num // kv_head_num
    scale = 1.0 / np.sqrt(head_size)
    q = q_states.reshape(rows, head_num, head_size)
    k = k_states.reshape(cols, kv_head_num, head_size)
    v = v_states.reshape(cols, kv_head_num, head_size)
    out = np.empty((rows, head_num, head_size), dtype=DTYPE)
    for h in range(head_num):
        kh, vh = k[:, h // group, :], v[:, h // group, :]
        for r0 in range(0, rows, ROW_BLOCK):
            r1 = min(rows, r0 + ROW_BLOCK)
            scores = q[r0:r1, h, :] @ kh.T
            scores *= scale
            scores += mask[r0:r1]
            out[r0:r1, h, :] = softmax_rows_inplace(scores) @ vh
    if counter is not None:
        counter.add("attn", 2 * rows * cols * head_size * head_num)
    return out.reshape(rows, head_num * head_size)
