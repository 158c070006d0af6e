"""Rotary position embedding with interleaved (2m, 2m+1) pairs.

Keys are stored unrotated everywhere in the engine; ``rotate`` is applied at
use time with whatever position ids the caller decides on. Since a rotation
by angle ``t*theta`` depends only on ``t``, rotating later is exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import DTYPE, ShapeError


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RopeParams:
    head_size: int
    base: float = 10000.0
    theta: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.head_size < 2 or self.head_size % 2:
            raise ConfigError(f"head_size must be a positive even number, got {self.head_size}")
        m = np.arange(self.head_size // 2, dtype=DTYPE)
        theta = np.power(DTYPE(self.base), -2.0 * m / self.head_size)
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)


def _check_positions(positions, n: int) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.int64).reshape(-1)
    if pos.shape[0] != n:
        raise ShapeError(f"{pos.shape[0]} position ids for {n} tokens")
    if (pos < 0).any():
        raise ValueError(f"negative position id {int(pos.min())}")
    return pos


def rotate(vectors: np.ndarray, positions, params: RopeParams) -> np.ndarray:
    """Rotate rows of ``vectors`` (tokens x head_size) by their position ids.

    A 3-D input ``(tokens, heads, head_size)`` rotates every head of a token
    by that token's position.
    """
    x = np.asarray(vectors, dtype=DTYPE)
    if x.shape[-1] != params.head_size:
        raise ShapeError(f"vector width {x.shape[-1]} != head_size {params.head_size}")
    pos = _check_positions(positions, x.shape[0])
    angles = pos.astype(DTYPE)[:, None] * params.theta[None, :]
    cos, sin = np.cos(angles), np.sin(angles)
    if x.ndim == 3:
        cos, sin = cos[:, None, :], sin[:, None, :]
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rotate_heads(states: np.ndarray, positions, params: RopeParams) -> np.ndarray:
    """Rotate a packed ``tokens x (heads*head_size)`` projection head by head."""
    n, width = states.shape
    if width % params.head_size:
        raise ShapeError(f"width {width} is not a multiple of head_size {params.head_size}")
    heads = states.reshape(n, width // params.head_size, params.head_size)
    return rotate(heads, positions, params).reshape(n, width)


def relative_score(q, k, pos_q: int, pos_k: int, params: RopeParams) -> float:
    qr = rotate(np.asarray(q, dtype=DTYPE)[None, :], [pos_q], params)[0]
    kr = rotate(np.asarray(k, dtype=DTYPE)[None, :], [pos_k], params)[0]
    return float(qr @ kr)
