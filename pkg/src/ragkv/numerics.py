"""Dense float64 kernels shared by the rest of the engine.

Matrices are plain 2-D ``numpy.ndarray`` values of dtype float64. Every
function here is pure: inputs are never mutated.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand dimensions do not line up."""


class DegenerateRowError(ValueError):
    """A softmax row has no finite entry (a token with nothing to attend to)."""


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    m = np.asarray(data, dtype=DTYPE)
    if m.ndim == 1 and rows is not None and cols is not None:
        m = m.reshape(rows, cols)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; ``-inf`` entries map to exactly 0."""
    m = np.asarray(m, dtype=DTYPE)
    if np.isnan(m).any() or np.isposinf(m).any():
        raise ValueError("softmax_rows input must not contain NaN or +inf")
    row_max = m.max(axis=-1, keepdims=True)
    if np.isneginf(row_max).any():
        bad = np.argwhere(np.isneginf(row_max.reshape(-1)))[0, 0]
        raise DegenerateRowError(f"row {bad} is entirely -inf")
    e = np.exp(m - row_max)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_inplace(scores: np.ndarray) -> np.ndarray:
    """Unchecked in-place variant for hot loops whose callers already rejected
    NaN input and fully masked rows. Same arithmetic as ``softmax_rows``."""
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores


def rmsnorm(x: np.ndarray, weight: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Scale each row of ``x`` by 1/sqrt(mean(x^2)+eps), then by ``weight``.

    Accepts a single row vector or a 2-D stack of rows.
    """
    x = np.asarray(x, dtype=DTYPE)
    weight = np.asarray(weight, dtype=DTYPE)
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError(f"rmsnorm length mismatch: {x.shape[-1]} vs {weight.shape[-1]}")
    ms = np.mean(x * x, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = 1.0 / np.sqrt(ms + eps)
    # eps == 0 on an all-zero row: the row stays zero
    scale = np.where(np.isfinite(scale), scale, 0.0)
    return x * scale * weight


def silu(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return z / (1.0 + np.exp(-z))


def swiglu(x: np.ndarray, w_gate: np.ndarray, w_up: np.ndarray, w_down: np.ndarray) -> np.ndarray:
    """SwiGLU MLP in row-vector convention: ``(silu(x Wg) * (x Wu)) Wd``."""
    x = np.asarray(x, dtype=DTYPE)
    if w_gate.shape != w_up.shape:
        raise ShapeError(f"gate/up shapes differ: {w_gate.shape} vs {w_up.shape}")
    if x.shape[-1] != w_gate.shape[0] or w_down.shape[0] != w_gate.shape[1]:
        raise ShapeError(
            f"swiglu dims inconsistent: x {x.shape}, gate {w_gate.shape}, down {w_down.shape}"
        )
    return (silu(x @ w_gate) * (x @ w_up)) @ w_down
