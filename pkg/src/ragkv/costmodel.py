"""Analytic prefill FLOP counts for a SwiGLU decoder (LM head excluded).

Per token and layer::

    c_qkv  = 2 * hidden * (head_num + 2 * kv_head_num) * head_size
    c_attn = 2 * head_num * head_size * n_context
    c_o    = 2 * hidden**2
    c_mlp  = 2 * 3 * hidden * intermediate

    total  = batch * n_input * layer_num * (c_qkv + c_attn + c_o + c_mlp)

Every token is charged the full final context ``n_context``. Passing
``ramp=True`` instead charges token ``i`` of the prefill only the
``n_context - n_input + i + 1`` positions it can see under a causal mask;
that figure is tighter but is not what the reference formula reports.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .model import ModelConfig


@dataclass(frozen=True)
class FlopsReport:
    c_qkv: int
    c_attn: int
    c_o: int
    c_mlp: int
    total: int
    n_input: int
    n_context: int
    batch: int
    layer_num: int

    @property
    def per_token_layer(self) -> int:
        return self.c_qkv + self.c_attn + self.c_o + self.c_mlp

    @property
    def tflops(self) -> float:
        return self.total / 1e12

    def to_dict(self) -> dict:
        return {**asdict(self), "tflops": round(self.tflops, 2)}


@dataclass(frozen=True)
class Comparison:
    naive: FlopsReport
    turbo: FlopsReport
    reduction_percent: float

    def to_dict(self) -> dict:
        return {"naive": self.naive.to_dict(), "turbo": self.turbo.to_dict(),
                "reduction_percent": self.reduction_percent}


def flops(config: ModelConfig, n_input: int, n_context: int, batch: int = 1,
          ramp: bool = False) -> FlopsReport:
    if n_input < 1 or n_context < 1 or batch < 1:
        raise ValueError("n_input, n_context and batch must all be >= 1")
    if n_context < n_input:
        raise ValueError(f"n_context ({n_context}) < n_input ({n_input})")
    h = config.hidden_size
    c_qkv = 2 * h * (config.head_num + 2 * config.kv_head_num) * config.head_size
    c_attn = 2 * config.head_num * config.head_size * n_context
    c_o = 2 * h * h
    c_mlp = 2 * 3 * h * config.intermediate_size
    if ramp:
        past = n_context - n_input
        visible = n_input * past + n_input * (n_input + 1) // 2
        attn_total = 2 * config.head_num * config.head_size * visible
        total = batch * config.layer_num * (n_input * (c_qkv + c_o + c_mlp) + attn_total)
    else:
        total = batch * n_input * config.layer_num * (c_qkv + c_attn + c_o + c_mlp)
    return FlopsReport(c_qkv, c_attn, c_o, c_mlp, total, n_input, n_context, batch,
                       config.layer_num)


def compare(config: ModelConfig, chunk_tokens: int, query_tokens: int, batch: int = 1) -> Comparison:
    """Naive prefill over chunks+query versus prefill of the query alone over cached chunks."""
    if chunk_tokens < 0 or query_tokens < 1:
        raise ValueError("chunk_tokens must be >= 0 and query_tokens >= 1")
    n_context = chunk_tokens + query_tokens
    naive = flops(config, n_context, n_context, batch)
    turbo = flops(config, query_tokens, n_context, batch)
    return Comparison(naive, turbo, 100.0 * (1.0 - turbo.total / naive.total))
