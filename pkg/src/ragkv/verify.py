"""Invariant matrix behind ``ragkv verify``.

Every generated case is fully described by ``seed:len1,len2,...:query_len``;
the same string passed back through ``--case`` rebuilds identical weights
and tokens, so each reported failure carries a one-line reproduction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kvstore
from .attention import MaskMode, SegmentKind, SegmentLayout
from .model import (TOY_CONFIG, KVState, ModelConfig, ModelWeights, forward_tokens, greedy_decode,
                    init_random)
from .pipeline import PositionMode, naive_prefill, prefill_chunk, turbo_prefill
from .rope import RopeParams, relative_score

EQUIVALENCE_TOL = 1e-10
ROPE_TOL = 1e-9
WITNESS_MIN_DIFF = 1e-3
FAULTS = ("mask-bit",)


@dataclass(frozen=True)
class Case:
    seed: int
    chunk_lens: tuple[int, ...]
    query_len: int

    @property
    def spec(self) -> str:
        return f"{self.seed}:{','.join(map(str, self.chunk_lens))}:{self.query_len}"

    @classmethod
    def parse(cls, text: str) -> "Case":
        try:
            seed, lens, q = text.split(":")
            chunk_lens = tuple(int(x) for x in lens.split(",") if x)
            case = cls(int(seed), chunk_lens, int(q))
        except ValueError:
            raise ValueError(f"bad case spec {text!r}; expected seed:len1,len2,...:query_len") from None
        if case.query_len < 1 or any(n < 1 for n in chunk_lens):
            raise ValueError(f"case {text!r}: lengths must be >= 1")
        return case

    def inputs(self, vocab_size: int = TOY_CONFIG.vocab_size):
        rng = np.random.default_rng([self.seed, self.query_len, *self.chunk_lens])
        chunks = [rng.integers(0, vocab_size, size=n).tolist() for n in self.chunk_lens]
        return chunks, rng.integers(0, vocab_size, size=self.query_len).tolist()


def generate_cases(seeds: Iterable[int], per_seed: int, max_chunks: int = 8, max_chunk_len: int = 64,
                   max_query_len: int = 32) -> list[Case]:
    cases = []
    for seed in seeds:
        rng = np.random.default_rng([seed, 0xCA5E])
        for _ in range(per_seed):
            k = int(rng.integers(1, max_chunks + 1))
            lens = tuple(int(x) for x in rng.integers(1, max_chunk_len + 1, size=k))
            cases.append(Case(seed, lens, int(rng.integers(1, max_query_len + 1))))
    return cases


def mask_bit_fault(mask: np.ndarray, layout: SegmentLayout) -> np.ndarray:
    """Flip one mask entry: open the first cross-chunk pair, or hide token 0 from the last row."""
    mask = mask.copy()
    chunk_offsets = [off for seg, off in zip(layout.segments, layout.offsets)
                     if seg.kind is SegmentKind.CHUNK]
    if len(chunk_offsets) >= 2:
        mask[chunk_offsets[1], chunk_offsets[0]] = 0.0
    else:
        mask[-1, 0] = -np.inf if mask[-1, 0] == 0.0 else 0.0
    return mask


@dataclass
class CaseResult:
    case: Case
    logits_diff: float
    composite_diff: float
    decode_match: bool
    split_diff: float
    roundtrip_ok: bool

    @property
    def equivalent(self) -> bool:
        return self.logits_diff <= EQUIVALENCE_TOL and self.decode_match


@dataclass
class Failure:
    check: str
    detail: str
    repro: str


@dataclass
class VerifyReport:
    results: list[CaseResult] = field(default_factory=list)
    failures: list[Failure] = field(default_factory=list)
    rope_max_diff: float = 0.0
    rope_cases: int = 0

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def max_logits_diff(self) -> float:
        return max((r.logits_diff for r in self.results), default=0.0)

    @property
    def max_composite_diff(self) -> float:
        return max((r.composite_diff for r in self.results if len(r.case.chunk_lens) >= 2), default=0.0)


class WeightCache:
    def __init__(self, config: ModelConfig = TOY_CONFIG):
        self.config = config
        self._w: dict[int, ModelWeights] = {}

    def __call__(self, seed: int) -> ModelWeights:
        if seed not in self._w:
            self._w[seed] = init_random(self.config, seed)
        return self._w[seed]


def check_case(case: Case, weights: ModelWeights, decode_len: int = 32, fault: str | None = None) -> CaseResult:
    chunks, query = case.inputs(weights.config.vocab_size)
    hook = mask_bit_fault if fault == "mask-bit" else None
    caches = [prefill_chunk(weights, c) for c in chunks]

    turbo_logits, turbo_ctx = turbo_prefill(caches, weights, query, PositionMode.REORDERED)
    naive_logits, naive_ctx = naive_prefill(chunks, weights, query, MaskMode.INDEPENDENT, mask_hook=hook)
    comp_logits, _ = turbo_prefill(caches, weights, query, PositionMode.COMPOSITE)
    decode_match = (greedy_decode(weights, turbo_ctx, decode_len)
                    == greedy_decode(weights, naive_ctx, decode_len))

    roundtrip_ok = all(_roundtrip_identical(c) for c in caches)
    split_diff = _split_diff(case, weights, [t for c in chunks for t in c] + query)
    return CaseResult(case, float(np.abs(turbo_logits - naive_logits).max()),
                      float(np.abs(comp_logits - naive_logits).max()), decode_match,
                      split_diff, roundtrip_ok)


def _roundtrip_identical(cache) -> bool:
    data = kvstore.serialize(cache)
    back = kvstore.deserialize(data)
    return (back.tokens == cache.tokens and back.chunk_id == cache.chunk_id
            and all(np.array_equal(a, b) for a, b in zip(back.keys + back.values, cache.keys + cache.values))
            and kvstore.serialize(back) == data)


def _split_diff(case: Case, weights: ModelWeights, tokens: Sequence[int]) -> float:
    """Causal forward of s||t versus s then t-with-past, split at a case-determined point."""
    n = len(tokens)
    if n < 2:
        return 0.0
    cut = int(np.random.default_rng([case.seed, n, 7]).integers(1, n))
    full, _ = forward_tokens(weights, tokens, np.arange(n))
    past = KVState.empty(weights.config)
    _, kv = forward_tokens(weights, tokens[:cut], np.arange(cut))
    past.append(kv, np.arange(cut))
    tail, _ = forward_tokens(weights, tokens[cut:], np.arange(cut, n), past=past)
    return float(np.abs(full[-1] - tail[-1]).max())


def check_rope(n_cases: int, seed: int = 0, max_pos: int = 4096,
               head_sizes: Sequence[int] = (4, 16, 64, 128)) -> tuple[float, tuple | None]:
    """Largest |score(a, b) - score(a+s, b+s)| over random cases, and the worst case."""
    rng = np.random.default_rng([seed, 0x0123])
    worst, worst_case = 0.0, None
    params = {d: RopeParams(d) for d in head_sizes}
    for _ in range(n_cases):
        d = int(rng.choice(head_sizes))
        q, k = rng.standard_normal(d), rng.standard_normal(d)
        a, b = (int(x) for x in rng.integers(0, max_pos + 1, size=2))
        s = int(rng.integers(0, max_pos + 1 - max(a, b)))
        diff = abs(relative_score(q, k, a, b, params[d]) - relative_score(q, k, a + s, b + s, params[d]))
        if diff > worst:
            worst, worst_case = diff, (d, a, b, s)
    return worst, worst_case


def run_verify(cases: Sequence[Case], decode_len: int = 32, fault: str | None = None,
               rope_cases: int = 1000, rope_seed: int = 0, check_witness: bool = True,
               config: ModelConfig = TOY_CONFIG,
               log: Callable[[str], None] | None = None) -> VerifyReport:
    report = VerifyReport()
    weights = WeightCache(config)
    fault_flag = f" --inject-fault {fault}" if fault else ""

    if rope_cases:
        report.rope_cases = rope_cases
        report.rope_max_diff, worst = check_rope(rope_cases, rope_seed)
        if report.rope_max_diff > ROPE_TOL:
            report.failures.append(Failure("rope-shift", f"diff {report.rope_max_diff:.3e} at {worst}",
                                           f"ragkv verify --rope-only --rope-cases {rope_cases} --rope-seed {rope_seed}"))

    for case in cases:
        r = check_case(case, weights(case.seed), decode_len, fault)
        report.results.append(r)
        repro = f"ragkv verify --case {case.spec}{fault_flag}"
        if r.logits_diff > EQUIVALENCE_TOL:
            report.failures.append(Failure("equivalence", f"max |turbo - naive| = {r.logits_diff:.3e}", repro))
        elif not r.decode_match:
            report.failures.append(Failure("decode", "greedy decodes differ", repro))
        if not r.roundtrip_ok:
            report.failures.append(Failure("roundtrip", "serialization not bit-identical", repro))
        if r.split_diff > EQUIVALENCE_TOL:
            report.failures.append(Failure("incremental", f"split diff {r.split_diff:.3e}", repro))
        if log:
            log(f"{'ok  ' if r.equivalent else 'FAIL'} {case.spec} logits {r.logits_diff:.2e} "
                f"composite {r.composite_diff:.2e}")

    if check_witness and any(len(c.chunk_lens) >= 2 for c in cases):
        if report.max_composite_diff <= WITNESS_MIN_DIFF:
            report.failures.append(Failure(
                "composite-witness",
                f"composite positions never diverged by > {WITNESS_MIN_DIFF} (max {report.max_composite_diff:.3e})",
                "ragkv verify" + fault_flag))
    return report
