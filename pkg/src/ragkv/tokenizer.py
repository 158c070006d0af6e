"""Byte-level tokenizer: ids 0-255 are raw bytes, followed by three special ids."""

from __future__ import annotations

DOC_START = 256
DOC_END = 257
EOS = 258
VOCAB_SIZE = 259

SPECIAL_TEXT = {DOC_START: "<|doc_start|>", DOC_END: "<|doc_end|>", EOS: "<|eos|>"}


def encode(data: bytes | str) -> list[int]:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return list(data)


def frame(payload: list[int]) -> list[int]:
    """Wrap a chunk payload in document delimiters."""
    return [DOC_START, *payload, DOC_END]


def unframe(tokens: list[int]) -> list[int]:
    if len(tokens) < 2 or tokens[0] != DOC_START or tokens[-1] != DOC_END:
        raise ValueError("token list is not a framed chunk")
    return list(tokens[1:-1])


def decode(tokens, errors: str = "replace") -> str:
    """Render ids as text; special ids print as their marker strings."""
    parts: list[str] = []
    buf = bytearray()
    for t in tokens:
        t = int(t)
        if t < 256:
            buf.append(t)
            continue
        parts.append(buf.decode("utf-8", errors=errors))
        buf.clear()
        parts.append(SPECIAL_TEXT.get(t, f"<|{t}|>"))
    parts.append(buf.decode("utf-8", errors=errors))
    return "".join(parts)
