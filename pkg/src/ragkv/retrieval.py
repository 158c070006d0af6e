"""Chunking, feature-hashed embeddings and exhaustive cosine top-k.

A stand-in for a learned retriever: deterministic and dependency-free, so
the order of retrieved chunks (and hence KV concatenation order) is
reproducible.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import FormatError
from .tokenizer import frame

EMBED_DIM = 256
INDEX_FILE = "index.tidx"
INDEX_MAGIC = b"TIDX"
INDEX_VERSION = 1

_BOUNDARY = 1 << 16  # sentinel id marking sequence start/end in bigrams
_WHITESPACE = frozenset(b" \t\n\r\x0b\x0c")


def chunk_document(text: bytes, target_len: int) -> list[list[int]]:
    """Split ``text`` into payloads of at most ``target_len`` bytes.

    Each cut lands just after the last whitespace byte inside the window, or
    at ``target_len`` when the window has none. Payloads concatenate back to
    ``text``.
    """
    if target_len < 8:
        raise ValueError("target_len must be >= 8")
    if isinstance(text, str):
        text = text.encode("utf-8")
    chunks, start, n = [], 0, len(text)
    while start < n:
        end = start + target_len
        if end < n:
            window = text[start:end]
            cut = max((i for i, b in enumerate(window) if b in _WHITESPACE), default=-1)
            if cut >= 0:
                end = start + cut + 1
        else:
            end = n
        chunks.append(list(text[start:end]))
        start = end
    return chunks


def _bigram_slot(a: int, b: int, dim: int) -> int:
    # multiplicative hash of the packed pair (Knuth's 2654435761)
    return ((a * 131101 + b) * 2654435761 % 2**32) % dim


def embed(tokens, dim: int = EMBED_DIM) -> np.ndarray:
    """Unit-norm bag of token bigrams (with start/end sentinels) hashed into ``dim`` slots."""
    tokens = [int(t) for t in tokens]
    if not tokens:
        raise ValueError("cannot embed an empty token list")
    seq = [_BOUNDARY, *tokens, _BOUNDARY]
    v = np.zeros(dim, dtype=np.float64)
    for a, b in zip(seq, seq[1:]):
        v[_bigram_slot(a, b, dim)] += 1.0
    return v / np.linalg.norm(v)


@dataclass
class ChunkRecord:
    chunk_id: str
    doc_id: str
    tokens: list[int]
    embedding: np.ndarray

    @property
    def payload(self) -> list[int]:
        return self.tokens[1:-1]


class VectorIndex:
    """Exhaustive cosine index over chunk embeddings.

    Ranking is by descending cosine, ties broken by ascending chunk id.
    """

    def __init__(self, dim: int = EMBED_DIM):
        self.dim = dim
        self.records: dict[str, ChunkRecord] = {}

    def __len__(self):
        return len(self.records)

    def add(self, record: ChunkRecord) -> bool:
        if record.embedding.shape != (self.dim,):
            raise ValueError(f"embedding dim {record.embedding.shape} != {self.dim}")
        if record.chunk_id in self.records:
            return False
        self.records[record.chunk_id] = record
        return True

    def add_chunk(self, chunk_id: str, doc_id: str, payload) -> bool:
        return self.add(ChunkRecord(chunk_id, doc_id, frame(list(payload)), embed(payload, self.dim)))

    def scores(self, query_embedding) -> list[tuple[float, str]]:
        q = np.asarray(query_embedding, dtype=np.float64)
        return [(float(rec.embedding @ q), cid) for cid, rec in self.records.items()]

    def top_k(self, query_embedding, k: int) -> list[str]:
        if k < 1:
            raise ValueError("k must be >= 1")
        ranked = sorted(self.scores(query_embedding), key=lambda sc: (-sc[0], sc[1]))
        return [cid for _, cid in ranked[:k]]

    def save(self, path) -> int:
        out = bytearray(struct.pack("<4sIII", INDEX_MAGIC, INDEX_VERSION, self.dim, len(self.records)))
        for cid in sorted(self.records):
            rec = self.records[cid]
            doc = rec.doc_id.encode("utf-8")
            out += struct.pack("<32sI", cid.encode("ascii"), len(doc)) + doc
            out += struct.pack(f"<I{len(rec.tokens)}I", len(rec.tokens), *rec.tokens)
            out += rec.embedding.astype("<f8").tobytes()
        out += struct.pack("<I", zlib.crc32(out))
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(bytes(out))
        tmp.replace(path)
        return len(out)

    @classmethod
    def load(cls, path) -> "VectorIndex":
        data = Path(path).read_bytes()
        if len(data) < 20 or data[:4] != INDEX_MAGIC:
            raise FormatError(f"{path}: not an index file")
        if zlib.crc32(data[:-4]) != struct.unpack_from("<I", data, len(data) - 4)[0]:
            raise FormatError(f"{path}: checksum mismatch")
        _, version, dim, n = struct.unpack_from("<4sIII", data, 0)
        if version != INDEX_VERSION:
            raise FormatError(f"{path}: unsupported index version {version}")
        index, pos = cls(dim), 16
        try:
            for _ in range(n):
                cid, doc_len = struct.unpack_from("<32sI", data, pos)
                pos += 36
                doc = data[pos:pos + doc_len].decode("utf-8")
                pos += doc_len
                (n_tok,) = struct.unpack_from("<I", data, pos)
                tokens = list(struct.unpack_from(f"<{n_tok}I", data, pos + 4))
                pos += 4 + 4 * n_tok
                emb = np.frombuffer(data, dtype="<f8", count=dim, offset=pos).astype(np.float64)
                pos += 8 * dim
                index.add(ChunkRecord(cid.decode("ascii"), doc, tokens, emb))
        except (struct.error, ValueError) as exc:
            raise FormatError(f"{path}: corrupt record: {exc}") from None
        return index
