import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ragkv.container import FormatError
from ragkv.retrieval import VectorIndex, chunk_document, embed
from ragkv.tokenizer import DOC_END, DOC_START

WS = b" \t\n\r\x0b\x0c"


def resplit_oracle(text: bytes, target: int):
    # independent restatement: greedily take the longest prefix <= target ending in whitespace
    out = []
    while text:
        if len(text) <= target:
            out.append(text)
            break
        window = text[:target]
        idx = max(window.rfind(bytes([c])) for c in WS)
        cut = idx + 1 if idx >= 0 else target
        out.append(text[:cut])
        text = text[cut:]
    return out


class TestChunking:
    def test_small_example(self):
        assert chunk_document(b"aaaa bbbb cccc", 8) == [list(b"aaaa "), list(b"bbbb "), list(b"cccc")]

    def test_no_whitespace_hard_cut(self):
        assert [len(c) for c in chunk_document(b"x" * 20, 8)] == [8, 8, 4]

    def test_thousand_bytes(self):
        words = np.random.default_rng(0).integers(1, 10, size=400)
        text = b" ".join(b"w" * int(n) for n in words)[:1000]
        chunks = chunk_document(text, 256)
        assert 4 <= len(chunks) <= 5
        assert [bytes(c) for c in chunks] == resplit_oracle(text, 256)

    def test_hundred_byte_doc(self):
        text = b"the quick brown fox jumps over the lazy dog " * 3
        text = text[:100]
        chunks = chunk_document(text, 40)
        assert len(chunks) == 3 and sum(map(len, chunks)) == 100

    def test_empty(self):
        assert chunk_document(b"", 64) == []

    def test_target_too_small(self):
        with pytest.raises(ValueError):
            chunk_document(b"abc", 4)

    @settings(max_examples=200, deadline=None)
    @given(st.binary(max_size=600), st.integers(8, 100))
    def test_lossless_and_bounded(self, text, target):
        chunks = chunk_document(text, target)
        assert b"".join(bytes(c) for c in chunks) == text
        assert all(1 <= len(c) <= target for c in chunks)
        assert [bytes(c) for c in chunks] == resplit_oracle(text, target)


class TestEmbed:
    def test_deterministic_unit_norm(self):
        a = embed(list(b"hello world"))
        assert np.array_equal(a, embed(list(b"hello world")))
        assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-12)

    def test_single_token(self):
        assert np.isfinite(embed([7])).all()

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            embed([])

    def test_shared_text_scores_higher(self):
        q = embed(list(b"bees make honey"))
        assert embed(list(b"honey bees in hives")) @ q > embed(list(b"tram timetable")) @ q


def brute_top_k(vectors, q, k):
    scored = [(-float(v @ q), cid) for cid, v in vectors.items()]
    return [cid for _, cid in sorted(scored)[:k]]


class TestIndex:
    def _index(self, n=20, seed=0):
        rng = np.random.default_rng(seed)
        idx = VectorIndex()
        for i in range(n):
            payload = rng.integers(97, 123, size=int(rng.integers(5, 40))).tolist()
            idx.add_chunk(f"{i:032x}", f"doc{i % 3}", payload)
        return idx

    def test_records_framed(self):
        idx = VectorIndex()
        idx.add_chunk("a" * 32, "d", [1, 2])
        rec = idx.records["a" * 32]
        assert rec.tokens == [DOC_START, 1, 2, DOC_END] and rec.payload == [1, 2]

    def test_top_k_matches_brute_force(self):
        idx = self._index()
        vectors = {cid: r.embedding for cid, r in idx.records.items()}
        for s in range(10):
            q = embed(np.random.default_rng(s).integers(97, 123, size=10).tolist())
            for k in (1, 3, 20, 50):
                assert idx.top_k(q, k) == brute_top_k(vectors, q, k)

    def test_ties_by_id(self):
        idx = VectorIndex()
        for cid in ("c" * 32, "a" * 32, "b" * 32):
            idx.add_chunk(cid, "d", [1, 2, 3])
        assert idx.top_k(embed([1, 2, 3]), 3) == ["a" * 32, "b" * 32, "c" * 32]

    def test_duplicate_add(self):
        idx = VectorIndex()
        assert idx.add_chunk("a" * 32, "d", [1]) and not idx.add_chunk("a" * 32, "e", [1])
        assert len(idx) == 1

    def test_bad_k(self):
        with pytest.raises(ValueError):
            self._index().top_k(embed([1]), 0)

    def test_save_load(self, tmp_path):
        idx = self._index()
        idx.save(tmp_path / "i.tidx")
        back = VectorIndex.load(tmp_path / "i.tidx")
        assert back.records.keys() == idx.records.keys()
        for cid, r in idx.records.items():
            assert back.records[cid].tokens == r.tokens and back.records[cid].doc_id == r.doc_id
            assert np.array_equal(back.records[cid].embedding, r.embedding)

    def test_corrupt_index(self, tmp_path):
        p = tmp_path / "i.tidx"
        self._index().save(p)
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(FormatError):
            VectorIndex.load(p)
