"""BM25 inverted index used to build the initial candidate pool."""

from __future__ import annotations

import math
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .interaction import split_words

K1 = 0.9
B = 0.4
INDEX_MAGIC = b"CRKIDX01"
INDEX_FILE = "index.bin"


@dataclass
class InvertedIndex:
    doc_ids: list  # sorted; postings refer to positions in this list
    doc_lengths: list
    postings: dict  # term -> [(doc_position, tf), ...] sorted by doc position

    @property
    def n_docs(self) -> int:
        return len(self.doc_ids)

    @property
    def avg_length(self) -> float:
        return sum(self.doc_lengths) / self.n_docs if self.n_docs else 0.0

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def term_postings(self, term: str) -> list:
        """Postings as (doc_id, tf) pairs."""
        return [(self.doc_ids[i], tf) for i, tf in self.postings.get(term, ())]


def build_index(corpus: dict) -> InvertedIndex:
    """Index ``doc_id -> text``; ``corpus`` may also be (doc_id, text) pairs."""
    items = list(corpus.items()) if isinstance(corpus, dict) else list(corpus)
    if not items:
        raise ValueError("corpus is empty")
    ids = [d for d, _ in items]
    if len(set(ids)) != len(ids):
        dup = next(d for d, c in Counter(ids).items() if c > 1)
        raise ValueError(f"duplicate doc_id {dup!r}")
    items.sort(key=lambda x: x[0])
    postings: dict = {}
    lengths = []
    for pos, (_, text) in enumerate(items):
        words = split_words(text)
        lengths.append(len(words))
        for term, tf in sorted(Counter(words).items()):
            postings.setdefault(term, []).append((pos, tf))
    return InvertedIndex([d for d, _ in items], lengths, postings)


def idf(n_docs: int, df: int) -> float:
    return math.log((n_docs - df + 0.5) / (df + 0.5) + 1.0)


def bm25_search(index: InvertedIndex, query: str, k: int = 1000,
                k1: float = K1, b: float = B) -> list[tuple[str, float]]:
    """Top-k ``(doc_id, score)``, ties broken by doc_id ascending."""
    if k < 1:
        raise ValueError("k must be >= 1")
    avg = index.avg_length or 1.0
    scores: dict[int, float] = {}
    for term in split_words(query):
        plist = index.postings.get(term)
        if not plist:
            continue
        w = idf(index.n_docs, len(plist))
        for pos, tf in plist:
            norm = k1 * (1.0 - b + b * index.doc_lengths[pos] / avg)
            scores[pos] = scores.get(pos, 0.0) + w * tf * (k1 + 1.0) / (tf + norm)
    ranked = sorted(scores.items(), key=lambda x: (-x[1], index.doc_ids[x[0]]))
    return [(index.doc_ids[pos], s) for pos, s in ranked[:k]]


def select_prf(ranking, m: int) -> list:
    """The first m documents of a first-pass ranking."""
    ranking = list(ranking)
    if m > len(ranking):
        raise ValueError(f"ranking has {len(ranking)} documents, fewer than m={m}")
    return ranking[:m]


# ----------------------------------------------------------------- persistence
def save_index(index: InvertedIndex, directory) -> Path:
    """Little-endian layout of ``index.bin``::

        magic "CRKIDX01"
        u32 n_docs, then per doc: u32 id_len, id bytes (UTF-8), u32 length
        u32 n_terms, then per term (sorted): u32 term_len, term bytes,
            u32 df, df x (u32 doc_position, u32 tf)
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = bytearray(INDEX_MAGIC)
    out += struct.pack("<I", index.n_docs)
    for doc_id, length in zip(index.doc_ids, index.doc_lengths):
        raw = doc_id.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw + struct.pack("<I", length)
    out += struct.pack("<I", len(index.postings))
    for term in sorted(index.postings):
        raw = term.encode("utf-8")
        plist = index.postings[term]
        out += struct.pack("<I", len(raw)) + raw + struct.pack("<I", len(plist))
        for pos, tf in plist:
            out += struct.pack("<II", pos, tf)
    path = directory / INDEX_FILE
    path.write_bytes(bytes(out))
    return path


def load_index(directory) -> InvertedIndex:
    path = Path(directory)
    if path.is_dir():
        path = path / INDEX_FILE
    raw = path.read_bytes()
    if raw[:8] != INDEX_MAGIC:
        raise ValueError(f"{path}: not an index file")
    pos = 8

    def u32():
        nonlocal pos
        (v,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        return v

    def text():
        nonlocal pos
        n = u32()
        s = raw[pos:pos + n].decode("utf-8")
        pos += n
        return s

    doc_ids, lengths = [], []
    for _ in range(u32()):
        doc_ids.append(text())
        lengths.append(u32())
    postings = {}
    for _ in range(u32()):
        term = text()
        df = u32()
        plist = [struct.unpack_from("<II", raw, pos + 8 * i) for i in range(df)]
        pos += 8 * df
        postings[term] = plist
    return InvertedIndex(doc_ids, lengths, postings)
