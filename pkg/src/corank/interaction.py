"""Query/document interaction inputs: tokens, MaxP passages, [CLS] q [SEP] p [SEP]."""

from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .tensor import Tensor

PAD, CLS, SEP, UNK = 0, 1, 2, 3
N_SPECIAL = 4

_WORD = re.compile(r"[^\W_]+", re.UNICODE)


def split_words(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation boundaries."""
    return _WORD.findall(text.lower())


class Tokenizer:
    """Maps words to ids: known words first, unknown words hashed.

    Ids 0-3 are reserved for [PAD], [CLS], [SEP], [UNK]. Words listed in
    ``vocab`` get consecutive ids starting at 4; any other word is hashed
    (CRC32) into the remaining range up to ``vocab_size``.
    """

    def __init__(self, vocab: Iterable[str] = (), vocab_size: int = 30000):
        words = list(dict.fromkeys(vocab))
        if N_SPECIAL + len(words) >= vocab_size:
            raise ValueError(f"vocab_size {vocab_size} leaves no room for {len(words)} words")
        self.vocab_size = vocab_size
        self.word_to_id = {w: N_SPECIAL + i for i, w in enumerate(words)}
        self._hash_base = N_SPECIAL + len(words)

    def word_id(self, word: str) -> int:
        wid = self.word_to_id.get(word)
        if wid is not None:
            return wid
        span = self.vocab_size - self._hash_base
        return self._hash_base + zlib.crc32(word.encode("utf-8")) % span

    def encode_words(self, words: Sequence[str]) -> list[int]:
        return [self.word_id(w) for w in words]

    def tokenize(self, text: str) -> list[int]:
        return self.encode_words(split_words(text))

    @classmethod
    def from_corpus(cls, texts: Iterable[str], vocab_size: int = 30000) -> "Tokenizer":
        """Known vocabulary = most frequent words that fit, ties alphabetical."""
        counts: dict[str, int] = {}
        for t in texts:
            for w in split_words(t):
                counts[w] = counts.get(w, 0) + 1
        ranked = sorted(counts, key=lambda w: (-counts[w], w))
        room = max(vocab_size - N_SPECIAL - 1, 0)
        return cls(ranked[:room], vocab_size)


# ---------------------------------------------------------------------- passages
@dataclass(frozen=True)
class Passage:
    doc_id: str
    start_word: int
    words: tuple


def window_passages(doc_words: Sequence[str], window: int = 150, stride: int = 75,
                    doc_id: str = "") -> list[Passage]:
    """Sliding windows starting every ``stride`` words while start < length.

    A document that fits in one window is a single passage.
    """
    if window <= 0 or not 0 < stride <= window:
        raise ValueError("need window > 0 and 0 < stride <= window")
    words = tuple(doc_words)
    if len(words) <= window:
        return [Passage(doc_id, 0, words)]
    return [Passage(doc_id, s, words[s:s + window]) for s in range(0, len(words), stride)]


# --------------------------------------------------------------------- sequences
@dataclass(frozen=True)
class TokenSequence:
    token_ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray

    @property
    def length(self) -> int:
        return int(self.attention_mask.sum())


def build_sequence(query_tokens: Sequence[int], passage_tokens: Sequence[int],
                   max_seq_len: int = 256) -> TokenSequence:
    """``[CLS] q [SEP] p [SEP]`` padded to ``max_seq_len``.

    Over-long passages are cut from the right; the final [SEP] survives.
    """
    q = list(query_tokens)
    if not q:
        raise ValueError("query must be non-empty")
    if len(q) + 3 > max_seq_len:
        raise ValueError(f"query too long: {len(q)} tokens + 3 specials > {max_seq_len}")
    room = max_seq_len - len(q) - 3
    p = list(passage_tokens)[:room]
    ids = [CLS, *q, SEP, *p, SEP]
    seg = [0] * (len(q) + 2) + [1] * (len(p) + 1)
    n = len(ids)
    pad = max_seq_len - n
    return TokenSequence(
        np.array(ids + [PAD] * pad, dtype=np.int64),
        np.array(seg + [0] * pad, dtype=np.int64),
        np.array([True] * n + [False] * pad),
    )


def stack_sequences(seqs: Sequence[TokenSequence], trim: bool = True):
    """Batch arrays ``(ids, segments, mask)``; trailing all-pad columns dropped.

    Trimming is exact: padding is masked, so it never reaches unmasked outputs.
    """
    ids = np.stack([s.token_ids for s in seqs])
    seg = np.stack([s.segment_ids for s in seqs])
    mask = np.stack([s.attention_mask for s in seqs])
    if trim:
        width = max(int(mask.sum(axis=1).max()), 1)
        ids, seg, mask = ids[:, :width], seg[:, :width], mask[:, :width]
    return ids, seg, mask


def interaction_vectors(seqs: Sequence[TokenSequence], encoder) -> Tensor:
    """[CLS] outputs of ``encoder`` for a batch of sequences, shape (N, H)."""
    ids, seg, mask = stack_sequences(seqs)
    out = encoder.encode(ids, mask, seg)
    return out[:, 0]


def interaction_vector(seq: TokenSequence, encoder) -> Tensor:
    return interaction_vectors([seq], encoder)[0]


def select_max_passage(query, passages: Sequence[Passage],
                       scorer: Callable) -> tuple[Passage, float]:
    """Highest-scoring passage; the earliest start wins ties."""
    if not passages:
        raise ValueError("document has no passages")
    best, best_score = None, -np.inf
    for p in sorted(passages, key=lambda p: p.start_word):
        s = float(scorer(query, p))
        if best is None or s > best_score:
            best, best_score = p, s
    return best, best_score


# -------------------------------------------------------------------------- I/O
def read_corpus(path) -> dict[str, str]:
    """JSONL with one ``{"doc_id": ..., "text": ...}`` object per line."""
    docs: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                doc_id, text = str(obj["doc_id"]), str(obj["text"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed corpus line ({exc})") from None
            if doc_id in docs:
                raise ValueError(f"{path}:{lineno}: duplicate doc_id {doc_id!r}")
            docs[doc_id] = text
    return docs


def write_corpus(docs: dict[str, str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc_id, text in docs.items():
            fh.write(json.dumps({"doc_id": doc_id, "text": text}, ensure_ascii=False) + "\n")


def read_queries(path) -> dict[str, str]:
    """TSV ``qid<TAB>text``."""
    queries: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        qid, sep, text = line.partition("\t")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected 'qid<TAB>text'")
        if qid in queries:
            raise ValueError(f"{path}:{lineno}: duplicate query id {qid!r}")
        queries[qid] = text
    return queries


def write_queries(queries: dict[str, str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid, text in queries.items():
            fh.write(f"{qid}\t{text}\n")
