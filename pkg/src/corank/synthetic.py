"""Synthetic re-ranking collections with a feedback signal and a group signal.

Every query owns a pool of documents that all mention both query words.
Per query a hidden *target topic* and a *key cluster* are drawn.

* Anchors repeat the query words and carry the target topic. They are
  relevant (grade 2) and easy to find pointwise, so they end up at the top
  of a decent first-pass ranking and serve as feedback documents.
* Every other document carries one topic word and one cluster word. It is
  relevant (grade 1) iff it has the target topic and the key cluster.
* The target topic is not in the query text; it is recoverable from the
  top-ranked feedback documents only.
* The key cluster is the most frequent cluster word of the pool, each
  distractor cluster being rarer. It is recoverable by comparing documents
  of the same ranking, and stays the most frequent one in any group that a
  ranker enriches with relevant documents.
* Topics are balanced within the non-anchor documents and every topic and
  cluster word is shared across queries, so neither is relevant on its own.

``SyntheticCollection.tokenizer`` maps every query word to one shared
out-of-vocabulary id, the way rare names collapse into a hash bucket. A
model then sees how often a document repeats the query but not which query
it is, so it cannot memorise per-query answers from the training queries.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .evalkit import write_qrels
from .interaction import N_SPECIAL, Tokenizer, write_corpus, write_queries


@dataclass
class SyntheticCollection:
    corpus: dict  # doc_id -> text
    queries: dict  # qid -> text
    qrels: dict  # qid -> {doc_id: grade}
    pools: dict  # qid -> doc ids of the query's pool
    target_topic: dict  # qid -> topic word
    key_cluster: dict  # qid -> cluster word

    def vocabulary(self) -> list[str]:
        words = set()
        for text in list(self.corpus.values()) + list(self.queries.values()):
            words.update(text.split())
        return sorted(words)

    def tokenizer(self) -> Tokenizer:
        """Known ids for shared words; all query words hash into a single bucket."""
        query_words = {w for text in self.queries.values() for w in text.split()}
        known = [w for w in self.vocabulary() if w not in query_words]
        return Tokenizer(known, N_SPECIAL + len(known) + 1)


def _distinct_pairs(rng, pool: int, count: int) -> list[tuple[int, int]]:
    pairs = [(a, b) for a in range(pool) for b in range(a + 1, pool)]
    if len(pairs) < count:
        raise ValueError(f"{pool} query words give fewer than {count} distinct pairs")
    return [pairs[i] for i in rng.permutation(len(pairs))[:count]]


def _draw(rng, count: int, prior: float | None) -> int:
    """Index 0 with probability ``prior``, otherwise uniform over the rest; uniform if None."""
    if prior is None:
        return int(rng.integers(count))
    if rng.random() < prior:
        return 0
    return 1 + int(rng.integers(count - 1))


def generate(n_queries: int = 60, docs_per_query: int = 200, n_anchors: int = 6,
             n_topics: int = 3, n_clusters: int = 5, key_fraction: float = 0.4,
             n_cluster_words: int = 12, n_query_words: int = 16, signal_repeat: int = 3,
             doc_len: int = 8, n_background: int = 0, topic_prior: float | None = None,
             key_prior: float | None = None, seed: int = 0) -> SyntheticCollection:
    """Draw a collection; ``n_clusters`` counts the key cluster plus its distractors.

    ``topic_prior`` / ``key_prior`` skew the per-query draw toward the first
    topic / cluster word, giving a pointwise ranker a global preference to
    learn while other queries deviate from it.

    Documents shorter than ``doc_len`` are filled with background words.
    """
    rest = docs_per_query - n_anchors
    if rest < n_topics or n_anchors < 0:
        raise ValueError("need at least one non-anchor document per topic")
    if not 2 <= n_clusters <= n_cluster_words:
        raise ValueError("need 2 <= n_clusters <= n_cluster_words")
    if not 1.0 / n_clusters < key_fraction < 1.0:
        raise ValueError("key_fraction must exceed an even share and stay below 1")
    if doc_len > 2 + 2 * signal_repeat and n_background < 1:
        raise ValueError("filling documents needs background words")
    rng = np.random.default_rng(seed)
    topic_words = [f"tp{t}" for t in range(n_topics)]
    cluster_words = [f"cl{c}" for c in range(n_cluster_words)]
    background = [f"bg{i}" for i in range(n_background)]
    pairs = _distinct_pairs(rng, n_query_words, n_queries)
    corpus, queries, qrels, pools, targets, keys = {}, {}, {}, {}, {}, {}
    for qi in range(n_queries):
        qid = str(101 + qi)
        qwords = [f"qw{w}" for w in pairs[qi]]
        queries[qid] = " ".join(qwords)
        tgt = topic_words[_draw(rng, n_topics, topic_prior)]
        first = _draw(rng, n_cluster_words, key_prior)
        others = [c for c in rng.permutation(n_cluster_words) if c != first][: n_clusters - 1]
        clusters = [cluster_words[c] for c in [first] + others]
        key = clusters[0]
        targets[qid], keys[qid] = tgt, key

        topics = rng.permutation(np.arange(rest) % n_topics)
        n_key = int(round(key_fraction * rest))
        others = np.arange(rest - n_key) % (n_clusters - 1) + 1
        assign = rng.permutation(np.concatenate([np.zeros(n_key, dtype=int), others]))

        specs = [(True, tgt, None)] * n_anchors
        specs += [(False, topic_words[t], clusters[c]) for t, c in zip(topics, assign)]
        ids = rng.permutation(docs_per_query)  # anchors must not own the smallest ids
        pool, judged = [], {}
        for j, (anchor, topic, cluster) in enumerate(specs):
            words = [topic] * signal_repeat
            if anchor:
                words += qwords * 3
            else:
                words += qwords + [cluster] * signal_repeat
            fill = max(doc_len - len(words), 0)
            if fill:
                words += list(rng.choice(background, size=fill))
            words = [words[i] for i in rng.permutation(len(words))]
            doc_id = f"D{qid}-{ids[j]:03d}"
            corpus[doc_id] = " ".join(words)
            pool.append(doc_id)
            judged[doc_id] = 2 if anchor else int(topic == tgt and cluster == key)
        pools[qid] = [pool[i] for i in rng.permutation(len(pool))]
        qrels[qid] = judged
    return SyntheticCollection(corpus, queries, qrels, pools, targets, keys)


def write_collection(col: SyntheticCollection, directory) -> dict:
    """corpus.jsonl, queries.tsv and qrels.txt under ``directory``; returns their paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"corpus": d / "corpus.jsonl", "queries": d / "queries.tsv", "qrels": d / "qrels.txt"}
    write_corpus(col.corpus, paths["corpus"])
    write_queries(col.queries, paths["queries"])
    write_qrels(col.qrels, paths["qrels"])
    return paths


def main(argv=None) -> int:
    import argparse

    ap = argparse.ArgumentParser(prog="python3 -m corank.synthetic",
                                 description="write a synthetic re-ranking collection")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--queries", type=int, default=60, help="number of queries (default 60)")
    ap.add_argument("--docs", type=int, default=200, help="documents per query (default 200)")
    ap.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    args = ap.parse_args(argv)
    write_collection(generate(args.queries, args.docs, seed=args.seed), args.out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
