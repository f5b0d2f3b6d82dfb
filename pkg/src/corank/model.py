"""The assembled re-ranker and its per-query inference pipeline.

Components, all trained end to end except the frozen first-pass ranker:

* ``first_pass`` - pointwise [CLS] ranker used for MaxP passage selection,
  PRF selection and group ordering (stands in for an externally trained
  passage ranker).
* ``base`` - interaction encoder shared by prototypes and candidates.
* ``calibrator`` - two-token pair encoder and prototype weights.
* ``scorer`` - groupwise encoder (no positional embeddings) and head.
* ``pointwise`` - linear head used by the prf-only variant.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .calibrator import Calibrator
from .config import VARIANTS, ModelConfig
from .encoder import Encoder, EncoderConfig
from .groups import (GroupSchedule, GroupScorer, PointwiseHead, ScoredList, merge_scores,
                     pad_group, schedule_groups)
from .interaction import (TokenSequence, Tokenizer, build_sequence, interaction_vectors,
                          split_words, window_passages)
from .tensor import Parameter, Tensor, load_snapshot, save_snapshot, snapshot_bytes

SCORE_CHUNK = 256


def base_encoder_config(cfg: ModelConfig) -> EncoderConfig:
    return EncoderConfig(layers=cfg.base_layers, hidden=cfg.hidden, heads=cfg.heads,
                         use_positional=True, max_positions=cfg.max_seq_len,
                         vocab_size=cfg.vocab_size, use_segments=True)


class PointwiseRanker:
    """[CLS] q [SEP] p [SEP] -> encoder -> linear score."""

    def __init__(self, cfg: ModelConfig, prefix: str = "first_pass", seed=0):
        self.encoder = Encoder(base_encoder_config(cfg), f"{prefix}.encoder", seed)
        self.head = PointwiseHead(cfg.hidden, f"{prefix}.head", seed)

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + self.head.parameters()

    def score(self, seqs) -> Tensor:
        return self.head(interaction_vectors(seqs, self.encoder))

    def score_many(self, seqs, chunk: int = SCORE_CHUNK) -> np.ndarray:
        out = []
        with T.no_grad():
            for i in range(0, len(seqs), chunk):
                out.append(self.score(seqs[i:i + chunk]).data)
        return np.concatenate(out) if out else np.zeros(0)


class CoBERT:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        s = cfg.seed
        self.first_pass = PointwiseRanker(cfg, "first_pass", [s, 10])
        self.base = Encoder(base_encoder_config(cfg), "base", [s, 11])
        self.calibrator = Calibrator(cfg.hidden, cfg.heads, cfg.calib_layers, [s, 12])
        self.scorer = GroupScorer(cfg.hidden, cfg.heads, cfg.group_layers, cfg.max_group, [s, 13])
        self.pointwise = PointwiseHead(cfg.hidden, "pointwise", [s, 14])

    # ------------------------------------------------------------- parameters
    def parameter_groups(self) -> dict[str, list[Parameter]]:
        return {
            "first_pass": self.first_pass.parameters(),
            "base": self.base.parameters(),
            "calibrator": self.calibrator.encoder.parameters(),
            "prototype_head": [self.calibrator.w_t, self.calibrator.b_t],
            "scorer": self.scorer.encoder.parameters(),
            "scorer_head": self.scorer.head.parameters(),
            "pointwise_head": self.pointwise.parameters(),
        }

    def parameters(self) -> list[Parameter]:
        return [p for group in self.parameter_groups().values() for p in group]

    def trainable_for(self, variant: str) -> list[Parameter]:
        """Parameters that the given variant's loss depends on (first pass excluded)."""
        g = self.parameter_groups()
        names = {
            "full": ("base", "calibrator", "prototype_head", "scorer", "scorer_head"),
            "prf-only": ("base", "calibrator", "prototype_head", "pointwise_head"),
            "group-only": ("base", "scorer", "scorer_head"),
        }[variant]
        return [p for n in names for p in g[n]]

    def init_from_first_pass(self) -> None:
        """Seed the interaction encoder and both scoring heads from the first-pass ranker.

        The calibrator and the group encoder start close to the identity on
        interaction vectors, so every variant begins near the first-pass scores.
        """
        for src, dst in zip(self.first_pass.encoder.parameters(), self.base.parameters()):
            dst.data[...] = src.data
        for head in (self.pointwise, self.scorer.head):
            head.w.data[...] = self.first_pass.head.w.data
            head.b.data[...] = self.first_pass.head.b.data

    def snapshot_bytes(self, meta: dict | None = None) -> bytes:
        return snapshot_bytes(self.parameters(), self._meta(meta))

    def save(self, path, meta: dict | None = None) -> None:
        save_snapshot(self.parameters(), path, self._meta(meta))

    def _meta(self, meta):
        out = {"model_config": dataclasses.asdict(self.cfg)}
        out.update(meta or {})
        return out

    @classmethod
    def load(cls, path) -> tuple["CoBERT", dict]:
        params, meta = load_snapshot(path)
        model = cls(ModelConfig(**meta["model_config"]))
        model.load_state(params)
        return model, meta

    def load_state(self, params: dict) -> None:
        own = {p.name: p for p in self.parameters()}
        missing = set(own) - set(params)
        if missing:
            raise ValueError(f"snapshot lacks parameters: {sorted(missing)[:5]}")
        for name, p in own.items():
            if params[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {params[name].shape} vs {p.shape}")
            p.data[...] = params[name].data

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def set_state(self, state: dict) -> None:
        for p in self.parameters():
            p.data[...] = state[p.name]

    # ---------------------------------------------------------------- forward
    def score_batch(self, proto_seqs, cand_seqs, n: int, variant: str = "full",
                    residual: bool = True) -> Tensor:
        """Scores for one group of candidates (length len(cand_seqs) <= n).

        Prototypes and candidates go through the shared base encoder in a
        single pass, like a training batch of n + m sequences.
        """
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        if len(cand_seqs) > n:
            raise ValueError(f"{len(cand_seqs)} candidates exceed group size {n}")
        use_prf = variant != "group-only"
        if use_prf and not proto_seqs:
            raise ValueError("calibration requires m >= 1")
        seqs = (list(proto_seqs) if use_prf else []) + list(cand_seqs)
        vecs = interaction_vectors(seqs, self.base)
        m = len(proto_seqs) if use_prf else 0
        r = vecs[m:]
        if use_prf:
            r = self.calibrator.calibrate(vecs[:m], r, residual)
        if variant == "prf-only":
            return self.pointwise(r)
        return self.score_padded(r, n)

    def score_padded(self, r: Tensor, n: int) -> Tensor:
        padded, mask = pad_group(r, n)
        return self.scorer.score_group(padded, mask)[: r.shape[0]]

    def rerank(self, example: "QueryExample", m: int, n: int, o: int,
               variant: str = "full", residual: bool = True) -> ScoredList:
        """Inference over one query's first-pass ranking."""
        k = len(example.doc_ids)
        sched = schedule_groups(k, n, o)
        with T.no_grad():
            r = _chunked_vectors(example.seqs, self.base)
            if variant != "group-only":
                if m < 1:
                    raise ValueError("calibration requires m >= 1")
                protos = r[: min(m, k)]
                r = Tensor(np.concatenate([
                    self.calibrator.calibrate(protos, r[i:i + SCORE_CHUNK], residual).data
                    for i in range(0, k, SCORE_CHUNK)]))
            if variant == "prf-only":
                flat = self.pointwise(r).data
                per_group = [flat[np.array(g) - 1] for g in sched.groups]
            else:
                per_group = self._group_scores(r, sched)
        return merge_scores(per_group, sched, example.doc_ids, example.qid)

    def _group_scores(self, r: Tensor, sched: GroupSchedule) -> list[np.ndarray]:
        h = r.shape[1]
        vecs = np.zeros((len(sched), sched.n, h))
        for g, members in enumerate(sched.groups):
            vecs[g, : len(members)] = r.data[np.array(members) - 1]
        scores = self.scorer.score_groups(vecs, np.stack(sched.pad_masks)).data
        return [scores[g, : len(members)] for g, members in enumerate(sched.groups)]


def _chunked_vectors(seqs, encoder) -> Tensor:
    parts = [interaction_vectors(seqs[i:i + SCORE_CHUNK], encoder).data
             for i in range(0, len(seqs), SCORE_CHUNK)]
    return Tensor(np.concatenate(parts))


# ------------------------------------------------------------- query pipeline
@dataclass
class QueryExample:
    """One query's candidates in first-pass order, each as its best passage."""

    qid: str
    doc_ids: list
    seqs: list
    first_pass_scores: np.ndarray
    labels: np.ndarray  # binary, rel >= 1
    n_passages: int = 0

    @property
    def k(self) -> int:
        return len(self.doc_ids)


def prepare_query(ranker: PointwiseRanker | None, tokenizer: Tokenizer, qid: str, query: str,
                  candidates, corpus: dict, cfg: ModelConfig, qrels: dict | None = None,
                  passage_selector=None) -> QueryExample:
    """MaxP first pass: score every passage, keep each document's best one.

    Documents are ordered by best-passage score (ties by doc_id). With
    ``ranker=None`` the ``passage_selector(query_tokens, passages)`` picks
    passages and the candidate order is kept (used before a ranker exists).
    """
    q_tokens = tokenizer.tokenize(query)
    doc_seqs, owners = [], []
    per_doc_passages = []
    for d in candidates:
        passages = window_passages(split_words(corpus[d]), cfg.window, cfg.stride, d)
        seqs = [build_sequence(q_tokens, tokenizer.encode_words(p.words), cfg.max_seq_len)
                for p in passages]
        per_doc_passages.append((passages, seqs))
        doc_seqs.extend(seqs)
        owners.extend([len(per_doc_passages) - 1] * len(seqs))

    best_seqs, best_scores = [], []
    if ranker is not None:
        scores = ranker.score_many(doc_seqs)
        pos = 0
        for passages, seqs in per_doc_passages:
            s = scores[pos:pos + len(seqs)]
            pos += len(seqs)
            j = int(np.argmax(s))  # first maximum = earliest passage
            best_seqs.append(seqs[j])
            best_scores.append(float(s[j]))
    else:
        for passages, seqs in per_doc_passages:
            j = passage_selector(q_tokens, passages, tokenizer) if passage_selector else 0
            best_seqs.append(seqs[j])
            best_scores.append(0.0)

    candidates = list(candidates)
    order = list(range(len(candidates)))
    if ranker is not None:
        order.sort(key=lambda i: (-best_scores[i], candidates[i]))
    rel = qrels.get(qid, {}) if qrels else {}
    return QueryExample(
        qid=qid,
        doc_ids=[candidates[i] for i in order],
        seqs=[best_seqs[i] for i in order],
        first_pass_scores=np.array([best_scores[i] for i in order]),
        labels=np.array([1.0 if rel.get(candidates[i], 0) >= 1 else 0.0 for i in order]),
        n_passages=len(doc_seqs),
    )


def overlap_selector(q_tokens, passages, tokenizer) -> int:
    """Index of the passage with most query-token occurrences (earliest on ties)."""
    qset = set(q_tokens)
    counts = [sum(1 for t in tokenizer.encode_words(p.words) if t in qset) for p in passages]
    return int(np.argmax(counts))

