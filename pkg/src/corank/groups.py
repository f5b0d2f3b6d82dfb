"""Overlapping group schedule, groupwise scorer, score merging, pointwise head."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import Encoder, EncoderConfig, truncated_normal
from .tensor import Parameter, Tensor


@dataclass(frozen=True)
class GroupSchedule:
    k: int
    n: int
    o: int
    groups: tuple  # tuples of 1-based ranks, unpadded
    pad_masks: tuple  # bool arrays of length n, True = real slot

    def __len__(self) -> int:
        return len(self.groups)


def schedule_groups(k: int, n: int, o: int) -> GroupSchedule:
    """Windows of n ranks with stride n - o; the last one is zero padded."""
    if n < 1 or k < 1 or o < 0:
        raise ValueError("need k >= 1, n >= 1, o >= 0")
    if o >= n:
        raise ValueError("overlap must be smaller than group size")
    stride = n - o
    count = math.ceil(max(k - o, 1) / stride)
    groups, masks = [], []
    for g in range(count):
        start = g * stride + 1
        members = tuple(range(start, min(start + n - 1, k) + 1))
        mask = np.zeros(n, dtype=bool)
        mask[: len(members)] = True
        groups.append(members)
        masks.append(mask)
    return GroupSchedule(k, n, o, tuple(groups), tuple(masks))


@dataclass
class ScoredList:
    query_id: str
    entries: list = field(default_factory=list)  # (doc_id, score, source_group)

    def __post_init__(self):
        self.entries.sort(key=lambda e: (-e[1], e[0]))
        ids = [e[0] for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("a document appears twice in a scored list")

    @property
    def doc_ids(self) -> list[str]:
        return [e[0] for e in self.entries]


def merge_scores(group_scores, schedule: GroupSchedule, doc_ids, query_id: str = "") -> ScoredList:
    """Keep each document's score from the earliest group that holds it.

    ``doc_ids[r - 1]`` is the document at rank r of the ranking the schedule
    was built over; ``group_scores[g]`` lists one score per real slot of group g.
    """
    if len(group_scores) != len(schedule.groups):
        raise ValueError("one score vector per group is required")
    final: dict[str, tuple] = {}
    for g, (members, scores) in enumerate(zip(schedule.groups, group_scores), start=1):
        scores = np.asarray(scores, dtype=float)
        if len(scores) < len(members):
            raise ValueError(f"group {g} has {len(members)} members but {len(scores)} scores")
        for rank, s in zip(members, scores):
            doc = doc_ids[rank - 1]
            if doc not in final:
                final[doc] = (doc, float(s), g)
    return ScoredList(query_id, list(final.values()))


class PointwiseHead:
    """score = W . x + b, shared across documents."""

    def __init__(self, hidden: int, prefix: str, seed: int = 0):
        rng = np.random.default_rng([seed, 2])
        self.w = Parameter(f"{prefix}.w", truncated_normal(rng, (hidden,)))
        self.b = Parameter(f"{prefix}.b", np.zeros(()))

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]

    def __call__(self, x) -> Tensor:
        return pointwise_score(x, self.w, self.b)


def pointwise_score(x, w, b) -> Tensor:
    x, w = T.as_tensor(x), T.as_tensor(w)
    if x.shape[-1] != w.shape[-1]:
        raise ValueError(f"dimension mismatch: {x.shape[-1]} vs {w.shape[-1]}")
    return T.matmul(x, w, "head") + b


class GroupScorer:
    """Encoder without positional embeddings over a group, then a shared linear head."""

    def __init__(self, hidden: int, heads: int, layers: int = 4, max_group: int = 1024,
                 seed: int = 0, prefix: str = "scorer"):
        cfg = EncoderConfig(layers=layers, hidden=hidden, heads=heads,
                            use_positional=False, max_positions=max_group)
        self.encoder = Encoder(cfg, f"{prefix}.encoder", seed)
        self.head = PointwiseHead(hidden, f"{prefix}.head", seed)

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + self.head.parameters()

    def score_group(self, vectors, pad_mask=None, n: int | None = None) -> Tensor:
        """Scores for one group of shape (n, H); padded slots are masked.

        Padded slots get score 0; callers drop them.
        """
        x = T.as_tensor(vectors)
        if n is not None and x.shape[0] != n:
            raise ValueError(f"expected {n} vectors, got {x.shape[0]}")
        mask = np.ones(x.shape[0], dtype=bool) if pad_mask is None else np.asarray(pad_mask, bool)
        if mask.shape != (x.shape[0],):
            raise ValueError("pad mask length must equal group size")
        out = self.encoder.encode(x, mask)
        return self.head(out) * mask.astype(float)

    def score_groups(self, vectors, pad_masks) -> Tensor:
        """Batched form: vectors (G, n, H), masks (G, n) -> scores (G, n)."""
        masks = np.asarray(pad_masks, dtype=bool)
        out = self.encoder.encode(T.as_tensor(vectors), masks)
        return self.head(out) * masks.astype(float)


def pad_group(vectors: Tensor, n: int) -> tuple[Tensor, np.ndarray]:
    """Zero-pad (r, H) to (n, H); returns the padded tensor and its mask."""
    r = vectors.shape[0]
    if r > n:
        raise ValueError(f"group of {r} exceeds size {n}")
    mask = np.zeros(n, dtype=bool)
    mask[:r] = True
    if r == n:
        return vectors, mask
    return T.concat([vectors, np.zeros((n - r, vectors.shape[1]))], axis=0), mask
