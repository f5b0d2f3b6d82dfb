"""Pointwise training, batch feeding orders, warmup schedule and CV harness."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig, TrainConfig
from .evalkit import ndcg_at
from .groups import schedule_groups
from .interaction import Tokenizer
from .model import CoBERT, QueryExample, overlap_selector, prepare_query
from .tensor import Tensor

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


# ------------------------------------------------------------------------- loss
def to_probability(score):
    """Logistic link from a relevance score to P(relevant)."""
    return T.sigmoid(score)


def loss(probs, labels, pad_mask=None) -> Tensor:
    """-sum_pos log(pr) - sum_neg log(1 - pr); padded slots contribute nothing.

    Each log argument is floored at 1e-12, so a perfect prediction costs 0.
    """
    probs = T.as_tensor(probs)
    y = np.asarray(labels, dtype=float)
    if y.shape != probs.shape:
        raise ValueError(f"labels shape {y.shape} != probabilities shape {probs.shape}")
    keep = np.ones_like(y, dtype=bool) if pad_mask is None else np.asarray(pad_mask, bool)
    if not np.all(np.isin(y[keep], (0.0, 1.0))):
        raise ValueError("labels must be 0 or 1")
    pos = (y == 1) & keep
    neg = (y == 0) & keep
    log_p = T.log(T.clip(probs, PROB_FLOOR, 1.0))
    log_q = T.log(T.clip(1.0 - probs, PROB_FLOOR, 1.0))
    return -((log_p * pos.astype(float)).sum() + (log_q * neg.astype(float)).sum())


def score_loss(scores, labels, pad_mask=None) -> Tensor:
    """The same loss evaluated on raw scores through the logistic link.

    Values equal ``loss(to_probability(scores), ...)``; the floor does not cut
    the gradient, which keeps confidently wrong predictions trainable.
    """
    s = T.as_tensor(scores)
    y = np.asarray(labels, dtype=float)
    if y.shape != s.shape:
        raise ValueError(f"labels shape {y.shape} != scores shape {s.shape}")
    keep = np.ones_like(y, dtype=bool) if pad_mask is None else np.asarray(pad_mask, bool)
    if not np.all(np.isin(y[keep], (0.0, 1.0))):
        raise ValueError("labels must be 0 or 1")
    pos = ((y == 1) & keep).astype(float)
    neg = ((y == 0) & keep).astype(float)
    log_p = T.log_sigmoid(s, PROB_FLOOR)
    log_q = T.log_sigmoid(-s, PROB_FLOOR)
    return -((log_p * pos).sum() + (log_q * neg).sum())


def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_fraction: float) -> float:
    """Linear warmup to base_lr over round(fraction * total) steps, then linear decay to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError("step must lie in [0, total_steps]")
    warm = int(round(warmup_fraction * total_steps))
    if step < warm:
        return base_lr * step / warm
    if total_steps == warm:
        return base_lr
    return base_lr * (total_steps - step) / (total_steps - warm)


class Adam:
    def __init__(self, params, betas=ADAM_BETAS, eps: float = ADAM_EPS):
        self.params = [p for p in params if p.trainable]
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping; ``max_norm`` 0 leaves gradients alone.
    """
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


# ---------------------------------------------------------------------- batches
@dataclass(frozen=True)
class TrainBatch:
    query_id: str
    group_index: int
    prototype_ids: tuple
    context_ids: tuple  # first o members, carried over from the previous window
    candidate_ids: tuple  # the whole window, context included
    positions: tuple  # 0-based positions of candidates in the first-pass ranking
    labels: np.ndarray  # length n, zero on padding
    pad_mask: np.ndarray  # length n

    def key(self) -> tuple:
        return (self.query_id, self.group_index)


def query_batches(ex: QueryExample, n: int, o: int, m: int) -> list[TrainBatch]:
    sched = schedule_groups(ex.k, n, o)
    protos = tuple(ex.doc_ids[:m])
    out = []
    for g, (members, mask) in enumerate(zip(sched.groups, sched.pad_masks)):
        pos = tuple(r - 1 for r in members)
        labels = np.zeros(n)
        labels[: len(pos)] = ex.labels[list(pos)]
        cands = tuple(ex.doc_ids[p] for p in pos)
        out.append(TrainBatch(ex.qid, g, protos, cands[:o] if g else (), cands, pos,
                              labels, mask))
    return out


def make_batches(examples: Sequence[QueryExample], n: int, o: int, m: int,
                 order_mode: str = "shuffled", rng: np.random.Generator | None = None
                 ) -> list[TrainBatch]:
    """All windows of all queries in the requested feeding order.

    ``shuffled`` permutes every batch globally. ``initial``/``reversed`` keep
    each query's windows in (reversed) ranking order while the queries are
    randomly interleaved.
    """
    rng = rng or np.random.default_rng(0)
    per_query = [query_batches(ex, n, o, m) for ex in examples]
    if order_mode == "shuffled":
        flat = [b for bs in per_query for b in bs]
        return [flat[i] for i in rng.permutation(len(flat))]
    if order_mode not in ("initial", "reversed"):
        raise ValueError(f"unknown order mode {order_mode!r}")
    queues = [list(reversed(bs)) if order_mode == "reversed" else list(bs) for bs in per_query]
    slots = np.concatenate([np.full(len(q), i) for i, q in enumerate(queues)]) if queues else []
    slots = rng.permutation(slots)
    cursor = [0] * len(queues)
    out = []
    for qi in slots:
        out.append(queues[qi][cursor[qi]])
        cursor[qi] += 1
    return out


# ------------------------------------------------------------------ the dataset
@dataclass
class Dataset:
    corpus: dict
    queries: dict
    qrels: dict
    candidates: dict  # qid -> initial ranking (doc ids)
    tokenizer: Tokenizer

    def subset(self, qids) -> "Dataset":
        qids = list(qids)
        return Dataset(self.corpus, {q: self.queries[q] for q in qids},
                       {q: self.qrels.get(q, {}) for q in qids},
                       {q: self.candidates[q] for q in qids}, self.tokenizer)


def prepare_examples(ds: Dataset, model: CoBERT | None, k: int, qids=None,
                     mcfg: ModelConfig | None = None) -> list[QueryExample]:
    """First-pass MaxP ranking per query.

    Without a model, passages are chosen lexically and the initial order kept;
    ``mcfg`` then supplies the windowing parameters.
    """
    cfg = model.cfg if model is not None else mcfg
    if cfg is None:
        raise ValueError("need a model or a model config")
    out = []
    for qid in sorted(qids if qids is not None else ds.queries):
        cands = list(ds.candidates.get(qid, []))[:k]
        if not cands:
            continue
        if model is None:
            ex = prepare_query(None, ds.tokenizer, qid, ds.queries[qid], cands, ds.corpus,
                               cfg, ds.qrels, overlap_selector)
        else:
            ex = prepare_query(model.first_pass, ds.tokenizer, qid, ds.queries[qid], cands,
                               ds.corpus, cfg, ds.qrels)
        out.append(ex)
    return out


# --------------------------------------------------------------------- training
@dataclass
class EpochRecord:
    epoch: int
    loss: float
    valid_ndcg: float | None = None


@dataclass
class TrainResult:
    model: CoBERT
    history: list = field(default_factory=list)
    first_pass_history: list = field(default_factory=list)
    selected_epoch: int = 0


def select_model(scores) -> int:
    """1-based epoch with the highest validation nDCG@20 (earliest on ties)."""
    vals = [s.valid_ndcg if isinstance(s, EpochRecord) else s for s in scores]
    if not vals:
        raise ValueError("no checkpoints to select from")
    return int(np.argmax(np.asarray(vals, dtype=float))) + 1


def _check_dataset(examples: Sequence[QueryExample]) -> None:
    labels = np.concatenate([ex.labels for ex in examples]) if examples else np.zeros(0)
    if labels.size == 0 or labels.max() < 1 or labels.min() > 0:
        raise ValueError("degenerate training set: need at least one positive and one negative")


def train_first_pass(model: CoBERT, examples: Sequence[QueryExample], tcfg: TrainConfig) -> list:
    """Pointwise training of the first-pass ranker on lexically chosen passages."""
    pairs = [(ex.seqs[i], ex.labels[i]) for ex in examples for i in range(ex.k)]
    size = tcfg.n + tcfg.m
    steps_per_epoch = (len(pairs) + size - 1) // size
    total = steps_per_epoch * tcfg.first_pass_epochs
    params = model.first_pass.parameters()
    opt = Adam(params)
    rng = np.random.default_rng([tcfg.seed, 1])
    history, step = [], 0
    for epoch in range(1, tcfg.first_pass_epochs + 1):
        order = rng.permutation(len(pairs))
        running = 0.0
        for s in range(0, len(order), size):
            chunk = [pairs[i] for i in order[s:s + size]]
            scores = model.first_pass.score([c[0] for c in chunk])
            batch_loss = score_loss(scores, [c[1] for c in chunk])
            opt.zero_grad()
            batch_loss.backward()
            clip_grad_norm(opt.params, tcfg.grad_clip)
            step += 1
            opt.step(lr_schedule(step, total, tcfg.first_pass_lr, tcfg.warmup_fraction))
            running += batch_loss.item()
        history.append(EpochRecord(epoch, running / max(len(pairs), 1)))
        log.info("first-pass epoch %d loss %.4f", epoch, history[-1].loss)
    for p in params:
        p.grad = None
    return history


def batch_loss(model: CoBERT, ex: QueryExample, batch: TrainBatch, tcfg: TrainConfig) -> Tensor:
    protos = [ex.seqs[i] for i in range(min(tcfg.m, ex.k))] if tcfg.variant != "group-only" else []
    cands = [ex.seqs[p] for p in batch.positions]
    scores = model.score_batch(protos, cands, tcfg.n, tcfg.variant, tcfg.residual)
    real = len(cands)
    return score_loss(scores, batch.labels[:real])


def train_cobert(model: CoBERT, examples: Sequence[QueryExample], tcfg: TrainConfig,
                 valid: Sequence[QueryExample] | None = None, valid_qrels: dict | None = None,
                 max_steps: int | None = None) -> tuple[list, int]:
    """End-to-end training; returns (history, selected 1-based epoch)."""
    _check_dataset(examples)
    by_qid = {ex.qid: ex for ex in examples}
    params = model.trainable_for(tcfg.variant)
    opt = Adam(params)
    n_batches = len(make_batches(examples, tcfg.n, tcfg.o, tcfg.m, "shuffled"))
    total = n_batches * tcfg.epochs if max_steps is None else max_steps
    history, states, step = [], [], 0
    for epoch in range(1, tcfg.epochs + 1):
        rng = np.random.default_rng([tcfg.seed, 2, epoch])
        batches = make_batches(examples, tcfg.n, tcfg.o, tcfg.m, tcfg.order_mode, rng)
        running = 0.0
        for b in batches:
            if step >= total:
                break
            lval = batch_loss(model, by_qid[b.query_id], b, tcfg)
            opt.zero_grad()
            lval.backward()
            clip_grad_norm(opt.params, tcfg.grad_clip)
            step += 1
            opt.step(lr_schedule(step, total, tcfg.base_lr, tcfg.warmup_fraction))
            running += lval.item()
        rec = EpochRecord(epoch, running / max(sum(ex.k for ex in examples), 1))
        if valid:
            runs = rerank_examples(model, valid, tcfg)
            rec.valid_ndcg = ndcg_at({sl.query_id: sl.doc_ids for sl in runs},
                                     valid_qrels, 20).mean
            states.append(model.state())
        history.append(rec)
        log.info("epoch %d loss %.4f valid nDCG@20 %s", epoch, rec.loss, rec.valid_ndcg)
        if step >= total:
            break
    for p in params:
        p.grad = None
    if valid:
        chosen = select_model(history)
        model.set_state(states[chosen - 1])
    else:
        chosen = len(history)
    return history, chosen


def rerank_examples(model: CoBERT, examples: Sequence[QueryExample], tcfg: TrainConfig,
                    variant: str | None = None, residual: bool | None = None):
    variant = tcfg.variant if variant is None else variant
    residual = tcfg.residual if residual is None else residual
    return [model.rerank(ex, tcfg.m, tcfg.n, tcfg.o, variant, residual) for ex in examples]


def train(ds: Dataset, mcfg: ModelConfig, tcfg: TrainConfig, train_qids=None,
          valid_qids=None, model: CoBERT | None = None) -> TrainResult:
    """Full recipe: first-pass ranker, first-pass ranking, then end-to-end training.

    Passing a ``model`` whose first pass is already trained skips stage one.
    """
    train_qids = sorted(train_qids if train_qids is not None else ds.queries)
    fp_history = []
    if model is None:
        model = CoBERT(mcfg)
        lexical = prepare_examples(ds, None, tcfg.k, train_qids, mcfg)
        _check_dataset(lexical)
        fp_history = train_first_pass(model, lexical, tcfg)
        model.init_from_first_pass()
    examples = prepare_examples(ds, model, tcfg.k, train_qids)
    valid = prepare_examples(ds, model, tcfg.k, valid_qids) if valid_qids else None
    history, chosen = train_cobert(model, examples, tcfg, valid,
                                   ds.qrels if valid_qids else None)
    return TrainResult(model, history, fp_history, chosen)


# ------------------------------------------------------------- cross-validation
@dataclass(frozen=True)
class Fold:
    index: int
    train: tuple
    valid: tuple
    test: tuple


def _qid_key(q: str):
    return (0, int(q), q) if q.lstrip("-").isdigit() else (1, 0, q)


def cv_partitions(qids, folds: int = 5) -> list[list[str]]:
    qids = list(qids)
    if len(set(qids)) != len(qids):
        raise ValueError("duplicate query ids")
    if len(qids) < folds:
        raise ValueError(f"need at least {folds} queries for {folds} folds")
    parts = [[] for _ in range(folds)]
    for i, q in enumerate(sorted(qids, key=_qid_key)):
        parts[i % folds].append(q)
    return parts


def folds_from_partitions(parts: list[list[str]]) -> list[Fold]:
    k = len(parts)
    out = []
    for f in range(k):
        v = (f + 1) % k
        train_ids = [q for i, p in enumerate(parts) if i not in (f, v) for q in p]
        out.append(Fold(f, tuple(train_ids), tuple(parts[v]), tuple(parts[f])))
    return out


def cv_split(qids, folds: int = 5, mode: str = "round_robin", path=None) -> list[Fold]:
    """Round robin over sorted ids, or partitions read from a ``qid<TAB>partition`` file."""
    if mode == "round_robin":
        return folds_from_partitions(cv_partitions(qids, folds))
    if mode != "file":
        raise ValueError(f"unknown split mode {mode!r}")
    return folds_from_partitions(read_partitions(path, folds))


def read_partitions(path, folds: int) -> list[list[str]]:
    parts = [[] for _ in range(folds)]
    seen = set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 2 or not fields[1].isdigit() or int(fields[1]) >= folds:
            raise ValueError(f"{path}:{lineno}: expected 'qid partition' with partition < {folds}")
        if fields[0] in seen:
            raise ValueError(f"{path}:{lineno}: duplicate query id {fields[0]!r}")
        seen.add(fields[0])
        parts[int(fields[1])].append(fields[0])
    return parts


def write_partitions(parts: list[list[str]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, p in enumerate(parts):
            for q in p:
                fh.write(f"{q}\t{i}\n")
