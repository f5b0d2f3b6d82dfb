"""Analytic inference cost of the two-pass pipeline.

Counting convention: only matrix products are counted, at 2*m*k*n FLOPs for
an (m x k) @ (k x n) product. Embedding lookups, softmax, layer norm, GELU
and elementwise adds are free. This is exactly what
``tensor.count_flops`` records, so analytic and instrumented counts agree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .encoder import EncoderConfig
from .groups import schedule_groups

TERA = 1e12


def matmul_flops(m: int, k: int, n: int) -> int:
    return 2 * m * k * n


def layer_flops(cfg: EncoderConfig, seq_len: int) -> int:
    s, h, f = seq_len, cfg.hidden, cfg.ffn
    proj = 4 * matmul_flops(s, h, h)
    attn = 2 * cfg.heads * matmul_flops(s, cfg.head_dim, s)  # scores + context
    ffn = matmul_flops(s, h, f) + matmul_flops(s, f, h)
    return proj + attn + ffn


def encoder_flops(cfg: EncoderConfig, seq_len: int) -> int:
    if seq_len > cfg.max_positions:
        raise ValueError(f"sequence of length {seq_len} exceeds max positions")
    return cfg.layers * layer_flops(cfg, seq_len)


def head_flops(hidden: int, count: int = 1) -> int:
    """A linear H -> 1 projection applied ``count`` times."""
    return count * matmul_flops(1, hidden, 1)


def calibration_flops(cfg: EncoderConfig, m: int) -> int:
    """Per candidate: m two-token pair encodings; plus m prototype weights."""
    return m * encoder_flops(cfg, 2) + head_flops(cfg.hidden, m)


def group_flops(cfg: EncoderConfig, n: int) -> int:
    return encoder_flops(cfg, n) + head_flops(cfg.hidden, n)


def second_pass_slots(k: int, n: int, o: int, m: int, variant: str = "full") -> int:
    """Re-scored passages per query: groups x (n + m) batch slots."""
    groups = len(schedule_groups(k, n, o))
    return groups * (n + (0 if variant == "group-only" else m))


@dataclass(frozen=True)
class FlopsReport:
    queries: int
    first_passages: int
    first_flops: float
    second_passages: int
    second_flops: float
    baseline_flops: float
    avg_passages_per_doc: float | None = None

    @property
    def total_flops(self) -> float:
        return self.first_flops + self.second_flops

    @property
    def per_query(self) -> float:
        return self.total_flops / self.queries

    @property
    def ratio(self) -> float:
        return self.total_flops / self.baseline_flops

    def tsv_row(self, name: str, unit: float = TERA) -> str:
        return "\t".join([
            name, str(self.queries), f"{self.first_passages:,}", f"{self.first_flops / unit:,.3f}",
            f"{self.second_passages:,}", f"{self.second_flops / unit:,.3f}",
            f"{self.per_query / unit:,.3f}", f"{self.ratio:.3f}x",
        ])


TSV_HEADER = "\t".join(["model", "#Q", "first_passages", "first_FLOPs(T)", "second_passages",
                        "second_FLOPs(T)", "FLOPs(T)/query", "total"])


def pipeline_flops(queries: int, first_passages: int, second_passages: int,
                   first_cost: float, second_cost: float,
                   baseline_flops: float | None = None,
                   docs_per_query: int | None = None) -> FlopsReport:
    """Totals from per-passage costs; the baseline defaults to the first pass alone."""
    return report_from_totals(queries, first_passages, first_passages * first_cost,
                              second_passages, second_passages * second_cost,
                              baseline_flops, docs_per_query)


def report_from_totals(queries: int, first_passages: int, first_flops: float,
                       second_passages: int, second_flops: float,
                       baseline_flops: float | None = None,
                       docs_per_query: int | None = None) -> FlopsReport:
    if queries <= 0:
        raise ValueError("number of queries must be positive")
    if min(first_passages, second_passages) < 0 or min(first_flops, second_flops) < 0:
        raise ValueError("passage counts and FLOPs must be non-negative")
    baseline = first_flops if baseline_flops is None else baseline_flops
    if baseline <= 0:
        raise ValueError("baseline FLOPs must be positive")
    cbar = first_passages / (queries * docs_per_query) if docs_per_query else None
    return FlopsReport(queries, first_passages, first_flops, second_passages, second_flops,
                       baseline, cbar)


def model_report(base_cfg: EncoderConfig, calib_cfg: EncoderConfig, group_cfg: EncoderConfig,
                 queries: int, k: int, passages_per_doc: float, seq_len: int,
                 n: int, m: int, o: int, variant: str = "full") -> FlopsReport:
    """Cost of one configuration from the analytic counts."""
    per_passage = encoder_flops(base_cfg, seq_len) + head_flops(base_cfg.hidden)
    first_passages = int(math.ceil(queries * k * passages_per_doc))
    sched = schedule_groups(k, n, o)
    slots = second_pass_slots(k, n, o, m, variant)
    second = queries * slots * encoder_flops(base_cfg, seq_len)
    if variant != "group-only":
        second += queries * k * calibration_flops(calib_cfg, m)
    if variant == "prf-only":
        second += queries * head_flops(base_cfg.hidden, k)
    else:
        second += queries * len(sched) * group_flops(group_cfg, n)
    return report_from_totals(queries, first_passages, first_passages * per_passage,
                              queries * slots, second, docs_per_query=k)
