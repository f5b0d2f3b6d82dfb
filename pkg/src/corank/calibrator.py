"""PRF calibration of candidate interaction vectors.

Each candidate vector r_j is paired with every prototype t_i as a two-token
sequence ``(t_i, r_j)`` and passed through a shallow encoder. The output at
r_j's slot gives rt_ij. Prototype weights are a softmax, across the m
prototypes, of a scalar projection of each t_i; the calibrated vector is the
weighted sum of rt_ij, optionally averaged with r_j.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import Encoder, EncoderConfig, truncated_normal
from .interaction import TokenSequence, interaction_vectors
from .tensor import Parameter, Tensor

# which slot of the two-token output is read as rt_ij (1 = r_j's slot)
RT_POSITION = 1


@dataclass
class PrototypeSet:
    query_id: str
    vectors: Tensor  # (m, H)
    source_doc_ids: tuple

    def __post_init__(self):
        m = len(self.source_doc_ids)
        if m < 1:
            raise ValueError("calibration requires m >= 1")
        if len(set(self.source_doc_ids)) != m:
            raise ValueError("prototype source documents must be distinct")
        if self.vectors.ndim != 2 or self.vectors.shape[0] != m:
            raise ValueError(f"expected {m} prototype vectors, got shape {self.vectors.shape}")

    @property
    def m(self) -> int:
        return len(self.source_doc_ids)


def build_prototypes(query_id: str, prf_sequences: list[TokenSequence], base_encoder,
                     doc_ids) -> PrototypeSet:
    """t_i = [CLS] vector of ``[CLS] q [SEP] d_i [SEP]`` from the shared base encoder."""
    if not prf_sequences:
        raise ValueError("calibration requires m >= 1")
    return PrototypeSet(query_id, interaction_vectors(prf_sequences, base_encoder),
                        tuple(doc_ids))


class Calibrator:
    """Two-layer pair encoder plus the prototype weight projection (W_t, b_t)."""

    def __init__(self, hidden: int, heads: int, layers: int = 2, seed: int = 0,
                 prefix: str = "calibrator"):
        cfg = EncoderConfig(layers=layers, hidden=hidden, heads=heads,
                            use_positional=True, max_positions=2)
        self.encoder = Encoder(cfg, f"{prefix}.encoder", seed)
        rng = np.random.default_rng([seed, 1])
        self.w_t = Parameter(f"{prefix}.w_t", truncated_normal(rng, (hidden,)))
        self.b_t = Parameter(f"{prefix}.b_t", np.zeros(()))

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + [self.w_t, self.b_t]

    def prototype_weights(self, protos) -> Tensor:
        t = _vectors(protos)
        return T.softmax(T.matmul(t, self.w_t, "head") + self.b_t, axis=0)

    def pair_outputs(self, protos, r) -> Tensor:
        """rt_ij for every candidate j and prototype i, shape (N, m, H)."""
        t, r = _vectors(protos), T.as_tensor(r)
        if t.shape[-1] != r.shape[-1]:
            raise ValueError(f"dimension mismatch: prototypes {t.shape[-1]}, candidates {r.shape[-1]}")
        n, h = r.shape
        m = t.shape[0]
        zeros = np.zeros((n, m, h))
        pairs = T.stack([t.reshape(1, m, h) + zeros, r.reshape(n, 1, h) + zeros], axis=2)
        out = self.encoder.encode(pairs.reshape(n * m, 2, h))
        return out[:, RT_POSITION].reshape(n, m, h)

    def calibrate(self, protos, r, residual: bool = True) -> Tensor:
        """Calibrated vectors r-hat for candidates ``r`` of shape (N, H) or (H,)."""
        r = T.as_tensor(r)
        single = r.ndim == 1
        if single:
            r = r.reshape(1, -1)
        w = self.prototype_weights(protos)
        rt = self.pair_outputs(protos, r)
        r_prime = (rt * w.reshape(1, -1, 1)).sum(axis=1)
        out = (r + r_prime) * 0.5 if residual else r_prime
        return out[0] if single else out


def _vectors(protos) -> Tensor:
    return protos.vectors if isinstance(protos, PrototypeSet) else T.as_tensor(protos)
