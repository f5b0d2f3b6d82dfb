"""Post-LN transformer encoder (BERT layer ordering) on the tensor engine."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

MASK_BIAS = -1e9
INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    hidden: int = 32
    heads: int = 4
    ffn_dim: int = 0  # 0 means 4 * hidden
    use_positional: bool = True
    max_positions: int = 256
    vocab_size: int = 0  # 0: inputs arrive pre-embedded, no token table
    use_segments: bool = False

    def __post_init__(self):
        if self.layers < 0 or self.hidden < 1 or self.heads < 1:
            raise ValueError("layers must be >= 0, hidden and heads >= 1")
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        if self.max_positions < 1:
            raise ValueError("max_positions must be >= 1")

    @property
    def ffn(self) -> int:
        return self.ffn_dim or 4 * self.hidden

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


def parameter_count(cfg: EncoderConfig) -> int:
    """Closed-form number of scalars in an encoder stack."""
    h, f = cfg.hidden, cfg.ffn
    per_layer = 4 * (h * h + h) + 2 * h + (h * f + f) + (f * h + h) + 2 * h
    emb = 0
    if cfg.vocab_size:
        emb += cfg.vocab_size * h + 2 * h
        if cfg.use_segments:
            emb += 2 * h
    if cfg.use_positional:
        emb += cfg.max_positions * h
    return emb + cfg.layers * per_layer


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) resampled until every value lies within two std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class Encoder:
    """A stack of self-attention + feed-forward layers.

    Accepts either integer token ids of shape ``(B, S)`` (requires
    ``vocab_size > 0``) or pre-embedded vectors of shape ``(B, S, H)``.
    Unbatched inputs are accepted and returned unbatched.
    """

    def __init__(self, cfg: EncoderConfig, prefix: str, seed: int = 0):
        self.cfg = cfg
        self.prefix = prefix
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(seed)
        h, f = cfg.hidden, cfg.ffn

        def weight(name, shape):
            self._add(name, truncated_normal(rng, shape))

        if cfg.vocab_size:
            weight("embed.token", (cfg.vocab_size, h))
            if cfg.use_segments:
                weight("embed.segment", (2, h))
        if cfg.use_positional:
            weight("embed.position", (cfg.max_positions, h))
        if cfg.vocab_size:
            self._add("embed.ln.gamma", np.ones(h))
            self._add("embed.ln.beta", np.zeros(h))
        for i in range(cfg.layers):
            p = f"layer{i}"
            for w in ("wq", "wk", "wv", "wo"):
                weight(f"{p}.attn.{w}", (h, h))
                self._add(f"{p}.attn.b{w[1]}", np.zeros(h))
            self._add(f"{p}.attn.ln.gamma", np.ones(h))
            self._add(f"{p}.attn.ln.beta", np.zeros(h))
            weight(f"{p}.ffn.w1", (h, f))
            self._add(f"{p}.ffn.b1", np.zeros(f))
            weight(f"{p}.ffn.w2", (f, h))
            self._add(f"{p}.ffn.b2", np.zeros(h))
            self._add(f"{p}.ffn.ln.gamma", np.ones(h))
            self._add(f"{p}.ffn.ln.beta", np.zeros(h))

    def _add(self, name: str, value) -> None:
        full = f"{self.prefix}.{name}"
        self.params[name] = Parameter(full, value)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def __call__(self, inputs, mask=None, segments=None) -> Tensor:
        return self.encode(inputs, mask, segments)

    def embed(self, ids, segments=None) -> Tensor:
        cfg, p = self.cfg, self.params
        ids = np.asarray(ids)
        x = T.embedding(p["embed.token"], ids)
        if cfg.use_segments:
            seg = np.zeros_like(ids) if segments is None else np.asarray(segments)
            x = x + T.embedding(p["embed.segment"], seg)
        if cfg.use_positional:
            x = x + p["embed.position"][: ids.shape[-1]]
        return T.layer_norm(x, p["embed.ln.gamma"], p["embed.ln.beta"])

    def encode(self, inputs, mask=None, segments=None) -> Tensor:
        cfg, p = self.cfg, self.params
        token_input = not isinstance(inputs, Tensor) and np.asarray(inputs).dtype.kind in "iu"
        arr_ndim = np.ndim(inputs.data if isinstance(inputs, Tensor) else inputs)
        unbatched = arr_ndim == (1 if token_input else 2)
        if unbatched:
            inputs = inputs[None] if isinstance(inputs, Tensor) else np.asarray(inputs)[None]
            if mask is not None:
                mask = np.asarray(mask)[None]
            if segments is not None:
                segments = np.asarray(segments)[None]

        seq_len = (np.asarray(inputs) if token_input else inputs.data).shape[1]
        if seq_len > cfg.max_positions:
            raise ValueError(f"sequence of length {seq_len} exceeds max positions "
                             f"({cfg.max_positions})")
        if token_input:
            if not cfg.vocab_size:
                raise ValueError("encoder has no token embedding; pass vectors")
            x = self.embed(inputs, segments)
        else:
            x = T.as_tensor(inputs)
            if x.shape[-1] != cfg.hidden:
                raise ValueError(f"expected hidden size {cfg.hidden}, got {x.shape[-1]}")
            if cfg.use_positional:
                x = x + p["embed.position"][:seq_len]

        batch = x.shape[0]
        if mask is None:
            mask = np.ones((batch, seq_len), dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (batch, seq_len):
            raise ValueError(f"mask shape {mask.shape} does not match input {(batch, seq_len)}")
        key_bias = np.where(mask, 0.0, MASK_BIAS)[:, None, None, :]
        query_keep = mask[:, None, :, None].astype(x.dtype)

        for i in range(cfg.layers):
            x = self._layer(x, f"layer{i}", key_bias, query_keep)
        return x[0] if unbatched else x

    def _layer(self, x: Tensor, name: str, key_bias, query_keep) -> Tensor:
        cfg, p = self.cfg, self.params
        b, s, h = x.shape
        a, d = cfg.heads, cfg.head_dim

        def heads(t):
            return t.reshape(b, s, a, d).transpose(0, 2, 1, 3)

        q = heads(T.matmul(x, p[f"{name}.attn.wq"], "attn.proj") + p[f"{name}.attn.bq"])
        k = heads(T.matmul(x, p[f"{name}.attn.wk"], "attn.proj") + p[f"{name}.attn.bk"])
        v = heads(T.matmul(x, p[f"{name}.attn.wv"], "attn.proj") + p[f"{name}.attn.bv"])
        scores = T.matmul(q, k.transpose(0, 1, 3, 2), "attn.scores") * (1.0 / np.sqrt(d))
        probs = T.softmax(scores + key_bias, axis=-1) * query_keep
        ctx = T.matmul(probs, v, "attn.context").transpose(0, 2, 1, 3).reshape(b, s, h)
        attn = T.matmul(ctx, p[f"{name}.attn.wo"], "attn.proj") + p[f"{name}.attn.bo"]
        x = T.layer_norm(x + attn, p[f"{name}.attn.ln.gamma"], p[f"{name}.attn.ln.beta"])

        hid = T.gelu(T.matmul(x, p[f"{name}.ffn.w1"], "ffn") + p[f"{name}.ffn.b1"])
        out = T.matmul(hid, p[f"{name}.ffn.w2"], "ffn") + p[f"{name}.ffn.b2"]
        return T.layer_norm(x + out, p[f"{name}.ffn.ln.gamma"], p[f"{name}.ffn.ln.beta"])


def init_params(cfg: EncoderConfig, seed: int, prefix: str = "encoder") -> list[Parameter]:
    return Encoder(cfg, prefix, seed).parameters()
