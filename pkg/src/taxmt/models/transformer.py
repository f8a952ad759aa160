"""Post-norm Transformer encoder-decoder."""

from __future__ import annotations

import math

import numpy as np

from ..corpus import PAD_ID
from ..tensor import Tensor, no_grad
from ..tensor import ops
from .base import Memory, Seq2SeqModel, sequence_log_probs
from .config import TRANSFORMER, ModelConfig

NEG = -1e9


def positional_encoding(length: int, dim: int) -> np.ndarray:
    """Sinusoidal table: sin on even features, cos on odd ones."""
    pos = np.arange(length)[:, None]
    freq = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: dim // 2])
    return table


def _attention_specs(prefix: str, d: int):
    specs = []
    for proj in ("q", "k", "v", "o"):
        specs.append((f"{prefix}.{proj}_w", (d, d), "uniform"))
        specs.append((f"{prefix}.{proj}_b", (d,), "uniform"))
    return specs


def _norm_specs(prefix: str, d: int):
    return [(f"{prefix}.gain", (d,), "ones"), (f"{prefix}.bias", (d,), "zeros")]


def _ffn_specs(prefix: str, d: int, f: int):
    return [(f"{prefix}.w1", (d, f), "uniform"), (f"{prefix}.b1", (f,), "uniform"),
            (f"{prefix}.w2", (f, d), "uniform"), (f"{prefix}.b2", (d,), "uniform")]


def multi_head_attention(p: dict[str, Tensor], prefix: str, query: Tensor, keys: Tensor,
                         blocked: np.ndarray, heads: int) -> Tensor:
    """Scaled dot-product attention with ``heads`` heads.

    ``query`` is (B, T, d), ``keys`` (B, S, d); ``blocked`` is a boolean
    (B, T, S) array of disallowed positions.
    """
    bsz, tlen, d = query.shape
    slen = keys.shape[1]
    dk = d // heads

    def project(x, n, name):
        y = ops.linear(ops.reshape(x, (bsz * n, d)), p[f"{prefix}.{name}_w"], p[f"{prefix}.{name}_b"])
        y = ops.transpose(ops.reshape(y, (bsz, n, heads, dk)), (0, 2, 1, 3))
        return ops.reshape(y, (bsz * heads, n, dk))

    q = project(query, tlen, "q")
    k = project(keys, slen, "k")
    v = project(keys, slen, "v")
    scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dk))
    mask = np.broadcast_to(blocked[:, None], (bsz, heads, tlen, slen)).reshape(bsz * heads, tlen, slen)
    weights = ops.softmax(ops.masked_fill(scores, mask, NEG), axis=-1)
    ctx = ops.reshape(ops.matmul(weights, v), (bsz, heads, tlen, dk))
    ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (bsz * tlen, d))
    out = ops.linear(ctx, p[f"{prefix}.o_w"], p[f"{prefix}.o_b"])
    return ops.reshape(out, (bsz, tlen, d))


def feed_forward(p: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    bsz, n, d = x.shape
    hid = ops.relu(ops.linear(ops.reshape(x, (bsz * n, d)), p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return ops.reshape(ops.linear(hid, p[f"{prefix}.w2"], p[f"{prefix}.b2"]), (bsz, n, d))


class TransformerModel(Seq2SeqModel):
    architecture = TRANSFORMER

    @staticmethod
    def param_specs(cfg: ModelConfig):
        d, f = cfg.embed_dim, cfg.ffn_hidden
        specs = [("src_embed", (cfg.src_vocab_size, d), "uniform"),
                 ("tgt_embed", (cfg.tgt_vocab_size, d), "uniform")]
        for i in range(cfg.layers):
            pre = f"enc{i}"
            specs += _attention_specs(f"{pre}.self", d) + _norm_specs(f"{pre}.norm1", d)
            specs += _ffn_specs(f"{pre}.ffn", d, f) + _norm_specs(f"{pre}.norm2", d)
        for i in range(cfg.layers):
            pre = f"dec{i}"
            specs += _attention_specs(f"{pre}.self", d) + _norm_specs(f"{pre}.norm1", d)
            specs += _attention_specs(f"{pre}.cross", d) + _norm_specs(f"{pre}.norm2", d)
            specs += _ffn_specs(f"{pre}.ffn", d, f) + _norm_specs(f"{pre}.norm3", d)
        specs.append(("out_w", (d, cfg.tgt_vocab_size), "uniform"))
        return specs

    def _embed(self, table: str, ids: np.ndarray, train: bool, rng) -> Tensor:
        d = self.cfg.embed_dim
        bsz, n = ids.shape
        x = ops.scale(ops.embedding_lookup(self.params[table], ids), math.sqrt(d))
        pe = np.broadcast_to(positional_encoding(n, d), (bsz, n, d))
        return ops.dropout(ops.add(x, Tensor(pe)), self.cfg.dropout, train, rng)

    def _sublayer(self, x: Tensor, y: Tensor, norm: str, train: bool, rng) -> Tensor:
        p = self.params
        y = ops.dropout(y, self.cfg.dropout, train, rng)
        return ops.layer_norm(ops.add(x, y), p[f"{norm}.gain"], p[f"{norm}.bias"])

    def _encode(self, src: np.ndarray, train: bool, rng) -> Tensor:
        p, heads = self.params, self.cfg.attention_heads
        bsz, slen = src.shape
        blocked = np.broadcast_to((src == PAD_ID)[:, None, :], (bsz, slen, slen))
        x = self._embed("src_embed", src, train, rng)
        for i in range(self.cfg.layers):
            pre = f"enc{i}"
            x = self._sublayer(x, multi_head_attention(p, f"{pre}.self", x, x, blocked, heads), f"{pre}.norm1", train, rng)
            x = self._sublayer(x, feed_forward(p, f"{pre}.ffn", x), f"{pre}.norm2", train, rng)
        return x

    def _decode(self, memory: Tensor, src_pad: np.ndarray, tgt_in: np.ndarray, train: bool, rng) -> Tensor:
        p, heads = self.params, self.cfg.attention_heads
        bsz, tlen = tgt_in.shape
        slen = memory.shape[1]
        causal = np.broadcast_to(np.triu(np.ones((tlen, tlen), dtype=bool), k=1), (bsz, tlen, tlen))
        cross_blocked = np.broadcast_to(src_pad[:, None, :], (bsz, tlen, slen))
        x = self._embed("tgt_embed", tgt_in, train, rng)
        for i in range(self.cfg.layers):
            pre = f"dec{i}"
            x = self._sublayer(x, multi_head_attention(p, f"{pre}.self", x, x, causal, heads), f"{pre}.norm1", train, rng)
            x = self._sublayer(x, multi_head_attention(p, f"{pre}.cross", x, memory, cross_blocked, heads),
                               f"{pre}.norm2", train, rng)
            x = self._sublayer(x, feed_forward(p, f"{pre}.ffn", x), f"{pre}.norm3", train, rng)
        d = self.cfg.embed_dim
        logits = ops.matmul(ops.reshape(x, (bsz * tlen, d)), p["out_w"])
        return ops.reshape(logits, (bsz, tlen, self.cfg.tgt_vocab_size))

    def logits(self, src, tgt_in, train=False, rng=None):
        src = np.asarray(src, dtype=np.int64)
        tgt_in = np.asarray(tgt_in, dtype=np.int64)
        self._check_ids(src, tgt_in)
        memory = self._encode(src, train, rng)
        return self._decode(memory, src == PAD_ID, tgt_in, train, rng)

    def encode(self, src):
        src = np.asarray(src, dtype=np.int64)
        self._check_ids(src)
        with no_grad():
            memory = self._encode(src, False, None)
        return Memory(states=memory.data, pad=src == PAD_ID)

    def next_log_probs(self, memory, prefixes):
        prefixes = np.asarray(prefixes, dtype=np.int64)
        with no_grad():
            logits = self._decode(Tensor(memory.states), memory.pad, prefixes, False, None)
            last = ops.log_softmax(logits[:, -1], axis=-1)
        return last.data


def transformer_forward(model: TransformerModel, source_ids, target_ids, train: bool = False) -> Tensor:
    """Per-step log-distributions (T, V) for one decoder-input sequence."""
    return sequence_log_probs(model, source_ids, target_ids, train)
