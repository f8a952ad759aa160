"""Attentional LSTM encoder-decoder with dot-product global attention."""

from __future__ import annotations

import numpy as np

from ..corpus import PAD_ID
from ..tensor import Tensor, no_grad
from ..tensor import ops
from .base import Memory, Seq2SeqModel, sequence_log_probs
from .config import RNN, ModelConfig

NEG = -1e9


def lstm_step(x_proj: Tensor, h: Tensor, c: Tensor, w_hh: Tensor, hidden: int) -> tuple[Tensor, Tensor]:
    """One LSTM step given the precomputed input projection (B, 4H).

    Gate order along the last axis is input, forget, candidate, output.
    """
    gates = ops.add(x_proj, ops.matmul(h, w_hh))
    i = ops.sigmoid(gates[:, :hidden])
    f = ops.sigmoid(gates[:, hidden:2 * hidden])
    g = ops.tanh(gates[:, 2 * hidden:3 * hidden])
    o = ops.sigmoid(gates[:, 3 * hidden:])
    c = ops.add(ops.mul(f, c), ops.mul(i, g))
    h = ops.mul(o, ops.tanh(c))
    return h, c


def run_lstm(x: Tensor, w: Tensor, b: Tensor, h: Tensor, c: Tensor, hidden: int) -> tuple[list[Tensor], list[Tensor]]:
    """Unroll over x of shape (B, T, E); returns per-step hidden and cell states."""
    bsz, steps, e = x.shape
    w_ih, w_hh = w[:e], w[e:]
    proj = ops.linear(ops.reshape(x, (bsz * steps, e)), w_ih, b)
    proj = ops.reshape(proj, (bsz, steps, 4 * hidden))
    hs, cs = [], []
    for t in range(steps):
        h, c = lstm_step(proj[:, t], h, c, w_hh, hidden)
        hs.append(h)
        cs.append(c)
    return hs, cs


class RNNAttentionModel(Seq2SeqModel):
    architecture = RNN

    @staticmethod
    def param_specs(cfg: ModelConfig):
        e, h, vs, vt = cfg.embed_dim, cfg.rnn_hidden, cfg.src_vocab_size, cfg.tgt_vocab_size
        return [
            ("src_embed", (vs, e), "uniform"),
            ("tgt_embed", (vt, e), "uniform"),
            ("enc_w", (e + h, 4 * h), "uniform"),
            ("enc_b", (4 * h,), "uniform"),
            ("dec_w", (e + h, 4 * h), "uniform"),
            ("dec_b", (4 * h,), "uniform"),
            ("attn_combine", (2 * h, h), "uniform"),
            ("out_w", (h, vt), "uniform"),
            ("out_b", (vt,), "uniform"),
        ]

    # -- pieces --------------------------------------------------------------

    def _encode(self, src: np.ndarray, train: bool, rng) -> tuple[Tensor, Tensor, Tensor]:
        p, hdim = self.params, self.cfg.rnn_hidden
        bsz, slen = src.shape
        emb = ops.dropout(ops.embedding_lookup(p["src_embed"], src), self.cfg.dropout, train, rng)
        zero = Tensor(np.zeros((bsz, hdim)))
        hs, cs = run_lstm(emb, p["enc_w"], p["enc_b"], zero, zero, hdim)
        states = ops.stack(hs, axis=1)
        cells = ops.stack(cs, axis=1)
        # final state = state at each row's last real token (padding is trailing)
        lengths = np.maximum((src != PAD_ID).sum(axis=1), 1)
        last = np.arange(bsz) * slen + lengths - 1
        h_last = ops.embedding_lookup(ops.reshape(states, (bsz * slen, hdim)), last)
        c_last = ops.embedding_lookup(ops.reshape(cells, (bsz * slen, hdim)), last)
        return states, h_last, c_last

    def _decode(self, states: Tensor, h0: Tensor, c0: Tensor, src_mask: np.ndarray, tgt_in: np.ndarray,
                train: bool, rng, return_attention: bool = False):
        p, hdim = self.params, self.cfg.rnn_hidden
        bsz, tlen = tgt_in.shape
        slen = states.shape[1]
        emb = ops.dropout(ops.embedding_lookup(p["tgt_embed"], tgt_in), self.cfg.dropout, train, rng)
        hs, _ = run_lstm(emb, p["dec_w"], p["dec_b"], h0, c0, hdim)
        dec = ops.stack(hs, axis=1)
        scores = ops.matmul(dec, ops.transpose(states, (0, 2, 1)))
        pad = np.broadcast_to(~src_mask[:, None, :], (bsz, tlen, slen))
        attn = ops.softmax(ops.masked_fill(scores, pad, NEG), axis=-1)
        context = ops.matmul(attn, states)
        combined = ops.reshape(ops.concat([context, dec], axis=-1), (bsz * tlen, 2 * hdim))
        attn_h = ops.dropout(ops.tanh(ops.matmul(combined, p["attn_combine"])), self.cfg.dropout, train, rng)
        logits = ops.reshape(ops.linear(attn_h, p["out_w"], p["out_b"]), (bsz, tlen, self.cfg.tgt_vocab_size))
        if return_attention:
            return logits, attn
        return logits

    # -- public interface ------------------------------------------------------

    def logits(self, src, tgt_in, train=False, rng=None, return_attention=False):
        src = np.asarray(src, dtype=np.int64)
        tgt_in = np.asarray(tgt_in, dtype=np.int64)
        self._check_ids(src, tgt_in)
        states, h, c = self._encode(src, train, rng)
        return self._decode(states, h, c, src != PAD_ID, tgt_in, train, rng, return_attention)

    def encode(self, src):
        src = np.asarray(src, dtype=np.int64)
        self._check_ids(src)
        with no_grad():
            states, h, c = self._encode(src, False, None)
        return Memory(states=states.data, h=h.data, c=c.data, mask=src != PAD_ID)

    def next_log_probs(self, memory, prefixes):
        prefixes = np.asarray(prefixes, dtype=np.int64)
        with no_grad():
            logits = self._decode(Tensor(memory.states), Tensor(memory.h), Tensor(memory.c),
                                  memory.mask, prefixes, False, None)
            last = ops.log_softmax(logits[:, -1], axis=-1)
        return last.data

    def attention_weights(self, source_ids, target_ids) -> np.ndarray:
        """(T, S) attention distribution of one sequence pair."""
        with no_grad():
            _, attn = self.logits(np.asarray([source_ids]), np.asarray([target_ids]), return_attention=True)
        return attn.data[0]


def rnn_forward(model: RNNAttentionModel, source_ids, target_ids, train: bool = False) -> Tensor:
    """Per-step log-distributions (T, V) for one decoder-input sequence."""
    return sequence_log_probs(model, source_ids, target_ids, train)
