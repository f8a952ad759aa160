import math

import numpy as np
import pytest

from taxmt.corpus import BOS_ID, EOS_ID, PAD_ID, EncodedProduct
from taxmt.models import (
    RNN,
    TRANSFORMER,
    ModelConfig,
    ModelConfigError,
    RNNAttentionModel,
    TrainConfig,
    build_model,
    load_model,
    make_batches,
    parameter_count,
    rnn_forward,
    train,
    transformer_forward,
)
from taxmt.models import training as training_mod
from taxmt.models.training import batch_loss, learning_rate
from taxmt.models.transformer import multi_head_attention, positional_encoding
from taxmt.tensor import Tensor, backward, ops
from taxmt.tensor.gradcheck import model_gradcheck


def toy_cfg(arch, **kw):
    base = dict(embed_dim=8, rnn_hidden=6, ffn_hidden=10, layers=1 if arch == RNN else 2, attention_heads=2,
                dropout=0.0, seed=0)
    base.update(kw)
    return ModelConfig(arch, 9, 7, **base)


def spread(model, seed=0, scale=0.5):
    """Move parameters to a generic point; at the +-0.08 init the attention
    scores are nearly flat and query/key gradients sink to ~1e-7, below what
    central differences resolve at relative 1e-4."""
    rng = np.random.default_rng(seed)
    for _, p in model.named_parameters():
        p.data = p.data + rng.normal(scale=scale, size=p.shape)
    return model


def toy_items(n=6, seed=0, vs=9, vt=7):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        src = tuple(int(x) for x in rng.integers(4, vs, size=int(rng.integers(1, 5))))
        tgt = (BOS_ID, *(int(x) for x in rng.integers(4, vt, size=int(rng.integers(1, 3)))), EOS_ID)
        out.append(EncodedProduct(i, src, tgt, False))
    return out


class TestParameterCount:
    def test_rnn_hand_count(self):
        # embeddings 10*4 + 10*4, two LSTMs (4+8)*32 + 32, combine 16*8, output 8*10 + 10
        cfg = ModelConfig(RNN, 10, 10, embed_dim=4, rnn_hidden=8)
        assert parameter_count(cfg) == 40 + 40 + 2 * 416 + 128 + 90 == 1130
        assert build_model(cfg).num_parameters() == 1130

    def test_full_scale_transformer(self):
        cfg = ModelConfig.full_scale(TRANSFORMER, 100_000, 3679)
        d, f, n = 512, 2048, 6
        # independent tally: embeddings, per-layer blocks, output projection without bias
        enc_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 2 * (2 * d)
        dec_layer = 8 * (d * d + d) + (d * f + f) + (f * d + d) + 3 * (2 * d)
        tally = 100_000 * d + 3679 * d + n * enc_layer + n * dec_layer + d * 3679
        assert tally == 99_105_792
        assert parameter_count(cfg) == 99_105_792

    @pytest.mark.parametrize("i", range(20))
    def test_formula_matches_allocation(self, i):
        rng = np.random.default_rng(100 + i)
        arch = RNN if i % 2 else TRANSFORMER
        heads = int(rng.integers(1, 4))
        cfg = ModelConfig(arch, int(rng.integers(5, 40)), int(rng.integers(5, 30)),
                          embed_dim=heads * int(rng.integers(1, 6)), rnn_hidden=int(rng.integers(1, 12)),
                          ffn_hidden=int(rng.integers(1, 16)), layers=1 if arch == RNN else int(rng.integers(1, 4)),
                          attention_heads=heads)
        model = build_model(cfg)
        assert model.num_parameters() == parameter_count(cfg) == model.expected_num_parameters()


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ModelConfigError, match="divisible"):
            build_model(ModelConfig(TRANSFORMER, 10, 10, embed_dim=10, attention_heads=4))

    def test_scales(self):
        desk = ModelConfig.desk_scale(TRANSFORMER, 10, 10)
        assert (desk.embed_dim, desk.ffn_hidden, desk.layers, desk.attention_heads) == (64, 256, 2, 4)
        full = ModelConfig.full_scale(RNN, 10, 10)
        assert (full.embed_dim, full.rnn_hidden, full.layers, full.dropout) == (512, 1024, 1, 0.2)

    def test_train_config_checks(self):
        with pytest.raises(ModelConfigError):
            TrainConfig(patience=0).validate()
        with pytest.raises(ModelConfigError):
            TrainConfig(batch_size=0).validate()

    def test_round_trip(self):
        cfg = toy_cfg(TRANSFORMER)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("arch", [RNN, TRANSFORMER])
class TestForward:
    def test_deterministic_init(self, arch):
        a, b = build_model(toy_cfg(arch)), build_model(toy_cfg(arch))
        for (n, x), (_, y) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(x.data, y.data, err_msg=n)
            assert np.all(np.abs(x.data) <= 0.08) or n.endswith(("gain", "bias"))

    def test_shape_and_log_distribution(self, arch):
        model = build_model(toy_cfg(arch))
        fwd = rnn_forward if arch == RNN else transformer_forward
        out = fwd(model, [4, 5, 6], [BOS_ID, 4, 5])
        assert out.shape == (3, 7)
        np.testing.assert_allclose(np.exp(out.data).sum(axis=1), 1.0, atol=1e-9)

    def test_out_of_range_ids(self, arch):
        model = build_model(toy_cfg(arch))
        with pytest.raises(IndexError):
            model.logits(np.array([[4, 9]]), np.array([[BOS_ID]]))
        with pytest.raises(IndexError):
            model.logits(np.array([[4]]), np.array([[BOS_ID, 7]]))

    def test_padding_does_not_change_outputs(self, arch):
        model = build_model(toy_cfg(arch))
        short = model.logits(np.array([[4, 5]]), np.array([[BOS_ID, 4]])).data
        padded = model.logits(np.array([[4, 5, PAD_ID, PAD_ID]]), np.array([[BOS_ID, 4]])).data
        np.testing.assert_allclose(short, padded, atol=1e-12)

    def test_incremental_matches_teacher_forcing(self, arch):
        model = build_model(toy_cfg(arch, seed=3))
        src = np.array([[4, 5, 6]])
        tgt = np.array([[BOS_ID, 5, 6]])
        full = ops.log_softmax(model.logits(src, tgt)).data[0]
        mem = model.encode(src)
        for t in range(1, 4):
            np.testing.assert_allclose(model.next_log_probs(mem, tgt[:, :t])[0], full[t - 1], atol=1e-12)

    def test_full_forward_gradients(self, arch):
        model = spread(build_model(toy_cfg(arch, dropout=0.3, seed=1)))
        batch = make_batches(toy_items(4), 4)[0]

        def loss():
            return batch_loss(model, batch, train=True, rng=np.random.default_rng(5))

        assert model_gradcheck(model, loss, max_entries=12) < 1e-4

    def test_batch_loss_permutation_invariant(self, arch):
        model = build_model(toy_cfg(arch, seed=2))
        items = toy_items(5, seed=4)
        b1 = make_batches(items, 5)[0]
        perm = np.array([3, 1, 4, 0, 2])
        b2 = training_mod.Batch(b1.src[perm], b1.tgt_in[perm], b1.tgt_out[perm])
        assert batch_loss(model, b1).item() == pytest.approx(batch_loss(model, b2).item(), rel=1e-12)

    def test_checkpoint_round_trip(self, arch, tmp_path):
        model = build_model(toy_cfg(arch, seed=4))
        model.save(tmp_path / "m.ckpt", {"seed": 4})
        again, meta = load_model(tmp_path / "m.ckpt")
        assert meta["seed"] == 4
        for (_, x), (_, y) in zip(model.named_parameters(), again.named_parameters()):
            np.testing.assert_array_equal(x.data, y.data)


class TestRNN:
    def test_rnn_three_token_gradient(self):
        model = spread(build_model(toy_cfg(RNN, seed=7)))

        def loss():
            logp = rnn_forward(model, [4, 5, 6], [BOS_ID, 4, 5])
            return ops.cross_entropy(logp, np.array([4, 5, EOS_ID]))

        assert model_gradcheck(model, loss, max_entries=20) < 1e-4

    def test_attention_is_a_distribution(self):
        model = build_model(toy_cfg(RNN, seed=1))
        attn = model.attention_weights([4, 5, 6, 7], [BOS_ID, 4, 5])
        assert attn.shape == (3, 4)
        assert np.all(attn >= 0)
        np.testing.assert_allclose(attn.sum(axis=1), 1.0, atol=1e-12)

    def test_single_source_token_gets_all_attention(self):
        model = build_model(toy_cfg(RNN, seed=1))
        np.testing.assert_allclose(model.attention_weights([6], [BOS_ID, 4, 5]), 1.0)

    def test_rejects_multi_layer(self):
        with pytest.raises(ModelConfigError):
            RNNAttentionModel(toy_cfg(RNN, layers=2))


def _oracle_attention(p, prefix, q_in, k_in, blocked, heads):
    """Loop-per-head numpy reference."""
    d = q_in.shape[-1]
    dk = d // heads
    w = {k: v.data for k, v in p.items()}
    q = q_in @ w[prefix + ".q_w"] + w[prefix + ".q_b"]
    k = k_in @ w[prefix + ".k_w"] + w[prefix + ".k_b"]
    v = k_in @ w[prefix + ".v_w"] + w[prefix + ".v_b"]
    outs = []
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        s = q[..., sl] @ np.swapaxes(k[..., sl], -1, -2) / math.sqrt(dk)
        s = np.where(blocked, -np.inf, s)
        a = np.exp(s - s.max(axis=-1, keepdims=True))
        a /= a.sum(axis=-1, keepdims=True)
        outs.append(a @ v[..., sl])
    return np.concatenate(outs, axis=-1) @ w[prefix + ".o_w"] + w[prefix + ".o_b"]


class TestTransformer:
    def _params(self, d, seed):
        rng = np.random.default_rng(seed)
        return {f"att.{n}_{t}": Tensor(rng.normal(size=(d, d) if t == "w" else (d,)))
                for n in "qkvo" for t in "wb"}

    @pytest.mark.parametrize("heads", [1, 2, 4])
    def test_multi_head_matches_per_head_oracle(self, heads):
        rng = np.random.default_rng(heads)
        p = self._params(8, heads)
        q, k = rng.normal(size=(2, 3, 8)), rng.normal(size=(2, 5, 8))
        blocked = np.zeros((2, 3, 5), dtype=bool)
        blocked[1, :, 3:] = True
        got = multi_head_attention(p, "att", Tensor(q), Tensor(k), blocked, heads).data
        np.testing.assert_allclose(got, _oracle_attention(p, "att", q, k, blocked, heads), atol=1e-10)

    def test_one_and_many_heads_agree_with_flat_scores(self):
        # with zero query/key projections every head attends uniformly, so the
        # head split cannot matter
        rng = np.random.default_rng(0)
        p = self._params(8, 1)
        for n in ("q_w", "q_b", "k_w", "k_b"):
            p[f"att.{n}"] = Tensor(np.zeros(p[f"att.{n}"].shape))
        q, k = rng.normal(size=(1, 2, 8)), rng.normal(size=(1, 4, 8))
        blocked = np.zeros((1, 2, 4), dtype=bool)
        one = multi_head_attention(p, "att", Tensor(q), Tensor(k), blocked, 1).data
        four = multi_head_attention(p, "att", Tensor(q), Tensor(k), blocked, 4).data
        np.testing.assert_allclose(one, four, atol=1e-12)

    def test_causal_mask(self):
        model = build_model(toy_cfg(TRANSFORMER, seed=5))
        src = np.array([[4, 5, 6]])
        a = model.logits(src, np.array([[BOS_ID, 4, 5, 6]])).data
        b = model.logits(src, np.array([[BOS_ID, 4, 6, 4]])).data
        np.testing.assert_allclose(a[0, :2], b[0, :2], atol=1e-12)
        assert not np.allclose(a[0, 2], b[0, 2])

    def test_positional_encoding(self):
        pe = positional_encoding(5, 6)
        np.testing.assert_allclose(pe[0], [0, 1, 0, 1, 0, 1])
        np.testing.assert_allclose(pe[3, 2], math.sin(3 / 10000 ** (2 / 6)))

    def test_warmup_schedule(self):
        tcfg = TrainConfig(warmup_steps=400)
        assert learning_rate(tcfg, TRANSFORMER, 200) == pytest.approx(2.5e-4)
        assert learning_rate(tcfg, TRANSFORMER, 400) == pytest.approx(5e-4)
        assert learning_rate(tcfg, TRANSFORMER, 1600) == pytest.approx(2.5e-4)
        assert learning_rate(tcfg, RNN, 1) == tcfg.lr_for(RNN)


class TestTraining:
    def test_patience_one_with_worsening_validation(self, monkeypatch):
        losses = iter([1.0, 2.0, 3.0, 4.0])
        monkeypatch.setattr(training_mod, "evaluate_loss", lambda model, batches: next(losses))
        model = build_model(toy_cfg(RNN))
        _, history = train(model, toy_items(4), toy_items(2), TrainConfig(patience=1, max_epochs=10))
        assert len(history.epochs) == 2
        assert history.best_epoch == 1 and history.stopped_early

    def test_returns_best_checkpoint(self, monkeypatch):
        losses = iter([3.0, 1.0, 2.0, 2.5])
        seen = []
        monkeypatch.setattr(training_mod, "evaluate_loss", lambda model, batches: next(losses))
        model = build_model(toy_cfg(RNN))
        best, history = train(model, toy_items(4), toy_items(2), TrainConfig(patience=2, max_epochs=10),
                              epoch_callback=lambda e, m: seen.append(m.state_dict()) and False)
        assert history.best_epoch == 2
        np.testing.assert_array_equal(best.state_dict()["out_w"], seen[1]["out_w"])

    def test_empty_sets(self):
        with pytest.raises(ValueError):
            train(build_model(toy_cfg(RNN)), [], toy_items(1), TrainConfig())

    @pytest.mark.parametrize("arch", [RNN, TRANSFORMER])
    def test_seeded_runs_repeat_exactly(self, arch):
        runs = []
        for _ in range(2):
            model = build_model(toy_cfg(arch, dropout=0.2))
            _, h = train(model, toy_items(8), toy_items(3, seed=1), TrainConfig(max_epochs=3, batch_size=3))
            runs.append(h.epochs)
        assert runs[0] == runs[1]

    def test_training_reduces_loss(self):
        model = build_model(toy_cfg(TRANSFORMER))
        items = toy_items(8)
        _, h = train(model, items, items, TrainConfig(max_epochs=15, batch_size=4, learning_rate=3e-3,
                                                      warmup_steps=0))
        assert h.epochs[-1]["train_loss"] < h.epochs[0]["train_loss"]

    def test_batches_sorted_and_padded(self):
        items = toy_items(7, seed=2)
        batches = make_batches(items, 3)
        lengths = [int((b.src != PAD_ID).sum(axis=1).max()) for b in batches]
        assert lengths == sorted(lengths)
        assert sum(b.src.shape[0] for b in batches) == 7
        for b in batches:
            np.testing.assert_array_equal(b.tgt_in[:, 0], BOS_ID)

    def test_backward_reaches_embeddings(self):
        model = build_model(toy_cfg(TRANSFORMER))
        batch = make_batches(toy_items(3), 3)[0]
        backward(batch_loss(model, batch))
        assert np.any(model.params["src_embed"].grad != 0)
