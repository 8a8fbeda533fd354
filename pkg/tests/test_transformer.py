import math

import numpy as np
import pytest

from cmdlm import bpe
from cmdlm import transformer as T
from cmdlm.autodiff import Tensor


def small_config(**overrides):
    base = dict(n_layers=1, n_heads=2, hidden=16, ffn_dim=32, max_len=32, mask_prob=0.15)
    base.update(overrides)
    return T.TransformerConfig(**base)


class TestConfigAndInit:
    def test_zero_layers_rejected(self):
        with pytest.raises(ValueError):
            small_config(n_layers=0)

    def test_hidden_head_divisibility(self):
        with pytest.raises(ValueError):
            small_config(hidden=10, n_heads=3)

    def test_same_seed_identical(self):
        cfg = small_config()
        a = T.init_params(cfg, 50, seed=3)
        b = T.init_params(cfg, 50, seed=3)
        for name in a.tensors:
            np.testing.assert_array_equal(a.tensors[name].data, b.tensors[name].data)

    def test_different_seed_differs(self):
        cfg = small_config()
        a = T.init_params(cfg, 50, seed=3)
        b = T.init_params(cfg, 50, seed=4)
        assert any(
            not np.array_equal(a.tensors[n].data, b.tensors[n].data) for n in a.tensors
        )

    def test_all_finite(self):
        params = T.init_params(small_config(), 50, seed=0)
        for t in params.tensors.values():
            assert np.all(np.isfinite(t.data))


class TestForward:
    def test_output_length_matches_input(self):
        params = T.init_params(small_config(), 40, seed=0)
        for n in (1, 3, 9):
            ids = [bpe.CLS] + list(range(bpe.N_SPECIALS, bpe.N_SPECIALS + n - 1))
            out = T.forward(params, ids)
            assert out.shape == (n, 16)

    def test_over_length_rejected(self):
        params = T.init_params(small_config(max_len=4), 40, seed=0)
        with pytest.raises(ValueError):
            T.forward(params, [bpe.CLS, 5, 6, 7, 8])

    def test_attention_rows_sum_to_one(self):
        params = T.init_params(small_config(n_layers=2), 40, seed=0)
        ids = np.array([[bpe.CLS, 5, 6, 7, bpe.PAD, bpe.PAD]])
        mask = np.array([[1, 1, 1, 1, 0, 0]], dtype=np.float32)
        probs = []
        T.forward_batch(params, ids, mask, attn_probs_out=probs)
        assert len(probs) == 2
        for layer in probs:
            np.testing.assert_allclose(layer.sum(axis=-1), 1.0, atol=1e-5)
            # padded keys receive zero attention from real queries
            assert np.all(layer[0, :, :4, 4:] < 1e-8)

    def test_permuting_tokens_changes_outputs(self):
        params = T.init_params(small_config(), 40, seed=0)
        a = T.forward(params, [bpe.CLS, 5, 6])
        b = T.forward(params, [bpe.CLS, 6, 5])
        assert not np.allclose(a[1], b[1])

    def test_batched_matches_single(self):
        params = T.init_params(small_config(), 40, seed=0)
        seq_a = [bpe.CLS, 5, 6, 7]
        seq_b = [bpe.CLS, 9, 8]
        ids = np.full((2, 4), bpe.PAD, dtype=np.int64)
        mask = np.zeros((2, 4), dtype=np.float32)
        for row, s in enumerate([seq_a, seq_b]):
            ids[row, : len(s)] = s
            mask[row, : len(s)] = 1
        import cmdlm.autodiff as ad
        with ad.no_grad():
            batched = T.forward_batch(params, ids, mask).data
        np.testing.assert_allclose(batched[0, :4], T.forward(params, seq_a), atol=1e-6)
        np.testing.assert_allclose(batched[1, :3], T.forward(params, seq_b), atol=1e-6)


class TestMasking:
    def test_mask_prob_zero_limit(self, rng):
        seq = [bpe.CLS] + list(range(10, 30))
        out, positions, originals = T.mask_sequence(seq, 1e-12, rng, 40)
        assert positions == [] and originals == [] and out == seq

    def test_cls_never_selected(self, rng):
        seq = [bpe.CLS] + list(range(10, 20))
        for _ in range(300):
            _, positions, _ = T.mask_sequence(seq, 0.5, rng, 40)
            assert 0 not in positions

    def test_selected_fraction_binomial(self, rng):
        n, p = 0, 0.15
        total = 0
        seq = [bpe.CLS] + list(range(10, 10 + 200))
        trials = 500
        for _ in range(trials):
            _, positions, _ = T.mask_sequence(seq, p, rng, 300)
            n += len(positions)
            total += 200
        sd = math.sqrt(total * p * (1 - p))
        assert abs(n - total * p) < 3 * sd

    def test_replacement_mixture(self, rng):
        seq = [bpe.CLS] + [100] * 2000
        out, positions, originals = T.mask_sequence(seq, 0.5, rng, 4000)
        masked = sum(1 for p in positions if out[p] == bpe.MASK)
        unchanged = sum(1 for p in positions if out[p] == 100)
        random_repl = len(positions) - masked - unchanged
        assert masked / len(positions) == pytest.approx(0.8, abs=0.05)
        # random replacement can draw the original id, so unchanged >= 10%-ish
        assert random_repl / len(positions) == pytest.approx(0.1, abs=0.04)
        assert all(o == 100 for o in originals)

    def test_non_target_positions_unchanged(self, rng):
        seq = [bpe.CLS] + list(range(10, 40))
        out, positions, _ = T.mask_sequence(seq, 0.3, rng, 50)
        for i, (a, b) in enumerate(zip(seq, out)):
            if i not in positions:
                assert a == b

    def test_batch_padding_and_targets(self, rng):
        seqs = [[bpe.CLS, 10, 11, 12], [bpe.CLS, 13]]
        batch = T.build_masked_batch(seqs, 0.5, rng, 40)
        assert batch.input_ids.shape == (2, 4)
        assert batch.attn_mask[1, 2:].sum() == 0
        assert batch.n_targets >= 1
        # target rows index the flattened (batch*len) states of real positions
        rows = batch.target_rows
        assert np.all((rows % 4 != 0)) and np.all(rows < 8)


class TestMlmLoss:
    def test_uniform_logits_give_log_vocab(self):
        vocab_size = 40
        params = T.init_params(small_config(), vocab_size, seed=0)
        params.tensors["mlm.w"].data[:] = 0
        params.tensors["mlm.b"].data[:] = 0
        rng = np.random.Generator(np.random.PCG64(0))
        batch = T.build_masked_batch([[bpe.CLS] + list(range(10, 20))], 0.4, rng, vocab_size)
        loss = float(T.mlm_loss(params, batch).data)
        assert loss == pytest.approx(math.log(vocab_size), abs=1e-5)

    def test_perfect_model_zero_loss(self):
        vocab_size = 12
        params = T.init_params(small_config(), vocab_size, seed=0)
        rng = np.random.Generator(np.random.PCG64(0))
        batch = T.build_masked_batch([[bpe.CLS] + [7] * 6], 0.5, rng, vocab_size)
        params.tensors["mlm.w"].data[:] = 0
        params.tensors["mlm.b"].data[:] = -50.0
        params.tensors["mlm.b"].data[7] = 50.0
        loss = float(T.mlm_loss(params, batch).data)
        assert loss == pytest.approx(0.0, abs=1e-6)

    def test_hand_computed_cross_entropy(self):
        # Single target; compare against a directly computed -log softmax.
        vocab_size = 8
        params = T.init_params(small_config(), vocab_size, seed=1)
        ids = np.array([[bpe.CLS, 5, 6]])
        batch = T.MaskedBatch(
            input_ids=ids,
            attn_mask=np.ones((1, 3), dtype=np.float32),
            target_rows=np.array([1]),
            target_ids=np.array([5]),
            seq_len=3,
        )
        loss = float(T.mlm_loss(params, batch).data)
        states = T.forward(params, [bpe.CLS, 5, 6])
        logits = states[1] @ params.tensors["mlm.w"].data + params.tensors["mlm.b"].data
        expected = -(logits[5] - np.log(np.exp(logits - logits.max()).sum()) - logits.max())
        assert loss == pytest.approx(float(expected), abs=1e-5)

    def test_zero_targets_rejected(self):
        params = T.init_params(small_config(), 10, seed=0)
        batch = T.MaskedBatch(
            input_ids=np.array([[bpe.CLS, 5]]),
            attn_mask=np.ones((1, 2), dtype=np.float32),
            target_rows=np.array([], dtype=np.int64),
            target_ids=np.array([], dtype=np.int64),
            seq_len=2,
        )
        with pytest.raises(ValueError):
            T.mlm_loss(params, batch)


class TestPretrain:
    TEXTS = ["docker ps -a", "ls -la /tmp", "echo hello world", "cat /var/log/app.log"] * 8

    def test_zero_steps_leaves_params(self, tiny_vocab):
        params = T.init_params(small_config(), tiny_vocab.size, seed=0)
        before = {k: t.data.copy() for k, t in params.tensors.items()}
        T.pretrain(self.TEXTS, tiny_vocab, params, T.PretrainOptions(steps=0, seed=0))
        for k, t in params.tensors.items():
            np.testing.assert_array_equal(before[k], t.data)

    def test_loss_decreases(self, tiny_vocab):
        params = T.init_params(small_config(), tiny_vocab.size, seed=0)
        _, losses = T.pretrain(
            self.TEXTS, tiny_vocab, params,
            T.PretrainOptions(steps=220, batch_size=8, seed=0, learning_rate=3e-4),
        )
        assert np.mean(losses[-20:]) < losses[0]

    def test_seeded_determinism(self, tiny_vocab):
        runs = []
        for _ in range(2):
            params = T.init_params(small_config(), tiny_vocab.size, seed=0)
            _, losses = T.pretrain(self.TEXTS, tiny_vocab, params,
                                   T.PretrainOptions(steps=25, batch_size=4, seed=0))
            runs.append((losses, {k: t.data.copy() for k, t in params.tensors.items()}))
        assert runs[0][0] == runs[1][0]
        for k in runs[0][1]:
            np.testing.assert_array_equal(runs[0][1][k], runs[1][1][k])


class TestEmbeddings:
    def test_single_token_mean_equals_output(self, tiny_vocab):
        params = T.init_params(small_config(), tiny_vocab.size, seed=0)
        emb = T.embed_mean(params, tiny_vocab, "")
        out = T.forward(params, [bpe.CLS])
        np.testing.assert_allclose(emb, out[0], atol=1e-7)

    def test_mean_matches_bruteforce(self, tiny_vocab):
        params = T.init_params(small_config(), tiny_vocab.size, seed=0)
        text = "docker ps"
        ids = bpe.encode(tiny_vocab, text, 32)
        out = T.forward(params, ids)
        oracle = out.sum(axis=0) / out.shape[0]
        np.testing.assert_allclose(T.embed_mean(params, tiny_vocab, text), oracle, atol=1e-6)

    def test_cls_equals_position_zero(self, tiny_vocab):
        params = T.init_params(small_config(), tiny_vocab.size, seed=0)
        text = "ls -la /tmp"
        ids = bpe.encode(tiny_vocab, text, 32)
        np.testing.assert_allclose(
            T.embed_cls(params, tiny_vocab, text), T.forward(params, ids)[0], atol=1e-7
        )

    def test_cls_differs_from_mean_generically(self, tiny_vocab):
        params = T.init_params(small_config(), tiny_vocab.size, seed=0)
        text = "echo hello"
        assert not np.allclose(
            T.embed_cls(params, tiny_vocab, text), T.embed_mean(params, tiny_vocab, text)
        )

    def test_corpus_embeddings_match_single(self, tiny_vocab):
        params = T.init_params(small_config(), tiny_vocab.size, seed=0)
        texts = ["docker ps", "echo hello world", "ls"]
        means = T.embed_corpus_mean(params, tiny_vocab, texts, batch_size=2)
        clss = T.embed_corpus_cls(params, tiny_vocab, texts, batch_size=2)
        for i, t in enumerate(texts):
            np.testing.assert_allclose(means[i], T.embed_mean(params, tiny_vocab, t), atol=1e-5)
            np.testing.assert_allclose(clss[i], T.embed_cls(params, tiny_vocab, t), atol=1e-5)


class TestPredictMasked:
    def test_marker_count_validation(self, tiny_vocab):
        params = T.init_params(small_config(), tiny_vocab.size, seed=0)
        with pytest.raises(ValueError):
            T.predict_masked(params, tiny_vocab, "no marker here", 3)
        with pytest.raises(ValueError):
            T.predict_masked(params, tiny_vocab, "[MASK] and [MASK]", 3)

    def test_full_vocab_ranking_covers_everything(self, tiny_vocab):
        params = T.init_params(small_config(), tiny_vocab.size, seed=0)
        ranked = T.predict_masked(params, tiny_vocab, "[MASK] ps", tiny_vocab.size)
        # One entry per vocabulary id (decoded strings can collide: many raw
        # bytes all render as the replacement character).
        assert len(ranked) == tiny_vocab.size
        mergeable = {tiny_vocab.token_string(i) for i in range(bpe.N_SPECIALS + bpe.N_BASE, tiny_vocab.size)}
        assert mergeable.issubset(set(ranked))

    def test_untrained_model_deterministic(self, tiny_vocab):
        params = T.init_params(small_config(), tiny_vocab.size, seed=0)
        a = T.predict_masked(params, tiny_vocab, "docker [MASK]", 5)
        b = T.predict_masked(params, tiny_vocab, "docker [MASK]", 5)
        assert a == b

    def test_prediction_head_softmax_normalized(self, tiny_vocab):
        import cmdlm.autodiff as ad

        params = T.init_params(small_config(), tiny_vocab.size, seed=0)
        states = T.forward(params, bpe.encode(tiny_vocab, "docker ps", 32))
        logits = states @ params.tensors["mlm.w"].data + params.tensors["mlm.b"].data
        probs = ad.softmax(ad.Tensor(logits), axis=-1).data
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-5)
