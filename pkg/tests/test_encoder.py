import math

import numpy as np
import pytest

from hopqa import autodiff as ad
from hopqa.encoder import (
    SPECIALS,
    EncoderConfig,
    EncoderParams,
    Vocab,
    encode,
    encode_graph,
    init_params,
    load_checkpoint,
    param_tensors,
    save_checkpoint,
)
from hopqa.errors import NonFiniteLossError
from hopqa.training import AdamState, TrainSchedule, apply_update, loss_and_grads, train_step

TINY = EncoderConfig(d_model=8, n_heads=2, n_layers=1, d_ff=16, max_len=16, vocab_size=12, seed=3)


class TestVocab:
    def test_specials_reserved_and_dense(self):
        v = Vocab(["metal", "heat"])
        ids = [v.id(tok) for tok in SPECIALS]
        assert ids == [0, 1, 2, 3]
        assert sorted(v.id(t) for t in v.tokens()) == list(range(len(v)))

    def test_unknown_maps_to_unk(self):
        v = Vocab(["metal"])
        assert v.id("granite") == v.unk_id

    def test_build_is_deterministic(self):
        a = Vocab.build([["b", "a"], ["c"]])
        b = Vocab.build([["c"], ["a", "b"]])
        assert a.tokens() == b.tokens()


class TestInit:
    def test_same_seed_bit_identical(self):
        a, b = init_params(TINY), init_params(TINY)
        assert a.arrays.keys() == b.arrays.keys()
        for name in a.arrays:
            np.testing.assert_array_equal(a.arrays[name], b.arrays[name])

    def test_layer_norm_gains_are_ones(self):
        params = init_params(TINY)
        np.testing.assert_array_equal(params.arrays["layers.0.ln1.g"], np.ones(8))
        np.testing.assert_array_equal(params.arrays["final_ln.g"], np.ones(8))
        np.testing.assert_array_equal(params.arrays["layers.0.attn.bq"], np.zeros(8))

    def test_seed_changes_arrays(self):
        a = init_params(TINY)
        b = init_params(EncoderConfig(**{**TINY.to_dict(), "seed": 4}))
        assert any(not np.array_equal(a.arrays[n], b.arrays[n]) for n in a.arrays)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            EncoderConfig(d_model=10, n_heads=4, vocab_size=12)
        with pytest.raises(ValueError):
            EncoderConfig(max_len=4, vocab_size=12)


class TestEncode:
    def test_shape_contract(self):
        params = init_params(TINY)
        out = encode(params, [4, 5, 6])
        assert out.hidden.shape == (3, 8)
        assert out.cls.shape == (8,)
        np.testing.assert_array_equal(out.cls, out.hidden[0])

    def test_repeated_calls_bit_identical(self):
        params = init_params(TINY)
        a = encode(params, [4, 5, 6]).hidden
        b = encode(params, [4, 5, 6]).hidden
        np.testing.assert_array_equal(a, b)

    def test_pad_extension_leaves_cls_unchanged(self):
        params = init_params(TINY)
        base = encode(params, [4, 5, 6], [1, 1, 1]).cls
        padded = encode(params, [4, 5, 6, 0, 0], [1, 1, 1, 0, 0]).cls
        assert np.abs(padded - base).max() < 1e-9

    def test_overlong_input_rejected(self):
        params = init_params(TINY)
        with pytest.raises(ValueError):
            encode(params, list(range(4)) * 5)

    def test_out_of_range_id_rejected(self):
        params = init_params(TINY)
        with pytest.raises(ValueError):
            encode(params, [4, 99])

    def test_hand_executed_forward_pass(self):
        # Single layer, single head, d_model=2: recompute the whole forward
        # pass with explicit numpy arithmetic and compare.
        cfg = EncoderConfig(d_model=2, n_heads=1, n_layers=1, d_ff=2,
                            max_len=8, vocab_size=6, seed=0)
        rng = np.random.default_rng(12)
        params = init_params(cfg)
        for name, arr in params.arrays.items():
            params.arrays[name] = rng.normal(0.0, 0.5, size=arr.shape)
        a = params.arrays
        ids = [4, 5]

        def ln(x, g, b):
            mu = x.mean(-1, keepdims=True)
            var = ((x - mu) ** 2).mean(-1, keepdims=True)
            return (x - mu) / np.sqrt(var + 1e-12) * g + b

        def gelu(u):
            return 0.5 * u * (1.0 + np.vectorize(math.erf)(u / math.sqrt(2.0)))

        x = a["tok_emb"][ids] + a["pos_emb"][:2]
        q = x @ a["layers.0.attn.Wq"] + a["layers.0.attn.bq"]
        k = x @ a["layers.0.attn.Wk"] + a["layers.0.attn.bk"]
        v = x @ a["layers.0.attn.Wv"] + a["layers.0.attn.bv"]
        scores = q @ k.T / math.sqrt(2.0)
        weights = np.exp(scores - scores.max(-1, keepdims=True))
        weights = weights / weights.sum(-1, keepdims=True)
        attn = (weights @ v) @ a["layers.0.attn.Wo"] + a["layers.0.attn.bo"]
        x = ln(x + attn, a["layers.0.ln1.g"], a["layers.0.ln1.b"])
        ff = gelu(x @ a["layers.0.ff.W1"] + a["layers.0.ff.b1"]) @ a["layers.0.ff.W2"] + a["layers.0.ff.b2"]
        x = ln(x + ff, a["layers.0.ln2.g"], a["layers.0.ln2.b"])
        expected = ln(x, a["final_ln.g"], a["final_ln.b"])

        got = encode(params, ids).hidden
        np.testing.assert_allclose(got, expected, atol=1e-12)


def _cls_pool_loss(tensors, batch):
    """CLS-vector linear head; batch = (ids, mask, targets, head, reduction)."""
    ids, mask, targets, head, reduction = batch
    hidden = encode_graph(tensors, TINY, ids, mask)
    cls = ad.take(hidden, 0, axis=1)
    logits = ad.matmul(cls, head)
    return ad.cross_entropy_logits(logits, targets, reduction)


class TestGrads:
    def _batch(self, reduction="mean", head_scale=1.0):
        rng = np.random.default_rng(0)
        ids = np.array([[2, 4, 5, 0], [2, 6, 0, 0]])
        mask = np.array([[1, 1, 1, 0], [1, 1, 0, 0]])
        targets = np.array([0, 1])
        head = ad.tensor(rng.normal(size=(8, 2)) * head_scale, requires_grad=True)
        return ids, mask, targets, head, reduction

    def test_finite_difference_all_encoder_params(self):
        params = init_params(TINY)
        batch = self._batch()
        _, grads = loss_and_grads(params, _cls_pool_loss, batch)
        h = 1e-5
        for name in params.arrays:
            arr = params.arrays[name]
            flat = arr.reshape(-1)
            gflat = grads[name].reshape(-1)
            for i in range(0, flat.size, max(1, flat.size // 7)):  # spot-check entries
                orig = flat[i]
                flat[i] = orig + h
                up, _ = _loss_only(params, batch)
                flat[i] = orig - h
                down, _ = _loss_only(params, batch)
                flat[i] = orig
                fd = (up - down) / (2 * h)
                assert abs(fd - gflat[i]) < 1e-7 or abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i])) < 1e-4

    def test_zero_head_gives_exactly_zero_encoder_grads(self):
        params = init_params(TINY)
        batch = self._batch(head_scale=0.0)
        _, grads = loss_and_grads(params, _cls_pool_loss, batch)
        for name, g in grads.items():
            np.testing.assert_array_equal(g, np.zeros_like(g))

    def test_duplicated_rows_double_gradients_under_sum(self):
        params = init_params(TINY)
        ids = np.array([[2, 4, 5]])
        mask = np.ones_like(ids)
        head = ad.tensor(np.full((8, 2), 0.3), requires_grad=True)
        _, single = loss_and_grads(params, _cls_pool_loss, (ids, mask, np.array([1]), head, "sum"))
        head2 = ad.tensor(np.full((8, 2), 0.3), requires_grad=True)
        _, double = loss_and_grads(
            params, _cls_pool_loss,
            (np.vstack([ids, ids]), np.vstack([mask, mask]), np.array([1, 1]), head2, "sum"))
        for name in single:
            np.testing.assert_array_equal(double[name], 2.0 * single[name])

    def test_non_finite_loss_raises(self):
        params = init_params(TINY)
        params.arrays["tok_emb"][:] = np.inf
        with np.errstate(invalid="ignore"), pytest.raises(NonFiniteLossError):
            loss_and_grads(params, _cls_pool_loss, self._batch())


def _loss_only(params, batch):
    tensors = {name: ad.tensor(arr) for name, arr in params.arrays.items()}
    loss = _cls_pool_loss(tensors, batch)
    return float(loss.data), None


class TestSchedule:
    def test_warmup_and_decay_endpoints(self):
        s = TrainSchedule(peak_lr=1e-3, warmup_steps=10, total_steps=110)
        assert s.lr_at(0) == 0.0
        assert s.lr_at(10) == pytest.approx(1e-3)
        assert s.lr_at(110) == 0.0
        assert 0 < s.lr_at(60) < 1e-3

    def test_invalid_schedule(self):
        with pytest.raises(ValueError):
            TrainSchedule(warmup_steps=10, total_steps=10)


class TestTrainStep:
    def test_zero_gradients_leave_params_unchanged(self):
        params = init_params(TINY)
        before = params.copy()
        grads = {name: np.zeros_like(arr) for name, arr in params.arrays.items()}
        state = AdamState()
        state.step = 50  # past warmup
        apply_update(params, grads, state, TrainSchedule(peak_lr=1e-2, warmup_steps=1, total_steps=100))
        for name in params.arrays:
            np.testing.assert_array_equal(params.arrays[name], before.arrays[name])

    def test_warmup_step_zero_leaves_params_unchanged(self):
        params = init_params(TINY)
        before = params.copy()
        batch = (np.array([[2, 4, 5]]), np.ones((1, 3), dtype=int), np.array([0]),
                 ad.tensor(np.full((8, 2), 0.2), requires_grad=True), "mean")
        train_step(params, _cls_pool_loss, batch, AdamState(),
                   TrainSchedule(peak_lr=1e-2, warmup_steps=5, total_steps=50, weight_decay=0.01))
        for name in params.arrays:
            np.testing.assert_array_equal(params.arrays[name], before.arrays[name])

    def test_loss_decreases_over_200_steps_on_one_example(self):
        params = init_params(TINY)
        head = ad.tensor(np.random.default_rng(1).normal(size=(8, 2)) * 0.1, requires_grad=True)

        def loss_builder(tensors, batch):
            hidden = encode_graph(tensors, TINY, batch[0], batch[1])
            cls = ad.take(hidden, 0, axis=1)
            return ad.cross_entropy_logits(ad.matmul(cls, head), batch[2])

        batch = (np.array([[2, 4, 5, 6]]), np.ones((1, 4), dtype=int), np.array([1]))
        schedule = TrainSchedule(peak_lr=5e-3, warmup_steps=10, total_steps=220)
        state = AdamState()
        losses = [train_step(params, loss_builder, batch, state, schedule) for _ in range(200)]
        assert losses[-1] < losses[0]
        assert losses[-1] < 0.5 * losses[0]


class TestCheckpoint:
    def test_round_trip_bytes_identical(self, tmp_path):
        params = init_params(TINY)
        vocab = Vocab(["metal", "heat", "owl"])
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, "test-model", TINY, vocab, params.arrays, {"note": 1})
        model_type, config, vocab2, arrays, extra = load_checkpoint(p1)
        assert model_type == "test-model"
        assert config == TINY
        assert vocab2.tokens() == vocab.tokens()
        assert extra == {"note": 1}
        for name in params.arrays:
            np.testing.assert_array_equal(arrays[name], params.arrays[name])
        save_checkpoint(p2, "test-model", config, vocab2, arrays, extra)
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_foreign_file(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(ValueError):
            load_checkpoint(p)
