"""Layer-level goldens, the straight-line GRU oracle, and freeze semantics."""

import numpy as np
import pytest

from mstts import autodiff as ad
from mstts import layers
from mstts.errors import UnknownModuleError


def make_rng(seed=0):
    return np.random.default_rng(seed)


def to_f64(named_tensors):
    for _, t in named_tensors:
        t.data = t.data.astype(np.float64)
    return dict(named_tensors)


class TestLinear:
    def test_identity_weights(self):
        lin = layers.Linear(3, 3, make_rng())
        lin.weight.data = np.eye(3, dtype=np.float32)
        x = ad.Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
        np.testing.assert_array_equal(lin.rows(x).data, x.data)

    def test_zero_input_gives_bias_rows(self):
        lin = layers.Linear(3, 4, make_rng(1))
        lin.bias.data = np.arange(4, dtype=np.float32).reshape(1, 4)
        out = lin.rows(ad.Tensor(np.zeros((5, 3), dtype=np.float32)))
        for i in range(5):
            np.testing.assert_array_equal(out.data[i], lin.bias.data[0])

    def test_cols_matches_rows(self):
        lin = layers.Linear(3, 4, make_rng(2))
        x = make_rng(3).normal(size=(3, 6)).astype(np.float32)
        a = lin.cols(ad.Tensor(x)).data
        b = lin.rows(ad.Tensor(x.T.copy())).data.T
        np.testing.assert_allclose(a, b, rtol=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_grad_check(self, seed):
        lin = layers.Linear(4, 3, make_rng(seed), dtype=np.float64)
        x = ad.Tensor(make_rng(seed + 50).normal(size=(5, 4)))

        def f():
            return ad.mean_all(ad.tanh(lin.rows(x)))

        report = ad.grad_check(f, dict(lin.named()))
        assert report.passed, str(report)


class TestConvBlock:
    def test_train_mode_normalizes(self):
        blk = layers.ConvBlock(2, 3, stride=1, rng=make_rng(0))
        x = ad.Tensor(make_rng(1).normal(size=(2, 40)).astype(np.float32))
        out = blk(x, mode="train").data
        np.testing.assert_allclose(out.mean(axis=1), np.zeros(3), atol=1e-4)
        np.testing.assert_allclose(out.var(axis=1), np.ones(3), atol=1e-3)

    def test_eval_mode_with_unit_stats_is_relu_conv(self):
        blk = layers.ConvBlock(2, 3, stride=1, rng=make_rng(0))
        x = ad.Tensor(make_rng(1).normal(size=(2, 10)).astype(np.float32))
        raw = ad.relu(ad.conv1d_same(x, blk.weight, blk.bias, 1)).data
        out = blk(x, mode="eval").data
        np.testing.assert_allclose(out, raw, atol=1e-4)

    def test_stride_halves_length(self):
        blk = layers.ConvBlock(2, 3, stride=2, rng=make_rng(0))
        x = ad.Tensor(np.zeros((2, 10), dtype=np.float32))
        assert blk(x, mode="eval").shape == (3, 5)

    def test_running_stats_converge_to_batch(self):
        blk = layers.ConvBlock(2, 4, stride=1, rng=make_rng(2))
        x = ad.Tensor(make_rng(3).normal(size=(2, 30)).astype(np.float32))
        for _ in range(220):
            train_out = blk(x, mode="train").data
        eval_out = blk(x, mode="eval").data
        assert np.max(np.abs(train_out - eval_out)) < 1e-3

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_grad_check(self, seed, mode):
        blk = layers.ConvBlock(2, 3, stride=2, rng=make_rng(seed), dtype=np.float64)
        blk.running_mean = make_rng(seed + 1).normal(size=3) * 0.1
        blk.running_var = 1.0 + 0.1 * make_rng(seed + 2).random(3)
        x = ad.Tensor(make_rng(seed + 60).normal(size=(2, 9)))

        def f():
            return ad.mean_all(ad.mul(blk(x, mode=mode), ad.Tensor(weights)))

        weights = make_rng(seed + 70).normal(size=(3, 5))
        report = ad.grad_check(f, dict(blk.named()))
        assert report.passed, str(report)


def gru_oracle(cell, x, h):
    """Straight-line numpy recompute of the pinned gate equations."""
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    p = {n: t.data for n, t in cell.named()}
    z = sig(p["W_z"] @ x + p["U_z"] @ h + p["b_z"])
    r = sig(p["W_r"] @ x + p["U_r"] @ h + p["b_r"])
    n = np.tanh(p["W_n"] @ x + r * (p["U_n"] @ h + p["b_n"]))
    return (1.0 - z) * n + z * h


class TestGRU:
    def test_zero_params_halve_hidden_state(self):
        cell = layers.GRUCell(2, 3, make_rng(0))
        for _, t in cell.named():
            t.data[:] = 0
        h = ad.Tensor(np.array([[2.0], [4.0], [-6.0]], dtype=np.float32))
        x = ad.Tensor(np.ones((2, 1), dtype=np.float32))
        out = cell.step(x, h)
        np.testing.assert_allclose(out.data, 0.5 * h.data)

    def test_zero_params_zero_state_stays_zero(self):
        cell = layers.GRUCell(2, 3, make_rng(0))
        for _, t in cell.named():
            t.data[:] = 0
        out = cell.step(ad.Tensor(np.ones((2, 1), dtype=np.float32)), cell.initial_state())
        np.testing.assert_array_equal(out.data, np.zeros((3, 1)))

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_straight_line_oracle(self, seed):
        rng = make_rng(seed)
        cell = layers.GRUCell(3, 4, rng)
        x = rng.normal(size=(3, 1)).astype(np.float32)
        h = rng.normal(size=(4, 1)).astype(np.float32)
        got = cell.step(ad.Tensor(x), ad.Tensor(h)).data
        want = gru_oracle(cell, x.astype(np.float64), h.astype(np.float64))
        np.testing.assert_allclose(got, want, atol=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_grad_check_through_5_steps(self, seed):
        cell = layers.GRUCell(2, 3, make_rng(seed), dtype=np.float64)
        xs = ad.Tensor(make_rng(seed + 10).normal(size=(2, 5)))

        def f():
            states, final = layers.gru_sequence(cell, xs)
            return ad.mean_all(ad.mul(states, states))

        report = ad.grad_check(f, dict(cell.named()))
        assert report.passed, str(report)

    def test_single_step_states_equals_final(self):
        cell = layers.GRUCell(2, 3, make_rng(1))
        xs = ad.Tensor(make_rng(2).normal(size=(2, 1)).astype(np.float32))
        states, final = layers.gru_sequence(cell, xs)
        np.testing.assert_array_equal(states.data, final.data)

    def test_zero_params_all_states_zero(self):
        cell = layers.GRUCell(2, 3, make_rng(0))
        for _, t in cell.named():
            t.data[:] = 0
        xs = ad.Tensor(make_rng(3).normal(size=(2, 6)).astype(np.float32))
        states, final = layers.gru_sequence(cell, xs)
        np.testing.assert_array_equal(states.data, np.zeros((3, 6)))

    def test_bidirectional_reversal_swaps_halves(self):
        # Tied direction cells isolate the unroll machinery: reversing the
        # input must reverse time and swap the two feature halves.
        rng = make_rng(4)
        cell = layers.GRUCell(2, 3, rng)
        x = rng.normal(size=(2, 4)).astype(np.float32)
        states, _ = layers.bigru_sequence(cell, cell, ad.Tensor(x))
        states_rev, _ = layers.bigru_sequence(cell, cell, ad.Tensor(x[:, ::-1].copy()))
        np.testing.assert_allclose(states_rev.data[:3], states.data[3:, ::-1], atol=1e-6)
        np.testing.assert_allclose(states_rev.data[3:], states.data[:3, ::-1], atol=1e-6)


class TestEmbeddingLayer:
    def test_one_hot_table_gives_unit_columns(self):
        emb = layers.Embedding(4, 4, make_rng(0))
        emb.table.data = np.eye(4, dtype=np.float32)
        out = emb([2, 0, 3])
        np.testing.assert_array_equal(out.data[:, 0], np.eye(4)[2])
        np.testing.assert_array_equal(out.data[:, 1], np.eye(4)[0])
        np.testing.assert_array_equal(out.data[:, 2], np.eye(4)[3])


class TestInitAndFreeze:
    def _build(self, seed):
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        modules = [
            ("text_encoder.embedding", layers.Embedding(5, 4, rng)),
            ("text_encoder.gru", layers.GRUCell(4, 4, rng)),
            ("ref_encoder.conv.0", layers.ConvBlock(2, 3, 2, rng)),
            ("ref_encoder.global_head.out", layers.Linear(3, 2, rng)),
        ]
        return layers.collect_params(modules)

    def test_same_seed_identical_bytes(self):
        a, b = self._build(7), self._build(7)
        assert list(a) == list(b)
        for name in a:
            assert a[name].data.tobytes() == b[name].data.tobytes(), name

    def test_different_seed_differs(self):
        a, b = self._build(7), self._build(8)
        assert any(a[n].data.tobytes() != b[n].data.tobytes() for n in a)

    def test_biases_zero(self):
        params = self._build(3)
        for name, p in params.items():
            if name.endswith((".bias", ".b_z", ".b_r", ".b_n", ".bn_beta")):
                assert not p.data.any(), name

    def test_xavier_bound(self):
        params = self._build(1)
        w = params["ref_encoder.global_head.out.weight"].data
        bound = np.sqrt(6.0 / (3 + 2))
        assert np.all(np.abs(w) <= bound)
        assert np.max(np.abs(w)) > 0.5 * bound

    def test_set_trainable_prefix(self):
        params = self._build(0)
        n = layers.set_trainable(params, ["text_encoder"], False)
        assert n == sum(1 for k in params if k.startswith("text_encoder."))
        assert not params["text_encoder.gru.W_z"].trainable
        assert params["ref_encoder.conv.0.weight"].trainable

    def test_set_trainable_unknown_prefix(self):
        params = self._build(0)
        with pytest.raises(UnknownModuleError):
            layers.set_trainable(params, ["decoder"], False)

    def test_freeze_all_with_empty_prefix(self):
        params = self._build(0)
        layers.set_trainable(params, [""], False)
        assert all(not p.trainable for p in params.values())

    def test_frozen_leaf_gets_no_grad(self):
        params = self._build(0)
        layers.set_trainable(params, ["ref_encoder.global_head"], False)
        lin_w = params["ref_encoder.global_head.out.weight"]
        with ad.Tape():
            x = ad.Tensor(np.ones((1, 3), dtype=np.float32))
            ad.backward(ad.sum_all(ad.matmul(x, ad.transpose(lin_w))))
        assert lin_w.grad is None
