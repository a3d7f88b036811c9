"""Losses, stage schedules, freeze exactness, and checkpoint round trips."""

import math

import numpy as np
import pytest

from mstts import autodiff as ad
from mstts import corpus as cs
from mstts import training as tr
from mstts.config import ModelConfig, RunConfig, TrainConfig
from mstts.errors import CheckpointError, ContractError, ProvenanceError
from mstts.model import Model


def tiny_model_config(**over):
    base = dict(d_spec=8, vocab=17, d_p=8, conv_channels=[4, 4, 4, 4, 6, 6],
                gru_hidden=6, d_g=6, d_l=6, d_a=4, dec_hidden=10, prenet=[8, 6],
                attn_width=8, cls_hidden=6, max_decoder_steps=60)
    base.update(over)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("traincorpus") / "c"
    return cs.generate_corpus(cs.GenConfig(n_utterances=80, seed=19, d_spec=8), str(out))


def run_config(**train_over):
    train = dict(stage1_steps=5, stage2_steps=5, batch_size=4, seed=23)
    train.update(train_over)
    return RunConfig(model=tiny_model_config(), train=TrainConfig(**train))


def param_bytes(model, prefixes):
    return {n: p.data.tobytes() for n, p in model.parameters().items()
            if n.startswith(prefixes)}


class TestComputeLoss:
    def _model(self):
        return Model(tiny_model_config(), "proposed", seed=1)

    def test_perfect_prediction_near_zero(self):
        m = self._model()
        cfg = run_config().train
        target = np.random.default_rng(0).normal(size=(8, 9)).astype(np.float32)
        frames = ad.Tensor(target.copy())
        stops = ad.Tensor(np.array([[-20.0, -20.0, 20.0]], dtype=np.float32))
        loss, parts = tr.compute_loss(frames, stops, target, 9, None, 0, 1, m, cfg)
        assert parts.total < 1e-6

    def test_padding_excluded_from_mse(self):
        m = self._model()
        cfg = run_config().train
        target = np.ones((8, 8), dtype=np.float32)
        # Predicted padded frame differs wildly; the mask must hide it.
        frames_data = np.concatenate([np.ones((8, 8)), 50 * np.ones((8, 1))],
                                     axis=1).astype(np.float32)
        stops = ad.Tensor(np.array([[-20.0, -20.0, 20.0]], dtype=np.float32))
        loss, parts = tr.compute_loss(ad.Tensor(frames_data), stops, target, 9,
                                      None, 0, 1, m, cfg)
        assert parts.mse < 1e-9

    def test_stage2_adds_exactly_the_ce_term(self):
        m = self._model()
        cfg = run_config().train
        rng = np.random.default_rng(1)
        target = rng.normal(size=(8, 9)).astype(np.float32)
        frames = ad.Tensor(rng.normal(size=(8, 9)).astype(np.float32))
        stops = ad.Tensor(rng.normal(size=(1, 3)).astype(np.float32))
        gse = ad.Tensor(rng.normal(size=(6, 1)).astype(np.float32))
        _, p1 = tr.compute_loss(frames, stops, target, 9, gse, 2, 1, m, cfg)
        _, p2 = tr.compute_loss(frames, stops, target, 9, gse, 2, 2, m, cfg)
        assert p1.cls == 0.0 and p2.cls > 0.0
        assert p2.total == pytest.approx(p1.total + p2.cls, rel=1e-6)

    def test_uniform_classifier_ce_is_ln7(self):
        m = self._model()
        for lin in (m.classifier.l0, m.classifier.l1):
            for _, t in lin.named():
                t.data[:] = 0
        cfg = run_config().train
        target = np.zeros((8, 3), dtype=np.float32)
        frames = ad.Tensor(target.copy())
        stops = ad.Tensor(np.array([[20.0]], dtype=np.float32))
        gse = ad.Tensor(np.zeros((6, 1), dtype=np.float32))
        _, parts = tr.compute_loss(frames, stops, target, 3, gse, 4, 2, m, cfg)
        assert parts.cls == pytest.approx(math.log(7), rel=1e-5)


class TestStages:
    def test_global_head_untouched_by_stage1(self, tiny_corpus):
        rc = run_config(stage1_steps=8)
        m = Model(rc.model, "proposed", seed=2)
        before = param_bytes(m, ("ref_encoder.global_head", "classifier"))
        tr.train_stage1(m, tiny_corpus, rc)
        after = param_bytes(m, ("ref_encoder.global_head", "classifier"))
        assert before == after
        # and the rest did move
        assert param_bytes(m, ("decoder",)) != {}

    def test_zero_steps_keeps_initialization(self, tiny_corpus):
        rc = run_config()
        m1 = Model(rc.model, "proposed", seed=3)
        m2 = Model(rc.model, "proposed", seed=3)
        rc0 = run_config(stage1_steps=1)
        # one step changes bytes; zero steps must not (compare fresh builds)
        assert {n: p.data.tobytes() for n, p in m1.parameters().items()} == \
               {n: p.data.tobytes() for n, p in m2.parameters().items()}
        tr._train_loop(m1, tiny_corpus, rc0.train, 0, stage=1, use_gse=False,
                       bn_mode="train")
        assert {n: p.data.tobytes() for n, p in m1.parameters().items()} == \
               {n: p.data.tobytes() for n, p in m2.parameters().items()}

    def test_stage2_freeze_exactness(self, tiny_corpus):
        rc = run_config(stage1_steps=4, stage2_steps=10)
        m = Model(rc.model, "proposed", seed=4)
        tr.train_stage1(m, tiny_corpus, rc)
        frozen_before = param_bytes(m, tr.STAGE2_FROZEN_PREFIXES)
        buffers_before = {n: getattr(o, a).tobytes() for n, o, a in m.named_buffers()}
        live_before = param_bytes(m, ("ref_encoder.global_head", "decoder", "classifier"))
        tr.train_stage2(m, tiny_corpus, rc)
        assert param_bytes(m, tr.STAGE2_FROZEN_PREFIXES) == frozen_before
        assert {n: getattr(o, a).tobytes() for n, o, a in m.named_buffers()} == buffers_before
        live_after = param_bytes(m, ("ref_encoder.global_head", "decoder", "classifier"))
        assert any(live_after[n] != live_before[n] for n in live_before)
        # trainability flags restored afterwards
        assert all(p.trainable for p in m.parameters().values())

    def test_decoder_moves_within_10_stage2_steps(self, tiny_corpus):
        rc = run_config(stage1_steps=2, stage2_steps=10)
        m = Model(rc.model, "proposed", seed=5)
        tr.train_stage1(m, tiny_corpus, rc)
        before = param_bytes(m, ("decoder",))
        tr.train_stage2(m, tiny_corpus, rc)
        assert param_bytes(m, ("decoder",)) != before

    def test_stage2_rejected_for_mono_scale_variants(self, tiny_corpus):
        rc = run_config()
        with pytest.raises(ProvenanceError, match="no global head"):
            tr.train_stage2(Model(rc.model, "base-l", seed=6), tiny_corpus, rc)
        with pytest.raises(ProvenanceError, match="single stage"):
            tr.train_stage2(Model(rc.model, "base-g", seed=6), tiny_corpus, rc)

    def test_stage1_gse_path_invariance(self, tiny_corpus):
        rc = run_config(stage1_steps=4)
        m = Model(rc.model, "proposed", seed=7)
        tr.train_stage1(m, tiny_corpus, rc)
        rec = tiny_corpus.records[0]
        other = tiny_corpus.records[1]
        a = m.synthesize(rec.text, rec.features, zero_gse=True)
        b = m.synthesize(rec.text, rec.features, global_ref=other.features, zero_gse=True)
        assert np.array_equal(a.features, b.features)

    def test_determinism_across_runs(self, tiny_corpus):
        rc = run_config(stage1_steps=6)
        checks = []
        for _ in range(2):
            m = Model(rc.model, "proposed", seed=8)
            tr.train_stage1(m, tiny_corpus, rc)
            checks.append({n: p.data.tobytes() for n, p in m.parameters().items()})
        assert checks[0] == checks[1]

    def test_loss_decreases_on_average(self, tiny_corpus):
        rc = run_config(stage1_steps=60, batch_size=4)
        m = Model(rc.model, "proposed", seed=9)
        history = tr.train_stage1(m, tiny_corpus, rc)
        assert np.mean(history[-15:]) < np.mean(history[:15])


class TestCheckpoint:
    def _trained(self, tiny_corpus, variant="proposed", seed=10):
        rc = run_config(stage1_steps=3, stage2_steps=2)
        m = Model(rc.model, variant, seed=seed)
        tr.train_stage1(m, tiny_corpus, rc)
        return m, rc

    def test_save_load_forward_bitwise(self, tiny_corpus, tmp_path):
        m, rc = self._trained(tiny_corpus)
        path = tmp_path / "a.ckpt"
        tr.save_checkpoint(m, rc, 1, path)
        m2, rc2, header = tr.load_checkpoint(path)
        rec = tiny_corpus.records[0]
        a = m.synthesize(rec.text, rec.features, zero_gse=True)
        b = m2.synthesize(rec.text, rec.features, zero_gse=True)
        assert np.array_equal(a.features, b.features)
        assert header["stage"] == 1
        assert header["memory_width"] == m.decoder.mem_width

    def test_save_load_save_byte_identical(self, tiny_corpus, tmp_path):
        m, rc = self._trained(tiny_corpus)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        tr.save_checkpoint(m, rc, 1, p1)
        m2, rc2, _ = tr.load_checkpoint(p1)
        tr.save_checkpoint(m2, rc2, 1, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_flipped_payload_byte_names_parameter(self, tiny_corpus, tmp_path):
        m, rc = self._trained(tiny_corpus)
        path = tmp_path / "a.ckpt"
        tr.save_checkpoint(m, rc, 1, path)
        raw = bytearray(path.read_bytes())
        raw[-3] ^= 0xFF  # inside the last tensor's payload
        path.write_bytes(bytes(raw))
        last_name = list(m.parameters())[-1] if not m.named_buffers() else \
            m.named_buffers()[-1][0]
        with pytest.raises(CheckpointError, match=last_name.replace(".", r"\.")):
            tr.load_checkpoint(path)

    def test_stage_provenance_enforced(self, tiny_corpus, tmp_path):
        m, rc = self._trained(tiny_corpus)
        path = tmp_path / "a.ckpt"
        tr.save_checkpoint(m, rc, 1, path)
        with pytest.raises(ProvenanceError):
            tr.load_checkpoint(path, expect_stage=2)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTMAG" + b"\x00" * 32)
        with pytest.raises(CheckpointError):
            tr.load_checkpoint(path)

    def test_nonscalar_loss_contract(self):
        with ad.Tape():
            t = ad.mul(ad.Tensor(np.ones(3, dtype=np.float32), trainable=True),
                       ad.Tensor(np.ones(3, dtype=np.float32)))
            with pytest.raises(ContractError):
                ad.backward(t)
