"""Probe, forced alignment metrics, aggregation, and transfer plumbing."""

import numpy as np
import pytest

from mstts import corpus as cs
from mstts import evaluation as ev
from mstts.config import ModelConfig
from mstts.errors import ContentMismatchError, ContractError, ProbeUnfitError
from mstts.model import Model


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("evalcorpus") / "c"
    return cs.generate_corpus(cs.GenConfig(n_utterances=160, seed=29), str(out))


@pytest.fixture(scope="module")
def probe(corpus):
    return ev.train_probe(corpus, seed=1)


def tiny_model(variant="proposed", seed=0):
    cfg = ModelConfig(d_spec=32, vocab=17, d_p=8, conv_channels=[4, 4, 4, 4, 6, 6],
                      gru_hidden=6, d_g=6, d_l=6, d_a=4, dec_hidden=10, prenet=[8, 6],
                      attn_width=8, cls_hidden=6, max_decoder_steps=60)
    return Model(cfg, variant, seed)


class TestProbe:
    def test_high_validation_accuracy(self, probe):
        assert probe.val_accuracy >= 0.99

    def test_deterministic(self, corpus):
        a = ev.train_probe(corpus, seed=1)
        b = ev.train_probe(corpus, seed=1)
        assert a.weight.tobytes() == b.weight.tobytes()
        assert a.val_accuracy == b.val_accuracy

    def test_shuffled_labels_unfit(self, corpus):
        import copy
        shuffled = copy.copy(corpus)
        rng = np.random.default_rng(3)
        records = [copy.copy(r) for r in corpus.records]
        emotions = rng.permutation([r.emotion for r in records])
        for r, e in zip(records, emotions):
            r.emotion = int(e)
        shuffled.records = records
        with pytest.raises(ProbeUnfitError):
            ev.train_probe(shuffled, seed=1)

    def test_classifies_raw_corpus(self, corpus, probe):
        test = corpus.split_records("test")
        acc = np.mean([probe.predict(r.features) == r.emotion for r in test])
        assert acc >= 0.99


class TestForcedAlignment:
    def test_self_alignment_is_perfect(self, corpus):
        for rec in corpus.records[:12]:
            score = ev.measure_local_prosody(rec.features, rec, corpus.templates,
                                             corpus.profile(rec.emotion))
            assert score.duration_pearson >= 1.0 - 1e-9, rec.id
            assert score.pause_f1 == 1.0, rec.id
            assert not score.degenerate

    def test_recovers_exact_durations(self, corpus):
        rec = next(r for r in corpus.records if r.pauses)
        durations, silences = ev.forced_align(rec.features, rec.text,
                                              corpus.profile(rec.emotion),
                                              corpus.templates)
        assert durations == rec.durations
        assert {j for j, c in silences.items() if c >= ev.PAUSE_DETECT_MIN_FRAMES} == \
            rec.pause_slots

    def test_doubled_durations_keep_scores(self, corpus):
        rec = corpus.records[5]
        doubled = np.repeat(rec.features, 2, axis=1)
        score = ev.measure_local_prosody(doubled, rec, corpus.templates,
                                         corpus.profile(rec.emotion))
        assert score.duration_pearson >= 1.0 - 1e-6
        assert score.pause_f1 == 1.0

    def test_permuted_durations_decorrelate(self, corpus):
        rec = max(corpus.records[:20], key=lambda r: len(r.text))
        rng = np.random.default_rng(11)
        corrs = []
        for _ in range(100):
            perm = rng.permutation(len(rec.durations))
            corrs.append(ev.duration_pearson([rec.durations[i] for i in perm],
                                             rec.durations))
        assert abs(np.mean(corrs)) < 0.15

    def test_degenerate_output(self, corpus):
        rec = corpus.records[0]
        short = rec.features[:, :len(rec.text) - 1]
        score = ev.measure_local_prosody(short, rec, corpus.templates,
                                         corpus.profile(rec.emotion))
        assert score.degenerate
        assert score.duration_pearson == 0.0 and score.pause_f1 == 0.0

    def test_pause_f1_edge_cases(self):
        assert ev.pause_f1(set(), set()) == 1.0
        assert ev.pause_f1({1}, set()) == 0.0
        assert ev.pause_f1(set(), {1}) == 0.0
        assert ev.pause_f1({1, 2}, {2, 3}) == pytest.approx(0.5)


class TestAggregation:
    def test_aggregates_match_recomputation(self):
        rng = np.random.default_rng(5)
        rows = [{"emotion": int(rng.integers(0, 7)),
                 "global_match": bool(rng.integers(0, 2)),
                 "duration_pearson": float(rng.uniform(-1, 1)),
                 "pause_f1": float(rng.uniform(0, 1)),
                 "completed": True,
                 "ref_attn_entropy": float(rng.uniform(0, 3)),
                 "ref_attn_coverage": float(rng.uniform(0, 1))}
                for _ in range(50)]
        agg = ev.aggregate_rows(rows)
        vals = [r["duration_pearson"] for r in rows]
        assert abs(agg["overall"]["duration_pearson"]["mean"] - np.mean(vals)) < 1e-9
        expect_ci = 1.96 * np.std(vals, ddof=1) / np.sqrt(len(vals))
        assert abs(agg["overall"]["duration_pearson"]["ci95"] - expect_ci) < 1e-9
        neutral = [r for r in rows if r["emotion"] == 0]
        assert agg["neutral"]["global_match"]["n"] == len(neutral)
        assert abs(agg["neutral"]["global_match"]["mean"]
                   - np.mean([r["global_match"] for r in neutral])) < 1e-9

    def test_report_has_seven_emotions_plus_overall(self):
        rows = [{"emotion": e, "global_match": True, "duration_pearson": 0.5,
                 "pause_f1": 1.0, "completed": True, "ref_attn_entropy": None,
                 "ref_attn_coverage": None} for e in range(7)]
        agg = ev.aggregate_rows(rows)
        assert set(agg) == {"overall", *cs.EMOTION_NAMES}


class TestTransferPlumbing:
    def test_parallel_transfer_report_schema(self, corpus, probe):
        m = tiny_model()
        report = ev.run_parallel_transfer(m, corpus, probe, split="test")
        groups = corpus.parallel_groups("test")
        assert len(report.rows) == 7 * len(groups)
        for row in report.rows:
            assert set(row) >= {"ref_id", "emotion", "global_match", "duration_pearson",
                                "pause_f1", "completed", "ref_attn_entropy"}
        assert "overall" in report.aggregates

    def test_reports_deterministic(self, corpus, probe):
        m = tiny_model(seed=3)
        a = ev.run_parallel_transfer(m, corpus, probe, split="test").to_dict()
        b = ev.run_parallel_transfer(m, corpus, probe, split="test").to_dict()
        assert a == b

    def test_all_variants_share_schema(self, corpus, probe):
        for variant in ("proposed", "base-g", "base-l", "base-fs"):
            report = ev.run_parallel_transfer(tiny_model(variant), corpus, probe,
                                              split="test", max_groups=1)
            assert report.variant == variant
            assert {"overall"} <= set(report.aggregates)
            if variant == "base-g":
                assert report.rows[0]["ref_attn_entropy"] is None

    def test_multi_reference_degenerates_to_parallel(self, corpus, probe):
        m = tiny_model(seed=4)
        groups = corpus.parallel_groups("test")
        members = groups[sorted(groups)[0]]
        ref = members[0]
        row = ev.run_multi_reference(m, corpus, probe, ref, ref, n_distractors=2)
        direct = m.synthesize(ref.text, ref.features)
        again = m.synthesize(ref.text, ref.features, global_ref=ref.features)
        assert np.array_equal(direct.features, again.features)
        assert row["local_ref"] == row["global_ref"] == ref.id

    def test_multi_reference_judges_against_global_emotion(self, corpus, probe):
        m = tiny_model(seed=5)
        m.decoder.stop_proj.bias.data[:] = -10.0  # run to the cap: non-degenerate output
        groups = corpus.parallel_groups("test")
        members = groups[sorted(groups)[0]]
        local, glob = members[1], members[4]
        row = ev.run_multi_reference(m, corpus, probe, local, glob, n_distractors=3)
        assert row["emotion"] == glob.emotion
        assert row["local_emotion"] == local.emotion
        assert row["distractor_duration_pearson"] is not None

    def test_multi_reference_content_mismatch(self, corpus, probe):
        m = tiny_model(seed=6)
        a = corpus.records[0]
        b = next(r for r in corpus.records if r.text != a.text)
        with pytest.raises(ContentMismatchError):
            ev.run_multi_reference(m, corpus, probe, a, b, text=b.text)

    def test_granularity_study_schema(self, corpus, probe):
        out = ev.run_granularity_study(tiny_model("proposed", 7),
                                       tiny_model("base-fs", 7), corpus,
                                       max_utterances=4)
        for label in ("proposed", "base-fs"):
            assert {"rows", "completion_rate", "mean_entropy", "mean_coverage"} <= set(out[label])
        for row_p, row_fs in zip(out["proposed"]["rows"], out["base-fs"]["rows"]):
            assert row_p["id"] == row_fs["id"]
            assert row_fs["t_l"] == row_fs["t_spec"]
            assert row_p["t_l"] == -(-row_p["t_spec"] // 16)

    def test_missing_groups_raise(self, corpus, probe):
        m = tiny_model()
        with pytest.raises(ContractError):
            ev.run_parallel_transfer(m, corpus, probe, split="nosuch")
