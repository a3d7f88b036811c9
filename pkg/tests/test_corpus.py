"""Corpus generator: rendering contracts, proportions, formats, validation."""

import json
import math
import os
import shutil

import numpy as np
import pytest

from mstts import corpus as cs
from mstts.errors import ContractError, CorpusError, CorpusVersionError


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus") / "small"
    return cs.generate_corpus(cs.GenConfig(n_utterances=140, seed=13), str(out))


@pytest.fixture()
def assets():
    templates, base = cs.make_templates(seed=21, d_spec=32)
    profiles = cs.make_profiles(seed=21, d_spec=32)
    return templates, base, profiles


class TestRenderUtterance:
    def test_bitwise_determinism(self, assets):
        templates, base, profiles = assets
        text = [3, 7, 1, 12, 9]
        a = cs.render_utterance(text, profiles[2], templates, base, prosody_seed=99)
        b = cs.render_utterance(text, profiles[2], templates, base, prosody_seed=99)
        assert a[0].tobytes() == b[0].tobytes()
        assert a[1] == b[1] and a[2] == b[2]

    def test_neutral_unit_factors_no_pauses(self, assets):
        templates, base, profiles = assets
        text = [3, 7, 1, 12, 9]
        forced = ([1.0] * 5, [1.0] * 5, [])
        feats, durations, pauses = cs.render_utterance(
            text, profiles[0], templates, base, prosody_seed=0, forced_factors=forced)
        assert pauses == []
        assert durations == [int(base[s]) for s in text]
        assert feats.shape == (32, sum(base[s] for s in text))

    def test_two_emotions_share_local_prosody(self, assets):
        templates, base, profiles = assets
        text = [5, 2, 14, 8, 11, 6]
        fa, da, pa = cs.render_utterance(text, profiles[1], templates, base, prosody_seed=4242)
        fb, db, pb = cs.render_utterance(text, profiles[4], templates, base, prosody_seed=4242)
        assert pa == pb  # pause draws depend only on the prosody seed
        ta, tb = profiles[1].tempo, profiles[4].tempo
        for x, y in zip(da, db):
            # identical up to tempo scaling and half-up rounding
            assert abs(x / ta - y / tb) <= 0.5 / ta + 0.5 / tb + 1e-9
        gap = np.linalg.norm(fa.mean(axis=1) - fb.mean(axis=1))
        assert gap >= 0.5

    def test_min_duration_floor(self, assets):
        templates, base, profiles = assets
        forced = ([0.01] * 3, [1.0] * 3, [])
        _, durations, _ = cs.render_utterance([1, 2, 3], profiles[0], templates, base,
                                              prosody_seed=0, forced_factors=forced)
        assert durations == [4, 4, 4]

    def test_invalid_symbol(self, assets):
        templates, base, profiles = assets
        with pytest.raises(ContractError):
            cs.render_utterance([0, 1], profiles[0], templates, base, prosody_seed=0)

    def test_nearest_template_classifier_recovers_symbols(self, assets):
        templates, base, profiles = assets
        rng = np.random.default_rng(7)
        total, hits = 0, 0
        for trial in range(10):
            text = [int(s) for s in rng.integers(1, 16, size=8)]
            prof = profiles[int(rng.integers(0, 7))]
            feats, durations, pauses = cs.render_utterance(
                text, prof, templates, base, prosody_seed=trial)
            # Frame-wise symbol truth and crossfade mask from the bookkeeping.
            sym_seq, boundary = [], set()
            pause_after = dict(pauses)
            pos = 0
            for i, s in enumerate(text):
                if pos > 0:
                    boundary.update((pos - 1, pos))
                sym_seq.extend([s] * durations[i])
                pos += durations[i]
                if i in pause_after:
                    boundary.update((pos - 1, pos))
                    sym_seq.extend([cs.SILENCE] * pause_after[i])
                    pos += pause_after[i]
            cands = np.stack([np.roll(templates[s], prof.band_shift) for s in range(16)])
            cands /= np.linalg.norm(cands, axis=1, keepdims=True)
            for t in range(feats.shape[1]):
                if t in boundary:
                    continue
                v = feats[:, t] - prof.tilt
                pred = int(np.argmax(cands @ (v / np.linalg.norm(v))))
                hits += pred == sym_seq[t]
                total += 1
        assert hits / total >= 0.99


class TestProfiles:
    def test_neutral_profile_is_identity(self, assets):
        _, _, profiles = assets
        p0 = profiles[0]
        assert p0.gain == 1.0 and p0.tempo == 1.0 and p0.band_shift == 0
        assert not p0.tilt.any()

    def test_pairwise_tilt_separation(self, assets):
        _, _, profiles = assets
        for a in profiles:
            for b in profiles:
                if a.id < b.id:
                    assert np.linalg.norm(a.tilt - b.tilt) >= cs.MIN_TILT_SEPARATION


class TestGenerate:
    def test_emotion_counts_700(self):
        counts = cs.emotion_counts(700, 0.4667)
        assert counts[0] == 326
        assert sum(counts) == 700
        assert counts[1:] == [63, 63, 62, 62, 62, 62]

    def test_parallel_group_count_700(self):
        assert math.ceil(0.15 * 700 / 7) == 15

    def test_group_structure(self, small_corpus):
        groups = small_corpus.parallel_groups()
        assert len(groups) == math.ceil(0.15 * 140 / 7)
        for gid, members in groups.items():
            assert len(members) == 7
            assert sorted(m.emotion for m in members) == list(range(7))
            assert len({tuple(m.text) for m in members}) == 1
            assert len({m.split for m in members}) == 1

    def test_duration_bookkeeping_every_record(self, small_corpus):
        for rec in small_corpus.records:
            assert rec.total_frames == rec.features.shape[1]

    def test_below_minimum_utterances(self, tmp_path):
        with pytest.raises(ContractError):
            cs.generate_corpus(cs.GenConfig(n_utterances=10, seed=1), str(tmp_path / "x"))

    def test_byte_determinism(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        cs.generate_corpus(cs.GenConfig(n_utterances=80, seed=3), str(a))
        cs.generate_corpus(cs.GenConfig(n_utterances=80, seed=3), str(b))
        for name in ("manifest.jsonl", "profiles.json", "templates.f32", "feat/0.f32",
                     "feat/41.f32"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_different_seed_differs(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        cs.generate_corpus(cs.GenConfig(n_utterances=80, seed=3), str(a))
        cs.generate_corpus(cs.GenConfig(n_utterances=80, seed=4), str(b))
        assert (a / "manifest.jsonl").read_bytes() != (b / "manifest.jsonl").read_bytes()


class TestLoadCorpus:
    def _copy(self, corpus, tmp_path):
        dst = tmp_path / "copy"
        shutil.copytree(corpus.directory, dst)
        return dst

    def test_round_trip(self, small_corpus):
        reloaded = cs.load_corpus(small_corpus.directory)
        assert len(reloaded.records) == len(small_corpus.records)
        r0 = reloaded.records[0]
        assert np.array_equal(r0.features, small_corpus.records[0].features)

    def test_truncated_feature_file(self, small_corpus, tmp_path):
        dst = self._copy(small_corpus, tmp_path)
        path = dst / "feat" / "5.f32"
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CorpusError, match="record 5"):
            cs.load_corpus(str(dst))

    def test_flipped_byte(self, small_corpus, tmp_path):
        dst = self._copy(small_corpus, tmp_path)
        path = dst / "feat" / "7.f32"
        raw = bytearray(path.read_bytes())
        raw[20] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CorpusError, match="record 7"):
            cs.load_corpus(str(dst))

    def test_unknown_version(self, small_corpus, tmp_path):
        dst = self._copy(small_corpus, tmp_path)
        doc = json.loads((dst / "profiles.json").read_text())
        doc["version"] = 99
        (dst / "profiles.json").write_text(json.dumps(doc))
        with pytest.raises(CorpusVersionError):
            cs.load_corpus(str(dst))

    def test_missing_profiles(self, small_corpus, tmp_path):
        dst = self._copy(small_corpus, tmp_path)
        os.remove(dst / "profiles.json")
        with pytest.raises(CorpusError):
            cs.load_corpus(str(dst))
