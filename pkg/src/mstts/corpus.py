"""Deterministic synthetic parallel emotional pseudo-speech corpus.

Each utterance is a sequence of 5-12 symbols from a 16-symbol alphabet
(symbol 0 is silence, used only for inserted pauses). A symbol renders as a
block of frames around a fixed per-symbol spectral template; an emotion is a
global transform (additive tilt, gain, tempo, cyclic band shift) applied to
every frame, and local prosody is a per-symbol duration multiplier, energy
multiplier, and optional pause. Ground-truth durations and pause positions
ride along with every record, which is what makes the objective style-transfer
probes possible.

Everything derives from explicit seeds: templates and base durations from
(seed, 0), emotion profiles from (seed, 1), corpus assembly from (seed, 2),
and each record's prosody from its own stored prosody seed, so any record can
be re-rendered bit-exactly in isolation.

On-disk layout (all binary little-endian):
  manifest.jsonl   one JSON object per record
  profiles.json    version, generation config, emotion profiles, symbol table
  templates.f32    u32 count, u32 d_spec, then count*d_spec f32
  feat/<id>.f32    u32 T, u32 d_spec, then T*d_spec f32, frame-major
"""

from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, CorpusError, CorpusVersionError

CORPUS_VERSION = 1
N_SYMBOLS = 16
SILENCE = 0
N_EMOTIONS = 7
EMOTION_NAMES = ("neutral", "angry", "fear", "disgust", "happy", "sad", "surprised")

TEXT_LEN_RANGE = (5, 12)          # inclusive
BASE_DUR_RANGE = (12, 16)         # inclusive, frames
DUR_MULT_RANGE = (0.7, 1.4)
ENERGY_RANGE = (0.8, 1.25)
PAUSE_PROB = 0.15
PAUSE_FRAMES_RANGE = (4, 8)       # inclusive
MIN_SYMBOL_FRAMES = 4
NOISE_SIGMA = 0.01
MIN_TILT_SEPARATION = 0.5

TILT_SIGMA = 0.8                  # per-band tilt scale for non-neutral emotions
GAIN_RANGE = (0.85, 1.25)
TEMPO_RANGE = (0.8, 1.25)
BAND_SHIFT_MAX = 4


@dataclass
class EmotionProfile:
    id: int
    tilt: np.ndarray      # (d_spec,) additive spectral offset
    gain: float
    tempo: float
    band_shift: int

    def transform_template(self, template: np.ndarray, energy: float = 1.0) -> np.ndarray:
        return np.roll(template, self.band_shift) * energy * self.gain + self.tilt


@dataclass
class UtteranceRecord:
    id: int
    text: list            # symbol ids, length 5-12, no silence
    emotion: int
    durations: list       # per-symbol frame counts (ground truth)
    pauses: list          # [slot, frames] pairs; slot i = after symbol i
    parallel_group: int | None
    split: str
    prosody_seed: int
    features: np.ndarray | None = None   # (d_spec, T)

    @property
    def total_frames(self) -> int:
        return sum(self.durations) + sum(f for _, f in self.pauses)

    @property
    def pause_slots(self) -> set:
        return {slot for slot, _ in self.pauses}


@dataclass
class GenConfig:
    n_utterances: int
    seed: int
    neutral_frac: float = 0.4667
    parallel_frac: float = 0.15
    d_spec: int = 32
    frame_shift_ms: float = 12.5

    def validate(self):
        if self.n_utterances < 70:
            raise ContractError(
                f"n_utterances must be >= 70 to populate all emotions and splits, "
                f"got {self.n_utterances}")
        if not 0.0 <= self.neutral_frac < 1.0 or not 0.0 < self.parallel_frac <= 1.0:
            raise ContractError("fractions out of range")
        return self

    def to_dict(self):
        return {"n_utterances": self.n_utterances, "seed": self.seed,
                "neutral_frac": self.neutral_frac, "parallel_frac": self.parallel_frac,
                "d_spec": self.d_spec, "frame_shift_ms": self.frame_shift_ms}


@dataclass
class Corpus:
    directory: str
    records: list
    profiles: list
    templates: np.ndarray        # (N_SYMBOLS, d_spec)
    base_durations: np.ndarray   # (N_SYMBOLS,) frames
    d_spec: int
    frame_shift_ms: float
    gen_config: dict = field(default_factory=dict)

    def split_records(self, split: str):
        return [r for r in self.records if r.split == split]

    def parallel_groups(self, split: str | None = None):
        groups: dict[int, list] = {}
        for r in self.records:
            if r.parallel_group is None:
                continue
            if split is not None and r.split != split:
                continue
            groups.setdefault(r.parallel_group, []).append(r)
        return {g: sorted(rs, key=lambda r: r.emotion) for g, rs in sorted(groups.items())}

    def profile(self, emotion: int) -> EmotionProfile:
        return self.profiles[emotion]


# ---------------------------------------------------------------------------
# Primitive generation steps
# ---------------------------------------------------------------------------


def make_templates(seed: int, d_spec: int):
    """Fixed per-symbol spectral templates and base durations."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    # Full-norm silence: a near-origin silence template would sit closer to
    # a two-symbol crossfade mix than either symbol whenever the pair is
    # nearly antipodal, corrupting forced alignment.
    templates = rng.normal(0.0, 1.0, size=(N_SYMBOLS, d_spec))
    base = rng.integers(BASE_DUR_RANGE[0], BASE_DUR_RANGE[1] + 1, size=N_SYMBOLS)
    return templates.astype(np.float64), base.astype(np.int64)


def make_profiles(seed: int, d_spec: int):
    """Seven emotion profiles; 0 is neutral, and tilts are pairwise separated."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    profiles = [EmotionProfile(0, np.zeros(d_spec), 1.0, 1.0, 0)]
    for e in range(1, N_EMOTIONS):
        for _ in range(100):
            tilt = rng.normal(0.0, TILT_SIGMA, size=d_spec)
            if all(np.linalg.norm(tilt - p.tilt) >= MIN_TILT_SEPARATION for p in profiles):
                break
        else:
            raise ContractError("could not draw separated emotion tilts")
        profiles.append(EmotionProfile(
            e, tilt,
            gain=float(rng.uniform(*GAIN_RANGE)),
            tempo=float(rng.uniform(*TEMPO_RANGE)),
            band_shift=int(rng.integers(0, BAND_SHIFT_MAX + 1))))
    return profiles


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def render_utterance(text, profile: EmotionProfile, templates: np.ndarray,
                     base_durations: np.ndarray, prosody_seed: int,
                     forced_factors=None):
    """Render one utterance; returns (features (d_spec, T), durations, pauses).

    Local prosody comes from ``prosody_seed``: per-symbol duration multiplier
    U[0.7, 1.4], energy multiplier U[0.8, 1.25], and with probability 0.15 a
    4-8 frame pause after the symbol (internal slots only). Symbol durations
    are base * emotion tempo * local multiplier, rounded half-up, floored at
    4 frames. Adjacent segments get a linear 2-frame crossfade that leaves
    the duration bookkeeping exact. ``forced_factors`` (dur_mults, energies,
    pauses) bypasses the random draws for oracle tests.
    """
    for s in text:
        if not 1 <= s < N_SYMBOLS:
            raise ContractError(f"invalid text symbol {s}")
    rng = np.random.default_rng(np.random.SeedSequence([int(prosody_seed)]))
    k = len(text)
    if forced_factors is None:
        dur_mults, energies, pauses = [], [], []
        for i in range(k):
            dur_mults.append(float(rng.uniform(*DUR_MULT_RANGE)))
            energies.append(float(rng.uniform(*ENERGY_RANGE)))
            if i < k - 1 and rng.random() < PAUSE_PROB:
                pauses.append([i, int(rng.integers(PAUSE_FRAMES_RANGE[0],
                                                   PAUSE_FRAMES_RANGE[1] + 1))])
    else:
        dur_mults, energies, pauses = forced_factors
        pauses = [list(p) for p in pauses]

    durations = [max(MIN_SYMBOL_FRAMES,
                     _round_half_up(base_durations[s] * profile.tempo * dur_mults[i]))
                 for i, s in enumerate(text)]

    pause_after = {slot: frames for slot, frames in pauses}
    segments = []  # (base frame vector, n_frames)
    for i, s in enumerate(text):
        segments.append((profile.transform_template(templates[s], energies[i]), durations[i]))
        if i in pause_after:
            segments.append((profile.transform_template(templates[SILENCE]), pause_after[i]))

    total = sum(n for _, n in segments)
    frames = np.empty((total, len(templates[0])), dtype=np.float64)
    pos = 0
    starts = []
    for vec, n in segments:
        starts.append(pos)
        frames[pos:pos + n] = vec
        pos += n
    # Linear 2-frame crossfade at every internal boundary (segments are >= 4
    # frames so the two touched frames never collide).
    for b, start in enumerate(starts[1:], start=1):
        prev_vec = segments[b - 1][0]
        next_vec = segments[b][0]
        frames[start - 1] = (2.0 / 3.0) * prev_vec + (1.0 / 3.0) * next_vec
        frames[start] = (1.0 / 3.0) * prev_vec + (2.0 / 3.0) * next_vec
    frames += rng.normal(0.0, NOISE_SIGMA, size=frames.shape)
    return frames.T.astype(np.float32), durations, pauses


def split_for(record_id: int, group_id: int | None) -> str:
    """80/10/10 split by id hash; parallel groups hash as a unit."""
    key = f"g{group_id}" if group_id is not None else f"u{record_id}"
    bucket = zlib.crc32(key.encode()) % 10
    return "train" if bucket < 8 else ("val" if bucket == 8 else "test")


# ---------------------------------------------------------------------------
# Whole-corpus generation
# ---------------------------------------------------------------------------


def emotion_counts(n: int, neutral_frac: float):
    """floor(neutral_frac * n) neutral; the rest split evenly over the six
    non-neutral emotions with the remainder going to the lowest ids."""
    counts = [0] * N_EMOTIONS
    counts[0] = int(math.floor(neutral_frac * n))
    rest = n - counts[0]
    base, extra = divmod(rest, 6)
    for e in range(1, N_EMOTIONS):
        counts[e] = base + (1 if e <= extra else 0)
    return counts


def generate_corpus(cfg: GenConfig, out_dir: str) -> Corpus:
    cfg.validate()
    n = cfg.n_utterances
    templates, base_durations = make_templates(cfg.seed, cfg.d_spec)
    profiles = make_profiles(cfg.seed, cfg.d_spec)
    counts = emotion_counts(n, cfg.neutral_frac)
    n_groups = math.ceil(cfg.parallel_frac * n / N_EMOTIONS)
    if any(counts[e] < n_groups for e in range(N_EMOTIONS)):
        raise ContractError(
            f"parallel_frac {cfg.parallel_frac} needs {n_groups} records of every emotion "
            f"but counts are {counts}")

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))

    def draw_text():
        # No immediately repeated symbol: adjacent identical templates would
        # make the forced-alignment boundary unidentifiable (any split of the
        # merged run has equal cost), breaking exact self-alignment.
        length = int(rng.integers(TEXT_LEN_RANGE[0], TEXT_LEN_RANGE[1] + 1))
        text = [int(rng.integers(1, N_SYMBOLS))]
        while len(text) < length:
            s = int(rng.integers(1, N_SYMBOLS))
            if s != text[-1]:
                text.append(s)
        return text

    plan = []  # (text, emotion, group)
    for g in range(n_groups):
        text = draw_text()
        for e in range(N_EMOTIONS):
            plan.append((text, e, g))
    singles = []
    for e in range(N_EMOTIONS):
        singles.extend([e] * (counts[e] - n_groups))
    rng.shuffle(singles)
    for e in singles:
        plan.append((draw_text(), int(e), None))

    records = []
    for rid, (text, emotion, group) in enumerate(plan):
        prosody_seed = int(rng.integers(0, 2 ** 62))
        features, durations, pauses = render_utterance(
            text, profiles[emotion], templates, base_durations, prosody_seed)
        records.append(UtteranceRecord(
            id=rid, text=list(text), emotion=emotion, durations=durations,
            pauses=pauses, parallel_group=group, split=split_for(rid, group),
            prosody_seed=prosody_seed, features=features))

    _write_corpus(out_dir, cfg, profiles, templates, base_durations, records)
    return load_corpus(out_dir)


def _write_corpus(out_dir, cfg, profiles, templates, base_durations, records):
    feat_dir = os.path.join(out_dir, "feat")
    os.makedirs(feat_dir, exist_ok=True)

    with open(os.path.join(out_dir, "templates.f32"), "wb") as fh:
        fh.write(struct.pack("<II", N_SYMBOLS, cfg.d_spec))
        fh.write(templates.astype("<f4").tobytes())

    profile_doc = {
        "version": CORPUS_VERSION,
        "tool_version": _tool_version(),
        "config": cfg.to_dict(),
        "profiles": [{"id": p.id, "tilt": [float(v) for v in p.tilt], "gain": p.gain,
                      "tempo": p.tempo, "band_shift": p.band_shift} for p in profiles],
        "symbols": {"count": N_SYMBOLS, "silence_id": SILENCE,
                    "base_durations": [int(b) for b in base_durations]},
    }
    with open(os.path.join(out_dir, "profiles.json"), "w", encoding="utf-8") as fh:
        json.dump(profile_doc, fh, sort_keys=True, indent=1)
        fh.write("\n")

    with open(os.path.join(out_dir, "manifest.jsonl"), "w", encoding="utf-8") as fh:
        for rec in records:
            rel = f"feat/{rec.id}.f32"
            raw = _feature_bytes(rec.features)
            with open(os.path.join(out_dir, rel), "wb") as ffh:
                ffh.write(raw)
            fh.write(json.dumps({
                "id": rec.id, "text": rec.text, "emotion": rec.emotion,
                "durations": rec.durations, "pauses": rec.pauses,
                "parallel_group": rec.parallel_group, "split": rec.split,
                "prosody_seed": rec.prosody_seed, "file": rel,
                "crc32": zlib.crc32(raw) & 0xFFFFFFFF,
            }, sort_keys=True) + "\n")


def _feature_bytes(features: np.ndarray) -> bytes:
    d_spec, t = features.shape
    return struct.pack("<II", t, d_spec) + np.ascontiguousarray(features.T, dtype="<f4").tobytes()


def _parse_feature_bytes(raw: bytes, rid) -> np.ndarray:
    if len(raw) < 8:
        raise CorpusError(f"record {rid}: feature file truncated")
    t, d_spec = struct.unpack("<II", raw[:8])
    body = raw[8:]
    if len(body) != 4 * t * d_spec:
        raise CorpusError(f"record {rid}: feature payload is {len(body)} bytes, "
                          f"expected {4 * t * d_spec}")
    return np.frombuffer(body, dtype="<f4").reshape(t, d_spec).T.copy()


def _tool_version() -> str:
    from . import __version__
    return __version__


def load_corpus(directory: str) -> Corpus:
    """Load and validate a corpus directory; raises CorpusError naming the
    offending record on any checksum, shape, or bookkeeping mismatch."""
    prof_path = os.path.join(directory, "profiles.json")
    if not os.path.exists(prof_path):
        raise CorpusError(f"{directory}: profiles.json missing")
    with open(prof_path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != CORPUS_VERSION:
        raise CorpusVersionError(
            f"{directory}: corpus version {doc.get('version')!r} unsupported "
            f"(expected {CORPUS_VERSION})")
    cfg = doc["config"]
    d_spec = cfg["d_spec"]
    profiles = [EmotionProfile(p["id"], np.asarray(p["tilt"], dtype=np.float64),
                               p["gain"], p["tempo"], p["band_shift"])
                for p in sorted(doc["profiles"], key=lambda p: p["id"])]
    base_durations = np.asarray(doc["symbols"]["base_durations"], dtype=np.int64)

    with open(os.path.join(directory, "templates.f32"), "rb") as fh:
        count, td = struct.unpack("<II", fh.read(8))
        if count != N_SYMBOLS or td != d_spec:
            raise CorpusError(f"templates.f32 header ({count}, {td}) does not match "
                              f"config d_spec {d_spec}")
        templates = np.frombuffer(fh.read(), dtype="<f4").reshape(count, td).astype(np.float64)

    records = []
    with open(os.path.join(directory, "manifest.jsonl"), "r", encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            rid = row["id"]
            path = os.path.join(directory, row["file"])
            try:
                with open(path, "rb") as ffh:
                    raw = ffh.read()
            except OSError as e:
                raise CorpusError(f"record {rid}: cannot read {row['file']}: {e}") from e
            if (zlib.crc32(raw) & 0xFFFFFFFF) != row["crc32"]:
                raise CorpusError(f"record {rid}: feature checksum mismatch")
            features = _parse_feature_bytes(raw, rid)
            rec = UtteranceRecord(
                id=rid, text=list(row["text"]), emotion=row["emotion"],
                durations=list(row["durations"]), pauses=[list(p) for p in row["pauses"]],
                parallel_group=row["parallel_group"], split=row["split"],
                prosody_seed=row["prosody_seed"], features=features)
            if features.shape[0] != d_spec:
                raise CorpusError(f"record {rid}: {features.shape[0]} channels, expected {d_spec}")
            if rec.total_frames != features.shape[1]:
                raise CorpusError(
                    f"record {rid}: durations+pauses cover {rec.total_frames} frames "
                    f"but features have {features.shape[1]}")
            if len(rec.durations) != len(rec.text):
                raise CorpusError(f"record {rid}: {len(rec.durations)} durations for "
                                  f"{len(rec.text)} symbols")
            records.append(rec)

    corpus = Corpus(directory=directory, records=records, profiles=profiles,
                    templates=templates, base_durations=base_durations,
                    d_spec=d_spec, frame_shift_ms=cfg["frame_shift_ms"],
                    gen_config=cfg)
    _validate_groups(corpus)
    return corpus


def _validate_groups(corpus: Corpus):
    for gid, members in corpus.parallel_groups().items():
        if len(members) != N_EMOTIONS:
            raise CorpusError(f"parallel group {gid} has {len(members)} members, expected 7")
        if len({m.emotion for m in members}) != N_EMOTIONS:
            raise CorpusError(f"parallel group {gid} has duplicate emotions")
        texts = {tuple(m.text) for m in members}
        if len(texts) != 1:
            raise CorpusError(f"parallel group {gid} mixes different texts")
        splits = {m.split for m in members}
        if len(splits) != 1:
            raise CorpusError(f"parallel group {gid} straddles splits {sorted(splits)}")
