"""Objective evaluation: emotion probe, local-prosody metrics, and the
transfer studies that reproduce the ablation trends.

Subjective listening scores are replaced by three objective proxies:
  * global style  — does an emotion probe trained on raw corpus features
                    recognize the reference's emotion in the synthesized
                    output?
  * local prosody — Pearson correlation between per-symbol durations
                    recovered by monotonic forced alignment and the
                    reference's ground-truth durations, plus pause-position
                    F1.
  * robustness    — decode completion rate and reference-attention
                    entropy/coverage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import (EMOTION_NAMES, SILENCE, Corpus, EmotionProfile,
                     UtteranceRecord, render_utterance)
from .errors import ContractError, ContentMismatchError, ProbeUnfitError
from .model import Model
from .refattention import attention_coverage, attention_entropy

PAUSE_DETECT_MIN_FRAMES = 3


def teacher_forced_val_mse(model: Model, corpus: Corpus, split: str = "val",
                           use_gse: bool = True) -> float:
    """Masked teacher-forced reconstruction MSE averaged over a split."""
    from . import autodiff as ad

    records = corpus.split_records(split)
    if not records:
        raise ContractError(f"no records in split {split!r}")
    total = 0.0
    for rec in records:
        with ad.no_grad():
            fwd = model.teacher_forced(rec.text, rec.features, use_gse, "eval")
        d, t_real = rec.features.shape
        pad = fwd.padded_len - t_real
        padded = np.concatenate(
            [rec.features, np.repeat(rec.features[:, -1:], pad, axis=1)], axis=1)
        mask = np.zeros_like(padded)
        mask[:, :t_real] = 1
        total += float((((fwd.frames.data - padded) ** 2) * mask).sum() / (d * t_real))
    return total / len(records)


def gse_classifier_accuracy(model: Model, corpus: Corpus, split: str = "val") -> float:
    """Accuracy of the model's own emotion classifier on encoder GSE vectors."""
    from . import autodiff as ad

    records = corpus.split_records(split)
    hits = 0
    for rec in records:
        with ad.no_grad():
            bundle = model.ref_encoder.encode(ad.Tensor(rec.features), mode="eval",
                                              need_global=True, need_local=False)
            logits = model.classify(bundle.gse)
        hits += int(np.argmax(logits.data[:, 0]) == rec.emotion)
    return hits / len(records)


# ---------------------------------------------------------------------------
# Emotion probe (global-style judge)
# ---------------------------------------------------------------------------


@dataclass
class EmotionProbe:
    """Mean+std pooling over frames, standardization, then softmax regression.

    Implemented directly in numpy, independent of the autodiff engine it is
    used to judge.
    """

    weight: np.ndarray   # (n_classes, 2 * d_spec)
    bias: np.ndarray     # (n_classes,)
    mu: np.ndarray
    sigma: np.ndarray
    val_accuracy: float

    @staticmethod
    def pool(features: np.ndarray) -> np.ndarray:
        return np.concatenate([features.mean(axis=1), features.std(axis=1)])

    def _logits(self, pooled: np.ndarray) -> np.ndarray:
        z = (pooled - self.mu) / self.sigma
        return self.weight @ z + self.bias

    def predict(self, features: np.ndarray) -> int:
        return int(np.argmax(self._logits(self.pool(features))))


def train_probe(corpus: Corpus, seed: int = 0, iters: int = 400, lr: float = 0.5,
                min_val_accuracy: float = 0.95) -> EmotionProbe:
    """Fit the probe on the train split's raw features; validate on val."""
    train = corpus.split_records("train")
    val = corpus.split_records("val")
    if not train or not val:
        raise ContractError("probe needs non-empty train and val splits")
    x = np.stack([EmotionProbe.pool(r.features) for r in train]).astype(np.float64)
    y = np.array([r.emotion for r in train])
    mu = x.mean(axis=0)
    sigma = x.std(axis=0) + 1e-8
    xs = (x - mu) / sigma
    n, d = xs.shape
    k = len(EMOTION_NAMES)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0

    rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))
    w = rng.normal(0.0, 0.01, size=(k, d))
    b = np.zeros(k)
    vw = np.zeros_like(w)
    vb = np.zeros_like(b)
    for _ in range(iters):
        logits = xs @ w.T + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        gw = g.T @ xs
        gb = g.sum(axis=0)
        vw = 0.9 * vw + gw
        vb = 0.9 * vb + gb
        w -= lr * vw
        b -= lr * vb

    probe = EmotionProbe(weight=w, bias=b, mu=mu, sigma=sigma, val_accuracy=0.0)
    hits = sum(probe.predict(r.features) == r.emotion for r in val)
    probe.val_accuracy = hits / len(val)
    if probe.val_accuracy < min_val_accuracy:
        raise ProbeUnfitError(
            f"probe validation accuracy {probe.val_accuracy:.3f} below "
            f"{min_val_accuracy}; corpus or probe misconfigured")
    return probe


# ---------------------------------------------------------------------------
# Forced alignment and local-prosody metrics
# ---------------------------------------------------------------------------


def forced_align(features: np.ndarray, text, profile: EmotionProfile,
                 templates: np.ndarray):
    """Monotonic DP alignment of frames to the symbol sequence, with an
    optional silence segment in every inter-symbol slot.

    Frame cost is squared distance to the symbol template transformed by the
    hypothesized emotion profile (unit energy). A silence segment, when
    entered, must emit at least two frames: a single crossfade frame between
    two symbols can land nearer the silence template than either symbol, and
    the two-frame floor keeps such one-frame leaks from stealing duration
    (real pauses are four frames or more). Returns (per-symbol frame counts,
    silence frame count per slot) or None when infeasible (fewer frames than
    symbols).
    """
    t_total = features.shape[1]
    k = len(text)
    if t_total < k:
        return None

    # State chain per slot: sym_j, then an optional silence run of at least
    # SIL_MIN_FRAMES frames (forced single-frame states followed by one
    # looping state).
    sil_min = PAUSE_DETECT_MIN_FRAMES
    kinds, owner, sym_pos = [], [], []
    for j in range(k):
        sym_pos.append(len(kinds))
        kinds.append("sym")
        owner.append(j)
        if j < k - 1:
            kinds.extend(["sil_forced"] * (sil_min - 1) + ["sil_loop"])
            owner.extend([j] * sil_min)
    n_states = len(kinds)

    sil_vec = profile.transform_template(templates[SILENCE])
    state_vecs = np.stack([profile.transform_template(templates[text[owner[s]]])
                           if kinds[s] == "sym" else sil_vec
                           for s in range(n_states)])

    stay_ok = np.array([kind in ("sym", "sil_loop") for kind in kinds])
    p1 = np.full(n_states, -1)  # chain predecessor (enters silence / leaves it)
    p2 = np.full(n_states, -1)  # symbol-to-symbol skip (no pause taken)
    for s, kind in enumerate(kinds):
        if kind == "sym" and owner[s] > 0:
            p1[s] = s - 1                    # from the previous slot's sil_loop
            p2[s] = sym_pos[owner[s] - 1]    # directly from the previous symbol
        elif kind != "sym":
            p1[s] = s - 1                    # chain: sym -> forced... -> loop
    idx = np.arange(n_states)

    frames = features.T.astype(np.float64)
    costs = ((frames[:, None, :] - state_vecs[None, :, :]) ** 2).sum(axis=2)

    inf = np.inf
    d_prev = np.full(n_states, inf)
    d_prev[0] = costs[0, 0]
    choice = np.zeros((t_total, n_states), dtype=np.int8)
    for t in range(1, t_total):
        cand = np.stack([
            np.where(stay_ok, d_prev, inf),
            np.where(p1 >= 0, d_prev[p1], inf),
            np.where(p2 >= 0, d_prev[p2], inf),
        ])
        best = cand.argmin(axis=0)
        choice[t] = best
        d_prev = cand[best, idx] + costs[t]

    state = n_states - 1  # final symbol
    if not np.isfinite(d_prev[state]):
        return None
    occupancy = np.zeros(n_states, dtype=np.int64)
    for t in range(t_total - 1, -1, -1):
        occupancy[state] += 1
        if t > 0:
            c = choice[t, state]
            if c == 1:
                state = p1[state]
            elif c == 2:
                state = p2[state]
    durations = [int(occupancy[s]) for s in range(n_states) if kinds[s] == "sym"]
    silences: dict[int, int] = {}
    for s in range(n_states):
        if kinds[s] != "sym" and occupancy[s]:
            silences[owner[s]] = silences.get(owner[s], 0) + int(occupancy[s])
    return durations, silences


def duration_pearson(pred, true) -> float:
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(true, dtype=np.float64)
    if a.std() < 1e-12 or b.std() < 1e-12:
        return 1.0 if np.allclose(a - a.mean(), b - b.mean()) else 0.0
    return float(np.corrcoef(a, b)[0, 1])


def pause_f1(pred_slots, true_slots) -> float:
    pred, true = set(pred_slots), set(true_slots)
    tp = len(pred & true)
    if not pred and not true:
        return 1.0
    if tp == 0:
        return 0.0
    precision = tp / len(pred)
    recall = tp / len(true)
    return 2 * precision * recall / (precision + recall)


@dataclass
class LocalProsodyScore:
    duration_pearson: float
    pause_f1: float
    degenerate: bool = False


def measure_local_prosody(output: np.ndarray, ref: UtteranceRecord,
                          templates: np.ndarray,
                          emotion_hypothesis: EmotionProfile) -> LocalProsodyScore:
    """Score how closely the output reproduces the reference's local prosody."""
    if output.size == 0:
        return LocalProsodyScore(0.0, 0.0, degenerate=True)
    aligned = forced_align(output, ref.text, emotion_hypothesis, templates)
    if aligned is None:
        return LocalProsodyScore(0.0, 0.0, degenerate=True)
    durations, silences = aligned
    pred_pauses = {j for j, c in silences.items() if c >= PAUSE_DETECT_MIN_FRAMES}
    return LocalProsodyScore(
        duration_pearson=duration_pearson(durations, ref.durations),
        pause_f1=pause_f1(pred_pauses, ref.pause_slots))


def output_durations(output: np.ndarray, text, profile: EmotionProfile,
                     templates: np.ndarray):
    """Recovered per-symbol durations of an output, or None if degenerate."""
    aligned = forced_align(output, text, profile, templates)
    return None if aligned is None else aligned[0]


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def _ci95(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    n = v.size
    mean = float(v.mean()) if n else 0.0
    ci = float(1.96 * v.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return {"mean": mean, "ci95": ci, "n": int(n)}


METRIC_KEYS = ("global_match", "duration_pearson", "pause_f1", "completed",
               "ref_attn_entropy", "ref_attn_coverage")


def aggregate_rows(rows) -> dict:
    """Overall plus one block per emotion, each metric as mean/ci95/n."""
    def block(selected):
        out = {}
        for key in METRIC_KEYS:
            vals = [float(r[key]) for r in selected if r.get(key) is not None]
            if vals:
                out[key] = _ci95(vals)
        return out

    agg = {"overall": block(rows)}
    for e, name in enumerate(EMOTION_NAMES):
        sub = [r for r in rows if r["emotion"] == e]
        if sub:
            agg[name] = block(sub)
    return agg


@dataclass
class TransferReport:
    variant: str
    rows: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    def finalize(self):
        self.aggregates = aggregate_rows(self.rows)
        return self

    def to_dict(self) -> dict:
        return {"variant": self.variant, "rows": self.rows, "aggregates": self.aggregates}


# ---------------------------------------------------------------------------
# Transfer studies
# ---------------------------------------------------------------------------


def _style_row(model: Model, probe: EmotionProbe, corpus: Corpus,
               ref: UtteranceRecord, synth) -> dict:
    pred = probe.predict(synth.features)
    score = measure_local_prosody(synth.features, ref, corpus.templates,
                                  corpus.profile(pred))
    row = {
        "ref_id": ref.id, "group": ref.parallel_group, "emotion": ref.emotion,
        "probe_pred": pred, "global_match": pred == ref.emotion,
        "duration_pearson": score.duration_pearson, "pause_f1": score.pause_f1,
        "degenerate": score.degenerate, "completed": synth.completed,
        "out_frames": int(synth.features.shape[1]),
    }
    if synth.ref_alignment is not None:
        row["ref_attn_entropy"] = attention_entropy(synth.ref_alignment)
        row["ref_attn_coverage"] = attention_coverage(synth.ref_alignment)
        row["t_l"] = int(synth.ref_alignment.shape[1])
    else:
        row["ref_attn_entropy"] = None
        row["ref_attn_coverage"] = None
    return row


def run_parallel_transfer(model: Model, corpus: Corpus, probe: EmotionProbe,
                          split: str = "test", max_groups: int | None = None,
                          zero_gse: bool = False) -> TransferReport:
    """Synthesize every member of each parallel group with itself as the
    reference for both scales, and judge both style scales objectively."""
    groups = corpus.parallel_groups(split)
    if not groups:
        raise ContractError(f"no parallel groups in split {split!r}")
    gids = sorted(groups)[:max_groups] if max_groups else sorted(groups)
    report = TransferReport(variant=model.variant)
    for gid in gids:
        for ref in groups[gid]:
            synth = model.synthesize(ref.text, ref.features, zero_gse=zero_gse)
            report.rows.append(_style_row(model, probe, corpus, ref, synth))
    return report.finalize()


def run_multi_reference(model: Model, corpus: Corpus, probe: EmotionProbe,
                        local_ref: UtteranceRecord, global_ref: UtteranceRecord,
                        text=None, n_distractors: int = 20,
                        distractor_seed: int = 9090) -> dict:
    """Style transfer with distinct references per scale.

    The local reference must match the input text; the global reference is
    unrestricted. The probe judges the output against the global reference's
    emotion; duration correlation is measured against the local reference and
    against freshly rendered same-text distractor prosodies.
    """
    text = list(text) if text is not None else list(local_ref.text)
    if text != list(local_ref.text):
        raise ContentMismatchError(
            f"local reference {local_ref.id} has text {local_ref.text}, input text is {text}")
    synth = model.synthesize(text, local_ref.features, global_ref.features)
    pred = probe.predict(synth.features)
    hyp = corpus.profile(pred)
    durations = output_durations(synth.features, text, hyp, corpus.templates)
    score = measure_local_prosody(synth.features, local_ref, corpus.templates, hyp)

    distractor_corrs = []
    if durations is not None:
        rng = np.random.default_rng(np.random.SeedSequence([distractor_seed, local_ref.id]))
        prof = corpus.profile(local_ref.emotion)
        for _ in range(n_distractors):
            seed = int(rng.integers(0, 2 ** 62))
            _, d_durs, _ = render_utterance(text, prof, corpus.templates,
                                            corpus.base_durations, seed)
            distractor_corrs.append(duration_pearson(durations, d_durs))

    return {
        "local_ref": local_ref.id, "global_ref": global_ref.id,
        "local_emotion": local_ref.emotion, "global_emotion": global_ref.emotion,
        "emotion": global_ref.emotion,
        "probe_pred": pred, "global_match": pred == global_ref.emotion,
        "duration_pearson": score.duration_pearson, "pause_f1": score.pause_f1,
        "degenerate": score.degenerate,
        "distractor_duration_pearson": (float(np.mean(distractor_corrs))
                                        if distractor_corrs else None),
        "completed": synth.completed,
    }


def multi_reference_pairs(corpus: Corpus, split: str = "test"):
    """Deterministic (local_ref, global_ref) pairs over a split's parallel
    groups: the global reference always has different text content and a
    different emotion than the local reference."""
    groups = corpus.parallel_groups(split)
    gids = sorted(groups)
    if len(gids) < 2:
        raise ContractError("multi-reference study needs at least two parallel groups")
    pairs = []
    for i, gid in enumerate(gids):
        local_e = i % len(EMOTION_NAMES)
        global_e = (local_e + 1 + (i % (len(EMOTION_NAMES) - 1))) % len(EMOTION_NAMES)
        members = {m.emotion: m for m in groups[gid]}
        other = {m.emotion: m for m in groups[gids[(i + 1) % len(gids)]]}
        pairs.append((members[local_e], other[global_e]))
    return pairs


def run_multi_reference_study(model: Model, corpus: Corpus, probe: EmotionProbe,
                              split: str = "test", n_distractors: int = 20,
                              max_pairs: int | None = None) -> dict:
    """Cross-emotion multi-reference transfer over deterministic pairs; the
    summary carries the match-vs-global rate and the margin between duration
    correlation against the local reference versus distractor prosodies."""
    pairs = multi_reference_pairs(corpus, split)
    if max_pairs:
        pairs = pairs[:max_pairs]
    rows = [run_multi_reference(model, corpus, probe, local, glob,
                                n_distractors=n_distractors)
            for local, glob in pairs]
    scored = [r for r in rows if r["distractor_duration_pearson"] is not None]
    return {
        "rows": rows,
        "match_rate": float(np.mean([r["global_match"] for r in rows])),
        "mean_duration_pearson": (float(np.mean([r["duration_pearson"] for r in scored]))
                                  if scored else 0.0),
        "mean_distractor_pearson": (float(np.mean([r["distractor_duration_pearson"]
                                                   for r in scored])) if scored else 0.0),
        "n": len(rows), "n_degenerate": sum(r["degenerate"] for r in rows),
    }


def run_granularity_study(model_proposed: Model, model_base_fs: Model,
                          corpus: Corpus, split: str = "test",
                          max_utterances: int | None = None) -> dict:
    """Compare decode completion and reference-attention sharpness between the
    quasi-phoneme-scale model and the frame-scale ablation on the same
    references."""
    records = sorted(corpus.split_records(split), key=lambda r: r.id)
    if max_utterances:
        records = records[:max_utterances]
    out = {}
    for label, model in (("proposed", model_proposed), ("base-fs", model_base_fs)):
        rows = []
        for rec in records:
            synth = model.synthesize(rec.text, rec.features)
            weights = synth.ref_alignment
            rows.append({
                "id": rec.id, "completed": synth.completed,
                "entropy": attention_entropy(weights),
                "coverage": attention_coverage(weights),
                "t_spec": int(rec.features.shape[1]),
                "t_l": int(weights.shape[1]),
                "key_max_profile": [float(v) for v in weights.max(axis=0)],
            })
        out[label] = {
            "rows": rows,
            "completion_rate": float(np.mean([r["completed"] for r in rows])),
            "mean_entropy": float(np.mean([r["entropy"] for r in rows])),
            "mean_coverage": float(np.mean([r["coverage"] for r in rows])),
        }
    return out
