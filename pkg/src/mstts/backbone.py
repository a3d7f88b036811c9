"""Compact encoder-decoder backbone: text encoder, feature assembly,
autoregressive decoder with reduction factor, stop prediction, and the
emotion classifier sitting on the global style vector.

The decoder is deliberately small (prenet -> additive attention -> single
GRU -> projection); the style pathway is where the interesting modeling
lives, and a compact backbone keeps desk-scale training honest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers
from .config import ModelConfig
from .errors import ContractError, EmptyInputError, InvalidShapeError


class TextEncoder:
    """Embedding followed by one bidirectional GRU; output width d_p."""

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        self.emb = layers.Embedding(cfg.vocab, cfg.d_p, rng, dtype)
        half = cfg.d_p // 2
        self.gru_fwd = layers.GRUCell(cfg.d_p, half, rng, dtype)
        self.gru_bwd = layers.GRUCell(cfg.d_p, half, rng, dtype)

    def __call__(self, ids) -> ad.Tensor:
        x = self.emb(ids)
        states, _ = layers.bigru_sequence(self.gru_fwd, self.gru_bwd, x)
        return states  # (d_p, T_p) with T_p == len(ids)

    def named_modules(self, prefix: str):
        return [(f"{prefix}.embedding", self.emb),
                (f"{prefix}.gru_fwd", self.gru_fwd),
                (f"{prefix}.gru_bwd", self.gru_bwd)]


def broadcast_gse(gse: ad.Tensor, t_p: int) -> ad.Tensor:
    """Repeat the global style column t_p times along the time axis."""
    if t_p < 1:
        raise EmptyInputError(f"t_p must be positive, got {t_p}")
    return ad.broadcast_repeat(gse, axis=1, n=t_p) if t_p > 1 else gse


def assemble(parts) -> ad.Tensor:
    """Feature-axis concat of equal-length sequences, in the given fixed order."""
    lengths = {p.shape[1] for p in parts}
    if len(lengths) != 1:
        raise InvalidShapeError(f"assemble: sequence lengths differ: {sorted(lengths)}")
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)


@dataclass
class DecodeResult:
    frames: ad.Tensor            # (d_spec, r * steps)
    stop_logits: ad.Tensor       # (1, steps)
    alignment: np.ndarray        # (steps, T_p), row-stochastic
    completed: bool              # free-run only: stopped before the step cap
    padded_len: int              # teacher-forced only: target length after padding


DEC_ATTN_V_GAIN = 6.0
DEC_ATTN_MEM_GAIN = 3.0


class Decoder:
    """Autoregressive decoder emitting ``reduction_r`` frames per step."""

    def __init__(self, mem_width: int, cfg: ModelConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.mem_width = mem_width
        d = cfg.d_spec
        self.prenet0 = layers.Linear(d, cfg.prenet[0], rng, dtype=dtype)
        self.prenet1 = layers.Linear(cfg.prenet[0], cfg.prenet[1], rng, dtype=dtype)
        self.attn_mem = layers.Linear(mem_width, cfg.attn_width, rng, bias=False, dtype=dtype)
        self.attn_query = layers.Linear(cfg.dec_hidden, cfg.attn_width, rng, dtype=dtype)
        self.attn_v = layers.Linear(cfg.attn_width, 1, rng, bias=False, dtype=dtype)
        # Same symmetry-breaking story as the reference attention: at Xavier
        # scale the additive scores are too flat for the softmax to ever
        # localize at this data scale, and a uniform decoder attention cannot
        # track its position at synthesis time.
        self.attn_v.weight.data *= DEC_ATTN_V_GAIN
        self.attn_mem.weight.data *= DEC_ATTN_MEM_GAIN
        self.gru = layers.GRUCell(cfg.prenet[1] + mem_width, cfg.dec_hidden, rng, dtype)
        self.frame_proj = layers.Linear(cfg.dec_hidden + mem_width, cfg.reduction_r * d,
                                        rng, dtype=dtype)
        self.stop_proj = layers.Linear(cfg.dec_hidden + mem_width, 1, rng, dtype=dtype)

    def _prenet(self, frame: ad.Tensor) -> ad.Tensor:
        return ad.relu(self.prenet1.cols(ad.relu(self.prenet0.cols(frame))))

    def _step(self, prev_frame, h, memory, processed_mem, t_p):
        p = self._prenet(prev_frame)
        q = self.attn_query.cols(h)
        scores = self.attn_v.cols(ad.tanh(ad.add(
            processed_mem, ad.broadcast_repeat(q, 1, t_p) if t_p > 1 else q)))
        attn = ad.softmax(scores, axis=1)                       # (1, T_p)
        context = ad.matmul(memory, ad.transpose(attn))         # (mem_width, 1)
        h = self.gru.step(ad.concat([p, context], axis=0), h)
        out = ad.concat([h, context], axis=0)
        group = self.frame_proj.cols(out)                       # (r * d_spec, 1)
        frames = ad.concat(ad.split(group, [self.cfg.d_spec] * self.cfg.reduction_r, axis=0),
                           axis=1)                              # (d_spec, r)
        stop = self.stop_proj.cols(out)                         # (1, 1)
        return frames, stop, attn, h

    def teacher_forced(self, memory: ad.Tensor, target: np.ndarray) -> DecodeResult:
        """Decode with ground-truth previous frames; the target is padded to a
        multiple of the reduction factor by repeating its last frame."""
        if target is None:
            raise ContractError("teacher-forced decoding requires a target")
        r = self.cfg.reduction_r
        d, t_real = target.shape
        if t_real == 0:
            raise EmptyInputError("teacher-forced target has zero frames")
        pad = (-t_real) % r
        padded = np.concatenate([target, np.repeat(target[:, -1:], pad, axis=1)], axis=1) \
            if pad else target
        steps = padded.shape[1] // r
        t_p = memory.shape[1]
        processed_mem = self.attn_mem.cols(memory)
        h = self.gru.initial_state(memory.data.dtype)
        prev = ad.Tensor(np.zeros((d, 1), dtype=memory.data.dtype))
        frames, stops, aligns = [], [], []
        for i in range(steps):
            fr, stop, attn, h = self._step(prev, h, memory, processed_mem, t_p)
            frames.append(fr)
            stops.append(stop)
            aligns.append(attn.data[0].copy())
            if i + 1 < steps:
                prev = ad.Tensor(np.ascontiguousarray(padded[:, (i + 1) * r - 1:(i + 1) * r]))
        return DecodeResult(
            frames=ad.concat(frames, axis=1) if steps > 1 else frames[0],
            stop_logits=ad.concat(stops, axis=1) if steps > 1 else stops[0],
            alignment=np.stack(aligns), completed=True, padded_len=padded.shape[1])

    def free_run(self, memory: ad.Tensor, max_steps: int | None = None) -> DecodeResult:
        """Decode conditioned on own predictions until the stop gate fires
        (sigmoid > 0.5) or the step cap is hit, which flags the result
        incomplete."""
        cap = max_steps if max_steps is not None else self.cfg.max_decoder_steps
        t_p = memory.shape[1]
        d = self.cfg.d_spec
        with ad.no_grad():
            processed_mem = self.attn_mem.cols(memory)
            h = self.gru.initial_state(memory.data.dtype)
            prev = ad.Tensor(np.zeros((d, 1), dtype=memory.data.dtype))
            frames, stops, aligns = [], [], []
            completed = False
            for _ in range(cap):
                fr, stop, attn, h = self._step(prev, h, memory, processed_mem, t_p)
                frames.append(fr)
                stops.append(stop)
                aligns.append(attn.data[0].copy())
                if 1.0 / (1.0 + np.exp(-stop.item())) > 0.5:
                    completed = True
                    break
                prev = ad.Tensor(np.ascontiguousarray(fr.data[:, -1:]))
        return DecodeResult(
            frames=ad.concat(frames, axis=1) if len(frames) > 1 else frames[0],
            stop_logits=ad.concat(stops, axis=1) if len(stops) > 1 else stops[0],
            alignment=np.stack(aligns), completed=completed, padded_len=0)


class EmotionClassifier:
    """Two linear layers over the global style vector."""

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        self.l0 = layers.Linear(cfg.d_g, cfg.cls_hidden, rng, dtype=dtype)
        self.l1 = layers.Linear(cfg.cls_hidden, cfg.n_emotions, rng, dtype=dtype)

    def __call__(self, gse: ad.Tensor) -> ad.Tensor:
        return self.l1.cols(ad.relu(self.l0.cols(gse)))  # (n_emotions, 1)

    def named_modules(self, prefix: str):
        return [(f"{prefix}.0", self.l0), (f"{prefix}.1", self.l1)]
