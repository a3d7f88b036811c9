"""Full model assembly for the proposed system and its three ablations.

Variant topology:
  proposed  — global + local style paths; memory [phon; aligned_lpe; gse_seq]
  base-g    — global path only (no reference attention, no local head);
              memory [phon; gse_seq]
  base-l    — local path only (no global head, no classifier);
              memory [phon; aligned_lpe]
  base-fs   — proposed topology with all conv strides forced to 1
              (frame-scale local features)

The dropped block of a baseline's memory is removed, not zero-filled, so
each variant's parameter inventory matches its definition exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers
from .backbone import Decoder, EmotionClassifier, TextEncoder, assemble, broadcast_gse
from .config import VARIANTS, ModelConfig
from .errors import ContractError
from .refattention import RefAttention
from .refencoder import RefEncoder


def variant_has_global(variant: str) -> bool:
    return variant in ("proposed", "base-g", "base-fs")


def variant_has_local(variant: str) -> bool:
    return variant in ("proposed", "base-l", "base-fs")


def variant_strides(variant: str, cfg: ModelConfig):
    return [1] * 6 if variant == "base-fs" else list(cfg.strides)


def memory_width(variant: str, cfg: ModelConfig) -> int:
    w = cfg.d_p
    if variant_has_local(variant):
        w += cfg.d_l // 2
    if variant_has_global(variant):
        w += cfg.d_g
    return w


@dataclass
class ForwardResult:
    frames: ad.Tensor
    stop_logits: ad.Tensor
    gse: ad.Tensor | None
    ref_alignment: np.ndarray | None   # (T_p, T_L)
    dec_alignment: np.ndarray          # (steps, T_p)
    padded_len: int


@dataclass
class SynthesisResult:
    features: np.ndarray               # (d_spec, T_out)
    ref_alignment: np.ndarray | None
    dec_alignment: np.ndarray
    completed: bool


class Model:
    def __init__(self, cfg: ModelConfig, variant: str, seed: int, dtype=np.float32):
        if variant not in VARIANTS:
            raise ContractError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
        cfg.validate()
        self.cfg = cfg
        self.variant = variant
        self.seed = seed
        self.dtype = dtype
        rng = np.random.default_rng(np.random.SeedSequence(seed))

        self.text_encoder = TextEncoder(cfg, rng, dtype)
        self.ref_encoder = RefEncoder(cfg, variant_strides(variant, cfg), rng,
                                      with_global=variant_has_global(variant),
                                      with_local=variant_has_local(variant), dtype=dtype)
        self.ref_attention = (RefAttention(cfg.d_p, cfg.d_l, cfg.d_a, rng, dtype)
                              if variant_has_local(variant) else None)
        self.decoder = Decoder(memory_width(variant, cfg), cfg, rng, dtype)
        self.classifier = (EmotionClassifier(cfg, rng, dtype)
                           if variant_has_global(variant) else None)

    # -- parameter plumbing --------------------------------------------------

    def named_modules(self):
        mods = list(self.text_encoder.named_modules("text_encoder"))
        mods += self.ref_encoder.named_modules("ref_encoder")
        if self.ref_attention is not None:
            mods += self.ref_attention.named_modules("ref_attention")
        mods += [("decoder.prenet.0", self.decoder.prenet0),
                 ("decoder.prenet.1", self.decoder.prenet1),
                 ("decoder.attn_mem", self.decoder.attn_mem),
                 ("decoder.attn_query", self.decoder.attn_query),
                 ("decoder.attn_v", self.decoder.attn_v),
                 ("decoder.gru", self.decoder.gru),
                 ("decoder.frame_proj", self.decoder.frame_proj),
                 ("decoder.stop_proj", self.decoder.stop_proj)]
        if self.classifier is not None:
            mods += self.classifier.named_modules("classifier")
        return mods

    def parameters(self) -> dict:
        return layers.collect_params(self.named_modules())

    def named_buffers(self):
        """(name, owner object, attribute) triples for non-trainable state."""
        return list(self.ref_encoder.named_buffers("ref_encoder"))

    # -- forward paths ---------------------------------------------------------

    def _style(self, ref: ad.Tensor, bn_mode: str, use_gse: bool,
               global_ref: ad.Tensor | None = None):
        """Style readout; an optional distinct global reference overrides the
        source of the global vector (multi-reference transfer)."""
        need_g = use_gse and variant_has_global(self.variant)
        need_l = self.ref_attention is not None
        gse = lpe = None
        if need_l or (need_g and global_ref is None):
            bundle = self.ref_encoder.encode(ref, mode=bn_mode,
                                             need_global=need_g and global_ref is None,
                                             need_local=need_l)
            gse, lpe = bundle.gse, bundle.lpe
        if need_g and global_ref is not None:
            gse = self.ref_encoder.encode(global_ref, mode=bn_mode,
                                          need_global=True, need_local=False).gse
        return gse, lpe

    def _memory(self, phon: ad.Tensor, lpe: ad.Tensor | None, gse: ad.Tensor | None):
        t_p = phon.shape[1]
        parts = [phon]
        ref_align = None
        if self.ref_attention is not None:
            aligned, weights = self.ref_attention.align(lpe, phon)
            parts.append(aligned)
            ref_align = weights.data.copy()
        if variant_has_global(self.variant):
            if gse is None:
                # Stage-1 stand-in: a zero block keeps the decoder width stable
                # while the global head stays out of the graph.
                gse = ad.Tensor(np.zeros((self.cfg.d_g, 1), dtype=self.dtype))
            parts.append(broadcast_gse(gse, t_p))
        return assemble(parts), ref_align

    def teacher_forced(self, text_ids, ref_feat: np.ndarray, use_gse: bool,
                       bn_mode: str) -> ForwardResult:
        """Training-path forward: the reference is exactly the target speech."""
        ref = ad.Tensor(np.asarray(ref_feat, dtype=self.dtype))
        phon = self.text_encoder(text_ids)
        gse, lpe = self._style(ref, bn_mode, use_gse)
        memory, ref_align = self._memory(phon, lpe, gse)
        dec = self.decoder.teacher_forced(memory, np.asarray(ref_feat, dtype=self.dtype))
        return ForwardResult(frames=dec.frames, stop_logits=dec.stop_logits, gse=gse,
                             ref_alignment=ref_align, dec_alignment=dec.alignment,
                             padded_len=dec.padded_len)

    def synthesize(self, text_ids, local_ref: np.ndarray,
                   global_ref: np.ndarray | None = None, zero_gse: bool = False,
                   max_steps: int | None = None) -> SynthesisResult:
        """Free-run synthesis. ``global_ref`` defaults to the local reference;
        ``zero_gse`` reproduces the stage-1 contract (global path inert)."""
        with ad.no_grad():
            local = ad.Tensor(np.asarray(local_ref, dtype=self.dtype))
            g_ref = None
            if global_ref is not None and global_ref is not local_ref:
                g_ref = ad.Tensor(np.asarray(global_ref, dtype=self.dtype))
            phon = self.text_encoder(text_ids)
            gse, lpe = self._style(local, "eval", use_gse=not zero_gse, global_ref=g_ref)
            memory, ref_align = self._memory(phon, lpe, gse)
            dec = self.decoder.free_run(memory, max_steps)
        return SynthesisResult(features=dec.frames.data.copy(), ref_alignment=ref_align,
                               dec_alignment=dec.alignment, completed=dec.completed)

    def classify(self, gse: ad.Tensor) -> ad.Tensor:
        if self.classifier is None:
            raise ContractError(f"variant {self.variant!r} has no emotion classifier")
        return self.classifier(gse)
