"""Multi-scale reference encoder.

A stack of six strided 3x1 conv blocks downsamples the input feature matrix
to quasi-phoneme granularity, then two output heads read it: the global head
keeps only the final GRU state and maps it to a single style vector, the
local head maps every GRU state to a narrow per-step prosody vector. Both
heads end in tanh, so all style values live strictly inside (-1, 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers
from .config import ModelConfig
from .errors import EmptyInputError, InvalidShapeError


def downsampled_length(t_spec: int, strides) -> int:
    """Output length of the conv stack: a fold of ceil-division over strides.

    With the default strides [2, 1, 2, 1, 2, 2] this equals ceil(t_spec / 16);
    with all-ones strides (frame-scale variant) it is t_spec itself.
    """
    if t_spec < 1:
        raise EmptyInputError(f"t_spec must be positive, got {t_spec}")
    t = t_spec
    for s in strides:
        t = -(-t // s)
    return t


def granularity_ms(strides, frame_shift_ms: float) -> float:
    """Temporal granularity of the local embedding in milliseconds."""
    prod = 1
    for s in strides:
        prod *= s
    return prod * frame_shift_ms


@dataclass
class StyleBundle:
    """One reference's style readout: global vector plus local sequence."""

    gse: ad.Tensor | None  # (d_g, 1)
    lpe: ad.Tensor | None  # (d_l, T_L)
    source_frames: int


class RefEncoder:
    def __init__(self, cfg: ModelConfig, strides, rng, with_global: bool,
                 with_local: bool, dtype=np.float32):
        self.cfg = cfg
        self.strides = list(strides)
        self.with_global = with_global
        self.with_local = with_local
        chans = [cfg.d_spec] + list(cfg.conv_channels)
        self.conv = [
            layers.ConvBlock(chans[i], chans[i + 1], self.strides[i], rng, dtype)
            for i in range(6)
        ]
        d_m = cfg.conv_channels[-1]
        if with_global:
            self.global_gru = layers.GRUCell(d_m, cfg.gru_hidden, rng, dtype)
            self.global_out = layers.Linear(cfg.gru_hidden, cfg.d_g, rng, dtype=dtype)
        if with_local:
            self.local_gru = layers.GRUCell(d_m, cfg.gru_hidden, rng, dtype)
            self.local_out = layers.Linear(cfg.gru_hidden, cfg.d_l, rng, dtype=dtype)

    def conv_stack(self, x: ad.Tensor, mode: str) -> ad.Tensor:
        if x.shape[0] != self.cfg.d_spec:
            raise InvalidShapeError(
                f"reference features have {x.shape[0]} channels, expected {self.cfg.d_spec}")
        if x.shape[1] == 0:
            raise EmptyInputError("reference features have zero frames")
        h = x
        for block in self.conv:
            h = block(h, mode)
        return h

    def encode(self, x: ad.Tensor, mode: str = "eval", need_global: bool = True,
               need_local: bool = True) -> StyleBundle:
        """Extract the style bundle; both heads read the same conv-stack output."""
        t_spec = x.shape[1]
        inter = self.conv_stack(x, mode)
        gse = lpe = None
        if need_global:
            if not self.with_global:
                raise InvalidShapeError("this encoder was built without a global head")
            _, final = layers.gru_sequence(self.global_gru, inter)
            gse = ad.tanh(self.global_out.cols(final))
        if need_local:
            if not self.with_local:
                raise InvalidShapeError("this encoder was built without a local head")
            states, _ = layers.gru_sequence(self.local_gru, inter)
            lpe = ad.tanh(self.local_out.cols(states))
        return StyleBundle(gse=gse, lpe=lpe, source_frames=t_spec)

    def named_modules(self, prefix: str):
        mods = [(f"{prefix}.conv.{i}", blk) for i, blk in enumerate(self.conv)]
        if self.with_global:
            mods += [(f"{prefix}.global_head.gru", self.global_gru),
                     (f"{prefix}.global_head.out", self.global_out)]
        if self.with_local:
            mods += [(f"{prefix}.local_head.gru", self.local_gru),
                     (f"{prefix}.local_head.out", self.local_out)]
        return mods

    def named_buffers(self, prefix: str):
        for i, blk in enumerate(self.conv):
            yield f"{prefix}.conv.{i}.bn_running_mean", blk, "running_mean"
            yield f"{prefix}.conv.{i}.bn_running_var", blk, "running_var"
