"""Reference attention: align the local prosody sequence to the phonemes.

Scaled dot-product attention where the phoneme embedding sequence queries
and the local prosody embedding supplies key and value, each one half of its
feature dimension (the first half keys, the second half values — a fixed
convention recorded in checkpoints). The raw query and key widths differ, so
bias-free linear adapters project both into a shared attention width before
the dot product; the value half passes through unprojected, preserving the
half-width output.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from . import layers
from .errors import EmptyInputError, InvalidShapeError


ATTN_INIT_GAIN = 6.0


class RefAttention:
    def __init__(self, d_p: int, d_l: int, d_a: int, rng, dtype=np.float32):
        self.d_p, self.d_l, self.d_a = d_p, d_l, d_a
        self.proj_q = layers.Linear(d_p, d_a, rng, bias=False, dtype=dtype)
        self.proj_k = layers.Linear(d_l // 2, d_a, rng, bias=False, dtype=dtype)
        # Plain Xavier projections of bounded inputs leave the scaled logits
        # near zero, and the softmax never escapes uniform at desk scale; the
        # gain breaks that symmetry so an alignment can form.
        self.proj_q.weight.data *= ATTN_INIT_GAIN
        self.proj_k.weight.data *= ATTN_INIT_GAIN

    def align(self, lpe: ad.Tensor, phon: ad.Tensor):
        """Returns (aligned value sequence (d_l/2, T_p), weights (T_p, T_L))."""
        if lpe.shape[1] == 0 or phon.shape[1] == 0:
            raise EmptyInputError("reference attention requires non-empty sequences")
        if lpe.shape[0] != self.d_l:
            raise InvalidShapeError(f"lpe width {lpe.shape[0]} != configured d_l {self.d_l}")
        if phon.shape[0] != self.d_p:
            raise InvalidShapeError(f"phoneme width {phon.shape[0]} != configured d_p {self.d_p}")
        half = self.d_l // 2
        key, value = ad.split(lpe, [half, half], axis=0)
        q = self.proj_q.rows(ad.transpose(phon))        # (T_p, d_a)
        k = self.proj_k.rows(ad.transpose(key))         # (T_L, d_a)
        logits = ad.smul(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(self.d_a))
        weights = ad.softmax(logits, axis=1)            # rows sum to 1
        aligned = ad.transpose(ad.matmul(weights, ad.transpose(value)))
        return aligned, weights

    def named_modules(self, prefix: str):
        return [(f"{prefix}.proj_q", self.proj_q), (f"{prefix}.proj_k", self.proj_k)]


def attention_entropy(weights: np.ndarray) -> float:
    """Mean row entropy in nats; 0 log 0 is taken as 0."""
    w = np.asarray(weights, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(w > 0, w * np.log(w), 0.0)
    return float(-terms.sum(axis=1).mean())


def attention_coverage(weights: np.ndarray, tau: float = 0.3) -> float:
    """Fraction of key positions some query attends to with weight >= tau."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    w = np.asarray(weights, dtype=np.float64)
    return float((w.max(axis=0) >= tau).mean())
