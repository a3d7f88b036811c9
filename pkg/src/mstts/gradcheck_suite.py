"""The repo's anti-regression oracle: float64 central-difference checks for
every layer and for the end-to-end tiny model.

Each check builds a small float64 instance of one component, runs a scalar
forward, and compares analytic gradients against central differences. The
end-to-end check drives the full teacher-forced training loss (stage-2 form)
at tiny dimensions so every pathway — conv stack, both heads, reference
attention, decoder, classifier — sits on one tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers
from .config import ModelConfig, TrainConfig
from .model import Model
from .refattention import RefAttention
from .refencoder import RefEncoder
from .training import compute_loss

TINY = dict(d_spec=4, vocab=9, d_p=8, conv_channels=[3, 3, 3, 3, 4, 4], gru_hidden=4,
            d_g=8, d_l=6, d_a=4, dec_hidden=8, prenet=[6, 4], attn_width=6,
            cls_hidden=5, max_decoder_steps=30)


@dataclass
class SuiteResult:
    name: str
    seed: int
    report: ad.GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _check_linear(rng, seed):
    lin = layers.Linear(5, 3, rng, dtype=np.float64)
    x = ad.Tensor(rng.normal(size=(4, 5)))
    return lambda: ad.mean_all(ad.tanh(lin.rows(x))), dict(lin.named())


def _check_conv_block(mode):
    def build(rng, seed):
        blk = layers.ConvBlock(3, 4, stride=2, rng=rng, dtype=np.float64)
        blk.running_mean = rng.normal(size=4) * 0.1
        blk.running_var = 1.0 + 0.2 * rng.random(4)
        x = ad.Tensor(rng.normal(size=(3, 11)))
        w = rng.normal(size=(4, 6))
        return (lambda: ad.mean_all(ad.mul(blk(x, mode), ad.Tensor(w)))), dict(blk.named())
    return build


def _check_gru(rng, seed):
    cell = layers.GRUCell(3, 4, rng, dtype=np.float64)
    xs = ad.Tensor(rng.normal(size=(3, 5)))

    def f():
        states, final = layers.gru_sequence(cell, xs)
        return ad.mean_all(ad.mul(states, states))

    return f, dict(cell.named())


def _check_embedding(rng, seed):
    emb = layers.Embedding(6, 4, rng, dtype=np.float64)
    mix = rng.normal(size=(4, 5))
    ids = rng.integers(0, 6, size=5)
    return (lambda: ad.sum_all(ad.mul(ad.tanh(emb(ids)), ad.Tensor(mix)))), dict(emb.named())


def _check_ref_attention(rng, seed):
    attn = RefAttention(4, 6, 4, rng, dtype=np.float64)
    lpe = ad.Tensor(np.tanh(rng.normal(size=(6, 5))))
    phon = ad.Tensor(rng.normal(size=(4, 7)))
    mix = rng.normal(size=(3, 7))

    def f():
        aligned, _ = attn.align(lpe, phon)
        return ad.sum_all(ad.mul(aligned, ad.Tensor(mix)))

    return f, {"proj_q.weight": attn.proj_q.weight, "proj_k.weight": attn.proj_k.weight}


def _check_ref_encoder(rng, seed):
    cfg = ModelConfig(**TINY)
    enc = RefEncoder(cfg, cfg.strides, rng, with_global=True, with_local=True,
                     dtype=np.float64)
    params = layers.collect_params(enc.named_modules("ref_encoder"))
    # Generic point: at these widths a conv channel can die across the whole
    # (short) time axis, parking its bias on the ReLU kink.
    for p in params.values():
        p.data = p.data + 0.05 * rng.normal(size=p.data.shape)
    x = ad.Tensor(rng.normal(size=(cfg.d_spec, 33)))

    def f():
        bundle = enc.encode(x, mode="eval")
        return ad.add(ad.mean_all(bundle.gse), ad.mean_all(bundle.lpe))

    return f, params


def _check_classifier(rng, seed):
    from .backbone import EmotionClassifier
    cfg = ModelConfig(**TINY)
    cls = EmotionClassifier(cfg, rng, dtype=np.float64)
    gse = ad.Tensor(np.tanh(rng.normal(size=(cfg.d_g, 1))))
    onehot = np.zeros((cfg.n_emotions, 1))
    onehot[int(rng.integers(0, cfg.n_emotions))] = 1.0

    def f():
        logp = ad.log_softmax(cls(gse), axis=0)
        return ad.smul(ad.sum_all(ad.mul(logp, ad.Tensor(onehot))), -1.0)

    return f, layers.collect_params(cls.named_modules("classifier"))


def _check_end_to_end(rng, seed):
    cfg = ModelConfig(**TINY)
    model = Model(cfg, "proposed", seed=seed, dtype=np.float64)
    # Jitter every parameter to a generic point: zero-initialized biases feed
    # ReLUs exactly at their kink (the decoder's GO frame is all zeros), where
    # central differences disagree with any one-sided subgradient.
    for p in model.parameters().values():
        p.data = p.data + 0.05 * rng.normal(size=p.data.shape)
    t_spec = 20
    target = rng.normal(size=(cfg.d_spec, t_spec))
    text = [int(v) for v in rng.integers(1, cfg.vocab, size=3)]
    train_cfg = TrainConfig()

    def f():
        fwd = model.teacher_forced(text, target, use_gse=True, bn_mode="eval")
        loss, _ = compute_loss(fwd.frames, fwd.stop_logits, target, fwd.padded_len,
                               fwd.gse, 2, 2, model, train_cfg)
        return loss

    return f, model.parameters()


CHECKS = [
    # name, builder, sampled entries per tensor, eps
    ("linear", _check_linear, 64, 1e-5),
    ("conv_block_train", _check_conv_block("train"), 64, 1e-5),
    ("conv_block_eval", _check_conv_block("eval"), 64, 1e-5),
    ("gru_5step", _check_gru, 64, 1e-5),
    ("embedding", _check_embedding, 64, 1e-5),
    ("ref_attention", _check_ref_attention, 64, 1e-5),
    ("ref_encoder_full", _check_ref_encoder, 12, 1e-5),
    ("classifier", _check_classifier, 64, 1e-5),
    ("end_to_end_tiny", _check_end_to_end, 5, 1e-5),
]


def run_gradient_suite(seeds=range(5), threshold: float = 1e-4, on_result=None):
    """Run every check for every seed; returns the list of SuiteResults."""
    import zlib

    results = []
    for name, build, max_entries, eps in CHECKS:
        for seed in seeds:
            rng = np.random.default_rng(np.random.SeedSequence(
                [seed, zlib.crc32(name.encode())]))
            f, params = build(rng, seed)
            report = ad.grad_check(f, params, eps=eps, threshold=threshold,
                                   max_entries=max_entries,
                                   rng=np.random.default_rng(seed))
            result = SuiteResult(name, seed, report)
            results.append(result)
            if on_result:
                on_result(result)
    return results
