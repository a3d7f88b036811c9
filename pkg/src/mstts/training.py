"""Two-stage joint training, losses, optimizer, and checkpoint container.

Stage 1 trains the local style path and the backbone with the global head
left out of the graph (a zero vector stands in for the global style block so
the decoder width never changes); stage 2 enables the global head and the
emotion classifier while freezing the text encoder, the reference attention,
and the reference encoder except its global head.

The baselines collapse to a single stage: base-l is exactly the stage-1
recipe (it has no global head at all), base-g trains its global path and
classifier from the start.

Optimizer: stochastic gradient descent with momentum 0.9 and global-norm
gradient clipping. Gradients are averaged over the mini-batch.
"""

from __future__ import annotations

import json
import struct
import time
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers
from .config import RunConfig, TrainConfig
from .errors import CheckpointError, ContractError, NumericsError, ProvenanceError
from .model import Model, variant_has_global, variant_has_local

CHECKPOINT_MAGIC = b"MSTTS1"
CHECKPOINT_FORMAT = 1
STAGE2_FROZEN_PREFIXES = ("text_encoder", "ref_attention", "ref_encoder.conv",
                          "ref_encoder.local_head")


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


@dataclass
class LossParts:
    total: float
    mse: float
    stop: float
    cls: float


def compute_loss(frames: ad.Tensor, stop_logits: ad.Tensor, target: np.ndarray,
                 padded_len: int, gse: ad.Tensor | None, label: int, stage: int,
                 model: Model, cfg: TrainConfig):
    """Masked reconstruction + weighted stop loss (+ classifier CE in stage 2).

    The target is padded to ``padded_len`` by repeating its last frame, and
    the padding is masked out of the reconstruction term. The stop target is
    1 on the final decoder step and 0 elsewhere, weighted to counter the
    extreme class imbalance.
    """
    d, t_real = target.shape
    dtype = frames.data.dtype
    padded = np.concatenate(
        [target, np.repeat(target[:, -1:], padded_len - t_real, axis=1)], axis=1
    ).astype(dtype) if padded_len > t_real else target.astype(dtype)
    mask = np.zeros((d, padded_len), dtype=dtype)
    mask[:, :t_real] = 1.0

    diff = ad.sub(frames, ad.Tensor(padded))
    mse = ad.smul(ad.sum_all(ad.mul(ad.mul(diff, diff), ad.Tensor(mask))),
                  1.0 / (d * t_real))

    steps = stop_logits.shape[1]
    stop_targets = np.zeros((1, steps), dtype=dtype)
    stop_targets[0, -1] = 1.0
    stop = ad.smul(ad.mean_all(ad.bce_with_logits(stop_logits, stop_targets)),
                   cfg.stop_weight)

    loss = ad.add(mse, stop)
    cls_val = 0.0
    if stage == 2:
        if gse is None:
            raise ContractError("stage-2 loss requires a global style vector")
        logp = ad.log_softmax(model.classify(gse), axis=0)
        onehot = np.zeros_like(logp.data)
        onehot[label, 0] = 1.0
        ce = ad.smul(ad.sum_all(ad.mul(logp, ad.Tensor(onehot))), -cfg.lambda_cls)
        loss = ad.add(loss, ce)
        cls_val = ce.item()
    return loss, LossParts(total=loss.item(), mse=mse.item(), stop=stop.item(), cls=cls_val)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class MomentumSGD:
    def __init__(self, params: dict, lr: float, momentum: float, grad_clip: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.grad_clip = grad_clip
        self.velocity = {n: None for n in params}

    def step(self, batch_size: int):
        """Scale accumulated gradients to a batch mean, clip by global norm,
        and update every trainable parameter."""
        live = [(n, p) for n, p in self.params.items()
                if p.trainable and p.grad is not None]
        for name, p in live:
            if not np.all(np.isfinite(p.grad)):
                raise NumericsError(f"non-finite gradient on parameter {name}")
        sq = sum(float((p.grad * p.grad).sum()) for _, p in live)
        norm = (sq ** 0.5) / batch_size
        scale = (1.0 / batch_size) * (self.grad_clip / norm if norm > self.grad_clip else 1.0)
        for name, p in live:
            g = p.grad * scale
            v = self.velocity[name]
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v
            p.data -= (self.lr * v).astype(p.data.dtype)

    def zero_grads(self):
        ad.zero_grads(self.params.values())


# ---------------------------------------------------------------------------
# Training stages
# ---------------------------------------------------------------------------


def _train_loop(model: Model, corpus, cfg: TrainConfig, steps: int, stage: int,
                use_gse: bool, bn_mode: str, log_path=None, log_every: int = 50):
    params = model.parameters()
    opt = MomentumSGD(params, cfg.lr, cfg.momentum, cfg.grad_clip)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, stage]))
    train_records = [r for r in corpus.records if r.split == "train"]
    if not train_records:
        raise ContractError("corpus has no training split")
    log = open(log_path, "w", encoding="utf-8") if log_path else None
    t0 = time.monotonic()
    history = []
    try:
        for step in range(steps):
            idx = rng.choice(len(train_records), size=cfg.batch_size, replace=False) \
                if len(train_records) >= cfg.batch_size \
                else rng.integers(0, len(train_records), size=cfg.batch_size)
            opt.zero_grads()
            parts_acc = np.zeros(4)
            for i in idx:
                rec = train_records[i]
                with ad.Tape():
                    fwd = model.teacher_forced(rec.text, rec.features, use_gse, bn_mode)
                    loss, parts = compute_loss(fwd.frames, fwd.stop_logits, rec.features,
                                               fwd.padded_len, fwd.gse, rec.emotion,
                                               stage, model, cfg)
                    if not np.isfinite(parts.total):
                        raise NumericsError(
                            f"non-finite loss at stage {stage} step {step} record {rec.id}")
                    ad.backward(loss)
                parts_acc += [parts.total, parts.mse, parts.stop, parts.cls]
            opt.step(cfg.batch_size)
            mean_parts = parts_acc / cfg.batch_size
            history.append(mean_parts[0])
            if log and (step % log_every == 0 or step == steps - 1):
                log.write(json.dumps({
                    "stage": stage, "step": step, "loss": mean_parts[0],
                    "mse": mean_parts[1], "stop": mean_parts[2], "cls": mean_parts[3],
                    "lr": cfg.lr, "wall_s": round(time.monotonic() - t0, 3),
                }, sort_keys=True) + "\n")
                log.flush()
    finally:
        if log:
            log.close()
    return history


def train_stage1(model: Model, corpus, run_cfg: RunConfig, log_path=None):
    """Stage 1: global head out of the graph, zero global block, no classifier.

    For the single-stage baselines this IS the full schedule: base-l has no
    global path to add later, base-g trains global head + classifier here.
    """
    cfg = run_cfg.train
    single_stage_global = model.variant == "base-g"
    history = _train_loop(
        model, corpus, cfg, cfg.stage1_steps,
        stage=2 if single_stage_global else 1,
        use_gse=single_stage_global,
        bn_mode="train", log_path=log_path)
    return history


def train_stage2(model: Model, corpus, run_cfg: RunConfig, log_path=None,
                 steps: int | None = None):
    """Stage 2: enable global head + classifier, freeze everything else that
    was trained in stage 1 (text encoder, reference attention, reference
    encoder minus its global head). Conv batchnorm runs in eval mode so the
    frozen running statistics stay untouched."""
    if not variant_has_global(model.variant):
        raise ProvenanceError(f"variant {model.variant!r} has no global head; "
                              "it trains in a single stage")
    if not variant_has_local(model.variant):
        raise ProvenanceError(f"variant {model.variant!r} trains its global path "
                              "in a single stage; there is no stage 2")
    cfg = run_cfg.train
    params = model.parameters()
    frozen = [p for p in STAGE2_FROZEN_PREFIXES
              if any(n.startswith(p) for n in params)]
    layers.set_trainable(params, frozen, False)
    try:
        history = _train_loop(model, corpus, cfg,
                              steps if steps is not None else cfg.stage2_steps,
                              stage=2, use_gse=True, bn_mode="eval", log_path=log_path)
    finally:
        layers.set_trainable(params, frozen, True)
    return history


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: Model, run_cfg: RunConfig, stage: int, path) -> None:
    """Container: magic, length-prefixed JSON header (config, stage, variant,
    parameter manifest with offsets and checksums), then little-endian f32
    payload including batchnorm running statistics."""
    entries = []
    blobs = []
    offset = 0

    def push(name, arr, trainable, kind):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "crc32": zlib.crc32(raw) & 0xFFFFFFFF,
                        "trainable": trainable, "kind": kind})
        blobs.append(raw)
        offset += len(raw)

    for name, p in model.parameters().items():
        push(name, p.data, p.trainable, "param")
    for name, owner, attr in model.named_buffers():
        push(name, getattr(owner, attr), False, "buffer")

    header = {
        "magic": CHECKPOINT_MAGIC.decode(), "format": CHECKPOINT_FORMAT,
        "variant": model.variant, "stage": stage, "seed": model.seed,
        "memory_width": model.decoder.mem_width,
        "lpe_key_half": "first",
        "config": run_cfg.to_dict(), "manifest": entries,
    }
    raw_header = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(raw_header)))
        fh.write(raw_header)
        for b in blobs:
            fh.write(b)


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(6)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(hlen).decode())


def load_checkpoint(path, expect_stage: int | None = None):
    """Rebuild the model from a checkpoint; byte-exact including batchnorm
    statistics. Checksums are verified per tensor and failures name the
    parameter."""
    with open(path, "rb") as fh:
        magic = fh.read(6)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        payload = fh.read()
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {header.get('format')}")
    if expect_stage is not None and header["stage"] != expect_stage:
        raise ProvenanceError(
            f"{path}: checkpoint is stage {header['stage']}, expected stage {expect_stage}")

    run_cfg = RunConfig.from_dict(header["config"])
    model = Model(run_cfg.model, header["variant"], header["seed"])
    params = model.parameters()
    buffers = {name: (owner, attr) for name, owner, attr in model.named_buffers()}

    for entry in header["manifest"]:
        name, shape = entry["name"], tuple(entry["shape"])
        n_bytes = int(np.prod(shape)) * 4 if shape else 4
        raw = payload[entry["offset"]:entry["offset"] + n_bytes]
        if len(raw) != n_bytes or (zlib.crc32(raw) & 0xFFFFFFFF) != entry["crc32"]:
            raise CheckpointError(f"{path}: checksum mismatch on {name}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        if entry["kind"] == "param":
            if name not in params:
                raise CheckpointError(f"{path}: unknown parameter {name}")
            params[name].data = arr
            params[name].trainable = entry["trainable"]
            params[name].needs_grad = entry["trainable"]
        else:
            if name not in buffers:
                raise CheckpointError(f"{path}: unknown buffer {name}")
            owner, attr = buffers[name]
            setattr(owner, attr, arr)
    return model, run_cfg, header


def run_full_schedule(model: Model, corpus, run_cfg: RunConfig, out_path=None,
                      log_prefix=None):
    """Train a variant through its whole schedule: two stages for the
    two-scale variants, the single combined-budget stage for the mono-scale
    baselines. Returns the final stage tag (and writes a checkpoint when
    ``out_path`` is given)."""
    two_stage = variant_has_global(model.variant) and variant_has_local(model.variant)
    if two_stage:
        train_stage1(model, corpus, run_cfg,
                     log_path=f"{log_prefix}.stage1.jsonl" if log_prefix else None)
        train_stage2(model, corpus, run_cfg,
                     log_path=f"{log_prefix}.stage2.jsonl" if log_prefix else None)
        stage = 2
    else:
        # Same total budget as a two-stage run, in one stage.
        combined = run_cfg.train.stage1_steps + run_cfg.train.stage2_steps
        single_cfg = RunConfig.from_dict(run_cfg.to_dict())
        single_cfg.train.stage1_steps = combined
        train_stage1(model, corpus, single_cfg,
                     log_path=f"{log_prefix}.stage1.jsonl" if log_prefix else None)
        stage = 1
    if out_path is not None:
        save_checkpoint(model, run_cfg, stage, out_path)
    return stage


def train_variant_job(variant: str, corpus_dir: str, run_cfg_dict: dict,
                      out_path: str, seed: int) -> str:
    """Process-pool entry point: load, train a variant end to end, save."""
    from . import corpus as corpus_mod

    corpus = corpus_mod.load_corpus(corpus_dir)
    run_cfg = RunConfig.from_dict(run_cfg_dict)
    run_cfg.train.seed = seed
    model = Model(run_cfg.model, variant, seed=seed)
    run_full_schedule(model, corpus, run_cfg, out_path=out_path)
    return out_path


def expected_final_stage(variant: str) -> int:
    """The stage tag a fully trained checkpoint of this variant carries.

    Only the two-scale variants have a second stage; both mono-scale
    baselines finish after their single stage.
    """
    return 2 if (variant_has_global(variant) and variant_has_local(variant)) else 1
