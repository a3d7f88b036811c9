"""Dev driver: pilot-scale training run + trend metrics (not shipped behavior).

Trains the proposed model on the 700-utterance pilot corpus with the pinned
schedule, then reports the quantities the acceptance gate checks, so budget
and threshold choices are grounded in a recorded run.
"""

import json
import sys
import time

import numpy as np

from mstts import corpus as cs
from mstts import evaluation as ev
from mstts import training as tr
from mstts.config import ModelConfig, RunConfig, TrainConfig
from mstts import autodiff as ad
from mstts.model import Model
from mstts.training import compute_loss

PILOT_MODEL = dict(d_spec=32, d_p=32, conv_channels=[16, 16, 32, 32, 48, 48],
                   gru_hidden=32, d_g=32, d_l=6, d_a=8, dec_hidden=64,
                   prenet=[32, 16], attn_width=32, cls_hidden=32,
                   max_decoder_steps=160)


def val_mse(model, corpus, use_gse):
    total = 0.0
    recs = corpus.split_records("val")
    for rec in recs:
        with ad.no_grad():
            fwd = model.teacher_forced(rec.text, rec.features, use_gse, "eval")
        d, t_real = rec.features.shape
        padded = np.concatenate([rec.features,
                                 np.repeat(rec.features[:, -1:],
                                           fwd.padded_len - t_real, axis=1)], axis=1)
        mask = np.zeros_like(padded)
        mask[:, :t_real] = 1
        total += float((((fwd.frames.data - padded) ** 2) * mask).sum() / (d * t_real))
    return total / len(recs)


def classifier_val_accuracy(model, corpus):
    hits, n = 0, 0
    for rec in corpus.split_records("val"):
        with ad.no_grad():
            bundle = model.ref_encoder.encode(
                ad.Tensor(rec.features), mode="eval", need_global=True, need_local=False)
            logits = model.classify(bundle.gse)
        hits += int(np.argmax(logits.data[:, 0]) == rec.emotion)
        n += 1
    return hits / n


def main():
    stage1 = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
    stage2 = int(sys.argv[2]) if len(sys.argv) > 2 else 1000
    out = sys.argv[3] if len(sys.argv) > 3 else "/tmp/pilot_metrics.json"

    t0 = time.time()
    corpus = cs.generate_corpus(cs.GenConfig(n_utterances=700, seed=7), "/tmp/pilot_corpus")
    mc = ModelConfig(**PILOT_MODEL)
    tc = TrainConfig(stage1_steps=stage1, stage2_steps=stage2, batch_size=8, seed=11)
    rc = RunConfig(model=mc, train=tc)
    model = Model(mc, "proposed", seed=11)

    mse0 = val_mse(model, corpus, use_gse=True)
    mse0_zero = val_mse(model, corpus, use_gse=False)
    print(f"[{time.time()-t0:7.1f}s] step-0 val MSE: gse={mse0:.4f} zero={mse0_zero:.4f}", flush=True)

    h1 = tr.train_stage1(model, corpus, rc)
    mse_s1 = val_mse(model, corpus, use_gse=False)
    print(f"[{time.time()-t0:7.1f}s] after stage1({stage1}): val MSE(zero-gse)={mse_s1:.4f} "
          f"ratio={mse_s1/mse0_zero:.3f}", flush=True)

    h2 = tr.train_stage2(model, corpus, rc)
    mse_s2 = val_mse(model, corpus, use_gse=True)
    cls_acc = classifier_val_accuracy(model, corpus)
    print(f"[{time.time()-t0:7.1f}s] after stage2({stage2}): val MSE(gse)={mse_s2:.4f} "
          f"ratio={mse_s2/mse0:.3f} cls_acc={cls_acc:.3f}", flush=True)

    tr.save_checkpoint(model, rc, 2, "/tmp/pilot_final.ckpt")
    probe = ev.train_probe(corpus, seed=5)
    print(f"probe val acc: {probe.val_accuracy:.3f}", flush=True)
    report = ev.run_parallel_transfer(model, corpus, probe, split="test")
    ov = report.aggregates["overall"]
    print("parallel transfer overall:", json.dumps(
        {k: round(v["mean"], 4) for k, v in ov.items()}), flush=True)

    metrics = {
        "stage1_steps": stage1, "stage2_steps": stage2,
        "mse0": mse0, "mse0_zero": mse0_zero, "mse_s1": mse_s1, "mse_s2": mse_s2,
        "cls_acc": cls_acc, "probe_acc": probe.val_accuracy,
        "overall": {k: v["mean"] for k, v in ov.items()},
        "wall_s": time.time() - t0,
        "loss_head": h1[:200], "loss_tail": h1[-200:],
    }
    with open(out, "w") as fh:
        json.dump(metrics, fh, indent=1)
    print(f"total {time.time()-t0:.0f}s; metrics -> {out}", flush=True)


if __name__ == "__main__":
    main()
