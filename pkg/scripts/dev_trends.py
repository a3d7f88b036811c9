"""Dev driver: train all four variants on the eval corpus and print the
criteria-5/6/7 trend numbers. Used to calibrate the acceptance budget."""

import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor

from mstts import corpus as cs
from mstts import evaluation as ev
from mstts import training as tr
from mstts.config import ModelConfig, RunConfig, TrainConfig

PILOT_MODEL = dict(d_spec=32, d_p=32, conv_channels=[16, 16, 32, 32, 48, 48],
                   gru_hidden=32, d_g=32, d_l=6, d_a=8, dec_hidden=64,
                   prenet=[32, 16], attn_width=32, cls_hidden=32,
                   max_decoder_steps=160)
VARIANTS = ("proposed", "base-g", "base-l", "base-fs")


def main():
    s1 = int(sys.argv[1]) if len(sys.argv) > 1 else 2500
    s2 = int(sys.argv[2]) if len(sys.argv) > 2 else 1250
    data = sys.argv[3] if len(sys.argv) > 3 else "/tmp/eval_corpus"
    out_json = sys.argv[4] if len(sys.argv) > 4 else "/tmp/trends.json"

    run_cfg = RunConfig(model=ModelConfig(**PILOT_MODEL),
                        train=TrainConfig(stage1_steps=s1, stage2_steps=s2,
                                          batch_size=8, seed=17))
    t0 = time.time()
    ckpts = {v: f"/tmp/variant_{v}.ckpt" for v in VARIANTS}
    with ProcessPoolExecutor(max_workers=2) as pool:
        futs = {v: pool.submit(tr.train_variant_job, v, data, run_cfg.to_dict(),
                               ckpts[v], 17) for v in VARIANTS}
        for v, f in futs.items():
            f.result()
            print(f"[{time.time()-t0:7.0f}s] trained {v}", flush=True)

    corpus = cs.load_corpus(data)
    probe = ev.train_probe(corpus, seed=1)
    models = {v: tr.load_checkpoint(ckpts[v])[0] for v in VARIANTS}

    reports = {}
    for v in VARIANTS:
        reports[v] = ev.run_parallel_transfer(models[v], corpus, probe, split="test")
        ov = reports[v].aggregates["overall"]
        print(f"[{time.time()-t0:7.0f}s] {v:9s}",
              json.dumps({k: round(s['mean'], 4) for k, s in ov.items()}), flush=True)

    gran = ev.run_granularity_study(models["proposed"], models["base-fs"], corpus,
                                    split="test", max_utterances=60)
    print("granularity:", {v: {k: round(gran[v][k], 4) for k in
                               ("completion_rate", "mean_entropy", "mean_coverage")}
                           for v in ("proposed", "base-fs")}, flush=True)

    multi = ev.run_multi_reference_study(models["proposed"], corpus, probe)
    print("multi-ref:", {k: (round(v, 4) if isinstance(v, float) else v)
                         for k, v in multi.items() if k != "rows"}, flush=True)

    def overall(v):
        return {k: s["mean"] for k, s in reports[v].aggregates["overall"].items()}

    crit = {
        "5a_gap_global_vs_base_l": overall("proposed")["global_match"] - overall("base-l")["global_match"],
        "5b_gap_duration_vs_base_g": overall("proposed")["duration_pearson"] - overall("base-g")["duration_pearson"],
        "5c_abs_gap_global_vs_base_g": abs(overall("proposed")["global_match"] - overall("base-g")["global_match"]),
        "6_completion_ok": gran["base-fs"]["completion_rate"] <= gran["proposed"]["completion_rate"],
        "6_entropy_ok": gran["base-fs"]["mean_entropy"] > gran["proposed"]["mean_entropy"],
        "7_match_rate": multi["match_rate"],
        "7_duration_margin": multi["mean_duration_pearson"] - multi["mean_distractor_pearson"],
        "wall_min": (time.time() - t0) / 60,
    }
    print("CRITERIA:", json.dumps({k: (round(v, 4) if isinstance(v, float) else v)
                                   for k, v in crit.items()}, indent=1), flush=True)
    with open(out_json, "w") as fh:
        json.dump({"criteria": crit,
                   "overall": {v: overall(v) for v in VARIANTS}}, fh, indent=1)


if __name__ == "__main__":
    main()
