"""Command-line entry point.

Subcommands: gen-data, train, transfer, eval, grad-check. Every command is
deterministic given its flags and seeds, and every artifact embeds the
resolved configuration and tool version (binary formats get a JSON sidecar).

Exit codes: 0 ok, 2 usage, 3 I/O, 4 contract violation, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from . import corpus as corpus_mod
from . import evaluation
from . import training
from .config import VARIANTS, RunConfig
from .errors import (CheckpointError, ContentMismatchError, ContractError,
                     CorpusError, MsttsError, NumericsError, ProbeUnfitError,
                     ProvenanceError, UnknownModuleError, VocabularyError)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_CONTRACT = 4
EXIT_NUMERIC = 5


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mstts",
        description="Multi-scale speech style modeling at desk scale")
    parser.add_argument("--version", action="version", version=f"mstts {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic parallel emotional corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--utterances", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--neutral-frac", type=float, default=0.4667)
    p.add_argument("--parallel-frac", type=float, default=0.15)
    p.add_argument("--d-spec", type=int, default=32)

    p = sub.add_parser("train", help="train a model variant")
    p.add_argument("--config", help="RunConfig JSON; omitted keys take defaults")
    p.add_argument("--data", required=True)
    p.add_argument("--stage", choices=["1", "2", "both"], required=True)
    p.add_argument("--variant", choices=list(VARIANTS), default="proposed")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="stage-1 checkpoint (required for --stage 2)")
    p.add_argument("--seed", type=int, help="overrides the config's train seed")

    p = sub.add_parser("transfer", help="synthesize with reference speech per scale")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--text", required=True, help="space-separated symbol ids")
    p.add_argument("--local-ref", type=int, required=True, help="record id")
    p.add_argument("--global-ref", type=int, help="record id (defaults to --local-ref)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output path prefix")

    p = sub.add_parser("eval", help="run the parallel-transfer evaluation")
    for variant in VARIANTS:
        p.add_argument(f"--ckpt-{variant}", help=f"checkpoint for the {variant} variant")
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--max-groups", type=int)
    p.add_argument("--jobs", type=int, default=1)

    sub.add_parser("grad-check", help="run the float64 finite-difference suite")
    return parser


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = corpus_mod.GenConfig(
        n_utterances=args.utterances, seed=args.seed, neutral_frac=args.neutral_frac,
        parallel_frac=args.parallel_frac, d_spec=args.d_spec)
    try:
        cfg.validate()
    except ContractError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    corpus_mod.generate_corpus(cfg, args.out)
    print(f"wrote corpus ({args.utterances} utterances) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    run_cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.seed is not None:
        run_cfg.train.seed = args.seed
    run_cfg.validate()
    corpus = corpus_mod.load_corpus(args.data)
    if corpus.d_spec != run_cfg.model.d_spec:
        raise ContractError(f"corpus d_spec {corpus.d_spec} != model d_spec "
                            f"{run_cfg.model.d_spec}")

    single_stage = training.expected_final_stage(args.variant) == 1
    if args.stage in ("2", "both") and single_stage:
        if args.variant == "base-l":
            raise ProvenanceError("variant base-l has no global head; train with --stage 1")
        raise ProvenanceError(f"variant {args.variant} trains in a single stage; "
                              "train with --stage 1")

    from .model import Model

    if args.stage == "2":
        if not args.resume:
            raise ContractError("--stage 2 requires --resume with a stage-1 checkpoint")
        model, loaded_cfg, header = training.load_checkpoint(args.resume, expect_stage=1)
        if header["variant"] != args.variant:
            raise ProvenanceError(f"checkpoint variant {header['variant']} != --variant "
                                  f"{args.variant}")
        run_cfg = loaded_cfg
        if args.seed is not None:
            run_cfg.train.seed = args.seed
        training.train_stage2(model, corpus, run_cfg, log_path=args.out + ".train.jsonl")
        training.save_checkpoint(model, run_cfg, 2, args.out)
    else:
        model = Model(run_cfg.model, args.variant, seed=run_cfg.train.seed)
        training.train_stage1(model, corpus, run_cfg, log_path=args.out + ".train.jsonl")
        if args.stage == "1":
            training.save_checkpoint(model, run_cfg, 1, args.out)
        else:  # both
            training.save_checkpoint(model, run_cfg, 1, args.out + ".stage1")
            training.train_stage2(model, corpus, run_cfg,
                                  log_path=args.out + ".train2.jsonl")
            training.save_checkpoint(model, run_cfg, 2, args.out)
    print(f"wrote checkpoint to {args.out}")
    return EXIT_OK


def write_pgm(path, weights: np.ndarray) -> None:
    """8-bit binary PGM; pixel = round(255 * weight), rows = queries."""
    h, w = weights.shape
    data = np.clip(np.round(255.0 * weights), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def write_alignment_csv(path, weights: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t_p,t_l,weight\n")
        for i in range(weights.shape[0]):
            for j in range(weights.shape[1]):
                fh.write(f"{i},{j},{weights[i, j]!r}\n")


def cmd_transfer(args) -> int:
    peek = training.read_checkpoint_header(args.ckpt)
    model, run_cfg, header = training.load_checkpoint(
        args.ckpt, expect_stage=training.expected_final_stage(peek["variant"]))
    corpus = corpus_mod.load_corpus(args.data)
    records = {r.id: r for r in corpus.records}
    if args.local_ref not in records:
        raise CorpusError(f"record id {args.local_ref} not in corpus")
    local = records[args.local_ref]
    global_ref = local
    if args.global_ref is not None:
        if args.global_ref not in records:
            raise CorpusError(f"record id {args.global_ref} not in corpus")
        global_ref = records[args.global_ref]

    text = [int(tok) for tok in args.text.split()]
    if text != list(local.text):
        raise ContentMismatchError(
            f"input text {text} does not match local reference text {local.text}")
    synth = model.synthesize(text, local.features, global_ref.features)

    d_spec, t_out = synth.features.shape
    with open(args.out + ".f32", "wb") as fh:
        fh.write(corpus_mod._feature_bytes(synth.features))
    write_alignment_csv(args.out + ".decattn.csv", synth.dec_alignment)
    outputs = [args.out + ".f32", args.out + ".decattn.csv"]
    if synth.ref_alignment is not None:
        write_alignment_csv(args.out + ".refattn.csv", synth.ref_alignment)
        write_pgm(args.out + ".refattn.pgm", synth.ref_alignment)
        outputs += [args.out + ".refattn.csv", args.out + ".refattn.pgm"]
    meta = {
        "tool_version": __version__, "config": run_cfg.to_dict(),
        "variant": model.variant, "stage": header["stage"],
        "text": text, "local_ref": local.id, "global_ref": global_ref.id,
        "completed": synth.completed, "out_frames": t_out,
    }
    with open(args.out + ".json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"wrote {', '.join(outputs)}")
    if not synth.completed:
        print("warning: decode hit the step cap (incomplete)", file=sys.stderr)
    return EXIT_OK


def _eval_one(variant: str, ckpt_path: str, data_dir: str, split: str,
              max_groups, probe_seed: int) -> dict:
    corpus = corpus_mod.load_corpus(data_dir)
    model, run_cfg, header = training.load_checkpoint(
        ckpt_path, expect_stage=training.expected_final_stage(variant))
    if header["variant"] != variant:
        raise ProvenanceError(f"{ckpt_path}: checkpoint variant {header['variant']} "
                              f"given as --ckpt-{variant}")
    probe = evaluation.train_probe(corpus, seed=probe_seed)
    report = evaluation.run_parallel_transfer(model, corpus, probe, split=split,
                                              max_groups=max_groups)
    return {"report": report.to_dict(), "config": run_cfg.to_dict(),
            "probe_val_accuracy": probe.val_accuracy}


def cmd_eval(args) -> int:
    jobs = []
    for variant in VARIANTS:
        path = getattr(args, f"ckpt_{variant}".replace("-", "_"))
        if path:
            if not os.path.exists(path):
                print(f"error: checkpoint not found: {path}", file=sys.stderr)
                return EXIT_IO
            jobs.append((variant, path))
    if not jobs:
        print("error: no checkpoints given", file=sys.stderr)
        return EXIT_USAGE

    probe_seed = 1
    results = {}
    if args.jobs > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = {variant: pool.submit(_eval_one, variant, path, args.data,
                                            args.split, args.max_groups, probe_seed)
                       for variant, path in jobs}
            results = {variant: fut.result() for variant, fut in futures.items()}
    else:
        for variant, path in jobs:
            results[variant] = _eval_one(variant, path, args.data, args.split,
                                         args.max_groups, probe_seed)

    report = {
        "tool_version": __version__,
        "data": args.data, "split": args.split,
        "probe_val_accuracy": next(iter(results.values()))["probe_val_accuracy"],
        "variants": {v: r["report"] for v, r in results.items()},
        "configs": {v: r["config"] for v, r in results.items()},
    }
    if "proposed" in results and "base-fs" in results:
        corpus = corpus_mod.load_corpus(args.data)
        model_p = training.load_checkpoint(dict(jobs)["proposed"])[0]
        model_fs = training.load_checkpoint(dict(jobs)["base-fs"])[0]
        report["granularity"] = evaluation.run_granularity_study(
            model_p, model_fs, corpus, split=args.split)
    with open(args.report, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"wrote report to {args.report}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck_suite import run_gradient_suite

    failures = 0

    def on_result(result):
        nonlocal failures
        status = "PASS" if result.passed else "FAIL"
        print(f"{status} {result.name} seed={result.seed} "
              f"max_rel_err={result.report.worst:.3e}")
        if not result.passed:
            failures += 1
            for entry in result.report.failures():
                print(f"     {entry.name}: {entry.max_rel_err:.3e}")

    run_gradient_suite(on_result=on_result)
    if failures:
        print(f"{failures} gradient checks failed", file=sys.stderr)
        return EXIT_NUMERIC
    print("all gradient checks passed")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "transfer": cmd_transfer,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericsError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContentMismatchError, ProvenanceError, ContractError, CorpusError,
            CheckpointError, UnknownModuleError, VocabularyError, ProbeUnfitError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    except MsttsError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
