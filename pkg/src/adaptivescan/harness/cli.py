"""Command-line entry point.

Subcommands follow the pipeline order:

    generate -> pretrain -> train --stage 1|2|3 -> eval | compare

plus `energy-report` and `gradcheck`. All outputs land under --out (or the
ADAPTIVESCAN_OUT environment variable, or ./runs).
"""

import argparse
import csv
import json
import pathlib
import sys

import numpy as np

from ..scenesim import attach_scans, generate_scenario, load_sequence, save_sequence
from .config import (ENERGY_MODELS, energy_report, load_config, output_root,
                     save_config)
from .evaluation import (compare_baselines, evaluate, write_aggregate_csv,
                         write_metrics_csv)
from .gradchecks import TOLERANCE, run_all
from .model import build_pipeline, load_pipeline, save_pipeline
from .training import (pretrain, train_stage1, train_stage2, train_stage3,
                       write_history)

STAGE_INPUT = {1: "pretrain", 2: "stage1", 3: "stage2"}


def build_sequences(run, which):
    """Deterministic scenario batch; eval sequences use a disjoint seed
    stream so they are held out from training by construction."""
    if which == "train":
        n, base = run.n_train_sequences, run.data_seed
    elif which == "eval":
        n, base = run.n_eval_sequences, run.eval_seed + 50_000
    else:
        raise ValueError(f"unknown sequence split {which!r}")
    cfg = run.scenario_config()
    out = []
    for i in range(n):
        seq = generate_scenario(cfg, seed=base + i)
        attach_scans(seq, cfg, seed=base + i)
        out.append(seq)
    return out


def load_or_build_sequences(run, which, root):
    """Prefer sequences materialized by `generate`; fall back to rebuilding
    them in memory, which is byte-equivalent because generation is seeded."""
    data_dir = pathlib.Path(root) / "data" / which
    manifest = data_dir / "manifest.json"
    if manifest.exists():
        names = json.loads(manifest.read_text())["files"]
        return [load_sequence(data_dir / name) for name in names]
    return build_sequences(run, which)


def _checkpoint_path(root, name):
    return pathlib.Path(root) / "checkpoints" / f"{name}.ckpt"


def cmd_generate(args, run, root):
    for which in ("train", "eval"):
        data_dir = pathlib.Path(root) / "data" / which
        data_dir.mkdir(parents=True, exist_ok=True)
        names = []
        for i, seq in enumerate(build_sequences(run, which)):
            name = f"seq_{i:03d}.bin"
            save_sequence(data_dir / name, seq)
            names.append(name)
        (data_dir / "manifest.json").write_text(
            json.dumps({"files": names}, indent=2) + "\n")
        print(f"wrote {len(names)} {which} sequences to {data_dir}")
    save_config(pathlib.Path(root) / "config.yaml", run)
    return 0


def cmd_pretrain(args, run, root):
    seqs = load_or_build_sequences(run, "train", root)
    pipeline = build_pipeline(run, seed=run.train_seed)
    history = pretrain(pipeline, seqs)
    write_history(pathlib.Path(root) / "logs" / "pretrain.csv", history)
    path = _checkpoint_path(root, "pretrain")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_pipeline(path, pipeline, stage="pretrain")
    print(f"pretrain: {len(history)} steps, "
          f"final loss {history[-1]['loss']:.4f}, saved {path}")
    return 0


def cmd_train(args, run, root):
    previous = _checkpoint_path(root, STAGE_INPUT[args.stage])
    if not previous.exists():
        print(f"error: stage {args.stage} needs {previous}; "
              f"run the earlier phases first", file=sys.stderr)
        return 2
    pipeline = load_pipeline(previous, run)
    seqs = load_or_build_sequences(run, "train", root)
    stage_fn = {1: train_stage1, 2: train_stage2, 3: train_stage3}[args.stage]
    history = stage_fn(pipeline, seqs)
    write_history(pathlib.Path(root) / "logs" / f"stage{args.stage}.csv", history)
    path = _checkpoint_path(root, f"stage{args.stage}")
    save_pipeline(path, pipeline, stage=f"stage{args.stage}")
    key = "loss" if "loss" in history[-1] else "mask_loss"
    print(f"stage {args.stage}: {len(history)} steps, "
          f"final {key} {history[-1][key]:.4f}, saved {path}")
    return 0


def cmd_eval(args, run, root):
    ckpt = pathlib.Path(args.checkpoint) if args.checkpoint \
        else _checkpoint_path(root, "stage3")
    if not ckpt.exists():
        print(f"error: checkpoint {ckpt} not found", file=sys.stderr)
        return 2
    pipeline = load_pipeline(ckpt, run)
    seqs = load_or_build_sequences(run, "eval", root)
    rows, agg = evaluate(pipeline, seqs, args.protocol, args.condition,
                         level_override=args.level,
                         target_sparsity=args.target_sparsity)
    stem = f"{args.protocol.replace('-', '_')}_{args.condition}"
    metrics_dir = pathlib.Path(root) / "metrics"
    write_metrics_csv(metrics_dir / f"{stem}.csv", rows)
    write_aggregate_csv(metrics_dir / f"{stem}_aggregate.csv", [agg])
    print(json.dumps(agg, indent=2))
    return 0


def cmd_compare(args, run, root):
    ckpt = pathlib.Path(args.checkpoint) if args.checkpoint \
        else _checkpoint_path(root, "stage3")
    if not ckpt.exists():
        print(f"error: checkpoint {ckpt} not found", file=sys.stderr)
        return 2
    pipeline = load_pipeline(ckpt, run)
    seqs = load_or_build_sequences(run, "eval", root)
    report = compare_baselines(pipeline, seqs, protocol=args.protocol)
    out_dir = pathlib.Path(root) / "compare"
    write_aggregate_csv(out_dir / "conditions.csv",
                        list(report["conditions"].values()))
    write_aggregate_csv(out_dir / "sweep.csv", report["sweep"])
    print(json.dumps({"conditions": report["conditions"],
                      "sweep": report["sweep"]}, indent=2))
    return 0


def cmd_energy(args, run, root):
    if args.metrics:
        with open(args.metrics, newline="") as fh:
            series = [float(row["pattern_sparsity"])
                      for row in csv.DictReader(fh)]
    elif args.sparsity:
        series = args.sparsity
    else:
        print("error: pass --sparsity values or --metrics CSV", file=sys.stderr)
        return 2
    model = ENERGY_MODELS[args.model or run.energy_model]
    report = energy_report(series, model)
    report["joules_per_scan"] = report["joules_per_scan"].tolist()
    print(json.dumps(report, indent=2))
    return 0


def cmd_gradcheck(args, run, root):
    results = run_all(instances=args.instances)
    failures = 0
    for name in sorted(results):
        err = results[name]
        status = "ok" if err <= TOLERANCE else "FAIL"
        failures += status == "FAIL"
        print(f"{status:4s} {name:30s} {err:.3e}")
    print(f"{len(results)} checks, {failures} failures, "
          f"tolerance {TOLERANCE:.0e}")
    return 1 if failures else 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="adaptivescan",
        description="Adaptive LiDAR scanning pipeline at desk scale.")
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--out", help="output root (default: $ADAPTIVESCAN_OUT or ./runs)")
    parser.add_argument("--seed", type=int,
                        help="override data/train/eval seeds with N, N+1, N+2")
    parser.add_argument("--threads", type=int,
                        help="parallel sequence workers during evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", help="materialize train/eval scenario files")
    sub.add_parser("pretrain", help="train the detector on full scans")
    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out sequences")
    p.add_argument("--protocol", choices=("next-frame", "entire-sequence"),
                   default="next-frame")
    p.add_argument("--condition", default="adaptive")
    p.add_argument("--checkpoint")
    p.add_argument("--level", type=float,
                   help="force a single sparse-block rate")
    p.add_argument("--target-sparsity", type=float,
                   help="pattern sparsity for the random condition")
    p = sub.add_parser("compare", help="adaptive vs full/random/oracle baselines")
    p.add_argument("--protocol", choices=("next-frame", "entire-sequence"),
                   default="entire-sequence")
    p.add_argument("--checkpoint")
    p = sub.add_parser("energy-report", help="joules from a sparsity series")
    p.add_argument("--sparsity", type=float, nargs="+")
    p.add_argument("--metrics", help="frame metrics CSV to read sparsity from")
    p.add_argument("--model", choices=sorted(ENERGY_MODELS))
    p = sub.add_parser("gradcheck", help="run the full gradient verification")
    p.add_argument("--instances", type=int, default=20)

    args = parser.parse_args(argv)
    overrides = {}
    if args.seed is not None:
        overrides = {"data_seed": args.seed, "train_seed": args.seed + 1,
                     "eval_seed": args.seed + 2}
    if args.threads is not None:
        overrides["threads"] = args.threads
    run = load_config(args.config, overrides)
    root = output_root(args.out)
    root.mkdir(parents=True, exist_ok=True)

    handler = {
        "generate": cmd_generate,
        "pretrain": cmd_pretrain,
        "train": cmd_train,
        "eval": cmd_eval,
        "compare": cmd_compare,
        "energy-report": cmd_energy,
        "gradcheck": cmd_gradcheck,
    }[args.command]
    return handler(args, run, root)


if __name__ == "__main__":
    sys.exit(main())
