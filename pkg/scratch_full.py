"""Full default-scale pipeline probe: pretrain -> stages 1-3 -> criterion 6/7 numbers."""
import json
import time

import numpy as np

from adaptivescan.harness import RunConfig, build_pipeline
from adaptivescan.harness.cli import build_sequences
from adaptivescan.harness.evaluation import compare_baselines, evaluate
from adaptivescan.harness.model import load_pipeline, save_pipeline
from adaptivescan.harness.training import (pretrain, train_stage1,
                                           train_stage2, train_stage3)

run = RunConfig()
print(f"config: pretrain {run.pretrain_steps} s1 {run.stage1_steps} "
      f"s2 {run.stage2_steps} s3 {run.stage3_steps}", flush=True)

t0 = time.time()
train_seqs = build_sequences(run, "train")
eval_seqs = build_sequences(run, "eval")
print(f"data: {len(train_seqs)} train / {len(eval_seqs)} eval in {time.time()-t0:.0f}s", flush=True)

pipe = build_pipeline(run, seed=run.train_seed)

t0 = time.time()
hist = pretrain(pipe, train_seqs)
losses = [h["loss"] for h in hist]
print(f"pretrain: {time.time()-t0:.0f}s  loss {np.mean(losses[:500]):.3f} -> {np.mean(losses[-500:]):.3f}", flush=True)
save_pipeline("/tmp/full_pretrain.npz", pipe, stage="pretrain")

t_stages0 = time.time()
t0 = time.time()
h1 = train_stage1(pipe, train_seqs)
l1 = [h["loss"] for h in h1]
first = np.mean(l1[:50]); last = np.mean(l1[-50:])
print(f"stage1: {time.time()-t0:.0f}s  loss {first:.4f} -> {last:.4f} "
      f"(drop {(1-last/first)*100:.0f}%)", flush=True)
save_pipeline("/tmp/full_stage1.npz", pipe, stage="stage1")

t0 = time.time()
h2 = train_stage2(pipe, train_seqs)
print(f"stage2 keys: {sorted(h2[0].keys())}", flush=True)
m2 = [h["mask"] for h in h2]
d2 = [h["detection"] for h in h2]
k = max(len(m2) // 10, 1)
wins = [float(np.mean(m2[i:i+k])) for i in range(0, len(m2), k)]
print(f"stage2: {time.time()-t0:.0f}s  mask windows {['%.4f' % w for w in wins]}", flush=True)
print(f"stage2 detection {np.mean(d2[:k]):.3f} -> {np.mean(d2[-k:]):.3f}", flush=True)
save_pipeline("/tmp/full_stage2.npz", pipe, stage="stage2")

t0 = time.time()
h3 = train_stage3(pipe, train_seqs)
c3 = [h["loss"] for h in h3]
k3 = max(len(c3) // 10, 1)
print(f"stage3: {time.time()-t0:.0f}s  composite {np.mean(c3[:k3]):.3f} -> {np.mean(c3[-k3:]):.3f}", flush=True)
save_pipeline("/tmp/full_stage3.npz", pipe, stage="stage3")
t_stages = time.time() - t_stages0

# Ablation: stage3 from the same stage-2 checkpoint without distill/CVaR.
t0 = time.time()
pipe_ab = load_pipeline("/tmp/full_stage2.npz", run)
train_stage3(pipe_ab, train_seqs, use_distill=False, use_cvar=False)
print(f"stage3 ablation: {time.time()-t0:.0f}s", flush=True)
save_pipeline("/tmp/full_stage3_ablated.npz", pipe_ab, stage="stage3")

t_eval0 = time.time()
cmp = compare_baselines(pipe, eval_seqs, protocol="entire-sequence",
                        seed=run.eval_seed)
for name in ("adaptive", "full", "random", "oracle"):
    _, agg = cmp[name]
    print(f"{name:9s} recall2 {agg['recall2']:.3f} recall4 {agg['recall4']:.3f} "
          f"cerr {agg['center_err']:.2f} sparsity {agg['pattern_sparsity']:.3f}", flush=True)
print("sweep:", flush=True)
for level, agg in cmp["sweep"]:
    print(f"  level {level:<7g} recall2 {agg['recall2']:.3f} sparsity {agg['pattern_sparsity']:.3f}", flush=True)

pipe2 = load_pipeline("/tmp/full_stage2.npz", run)
_, agg_s2 = evaluate(pipe2, eval_seqs, "entire-sequence", "adaptive", seed=run.eval_seed)
print(f"stage2ckpt adaptive recall2 {agg_s2['recall2']:.3f} sparsity {agg_s2['pattern_sparsity']:.3f}", flush=True)
_, agg_ab = evaluate(pipe_ab, eval_seqs, "entire-sequence", "adaptive", seed=run.eval_seed)
print(f"ablated    adaptive recall2 {agg_ab['recall2']:.3f} sparsity {agg_ab['pattern_sparsity']:.3f}", flush=True)
t_eval = time.time() - t_eval0

_, agg_a = cmp["adaptive"]
_, agg_f = cmp["full"]
_, agg_r = cmp["random"]
summary = {
    "adaptive_recall2": agg_a["recall2"],
    "full_recall2": agg_f["recall2"],
    "random_recall2": agg_r["recall2"],
    "adaptive_sparsity": agg_a["pattern_sparsity"],
    "stage2_recall2": agg_s2["recall2"],
    "ablated_recall2": agg_ab["recall2"],
    "crit6a_margin": agg_a["recall2"] - agg_r["recall2"],
    "crit6b_margin": agg_f["recall2"] - agg_a["recall2"],
    "crit7_s3_vs_s2": agg_a["recall2"] - agg_s2["recall2"],
    "crit7_ablation": agg_a["recall2"] - agg_ab["recall2"],
    "t_stages_s": t_stages,
    "t_eval_s": t_eval,
}
print(json.dumps(summary, indent=2), flush=True)
