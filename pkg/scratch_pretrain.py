import time

import numpy as np

from adaptivescan.harness import RunConfig, build_pipeline, evaluate, pretrain
from adaptivescan.harness.cli import build_sequences

run = RunConfig(pretrain_steps=1500)
train_seqs = build_sequences(run, "train")
eval_seqs = build_sequences(run, "eval")[:6]

pipe = build_pipeline(run, seed=run.train_seed)
t0 = time.time()
h = pretrain(pipe, train_seqs)
losses = [r["loss"] for r in h]
w = 100
print(f"pretrain {len(h)} steps in {time.time()-t0:.1f}s")
for i in range(0, len(losses), 250):
    print(f"  steps {i:4d}..{i+w:4d}: mean loss {np.mean(losses[i:i+w]):.4f}")
print(f"  last {w}: {np.mean(losses[-w:]):.4f}")

t0 = time.time()
rows, agg = evaluate(pipe, eval_seqs, "next-frame", "full")
print(f"eval full ({time.time()-t0:.1f}s): recall2 {agg['recall2']:.3f} recall4 {agg['recall4']:.3f} "
      f"center_err {agg['center_err']:.2f} class_acc {agg['class_acc']:.3f}")
