import time

import numpy as np

from adaptivescan.harness import (RunConfig, build_pipeline, evaluate, pretrain,
                                  train_stage1, train_stage2, train_stage3,
                                  mask_sensing_gradient, compare_baselines)
from adaptivescan.harness.cli import build_sequences

t0 = time.time()
run = RunConfig(n_frames=8, n_train_sequences=2, n_eval_sequences=2,
                pretrain_steps=6, stage1_steps=4, stage2_steps=4, stage3_steps=4)
train_seqs = build_sequences(run, "train")
eval_seqs = build_sequences(run, "eval")
print(f"gen: {time.time()-t0:.2f}s, pts/frame {len(train_seqs[0].frames[0].points)}")

pipe = build_pipeline(run, seed=run.train_seed)
t0 = time.time()
h = pretrain(pipe, train_seqs)
print(f"pretrain 6 steps: {time.time()-t0:.2f}s, losses {[round(r['loss'],3) for r in h]}")

t0 = time.time()
h1 = train_stage1(pipe, train_seqs)
print(f"stage1 4 steps: {time.time()-t0:.2f}s, losses {[round(r['loss'],3) for r in h1]}")

t0 = time.time()
h2 = train_stage2(pipe, train_seqs)
print(f"stage2 4 steps: {time.time()-t0:.2f}s, mask {[round(r['mask_loss'],4) for r in h2]}, "
      f"leak {[r['mask_grad_from_detection'] for r in h2]}")

t0 = time.time()
h3 = train_stage3(pipe, train_seqs)
print(f"stage3 4 steps: {time.time()-t0:.2f}s, loss {[round(r['loss'],3) for r in h3]}, "
      f"sparsity {[round(r['pattern_sparsity'],3) for r in h3]}")

g_on = mask_sensing_gradient(pipe, train_seqs[0], 5, through_voxels=True)
g_off = mask_sensing_gradient(pipe, train_seqs[0], 5, through_voxels=False)
print(f"sensing grad through voxels: {g_on:.3e}, plain: {g_off:.3e}")

t0 = time.time()
rows, agg = evaluate(pipe, eval_seqs, "next-frame", "adaptive")
print(f"eval nf adaptive: {time.time()-t0:.2f}s, recall2 {agg['recall2']:.3f}, "
      f"sparsity {agg['pattern_sparsity']:.3f}, frames {agg['n_frames']}")
rows, agg = evaluate(pipe, eval_seqs, "entire-sequence", "full")
print(f"eval es full: recall2 {agg['recall2']:.3f}, energy {agg['energy_per_scan_j']}")
