"""Probe: pretrain with auxiliary cross-attention supervision on GT cells."""
import sys
import time

import numpy as np

from adaptivescan import detector, losses
from adaptivescan.autodiff import ops
from adaptivescan.autodiff.optim import Adam
from adaptivescan.autodiff.tensor import Tape, backward
from adaptivescan.harness import RunConfig, build_pipeline, camera_view, evaluate
from adaptivescan.harness.cli import build_sequences
from adaptivescan.harness.model import (query_position_codes, run_detector,
                                        set_requires_grad, visible_ground_truth)

AUX_W = float(sys.argv[1]) if len(sys.argv) > 1 else 1.0
DEEP = len(sys.argv) > 2 and sys.argv[2] == "deep"

run = RunConfig(n_train_sequences=48, pretrain_steps=3000)
train_seqs = build_sequences(run, "train")
eval_seqs = build_sequences(run, "eval")[:6]
pipe = build_pipeline(run, seed=run.train_seed)
rng = np.random.default_rng(run.train_seed)
set_requires_grad(pipe.det, True)
opt = Adam(pipe.det, lr=4e-3)

lo = np.asarray(pipe.voxel_cfg.extent_min[:2])
hi = np.asarray(pipe.voxel_cfg.extent_max[:2])
nx, ny, _ = pipe.voxel_cfg.shape
cell = (hi - lo) / np.array([nx, ny])

def gt_flat_cells(gt):
    c = np.stack([b.center[:2] for b in gt])
    ij = np.clip(((c - lo) / cell).astype(int), 0, [nx - 1, ny - 1])
    return ij[:, 0] * ny + ij[:, 1]

t0 = time.time()
hist = []
for step in range(run.pretrain_steps):
    seq = train_seqs[int(rng.integers(len(train_seqs)))]
    frame = seq.frames[int(rng.integers(len(seq.frames)))]
    cam = camera_view(run, frame, rng)
    gt = visible_ground_truth(pipe, frame)
    with Tape() as tape:
        sink = []
        res = run_detector(pipe, frame.points, cam, attn_sink=sink)
        assignment, _ = detector.match(res.detections, gt, run.match_class_weight)
        loss = losses.detection_loss(res.outputs, gt, assignment, pipe.weights)
        if DEEP:
            o0 = detector.head_outputs(res.layers[0], pipe.det, res.fmap)
            a0, _ = detector.match(
                detector.detections_from_outputs(o0, pipe.det_cfg.n_classes),
                gt, run.match_class_weight)
            loss = ops.scale(ops.add(
                loss, losses.detection_loss(o0, gt, a0, pipe.weights)), 0.5)
        matched = np.nonzero(np.asarray(assignment) >= 0)[0]
        if AUX_W > 0 and matched.size and gt:
            cells_idx = gt_flat_cells(gt)
            onehot = np.zeros((matched.size, nx * ny))
            for r, i in enumerate(matched):
                onehot[r, cells_idx[assignment[i]]] = 1.0
            aux_terms = []
            for entry in sink:
                rows = ops.take(entry["cross"], matched)
                p = ops.reduce_sum(ops.mul(rows, ops.constant(onehot)), axis=1)
                aux_terms.append(ops.neg(ops.reduce_mean(ops.log(p))))
            aux = ops.scale(ops.add(*aux_terms) if len(aux_terms) == 2
                            else aux_terms[0], AUX_W / len(aux_terms))
            loss = ops.add(loss, aux)
        backward(tape, loss)
    opt.step()
    opt.zero_grad()
    hist.append(float(loss.data))

print(f"aux_w {AUX_W} deep {DEEP}: {run.pretrain_steps} steps in {time.time()-t0:.0f}s")
for i in range(0, len(hist), 600):
    print(f"  steps {i:4d}+: mean loss {np.mean(hist[i:i+200]):.4f}")
rows, agg = evaluate(pipe, eval_seqs, "next-frame", "full")
print("held-out:", {k: round(float(agg[k]), 3) for k in
                    ("recall2", "recall4", "center_err", "class_acc")})
