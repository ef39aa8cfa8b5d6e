"""Diagnostic: why does pretrain stall? Decompose loss, watch attention."""
import numpy as np

from adaptivescan import detector, losses
from adaptivescan.autodiff import ops
from adaptivescan.autodiff.tensor import Tensor
from adaptivescan.autodiff.tensor import Tape, backward
from adaptivescan.autodiff.optim import Adam
from adaptivescan.harness import RunConfig, build_pipeline, camera_view, set_requires_grad
from adaptivescan.harness.model import visible_ground_truth, query_position_codes
from adaptivescan.harness.cli import build_sequences
from adaptivescan.voxelizer import voxelize

run = RunConfig()
pipe = build_pipeline(run, seed=run.train_seed)
seqs = build_sequences(run, "train")
rng = np.random.default_rng(run.train_seed + 7)

set_requires_grad(pipe.det, True)
opt = Adam(pipe.det, lr=run.pretrain_lr if hasattr(run, "pretrain_lr") else 4e-3)

def forward(frame, sink=None):
    cam = camera_view(run, frame, rng)[None]
    vt = voxelize(frame.points, pipe.voxel_cfg)
    bev = detector.extract_lidar_bev(Tensor(vt.features), vt, pipe.det)
    fmap = detector.fuse(bev, ops.constant(cam), pipe.det, pipe.voxel_cfg)
    qin = ops.add(pipe.det["query_embed"], ops.constant(query_position_codes(pipe)))
    layers = detector.decode(qin, fmap, pipe.det, pipe.det_cfg, attn_sink=sink)
    outputs = detector.head_outputs(layers[-1], pipe.det, fmap)
    dets = detector.detections_from_outputs(outputs, pipe.det_cfg.n_classes)
    return outputs, dets

w = run.loss_weights()
STEPS = 1200
for step in range(STEPS):
    seq = seqs[int(rng.integers(len(seqs)))]
    frame = seq.frames[int(rng.integers(len(seq.frames)))]
    gt = visible_ground_truth(pipe, frame)
    with Tape() as tape:
        outputs, dets = forward(frame)
        assign, _ = detector.match(dets, gt, run.match_class_weight)
        loss = losses.detection_loss(outputs, gt, assign, w)
        backward(tape, loss)
    opt.step(); opt.zero_grad()

    if step % 200 == 0 or step == STEPS - 1:
        # decompose on a fixed probe frame
        pf = seqs[0].frames[6]
        pgt = visible_ground_truth(pipe, pf)
        sink = []
        outputs, dets = forward(pf, sink=sink)
        assign, _ = detector.match(dets, pgt, run.match_class_weight)
        matched = np.nonzero(np.asarray(assign) >= 0)[0]
        cerr = []
        for i in matched:
            cerr.append(np.linalg.norm(
                outputs["center"].data[i, :2] - pgt[assign[i]].center[:2]))
        ents = []
        for entry in sink:
            a = entry["cross"].data
            ents.append(float(-(a * np.log(a + 1e-12)).sum(axis=-1).mean()))
        refs = pipe.det["refs_raw"].data
        lo = np.asarray(pipe.voxel_cfg.extent_min[:2]); hi = np.asarray(pipe.voxel_cfg.extent_max[:2])
        r = lo + (hi - lo) / (1 + np.exp(-refs))
        gtc = np.stack([b.center[:2] for b in pgt]) if pgt else np.zeros((0, 2))
        dmin = [np.min(np.linalg.norm(r - c, axis=1)) for c in gtc]
        wo = np.linalg.norm(pipe.det["l0_cross_wo"].data)
        off = outputs["center"].data[:, :2] - r
        print(f"step {step:4d} loss {loss.data:7.4f} matched {len(matched)}"
              f" cerr {np.mean(cerr) if cerr else -1:6.2f}"
              f" entropy {['%.2f' % e for e in ents]} (unif {np.log(1024):.2f})"
              f" nearest-ref {np.mean(dmin) if dmin else -1:5.2f}"
              f" |wo| {wo:.3f} |off| {np.abs(off).mean():5.2f}", flush=True)

# --- generalization + metric-definition check -------------------------------
from adaptivescan.harness import evaluate
eval_seqs = build_sequences(run, "eval")[:6]
rows, agg = evaluate(pipe, eval_seqs, "next-frame", "full")
print("eval on held-out:", {k: round(float(v), 3) for k, v in agg.items()
                            if k in ("recall2", "recall4", "center_err", "class_acc", "n_gt")})

# matched error split into BEV vs z on one held-out frame
pf = eval_seqs[0].frames[6]
pgt = visible_ground_truth(pipe, pf)
outputs, dets = forward(pf)
assign, _ = detector.match(dets, pgt, run.match_class_weight)
m = np.nonzero(np.asarray(assign) >= 0)[0]
d2 = [np.linalg.norm(outputs["center"].data[i, :2] - pgt[assign[i]].center[:2]) for i in m]
dz = [abs(outputs["center"].data[i, 2] - pgt[assign[i]].center[2]) for i in m]
print(f"held-out frame: matched {len(m)} bev_err {np.mean(d2):.2f} z_err {np.mean(dz):.2f}")
