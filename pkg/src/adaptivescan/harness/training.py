"""Training schedules.

Four phases, run in order:

1. `pretrain`     detector alone on full scans.
2. `train_stage1` query predictor against the frozen detector: detection
                  loss on predicted queries plus distillation toward the
                  teacher queries the detector produced on the full scan.
3. `train_stage2` mask generator on guidance + tail losses while the
                  detector fine-tunes on the induced sparse scans;
                  voxelization stays non-differentiable, so no sensing
                  gradient reaches the mask here.
4. `train_stage3` everything jointly through the surrogate voxelizer: the
                  straight-through mask scales retained points, so the
                  detection loss now reaches the sensing decision.
"""

import csv
import dataclasses
import pathlib

import numpy as np

from .. import detector, maskgen
from ..autodiff import ops
from ..autodiff.optim import Adam
from ..autodiff.tensor import Tape, backward
from ..losses import cvar_loss, detection_loss, distill_loss, mask_loss, composite
from ..predictor import QueryBuffer, predict_queries
from ..rangeimage import rasterize_guidance_mask, small_object_mask
from .model import (buffer_frame, camera_view, head_from_queries, predict_mask,
                    run_detector, set_requires_grad, sparse_scan,
                    visible_ground_truth)


def write_history(path, rows):
    """Training-curve CSV; floats via repr so reruns are byte-comparable."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        raise ValueError("no history rows to write")
    fields = list(rows[0].keys())
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v
                             for v in (row[f] for f in fields)])
    return path


def _pick_frame(rng, sequences, first=0):
    s = int(rng.integers(len(sequences)))
    seq = sequences[s]
    t = int(rng.integers(first, len(seq.frames)))
    return seq, t


def _grad_norm(tensors):
    total = 0.0
    for t in tensors.values():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    return float(np.sqrt(total))


# Matching during pretrain weighs geometry over class scores: the scores are
# uninformative for thousands of steps and would scramble the assignments.
_PRETRAIN_MATCH_CLASS_W = 0.25
# Width (meters) of the Gaussian cell-attention target around a GT center.
_ATTENTION_SIGMA = 2.5


def _attention_guidance(pipeline):
    """Cell-center table for building per-query attention targets."""
    lo = np.asarray(pipeline.voxel_cfg.extent_min[:2], dtype=np.float64)
    hi = np.asarray(pipeline.voxel_cfg.extent_max[:2], dtype=np.float64)
    nx, ny, _ = pipeline.voxel_cfg.shape
    cell = (hi - lo) / np.array([nx, ny], dtype=np.float64)
    rr, cc = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    centers = np.stack([rr.ravel(), cc.ravel()], axis=-1) * cell + lo + cell / 2
    return centers


def _attention_targets(cell_centers, gt_xy):
    d2 = ((cell_centers[None, :, :] - gt_xy[:, None, :]) ** 2).sum(axis=-1)
    t = np.exp(-d2 / (2.0 * _ATTENTION_SIGMA ** 2))
    return t / t.sum(axis=1, keepdims=True)


def pretrain(pipeline, sequences, steps=None, lr=None, seed=None):
    """Detector training on full scans; everything else untouched.

    Three supervision signals, all pretrain-only: detection loss on every
    decoder layer's head outputs (deep supervision), a cross-attention
    guidance term pulling each matched query's attention onto its object's
    BEV cells, and class-neutral focal weighting. Together they get the
    decoder out of the uniform-attention cold start it cannot escape on the
    detection loss alone at this scale. The learning rate follows a cosine
    from `lr` down to a tenth of it.
    """
    run = pipeline.run
    steps = run.pretrain_steps if steps is None else steps
    peak = run.pretrain_lr if lr is None else lr
    rng = np.random.default_rng(run.train_seed if seed is None else seed)
    set_requires_grad(pipeline.det, True)
    opt = Adam(pipeline.det, lr=peak)
    weights = dataclasses.replace(pipeline.weights, alpha_f=0.5)
    cell_centers = _attention_guidance(pipeline)
    aux_w = run.pretrain_aux_weight

    history = []
    for step in range(steps):
        opt.lr = peak / 10 + 0.5 * (peak - peak / 10) * (
            1 + np.cos(np.pi * step / max(steps - 1, 1)))
        seq, t = _pick_frame(rng, sequences)
        frame = seq.frames[t]
        cam = camera_view(run, frame, rng)
        gt = visible_ground_truth(pipeline, frame)
        with Tape() as tape:
            sink = []
            res = run_detector(pipeline, frame.points, cam, attn_sink=sink)
            assignment, _ = detector.match(res.detections, gt,
                                           _PRETRAIN_MATCH_CLASS_W)
            det_terms = [detection_loss(res.outputs, gt, assignment, weights)]
            for layer in res.layers[:-1]:
                outputs = detector.head_outputs(layer, pipeline.det, res.fmap)
                a, _ = detector.match(
                    detector.detections_from_outputs(outputs,
                                                     pipeline.det_cfg.n_classes),
                    gt, _PRETRAIN_MATCH_CLASS_W)
                det_terms.append(detection_loss(outputs, gt, a, weights))
            acc = det_terms[0]
            for term in det_terms[1:]:
                acc = ops.add(acc, term)
            loss = ops.scale(acc, 1.0 / len(det_terms))
            detection_part = float(loss.data)

            matched = np.nonzero(np.asarray(assignment) >= 0)[0]
            attention_part = 0.0
            if aux_w > 0 and matched.size and gt:
                gxy = np.stack([gt[assignment[i]].center[:2] for i in matched])
                targets = ops.constant(_attention_targets(cell_centers, gxy))
                ce_terms = []
                for entry in sink:
                    rows = ops.take(entry["cross"], matched)
                    ce = ops.neg(ops.reduce_sum(
                        ops.mul(ops.log(rows), targets), axis=1))
                    ce_terms.append(ops.reduce_mean(ce))
                acc = ce_terms[0]
                for term in ce_terms[1:]:
                    acc = ops.add(acc, term)
                aux = ops.scale(acc, aux_w / len(ce_terms))
                attention_part = float(aux.data)
                loss = ops.add(loss, aux)
        opt.zero_grad()
        backward(tape, loss)
        opt.step()
        history.append({"step": step, "loss": float(loss.data),
                        "detection": detection_part,
                        "attention": attention_part})
    return history


def _sequence_states(pipeline, seq, rng):
    """Full-scan frame results for a whole sequence, gradient-free."""
    states = []
    for frame in seq.frames:
        cam = camera_view(pipeline.run, frame, rng)
        res = run_detector(pipeline, frame.points, cam)
        states.append((buffer_frame(res, frame.pose),
                       visible_ground_truth(pipeline, frame)))
    return states


def _buffer_from(states, t, depth):
    buf = QueryBuffer(depth)
    for k in range(t - depth, t):
        buf.push(states[k][0])
    return buf


def train_stage1(pipeline, sequences, steps=None, lr=None, seed=None):
    """Predictor unrolling against the frozen detector.

    The detector is the teacher twice over: its full-scan queries at the
    target frame are the distillation reference, and its heads score the
    predicted queries for the detection term. Only the motion-step weights
    update; detector tensors stay frozen and bit-identical.
    """
    run = pipeline.run
    steps = run.stage1_steps if steps is None else steps
    rng = np.random.default_rng(run.train_seed + 1 if seed is None else seed)
    set_requires_grad(pipeline.det, False)
    set_requires_grad(pipeline.mask, False)
    mtm_t = pipeline.mtm.tensors()
    set_requires_grad(mtm_t, True)
    opt = Adam(mtm_t, lr=run.stage1_lr if lr is None else lr)

    # Frozen detector => full-scan query states never change; cache them.
    cached = [_sequence_states(pipeline, seq, rng) for seq in sequences]

    history = []
    depth = run.buffer_depth
    for step in range(steps):
        s = int(rng.integers(len(sequences)))
        states = cached[s]
        t = int(rng.integers(depth, len(states)))
        buf = _buffer_from(states, t, depth)
        teacher, gt = states[t]
        with Tape() as tape:
            q_layers = predict_queries(buf, pipeline.mtm)
            outputs = head_from_queries(pipeline, q_layers[-1])
            dets = detector.detections_from_outputs(outputs,
                                                    pipeline.det_cfg.n_classes)
            assignment, _ = detector.match(dets, gt, run.match_class_weight)
            l_det = detection_loss(outputs, gt, assignment, pipeline.weights)
            l_distill = distill_loss(q_layers, list(teacher.queries))
            loss = ops.add(l_det, ops.scale(l_distill, pipeline.weights.lambda1))
        opt.zero_grad()
        backward(tape, loss)
        opt.step()
        history.append({"step": step, "loss": float(loss.data),
                        "detection": float(l_det.data),
                        "distill": float(l_distill.data)})
    return history


def _mask_targets(gt, grid):
    guidance = rasterize_guidance_mask(gt, grid)
    small = small_object_mask(gt, grid)
    return guidance, small


def train_stage2(pipeline, sequences, steps=None, lr=None, seed=None):
    """Mask generator on guidance + tail losses; detector on sparse scans.

    The two updates are deliberately decoupled: the mask step's gradients
    come from the guidance objective alone, and the detector step sees the
    sampled pattern only through the points it keeps. Voxelization here is
    the plain bucketing, so no gradient can cross the sensing boundary.
    """
    run = pipeline.run
    steps = run.stage2_steps if steps is None else steps
    rng = np.random.default_rng(run.train_seed + 2 if seed is None else seed)
    set_requires_grad(pipeline.det, True)
    set_requires_grad(pipeline.mask, True)
    set_requires_grad(pipeline.mtm.tensors(), False)
    opt_mask = Adam(pipeline.mask, lr=run.stage2_lr if lr is None else lr)
    opt_det = Adam(pipeline.det, lr=run.stage2_lr if lr is None else lr)

    history = []
    depth = run.buffer_depth
    w = pipeline.weights
    for step in range(steps):
        tau = maskgen.anneal_tau(step / max(steps - 1, 1),
                                 run.tau_start, run.tau_end)
        seq, t = _pick_frame(rng, sequences, first=depth)
        frame = seq.frames[t]
        gt = visible_ground_truth(pipeline, frame)
        states = [run_detector(pipeline, f.points, camera_view(run, f, rng))
                  for f in seq.frames[t - depth:t]]
        buf = QueryBuffer(depth)
        for res, f in zip(states, seq.frames[t - depth:t]):
            buf.push(buffer_frame(res, f.pose))

        guidance, small = _mask_targets(gt, run.grid)
        with Tape() as tape_m:
            _, m = predict_mask(pipeline, buf, tau, rng)
            bd = mask_loss(m, guidance, w, small_pixels=small)
            cv = cvar_loss(bd.small_losses, w.beta)
            l_mask = ops.add(ops.scale(bd.mean, w.lambda2),
                             ops.scale(cv, w.lambda3))
        opt_mask.zero_grad()
        backward(tape_m, l_mask)
        opt_mask.step()
        opt_mask.zero_grad()

        pattern = maskgen.inference_pattern(m, run.levels, run.grid, rng)
        pts, sparsity = sparse_scan(frame, pattern, run.grid)
        cam = camera_view(run, frame, rng)
        with Tape() as tape_d:
            res = run_detector(pipeline, pts, cam)
            assignment, _ = detector.match(res.detections, gt,
                                           run.match_class_weight)
            l_det = detection_loss(res.outputs, gt, assignment, w)
        opt_det.zero_grad()
        backward(tape_d, l_det)
        # With plain voxelization the detection tape never reaches the mask
        # parameters; record the observed leak so it can be asserted on.
        leak = _grad_norm(pipeline.mask)
        opt_det.step()

        history.append({"step": step, "mask_loss": float(l_mask.data),
                        "detection": float(l_det.data), "tau": tau,
                        "pattern_sparsity": sparsity,
                        "mask_grad_from_detection": leak})
    return history


def _st_scale(m):
    """(H_B, W_B) per-block point scale: exactly one in the forward pass,
    gradient of one toward the soft full-scan probability."""
    st_full = ops.reshape(ops.take(ops.transpose(m.st, (2, 0, 1)), [0]),
                          m.hard.shape)
    return ops.add(st_full, ops.constant(1.0 - m.hard.astype(np.float64)))


def train_stage3(pipeline, sequences, steps=None, lr=None, seed=None,
                 use_distill=True, use_cvar=True):
    """Joint phase: composite objective through the surrogate voxelizer.

    Retained points are multiplied by the straight-through mask entry of
    their block (forward value exactly one), which puts the sensing decision
    on the tape. The flags drop the distillation / tail terms for ablations.
    """
    run = pipeline.run
    steps = run.stage3_steps if steps is None else steps
    rng = np.random.default_rng(run.train_seed + 3 if seed is None else seed)
    set_requires_grad(pipeline.det, True)
    set_requires_grad(pipeline.mask, True)
    set_requires_grad(pipeline.mtm.tensors(), True)
    params = dict(pipeline.det)
    params.update({f"mask_{k}": v for k, v in pipeline.mask.items()})
    params.update({f"mtm_{k}": v for k, v in pipeline.mtm.tensors().items()})
    opt = Adam(params, lr=run.stage3_lr if lr is None else lr)

    history = []
    depth = run.buffer_depth
    w = pipeline.weights
    zero = ops.constant(np.zeros(()))
    for step in range(steps):
        tau = maskgen.anneal_tau(step / max(steps - 1, 1),
                                 run.tau_start, run.tau_end)
        seq, t = _pick_frame(rng, sequences, first=depth)
        frame = seq.frames[t]
        gt = visible_ground_truth(pipeline, frame)
        buf = QueryBuffer(depth)
        for f in seq.frames[t - depth:t]:
            res = run_detector(pipeline, f.points, camera_view(run, f, rng))
            buf.push(buffer_frame(res, f.pose))
        cam = camera_view(run, frame, rng)
        teacher = run_detector(pipeline, frame.points, cam)
        teacher_stack = [l.data.copy() for l in teacher.layers]

        guidance, small = _mask_targets(gt, run.grid)
        with Tape() as tape:
            q_layers, m = predict_mask(pipeline, buf, tau, rng)
            bd = mask_loss(m, guidance, w, small_pixels=small)
            cv = cvar_loss(bd.small_losses, w.beta) if use_cvar else zero
            pattern = maskgen.inference_pattern(m, run.levels, run.grid, rng)
            pts, sparsity = sparse_scan(frame, pattern, run.grid)
            res = run_detector(pipeline, pts, cam, point_scale=_st_scale(m))
            assignment, _ = detector.match(res.detections, gt,
                                           run.match_class_weight)
            l_det = detection_loss(res.outputs, gt, assignment, w)
            l_distill = distill_loss(q_layers, teacher_stack) if use_distill else zero
            loss = composite([{"detection": l_det, "distill": l_distill,
                               "mask": bd.mean, "cvar": cv}], w)
        opt.zero_grad()
        backward(tape, loss)
        opt.step()
        history.append({"step": step, "loss": float(loss.data),
                        "detection": float(l_det.data),
                        "distill": float(l_distill.data),
                        "mask_loss": float(bd.mean.data),
                        "cvar": float(cv.data), "tau": tau,
                        "pattern_sparsity": sparsity})
    return history


def mask_sensing_gradient(pipeline, seq, t, seed=0, through_voxels=True):
    """L2 norm of d(detection loss)/d(mask parameters) for one frame.

    `through_voxels=True` reproduces the joint stage's scaled-point path and
    must see a nonzero gradient; False reproduces the isolation stage (plain
    voxelization) where the sensing boundary blocks everything.
    """
    run = pipeline.run
    rng = np.random.default_rng(seed)
    frame = seq.frames[t]
    gt = visible_ground_truth(pipeline, frame)
    set_requires_grad(pipeline.mask, True)
    buf = QueryBuffer(run.buffer_depth)
    for f in seq.frames[t - run.buffer_depth:t]:
        res = run_detector(pipeline, f.points, camera_view(run, f, rng))
        buf.push(buffer_frame(res, f.pose))
    cam = camera_view(run, frame, rng)
    for p in pipeline.mask.values():
        p.grad = None
    with Tape() as tape:
        _, m = predict_mask(pipeline, buf, run.tau_end, rng)
        pattern = maskgen.inference_pattern(m, run.levels, run.grid, rng)
        pts, _ = sparse_scan(frame, pattern, run.grid)
        scale = _st_scale(m) if through_voxels else None
        res = run_detector(pipeline, pts, cam, point_scale=scale)
        assignment, _ = detector.match(res.detections, gt, run.match_class_weight)
        l_det = detection_loss(res.outputs, gt, assignment, pipeline.weights)
    backward(tape, l_det)
    norm = _grad_norm(pipeline.mask)
    for p in pipeline.mask.values():
        p.grad = None
    return norm
