"""Held-out evaluation under both timing protocols, plus fixed baselines.

Protocols
---------
next-frame        the history buffer always holds full-scan states; the
                  adaptive scan at frame t is scored but never fed back.
entire-sequence   after a buffer_depth warmup of full scans, every frame is
                  scanned adaptively and its result becomes history; warmup
                  frames are excluded from the metrics.

Conditions
----------
full / adaptive / random / oracle / min_level. Random needs a target
sparsity and enables an exact beam count via permutation, so its realized
pattern sparsity equals the target to within one beam.
"""

import concurrent.futures
import csv
import pathlib

import numpy as np

from .. import maskgen
from ..detector import match
from ..rangeimage import build_range_image, rasterize_guidance_mask
from .config import ENERGY_MODELS, energy_report
from .model import (buffer_frame, camera_view, predict_mask, run_detector,
                    sparse_scan, visible_ground_truth)
from ..predictor import QueryBuffer

CONDITIONS = ("full", "adaptive", "random", "oracle", "min_level")


def _pattern_for(pipeline, condition, buf, gt, rng, level_override=None,
                 target_sparsity=None):
    run = pipeline.run
    grid = run.grid
    if condition == "full":
        return np.ones((grid.H, grid.W), dtype=np.uint8)
    if condition == "adaptive":
        levels = (level_override,) if level_override is not None else run.levels
        _, m = predict_mask(pipeline, buf, run.tau_end, rng=None)
        return maskgen.inference_pattern(m, levels, grid, rng)
    if condition == "random":
        if target_sparsity is None:
            raise ValueError("random condition needs a target sparsity")
        n = grid.H * grid.W
        enabled = int(round((1.0 - target_sparsity) * n))
        pattern = np.zeros(n, dtype=np.uint8)
        pattern[rng.permutation(n)[:enabled]] = 1
        return pattern.reshape(grid.H, grid.W)
    if condition == "oracle":
        blocks = rasterize_guidance_mask(gt, grid).values
        rate = min(run.levels)
        pattern = (rng.random((grid.H, grid.W)) < rate).astype(np.uint8)
        full = np.kron(blocks, np.ones((grid.tile_h, grid.tile_w), dtype=np.uint8))
        return np.maximum(pattern, full)
    if condition == "min_level":
        rate = min(run.levels)
        return (rng.random((grid.H, grid.W)) < rate).astype(np.uint8)
    raise ValueError(f"unknown condition {condition!r}; pick from {CONDITIONS}")


def _frame_metrics(detections, gt, class_weight):
    assignment, _ = match(detections, gt, class_weight)
    dists, correct = [], 0
    for i, j in enumerate(assignment):
        if j < 0:
            continue
        dists.append(float(np.linalg.norm(detections[i].center - gt[j].center)))
        correct += int(detections[i].class_id == gt[j].class_id)
    dists = np.asarray(dists)
    n_gt = len(gt)
    return {
        "n_gt": n_gt,
        "n_matched": int(dists.size),
        "recall2": float((dists <= 2.0).sum()) / max(n_gt, 1),
        "recall4": float((dists <= 4.0).sum()) / max(n_gt, 1),
        "center_err": float(dists.mean()) if dists.size else float("nan"),
        "class_acc": correct / max(int(dists.size), 1),
    }


def _measure(pipeline, frame, buf, gt, condition, rng, level_override,
             target_sparsity, cam):
    run = pipeline.run
    pattern = _pattern_for(pipeline, condition, buf, gt, rng,
                           level_override, target_sparsity)
    pts, pattern_sparsity = sparse_scan(frame, pattern, run.grid)
    res = run_detector(pipeline, pts, cam)
    row = _frame_metrics(res.detections, gt, run.match_class_weight)
    row["pattern_sparsity"] = pattern_sparsity
    row["scan_sparsity"] = build_range_image(pts, run.grid).empty_fraction
    row["energy_j"] = run.energy().e_full * (1.0 - pattern_sparsity)
    return row, res


def _evaluate_sequence(pipeline, seq, seq_idx, protocol, condition, base_seed,
                       level_override, target_sparsity):
    run = pipeline.run
    depth = run.buffer_depth
    if len(seq.frames) <= depth:
        raise ValueError(f"sequence needs more than {depth} frames to evaluate")
    rng = np.random.default_rng([base_seed, seq_idx])
    buf = QueryBuffer(depth)
    rows = []
    for t, frame in enumerate(seq.frames):
        cam = camera_view(run, frame, rng)
        gt = visible_ground_truth(pipeline, frame)
        if protocol == "next-frame":
            if buf.full:
                row, _ = _measure(pipeline, frame, buf, gt, condition, rng,
                                  level_override, target_sparsity, cam)
                row.update({"sequence": seq_idx, "frame": t,
                            "buffer_src": "full"})
                rows.append(row)
            res_full = run_detector(pipeline, frame.points, cam)
            buf.push(buffer_frame(res_full, frame.pose))
        elif protocol == "entire-sequence":
            if t < depth:
                res_full = run_detector(pipeline, frame.points, cam)
                buf.push(buffer_frame(res_full, frame.pose))
            else:
                row, res = _measure(pipeline, frame, buf, gt, condition, rng,
                                    level_override, target_sparsity, cam)
                row.update({"sequence": seq_idx, "frame": t,
                            "buffer_src": "adaptive"})
                rows.append(row)
                buf.push(buffer_frame(res, frame.pose))
        else:
            raise ValueError(f"unknown protocol {protocol!r}")
    return rows


_ROW_FIELDS = ("sequence", "frame", "protocol", "condition", "buffer_src",
               "n_gt", "n_matched", "recall2", "recall4", "center_err",
               "class_acc", "pattern_sparsity", "scan_sparsity", "energy_j")


def evaluate(pipeline, sequences, protocol, condition="adaptive", seed=None,
             level_override=None, target_sparsity=None, threads=None):
    """Score `condition` under `protocol` on every sequence.

    Returns (rows, aggregate). Rows are per measured frame in sequence
    order; parallel sequence workers do not change the output because each
    sequence owns an independent seeded generator.
    """
    run = pipeline.run
    base_seed = run.eval_seed if seed is None else seed
    threads = run.threads if threads is None else threads

    def work(i):
        return _evaluate_sequence(pipeline, sequences[i], i, protocol,
                                  condition, base_seed, level_override,
                                  target_sparsity)

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            per_seq = list(pool.map(work, range(len(sequences))))
    else:
        per_seq = [work(i) for i in range(len(sequences))]

    rows = []
    for chunk in per_seq:
        for row in chunk:
            row["protocol"] = protocol
            row["condition"] = condition
            rows.append({k: row[k] for k in _ROW_FIELDS})
    return rows, aggregate(rows)


def aggregate(rows):
    """Mean metrics over measured frames; center error ignores frames with
    no matched pair."""
    if not rows:
        raise ValueError("no rows to aggregate")
    errs = np.asarray([r["center_err"] for r in rows])
    finite = errs[np.isfinite(errs)]
    energy = np.asarray([r["energy_j"] for r in rows])
    sparsity = np.asarray([r["pattern_sparsity"] for r in rows])
    return {
        "protocol": rows[0]["protocol"],
        "condition": rows[0]["condition"],
        "n_frames": len(rows),
        "recall2": float(np.mean([r["recall2"] for r in rows])),
        "recall4": float(np.mean([r["recall4"] for r in rows])),
        "center_err": float(finite.mean()) if finite.size else float("nan"),
        "class_acc": float(np.mean([r["class_acc"] for r in rows])),
        "pattern_sparsity": float(sparsity.mean()),
        "scan_sparsity": float(np.mean([r["scan_sparsity"] for r in rows])),
        "energy_per_scan_j": float(energy.mean()),
        "energy_total_j": float(energy.sum()),
        "percent_saved": float(sparsity.mean() * 100.0),
    }


def write_metrics_csv(path, rows):
    """Frame-level CSV; float cells use repr so identical runs produce
    byte-identical files."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_ROW_FIELDS)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v
                             for v in (row[k] for k in _ROW_FIELDS)])
    return path


def write_aggregate_csv(path, aggregates):
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(aggregates[0].keys())
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for agg in aggregates:
            writer.writerow([repr(v) if isinstance(v, float) else v
                             for v in (agg[f] for f in fields)])
    return path


def compare_baselines(pipeline, sequences, protocol="entire-sequence",
                      seed=None, sweep_levels=None):
    """Adaptive vs full / random-at-matched-sparsity / guidance-oracle.

    Also sweeps the adaptive mask across single-level operating points so
    the sparsity-accuracy trend can be read off one table.
    """
    run = pipeline.run
    results = {}
    rows_adaptive, agg_adaptive = evaluate(pipeline, sequences, protocol,
                                           "adaptive", seed=seed)
    results["adaptive"] = (rows_adaptive, agg_adaptive)
    results["full"] = evaluate(pipeline, sequences, protocol, "full", seed=seed)
    results["random"] = evaluate(pipeline, sequences, protocol, "random",
                                 seed=seed,
                                 target_sparsity=agg_adaptive["pattern_sparsity"])
    results["oracle"] = evaluate(pipeline, sequences, protocol, "oracle",
                                 seed=seed)
    sweep = []
    for level in (run.levels if sweep_levels is None else sweep_levels):
        _, agg = evaluate(pipeline, sequences, protocol, "adaptive", seed=seed,
                          level_override=level)
        agg["level"] = float(level)
        sweep.append(agg)
    return {"conditions": {k: v[1] for k, v in results.items()},
            "rows": {k: v[0] for k, v in results.items()},
            "sweep": sweep}


def energy_from_rows(rows, model_name):
    model = ENERGY_MODELS[model_name]
    return energy_report([r["pattern_sparsity"] for r in rows], model)
