"""Pipeline assembly: parameters, per-frame forward passes, checkpoints.

A Pipeline bundles the three trainable parts (detector, mask generator,
query predictor) with the shared geometry so the training stages and the
evaluation protocols can hand one object around.
"""

import dataclasses

import numpy as np

from .. import detector, maskgen
from ..autodiff import ops
from ..autodiff.tensor import Tensor
from ..containers import load_checkpoint, save_checkpoint
from ..detector import DetectorConfig
from ..predictor import BufferFrame, MtmParams, predict_queries
from ..rangeimage import apply_scan_pattern
from ..scenesim import ground_truth_boxes, pseudo_camera_bev
from ..voxelizer import voxelize, voxelize_op


@dataclasses.dataclass
class Pipeline:
    run: object                  # RunConfig
    det_cfg: DetectorConfig
    voxel_cfg: object
    weights: object              # LossWeights
    det: dict                    # name -> Tensor
    mask: dict                   # name -> Tensor
    mtm: MtmParams

    @property
    def grid(self):
        return self.run.grid


def build_pipeline(run, seed):
    rng = np.random.default_rng(seed)
    det_cfg = DetectorConfig(dim=run.dim, n_layers=run.n_layers,
                             n_queries=run.n_queries, n_classes=run.n_classes,
                             ffn_hidden=run.ffn_hidden,
                             match_class_weight=run.match_class_weight)
    voxel_cfg = run.voxel_config()
    nz = voxel_cfg.shape[2]
    det = detector.init_params(det_cfg, rng, lidar_channels=nz * voxel_cfg.D_p)
    mask = maskgen.init_params(run.dim, rng, head_hidden=run.mask_head_hidden)
    mtm = MtmParams.init(run.dim, rng, gamma=run.mtm_gamma,
                         score_floor=run.mtm_score_floor,
                         background_id=run.n_classes)
    return Pipeline(run=run, det_cfg=det_cfg, voxel_cfg=voxel_cfg,
                    weights=run.loss_weights(), det=det, mask=mask, mtm=mtm)


def set_requires_grad(tensors, flag):
    for t in tensors.values():
        t.requires_grad = bool(flag)


def named_parameters(pipeline, groups=("det", "mask", "mtm")):
    """Flat {prefixed name: Tensor} view of the chosen parameter groups."""
    out = {}
    if "det" in groups:
        out.update({f"det/{k}": v for k, v in pipeline.det.items()})
    if "mask" in groups:
        out.update({f"mask/{k}": v for k, v in pipeline.mask.items()})
    if "mtm" in groups:
        out.update({f"mtm/{k}": v for k, v in pipeline.mtm.tensors().items()})
    return out


def save_pipeline(path, pipeline, stage):
    meta = {
        "stage": stage,
        "dim": pipeline.run.dim,
        "mtm_gamma": pipeline.mtm.gamma,
        "mtm_c_m": pipeline.mtm.c_m,
        "mtm_score_floor": pipeline.mtm.score_floor,
        "mtm_background_id": pipeline.mtm.background_id,
    }
    save_checkpoint(path, named_parameters(pipeline), meta=meta)
    return path


def load_pipeline(path, run):
    """Rebuild a Pipeline from a checkpoint; `run` supplies the geometry."""
    meta, arrays = load_checkpoint(path)
    det = {k[4:]: Tensor(v) for k, v in arrays.items() if k.startswith("det/")}
    mask = {k[5:]: Tensor(v, requires_grad=True)
            for k, v in arrays.items() if k.startswith("mask/")}
    mtm_t = {k[4:]: Tensor(v, requires_grad=True)
             for k, v in arrays.items() if k.startswith("mtm/")}
    if not det or not mask or not mtm_t:
        raise ValueError(f"checkpoint {path} is missing a parameter group")
    mtm = MtmParams(**mtm_t, gamma=meta["mtm_gamma"], c_m=meta["mtm_c_m"],
                    score_floor=meta["mtm_score_floor"],
                    background_id=int(meta["mtm_background_id"]))
    det_cfg = DetectorConfig(dim=run.dim, n_layers=run.n_layers,
                             n_queries=run.n_queries, n_classes=run.n_classes,
                             ffn_hidden=run.ffn_hidden,
                             match_class_weight=run.match_class_weight)
    return Pipeline(run=run, det_cfg=det_cfg, voxel_cfg=run.voxel_config(),
                    weights=run.loss_weights(), det=det, mask=mask, mtm=mtm)


def camera_view(run, frame, rng):
    return pseudo_camera_bev(ground_truth_boxes(frame),
                             shape=(run.bev_cells, run.bev_cells),
                             extent=run.bev_extent,
                             jitter_sigma=run.camera_jitter, rng=rng)


def visible_ground_truth(pipeline, frame):
    """Sensor-frame boxes whose centers lie inside the BEV extent.

    Actors that drift outside the sensing volume cannot be represented by
    the feature map, so they are neither trained against nor scored.
    """
    lo = np.asarray(pipeline.voxel_cfg.extent_min[:2])
    hi = np.asarray(pipeline.voxel_cfg.extent_max[:2])
    out = []
    for b in ground_truth_boxes(frame):
        xy = b.center[:2]
        if (xy >= lo).all() and (xy <= hi).all():
            out.append(b)
    return out


@dataclasses.dataclass
class FrameResult:
    layers: list         # decoder outputs, one (N_q, D) tensor per layer
    outputs: dict        # head tensors
    detections: list
    fmap: object
    voxels: object


def run_detector(pipeline, points, camera, point_scale=None, attn_sink=None):
    """Voxelize -> BEV -> fuse -> decode -> head on one frame's cloud.

    `point_scale`, a (H_B, W_B) tensor, multiplies every point by its
    block's entry and switches voxelization to the surrogate-gradient op,
    which is how sensing decisions receive gradients end to end. Without it
    the voxel stage is a plain non-differentiable bucketing.

    `attn_sink` is forwarded to the decoder to expose attention maps.
    """
    cam = np.asarray(camera, dtype=np.float64)
    if cam.ndim == 2:
        cam = cam[None]
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if point_scale is None:
        vt = voxelize(points, pipeline.voxel_cfg)
        feats = Tensor(vt.features)
    else:
        grid = pipeline.grid
        blocks = maskgen.point_blocks(points, grid)
        if (blocks < 0).any():
            raise ValueError("run_detector: scaled points must project into the beam grid")
        flat = ops.reshape(point_scale, (grid.H_B * grid.W_B,))
        per_point = ops.reshape(ops.take(flat, blocks), (len(points), 1))
        scaled = ops.mul(ops.constant(points), per_point)
        feats, vt = voxelize_op(scaled, pipeline.voxel_cfg,
                                alpha=pipeline.run.voxel_alpha)
    bev = detector.extract_lidar_bev(feats, vt, pipeline.det)
    fmap = detector.fuse(bev, ops.constant(cam), pipeline.det, pipeline.voxel_cfg)
    queries_in = ops.add(pipeline.det["query_embed"],
                         ops.constant(query_position_codes(pipeline)))
    layers = detector.decode(queries_in, fmap, pipeline.det, pipeline.det_cfg,
                             attn_sink=attn_sink)
    outputs = detector.head_outputs(layers[-1], pipeline.det, fmap)
    dets = detector.detections_from_outputs(outputs, pipeline.det_cfg.n_classes)
    return FrameResult(layers=layers, outputs=outputs, detections=dets,
                       fmap=fmap, voxels=vt)


def buffer_frame(result, pose):
    """Detached snapshot of a frame's query state for the history buffer."""
    return BufferFrame(
        queries=np.stack([l.data.copy() for l in result.layers]),
        centers=result.outputs["center"].data.copy(),
        velocities=result.outputs["velocity"].data.copy(),
        class_ids=np.array([d.class_id for d in result.detections], dtype=np.int64),
        scores=np.array([d.score for d in result.detections]),
        rotation=pose.rotation,
        timestamp=pose.timestamp)


def _bev_reference_cells(pipeline):
    det = pipeline.det
    lo = np.asarray(pipeline.voxel_cfg.extent_min[:2], dtype=np.float64)
    hi = np.asarray(pipeline.voxel_cfg.extent_max[:2], dtype=np.float64)
    refs = lo + (hi - lo) / (1.0 + np.exp(-det["refs_raw"].data))
    nx, ny, _ = pipeline.voxel_cfg.shape
    cell = (hi - lo) / np.array([nx, ny], dtype=np.float64)
    return (refs - lo) / cell - 0.5


def query_position_codes(pipeline):
    """Positional codes of the learned reference points on the BEV lattice.

    Matches the feature-map encoding at (fractional) cell coordinates, so a
    query's code correlates with the codes of cells near its reference;
    added to the query embedding this seeds cross-attention with a
    positional prior. Detached: references train through the center head,
    not through here.
    """
    rc = _bev_reference_cells(pipeline)
    nx, ny, _ = pipeline.voxel_cfg.shape
    return detector.position_code(rc[:, 0], rc[:, 1], nx, ny,
                                  pipeline.det_cfg.dim)


def query_centers(pipeline, queries_data):
    """Detached center decode used to place predicted queries on the beam
    grid; plain numpy so the scatter stays a constant selection."""
    det = pipeline.det
    lo = np.asarray(pipeline.voxel_cfg.extent_min[:2], dtype=np.float64)
    hi = np.asarray(pipeline.voxel_cfg.extent_max[:2], dtype=np.float64)
    refs = lo + (hi - lo) / (1.0 + np.exp(-det["refs_raw"].data))
    hidden = np.maximum(
        queries_data @ det["head_trunk_w"].data + det["head_trunk_b"].data, 0.0)
    offset = hidden @ det["head_center_w"].data + det["head_center_b"].data
    return offset + np.concatenate([refs, np.zeros((len(refs), 1))], axis=1)


def predict_mask(pipeline, buffer, tau, rng=None):
    """History buffer -> predicted queries -> sampled scan mask.

    Passing no rng gives the noise-free deployment mask. Returns the
    predicted query layers alongside the mask so training can reuse them.
    """
    q_layers = predict_queries(buffer, pipeline.mtm)
    centers = query_centers(pipeline, q_layers[-1].data)
    z = maskgen.encode(q_layers, centers, pipeline.mask, pipeline.grid)
    return q_layers, maskgen.gumbel_softmax(z, tau, rng)


def head_from_queries(pipeline, queries):
    """Head outputs for predicted queries, which carry no feature map; a
    zero-feature stand-in supplies the BEV extent for the reference points."""
    shim = detector.FusedFeatureMap(
        Tensor(np.zeros((1, 1, 1))),
        np.asarray(pipeline.voxel_cfg.extent_min[:2], dtype=np.float64),
        np.asarray(pipeline.voxel_cfg.extent_max[:2], dtype=np.float64))
    return detector.head_outputs(queries, pipeline.det, shim)


def sparse_scan(frame, pattern, grid):
    """Points surviving a beam pattern plus the pattern's disabled fraction.

    Filters the stored full-pattern cloud, which matches re-raycasting the
    pattern whenever range noise is off.
    """
    pts, _, sparsity = apply_scan_pattern(pattern, frame.points, grid)
    return pts, sparsity
