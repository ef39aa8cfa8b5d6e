"""Toy query-based fusion detector.

Voxel features are averaged per voxel, scattered into a BEV grid (z columns
concatenated into channels), refined by two residual conv blocks, fused with
the pseudo-camera channel through a 1x1 projection, and decoded by a small
transformer: per layer, self-attention over the queries, cross-attention over
the flattened BEV cells (sinusoidal position codes added to the keys), and a
feed-forward block, each wrapped as x + sublayer(norm(x)). The pre-norm
arrangement matters: with zero output projections a layer is exactly the
identity, which gives training a quiet start and the tests a fixed point.

The box head turns each query into a center offset against a learned
sigmoid-bounded BEV reference point, log-sizes, a (sin, cos) yaw pair,
velocity, and class logits with background last. All desk-scale defaults
live in DetectorConfig.
"""

import dataclasses
import json
import math
import pathlib

import numpy as np
from scipy.optimize import linear_sum_assignment

from .autodiff import ops
from .autodiff.tensor import Tensor


@dataclasses.dataclass(frozen=True)
class DetectorConfig:
    dim: int = 32
    n_layers: int = 2
    n_queries: int = 16
    n_classes: int = 3
    ffn_hidden: int = 64
    match_class_weight: float = 1.0

    def __post_init__(self):
        for name in ("dim", "n_layers", "n_queries", "n_classes", "ffn_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.dim % 4 != 0:
            raise ValueError("dim must be divisible by 4 for the position codes")


@dataclasses.dataclass
class FusedFeatureMap:
    """BEV feature grid (C, H, W) plus the metric extent it covers."""

    features: Tensor
    extent_min: np.ndarray     # (2,) metric x, y of cell (0, 0) corner
    extent_max: np.ndarray

    def __post_init__(self):
        if self.features.data.ndim != 3:
            raise ValueError("features must be (C, H, W)")
        if not np.isfinite(self.features.data).all():
            raise ValueError("features must be finite")
        self.extent_min = np.asarray(self.extent_min, dtype=np.float64)
        self.extent_max = np.asarray(self.extent_max, dtype=np.float64)
        if not (self.extent_max > self.extent_min).all():
            raise ValueError("empty extent")


@dataclasses.dataclass
class Detection:
    center: np.ndarray
    size: np.ndarray
    yaw: float
    velocity: np.ndarray
    class_logits: np.ndarray
    score: float
    class_id: int

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.asarray(self.size, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        self.class_logits = np.asarray(self.class_logits, dtype=np.float64)
        if not (self.size > 0).all():
            raise ValueError("sizes must be strictly positive")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0, 1]")
        for arr in (self.center, self.size, self.velocity, self.class_logits):
            if not np.isfinite(arr).all():
                raise ValueError("detection fields must be finite")


def position_code(rows, cols, h, w, dim):
    """Positional code at (possibly fractional) grid coordinates.

    Each half of the channels describes one axis: a centered linear ramp in
    channel 0 (so attention-weighted sums of codes carry the centroid
    coordinate a linear readout can use), then sin/cos pairs at geometric
    frequencies for locality keying.
    """
    if dim % 4 != 0:
        raise ValueError("dim must be divisible by 4")
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    half = dim // 2
    nf = (half - 1) // 2
    freqs = 10000.0 ** (-np.arange(nf) * 2.0 / half)
    out = np.zeros((rows.shape[0], dim))
    for base, pos, n in ((0, rows, h), (half, cols, w)):
        out[:, base] = (2.0 * pos - (n - 1)) / max(n - 1, 1)
        args = pos[:, None] * freqs[None, :]
        out[:, base + 1: base + 1 + nf] = np.sin(args)
        out[:, base + 1 + nf: base + 1 + 2 * nf] = np.cos(args)
    return out


def position_encoding(h, w, dim):
    """Codes for every cell of an h x w grid, row-major."""
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return position_code(rr.ravel(), cc.ravel(), h, w, dim)


def init_params(cfg, rng, lidar_channels, camera_channels=1,
                scale=0.05, out_scale=0.0, cross_scale=0.7):
    """Parameter dict for the whole detector.

    Output projections (attention out, FFN second layer) start at `out_scale`,
    zero by default, so every decoder layer begins as the identity.

    Cross-attention wq and wk start as copies of one matrix at `cross_scale`,
    making the query/key form positive semidefinite: a query whose embedding
    carries a positional code attends most to the map cells whose codes match
    it, so attention is localized from the first step instead of uniform.
    """
    d, cl = cfg.dim, lidar_channels
    p = {}
    for name in ("lidar_r1_w1", "lidar_r1_w2", "lidar_r2_w1", "lidar_r2_w2"):
        p[name] = Tensor(rng.normal(size=(cl, cl, 3, 3)) * scale / math.sqrt(cl))
    p["fuse_w"] = Tensor(rng.normal(size=(d, cl + camera_channels, 1, 1))
                         * scale / math.sqrt(cl + camera_channels))
    p["fuse_b"] = Tensor(np.zeros(d))
    for i in range(cfg.n_layers):
        for ln in ("ln1", "ln2", "ln3"):
            p[f"l{i}_{ln}_g"] = Tensor(np.ones(d))
            p[f"l{i}_{ln}_b"] = Tensor(np.zeros(d))
        for w in ("wq", "wk", "wv"):
            p[f"l{i}_self_{w}"] = Tensor(rng.normal(size=(d, d)) * scale / math.sqrt(d))
        shared = rng.normal(size=(d, d)) * cross_scale / math.sqrt(d)
        p[f"l{i}_cross_wq"] = Tensor(shared)
        p[f"l{i}_cross_wk"] = Tensor(shared.copy())
        p[f"l{i}_cross_wv"] = Tensor(rng.normal(size=(d, d)) * scale / math.sqrt(d))
        for kind in ("self", "cross"):
            p[f"l{i}_{kind}_wo"] = Tensor(rng.normal(size=(d, d)) * out_scale / math.sqrt(d))
        p[f"l{i}_ffn_w1"] = Tensor(rng.normal(size=(d, cfg.ffn_hidden)) * scale / math.sqrt(d))
        p[f"l{i}_ffn_b1"] = Tensor(np.zeros(cfg.ffn_hidden))
        p[f"l{i}_ffn_w2"] = Tensor(rng.normal(size=(cfg.ffn_hidden, d))
                                   * out_scale / math.sqrt(cfg.ffn_hidden))
        p[f"l{i}_ffn_b2"] = Tensor(np.zeros(d))
    p["head_trunk_w"] = Tensor(rng.normal(size=(d, cfg.ffn_hidden)) / math.sqrt(d))
    p["head_trunk_b"] = Tensor(np.zeros(cfg.ffn_hidden))
    for name, width in (("center", 3), ("size", 3), ("yaw", 2),
                        ("vel", 3), ("cls", cfg.n_classes + 1)):
        p[f"head_{name}_w"] = Tensor(rng.normal(size=(cfg.ffn_hidden, width))
                                     * scale / math.sqrt(cfg.ffn_hidden))
        p[f"head_{name}_b"] = Tensor(np.zeros(width))
    p["refs_raw"] = Tensor(rng.normal(size=(cfg.n_queries, 2)) * 0.5)
    p["query_embed"] = Tensor(rng.normal(size=(cfg.n_queries, d)) * 0.1)
    return p


def _residual(x, w1, w2):
    return ops.add(x, ops.conv2d(ops.relu(ops.conv2d(x, w1)), w2))


def extract_lidar_bev(features, voxels, params):
    """Voxel features -> BEV map (nz * D_p, nx, ny).

    `features` is the (M_v, K_v, D_p) tensor from voxelize_op so gradients
    can reach the raw points; `voxels` carries coords and occupancy. The
    residual convolutions are bias-free, so an empty tensor maps to an
    exactly zero feature map.
    """
    features = ops.as_tensor(features)
    nx, ny, nz = voxels.config.shape
    cells = nx * ny * nz
    m_v, k_v, d_p = features.data.shape

    mask = (np.arange(k_v)[None, :, None]
            < voxels.occupancy[:, None, None]).astype(np.float64)
    inv = np.zeros((m_v, 1))
    if m_v:
        inv[:, 0] = 1.0 / voxels.occupancy
    mean = ops.mul(ops.reduce_sum(ops.mul(features, ops.constant(mask)), axis=1),
                   ops.constant(inv))

    flat = (voxels.coords[:, 0] * ny + voxels.coords[:, 1]) * nz + voxels.coords[:, 2]
    select = np.zeros((cells, m_v))
    select[flat, np.arange(m_v)] = 1.0
    grid = ops.reshape(ops.matmul(ops.constant(select), mean), (nx, ny, nz * d_p))
    bev = ops.transpose(grid, (2, 0, 1))
    bev = _residual(bev, params["lidar_r1_w1"], params["lidar_r1_w2"])
    return _residual(bev, params["lidar_r2_w1"], params["lidar_r2_w2"])


def fuse(lidar_bev, camera_bev, params, voxel_config):
    lidar_bev = ops.as_tensor(lidar_bev)
    camera_bev = ops.as_tensor(camera_bev)
    if lidar_bev.data.shape[1:] != camera_bev.data.shape[1:]:
        raise ValueError("lidar and camera grids must match")
    nx, ny, _ = voxel_config.shape
    if lidar_bev.data.shape[1:] != (nx, ny):
        raise ValueError("BEV grid inconsistent with the voxel extent")
    fused = ops.conv2d(ops.concat([lidar_bev, camera_bev], axis=0),
                       params["fuse_w"], params["fuse_b"])
    return FusedFeatureMap(fused, voxel_config.extent_min[:2],
                           voxel_config.extent_max[:2])


def _attention(q, k, v, dim, sink=None):
    logits = ops.scale(ops.matmul(q, ops.transpose(k, (1, 0))), 1.0 / math.sqrt(dim))
    weights = ops.softmax(logits, axis=-1)
    if sink is not None:
        sink.append(weights)
    return ops.matmul(weights, v)


def decode(queries, fmap, params, cfg, attn_sink=None):
    """Run the decoder stack; returns all L layer outputs (each (N_q, D)).

    When `attn_sink` is a list it receives one {"self": T, "cross": T}
    entry per layer with the softmax attention tensors.
    """
    d = cfg.dim
    _, h, w = fmap.features.data.shape
    cells = ops.reshape(ops.transpose(fmap.features, (1, 2, 0)), (h * w, d))
    keyed = ops.add(cells, ops.constant(position_encoding(h, w, d)))

    x = ops.as_tensor(queries)
    layers = []
    for i in range(cfg.n_layers):
        sink = [] if attn_sink is not None else None
        xn = ops.layernorm_affine(x, params[f"l{i}_ln1_g"], params[f"l{i}_ln1_b"])
        attended = _attention(ops.matmul(xn, params[f"l{i}_self_wq"]),
                              ops.matmul(xn, params[f"l{i}_self_wk"]),
                              ops.matmul(xn, params[f"l{i}_self_wv"]), d, sink)
        x = ops.add(x, ops.matmul(attended, params[f"l{i}_self_wo"]))

        xn = ops.layernorm_affine(x, params[f"l{i}_ln2_g"], params[f"l{i}_ln2_b"])
        # Values carry the positional code too: the low-frequency channels are
        # near-linear in cell position, so a peaked attention row lets the
        # linear center head read out a position (soft-argmax) rather than
        # having to infer it from content alone.
        attended = _attention(ops.matmul(xn, params[f"l{i}_cross_wq"]),
                              ops.matmul(keyed, params[f"l{i}_cross_wk"]),
                              ops.matmul(keyed, params[f"l{i}_cross_wv"]), d, sink)
        x = ops.add(x, ops.matmul(attended, params[f"l{i}_cross_wo"]))

        xn = ops.layernorm_affine(x, params[f"l{i}_ln3_g"], params[f"l{i}_ln3_b"])
        x = ops.add(x, ops.ffn(xn, params[f"l{i}_ffn_w1"], params[f"l{i}_ffn_b1"],
                               params[f"l{i}_ffn_w2"], params[f"l{i}_ffn_b2"]))
        layers.append(x)
        if attn_sink is not None:
            attn_sink.append({"self": sink[0], "cross": sink[1]})
    return layers


def reference_points(params, fmap):
    """Learned anchors mapped through a sigmoid into the BEV extent."""
    span = fmap.extent_max - fmap.extent_min
    return ops.add(ops.mul(ops.sigmoid(params["refs_raw"]), ops.constant(span)),
                   ops.constant(fmap.extent_min))


def head_outputs(queries, params, fmap):
    """Differentiable box head; returns a dict of per-query tensors.

    A shared ReLU trunk feeds the per-quantity branches: the query state
    mixes sinusoidal code content whose position information is not linearly
    decodable, so one hidden layer sits between queries and the outputs.
    """
    q = ops.as_tensor(queries)
    n_q = q.data.shape[0]
    refs = reference_points(params, fmap)
    h = ops.relu(ops.linear(q, params["head_trunk_w"], params["head_trunk_b"]))
    offset = ops.linear(h, params["head_center_w"], params["head_center_b"])
    ref3 = ops.concat([refs, ops.constant(np.zeros((n_q, 1)))], axis=1)
    return {
        "center": ops.add(offset, ref3),
        "log_size": ops.linear(h, params["head_size_w"], params["head_size_b"]),
        "sincos": ops.linear(h, params["head_yaw_w"], params["head_yaw_b"]),
        "velocity": ops.linear(h, params["head_vel_w"], params["head_vel_b"]),
        "class_logits": ops.linear(h, params["head_cls_w"], params["head_cls_b"]),
        "refs": refs,
    }


def decode_yaw(sin_raw, cos_raw):
    norm = math.hypot(sin_raw, cos_raw)
    if norm <= 1e-12:
        return 0.0
    return math.atan2(sin_raw / norm, cos_raw / norm)


def detections_from_outputs(outputs, n_classes):
    logits = outputs["class_logits"].data
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = shifted / shifted.sum(axis=1, keepdims=True)
    dets = []
    for i in range(logits.shape[0]):
        fg = probs[i, :n_classes]
        dets.append(Detection(
            center=outputs["center"].data[i],
            size=np.exp(outputs["log_size"].data[i]),
            yaw=decode_yaw(*outputs["sincos"].data[i]),
            velocity=outputs["velocity"].data[i],
            class_logits=logits[i],
            score=float(fg.max()),
            class_id=int(fg.argmax()),
        ))
    return dets


def head(queries, params, fmap, cfg):
    return detections_from_outputs(head_outputs(queries, params, fmap), cfg.n_classes)


def match(detections, gt_boxes, class_weight=1.0):
    """Optimal one-to-one assignment of detections to ground-truth boxes.

    Cost per pair: center L2 distance + class_weight * (1 - p(gt class)).
    Returns (assignment, total_cost) where assignment[i] is the matched GT
    index or -1 for background.
    """
    assignment = np.full(len(detections), -1, dtype=np.int64)
    if not detections or not gt_boxes:
        return assignment, 0.0
    cost = np.zeros((len(detections), len(gt_boxes)))
    for i, det in enumerate(detections):
        shifted = np.exp(det.class_logits - det.class_logits.max())
        probs = shifted / shifted.sum()
        for j, gt in enumerate(gt_boxes):
            dist = float(np.linalg.norm(det.center - gt.center))
            cost[i, j] = dist + class_weight * (1.0 - probs[gt.class_id])
    rows, cols = linear_sum_assignment(cost)
    assignment[rows] = cols
    return assignment, float(cost[rows, cols].sum())


def write_detections_jsonl(path, detections_per_frame):
    path = pathlib.Path(path)
    with path.open("w") as fh:
        for frame_idx, dets in enumerate(detections_per_frame):
            for det in dets:
                fh.write(json.dumps({
                    "frame": frame_idx,
                    "center": det.center.tolist(),
                    "size": det.size.tolist(),
                    "yaw": det.yaw,
                    "velocity": det.velocity.tolist(),
                    "class_logits": det.class_logits.tolist(),
                    "score": det.score,
                    "class_id": det.class_id,
                }) + "\n")
    return path


def read_detections_jsonl(path):
    frames = {}
    with pathlib.Path(path).open() as fh:
        for line in fh:
            rec = json.loads(line)
            frames.setdefault(rec["frame"], []).append(Detection(
                center=rec["center"], size=rec["size"], yaw=rec["yaw"],
                velocity=rec["velocity"], class_logits=rec["class_logits"],
                score=rec["score"], class_id=rec["class_id"]))
    if not frames:
        return []
    return [frames.get(i, []) for i in range(max(frames) + 1)]
