"""End-to-end gradient verification.

The per-op probes live next to the tape (`autodiff.gradcheck`); this module
adds four module-level groups that differentiate through realistic small
instances: the query predictor unroll, the mask encoder's soft path, the
detector from voxel features to head outputs, and the loss stack. `run_all`
sweeps everything and reports the worst relative error per name.
"""

import numpy as np

from .. import detector, maskgen
from ..autodiff import ops
from ..autodiff.gradcheck import check_gradients, run_op_checks
from ..autodiff.tensor import Tensor
from ..detector import DetectorConfig
from ..losses import LossWeights, cvar_loss, detection_loss, distill_loss, mask_loss
from ..predictor import BufferFrame, MtmParams, QueryBuffer, predict_queries
from ..rangeimage import BeamGrid, GuidanceMask
from ..scenesim import ActorBox
from ..voxelizer import VoxelGridConfig, voxelize

TOLERANCE = 1e-4


def _small_grid():
    return BeamGrid(H=8, W=16, phi_min=-0.4, phi_max=0.4,
                    theta_min=-np.pi, theta_max=np.pi, H_B=4, W_B=8)


def _yaw_rotation(rng):
    a = rng.uniform(-np.pi, np.pi)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _readout(t, w):
    return ops.reduce_sum(ops.mul(t, ops.constant(w)))


def check_predictor_group(instances=20, seed=1):
    """Unroll gradients w.r.t. each motion-step tensor in rotation."""
    rng = np.random.default_rng(seed)
    dim, n_q, n_layers, depth = 4, 3, 2, 3
    names = sorted(MtmParams.identity(dim).tensors())
    worst = {}
    for k in range(instances):
        params = MtmParams.init(dim, rng, noise=0.05)
        buf = QueryBuffer(depth)
        for i in range(depth):
            centers = rng.uniform(-8.0, 8.0, size=(n_q, 3))
            centers[:, 2] = rng.uniform(-1.0, 1.0, size=n_q)
            buf.push(BufferFrame(
                queries=rng.normal(size=(n_layers, n_q, dim)),
                centers=centers,
                velocities=rng.normal(scale=2.0, size=(n_q, 3)),
                class_ids=rng.integers(0, 4, size=n_q),
                scores=rng.uniform(0.1, 1.0, size=n_q),
                rotation=_yaw_rotation(rng),
                timestamp=0.2 * i))
        weights = [rng.normal(size=(n_q, dim)) for _ in range(n_layers)]
        base = params.tensors()
        kw = dict(gamma=params.gamma, c_m=params.c_m,
                  score_floor=params.score_floor,
                  background_id=params.background_id)
        name = names[k % len(names)]

        def fn(x):
            p = MtmParams(**{**base, name: x}, **kw)
            total = None
            for out, w in zip(predict_queries(buf, p), weights):
                term = _readout(out, w)
                total = term if total is None else ops.add(total, term)
            return total

        err = check_gradients(fn, Tensor(base[name].data.copy()))
        worst[name] = max(worst.get(name, 0.0), err)
    return worst


def check_maskgen_group(instances=20, seed=2):
    """Soft-path gradients w.r.t. each encoder/head weight in rotation."""
    rng = np.random.default_rng(seed)
    grid = _small_grid()
    dim, n_q, n_layers = 4, 3, 2
    names = sorted(maskgen.init_params(dim, np.random.default_rng(0),
                                       head_hidden=3))
    worst = {}
    for k in range(instances):
        params = maskgen.init_params(dim, rng, head_hidden=3)
        q_layers = [rng.normal(size=(n_q, dim)) for _ in range(n_layers)]
        centers = rng.uniform(-6.0, 6.0, size=(n_q, 3))
        centers[:, 2] = rng.uniform(-0.5, 0.5, size=n_q)
        w = rng.normal(size=(grid.H_B, grid.W_B, 2))
        tau = float(rng.uniform(0.5, 1.5))
        name = names[k % len(names)]

        def fn(x):
            p = {**params, name: x}
            z = maskgen.encode([Tensor(q) for q in q_layers], centers, p, grid)
            return _readout(maskgen.gumbel_softmax(z, tau, rng=None).soft, w)

        err = check_gradients(fn, Tensor(params[name].data.copy()))
        worst[name] = max(worst.get(name, 0.0), err)
    return worst


def check_detector_group(instances=20, seed=3, params_per_instance=3):
    """Voxel features -> BEV -> decoder -> heads, rotating through every
    parameter; several parameters per instance cover the full set."""
    rng = np.random.default_rng(seed)
    cfg = DetectorConfig(dim=4, n_layers=2, n_queries=3, n_classes=3,
                         ffn_hidden=6)
    vcfg = VoxelGridConfig(extent_min=(-4.0, -4.0, -2.0),
                           extent_max=(4.0, 4.0, 2.0),
                           voxel_size=(4.0, 4.0, 2.0), K_v=3, D_p=3)
    channels = vcfg.shape[2] * vcfg.D_p
    names = sorted(detector.init_params(cfg, np.random.default_rng(0),
                                        lidar_channels=channels))
    worst = {}
    for k in range(instances):
        params = detector.init_params(cfg, rng, lidar_channels=channels,
                                      out_scale=0.05)
        pts = rng.uniform(-3.5, 3.5, size=(14, 3))
        pts[:, 2] = rng.uniform(-1.5, 1.5, size=14)
        vt = voxelize(pts, vcfg)
        cam = rng.random((1, 2, 2))
        w_center = rng.normal(size=(cfg.n_queries, 3))
        w_logits = rng.normal(size=(cfg.n_queries, cfg.n_classes + 1))
        w_size = rng.normal(size=(cfg.n_queries, 3))
        picks = [names[(params_per_instance * k + j) % len(names)]
                 for j in range(params_per_instance)]
        for name in picks:

            def fn(x):
                p = {**params, name: x}
                bev = detector.extract_lidar_bev(Tensor(vt.features), vt, p)
                fmap = detector.fuse(bev, ops.constant(cam), p, vcfg)
                layers = detector.decode(p["query_embed"], fmap, p, cfg)
                outputs = detector.head_outputs(layers[-1], p, fmap)
                return ops.add(
                    ops.add(_readout(outputs["center"], w_center),
                            _readout(outputs["class_logits"], w_logits)),
                    _readout(outputs["log_size"], w_size))

            err = check_gradients(fn, Tensor(params[name].data.copy()))
            worst[name] = max(worst.get(name, 0.0), err)
    return worst


def _random_boxes(rng, n):
    boxes = []
    for i in range(n):
        boxes.append(ActorBox(center=rng.uniform(-8.0, 8.0, size=3),
                              size=tuple(rng.uniform(0.5, 3.0, size=3)),
                              yaw=float(rng.uniform(-np.pi, np.pi)),
                              velocity=rng.normal(size=3),
                              class_id=int(rng.integers(0, 3)),
                              actor_id=i))
    return boxes


def check_losses_group(instances=20, seed=4):
    """Loss-stack gradients, rotating over five entry points."""
    rng = np.random.default_rng(seed)
    weights = LossWeights()
    grid = _small_grid()
    worst = {}
    for k in range(instances):
        probe = ("detection_logits", "detection_center", "mask",
                 "cvar", "distill")[k % 5]
        if probe in ("detection_logits", "detection_center"):
            gt = _random_boxes(rng, 2)
            assignment = np.array([0, 1, -1])
            const = {
                "center": Tensor(rng.uniform(-8.0, 8.0, size=(3, 3)) + 0.37),
                "log_size": Tensor(rng.normal(size=(3, 3)) + 0.31),
                "sincos": Tensor(rng.normal(size=(3, 2)) + 0.29),
                "velocity": Tensor(rng.normal(size=(3, 3)) + 0.33),
                "class_logits": Tensor(rng.normal(size=(3, 4))),
            }
            leaf_key = "class_logits" if probe == "detection_logits" else "center"

            def fn(x):
                outputs = dict(const)
                outputs[leaf_key] = x
                return detection_loss(outputs, gt, assignment, weights)

            start = const[leaf_key].data.copy()
        elif probe == "mask":
            guidance = GuidanceMask(grid, rng.integers(0, 2, size=(grid.H_B, grid.W_B)).astype(np.uint8))
            small = GuidanceMask(grid, (guidance.values * rng.integers(0, 2, size=guidance.values.shape)).astype(np.uint8))

            def fn(x):
                soft = ops.softmax(ops.scale(x, 1.7), axis=-1)
                bd = mask_loss(soft, guidance, weights, small_pixels=small)
                if bd.n_small:
                    return ops.add(bd.mean, cvar_loss(bd.small_losses, weights.beta))
                return bd.mean

            start = rng.normal(size=(grid.H_B, grid.W_B, 2))
        elif probe == "cvar":
            beta = float(rng.uniform(0.1, 0.9))
            base = np.sort(rng.uniform(0.0, 3.0, size=9))
            base += 0.08 * np.arange(9)   # keep ranks separated for the FD step

            def fn(x, beta=beta):
                return cvar_loss(x, beta)

            start = rng.permutation(base)
        else:
            ref = rng.normal(size=(4, 3))

            def fn(x, ref=ref):
                return distill_loss(x, ref)

            start = ref + np.where(rng.random((4, 3)) < 0.5, -1.0, 1.0) * rng.uniform(0.2, 1.0, size=(4, 3))

        err = check_gradients(fn, Tensor(np.asarray(start, dtype=np.float64)))
        worst[probe] = max(worst.get(probe, 0.0), err)
    return worst


def run_all(instances=20, seed=0):
    """Every op probe plus the four end-to-end groups.

    Returns {name: worst relative error}; callers compare against TOLERANCE.
    """
    results = dict(run_op_checks(instances=instances, seed=seed))
    for prefix, grouped in (
            ("predictor", check_predictor_group(instances, seed + 1)),
            ("maskgen", check_maskgen_group(instances, seed + 2)),
            ("detector", check_detector_group(instances, seed + 3)),
            ("losses", check_losses_group(instances, seed + 4))):
        for name, err in grouped.items():
            results[f"{prefix}:{name}"] = err
    return results
