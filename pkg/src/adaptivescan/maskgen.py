"""Scan-policy mask generation.

Predicted queries are scattered onto the block grid of the range image by
their forecast centers, encoded with a small residual conv stack into
per-block (full, sparse) logits, and sampled into a binary mask with the
Gumbel-Softmax trick. The hard mask drives the forward pass; gradients ride
the soft probabilities. At inference the mask expands to a beam-level
pattern: full blocks enable every beam, sparse blocks Bernoulli-sample
beams at the nearest quantized rate.

Inner convolutions carry no bias on purpose: an empty scene (nothing
scattered) then stays exactly zero through the encoder, and the logits
reduce to the head's response to the projection bias, spatially constant.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor
from .containers import load_container, save_container
from .rangeimage import bin_angles_array, project_points

DEFAULT_LEVELS = (0.0625, 0.125, 0.25, 0.5)


@dataclass
class ScanMask:
    hard: np.ndarray      # (H_B, W_B) uint8, 1 = full scan
    soft: Tensor          # (H_B, W_B, 2) probabilities, channels (full, sparse)
    st: Tensor            # straight-through one-hot: forward hard, gradient soft
    tau: float

    @property
    def full_fraction(self):
        return float(self.hard.mean())


def init_params(dim, rng, head_hidden=8):
    """Encoder/head weights. Residual conv blocks start near zero so the
    stack begins as an identity map on the scattered features."""
    def w(*shape, scale):
        return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)

    small = 0.05 / np.sqrt(dim)
    return {
        "dw1_w1": w(dim, 3, 3, scale=0.05),
        "dw1_w2": w(dim, 3, 3, scale=0.05),
        "dw2_w1": w(dim, 3, 3, scale=0.05),
        "dw2_w2": w(dim, 3, 3, scale=0.05),
        "res1_w1": w(dim, dim, 3, 3, scale=small),
        "res1_w2": w(dim, dim, 3, 3, scale=small),
        "res2_w1": w(dim, dim, 3, 3, scale=small),
        "res2_w2": w(dim, dim, 3, 3, scale=small),
        "proj_w": w(2, dim, 1, 1, scale=1.0 / np.sqrt(dim)),
        "proj_b": Tensor(np.zeros(2), requires_grad=True),
        "head_w1": w(2, head_hidden, scale=0.7),
        "head_b1": Tensor(np.zeros(head_hidden), requires_grad=True),
        "head_w2": w(head_hidden, 2, scale=1.0 / np.sqrt(head_hidden)),
        "head_b2": Tensor(np.zeros(2), requires_grad=True),
    }


def point_blocks(points, grid):
    """Block row index (flattened H_B*W_B) per 3D point, -1 when out of view."""
    xyz = np.asarray(points, dtype=np.float64)
    out = np.full(len(xyz), -1, dtype=np.int64)
    ok_norm = np.isfinite(xyz).all(axis=1) & (np.linalg.norm(xyz, axis=1) > 1e-9)
    if not ok_norm.any():
        return out
    _, phi, theta = project_points(xyz[ok_norm])
    u, v, ok = bin_angles_array(phi, theta, grid)
    blocks = (u // grid.tile_h) * grid.W_B + (v // grid.tile_w)
    vals = np.where(ok, blocks, -1)
    out[np.nonzero(ok_norm)[0]] = vals
    return out


def scatter_queries(q_layers, centers, grid):
    """Sum query features over layers and scatter-add them to their blocks.

    The scatter is a constant one-hot matmul so feature gradients flow back
    to every layer's queries.
    """
    if isinstance(q_layers, np.ndarray):
        q_layers = [Tensor(q) for q in q_layers]
    n_q, dim = q_layers[0].data.shape
    centers = np.asarray(centers, dtype=np.float64)
    if centers.shape != (n_q, 3):
        raise ValueError(f"scatter_queries: centers {centers.shape} do not match "
                         f"{n_q} queries")
    summed = q_layers[0]
    for q in q_layers[1:]:
        if q.data.shape != (n_q, dim):
            raise ValueError("scatter_queries: layers disagree on (N_q, D)")
        summed = ops.add(summed, q)

    sel = np.zeros((grid.H_B * grid.W_B, n_q))
    blocks = point_blocks(centers, grid)
    for i, b in enumerate(blocks):
        if b >= 0:
            sel[b, i] = 1.0
    grid_feat = ops.matmul(ops.constant(sel), summed)          # (B, D)
    grid_feat = ops.reshape(grid_feat, (grid.H_B, grid.W_B, dim))
    return ops.transpose(grid_feat, (2, 0, 1))                 # (D, H_B, W_B)


def _residual(x, w1, w2, conv):
    return ops.add(x, conv(ops.relu(conv(x, w1)), w2))


def encode(q_layers, centers, params, grid):
    """Per-block (full, sparse) logits from the predicted query stack."""
    x = scatter_queries(q_layers, centers, grid)
    x = _residual(x, params["dw1_w1"], params["dw1_w2"], ops.depthwise_conv2d)
    x = _residual(x, params["dw2_w1"], params["dw2_w2"], ops.depthwise_conv2d)
    x = _residual(x, params["res1_w1"], params["res1_w2"], ops.conv2d)
    x = _residual(x, params["res2_w1"], params["res2_w2"], ops.conv2d)
    z = ops.conv2d(x, params["proj_w"], params["proj_b"])      # (2, H_B, W_B)
    z = ops.adaptive_avg_pool2d(z, (grid.H_B, grid.W_B))
    z = ops.transpose(z, (1, 2, 0))
    flat = ops.reshape(z, (grid.H_B * grid.W_B, 2))
    flat = ops.ffn(flat, params["head_w1"], params["head_b1"],
                   params["head_w2"], params["head_b2"])
    return ops.reshape(flat, (grid.H_B, grid.W_B, 2))


def gumbel_softmax(logits, tau, rng=None):
    """Sample a ScanMask from (full, sparse) logits at temperature tau.

    With an rng, each block and channel gets independent Gumbel noise
    g = -log(-log U); without one the softmax is noise-free, which is the
    deployment path. Forward uses the one-hot argmax, gradients use soft.
    """
    if tau <= 0:
        raise ValueError(f"gumbel_softmax: tau must be positive, got {tau}")
    z = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits, dtype=np.float64))
    if z.data.ndim != 3 or z.data.shape[-1] != 2:
        raise ValueError(f"gumbel_softmax: logits must be (H_B, W_B, 2), got {z.data.shape}")
    if not np.isfinite(z.data).all():
        raise ValueError("gumbel_softmax: logits contain non-finite entries")
    perturbed = z
    if rng is not None:
        u = rng.random(size=z.data.shape)
        noise = -np.log(-np.log(np.clip(u, 1e-300, 1.0 - 1e-16)))
        perturbed = ops.add(z, ops.constant(noise))
    soft = ops.softmax(ops.scale(perturbed, 1.0 / tau), axis=-1)
    hard = (np.argmax(soft.data, axis=-1) == 0).astype(np.uint8)
    onehot = np.stack([hard, 1 - hard], axis=-1).astype(np.float64)
    st = ops.straight_through(onehot, soft)
    return ScanMask(hard=hard, soft=soft, st=st, tau=tau)


def anneal_tau(progress, start=1.0, end=0.3):
    """Linear temperature schedule over training progress in [0, 1]."""
    p = min(max(progress, 0.0), 1.0)
    return start + (end - start) * p


def quantize_rate(p, levels):
    """Nearest sparsity level to p; exact midpoints take the denser one."""
    levels = np.asarray(sorted(levels), dtype=np.float64)
    diff = np.abs(levels - p)
    return float(levels[diff == diff.min()].max())


def _check_levels(levels):
    if len(levels) == 0:
        raise ValueError("need at least one sparsity level")
    arr = np.asarray(sorted(levels), dtype=np.float64)
    if (arr <= 0).any() or (arr > 1).any():
        raise ValueError(f"sparsity levels must lie in (0, 1], got {list(levels)}")
    return arr


def inference_pattern(mask, levels, grid, rng=None):
    """Expand a block mask to an (H, W) binary beam pattern.

    Full blocks enable their whole tile. Sparse blocks quantize the block's
    soft full-scan probability to the nearest level and enable each beam
    independently at that rate, which needs an rng.
    """
    levels = _check_levels(levels)
    th, tw = grid.tile_h, grid.tile_w
    pattern = np.zeros((grid.H, grid.W), dtype=np.uint8)
    soft_full = mask.soft.data[..., 0]
    for i in range(grid.H_B):
        for j in range(grid.W_B):
            tile = (slice(i * th, (i + 1) * th), slice(j * tw, (j + 1) * tw))
            if mask.hard[i, j]:
                pattern[tile] = 1
            else:
                if rng is None:
                    raise ValueError("inference_pattern: sparse blocks need an rng")
                rate = quantize_rate(soft_full[i, j], levels)
                pattern[tile] = rng.random((th, tw)) < rate
    return pattern


def expected_sparsity(mask, levels, grid):
    """Mean disabled-beam fraction of the patterns this mask induces."""
    levels = _check_levels(levels)
    tile = grid.tile_h * grid.tile_w
    enabled = 0.0
    for i in range(grid.H_B):
        for j in range(grid.W_B):
            if mask.hard[i, j]:
                enabled += tile
            else:
                enabled += tile * quantize_rate(mask.soft.data[i, j, 0], levels)
    return 1.0 - enabled / (grid.H * grid.W)


def save_mask(path, mask, levels, grid, pattern=None):
    """Binary grids plus a JSON sidecar for the plot pipeline."""
    path = Path(path)
    arrays = {"hard": mask.hard.astype(np.uint8), "soft": mask.soft.data}
    sidecar = {
        "tau": mask.tau,
        "levels": [float(x) for x in levels],
        "expected_sparsity": expected_sparsity(mask, levels, grid),
        "realized_sparsity": None,
    }
    if pattern is not None:
        arrays["pattern"] = pattern.astype(np.uint8)
        sidecar["realized_sparsity"] = 1.0 - float(pattern.mean())
    save_container(path, arrays, kind="mask", meta={"tau": mask.tau,
                                                    "levels": list(map(float, levels))})
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return path


def load_mask(path):
    meta, arrays = load_container(path, expect_kind="mask")
    return arrays, meta
