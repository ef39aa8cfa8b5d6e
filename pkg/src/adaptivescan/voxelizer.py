"""Voxelization with a nearest-neighbor surrogate backward pass.

The forward pass is ordinary bucketing and carries no useful derivative with
respect to point coordinates (it is piecewise constant in them). The
backward pass therefore routes each point's gradient through the occupied
voxel whose center is nearest, scaled by a small constant. That includes
points that were dropped by the per-voxel capacity limit or fell outside
the extent, so concentrating too many points in one place still produces a
training signal.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff.tensor import Tensor, active_tape


@dataclass(frozen=True)
class VoxelGridConfig:
    extent_min: tuple          # (x, y, z) meters
    extent_max: tuple
    voxel_size: tuple          # per-axis edge length, meters
    K_v: int = 8               # max points stored per voxel
    D_p: int = 3               # per-point feature width, first 3 are xyz

    def __post_init__(self):
        lo = np.asarray(self.extent_min, dtype=np.float64)
        hi = np.asarray(self.extent_max, dtype=np.float64)
        vs = np.asarray(self.voxel_size, dtype=np.float64)
        if (vs <= 0).any() or (hi <= lo).any():
            raise ValueError("VoxelGridConfig: need positive voxel sizes and max > min")
        counts = (hi - lo) / vs
        if np.abs(counts - np.round(counts)).max() > 1e-9:
            raise ValueError(f"VoxelGridConfig: extent {lo}..{hi} is not a whole number "
                             f"of voxels of size {vs}")
        if self.K_v < 1:
            raise ValueError(f"VoxelGridConfig: K_v must be >= 1, got {self.K_v}")
        if self.D_p < 3:
            raise ValueError(f"VoxelGridConfig: D_p must be >= 3, got {self.D_p}")

    @property
    def shape(self):
        lo = np.asarray(self.extent_min)
        hi = np.asarray(self.extent_max)
        return tuple(np.round((hi - lo) / np.asarray(self.voxel_size)).astype(int))


@dataclass
class VoxelTensor:
    features: np.ndarray       # (M_v, K_v, D_p)
    coords: np.ndarray         # (M_v, 3) integer voxel indices
    occupancy: np.ndarray      # (M_v,) points stored per voxel
    assignment: np.ndarray     # (N_s,) -> voxel row, or -1 for dropped / out of extent
    slot: np.ndarray           # (N_s,) -> slot within the voxel, or -1
    config: VoxelGridConfig

    @property
    def M_v(self):
        return self.features.shape[0]


def voxelize(points, config):
    """Bucket points into occupied voxels; first K_v per voxel in input order."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != config.D_p:
        raise ValueError(f"voxelize: expected (N, {config.D_p}) points, got {points.shape}")
    n = len(points)
    lo = np.asarray(config.extent_min)
    hi = np.asarray(config.extent_max)
    xyz = points[:, :3]
    in_extent = ((xyz >= lo) & (xyz < hi)).all(axis=1)
    idx = np.floor((xyz - lo) / np.asarray(config.voxel_size)).astype(np.int64)

    assignment = np.full(n, -1, dtype=np.int64)
    slot = np.full(n, -1, dtype=np.int64)
    rows = {}
    stored = []
    for i in np.nonzero(in_extent)[0]:
        key = tuple(idx[i])
        row = rows.get(key)
        if row is None:
            row = len(rows)
            rows[key] = row
            stored.append([])
        if len(stored[row]) < config.K_v:
            assignment[i] = row
            slot[i] = len(stored[row])
            stored[row].append(i)

    m = len(rows)
    features = np.zeros((m, config.K_v, config.D_p))
    occupancy = np.zeros(m, dtype=np.int64)
    coords = np.zeros((m, 3), dtype=np.int64)
    for key, row in rows.items():
        coords[row] = key
        occupancy[row] = len(stored[row])
        for s, i in enumerate(stored[row]):
            features[row, s] = points[i]
    return VoxelTensor(features=features, coords=coords, occupancy=occupancy,
                       assignment=assignment, slot=slot, config=config)


def voxel_centers(tensor):
    """(M_v, 3) geometric centers of the occupied voxels."""
    lo = np.asarray(tensor.config.extent_min)
    vs = np.asarray(tensor.config.voxel_size)
    return lo + (tensor.coords + 0.5) * vs


def nearest_voxel(points, tensor):
    """For each point, the occupied-voxel row whose center is nearest."""
    centers = voxel_centers(tensor)
    xyz = np.asarray(points, dtype=np.float64)[:, :3]
    # (N, M) distance table; desk-scale M_v keeps this small
    d2 = ((xyz[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def voxel_backward(grad_V, tensor, points, alpha=0.1):
    """Surrogate point gradients: alpha * mean-over-slots of grad_V at NN(i).

    Every point participates, dropped and out-of-extent ones included. With
    no occupied voxels there is nothing to route, so the gradients are zero
    and a warning is raised.
    """
    points = np.asarray(points, dtype=np.float64)
    grad_V = np.asarray(grad_V, dtype=np.float64)
    if grad_V.shape != tensor.features.shape:
        raise ValueError(f"voxel_backward: grad shape {grad_V.shape} does not match "
                         f"features {tensor.features.shape}")
    if tensor.M_v == 0:
        warnings.warn("voxel_backward: no occupied voxels, point gradients are zero")
        return np.zeros_like(points)
    per_voxel = grad_V.mean(axis=1)            # (M_v, D_p)
    nn = nearest_voxel(points, tensor)
    return alpha * per_voxel[nn]


def voxelize_op(points, config, alpha=0.1):
    """Tape-recorded voxelization: forward is exact, backward is the surrogate.

    Returns (features tensor, VoxelTensor). The recorded output is the dense
    feature block so downstream ops can consume it like any other tensor.
    """
    tensor = voxelize(points.data if isinstance(points, Tensor) else points, config)
    out = Tensor(tensor.features.copy(), requires_grad=False)
    tape = active_tape()
    if tape is not None and isinstance(points, Tensor) and tape.tracks(points):
        pts_ref = points

        def backward_fn(grad_out):
            return (voxel_backward(grad_out, tensor, pts_ref.data, alpha=alpha),)

        tape.record(out, (pts_ref,), backward_fn)
    return out, tensor
