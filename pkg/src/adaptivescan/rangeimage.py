"""Spherical projection, range images, scan patterns, and guidance masks.

The sensor's angular addressing is a (H elevation rows) x (W azimuth columns)
grid; blocks tile it into H_B x W_B decision cells. Projection follows
r = |p|, phi = arcsin(z / r), theta = atan2(y, x), and binning floors the
normalized angle, with the exact upper fov bound clamped into the last bin.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import containers
from .geometry import box_corners, box_lattice, bev_footprint_area


@dataclass(frozen=True)
class BeamGrid:
    """Angular grid plus the block tiling used for scan decisions."""

    H: int
    W: int
    phi_min: float
    phi_max: float
    theta_min: float
    theta_max: float
    H_B: int
    W_B: int

    def __post_init__(self):
        if not (self.phi_min < self.phi_max and self.theta_min < self.theta_max):
            raise ValueError("BeamGrid: fov bounds must be increasing")
        if self.H <= 0 or self.W <= 0 or self.H_B <= 0 or self.W_B <= 0:
            raise ValueError("BeamGrid: dimensions must be positive")
        if self.H % self.H_B or self.W % self.W_B:
            raise ValueError(
                f"BeamGrid: H={self.H}, W={self.W} not divisible by blocks "
                f"H_B={self.H_B}, W_B={self.W_B}")

    @property
    def dphi(self):
        return (self.phi_max - self.phi_min) / self.H

    @property
    def dtheta(self):
        return (self.theta_max - self.theta_min) / self.W

    @property
    def tile_h(self):
        return self.H // self.H_B

    @property
    def tile_w(self):
        return self.W // self.W_B

    def bin_center_angles(self, u, v):
        """(phi, theta) at the center of bin (u, v); accepts arrays."""
        phi = self.phi_min + (np.asarray(u) + 0.5) * self.dphi
        theta = self.theta_min + (np.asarray(v) + 0.5) * self.dtheta
        return phi, theta

    def to_dict(self):
        return {"H": self.H, "W": self.W, "phi_min": self.phi_min,
                "phi_max": self.phi_max, "theta_min": self.theta_min,
                "theta_max": self.theta_max, "H_B": self.H_B, "W_B": self.W_B}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in ("H", "W", "phi_min", "phi_max",
                                        "theta_min", "theta_max", "H_B", "W_B")})


def default_grid():
    """HDL-32E-like desk grid: 32x256 beams, -25..+15 deg vertical, 360 deg azimuth."""
    return BeamGrid(H=32, W=256,
                    phi_min=np.deg2rad(-25.0), phi_max=np.deg2rad(15.0),
                    theta_min=-np.pi, theta_max=np.pi,
                    H_B=8, W_B=32)


def project_point(p):
    """One point to (r, phi, theta); rejects the degenerate origin."""
    x, y, z = float(p[0]), float(p[1]), float(p[2])
    r = np.sqrt(x * x + y * y + z * z)
    if r == 0.0:
        raise ValueError("project_point: point at the sensor origin has no direction")
    if not np.isfinite(r):
        raise ValueError("project_point: non-finite point")
    return r, np.arcsin(z / r), np.arctan2(y, x)


def project_points(points):
    """Vectorized projection of an (N, 3) cloud to (r, phi, theta) arrays."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    r = np.sqrt((pts * pts).sum(axis=1))
    if np.any(r == 0.0):
        raise ValueError("project_points: point at the sensor origin has no direction")
    phi = np.arcsin(np.clip(pts[:, 2] / r, -1.0, 1.0))
    theta = np.arctan2(pts[:, 1], pts[:, 0])
    return r, phi, theta


def bin_angles(phi, theta, grid):
    """Map one (phi, theta) to its (u, v) bin, or None when out of fov."""
    u, v, ok = bin_angles_array(np.asarray([phi]), np.asarray([theta]), grid)
    if not ok[0]:
        return None
    return int(u[0]), int(v[0])


def bin_angles_array(phi, theta, grid):
    """Vectorized binning -> (u, v, in_fov). Upper bounds clamp into the last bin."""
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    ok = ((phi >= grid.phi_min) & (phi <= grid.phi_max) &
          (theta >= grid.theta_min) & (theta <= grid.theta_max))
    u = np.floor((phi - grid.phi_min) / grid.dphi).astype(np.int64)
    v = np.floor((theta - grid.theta_min) / grid.dtheta).astype(np.int64)
    np.clip(u, 0, grid.H - 1, out=u)
    np.clip(v, 0, grid.W - 1, out=v)
    return u, v, ok


@dataclass
class RangeImage:
    """Per-beam minimum return range with a dedicated validity channel.

    `ranges` holds NaN at pixels with no return; `valid` is the authoritative
    no-return flag. `point_index` maps populated (u, v) pixels to the input
    indices that landed there.
    """

    grid: BeamGrid
    ranges: np.ndarray
    valid: np.ndarray
    point_index: dict = field(default_factory=dict)
    out_of_fov: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def points_in(self, u, v):
        return self.point_index.get((u, v), [])

    @property
    def empty_fraction(self):
        """Fraction of pixels with no return, the scan-sparsity metric."""
        return 1.0 - float(self.valid.sum()) / (self.grid.H * self.grid.W)


def build_range_image(points, grid):
    """Bin points and keep the minimum range per pixel."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    ranges = np.full((grid.H, grid.W), np.inf)
    index = {}
    if pts.shape[0] == 0:
        valid = np.zeros((grid.H, grid.W), dtype=bool)
        ranges[:] = np.nan
        return RangeImage(grid, ranges, valid, index)

    r, phi, theta = project_points(pts)
    u, v, ok = bin_angles_array(phi, theta, grid)
    out_of_fov = np.flatnonzero(~ok)
    u, v, r_in = u[ok], v[ok], r[ok]
    idx_in = np.flatnonzero(ok)

    flat = u * grid.W + v
    np.minimum.at(ranges.reshape(-1), flat, r_in)
    order = np.argsort(flat, kind="stable")
    sorted_flat = flat[order]
    boundaries = np.flatnonzero(np.diff(sorted_flat)) + 1
    for group in np.split(order, boundaries):
        key = int(flat[group[0]])
        index[(key // grid.W, key % grid.W)] = [int(idx_in[g]) for g in group]

    valid = np.isfinite(ranges)
    ranges[~valid] = np.nan
    return RangeImage(grid, ranges, valid, index, out_of_fov)


def apply_scan_pattern(beam_pattern, points, grid):
    """Filter a cloud down to beams enabled in the pattern.

    Returns (retained points, retained input indices, achieved sparsity),
    sparsity being exactly the fraction of pattern zeros.
    """
    pattern = np.asarray(beam_pattern)
    if pattern.shape != (grid.H, grid.W):
        raise ValueError(
            f"apply_scan_pattern: pattern shape {pattern.shape} != grid {(grid.H, grid.W)}")
    sparsity = 1.0 - float((pattern != 0).sum()) / (grid.H * grid.W)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        return pts, np.zeros(0, dtype=np.int64), sparsity
    _, phi, theta = project_points(pts)
    u, v, ok = bin_angles_array(phi, theta, grid)
    keep = ok & (pattern[u, v] != 0)
    idx = np.flatnonzero(keep)
    return pts[idx], idx, sparsity


@dataclass
class GuidanceMask:
    """Block-level binary target: 1 where ground-truth boxes project."""

    grid: BeamGrid
    values: np.ndarray  # (H_B, W_B) uint8


def _box_sample_points(box, lattice_n):
    samples = [box_corners(box.center, box.size, box.yaw)]
    samples.append(box_lattice(box.center, box.size, box.yaw, n=lattice_n))
    return np.concatenate(samples, axis=0)


def _blocks_for_box(box, grid, lattice_n):
    pts = _box_sample_points(box, lattice_n)
    r = np.sqrt((pts * pts).sum(axis=1))
    pts = pts[r > 0]
    _, phi, theta = project_points(pts)
    u, v, ok = bin_angles_array(phi, theta, grid)
    blocks = np.zeros((grid.H_B, grid.W_B), dtype=np.uint8)
    blocks[u[ok] // grid.tile_h, v[ok] // grid.tile_w] = 1
    return blocks


def dilate_blocks(values, radius, wrap_azimuth=True):
    """Grow set blocks by a square radius; azimuth wraps around the circle."""
    if radius <= 0:
        return values.copy()
    out = values.copy()
    hb, wb = values.shape
    src_i, src_j = np.nonzero(values)
    for di in range(-radius, radius + 1):
        for dj in range(-radius, radius + 1):
            ii = src_i + di
            keep = (ii >= 0) & (ii < hb)
            jj = src_j[keep] + dj
            jj = jj % wb if wrap_azimuth else np.clip(jj, 0, wb - 1)
            out[ii[keep], jj] = 1
    return out


def rasterize_guidance_mask(boxes, grid, lattice_n=3, dilation=0):
    """Blocks touched by any box's corner or lattice sample, optionally dilated."""
    values = np.zeros((grid.H_B, grid.W_B), dtype=np.uint8)
    for box in boxes:
        values |= _blocks_for_box(box, grid, lattice_n)
    values = dilate_blocks(values, dilation)
    return GuidanceMask(grid, values)


def small_object_mask(boxes, grid, area_threshold=2.5, lattice_n=3, dilation=0):
    """Guidance blocks restricted to boxes with small BEV footprints.

    The default threshold keeps pedestrians and cyclists in, cars out.
    """
    values = np.zeros((grid.H_B, grid.W_B), dtype=np.uint8)
    for box in boxes:
        if bev_footprint_area(box.size) < area_threshold:
            values |= _blocks_for_box(box, grid, lattice_n)
    values = dilate_blocks(values, dilation)
    return GuidanceMask(grid, values)


def save_range_image(path, image):
    """Portable binary export (grid metadata, ranges, validity flags)."""
    containers.save_container(
        path,
        {"ranges": np.nan_to_num(image.ranges, nan=-1.0),
         "valid": image.valid.astype(np.uint8)},
        kind="range_image",
        meta={"grid": image.grid.to_dict(), "sentinel": "valid==0 means no return"})


def load_range_image(path):
    meta, arrays = containers.load_container(path, expect_kind="range_image")
    grid = BeamGrid.from_dict(meta["grid"])
    valid = arrays["valid"].astype(bool)
    ranges = arrays["ranges"].astype(np.float64)
    ranges[~valid] = np.nan
    return RangeImage(grid, ranges, valid)


def range_image_to_csv(path, image):
    """Matrix CSV (H rows x W columns); empty cells mean no return."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for u in range(image.grid.H):
            row = [repr(float(image.ranges[u, v])) if image.valid[u, v] else ""
                   for v in range(image.grid.W)]
            writer.writerow(row)
