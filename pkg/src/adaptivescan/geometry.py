"""Oriented-box geometry shared by the simulator, rasterizer, and metrics."""

import numpy as np


def rot_z(yaw):
    """3x3 rotation about +z by `yaw` radians."""
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def box_corners(center, size, yaw):
    """The 8 corners of a 7-DoF box, world/sensor frame, shape (8, 3)."""
    l, w, h = size
    half = np.array([l, w, h]) / 2.0
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                     dtype=np.float64)
    local = signs * half
    return local @ rot_z(yaw).T + np.asarray(center, dtype=np.float64)


def box_lattice(center, size, yaw, n=3):
    """An n^3 sample lattice spanning the box, corners included, shape (n^3, 3)."""
    if n < 2:
        raise ValueError(f"box_lattice: n must be >= 2, got {n}")
    fr = np.linspace(-0.5, 0.5, n)
    gx, gy, gz = np.meshgrid(fr, fr, fr, indexing="ij")
    local = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1) * np.asarray(size)
    return local @ rot_z(yaw).T + np.asarray(center, dtype=np.float64)


def bev_footprint_area(size):
    """Top-down footprint area (length * width) in square meters."""
    return float(size[0]) * float(size[1])


def points_in_bev_rect(points_xy, center_xy, length, width, yaw):
    """Boolean mask of 2D points inside a rotated BEV rectangle."""
    d = np.asarray(points_xy, dtype=np.float64) - np.asarray(center_xy, dtype=np.float64)
    c, s = np.cos(yaw), np.sin(yaw)
    local_x = d[:, 0] * c + d[:, 1] * s
    local_y = -d[:, 0] * s + d[:, 1] * c
    return (np.abs(local_x) <= length / 2.0) & (np.abs(local_y) <= width / 2.0)
