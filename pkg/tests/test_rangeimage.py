"""Projection, binning, range image, scan pattern, and guidance-mask tests."""

import math
from collections import namedtuple

import numpy as np
import pytest

from adaptivescan import rangeimage as ri

Box = namedtuple("Box", "center size yaw")


def small_grid():
    return ri.BeamGrid(H=8, W=16, phi_min=-0.4, phi_max=0.3,
                       theta_min=-math.pi, theta_max=math.pi, H_B=4, W_B=4)


# ---------------------------------------------------------------------------
# projection

def test_project_point_on_axis():
    assert ri.project_point((1.0, 0.0, 0.0)) == (1.0, 0.0, 0.0)


def test_project_point_zenith():
    r, phi, theta = ri.project_point((0.0, 0.0, 1.0))
    assert r == 1.0 and phi == math.pi / 2 and theta == 0.0


def test_project_point_rejects_origin():
    with pytest.raises(ValueError, match="origin"):
        ri.project_point((0.0, 0.0, 0.0))


def test_projection_matches_scalar_oracle():
    rng = np.random.default_rng(11)
    pts = rng.uniform(-30, 30, size=(1000, 3))
    pts = pts[np.linalg.norm(pts, axis=1) > 1e-6]
    r, phi, theta = ri.project_points(pts)
    for i, p in enumerate(pts):
        # independent scalar evaluation via the math module
        ro = math.sqrt(p[0] ** 2 + p[1] ** 2 + p[2] ** 2)
        assert abs(r[i] - ro) <= 1e-12 * max(1.0, ro)
        assert abs(phi[i] - math.asin(p[2] / ro)) <= 1e-12
        assert abs(theta[i] - math.atan2(p[1], p[0])) <= 1e-12


# ---------------------------------------------------------------------------
# binning

def test_bin_lower_corner():
    g = small_grid()
    assert ri.bin_angles(g.phi_min, g.theta_min, g) == (0, 0)


def test_bin_just_below_phi_max_hits_last_row():
    g = small_grid()
    u, _ = ri.bin_angles(g.phi_max - 1e-12, 0.0, g)
    assert u == g.H - 1


def test_bin_exact_upper_bounds_clamp():
    g = small_grid()
    assert ri.bin_angles(g.phi_max, g.theta_max, g) == (g.H - 1, g.W - 1)


def test_bin_out_of_fov_is_none():
    g = small_grid()
    assert ri.bin_angles(g.phi_max + 0.01, 0.0, g) is None


def test_bin_matches_linear_scan_oracle():
    g = small_grid()
    rng = np.random.default_rng(12)
    phis = rng.uniform(g.phi_min - 0.2, g.phi_max + 0.2, size=400)
    thetas = rng.uniform(g.theta_min, g.theta_max, size=400)
    u, v, ok = ri.bin_angles_array(phis, thetas, g)

    def scan(angle, lo, step, n):
        # walk every cell; upper edge belongs to the next cell except the last
        for k in range(n):
            hi = lo + (k + 1) * step
            if angle < hi or (k == n - 1 and angle <= hi):
                return k
        return None

    for i in range(len(phis)):
        if not (g.phi_min <= phis[i] <= g.phi_max):
            assert not ok[i]
            continue
        assert ok[i]
        assert u[i] == scan(phis[i] - g.phi_min + g.phi_min, g.phi_min, g.dphi, g.H)
        assert v[i] == scan(thetas[i], g.theta_min, g.dtheta, g.W)


# ---------------------------------------------------------------------------
# range image

def test_min_range_wins_in_shared_pixel():
    g = small_grid()
    phi, theta = g.bin_center_angles(3, 7)
    direction = np.array([math.cos(phi) * math.cos(theta),
                          math.cos(phi) * math.sin(theta),
                          math.sin(phi)])
    img = ri.build_range_image(np.array([direction * 7.0, direction * 5.0]), g)
    assert img.valid[3, 7]
    assert abs(img.ranges[3, 7] - 5.0) <= 1e-12
    assert img.points_in(3, 7) == [0, 1]


def test_empty_input_all_no_return():
    g = small_grid()
    img = ri.build_range_image(np.zeros((0, 3)), g)
    assert not img.valid.any()
    assert np.isnan(img.ranges).all()
    assert img.empty_fraction == 1.0


def test_range_image_matches_grouping_oracle():
    g = small_grid()
    rng = np.random.default_rng(13)
    pts = rng.uniform(-20, 20, size=(500, 3))
    img = ri.build_range_image(pts, g)

    groups = {}
    rejected = []
    for i, p in enumerate(pts):
        r, phi, theta = ri.project_point(p)
        cell = ri.bin_angles(phi, theta, g)
        if cell is None:
            rejected.append(i)
        else:
            groups.setdefault(cell, []).append((i, r))
    for (u, v), members in groups.items():
        assert img.valid[u, v]
        assert abs(img.ranges[u, v] - min(r for _, r in members)) <= 1e-12
        assert sorted(img.points_in(u, v)) == sorted(i for i, _ in members)
    assert img.valid.sum() == len(groups)
    assert sorted(img.out_of_fov.tolist()) == sorted(rejected)


def test_partition_property():
    g = small_grid()
    rng = np.random.default_rng(14)
    pts = rng.uniform(-25, 25, size=(2000, 3))
    img = ri.build_range_image(pts, g)
    seen = list(img.out_of_fov)
    for members in img.point_index.values():
        seen.extend(members)
    assert sorted(seen) == list(range(len(pts)))


def test_round_trip_half_bin_bound():
    g = ri.default_grid()
    rng = np.random.default_rng(15)
    n = 20000
    phi = rng.uniform(g.phi_min, g.phi_max, size=n)
    theta = rng.uniform(g.theta_min, g.theta_max, size=n)
    r = rng.uniform(1.0, 60.0, size=n)
    pts = np.stack([r * np.cos(phi) * np.cos(theta),
                    r * np.cos(phi) * np.sin(theta),
                    r * np.sin(phi)], axis=1)
    rr, pp, tt = ri.project_points(pts)
    u, v, ok = ri.bin_angles_array(pp, tt, g)
    assert ok.all()
    cphi, ctheta = g.bin_center_angles(u, v)
    assert np.abs(cphi - pp).max() <= g.dphi / 2 + 1e-12
    assert np.abs(ctheta - tt).max() <= g.dtheta / 2 + 1e-12


# ---------------------------------------------------------------------------
# scan patterns

def test_all_ones_pattern_is_identity():
    g = small_grid()
    rng = np.random.default_rng(16)
    pts = rng.uniform(-10, 10, size=(100, 3))
    kept, idx, sparsity = ri.apply_scan_pattern(np.ones((g.H, g.W)), pts, g)
    infov = ri.build_range_image(pts, g)
    expected = sorted(i for members in infov.point_index.values() for i in members)
    assert sparsity == 0.0
    assert sorted(idx.tolist()) == expected


def test_all_zeros_pattern_is_empty():
    g = small_grid()
    pts = np.array([[5.0, 0.0, 0.0]])
    kept, idx, sparsity = ri.apply_scan_pattern(np.zeros((g.H, g.W)), pts, g)
    assert kept.shape == (0, 3) and sparsity == 1.0


def test_checkerboard_pattern_matches_count_oracle():
    g = small_grid()
    pattern = np.indices((g.H, g.W)).sum(axis=0) % 2
    rng = np.random.default_rng(17)
    pts = rng.uniform(-15, 15, size=(800, 3))
    kept, idx, sparsity = ri.apply_scan_pattern(pattern, pts, g)
    count = 0
    for i, p in enumerate(pts):
        _, phi, theta = ri.project_point(p)
        cell = ri.bin_angles(phi, theta, g)
        if cell is not None and pattern[cell]:
            count += 1
    assert len(idx) == count
    assert sparsity == 1.0 - pattern.sum() / (g.H * g.W)


def test_pattern_shape_mismatch_rejected():
    g = small_grid()
    with pytest.raises(ValueError, match="pattern"):
        ri.apply_scan_pattern(np.ones((3, 3)), np.zeros((1, 3)), g)


# ---------------------------------------------------------------------------
# guidance masks

def test_guidance_mask_central_blocks_from_analytic_extent():
    g = ri.default_grid()
    box = Box(center=np.array([20.0, 0.0, 0.0]), size=(4.0, 2.0, 1.5), yaw=0.0)
    mask = ri.rasterize_guidance_mask([box], g).values

    corners = np.array([[x, y, z] for x in (18, 22) for y in (-1, 1) for z in (-0.75, 0.75)])
    thetas = np.arctan2(corners[:, 1], corners[:, 0])
    phis = np.arcsin(corners[:, 2] / np.linalg.norm(corners, axis=1))
    j_lo = int((thetas.min() - g.theta_min) / g.dtheta) // g.tile_w
    j_hi = int((thetas.max() - g.theta_min) / g.dtheta) // g.tile_w
    i_lo = int((phis.min() - g.phi_min) / g.dphi) // g.tile_h
    i_hi = int((phis.max() - g.phi_min) / g.dphi) // g.tile_h

    expected = np.zeros_like(mask)
    expected[i_lo:i_hi + 1, j_lo:j_hi + 1] = 1
    np.testing.assert_array_equal(mask, expected)


def test_guidance_mask_no_boxes():
    g = small_grid()
    assert not ri.rasterize_guidance_mask([], g).values.any()


def test_guidance_mask_box_behind_front_facing_fov():
    g = ri.BeamGrid(H=8, W=16, phi_min=-0.4, phi_max=0.3,
                    theta_min=-math.pi / 2, theta_max=math.pi / 2, H_B=4, W_B=4)
    box = Box(center=np.array([-20.0, 0.0, 0.0]), size=(4.0, 2.0, 1.5), yaw=0.0)
    assert not ri.rasterize_guidance_mask([box], g).values.any()


def test_dilation_wraps_azimuth():
    values = np.zeros((4, 8), dtype=np.uint8)
    values[1, 0] = 1
    out = ri.dilate_blocks(values, 1)
    assert out[1, 7] == 1 and out[0, 0] == 1 and out[2, 1] == 1


def test_small_object_mask_excludes_cars():
    g = ri.default_grid()
    car = Box(center=np.array([15.0, 0.0, 0.0]), size=(4.5, 1.9, 1.6), yaw=0.0)
    ped = Box(center=np.array([-10.0, 5.0, 0.0]), size=(0.7, 0.7, 1.7), yaw=0.3)
    small = ri.small_object_mask([car, ped], g).values
    full = ri.rasterize_guidance_mask([ped], g).values
    np.testing.assert_array_equal(small, full)


# ---------------------------------------------------------------------------
# export

def test_range_image_export_round_trip(tmp_path):
    g = small_grid()
    rng = np.random.default_rng(18)
    pts = rng.uniform(-20, 20, size=(300, 3))
    img = ri.build_range_image(pts, g)
    path = tmp_path / "scan.bin"
    ri.save_range_image(path, img)
    loaded = ri.load_range_image(path)
    np.testing.assert_array_equal(loaded.valid, img.valid)
    np.testing.assert_array_equal(loaded.ranges[loaded.valid], img.ranges[img.valid])
    ri.range_image_to_csv(tmp_path / "scan.csv", img)
    rows = (tmp_path / "scan.csv").read_text().strip().split("\n")
    assert len(rows) == g.H
