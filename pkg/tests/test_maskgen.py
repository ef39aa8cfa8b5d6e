"""Mask generator tests: scattering, encoding, Gumbel sampling, patterns."""

import json
import math

import numpy as np
import pytest

from adaptivescan import maskgen as mg
from adaptivescan.autodiff import Tape, backward, check_gradients, ops
from adaptivescan.autodiff.tensor import Tensor
from adaptivescan.rangeimage import BeamGrid


def small_grid():
    return BeamGrid(H=8, W=8, phi_min=-0.4, phi_max=0.3,
                    theta_min=-math.pi, theta_max=math.pi, H_B=4, W_B=4)


def identity_like_params(dim, head_hidden=4):
    """Residual convs zeroed (pass-through), head FFN an exact identity."""
    eye_h = np.concatenate([np.eye(2), -np.eye(2)], axis=1)       # (2, 4)
    return {
        "dw1_w1": Tensor(np.zeros((dim, 3, 3))), "dw1_w2": Tensor(np.zeros((dim, 3, 3))),
        "dw2_w1": Tensor(np.zeros((dim, 3, 3))), "dw2_w2": Tensor(np.zeros((dim, 3, 3))),
        "res1_w1": Tensor(np.zeros((dim, dim, 3, 3))), "res1_w2": Tensor(np.zeros((dim, dim, 3, 3))),
        "res2_w1": Tensor(np.zeros((dim, dim, 3, 3))), "res2_w2": Tensor(np.zeros((dim, dim, 3, 3))),
        "proj_w": Tensor(np.stack([np.full((dim, 1, 1), 1.0 / dim),
                                   np.zeros((dim, 1, 1))])),
        "proj_b": Tensor(np.zeros(2)),
        "head_w1": Tensor(eye_h),
        "head_b1": Tensor(np.zeros(4)),
        "head_w2": Tensor(np.concatenate([np.eye(2), -np.eye(2)], axis=0)),
        "head_b2": Tensor(np.zeros(2)),
    }


def plain_mask(hard, soft_full, tau=0.3):
    hard = np.asarray(hard, dtype=np.uint8)
    soft = np.stack([np.asarray(soft_full, dtype=np.float64),
                     1.0 - np.asarray(soft_full, dtype=np.float64)], axis=-1)
    return mg.ScanMask(hard=hard, soft=Tensor(soft), st=None, tau=tau)


# ---------------------------------------------------------------------------
# scattering

def test_scatter_places_query_in_expected_block():
    g = small_grid()
    q = [Tensor(np.ones((1, 4))), Tensor(2 * np.ones((1, 4)))]
    center = np.array([[10.0, 0.0, 0.0]])     # phi=0 -> row 4; theta=0 -> col 4
    out = mg.scatter_queries(q, center, g)
    assert out.data.shape == (4, 4, 4)
    # phi=0 falls in pixel row 4 (block 2); theta=0 in pixel col 4 (block 2)
    np.testing.assert_array_equal(out.data[:, 2, 2], np.full(4, 3.0))
    assert np.abs(out.data).sum() == 12.0


def test_scatter_skips_out_of_view_centers():
    g = small_grid()
    q = [Tensor(np.ones((2, 4)))]
    centers = np.array([[0.5, 0.0, 10.0], [0.0, 0.0, 0.0]])   # high elevation; origin
    out = mg.scatter_queries(q, centers, g)
    assert np.abs(out.data).sum() == 0.0


def test_scatter_rejects_center_count_mismatch():
    with pytest.raises(ValueError, match="centers"):
        mg.scatter_queries([Tensor(np.ones((2, 4)))], np.zeros((3, 3)), small_grid())


# ---------------------------------------------------------------------------
# encoding

def test_empty_scene_logits_spatially_constant():
    g = small_grid()
    rng = np.random.default_rng(71)
    params = mg.init_params(4, rng)
    params["proj_b"] = Tensor(np.array([0.3, -0.2]))
    params["head_b1"] = Tensor(rng.normal(size=8))
    params["head_b2"] = Tensor(rng.normal(size=2))
    q = [Tensor(rng.normal(size=(3, 4)))]
    far = np.tile([[0.5, 0.0, 50.0]], (3, 1))      # all out of the vertical fov
    z = mg.encode(q, far, params, g).data
    assert z.shape == (4, 4, 2)
    np.testing.assert_allclose(z - z[0, 0], 0.0, atol=1e-12)
    # bias-only response through the head
    biased = np.maximum(params["proj_b"].data @ params["head_w1"].data
                        + params["head_b1"].data, 0.0)
    expected = biased @ params["head_w2"].data + params["head_b2"].data
    np.testing.assert_allclose(z[0, 0], expected, atol=1e-12)


def test_single_query_lifts_full_logit_of_its_block():
    g = small_grid()
    params = identity_like_params(4)
    q = [Tensor(np.full((1, 4), 2.0))]
    z = mg.encode(q, np.array([[10.0, 0.0, 0.0]]), params, g).data
    full = z[..., 0]
    assert full[2, 2] > 0.0
    others = np.delete(full.ravel(), 2 * 4 + 2)
    assert (full[2, 2] > others).all()


def test_encoder_gradients_match_fd():
    g = small_grid()
    rng = np.random.default_rng(72)
    params = mg.init_params(4, rng)
    q0 = rng.normal(size=(3, 4))
    centers = np.array([[10.0, 0.0, 0.0], [8.0, 3.0, -0.5], [12.0, -4.0, 0.5]])
    w = rng.normal(size=(4, 4, 2))

    def through_queries(leaf):
        z = mg.encode([leaf], centers, params, g)
        return ops.reduce_sum(ops.mul(z, ops.constant(w)))

    assert check_gradients(through_queries, q0) <= 1e-4

    def through_res_weight(leaf):
        p = dict(params)
        p["res1_w1"] = leaf
        z = mg.encode([Tensor(q0)], centers, p, g)
        return ops.reduce_sum(ops.mul(z, ops.constant(w)))

    assert check_gradients(through_res_weight, params["res1_w1"].data) <= 1e-4


# ---------------------------------------------------------------------------
# gumbel softmax

def test_gumbel_rejects_bad_tau_and_nonfinite():
    z = np.zeros((2, 2, 2))
    with pytest.raises(ValueError, match="tau"):
        mg.gumbel_softmax(z, 0.0)
    bad = z.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="finite"):
        mg.gumbel_softmax(bad, 0.5)


def test_equal_logits_no_noise_split_evenly():
    mask = mg.gumbel_softmax(np.zeros((3, 3, 2)), tau=0.7)
    np.testing.assert_allclose(mask.soft.data, 0.5, atol=1e-15)
    # argmax ties resolve to the full channel
    assert mask.hard.all()


def test_logit_gap_saturates_soft():
    z = np.zeros((1, 1, 2))
    z[0, 0, 0] = 10.0
    mask = mg.gumbel_softmax(z, tau=0.1)
    assert mask.soft.data[0, 0, 0] >= 1.0 - 1e-40


def test_soft_rows_sum_to_one_with_noise():
    rng = np.random.default_rng(73)
    z = rng.normal(size=(6, 8, 2)) * 3
    mask = mg.gumbel_softmax(z, tau=0.4, rng=np.random.default_rng(1))
    np.testing.assert_allclose(mask.soft.data.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(mask.hard, np.argmax(mask.soft.data, axis=-1) == 0)
    np.testing.assert_array_equal(mask.st.data, np.stack([mask.hard, 1 - mask.hard], axis=-1))


def test_shift_invariance_per_block():
    rng = np.random.default_rng(74)
    z = rng.normal(size=(4, 4, 2))
    shifted = z + rng.normal(size=(4, 4, 1))    # same constant to both channels
    a = mg.gumbel_softmax(z, tau=0.5)
    b = mg.gumbel_softmax(shifted, tau=0.5)
    np.testing.assert_allclose(a.soft.data, b.soft.data, atol=1e-12)
    np.testing.assert_array_equal(a.hard, b.hard)


def test_low_temperature_approaches_one_hot():
    rng = np.random.default_rng(75)
    z = np.zeros((5, 5, 2))
    gap = rng.uniform(1.0, 4.0, size=(5, 5))
    sign = np.where(rng.random((5, 5)) < 0.5, 1.0, -1.0)
    z[..., 0] = sign * gap / 2
    z[..., 1] = -sign * gap / 2
    mask = mg.gumbel_softmax(z, tau=1e-3)
    onehot = np.stack([mask.hard, 1 - mask.hard], axis=-1)
    assert np.abs(mask.soft.data - onehot).max() <= 1e-9


def test_same_seed_same_mask():
    z = np.random.default_rng(76).normal(size=(4, 6, 2))
    a = mg.gumbel_softmax(z, tau=0.5, rng=np.random.default_rng(11))
    b = mg.gumbel_softmax(z, tau=0.5, rng=np.random.default_rng(11))
    np.testing.assert_array_equal(a.hard, b.hard)
    np.testing.assert_array_equal(a.soft.data, b.soft.data)


def test_hard_frequency_matches_gumbel_max_property():
    # one logit pair replicated over 10^5 independent blocks
    z = np.tile(np.array([1.0, 0.3]), (250, 400, 1))
    mask = mg.gumbel_softmax(z, tau=0.5, rng=np.random.default_rng(77))
    freq = mask.hard.mean()
    expected = 1.0 / (1.0 + np.exp(-(1.0 - 0.3)))
    assert abs(freq - expected) <= 0.01


def test_straight_through_gradient_equals_soft_path():
    rng = np.random.default_rng(78)
    z0 = rng.normal(size=(3, 3, 2))
    w = rng.normal(size=(3, 3, 2))

    def grad_of(path):
        leaf = Tensor(z0.copy(), requires_grad=True)
        with Tape() as tape:
            mask = mg.gumbel_softmax(leaf, tau=0.6)
            target = mask.st if path == "st" else mask.soft
            loss = ops.reduce_sum(ops.mul(target, ops.constant(w)))
            backward(tape, loss)
        return leaf.grad

    np.testing.assert_allclose(grad_of("st"), grad_of("soft"), atol=1e-15)

    def soft_composite(leaf):
        mask = mg.gumbel_softmax(leaf, tau=0.6)
        return ops.reduce_sum(ops.mul(mask.soft, ops.constant(w)))

    assert check_gradients(soft_composite, z0) <= 1e-4


# ---------------------------------------------------------------------------
# inference patterns

def test_all_full_blocks_enable_everything():
    g = small_grid()
    mask = plain_mask(np.ones((4, 4)), np.full((4, 4), 0.9))
    pattern = mg.inference_pattern(mask, mg.DEFAULT_LEVELS, g)
    assert pattern.all()
    assert mg.expected_sparsity(mask, mg.DEFAULT_LEVELS, g) == 0.0


def test_quantization_nearest_and_ties_up():
    assert mg.quantize_rate(0.10, mg.DEFAULT_LEVELS) == 0.125
    assert mg.quantize_rate(0.09375, mg.DEFAULT_LEVELS) == 0.125   # midpoint
    assert mg.quantize_rate(0.375, mg.DEFAULT_LEVELS) == 0.5       # midpoint
    assert mg.quantize_rate(0.01, mg.DEFAULT_LEVELS) == 0.0625
    assert mg.quantize_rate(0.9, mg.DEFAULT_LEVELS) == 0.5


def test_level_set_validated():
    g = small_grid()
    mask = plain_mask(np.zeros((4, 4)), np.full((4, 4), 0.3))
    with pytest.raises(ValueError, match="level"):
        mg.inference_pattern(mask, [], g, rng=np.random.default_rng(0))
    with pytest.raises(ValueError, match="level"):
        mg.inference_pattern(mask, [0.0, 0.5], g, rng=np.random.default_rng(0))
    with pytest.raises(ValueError, match="rng"):
        mg.inference_pattern(mask, [0.25], g)


def test_sparse_block_bernoulli_concentration():
    grid = BeamGrid(H=200, W=200, phi_min=-0.4, phi_max=0.3,
                    theta_min=-math.pi, theta_max=math.pi, H_B=100, W_B=100)
    mask = plain_mask(np.zeros((100, 100)), np.full((100, 100), 0.3))
    pattern = mg.inference_pattern(mask, mg.DEFAULT_LEVELS, grid,
                                   rng=np.random.default_rng(79))
    assert abs(pattern.mean() - 0.25) <= 0.01


def test_pattern_deterministic_given_seed():
    g = small_grid()
    mask = plain_mask(np.eye(4), np.full((4, 4), 0.2))
    a = mg.inference_pattern(mask, mg.DEFAULT_LEVELS, g, rng=np.random.default_rng(5))
    b = mg.inference_pattern(mask, mg.DEFAULT_LEVELS, g, rng=np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


def test_expected_sparsity_all_sparse():
    g = small_grid()
    mask = plain_mask(np.zeros((4, 4)), np.full((4, 4), 0.125))
    assert mg.expected_sparsity(mask, mg.DEFAULT_LEVELS, g) == pytest.approx(0.875)


def test_expected_sparsity_matches_monte_carlo():
    g = small_grid()
    rng_soft = np.random.default_rng(80)
    mask = plain_mask((np.arange(16).reshape(4, 4) % 3 == 0).astype(np.uint8),
                      rng_soft.uniform(0.05, 0.6, size=(4, 4)))
    expected = mg.expected_sparsity(mask, mg.DEFAULT_LEVELS, g)
    rng = np.random.default_rng(81)
    realized = [1.0 - mg.inference_pattern(mask, mg.DEFAULT_LEVELS, g, rng=rng).mean()
                for _ in range(10000)]
    assert abs(np.mean(realized) - expected) <= 0.005


# ---------------------------------------------------------------------------
# export

def test_mask_export_round_trip(tmp_path):
    g = small_grid()
    mask = mg.gumbel_softmax(np.random.default_rng(82).normal(size=(4, 4, 2)),
                             tau=0.3, rng=np.random.default_rng(2))
    pattern = mg.inference_pattern(mask, mg.DEFAULT_LEVELS, g,
                                   rng=np.random.default_rng(3))
    path = mg.save_mask(tmp_path / "mask.bin", mask, mg.DEFAULT_LEVELS, g, pattern=pattern)
    arrays, meta = mg.load_mask(path)
    np.testing.assert_array_equal(arrays["hard"], mask.hard)
    np.testing.assert_array_equal(arrays["soft"], mask.soft.data)
    np.testing.assert_array_equal(arrays["pattern"], pattern)
    assert meta["tau"] == 0.3
    sidecar = json.loads((tmp_path / "mask.json").read_text())
    assert sidecar["levels"] == list(mg.DEFAULT_LEVELS)
    assert sidecar["realized_sparsity"] == pytest.approx(1.0 - pattern.mean())
