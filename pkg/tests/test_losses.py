"""Loss tests: detection, distillation, focal mask, CVaR, composite."""

import logging
import math

import numpy as np
import pytest

from adaptivescan import losses as ls
from adaptivescan.autodiff import Tape, backward, check_gradients, ops
from adaptivescan.autodiff.tensor import Tensor
from adaptivescan.maskgen import ScanMask
from adaptivescan.rangeimage import GuidanceMask, default_grid
from adaptivescan.scenesim import ActorBox

W = ls.LossWeights()


def gt_box(center, class_id, yaw=0.0):
    return ActorBox(center=np.asarray(center, dtype=np.float64),
                    size=np.array([1.5, 0.8, 1.7]), yaw=yaw,
                    velocity=np.array([1.0, -0.5, 0.0]), class_id=class_id,
                    actor_id=0)


def outputs_for(centers, log_sizes, sincos, velocities, logits):
    return {"center": Tensor(np.asarray(centers, dtype=np.float64)),
            "log_size": Tensor(np.asarray(log_sizes, dtype=np.float64)),
            "sincos": Tensor(np.asarray(sincos, dtype=np.float64)),
            "velocity": Tensor(np.asarray(velocities, dtype=np.float64)),
            "class_logits": Tensor(np.asarray(logits, dtype=np.float64))}


def soft_mask_tensor(p_full):
    p = np.asarray(p_full, dtype=np.float64)
    return Tensor(np.stack([p, 1.0 - p], axis=-1))


# ---------------------------------------------------------------------------
# weights

def test_weight_validation():
    with pytest.raises(ValueError, match="beta"):
        ls.LossWeights(beta=1.0)
    with pytest.raises(ValueError, match="non-negative"):
        ls.LossWeights(lambda2=-0.1)
    with pytest.raises(ValueError, match="focal"):
        ls.LossWeights(alpha_f=0.0)


# ---------------------------------------------------------------------------
# detection loss

def test_perfect_predictions_near_zero_loss():
    boxes = [gt_box([3.0, 1.0, 0.0], 0, yaw=0.4), gt_box([-2.0, 5.0, 0.5], 2)]
    logits = np.full((4, 4), 0.0)
    logits[0, 0] = logits[1, 2] = 12.0
    logits[2, 3] = logits[3, 3] = 12.0
    out = outputs_for(
        centers=[boxes[0].center, boxes[1].center, [0, 0, 0], [0, 0, 0]],
        log_sizes=[np.log(boxes[0].size), np.log(boxes[1].size),
                   [0, 0, 0], [0, 0, 0]],
        sincos=[[math.sin(0.4), math.cos(0.4)], [0.0, 1.0], [0, 1], [0, 1]],
        velocities=[boxes[0].velocity, boxes[1].velocity, [0, 0, 0], [0, 0, 0]],
        logits=logits)
    loss = ls.detection_loss(out, boxes, np.array([0, 1, -1, -1]), W)
    assert 0.0 <= loss.data <= 1e-3


def test_empty_scene_confident_background():
    logits = np.zeros((3, 4))
    logits[:, 3] = 12.0
    out = outputs_for(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 2)),
                      np.zeros((3, 3)), logits)
    loss = ls.detection_loss(out, [], np.array([-1, -1, -1]), W)
    assert 0.0 <= loss.data <= 1e-3


def test_detection_loss_matches_recomputation():
    rng = np.random.default_rng(110)
    boxes = [gt_box(rng.normal(size=3), int(rng.integers(3)), yaw=rng.normal())
             for _ in range(3)]
    assignment = np.array([2, -1, 0, -1, 1])
    out = outputs_for(rng.normal(size=(5, 3)), rng.normal(size=(5, 3)),
                      rng.normal(size=(5, 2)), rng.normal(size=(5, 3)),
                      rng.normal(size=(5, 4)))
    loss = float(ls.detection_loss(out, boxes, assignment, W).data)

    logits = out["class_logits"].data
    cls_total = 0.0
    for i in range(5):
        p = np.exp(logits[i] - logits[i].max())
        p /= p.sum()
        if assignment[i] >= 0:
            target, alpha = boxes[assignment[i]].class_id, W.alpha_f
        else:
            target, alpha = 3, 1.0 - W.alpha_f
        cls_total += -alpha * (1.0 - p[target]) ** W.gamma_f * math.log(p[target])
    reg_entries = []
    for i in np.nonzero(assignment >= 0)[0]:
        b = boxes[assignment[i]]
        want = np.concatenate([b.center, np.log(b.size),
                               [math.sin(b.yaw), math.cos(b.yaw)], b.velocity])
        got = np.concatenate([out["center"].data[i], out["log_size"].data[i],
                              out["sincos"].data[i], out["velocity"].data[i]])
        reg_entries.extend(np.abs(got - want))
    expected = cls_total / 5 + np.mean(reg_entries)
    assert loss == pytest.approx(expected, abs=1e-12)


def test_detection_loss_gradients():
    rng = np.random.default_rng(111)
    boxes = [gt_box([1.0, 2.0, 0.0], 1)]
    assignment = np.array([0, -1])
    base = outputs_for(rng.normal(size=(2, 3)) + 0.5, rng.normal(size=(2, 3)) + 0.5,
                       rng.normal(size=(2, 2)) + 0.5, rng.normal(size=(2, 3)) + 0.5,
                       rng.normal(size=(2, 4)))

    def through(key):
        def fn(leaf):
            out = dict(base)
            out[key] = leaf
            return ls.detection_loss(out, boxes, assignment, W)
        return fn

    assert check_gradients(through("class_logits"), base["class_logits"].data) <= 1e-4
    assert check_gradients(through("center"), base["center"].data) <= 1e-4


def test_detection_loss_rejects_bad_assignment():
    out = outputs_for(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 2)),
                      np.zeros((2, 3)), np.zeros((2, 4)))
    with pytest.raises(ValueError, match="assignment"):
        ls.detection_loss(out, [], np.array([-1]), W)


# ---------------------------------------------------------------------------
# distillation

def test_distill_identical_is_zero():
    q = [Tensor(np.arange(6.0).reshape(2, 3)), Tensor(np.ones((2, 3)))]
    assert ls.distill_loss(q, [t.data for t in q]).data == 0.0


def test_distill_unit_offset_is_one():
    rng = np.random.default_rng(112)
    ref = rng.normal(size=(2, 4, 3))
    assert ls.distill_loss(Tensor(ref + 1.0), ref).data == pytest.approx(1.0, abs=1e-15)


def test_distill_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="shape"):
        ls.distill_loss(Tensor(np.zeros((2, 3))), np.zeros((3, 2)))


def test_distill_gradient_is_scaled_sign():
    rng = np.random.default_rng(113)
    ref = rng.normal(size=(3, 4))
    diff = rng.uniform(0.1, 1.0, size=(3, 4)) * np.where(rng.random((3, 4)) < 0.5, -1, 1)
    point = ref + diff

    leaf = Tensor(point, requires_grad=True)
    with Tape() as tape:
        backward(tape, ls.distill_loss(leaf, ref))
    np.testing.assert_array_equal(leaf.grad, np.sign(diff) / diff.size)
    assert check_gradients(lambda t: ls.distill_loss(t, ref), point) <= 1e-4


def test_distill_layer_list_equals_stack():
    rng = np.random.default_rng(114)
    pred = rng.normal(size=(2, 3, 4))
    ref = rng.normal(size=(2, 3, 4))
    as_list = ls.distill_loss([Tensor(pred[0]), Tensor(pred[1])], [ref[0], ref[1]])
    stacked = ls.distill_loss(Tensor(pred.reshape(6, 4)), ref.reshape(6, 4))
    assert as_list.data == pytest.approx(stacked.data, abs=1e-15)


# ---------------------------------------------------------------------------
# mask loss

def test_certain_positive_blocks_cost_nothing():
    soft = soft_mask_tensor(np.ones((3, 4)))
    breakdown = ls.mask_loss(soft, np.ones((3, 4)), W)
    np.testing.assert_array_equal(breakdown.per_pixel.data, 0.0)
    assert breakdown.mean.data == 0.0


def test_half_probability_closed_form():
    soft = soft_mask_tensor(np.full((2, 2), 0.5))
    breakdown = ls.mask_loss(soft, np.ones((2, 2)), W)
    expected = 0.25 * 0.25 * math.log(2.0)
    np.testing.assert_allclose(breakdown.per_pixel.data, expected, atol=1e-15)


def test_mask_loss_matches_double_loop():
    rng = np.random.default_rng(115)
    p = rng.uniform(0.05, 0.95, size=(4, 6))
    y = (rng.random((4, 6)) < 0.4).astype(np.float64)
    breakdown = ls.mask_loss(soft_mask_tensor(p), y, W)
    expected = np.zeros((4, 6))
    for u in range(4):
        for v in range(6):
            if y[u, v] == 1.0:
                expected[u, v] = -W.alpha_f * (1 - p[u, v]) ** 2 * math.log(p[u, v])
            else:
                expected[u, v] = -(1 - W.alpha_f) * p[u, v] ** 2 * math.log(1 - p[u, v])
    np.testing.assert_allclose(breakdown.per_pixel.data, expected, atol=1e-12)
    assert breakdown.mean.data == pytest.approx(expected.mean(), abs=1e-12)


def test_gamma_zero_reduces_to_balanced_cross_entropy():
    rng = np.random.default_rng(116)
    p = rng.uniform(0.1, 0.9, size=(3, 5))
    y = (rng.random((3, 5)) < 0.5).astype(np.float64)
    weights = ls.LossWeights(gamma_f=0.0, alpha_f=0.5)
    breakdown = ls.mask_loss(soft_mask_tensor(p), y, weights)
    ce = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    np.testing.assert_allclose(breakdown.per_pixel.data, 0.5 * ce, atol=1e-12)


def test_small_object_subset_extraction():
    rng = np.random.default_rng(117)
    p = rng.uniform(0.2, 0.8, size=(4, 4))
    y = np.ones((4, 4))
    small = np.zeros((4, 4), dtype=np.uint8)
    small[1, 2] = small[3, 0] = 1
    grid = default_grid()
    breakdown = ls.mask_loss(soft_mask_tensor(p), GuidanceMask(grid, y),
                             W, small_pixels=GuidanceMask(grid, small))
    assert breakdown.n_small == 2
    np.testing.assert_allclose(
        breakdown.small_losses.data,
        [breakdown.per_pixel.data[1, 2], breakdown.per_pixel.data[3, 0]], atol=1e-15)
    none = ls.mask_loss(soft_mask_tensor(p), y, W)
    assert none.n_small == 0 and none.small_losses.data.size == 0


def test_mask_loss_accepts_scan_mask():
    p = np.full((2, 2), 0.5)
    mask = ScanMask(hard=np.ones((2, 2), dtype=np.uint8),
                    soft=soft_mask_tensor(p), st=None, tau=0.5)
    breakdown = ls.mask_loss(mask, np.ones((2, 2)), W)
    assert breakdown.mean.data == pytest.approx(0.25 * 0.25 * math.log(2.0), abs=1e-15)


def test_mask_loss_shape_checks():
    with pytest.raises(ValueError, match="soft"):
        ls.mask_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 2)), W)
    with pytest.raises(ValueError, match="guidance"):
        ls.mask_loss(soft_mask_tensor(np.full((2, 2), 0.5)), np.zeros((3, 2)), W)
    with pytest.raises(ValueError, match="small"):
        ls.mask_loss(soft_mask_tensor(np.full((2, 2), 0.5)), np.zeros((2, 2)), W,
                     small_pixels=np.zeros((2, 3)))


def test_mask_loss_gradient():
    rng = np.random.default_rng(118)
    p = rng.uniform(0.15, 0.85, size=(3, 3))
    y = (rng.random((3, 3)) < 0.5).astype(np.float64)

    def fn(leaf):
        return ls.mask_loss(leaf, y, W).mean

    assert check_gradients(fn, soft_mask_tensor(p).data) <= 1e-4


# ---------------------------------------------------------------------------
# CVaR

def test_cvar_worked_example():
    value = ls.cvar_loss(np.array([0.9, 0.5, 0.3, 0.1]), beta=0.5)
    assert value.data == 0.7


def test_cvar_equal_losses_degenerate():
    for beta in (0.1, 0.25, 0.5, 0.9, 1.0):
        assert ls.cvar_loss(np.full(7, 0.42), beta).data == pytest.approx(0.42, abs=1e-15)


def test_cvar_matches_brute_force_oracle():
    rng = np.random.default_rng(119)
    for _ in range(1000):
        n = int(rng.integers(1, 20))
        losses = rng.uniform(0.0, 3.0, size=n)
        beta = float(rng.uniform(0.05, 1.0))
        value = float(ls.cvar_loss(losses, beta).data)
        ordered = sorted(losses, reverse=True)
        rank = max(math.ceil((1.0 - beta) * n), 1)
        m_star = ordered[rank - 1]
        expected = m_star + sum(max(l - m_star, 0.0) for l in ordered) / (beta * n)
        assert value == pytest.approx(expected, abs=1e-12)


def test_cvar_dominates_value_at_risk():
    rng = np.random.default_rng(120)
    for _ in range(50):
        losses = rng.uniform(0.0, 2.0, size=int(rng.integers(2, 15)))
        beta = float(rng.uniform(0.05, 0.95))
        n = losses.size
        rank = max(math.ceil((1.0 - beta) * n), 1)
        m_star = np.sort(losses)[::-1][rank - 1]
        assert ls.cvar_loss(losses, beta).data >= m_star - 1e-12


def test_cvar_at_full_tail_is_the_maximum():
    rng = np.random.default_rng(121)
    losses = rng.uniform(0.0, 1.0, size=9)
    value = ls.cvar_loss(losses, beta=1.0).data
    assert value == pytest.approx(losses.max(), abs=1e-15)
    assert value >= losses.mean()


def test_cvar_non_increasing_on_lower_half_betas():
    rng = np.random.default_rng(122)
    betas = np.linspace(0.02, 0.5, 25)
    for _ in range(40):
        losses = rng.uniform(0.0, 4.0, size=int(rng.integers(3, 30)))
        values = [ls.cvar_loss(losses, float(b)).data for b in betas]
        assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))


def test_cvar_rank_convention_allows_upper_half_reversal():
    # the literal rank rule makes the tail average jump at beta = 0.75 here
    losses = np.array([0.9, 0.5, 0.3, 0.1])
    assert ls.cvar_loss(losses, 0.75).data == pytest.approx(0.9)
    assert ls.cvar_loss(losses, 0.75).data > ls.cvar_loss(losses, 0.5).data


def test_cvar_empty_contributes_zero_with_notice(caplog):
    with caplog.at_level(logging.INFO, logger="adaptivescan.losses"):
        value = ls.cvar_loss(np.zeros(0), beta=0.25)
    assert value.data == 0.0
    assert any("empty" in rec.message for rec in caplog.records)


def test_cvar_input_validation():
    with pytest.raises(ValueError, match="beta"):
        ls.cvar_loss(np.ones(3), 0.0)
    with pytest.raises(ValueError, match="finite"):
        ls.cvar_loss(np.array([1.0, np.inf]), 0.5)


def test_cvar_gradient():
    losses = np.array([0.91, 0.52, 0.33, 0.14, 0.78])
    assert check_gradients(lambda t: ls.cvar_loss(t, 0.4), losses) <= 1e-4


# ---------------------------------------------------------------------------
# composite

def scalar(x):
    return ops.constant(np.asarray(float(x)))


def test_composite_detection_only_when_lambdas_zero():
    weights = ls.LossWeights(lambda1=0.0, lambda2=0.0, lambda3=0.0)
    terms = [{"detection": scalar(d), "distill": scalar(9.0),
              "mask": scalar(9.0), "cvar": scalar(9.0)} for d in (0.4, 0.8, 1.2)]
    assert ls.composite(terms, weights).data == pytest.approx(0.8, abs=1e-15)


def test_composite_single_frame_no_averaging():
    weights = ls.LossWeights(lambda1=1.0, lambda2=1.0, lambda3=0.5)
    terms = [{"detection": scalar(1.0), "distill": scalar(0.5),
              "mask": scalar(0.25), "cvar": scalar(2.0)}]
    assert ls.composite(terms, weights).data == pytest.approx(1.0 + 0.5 + 0.25 + 1.0,
                                                              abs=1e-15)


def test_composite_matches_arithmetic_oracle():
    rng = np.random.default_rng(123)
    weights = ls.LossWeights(lambda1=0.7, lambda2=1.3, lambda3=0.2)
    raw = rng.uniform(0.0, 2.0, size=(5, 4))
    terms = [{"detection": scalar(r[0]), "distill": scalar(r[1]),
              "mask": scalar(r[2]), "cvar": scalar(r[3])} for r in raw]
    expected = np.mean(raw[:, 0] + 0.7 * raw[:, 1] + 1.3 * raw[:, 2] + 0.2 * raw[:, 3])
    assert ls.composite(terms, weights).data == pytest.approx(expected, abs=1e-12)
    assert ls.composite(terms, weights).data >= 0.0
    with pytest.raises(ValueError, match="frame"):
        ls.composite([], weights)
