"""Training objectives: detection, query distillation, focal mask, CVaR tail.

The mask loss keeps its per-block values around so the CVaR term can read
off the small-object subset. Saturated probabilities (an exact 0 from a
hugely confident softmax) produce an infinite focal loss on the wrong side;
that is the honest value, so nothing is clamped here.
"""

import dataclasses
import logging
import math

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor

log = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0      # distillation
    lambda2: float = 1.0      # mask
    lambda3: float = 0.5      # CVaR
    beta: float = 0.25
    gamma_f: float = 2.0
    alpha_f: float = 0.25

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.gamma_f < 0 or not 0.0 < self.alpha_f < 1.0:
            raise ValueError("bad focal parameters")


@dataclasses.dataclass
class MaskLossBreakdown:
    per_pixel: Tensor          # (H_B, W_B)
    mean: Tensor               # scalar
    small_losses: Tensor       # (N_small,), empty when no small pixels
    n_small: int


def _focal(p_true, alpha_true, gamma):
    """-alpha (1 - p)^gamma log p, elementwise on the true-class probability."""
    mod = ops.pow_const(ops.sub(ops.constant(np.ones(())), p_true), gamma)
    return ops.neg(ops.mul(ops.constant(alpha_true), ops.mul(mod, ops.log(p_true))))


def detection_loss(outputs, gt_boxes, assignment, weights):
    """Focal classification over every query + L1 regression on matches.

    `outputs` is the detector head dict; unmatched queries train toward the
    background class (last logit). Regression compares center, log-size,
    (sin, cos) yaw, and velocity, averaged over all matched entries.
    """
    logits = outputs["class_logits"]
    n_q, n_cls = logits.data.shape
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.shape != (n_q,):
        raise ValueError("assignment length must equal the query count")

    targets = np.full(n_q, n_cls - 1, dtype=np.int64)
    matched = np.nonzero(assignment >= 0)[0]
    for i in matched:
        targets[i] = gt_boxes[assignment[i]].class_id
    onehot = np.zeros((n_q, n_cls))
    onehot[np.arange(n_q), targets] = 1.0

    probs = ops.softmax(logits, axis=-1)
    p_true = ops.reduce_sum(ops.mul(probs, ops.constant(onehot)), axis=1)
    alpha = np.where(targets == n_cls - 1, 1.0 - weights.alpha_f, weights.alpha_f)
    classification = ops.reduce_mean(_focal(p_true, alpha, weights.gamma_f))

    if matched.size == 0:
        return classification

    rows = [np.concatenate([
        gt_boxes[assignment[i]].center,
        np.log(gt_boxes[assignment[i]].size),
        [math.sin(gt_boxes[assignment[i]].yaw), math.cos(gt_boxes[assignment[i]].yaw)],
        gt_boxes[assignment[i]].velocity]) for i in matched]
    predicted = ops.concat([ops.take(outputs["center"], matched),
                            ops.take(outputs["log_size"], matched),
                            ops.take(outputs["sincos"], matched),
                            ops.take(outputs["velocity"], matched)], axis=1)
    regression = ops.reduce_mean(ops.absolute(
        ops.sub(predicted, ops.constant(np.stack(rows)))))
    return ops.add(classification, regression)


def distill_loss(predicted, reference):
    """Mean absolute difference between query stacks; the teacher side is
    detached, so gradients only reach the prediction."""
    if isinstance(predicted, (list, tuple)):
        predicted = ops.concat([ops.as_tensor(p) for p in predicted], axis=0)
    else:
        predicted = ops.as_tensor(predicted)
    ref = np.concatenate([np.asarray(r.data if isinstance(r, Tensor) else r)
                          for r in reference], axis=0) \
        if isinstance(reference, (list, tuple)) else \
        np.asarray(reference.data if isinstance(reference, Tensor) else reference)
    if predicted.data.shape != ref.shape:
        raise ValueError(f"stack shapes differ: {predicted.data.shape} vs {ref.shape}")
    return ops.reduce_mean(ops.absolute(ops.sub(predicted, ops.constant(ref))))


def mask_loss(soft, guidance, weights, small_pixels=None):
    """Per-block focal loss of the 'full' probability against the guidance
    mask, with the per-pixel map retained for the CVaR tail."""
    soft = soft.soft if hasattr(soft, "soft") else ops.as_tensor(soft)
    if soft.data.ndim != 3 or soft.data.shape[-1] != 2:
        raise ValueError("soft mask must be (H_B, W_B, 2)")
    target = np.asarray(guidance.values if hasattr(guidance, "values") else guidance,
                        dtype=np.float64)
    hb, wb, _ = soft.data.shape
    if target.shape != (hb, wb):
        raise ValueError("guidance grid does not match the mask")

    p_full = ops.reshape(ops.take(ops.transpose(soft, (2, 0, 1)), [0]), (hb, wb))
    # p of the labeled class: p on positives, 1 - p on negatives
    p_true = ops.add(ops.mul(ops.constant(target), p_full),
                     ops.mul(ops.constant(1.0 - target),
                             ops.sub(ops.constant(np.ones(())), p_full)))
    alpha = np.where(target == 1.0, weights.alpha_f, 1.0 - weights.alpha_f)
    per_pixel = _focal(p_true, alpha, weights.gamma_f)
    mean = ops.reduce_mean(per_pixel)

    if small_pixels is None:
        flat_idx = np.zeros(0, dtype=np.int64)
    else:
        small = np.asarray(small_pixels.values if hasattr(small_pixels, "values")
                           else small_pixels)
        if small.shape != (hb, wb):
            raise ValueError("small-object grid does not match the mask")
        flat_idx = np.nonzero(small.reshape(-1))[0]
    small_losses = ops.take(ops.reshape(per_pixel, (hb * wb,)), flat_idx)
    return MaskLossBreakdown(per_pixel, mean, small_losses, int(flat_idx.size))


def cvar_loss(losses, beta):
    """Tail average per the risk formulation: the value at risk m* is the
    loss ranked ceil((1-beta) N) from the top, and the excess over it is
    averaged with weight 1/(beta N)."""
    if not 0.0 < beta <= 1.0:
        raise ValueError("beta must lie in (0, 1]")
    losses = ops.as_tensor(losses)
    flat = ops.reshape(losses, (losses.data.size,))
    n = flat.data.size
    if n == 0:
        log.info("cvar_loss: empty small-object set, contributing 0")
        return ops.constant(np.zeros(()))
    if not np.isfinite(flat.data).all():
        raise ValueError("losses must be finite")
    order = np.argsort(-flat.data, kind="stable")
    rank = max(math.ceil((1.0 - beta) * n), 1)
    m_star = ops.take(flat, [order[rank - 1]])
    excess = ops.maximum(ops.sub(flat, m_star), ops.constant(np.zeros(())))
    return ops.add(ops.reshape(m_star, ()),
                   ops.scale(ops.reduce_sum(excess), 1.0 / (beta * n)))


def composite(frame_terms, weights):
    """(1/(T-1)) sum over frames of detection + weighted auxiliary terms.

    `frame_terms` holds one dict per trained frame (t = 2..T) with keys
    detection/distill/mask/cvar mapping to scalar tensors.
    """
    if not frame_terms:
        raise ValueError("need at least one frame term (T >= 2)")
    total = None
    for term in frame_terms:
        frame = ops.add(ops.add(term["detection"],
                                ops.scale(term["distill"], weights.lambda1)),
                        ops.add(ops.scale(term["mask"], weights.lambda2),
                                ops.scale(term["cvar"], weights.lambda3)))
        total = frame if total is None else ops.add(total, frame)
    return ops.scale(total, 1.0 / len(frame_terms))
