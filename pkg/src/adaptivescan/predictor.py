"""History-aware query prediction.

Forecasts the current frame's object queries from a buffer of the T most
recent frames, with no sensor data from the current frame. Each decoder
layer's queries are unrolled through a motion-guided step: historical box
centers are advanced by their velocities and rotated into the next frame,
a distance/class-gated attention map associates queries across the pair,
and the attended history is folded into the later frame's queries through
a small FFN. One parameter set serves every layer and every unroll step.

The buffer itself is never mutated during prediction: the running estimate
produced by each step is threaded forward while history is always read
from the stored snapshots.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor


@dataclass
class BufferFrame:
    """Detached per-frame snapshot of the detector's query state."""

    queries: np.ndarray       # (L, N_q, D)
    centers: np.ndarray       # (N_q, 3) sensor frame, meters
    velocities: np.ndarray    # (N_q, 3) sensor frame, m/s
    class_ids: np.ndarray     # (N_q,) argmax class per query
    scores: np.ndarray        # (N_q,) confidence of that class
    rotation: np.ndarray      # (3, 3) world-to-sensor
    timestamp: float

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=np.float64)
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.queries.ndim != 3:
            raise ValueError(f"BufferFrame: queries must be (L, N_q, D), got {self.queries.shape}")
        n = self.queries.shape[1]
        if self.centers.shape != (n, 3) or np.shape(self.velocities) != (n, 3):
            raise ValueError("BufferFrame: centers/velocities must be (N_q, 3)")
        if len(self.class_ids) != n or len(self.scores) != n:
            raise ValueError("BufferFrame: class_ids/scores must have one entry per query")


class QueryBuffer:
    """Fixed-depth FIFO of BufferFrames, oldest first."""

    def __init__(self, depth):
        if depth < 2:
            raise ValueError(f"QueryBuffer: depth must be >= 2, got {depth}")
        self.depth = depth
        self._frames = []

    def push(self, frame):
        if self._frames:
            if frame.queries.shape != self._frames[0].queries.shape:
                raise ValueError("QueryBuffer: all frames must share (L, N_q, D)")
        self._frames.append(frame)
        if len(self._frames) > self.depth:
            self._frames.pop(0)

    @property
    def frames(self):
        return list(self._frames)

    @property
    def full(self):
        return len(self._frames) == self.depth

    def __len__(self):
        return len(self._frames)

    def clear(self):
        self._frames = []

    def as_arrays(self):
        """Flat name->array view for writing next to checkpoints."""
        out = {}
        for k, f in enumerate(self._frames):
            tag = f"b{k:02d}"
            out[f"{tag}_queries"] = f.queries
            out[f"{tag}_centers"] = f.centers
            out[f"{tag}_velocities"] = np.asarray(f.velocities, dtype=np.float64)
            out[f"{tag}_class_ids"] = np.asarray(f.class_ids, dtype=np.int64)
            out[f"{tag}_scores"] = np.asarray(f.scores, dtype=np.float64)
            out[f"{tag}_rotation"] = np.asarray(f.rotation, dtype=np.float64)
            out[f"{tag}_timestamp"] = np.array([f.timestamp])
        return out

    @classmethod
    def from_arrays(cls, depth, arrays):
        buf = cls(depth)
        k = 0
        while f"b{k:02d}_queries" in arrays:
            tag = f"b{k:02d}"
            buf.push(BufferFrame(
                queries=arrays[f"{tag}_queries"],
                centers=arrays[f"{tag}_centers"],
                velocities=arrays[f"{tag}_velocities"],
                class_ids=arrays[f"{tag}_class_ids"],
                scores=arrays[f"{tag}_scores"],
                rotation=arrays[f"{tag}_rotation"],
                timestamp=float(arrays[f"{tag}_timestamp"][0]),
            ))
            k += 1
        return buf


@dataclass
class MtmParams:
    """Weights and constants of the motion-guided step, shared by all layers."""

    phi1_w: Tensor
    phi1_b: Tensor
    phi2_w: Tensor
    phi2_b: Tensor
    norm_gain: Tensor
    norm_bias: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    fuse_w: Tensor            # (2D, D) applied to concat(provisional, history)
    fuse_b: Tensor
    gamma: float = 2.0        # association radius, meters
    c_m: float = 1e8
    score_floor: float = 0.05
    background_id: int = 3

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError(f"MtmParams: gamma must be positive, got {self.gamma}")
        if np.exp(-self.c_m) != 0.0:
            raise ValueError(f"MtmParams: c_m = {self.c_m} is too small; exp(-c_m) must "
                             "underflow so blocked attention entries vanish")

    @property
    def dim(self):
        return self.phi1_w.data.shape[0]

    def tensors(self):
        return {name: getattr(self, name) for name in
                ("phi1_w", "phi1_b", "phi2_w", "phi2_b", "norm_gain", "norm_bias",
                 "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "fuse_w", "fuse_b")}

    @classmethod
    def identity(cls, dim, **kw):
        """Exact pass-through configuration: F = history projection, FFN = id,
        fusion selects the provisional input."""
        eye = np.eye(dim)
        return cls(
            phi1_w=Tensor(eye.copy(), requires_grad=True),
            phi1_b=Tensor(np.zeros(dim), requires_grad=True),
            phi2_w=Tensor(eye.copy(), requires_grad=True),
            phi2_b=Tensor(np.zeros(dim), requires_grad=True),
            norm_gain=Tensor(np.ones(dim), requires_grad=True),
            norm_bias=Tensor(np.zeros(dim), requires_grad=True),
            ffn_w1=Tensor(np.concatenate([eye, -eye], axis=1), requires_grad=True),
            ffn_b1=Tensor(np.zeros(2 * dim), requires_grad=True),
            ffn_w2=Tensor(np.concatenate([eye, -eye], axis=0), requires_grad=True),
            ffn_b2=Tensor(np.zeros(dim), requires_grad=True),
            fuse_w=Tensor(np.concatenate([eye, np.zeros((dim, dim))], axis=0),
                          requires_grad=True),
            fuse_b=Tensor(np.zeros(dim), requires_grad=True),
            **kw,
        )

    @classmethod
    def init(cls, dim, rng, noise=0.02, **kw):
        """Near-pass-through start: identity structure plus small noise."""
        p = cls.identity(dim, **kw)
        for name, t in p.tensors().items():
            if name.endswith("_w"):
                t.data = t.data + rng.normal(0.0, noise, size=t.data.shape)
        return p


def _check_rotation(r, which):
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3) or np.abs(r @ r.T - np.eye(3)).max() > 1e-9:
        raise ValueError(f"align_centers: {which} rotation is not orthonormal")
    return r


def align_centers(c_prev, v_prev, r_prev, r_next, dt):
    """Advance previous centers by one interval and rotate into the next frame.

    Row-vector convention: C' = (C + V dt) R_rel^T with
    R_rel = R_next R_prev^-1.
    """
    r_prev = _check_rotation(r_prev, "previous")
    r_next = _check_rotation(r_next, "next")
    r_rel = r_next @ r_prev.T
    return (np.asarray(c_prev, dtype=np.float64) + np.asarray(v_prev) * dt) @ r_rel.T


def cost_matrix(c_next, c_prev_aligned):
    """Pairwise Euclidean distances, rows = next-frame queries."""
    a = np.asarray(c_next, dtype=np.float64)
    b = np.asarray(c_prev_aligned, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"cost_matrix: shapes {a.shape} and {b.shape} differ")
    return np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)


def guided_mask(o, s_prev, s_next, gamma, c_m, background=None):
    """Per-pair gate: 0 where distance <= gamma and classes agree, else c_m.

    Queries labelled `background` are blocked on both sides regardless of
    distance, so unassigned queries never attract attention.
    """
    if gamma <= 0:
        raise ValueError(f"guided_mask: gamma must be positive, got {gamma}")
    s_prev = np.asarray(s_prev)
    s_next = np.asarray(s_next)
    open_pair = (o <= gamma) & (s_next[:, None] == s_prev[None, :])
    if background is not None:
        open_pair &= (s_next[:, None] != background) & (s_prev[None, :] != background)
    return np.where(open_pair, 0.0, c_m)


def attention_map(o, g):
    """softmax(-O - G) over the historical axis, as a constant tensor.

    Blocked entries use the plain -c_m logit without the distance term:
    in any row with at least one open pair the blocked exponentials
    underflow to zero either way, and a fully blocked row then degrades
    to uniform attention instead of re-ranking by distance alone.
    """
    o = np.asarray(o, dtype=np.float64)
    if o.shape != np.shape(g):
        raise ValueError(f"attention_map: shapes {o.shape} and {np.shape(g)} differ")
    logits = np.where(g != 0.0, -np.asarray(g, dtype=np.float64), -o)
    return ops.softmax(Tensor(logits), axis=-1)


def aggregate(attention, q_prev, params):
    """Context features F = Phi2(A Phi1(Q_prev))."""
    projected = ops.linear(q_prev, params.phi1_w, params.phi1_b)
    mixed = ops.matmul(attention, projected)
    return ops.linear(mixed, params.phi2_w, params.phi2_b)


def mtm_step(q_next, context, params):
    """Provisional prediction FFN(Norm(Q + F)) for the following timestep."""
    x = ops.add(q_next, context)
    x = ops.layernorm_affine(x, params.norm_gain, params.norm_bias)
    return ops.ffn(x, params.ffn_w1, params.ffn_b1, params.ffn_w2, params.ffn_b2)


def fuse_provisional(provisional, q_hist, params):
    """Blend a provisional prediction with the stored queries for its frame."""
    stacked = ops.concat([provisional, q_hist], axis=-1)
    return ops.linear(stacked, params.fuse_w, params.fuse_b)


def _effective_classes(frame, params):
    return np.where(np.asarray(frame.scores) >= params.score_floor,
                    np.asarray(frame.class_ids), params.background_id)


def step_attention(prev, nxt, params):
    """The data-dependent half of one unroll step: align, cost, gate, softmax."""
    dt = nxt.timestamp - prev.timestamp
    aligned = align_centers(prev.centers, prev.velocities, prev.rotation,
                            nxt.rotation, dt)
    o = cost_matrix(nxt.centers, aligned)
    g = guided_mask(o, _effective_classes(prev, params),
                    _effective_classes(nxt, params),
                    params.gamma, params.c_m, background=params.background_id)
    return attention_map(o, g)


def predict_queries(buffer, params):
    """Unroll the buffer into predicted queries for the current frame.

    Returns one (N_q, D) tensor per decoder layer. Steps walk the buffer
    oldest to newest; each step's provisional output is fused with the
    stored queries of the frame after it, except the last, whose
    provisional IS the prediction.
    """
    if not buffer.full:
        raise ValueError(f"predict_queries: buffer holds {len(buffer)} of "
                         f"{buffer.depth} frames; warm up with full scans first")
    frames = buffer.frames
    t_depth = len(frames)
    attentions = [step_attention(frames[k], frames[k + 1], params)
                  for k in range(t_depth - 1)]

    outputs = []
    for layer in range(frames[0].queries.shape[0]):
        running = None
        for k in range(t_depth - 1):
            q_hist = Tensor(frames[k].queries[layer])
            q_next = Tensor(frames[k + 1].queries[layer]) if running is None else running
            context = aggregate(attentions[k], q_hist, params)
            provisional = mtm_step(q_next, context, params)
            if k + 2 <= t_depth - 1:
                running = fuse_provisional(provisional, Tensor(frames[k + 2].queries[layer]),
                                           params)
            else:
                running = provisional
        outputs.append(running)
    return outputs
