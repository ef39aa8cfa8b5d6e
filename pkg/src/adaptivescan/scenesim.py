"""Synthetic driving scenes and a raycasting range sensor.

The world is a flat ground plane plus rigid boxes moving at constant
velocity. The ego vehicle carries the sensor at a fixed height and drives a
straight or arcing path; every frame records the world-to-sensor pose so
downstream consumers can work in either frame. Scans are produced by casting
one ray per enabled beam of a `BeamGrid` and keeping the nearest hit among
box faces and the ground.

Everything here is deterministic given (config, seed).
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .containers import load_container, save_container
from .geometry import box_corners, points_in_bev_rect, rot_z
from .rangeimage import BeamGrid, default_grid

CLASS_NAMES = ("car", "pedestrian", "cyclist")

# per class: (l, w, h) low/high and speed range, all generation-time bounds
_SIZE_RANGES = {
    0: (np.array([3.8, 1.7, 1.4]), np.array([5.0, 2.1, 1.8])),
    1: (np.array([0.5, 0.5, 1.5]), np.array([0.8, 0.8, 1.9])),
    2: (np.array([1.5, 0.5, 1.4]), np.array([2.0, 0.8, 1.8])),
}
_SPEED_RANGES = {0: (3.0, 12.0), 1: (0.5, 2.0), 2: (2.0, 7.0)}


@dataclass
class ActorBox:
    """Rigid 7-DoF box with a constant world-frame velocity."""

    center: np.ndarray        # (3,) meters
    size: tuple               # (l, w, h) meters
    yaw: float                # radians
    velocity: np.ndarray      # (3,) m/s
    class_id: int
    actor_id: int

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        if min(self.size) <= 0:
            raise ValueError(f"ActorBox: sizes must be positive, got {self.size}")


@dataclass
class EgoPose:
    """World-to-sensor rotation and the sensor origin in world coordinates."""

    rotation: np.ndarray      # (3, 3), world -> sensor
    translation: np.ndarray   # (3,) sensor origin, world frame
    timestamp: float          # seconds

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        r = self.rotation
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("EgoPose: rotation must be orthonormal with det 1")


@dataclass
class Frame:
    pose: EgoPose
    boxes: list                      # world-frame ActorBox list
    points: np.ndarray = None        # (n, 3) sensor frame, None before scanning
    pattern: np.ndarray = None       # (H, W) binary beam pattern used, or None


@dataclass
class SceneSequence:
    grid: BeamGrid
    frames: list
    frame_interval: float
    sensor_height: float = 1.8

    def __post_init__(self):
        times = [f.pose.timestamp for f in self.frames]
        for a, b in zip(times, times[1:]):
            if not abs((b - a) - self.frame_interval) <= 1e-9:
                raise ValueError("SceneSequence: timestamps must advance by the frame interval")


@dataclass
class GenerationConfig:
    n_frames: int = 40
    frame_interval: float = 0.2
    actor_count_range: tuple = (2, 8)
    ego_trajectory: str = "straight"   # or "arc"
    ego_speed: float = 2.0
    ego_yaw_rate: float = 0.1          # rad/s, arc only
    spawn_extent: float = 32.0         # |x|,|y| bound for initial actor centers
    sensor_height: float = 1.8
    max_range: float = 120.0
    range_noise_sigma: float = 0.0
    churn: float = 0.0                 # per-actor probability of a mid-sequence despawn
    grid: BeamGrid = field(default_factory=default_grid)

    def validate(self):
        lo, hi = self.actor_count_range
        if not (0 <= lo <= hi):
            raise ValueError(f"actor_count_range must be 0 <= lo <= hi, got {self.actor_count_range}")
        if self.n_frames < 1 or self.frame_interval <= 0:
            raise ValueError("need n_frames >= 1 and a positive frame interval")
        if self.ego_trajectory not in ("straight", "arc"):
            raise ValueError(f"unknown ego trajectory {self.ego_trajectory!r}")
        if self.sensor_height <= 0 or self.max_range <= 0 or self.range_noise_sigma < 0:
            raise ValueError("sensor_height and max_range must be positive, noise sigma >= 0")
        if not 0.0 <= self.churn <= 1.0:
            raise ValueError(f"churn must be a probability, got {self.churn}")


def _ego_states(config, n):
    """Per-frame (position, heading). Straight paths hold heading 0."""
    pos = np.zeros((n, 3))
    psi = np.zeros(n)
    heading = 0.0
    p = np.zeros(3)
    for t in range(n):
        pos[t] = p
        psi[t] = heading
        step = config.ego_speed * config.frame_interval
        p = p + step * np.array([np.cos(heading), np.sin(heading), 0.0])
        if config.ego_trajectory == "arc":
            heading += config.ego_yaw_rate * config.frame_interval
    return pos, psi


def generate_scenario(config, seed):
    """Build the pose/actor skeleton of a sequence; point clouds stay empty.

    Actors get class-conditional sizes and speeds, a uniform heading, and
    move at constant world-frame velocity: each frame's center is the
    previous one plus velocity * frame_interval, computed exactly that way
    so the displacement is reproducible bit for bit.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    n = config.n_frames
    dt = config.frame_interval
    ground_z = -config.sensor_height

    lo, hi = config.actor_count_range
    count = int(rng.integers(lo, hi + 1))
    actors = []
    for a in range(count):
        cid = int(rng.integers(0, len(CLASS_NAMES)))
        s_lo, s_hi = _SIZE_RANGES[cid]
        size = tuple(rng.uniform(s_lo, s_hi))
        speed = rng.uniform(*_SPEED_RANGES[cid])
        heading = rng.uniform(-np.pi, np.pi)
        velocity = speed * np.array([np.cos(heading), np.sin(heading), 0.0])
        center = np.array([rng.uniform(-config.spawn_extent, config.spawn_extent),
                           rng.uniform(-config.spawn_extent, config.spawn_extent),
                           ground_z + size[2] / 2.0])
        first, last = 0, n
        if config.churn > 0 and rng.uniform() < config.churn:
            # despawn somewhere in the back half; keeps early frames stable
            last = int(rng.integers(n // 2, n))
        actors.append({"center": center, "size": size, "yaw": heading,
                       "velocity": velocity, "class_id": cid, "actor_id": a,
                       "first": first, "last": last})

    pos, psi = _ego_states(config, n)
    frames = []
    for t in range(n):
        pose = EgoPose(rotation=rot_z(-psi[t]), translation=pos[t], timestamp=t * dt)
        boxes = [ActorBox(center=a["center"].copy(), size=a["size"], yaw=a["yaw"],
                          velocity=a["velocity"].copy(), class_id=a["class_id"],
                          actor_id=a["actor_id"])
                 for a in actors if a["first"] <= t < a["last"]]
        frames.append(Frame(pose=pose, boxes=boxes))
        for a in actors:
            a["center"] = a["center"] + a["velocity"] * dt
    return SceneSequence(grid=config.grid, frames=frames, frame_interval=dt,
                         sensor_height=config.sensor_height)


def ground_truth_boxes(frame):
    """World-frame boxes re-expressed in this frame's sensor coordinates."""
    r = frame.pose.rotation
    t = frame.pose.translation
    ego_yaw = np.arctan2(-r[1, 0], r[0, 0])
    out = []
    for b in frame.boxes:
        out.append(replace(
            b,
            center=r @ (b.center - t),
            yaw=b.yaw - ego_yaw,
            velocity=r @ b.velocity,
        ))
    return out


def _ray_box_hits(origins_zero_dirs, box):
    """Nearest positive slab-method hit per ray against one sensor-frame box.

    Returns +inf where the ray misses. Rays start at the origin.
    """
    d = origins_zero_dirs @ rot_z(box.yaw)          # directions in box frame
    o = rot_z(box.yaw).T @ (-box.center)            # origin in box frame
    half = np.asarray(box.size) / 2.0

    t_lo = np.full(d.shape[0], -np.inf)
    t_hi = np.full(d.shape[0], np.inf)
    for k in range(3):
        dk = d[:, k]
        parallel = np.abs(dk) < 1e-15
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half[k] - o[k]) / dk
            t2 = (half[k] - o[k]) / dk
        near = np.minimum(t1, t2)
        far = np.maximum(t1, t2)
        inside = np.abs(o[k]) <= half[k]
        near = np.where(parallel, np.where(inside, -np.inf, np.inf), near)
        far = np.where(parallel, np.where(inside, np.inf, -np.inf), far)
        t_lo = np.maximum(t_lo, near)
        t_hi = np.minimum(t_hi, far)

    eps = 1e-9
    hit_t = np.where(t_lo > eps, t_lo, t_hi)
    return np.where((t_lo <= t_hi) & (hit_t > eps), hit_t, np.inf)


def raycast_scan(frame, pattern, grid, sensor_height, max_range=120.0,
                 noise_sigma=0.0, rng=None):
    """Cast one ray per enabled beam; return sensor-frame hit points (n, 3).

    Candidates are every actor box (transformed into the sensor frame) and
    the ground plane z = -sensor_height; the nearest positive intersection
    within max_range wins. Beams that hit nothing produce no point. With
    noise_sigma > 0 the hit range is perturbed by Gaussian noise along the
    ray, which needs an rng.
    """
    pattern = np.asarray(pattern)
    if pattern.shape != (grid.H, grid.W):
        raise ValueError(f"raycast_scan: pattern shape {pattern.shape} does not match "
                         f"grid ({grid.H}, {grid.W})")
    us, vs = np.nonzero(pattern)
    if len(us) == 0:
        return np.zeros((0, 3))
    phi, theta = grid.bin_center_angles(us, vs)
    dirs = np.stack([np.cos(phi) * np.cos(theta),
                     np.cos(phi) * np.sin(theta),
                     np.sin(phi)], axis=1)

    best = np.full(len(dirs), np.inf)
    for box in ground_truth_boxes(frame):
        best = np.minimum(best, _ray_box_hits(dirs, box))

    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dz < -1e-15, -sensor_height / dz, np.inf)
    best = np.minimum(best, t_ground)

    hit = best <= max_range
    r = best[hit]
    if noise_sigma > 0:
        if rng is None:
            raise ValueError("raycast_scan: range noise requires an rng")
        r = np.maximum(r + rng.normal(0.0, noise_sigma, size=r.shape), 1e-3)
    return dirs[hit] * r[:, None]


def attach_scans(sequence, config, seed=None):
    """Raycast every frame with the full beam pattern, in place.

    Noise draws come from a generator seeded per call so a fixed seed gives
    a fixed sequence of clouds.
    """
    rng = np.random.default_rng(seed) if config.range_noise_sigma > 0 else None
    full = np.ones((sequence.grid.H, sequence.grid.W), dtype=np.uint8)
    for frame in sequence.frames:
        frame.points = raycast_scan(frame, full, sequence.grid, sequence.sensor_height,
                                    max_range=config.max_range,
                                    noise_sigma=config.range_noise_sigma, rng=rng)
        frame.pattern = full.copy()
    return sequence


def pseudo_camera_bev(boxes, shape=(32, 32), extent=40.0, jitter_sigma=0.5, rng=None):
    """Coarse BEV occupancy from jittered sensor-frame box silhouettes.

    Stands in for a camera stream: it sees roughly where objects are even
    when the LiDAR pattern is sparse, but with position noise. Cell (0, 0)
    covers the corner near (-extent, -extent); values are {0, 1} floats.
    """
    hb, wb = shape
    xs = (np.arange(hb) + 0.5) / hb * 2 * extent - extent
    ys = (np.arange(wb) + 0.5) / wb * 2 * extent - extent
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    cells = np.stack([gx.ravel(), gy.ravel()], axis=1)
    occ = np.zeros(hb * wb)
    for b in boxes:
        center = b.center[:2]
        if jitter_sigma > 0:
            if rng is None:
                raise ValueError("pseudo_camera_bev: jitter requires an rng")
            center = center + rng.normal(0.0, jitter_sigma, size=2)
        occ = np.maximum(occ, points_in_bev_rect(cells, center, b.size[0], b.size[1], b.yaw))
    return occ.reshape(hb, wb)


def box_corners_sensor(frame):
    """(k, 8, 3) corner array of this frame's boxes in the sensor frame."""
    gt = ground_truth_boxes(frame)
    if not gt:
        return np.zeros((0, 8, 3))
    return np.stack([box_corners(b.center, b.size, b.yaw) for b in gt])


def save_sequence(path, sequence):
    arrays = {}
    for i, f in enumerate(sequence.frames):
        tag = f"f{i:04d}"
        arrays[f"{tag}_rot"] = f.pose.rotation
        arrays[f"{tag}_trans"] = f.pose.translation
        arrays[f"{tag}_time"] = np.array([f.pose.timestamp])
        arrays[f"{tag}_centers"] = np.stack([b.center for b in f.boxes]) if f.boxes else np.zeros((0, 3))
        arrays[f"{tag}_sizes"] = np.array([b.size for b in f.boxes]).reshape(-1, 3)
        arrays[f"{tag}_yaws"] = np.array([b.yaw for b in f.boxes])
        arrays[f"{tag}_vels"] = np.stack([b.velocity for b in f.boxes]) if f.boxes else np.zeros((0, 3))
        arrays[f"{tag}_class"] = np.array([b.class_id for b in f.boxes], dtype=np.int64)
        arrays[f"{tag}_actor"] = np.array([b.actor_id for b in f.boxes], dtype=np.int64)
        arrays[f"{tag}_points"] = f.points if f.points is not None else np.zeros((0, 3))
        arrays[f"{tag}_pattern"] = (f.pattern if f.pattern is not None
                                    else np.zeros((sequence.grid.H, sequence.grid.W))).astype(np.uint8)
    meta = {
        "n_frames": len(sequence.frames),
        "frame_interval": sequence.frame_interval,
        "sensor_height": sequence.sensor_height,
        "grid": sequence.grid.to_dict(),
        "class_names": list(CLASS_NAMES),
    }
    save_container(path, arrays, kind="sequence", meta=meta)


def load_sequence(path):
    meta, arrays = load_container(path, expect_kind="sequence")
    grid = BeamGrid.from_dict(meta["grid"])
    frames = []
    for i in range(meta["n_frames"]):
        tag = f"f{i:04d}"
        pose = EgoPose(rotation=arrays[f"{tag}_rot"],
                       translation=arrays[f"{tag}_trans"],
                       timestamp=float(arrays[f"{tag}_time"][0]))
        boxes = [ActorBox(center=arrays[f"{tag}_centers"][j],
                          size=tuple(arrays[f"{tag}_sizes"][j]),
                          yaw=float(arrays[f"{tag}_yaws"][j]),
                          velocity=arrays[f"{tag}_vels"][j],
                          class_id=int(arrays[f"{tag}_class"][j]),
                          actor_id=int(arrays[f"{tag}_actor"][j]))
                 for j in range(len(arrays[f"{tag}_yaws"]))]
        frames.append(Frame(pose=pose, boxes=boxes,
                            points=arrays[f"{tag}_points"],
                            pattern=arrays[f"{tag}_pattern"]))
    return SceneSequence(grid=grid, frames=frames,
                         frame_interval=meta["frame_interval"],
                         sensor_height=meta["sensor_height"])
