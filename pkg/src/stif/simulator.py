"""Synthetic driving scenes: ground-truth trajectories and noisy detections.

The generator replaces a monocular 3D detector. Every identity follows one of
three motion models (constant velocity, constant turn rate, parked), is
observed by a single forward-looking pinhole camera mounted on the ego
vehicle, and produces per-frame detections with Gaussian box noise, random
dropout, and an appearance vector that stays close to a per-identity
prototype. False positives are drawn from a Poisson count per frame.

Randomness comes from one ``numpy.random.Generator`` seeded with
``PCG64(seed)`` and consumed in a fixed order, so a config fully determines the
scenario.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import (
    BehindCameraError,
    Box2D,
    Box3D,
    CameraModel,
    EgoPose,
    corners3d,
    project,
    to_ego,
    to_world,
)

CATEGORIES = ("car", "pedestrian", "cyclist")
ATTRIBUTES = ("moving", "stopped", "parked")
MOTIONS = ("constant_velocity", "constant_turn", "stationary")

# per category: (l, w, h) mean extents, max speed m/s, sampling weight
_CATEGORY_PRIORS = {
    0: ((4.5, 1.9, 1.6), 3.0, 0.6),
    1: ((0.7, 0.7, 1.75), 1.5, 0.25),
    2: ((1.8, 0.6, 1.6), 2.5, 0.15),
}
_MOVING_SPEED = 0.5
_CAMERA_HEIGHT = 1.5
_MIN_DEPTH, _MAX_DEPTH = 4.0, 50.0
_MIN_SPAWN_GAP = 3.0
_SPAWN_TRIES = 40
_MIN_VISIBLE_FRACTION = 0.9


class ConfigError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    n_objects: int = 8
    n_frames: int = 40
    frame_dt: float = 0.5
    motion_mix: tuple[float, float, float] = (0.5, 0.3, 0.2)
    pos_noise_sigma: float = 0.3
    dim_noise_sigma: float = 0.05
    yaw_noise_sigma: float = 0.05
    reid_noise_sigma: float = 0.15
    dropout_prob: float = 0.1
    fp_rate: float = 0.3
    seed: int = 0
    K: int = 16
    d_reid: int = 32
    ego_speed: float = 0.0
    late_birth_prob: float = 0.25
    early_death_prob: float = 0.2
    camera: CameraModel = field(default_factory=CameraModel)

    def validate(self) -> None:
        if self.n_objects < 0 or self.n_frames < 1:
            raise ConfigError("n_objects must be >= 0 and n_frames >= 1")
        if self.n_objects > self.K:
            raise ConfigError(f"n_objects={self.n_objects} exceeds K={self.K}")
        if self.frame_dt <= 0:
            raise ConfigError("frame_dt must be positive")
        for name in ("dropout_prob", "late_birth_prob", "early_death_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {p}")
        mix = np.asarray(self.motion_mix, dtype=float)
        if mix.shape != (3,) or np.any(mix < 0) or not math.isclose(mix.sum(), 1.0, abs_tol=1e-9):
            raise ConfigError(f"motion_mix must be 3 non-negative fractions summing to 1, got {self.motion_mix}")
        for name in ("pos_noise_sigma", "dim_noise_sigma", "yaw_noise_sigma",
                     "reid_noise_sigma", "fp_rate"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.d_reid < 1:
            raise ConfigError("d_reid must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["motion_mix"] = list(self.motion_mix)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scenario config keys: {sorted(unknown)}")
        if "camera" in d and isinstance(d["camera"], dict):
            d["camera"] = CameraModel(**d["camera"])
        if "motion_mix" in d:
            d["motion_mix"] = tuple(float(v) for v in d["motion_mix"])
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class Detection:
    box2d: Box2D
    box3d: Box3D  # ego frame
    category: int
    confidence: float
    appearance: np.ndarray
    gt_identity: int | None = None


@dataclass
class DetectionFrame:
    frame_index: int
    timestamp: float
    ego_pose: EgoPose
    detections: list[Detection]

    def world_boxes(self) -> list[Box3D]:
        return [to_world(self.ego_pose, d.box3d) for d in self.detections]


@dataclass
class GTObject:
    identity: int
    box: Box3D  # world frame
    velocity: np.ndarray
    attribute: int
    category: int


@dataclass
class GroundTruthFrame:
    frame_index: int
    timestamp: float
    ego_pose: EgoPose
    objects: list[GTObject]

    def by_identity(self) -> dict[int, GTObject]:
        return {o.identity: o for o in self.objects}


@dataclass
class Scenario:
    config: ScenarioConfig
    gt_frames: list[GroundTruthFrame]
    det_frames: list[DetectionFrame]

    def __len__(self) -> int:
        return len(self.det_frames)


@dataclass
class GroundTruthAssociation:
    """Compact (n+1) x (m+1) association between a current frame (rows) and a
    previous frame (columns); index n / m is the un-identified slot."""

    matrix: np.ndarray
    n: int
    m: int

    def __post_init__(self) -> None:
        a = np.asarray(self.matrix, dtype=np.float64)
        if a.shape != (self.n + 1, self.m + 1):
            raise ValueError(f"association shape {a.shape} != {(self.n + 1, self.m + 1)}")
        if not np.all((a == 0) | (a == 1)):
            raise ValueError("association entries must be 0 or 1")
        if np.any(a[: self.n].sum(axis=1) != 1) or np.any(a[:, : self.m].sum(axis=0) != 1):
            raise ValueError("every valid row and column must sum to 1")
        if a[self.n, self.m] != 0:
            raise ValueError("the slot/slot corner must be 0")
        self.matrix = a

    @property
    def matches(self) -> list[tuple[int, int]]:
        rows, cols = np.nonzero(self.matrix[: self.n, : self.m])
        return list(zip(rows.tolist(), cols.tolist()))

    def dense(self, K: int) -> np.ndarray:
        """(K+1) x (K+1) layout: valid rows/cols first, slot at index K."""
        out = np.zeros((K + 1, K + 1))
        out[: self.n, : self.m] = self.matrix[: self.n, : self.m]
        out[: self.n, K] = self.matrix[: self.n, self.m]
        out[K, : self.m] = self.matrix[self.n, : self.m]
        return out


def gt_association(det_t: DetectionFrame, det_prev: DetectionFrame,
                   gt_t: GroundTruthFrame | None = None) -> GroundTruthAssociation:
    """Association implied by the hidden identities of two detection frames.

    ``gt_t`` is accepted for interface symmetry; identities already live on
    the detections.
    """
    n, m = len(det_t.detections), len(det_prev.detections)
    a = np.zeros((n + 1, m + 1))
    prev_ids = {d.gt_identity: j for j, d in enumerate(det_prev.detections)
                if d.gt_identity is not None}
    used = set()
    for i, d in enumerate(det_t.detections):
        j = prev_ids.get(d.gt_identity) if d.gt_identity is not None else None
        if j is not None and j not in used:
            a[i, j] = 1
            used.add(j)
        else:
            a[i, m] = 1
    for j in range(m):
        if j not in used:
            a[n, j] = 1
    return GroundTruthAssociation(a, n, m)


# --- generation -----------------------------------------------------------------

@dataclass
class _Identity:
    identity: int
    category: int
    dims: tuple[float, float, float]
    motion: int
    p0: np.ndarray  # world (x, y) at birth time
    heading0: float
    speed: float
    turn_rate: float
    birth: int
    death: int  # exclusive
    prototype: np.ndarray
    birth_time: float = 0.0

    def state(self, t: float) -> tuple[np.ndarray, float, np.ndarray]:
        """World (x, y), heading, and 3D velocity at absolute time t."""
        tau = t - self.birth_time
        if self.motion == 2 or self.speed == 0.0:
            return self.p0.copy(), self.heading0, np.zeros(3)
        if self.motion == 0 or self.turn_rate == 0.0:
            d = np.array([math.cos(self.heading0), math.sin(self.heading0)])
            return self.p0 + self.speed * tau * d, self.heading0, np.append(self.speed * d, 0.0)
        psi = self.heading0 + self.turn_rate * tau
        r = self.speed / self.turn_rate
        p = self.p0 + r * np.array([math.sin(psi) - math.sin(self.heading0),
                                    math.cos(self.heading0) - math.cos(psi)])
        return p, psi, np.array([self.speed * math.cos(psi), self.speed * math.sin(psi), 0.0])

    @property
    def attribute(self) -> int:
        if self.motion == 2:
            return 2
        return 0 if self.speed > _MOVING_SPEED else 1


def ego_pose_at(cfg: ScenarioConfig, t: float) -> EgoPose:
    return EgoPose.from_xy_yaw(cfg.ego_speed * t, 0.0, 0.0)


def ego_to_camera(p) -> np.ndarray:
    """Ego (x fwd, y left, z up) -> camera (x right, y down, z fwd)."""
    x, y, z = p
    return np.array([-y, _CAMERA_HEIGHT - z, x])


def camera_box2d(cam: CameraModel, box_ego: Box3D) -> Box2D | None:
    """Axis-aligned pixel hull of the projected corners, clipped to the image."""
    pts = []
    try:
        for c in corners3d(box_ego):
            pts.append(project(cam, ego_to_camera(c)))
    except BehindCameraError:
        return None
    pts = np.asarray(pts)
    lo = np.clip(pts.min(axis=0), 0.0, [cam.image_w, cam.image_h])
    hi = np.clip(pts.max(axis=0), 0.0, [cam.image_w, cam.image_h])
    w, h = hi - lo
    if w < 1.0 or h < 1.0:
        return None
    return Box2D((lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, float(w), float(h))


def in_view(cam: CameraModel, box_ego: Box3D) -> bool:
    if not _MIN_DEPTH <= box_ego.x <= _MAX_DEPTH:
        return False
    uv = project(cam, ego_to_camera(box_ego.center))
    return 0.0 <= uv[0] <= cam.image_w and 0.0 <= uv[1] <= cam.image_h


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def _sample_spawn_point(rng: np.random.Generator, cam: CameraModel) -> np.ndarray:
    """Ego-frame (x, y) inside the horizontal field of view."""
    half = 0.9 * (cam.image_w - cam.cx0) / cam.fx
    x = rng.uniform(_MIN_DEPTH + 4.0, _MAX_DEPTH - 10.0)
    y = rng.uniform(-half * x, half * x)
    return np.array([x, y])


def _visible_fraction(cfg: ScenarioConfig, ident: _Identity) -> float:
    frames = range(ident.birth, ident.death)
    seen = 0
    l, w, h = ident.dims
    for f in frames:
        t = f * cfg.frame_dt
        p, heading, _ = ident.state(t)
        box_ego = to_ego(ego_pose_at(cfg, t), Box3D(p[0], p[1], h / 2.0, l, w, h, heading))
        seen += in_view(cfg.camera, box_ego)
    return seen / max(len(frames), 1)


def _too_close(idents: list[_Identity], cand: _Identity, t: float) -> bool:
    for other in idents:
        if other.birth <= cand.birth < other.death:
            q, _, _ = other.state(t)
            if np.hypot(*(q - cand.p0)) < _MIN_SPAWN_GAP:
                return True
    return False


def _make_identities(cfg: ScenarioConfig, rng: np.random.Generator) -> list[_Identity]:
    """Sample identities; spawn point and heading are redrawn (bounded tries)
    until the object stays in view for most of its life and is not on top of
    another object."""
    idents: list[_Identity] = []
    weights = np.array([_CATEGORY_PRIORS[c][2] for c in range(3)])
    for k in range(cfg.n_objects):
        cat = int(rng.choice(3, p=weights / weights.sum()))
        base, vmax, _ = _CATEGORY_PRIORS[cat]
        dims = tuple(float(b * (1.0 + 0.08 * rng.standard_normal())) for b in base)
        motion = int(rng.choice(3, p=np.asarray(cfg.motion_mix, dtype=float)))
        speed = float(rng.uniform(0.0, vmax)) if motion != 2 else 0.0
        turn = float(rng.uniform(0.1, 0.3) * rng.choice([-1.0, 1.0])) if motion == 1 else 0.0
        birth = int(rng.integers(1, max(cfg.n_frames - 1, 2))) if rng.random() < cfg.late_birth_prob else 0
        birth = min(birth, cfg.n_frames - 1)
        if rng.random() < cfg.early_death_prob and birth + 5 < cfg.n_frames:
            death = int(rng.integers(birth + 5, cfg.n_frames))
        else:
            death = cfg.n_frames
        t_birth = birth * cfg.frame_dt
        pose = ego_pose_at(cfg, t_birth)
        proto = _unit(rng.standard_normal(cfg.d_reid))
        best, best_score = None, -1.0
        for _ in range(_SPAWN_TRIES):
            p_ego = _sample_spawn_point(rng, cfg.camera)
            heading = float(rng.uniform(-math.pi, math.pi))
            p_world = (pose.rotation @ np.append(p_ego, 0.0) + pose.translation)[:2]
            cand = _Identity(k, cat, dims, motion, p_world, heading, speed, turn,
                             birth, death, proto, birth_time=t_birth)
            if _too_close(idents, cand, t_birth):
                continue
            score = _visible_fraction(cfg, cand)
            if score > best_score:
                best, best_score = cand, score
            if score >= _MIN_VISIBLE_FRACTION:
                break
        if best is None:
            best = cand
        idents.append(best)
    return idents


def _noisy_box(rng: np.random.Generator, cfg: ScenarioConfig, b: Box3D) -> Box3D:
    sp, sd, sy = cfg.pos_noise_sigma, cfg.dim_noise_sigma, cfg.yaw_noise_sigma
    n = rng.standard_normal(7)
    return Box3D(b.x + sp * n[0], b.y + sp * n[1], b.z + sp * n[2],
                 max(b.l + sd * n[3], 0.1), max(b.w + sd * n[4], 0.1), max(b.h + sd * n[5], 0.1),
                 b.yaw + sy * n[6])


def generate(cfg: ScenarioConfig) -> Scenario:
    """Ground-truth and detection frames for one scenario, fully determined by ``cfg``."""
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    idents = _make_identities(cfg, rng)
    gt_frames: list[GroundTruthFrame] = []
    det_frames: list[DetectionFrame] = []
    cam = cfg.camera
    for f in range(cfg.n_frames):
        t = f * cfg.frame_dt
        pose = ego_pose_at(cfg, t)
        objects: list[GTObject] = []
        dets: list[Detection] = []
        for ident in idents:
            if not ident.birth <= f < ident.death:
                continue
            p, heading, vel = ident.state(t)
            l, w, h = ident.dims
            box = Box3D(p[0], p[1], h / 2.0, l, w, h, heading)
            box_ego = to_ego(pose, box)
            if not in_view(cam, box_ego) or camera_box2d(cam, box_ego) is None:
                continue
            objects.append(GTObject(ident.identity, box, vel, ident.attribute, ident.category))
            # fixed draw order per visible object keeps streams aligned
            drop = rng.random() < cfg.dropout_prob
            noisy = _noisy_box(rng, cfg, box_ego)
            app = _unit(ident.prototype + cfg.reid_noise_sigma * rng.standard_normal(cfg.d_reid))
            conf = float(np.clip(0.8 + 0.1 * rng.standard_normal(), 0.35, 1.0))
            if drop:
                continue
            b2 = camera_box2d(cam, noisy)
            if b2 is None:
                continue
            dets.append(Detection(b2, noisy, ident.category, conf, app, ident.identity))
        n_fp = int(rng.poisson(cfg.fp_rate)) if cfg.fp_rate > 0 else 0
        n_fp = min(n_fp, cfg.K - len(dets))
        for _ in range(n_fp):
            cat = int(rng.integers(0, 3))
            base = _CATEGORY_PRIORS[cat][0]
            xy = _sample_spawn_point(rng, cam)
            dims = [float(v * (1.0 + 0.08 * rng.standard_normal())) for v in base]
            box_ego = Box3D(xy[0], xy[1], dims[2] / 2.0, *dims, float(rng.uniform(-math.pi, math.pi)))
            app = _unit(rng.standard_normal(cfg.d_reid))
            conf = float(rng.uniform(0.05, 0.55))
            b2 = camera_box2d(cam, box_ego)
            if b2 is not None:
                dets.append(Detection(b2, box_ego, cat, conf, app, None))
        order = rng.permutation(len(dets))
        dets = [dets[i] for i in order]
        gt_frames.append(GroundTruthFrame(f, t, pose, objects))
        det_frames.append(DetectionFrame(f, t, pose, dets))
    return Scenario(cfg, gt_frames, det_frames)


def scenario_suite(n_scenes: int, base_seed: int = 0, n_objects_range: tuple[int, int] = (6, 10),
                   **overrides) -> list[Scenario]:
    """``n_scenes`` scenarios with seeds ``base_seed + i``; object counts cycle through the range."""
    lo, hi = n_objects_range
    if not 0 <= lo <= hi:
        raise ConfigError(f"bad n_objects_range {n_objects_range}")
    out = []
    for i in range(n_scenes):
        cfg = ScenarioConfig(**{**overrides, "seed": base_seed + i,
                                "n_objects": lo + i % (hi - lo + 1)})
        out.append(generate(cfg))
    return out
