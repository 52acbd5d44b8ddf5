"""Online tracking: Hungarian assignment, track memory and lifecycle.

The tracker keeps, per track, the last ``tau`` (timestamp, refined box,
spatial feature, confidence) entries. At each new frame, every stored past
timestamp is treated as a "previous frame": its entries go through motion
modeling (with the real time gap) and the temporal flow against the current
frame, and the resulting dual-softmax matching probabilities are summed per
(detection, track) pair. Hungarian assignment on the negated sums, gated by
``match_threshold``, yields the associations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .assoc_net import AssocNet, FrameFeatures, dual_softmax
from .geometry import Box3D, bev_center_distance, normalize_angle

MIN_DIM = 0.1


class TrackerError(ValueError):
    pass


# --- Hungarian -------------------------------------------------------------------------

def _solve_square(c: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest-augmenting-path Hungarian on a square matrix.

    Returns (col_of_row, u, v) with duals satisfying c[i, j] - u[i] - v[j] >= 0.
    """
    n = c.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j] = row (1-based) assigned to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = c[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    col_of_row[p[1:] - 1] = np.arange(n)
    return col_of_row, u[1:], v[1:]


def _has_perfect_matching(adj: list[list[int]], rows: list[int], banned_cols: set[int]) -> bool:
    match_col: dict[int, int] = {}

    def augment(r: int, seen: set[int]) -> bool:
        for c in adj[r]:
            if c in banned_cols or c in seen:
                continue
            seen.add(c)
            if c not in match_col or augment(match_col[c], seen):
                match_col[c] = r
                return True
        return False

    return all(augment(r, set()) for r in rows)


def _lexicographic_optimum(c: np.ndarray, col_of_row: np.ndarray, u: np.ndarray,
                           v: np.ndarray) -> np.ndarray:
    """Lexicographically smallest assignment among the optimal ones.

    Optimal assignments are exactly the perfect matchings on tight edges of an
    optimal dual, so only that subgraph needs searching.
    """
    n = c.shape[0]
    tol = 1e-10 * (1.0 + float(np.max(np.abs(c))))
    tight = (c - u[:, None] - v[None, :]) <= tol
    if int(tight.sum()) == n:
        return col_of_row
    adj = [sorted(np.flatnonzero(tight[r]).tolist()) for r in range(n)]
    out = np.empty(n, dtype=np.int64)
    taken: set[int] = set()
    for r in range(n):
        for col in adj[r]:
            if col in taken:
                continue
            if _has_perfect_matching(adj, list(range(r + 1, n)), taken | {col}):
                out[r] = col
                taken.add(col)
                break
        else:  # pragma: no cover - tight graph always has a perfect matching
            return col_of_row
    return out


def hungarian(cost) -> tuple[list[tuple[int, int]], float]:
    """Minimum-cost assignment of an n x m cost matrix.

    Rectangular inputs are padded to a square with a sentinel cost larger than
    every real entry; assignments to padding are dropped. Among optimal
    assignments the lexicographically smallest (by column of row 0, then row
    1, ...) is returned. The total is the sum of the real assigned costs in
    row order.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")
    n, m = c.shape
    if n == 0 or m == 0:
        return [], 0.0
    size = max(n, m)
    sq = np.full((size, size), float(np.max(c)) + 1.0 if c.size else 0.0)
    sq[:n, :m] = c
    col_of_row, u, v = _solve_square(sq)
    col_of_row = _lexicographic_optimum(sq, col_of_row, u, v)
    pairs = [(r, int(col_of_row[r])) for r in range(n) if col_of_row[r] < m]
    total = 0.0
    for r, col in pairs:
        total += c[r, col]
    return pairs, total


# --- refinement ---------------------------------------------------------------------------

def apply_refinement(b: Box3D, delta) -> Box3D:
    """Add a 7-vector refinement; extents floored at 0.1 m, yaw wrapped."""
    d = np.asarray(delta, dtype=np.float64).reshape(7)
    return Box3D(b.x + d[0], b.y + d[1], b.z + d[2],
                 max(b.l + d[3], MIN_DIM), max(b.w + d[4], MIN_DIM), max(b.h + d[5], MIN_DIM),
                 normalize_angle(b.yaw + d[6]))


# --- tracker state ----------------------------------------------------------------------------

@dataclass
class TrackerConfig:
    tau: int = 5
    match_threshold: float = 0.2
    max_missed: int = 3
    min_confidence: float = 0.3

    def validate(self) -> None:
        if self.tau < 1 or self.max_missed < 1:
            raise TrackerError("tau and max_missed must be >= 1")


@dataclass
class HistoryEntry:
    timestamp: float
    box: Box3D
    feature: np.ndarray
    confidence: float


@dataclass
class Track:
    id: int
    category: int
    history: list[HistoryEntry] = field(default_factory=list)
    state: str = "active"
    missed: int = 0
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    attribute: int | None = None

    @property
    def last(self) -> HistoryEntry:
        return self.history[-1]


@dataclass
class TrackOutput:
    track_id: int
    detection_index: int
    box: Box3D
    confidence: float
    category: int
    velocity: np.ndarray
    attribute: int | None


@dataclass
class StepResult:
    assignments: list[tuple[int, int]]  # (detection index, track id), matched only
    outputs: list[TrackOutput]
    affinity: np.ndarray | None = None  # n x m matching probabilities vs the latest stored frame


@dataclass
class TrackerState:
    config: TrackerConfig = field(default_factory=TrackerConfig)
    tracks: list[Track] = field(default_factory=list)
    next_id: int = 0
    last_timestamp: float | None = None


class _LifecycleMixin:
    state: TrackerState

    def _check_time(self, timestamp: float) -> None:
        last = self.state.last_timestamp
        if last is not None and not timestamp > last:
            raise TrackerError(f"timestamps must increase ({timestamp} after {last})")
        self.state.last_timestamp = timestamp

    def _age_unmatched(self, matched_ids: set[int]) -> None:
        cfg = self.state.config
        for tr in self.state.tracks:
            if tr.id in matched_ids:
                continue
            tr.missed += 1
            tr.state = "dead" if tr.missed >= cfg.max_missed else "lost"
        self.state.tracks = [t for t in self.state.tracks if t.state != "dead"]

    def _spawn(self, category: int, entry: HistoryEntry) -> Track:
        tr = Track(self.state.next_id, category, [entry])
        self.state.next_id += 1
        self.state.tracks.append(tr)
        return tr


class Tracker(_LifecycleMixin):
    """Learned semi-global tracker driven by an :class:`AssocNet`."""

    def __init__(self, net: AssocNet, config: TrackerConfig | None = None):
        self.net = net
        self.state = TrackerState(config or TrackerConfig())
        self.state.config.validate()

    def similarity(self, cur: FrameFeatures, timestamp: float):
        """Summed matching probabilities (n x live tracks) plus the heads'
        inputs from the most recent stored frame."""
        tracks = self.state.tracks
        n = cur.n
        sim = np.zeros((n, len(tracks)))
        groups: dict[float, list[tuple[int, HistoryEntry]]] = {}
        for k, tr in enumerate(tracks):
            for e in tr.history:
                groups.setdefault(e.timestamp, []).append((k, e))
        latest_agg, latest_aff = None, None
        for s in sorted(groups, reverse=True):
            members = groups[s]
            prev = ad.Tensor(np.stack([e.feature for _, e in members]))
            motion = self.net.motion(prev, timestamp - s)
            agg, gamma = self.net.temporal(cur.spatial, motion)
            probs = dual_softmax(gamma)
            for j, (k, _) in enumerate(members):
                sim[:, k] += probs[:, j]
            if latest_agg is None:
                latest_agg, latest_aff = agg, probs
        return sim, latest_agg, latest_aff

    def step(self, frame, features: FrameFeatures | None = None) -> StepResult:
        cfg = self.state.config
        self._check_time(frame.timestamp)
        with ad.no_grad():
            feats = features if features is not None else self.net.encode_frame(frame)
            n = feats.n
            boxes = frame.world_boxes()
            sim = np.zeros((n, 0))
            agg = aff = None
            if n and self.state.tracks:
                sim, agg, aff = self.similarity(feats, frame.timestamp)
            if agg is not None:
                vel, attr, refine = (t.data for t in self.net.heads(agg))
            else:
                vel, attr, refine = np.zeros((n, 3)), None, np.zeros((n, 7))

        tracks = list(self.state.tracks)
        assignments: list[tuple[int, int]] = []
        if sim.size:
            pairs, _ = hungarian(-np.where(sim >= cfg.match_threshold, sim, 0.0))
            assignments = [(i, tracks[k].id) for i, k in pairs if sim[i, k] >= cfg.match_threshold]
        by_id = {t.id: t for t in tracks}
        outputs: list[TrackOutput] = []
        matched_dets = set()
        for i, tid in assignments:
            tr = by_id[tid]
            det = frame.detections[i]
            box = apply_refinement(boxes[i], refine[i])
            tr.history.append(HistoryEntry(frame.timestamp, box, feats.spatial.data[i].copy(),
                                           det.confidence))
            del tr.history[:-cfg.tau]
            tr.state, tr.missed = "active", 0
            tr.velocity = vel[i].copy()
            tr.attribute = None if attr is None else int(np.argmax(attr[i]))
            matched_dets.add(i)
            outputs.append(TrackOutput(tid, i, box, det.confidence, tr.category,
                                       tr.velocity, tr.attribute))
        self._age_unmatched({tid for _, tid in assignments})
        for i, det in enumerate(frame.detections):
            if i in matched_dets or det.confidence < cfg.min_confidence:
                continue
            box = apply_refinement(boxes[i], refine[i])
            tr = self._spawn(det.category, HistoryEntry(frame.timestamp, box,
                                                        feats.spatial.data[i].copy(), det.confidence))
            tr.velocity = vel[i].copy()
            tr.attribute = None if attr is None else int(np.argmax(attr[i]))
            outputs.append(TrackOutput(tr.id, i, box, det.confidence, tr.category,
                                       tr.velocity, tr.attribute))
        outputs.sort(key=lambda o: o.track_id)
        return StepResult(assignments, outputs, aff)


class GreedyBEVTracker(_LifecycleMixin):
    """Learning-free baseline: greedy nearest BEV-center matching to each
    track's last box, with the same lifecycle rules."""

    def __init__(self, config: TrackerConfig | None = None, gate: float = 2.0):
        self.state = TrackerState(config or TrackerConfig())
        self.gate = gate

    def step(self, frame, features=None) -> StepResult:
        cfg = self.state.config
        self._check_time(frame.timestamp)
        boxes = frame.world_boxes()
        tracks = list(self.state.tracks)
        cand = []
        for i, b in enumerate(boxes):
            for k, tr in enumerate(tracks):
                dist = bev_center_distance(b, tr.last.box)
                if dist <= self.gate:
                    cand.append((dist, i, k))
        cand.sort()
        used_d, used_t = set(), set()
        assignments = []
        for _, i, k in cand:
            if i in used_d or k in used_t:
                continue
            used_d.add(i)
            used_t.add(k)
            assignments.append((i, tracks[k].id))
        outputs = []
        by_id = {t.id: t for t in tracks}
        no_feature = np.zeros(0)
        for i, tid in assignments:
            tr = by_id[tid]
            det = frame.detections[i]
            tr.history.append(HistoryEntry(frame.timestamp, boxes[i], no_feature, det.confidence))
            del tr.history[:-cfg.tau]
            tr.state, tr.missed = "active", 0
            outputs.append(TrackOutput(tid, i, boxes[i], det.confidence, tr.category, tr.velocity, None))
        self._age_unmatched({tid for _, tid in assignments})
        for i, det in enumerate(frame.detections):
            if i in used_d or det.confidence < cfg.min_confidence:
                continue
            tr = self._spawn(det.category, HistoryEntry(frame.timestamp, boxes[i], no_feature,
                                                        det.confidence))
            outputs.append(TrackOutput(tr.id, i, boxes[i], det.confidence, tr.category,
                                       tr.velocity, None))
        outputs.sort(key=lambda o: o.track_id)
        return StepResult(assignments, outputs)


def run_tracker(tracker, det_frames) -> list[StepResult]:
    return [tracker.step(f) for f in det_frames]


def history_size(state: TrackerState) -> int:
    return sum(len(t.history) for t in state.tracks)


__all__ = [
    "TrackerError", "hungarian", "apply_refinement", "TrackerConfig", "HistoryEntry", "Track",
    "TrackOutput", "StepResult", "TrackerState", "Tracker", "GreedyBEVTracker", "run_tracker",
    "history_size",
]
