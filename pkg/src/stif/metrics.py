"""CLEAR-MOT and recall-averaged (AMOTA / AMOTP) tracking metrics.

Matching uses bird's-eye-view center distance with a 2 m gate.

Per frame, a ground-truth object keeps the hypothesis it was last matched to
if that hypothesis is present and still within the gate; the rest are matched
by Hungarian assignment on distance. An identity switch is counted when a
ground-truth object is matched to a hypothesis id different from the one it
was last matched to.

Recall-normalized MOTA at recall level r, with P ground-truth boxes::

    MOTAR(r) = clamp(1 - (IDS + FP + FN - (1 - r) * P) / (r * P), 0, 1)

where IDS/FP/FN are measured after dropping hypotheses below the confidence
cutoff that reaches recall r. The cutoff is the k-th largest confidence among
the true positives of an unfiltered run, k = ceil(r * P). AMOTA is the mean of
MOTAR over the recall levels (unreachable levels count as 0); AMOTP is the
mean matched distance (unreachable levels count as the gate distance).

Worked example: P = 10, r = 0.5, after filtering FN = 5, FP = 1, IDS = 0:
MOTAR = 1 - (0 + 1 + 5 - 0.5 * 10) / (0.5 * 10) = 1 - 1/5 = 0.8.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Box3D, bev_center_distance
from .tracker import hungarian


class MetricsError(ValueError):
    pass


@dataclass
class EvalConfig:
    match_dist: float = 2.0
    n_recall_thresholds: int = 40
    min_recall: float = 0.05

    def validate(self) -> None:
        if not self.match_dist > 0:
            raise MetricsError("match_dist must be positive")
        if self.n_recall_thresholds < 1 or not 0 < self.min_recall <= 1:
            raise MetricsError("bad recall threshold settings")

    @property
    def recall_thresholds(self) -> np.ndarray:
        return np.linspace(self.min_recall, 1.0, self.n_recall_thresholds)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GTItem:
    id: int
    box: Box3D


@dataclass
class HypItem:
    id: int
    box: Box3D
    confidence: float = 1.0


@dataclass
class FrameMatchResult:
    matches: list[tuple[int, int, float]] = field(default_factory=list)  # (gt_id, hyp_id, dist)
    misses: list[int] = field(default_factory=list)
    false_positives: list[int] = field(default_factory=list)
    id_switches: int = 0

    @property
    def n_gt(self) -> int:
        return len(self.matches) + len(self.misses)


def match_frame(gt: Sequence[GTItem], hyp: Sequence[HypItem], prior: dict[int, int],
                cfg: EvalConfig | None = None) -> FrameMatchResult:
    """CLEAR-MOT correspondence for one frame.

    ``prior`` maps each ground-truth id to the hypothesis id it was last
    matched to; it is not modified.
    """
    cfg = cfg or EvalConfig()
    gate = cfg.match_dist
    res = FrameMatchResult()
    hyp_by_id = {h.id: h for h in hyp}
    used_h: set[int] = set()
    matched_g: set[int] = set()
    for g in gt:
        h_id = prior.get(g.id)
        if h_id is None or h_id in used_h or h_id not in hyp_by_id:
            continue
        dist = bev_center_distance(g.box, hyp_by_id[h_id].box)
        if dist <= gate:
            res.matches.append((g.id, h_id, dist))
            used_h.add(h_id)
            matched_g.add(g.id)
    rest_g = [g for g in gt if g.id not in matched_g]
    rest_h = [h for h in hyp if h.id not in used_h]
    if rest_g and rest_h:
        dist = np.array([[bev_center_distance(g.box, h.box) for h in rest_h] for g in rest_g])
        # forbidden pairs cost more than any set of allowed pairs -> max cardinality first
        big = gate * (min(len(rest_g), len(rest_h)) + 1) + 1.0
        cost = np.where(dist <= gate, dist, big)
        pairs, _ = hungarian(cost)
        for r, c in pairs:
            if dist[r, c] <= gate:
                g, h = rest_g[r], rest_h[c]
                res.matches.append((g.id, h.id, float(dist[r, c])))
                used_h.add(h.id)
                matched_g.add(g.id)
    for g_id, h_id, _ in res.matches:
        if g_id in prior and prior[g_id] != h_id:
            res.id_switches += 1
    res.misses = [g.id for g in gt if g.id not in matched_g]
    res.false_positives = [h.id for h in hyp if h.id not in used_h]
    return res


def clear_mot_sequence(gt_frames: Sequence[Sequence[GTItem]], hyp_frames: Sequence[Sequence[HypItem]],
                       cfg: EvalConfig | None = None, min_confidence: float | None = None
                       ) -> list[FrameMatchResult]:
    if len(gt_frames) != len(hyp_frames):
        raise MetricsError(f"{len(gt_frames)} ground-truth frames vs {len(hyp_frames)} hypothesis frames")
    prior: dict[int, int] = {}
    out = []
    for gt, hyp in zip(gt_frames, hyp_frames):
        if min_confidence is not None:
            hyp = [h for h in hyp if h.confidence >= min_confidence]
        r = match_frame(gt, hyp, prior, cfg)
        for g_id, h_id, _ in r.matches:
            prior[g_id] = h_id
        out.append(r)
    return out


@dataclass
class Counts:
    gt: int = 0
    tp: int = 0
    fn: int = 0
    fp: int = 0
    idsw: int = 0
    dist_sum: float = 0.0

    def add(self, r: FrameMatchResult) -> None:
        self.gt += r.n_gt
        self.tp += len(r.matches)
        self.fn += len(r.misses)
        self.fp += len(r.false_positives)
        self.idsw += r.id_switches
        for _, _, d in r.matches:
            self.dist_sum += d


def _counts(results: Sequence[FrameMatchResult]) -> Counts:
    c = Counts()
    for r in results:
        c.add(r)
    return c


def mota_motp(results: Sequence[FrameMatchResult], match_dist: float = 2.0) -> tuple[float, float]:
    """MOTA = 1 - (FN + FP + IDSW) / GT; MOTP = mean matched BEV distance in meters
    (``match_dist`` when nothing matched)."""
    c = _counts(results)
    if c.gt == 0:
        raise MetricsError("MOTA is undefined without ground-truth objects")
    mota = 1.0 - (c.fn + c.fp + c.idsw) / c.gt
    motp = c.dist_sum / c.tp if c.tp else match_dist
    return mota, motp


def _run_all(gt_seqs, hyp_seqs, cfg, min_confidence=None) -> list[FrameMatchResult]:
    out: list[FrameMatchResult] = []
    for g, h in zip(gt_seqs, hyp_seqs):
        out.extend(clear_mot_sequence(g, h, cfg, min_confidence))
    return out


def _tp_confidences(gt_seqs, hyp_seqs, cfg) -> np.ndarray:
    scores = []
    for g_frames, h_frames in zip(gt_seqs, hyp_seqs):
        for r, hyp in zip(clear_mot_sequence(g_frames, h_frames, cfg), h_frames):
            conf = {h.id: h.confidence for h in hyp}
            scores.extend(conf[h_id] for _, h_id, _ in r.matches)
    return np.sort(np.asarray(scores, dtype=np.float64))[::-1]


def amota_amotp(gt_seqs, hyp_seqs, cfg: EvalConfig | None = None) -> tuple[float, float]:
    """Recall-averaged MOTA / MOTP over one or more sequences (see module doc)."""
    cfg = cfg or EvalConfig()
    cfg.validate()
    if len(gt_seqs) != len(hyp_seqs):
        raise MetricsError("number of ground-truth and hypothesis sequences differ")
    n_gt = sum(len(f) for seq in gt_seqs for f in seq)
    if n_gt == 0:
        raise MetricsError("AMOTA is undefined without ground-truth objects")
    tp_scores = _tp_confidences(gt_seqs, hyp_seqs, cfg)
    motar, motp = [], []
    cache: dict[float, Counts] = {}
    for r in cfg.recall_thresholds:
        k = int(math.ceil(r * n_gt - 1e-9))
        if k > tp_scores.size or k < 1:
            motar.append(0.0)
            motp.append(cfg.match_dist)
            continue
        cutoff = float(tp_scores[k - 1])
        if cutoff not in cache:
            cache[cutoff] = _counts(_run_all(gt_seqs, hyp_seqs, cfg, cutoff))
        c = cache[cutoff]
        val = 1.0 - (c.idsw + c.fp + c.fn - (1.0 - r) * n_gt) / (r * n_gt)
        motar.append(min(1.0, max(0.0, val)))
        motp.append(c.dist_sum / c.tp if c.tp else cfg.match_dist)
    return float(np.mean(motar)), float(np.mean(motp))


def evaluate(gt_seqs, hyp_seqs, cfg: EvalConfig | None = None) -> dict:
    """Full report: MOTA, MOTP, AMOTA, AMOTP and raw counts over all sequences."""
    cfg = cfg or EvalConfig()
    results = _run_all(gt_seqs, hyp_seqs, cfg)
    mota, motp = mota_motp(results, cfg.match_dist)
    amota, amotp = amota_amotp(gt_seqs, hyp_seqs, cfg)
    c = _counts(results)
    return {
        "mota": mota, "motp": motp, "amota": amota, "amotp": amotp,
        "gt": c.gt, "tp": c.tp, "fn": c.fn, "fp": c.fp, "id_switches": c.idsw,
        "recall": c.tp / c.gt,
        "n_sequences": len(gt_seqs),
    }


# --- adapters ----------------------------------------------------------------------------

def gt_items(scenario) -> list[list[GTItem]]:
    return [[GTItem(o.identity, o.box) for o in f.objects] for f in scenario.gt_frames]


def hyp_items(step_results) -> list[list[HypItem]]:
    return [[HypItem(o.track_id, o.box, o.confidence) for o in r.outputs] for r in step_results]
