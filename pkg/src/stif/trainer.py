"""Training the association network on simulated frame pairs.

A training sample is a pair (frame t, frame t - ζ) from one scenario with its
ground-truth association and per-detection targets. The objective is the
plain sum of the tracking loss, the temporal-consistency loss and the
auxiliary head losses (velocity, attribute, refined box).
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .assoc_net import AssocNet, NetConfig, frame_arrays
from .autodiff import Tensor
from .losses import aux_loss_terms, combined_loss, temporal_consistency_loss, tracking_loss
from .metrics import EvalConfig, evaluate as evaluate_metrics, gt_items, hyp_items
from .simulator import GroundTruthAssociation, Scenario, gt_association
from .tracker import Tracker, TrackerConfig, run_tracker

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 1.25e-4
    lr_drop_epochs: list[int] = field(default_factory=list)
    batch_pairs: int = 8
    steps_per_epoch: int | None = None
    dt_range: tuple[int, int] = (1, 5)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = 5.0
    use_consistency_loss: bool = True
    rotate_appearance: bool = True
    seed: int = 0
    eval_every: int = 1

    def validate(self, tau: int) -> None:
        if not self.learning_rate > 0:
            raise TrainingError("learning_rate must be > 0")
        lo, hi = self.dt_range
        if not 1 <= lo <= hi <= tau:
            raise TrainingError(f"dt_range {self.dt_range} must lie within [1, {tau}]")
        if self.batch_pairs < 1 or self.epochs < 0:
            raise TrainingError("batch_pairs must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dt_range"] = list(self.dt_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise TrainingError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "dt_range" in d:
            d["dt_range"] = tuple(int(v) for v in d["dt_range"])
        return cls(**d)


@dataclass
class PairSample:
    scenario_index: int
    t: int
    zeta: int
    dt: float
    cur_inputs: dict
    prev_inputs: dict
    association: GroundTruthAssociation
    det_boxes: np.ndarray  # n x 7 world-frame detection boxes (current frame)
    target_mask: np.ndarray  # n, True when the detection has a ground-truth identity
    gt_boxes: np.ndarray  # n x 7
    gt_velocity: np.ndarray  # n x 3
    gt_attribute: np.ndarray  # n
    cons_rows: np.ndarray  # current-detection rows with a same-identity detection at t - ζ
    cons_prev_boxes: np.ndarray  # their detection boxes at t - ζ
    cons_gt_cur: np.ndarray
    cons_gt_prev: np.ndarray


@dataclass
class Checkpoint:
    net_config: NetConfig
    params: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    rng_state: dict | None = None
    optimizer: dict | None = None  # {"t": int, "m": {...}, "v": {...}}
    train_config: dict | None = None
    metadata: dict = field(default_factory=dict)

    def to_net(self) -> AssocNet:
        params = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return AssocNet(copy.deepcopy(self.net_config), params)

    @classmethod
    def from_net(cls, net: AssocNet, **kw) -> "Checkpoint":
        return cls(copy.deepcopy(net.config), {k: p.data.copy() for k, p in net.params.items()}, **kw)


# --- sampling ----------------------------------------------------------------------------

class _InputCache:
    def __init__(self, cfg: NetConfig):
        self.cfg = cfg
        self._store: dict[tuple[int, int], dict] = {}

    def get(self, s_idx: int, scenario: Scenario, f: int) -> dict:
        key = (s_idx, f)
        if key not in self._store:
            self._store[key] = frame_arrays(scenario.det_frames[f], self.cfg)
        return self._store[key]


def _box_rows(boxes) -> np.ndarray:
    return np.array([b.as_array() for b in boxes]).reshape(-1, 7)


def build_pair(scenario: Scenario, t: int, zeta: int, cfg: NetConfig, s_idx: int = 0,
               cache: _InputCache | None = None) -> PairSample:
    cache = cache or _InputCache(cfg)
    cur, prev = scenario.det_frames[t], scenario.det_frames[t - zeta]
    gt_cur = scenario.gt_frames[t].by_identity()
    gt_prev = scenario.gt_frames[t - zeta].by_identity()
    n = len(cur.detections)
    det_boxes = _box_rows(cur.world_boxes())
    prev_boxes = _box_rows(prev.world_boxes())
    mask = np.zeros(n, dtype=bool)
    gt_boxes = det_boxes.copy()
    gt_vel = np.zeros((n, 3))
    gt_attr = np.zeros(n, dtype=np.int64)
    prev_row = {d.gt_identity: j for j, d in enumerate(prev.detections) if d.gt_identity is not None}
    rows, prev_sel, g_cur, g_prev = [], [], [], []
    for i, det in enumerate(cur.detections):
        obj = gt_cur.get(det.gt_identity) if det.gt_identity is not None else None
        if obj is None:
            continue
        mask[i] = True
        gt_boxes[i] = obj.box.as_array()
        gt_vel[i] = obj.velocity
        gt_attr[i] = obj.attribute
        j = prev_row.get(det.gt_identity)
        if j is not None and det.gt_identity in gt_prev:
            rows.append(i)
            prev_sel.append(prev_boxes[j])
            g_cur.append(obj.box.as_array())
            g_prev.append(gt_prev[det.gt_identity].box.as_array())
    return PairSample(
        s_idx, t, zeta, cur.timestamp - prev.timestamp,
        cache.get(s_idx, scenario, t), cache.get(s_idx, scenario, t - zeta),
        gt_association(cur, prev), det_boxes, mask, gt_boxes, gt_vel, gt_attr,
        np.asarray(rows, dtype=np.int64), np.asarray(prev_sel).reshape(-1, 7),
        np.asarray(g_cur).reshape(-1, 7), np.asarray(g_prev).reshape(-1, 7),
    )


def sample_pairs(scenarios: Sequence[Scenario], cfg: TrainConfig, rng: np.random.Generator,
                 net_cfg: NetConfig, n_pairs: int | None = None,
                 cache: _InputCache | None = None) -> list[PairSample]:
    """Uniform (scenario, t, ζ) samples with t in [τ, n_frames - 1], ζ in ``cfg.dt_range``.

    Draws where either frame has no detections are redrawn.
    """
    if not scenarios:
        raise TrainingError("no scenarios to sample from")
    tau = net_cfg.tau
    for s in scenarios:
        if len(s) < tau + 1:
            raise TrainingError(f"scenario has {len(s)} frames, needs at least tau+1={tau + 1}")
    n_pairs = cfg.batch_pairs if n_pairs is None else n_pairs
    lo, hi = cfg.dt_range
    cache = cache or _InputCache(net_cfg)
    out = []
    while len(out) < n_pairs:
        for _ in range(1000):
            s_idx = int(rng.integers(0, len(scenarios)))
            sc = scenarios[s_idx]
            t = int(rng.integers(tau, len(sc)))
            zeta = int(rng.integers(lo, hi + 1))
            if sc.det_frames[t].detections and sc.det_frames[t - zeta].detections:
                break
        else:
            raise TrainingError("could not find a frame pair with detections on both sides")
        pair = build_pair(sc, t, zeta, net_cfg, s_idx, cache)
        if cfg.rotate_appearance:
            rotate_appearance(pair, rng)
        out.append(pair)
    return out


def rotate_appearance(pair: PairSample, rng: np.random.Generator) -> None:
    """Apply one random orthogonal map to the Re-ID vectors of both frames.

    Cosine similarities between the two frames are unchanged, so the network
    cannot key on the identity prototypes of the training scenes.
    """
    d = pair.cur_inputs["reid"].shape[1]
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q *= np.sign(np.diag(r))
    pair.cur_inputs = {**pair.cur_inputs, "reid": pair.cur_inputs["reid"] @ q}
    pair.prev_inputs = {**pair.prev_inputs, "reid": pair.prev_inputs["reid"] @ q}


# --- forward / loss ---------------------------------------------------------------------------

def pair_losses(net: AssocNet, pair: PairSample, use_consistency: bool = True) -> dict[str, Tensor]:
    """Forward the full pipeline on one pair and return the named loss terms."""
    cur = net.spatial(net.embed(pair.cur_inputs))
    prev = net.spatial(net.embed(pair.prev_inputs))
    motion = net.motion(prev, pair.dt)
    agg, gamma = net.temporal(cur, motion)
    vel, attr, refine = net.heads(agg)
    refined = ad.add(refine, pair.det_boxes)
    parts = {"tracking": tracking_loss(gamma, pair.association)}
    if use_consistency:
        if pair.cons_rows.size:
            parts["consistency"] = temporal_consistency_loss(
                ad.index(refined, pair.cons_rows), pair.cons_prev_boxes,
                pair.cons_gt_cur, pair.cons_gt_prev)
        else:
            parts["consistency"] = Tensor(0.0)
    parts.update(aux_loss_terms(vel, attr, refined, pair.gt_velocity, pair.gt_attribute,
                                pair.gt_boxes, pair.target_mask))
    return parts


def consistency_eval_loss(net: AssocNet, pairs: Sequence[PairSample]) -> float:
    """Mean temporal-consistency loss of refined boxes (no gradient)."""
    vals = []
    with ad.no_grad():
        for p in pairs:
            if not p.cons_rows.size:
                continue
            cur = net.spatial(net.embed(p.cur_inputs))
            prev = net.spatial(net.embed(p.prev_inputs))
            agg, _ = net.temporal(cur, net.motion(prev, p.dt))
            refined = ad.add(net.heads(agg)[2], p.det_boxes)
            vals.append(temporal_consistency_loss(ad.index(refined, p.cons_rows), p.cons_prev_boxes,
                                                  p.cons_gt_cur, p.cons_gt_prev).item())
    return float(np.mean(vals)) if vals else 0.0


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if lr != 0.0:
                p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, d: dict) -> None:
        self.t = int(d["t"])
        self.m = {k: np.array(v, dtype=np.float64) for k, v in d["m"].items()}
        self.v = {k: np.array(v, dtype=np.float64) for k, v in d["v"].items()}


def train_step(net: AssocNet, optimizer: Adam, batch: Sequence[PairSample], lr: float,
               use_consistency: bool = True, grad_clip: float | None = None) -> dict[str, float]:
    """One optimizer update on a batch of pairs; returns batch-mean loss terms and ``total``."""
    net.zero_grad()
    sums: dict[str, float] = {}
    scale = 1.0 / len(batch)
    for pair in batch:
        parts = pair_losses(net, pair, use_consistency)
        total = combined_loss(parts)
        if not math.isfinite(total.item()):
            raise ad.NumericError(f"non-finite loss on pair {pair.scenario_index}/{pair.t}/{pair.zeta}")
        ad.mul_scalar(total, scale).backward()
        for k, v in parts.items():
            sums[k] = sums.get(k, 0.0) + v.item() * scale
    if grad_clip is not None:
        gn = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in net.parameters()
                           if p.grad is not None))
        if gn > grad_clip:
            for p in net.parameters():
                if p.grad is not None:
                    p.grad *= grad_clip / gn
    optimizer.step(net.params, lr)
    sums["total"] = sum(sums.values())
    return sums


# --- evaluation & fit ---------------------------------------------------------------------------

def track_scenario(net: AssocNet, scenario: Scenario, tracker_cfg: TrackerConfig | None = None):
    return run_tracker(Tracker(net, copy.deepcopy(tracker_cfg) if tracker_cfg else None),
                       scenario.det_frames)


def evaluate(net_or_ckpt, scenarios: Sequence[Scenario], tracker_cfg: TrackerConfig | None = None,
             eval_cfg: EvalConfig | None = None) -> dict:
    """Track every scenario and compute the metrics report."""
    net = net_or_ckpt.to_net() if isinstance(net_or_ckpt, Checkpoint) else net_or_ckpt
    if not scenarios:
        raise TrainingError("no scenarios to evaluate")
    hyps, gts = [], []
    for sc in scenarios:
        hyps.append(hyp_items(track_scenario(net, sc, tracker_cfg)))
        gts.append(gt_items(sc))
    return evaluate_metrics(gts, hyps, eval_cfg)


@dataclass
class FitResult:
    best: Checkpoint
    final: Checkpoint
    history: list[dict]


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    drops = sum(1 for e in cfg.lr_drop_epochs if epoch >= e)
    return cfg.learning_rate * (0.1 ** drops)


def fit(cfg: TrainConfig, scenarios: Sequence[Scenario], net_cfg: NetConfig | None = None,
        val_scenarios: Sequence[Scenario] | None = None, resume: Checkpoint | None = None,
        tracker_cfg: TrackerConfig | None = None, on_step: Callable[[dict], None] | None = None,
        stop_after_epochs: int | None = None) -> FitResult:
    """Epoch loop with step-wise LR drops, optional validation AMOTA and best-checkpoint retention.

    ``resume`` continues from a checkpoint written by a previous call (weights,
    optimizer moments, PRNG state and epoch counter), reproducing the
    uninterrupted run exactly. ``stop_after_epochs`` ends the loop early.
    """
    if not scenarios:
        raise TrainingError("fit needs at least one scenario")
    if resume is not None:
        net = resume.to_net()
        net_cfg = net.config
    else:
        net_cfg = net_cfg or NetConfig()
        net = AssocNet(net_cfg, seed=cfg.seed)
    cfg.validate(net_cfg.tau)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    opt = Adam(cfg.beta1, cfg.beta2, cfg.adam_eps)
    step, epoch0 = 0, 0
    best_score = -math.inf
    best: Checkpoint | None = None
    history: list[dict] = []
    if resume is not None:
        rng.bit_generator.state = copy.deepcopy(resume.rng_state)
        opt.load_state_dict(resume.optimizer)
        step, epoch0 = resume.step, resume.epoch
        best_score = resume.metadata.get("best_score", -math.inf)
        history = list(resume.metadata.get("history", []))
    steps_per_epoch = cfg.steps_per_epoch or max(1, math.ceil(len(scenarios) * 8 / cfg.batch_pairs))
    cache = _InputCache(net_cfg)

    def snapshot(epoch):
        return Checkpoint.from_net(net, step=step, epoch=epoch,
                                   rng_state=copy.deepcopy(rng.bit_generator.state),
                                   optimizer=opt.state_dict(), train_config=cfg.to_dict(),
                                   metadata={"best_score": best_score, "history": list(history)})

    def validate(epoch):
        nonlocal best_score, best
        if not val_scenarios:
            return None
        with ad.no_grad():
            rep = evaluate(net, val_scenarios, tracker_cfg)
        if rep["amota"] > best_score:
            best_score = rep["amota"]
            best = snapshot(epoch)
        return rep

    if resume is None and val_scenarios:
        rep = validate(0)
        history.append({"epoch": 0, "step": 0, "val": rep})
    last_epoch = cfg.epochs if stop_after_epochs is None else min(cfg.epochs, epoch0 + stop_after_epochs)
    for epoch in range(epoch0, last_epoch):
        lr = _lr_at(cfg, epoch)
        t0 = time.time()
        sums: dict[str, float] = {}
        for _ in range(steps_per_epoch):
            batch = sample_pairs(scenarios, cfg, rng, net_cfg, cache=cache)
            losses = train_step(net, opt, batch, lr, cfg.use_consistency_loss, cfg.grad_clip)
            step += 1
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + v / steps_per_epoch
            if on_step:
                on_step({"epoch": epoch + 1, "step": step, "lr": lr, **losses})
        # wall-clock time is logged only, so checkpoints stay byte-identical across runs
        entry = {"epoch": epoch + 1, "step": step, "lr": lr, **sums}
        if val_scenarios and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
            entry["val"] = validate(epoch + 1)
        history.append(entry)
        log.info("epoch %d (%.1fs): %s", epoch + 1, time.time() - t0,
                 {k: round(v, 4) for k, v in entry.items() if isinstance(v, float)})
    final = snapshot(last_epoch)
    return FitResult(best or final, final, history)
