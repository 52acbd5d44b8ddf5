"""End-to-end acceptance checks, one test (and one summary line) per criterion.

The desk-scale training runs are shared through a module fixture; the full
module takes roughly 20 minutes on one CPU core.
"""

import math
import time
import zlib

import numpy as np
import pytest

import conftest
from oracles import amota_sweep, brute_force_assignment
from test_assoc_net import SMALL, _inputs, _permute
from test_autodiff import CASES
from test_losses import _gt
from test_metrics import TWO, _random_scene, _to_items, gt_frames

from stif import autodiff as ad
from stif.assoc_net import AssocNet, NetConfig, dual_softmax, init_params
from stif.autodiff import Tensor
from stif.cli import main as cli_main
from stif.losses import aux_loss_terms, temporal_consistency_loss, tracking_loss
from stif.metrics import HypItem, amota_amotp, clear_mot_sequence, mota_motp
from stif.simulator import ScenarioConfig, generate, scenario_suite
from stif.tracker import GreedyBEVTracker, Tracker, hungarian, run_tracker
from stif.trainer import (TrainConfig, build_pair, consistency_eval_loss, evaluate, fit,
                          pair_losses, sample_pairs)
from stif.metrics import evaluate as evaluate_metrics, gt_items, hyp_items

GRAD_TOL = 1e-4
N_INSTANCES = 20

# desk-scale end-to-end setting
TRAIN_SEEDS, VAL_SEEDS = (0, 64), (1000, 16)
TRAIN = TrainConfig(learning_rate=3e-4, epochs=8, steps_per_epoch=200, lr_drop_epochs=[6], seed=0)
TRAIN_BUDGET_S, EVAL_BUDGET_S = 15 * 60, 60
GRAD_BUDGET_S = 120


def report(criterion: int, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)


# --- 1 ---------------------------------------------------------------------------------------

def _composed_instance(rng):
    cfg = NetConfig(d=8, heads=2, n_spatial_layers=2, n_temporal_layers=2, affinity_layer_index=2,
                    geo_hidden=6, ffn_hidden=10, affinity_hidden=4)
    sc = generate(ScenarioConfig(n_objects=int(rng.integers(2, 5)), n_frames=cfg.tau + 2,
                                 seed=int(rng.integers(0, 2**31))))
    pairs = sample_pairs([sc], TrainConfig(), rng, cfg, n_pairs=1)
    net = AssocNet(cfg, seed=int(rng.integers(0, 2**31)))
    # zero-initialized biases put dead-unit pre-activations exactly on the ReLU kink
    for p in net.parameters():
        if p.data.ndim == 1 and not p.name.endswith(".g"):
            p.data = p.data + rng.normal(0.0, 0.1, p.data.shape)
    pair = pairs[0]

    def fn():
        parts = pair_losses(net, pair, use_consistency=True)
        total = Tensor(0.0)
        for t in parts.values():
            total = ad.add(total, t)
        return total

    return fn, net.parameters()


def test_criterion_1_gradients():
    t0 = time.time()
    worst = {}
    for name, make in sorted(CASES.items()):
        rng = np.random.default_rng(zlib.crc32(b"acc-" + name.encode()))
        worst[name] = max(ad.gradcheck(*make(rng), eps=1e-5) for _ in range(N_INSTANCES))
    rng = np.random.default_rng(7)
    worst["composed_pipeline"] = max(
        ad.gradcheck(*_composed_instance(rng), eps=1e-5, max_entries=4, rng=rng)
        for _ in range(N_INSTANCES))
    elapsed = time.time() - t0
    top = max(worst, key=worst.get)
    ok = worst[top] < GRAD_TOL and elapsed < GRAD_BUDGET_S
    report(1, ok, f"{len(worst)} checks x {N_INSTANCES} instances, worst rel err {worst[top]:.1e} "
                  f"({top}), {elapsed:.0f}s")
    assert ok


# --- 2 ---------------------------------------------------------------------------------------

def test_criterion_2_hungarian_oracle():
    bad = []
    for n in range(1, 8):
        for m in range(1, 8):
            rng = np.random.default_rng(1000 * n + m)
            for k in range(100):
                c = rng.standard_normal((n, m)) if k % 2 else rng.integers(0, 4, (n, m)).astype(float)
                if hungarian(c)[1] != brute_force_assignment(c)[1]:
                    bad.append((n, m, k))
    report(2, not bad, f"4900 matrices (n, m <= 7), {len(bad)} cost mismatches")
    assert not bad


# --- 3 ---------------------------------------------------------------------------------------

def test_criterion_3_metric_oracles():
    gt = gt_frames({0: TWO[0]})
    miss = [[HypItem(7, f[0].box)] if t != 4 else [] for t, f in enumerate(gt)]
    mota_miss = mota_motp(clear_mot_sequence(gt, miss))[0]

    gt2 = gt_frames(TWO)
    swap = [[HypItem((0, 1)[t >= 5], f[0].box), HypItem((1, 0)[t >= 5], f[1].box)]
            for t, f in enumerate(gt2)]
    switches = sum(r.id_switches for r in clear_mot_sequence(gt2, swap))

    perfect = [[HypItem(g.id, g.box) for g in f] for f in gt2]
    mota_p, motp_p = mota_motp(clear_mot_sequence(gt2, perfect))

    rng = np.random.default_rng(11)
    amota_err = 0.0
    for _ in range(20):
        gt_t, hyp_t = _random_scene(rng, clutter=True)
        a, p = amota_amotp(*[[x] for x in _to_items(gt_t, hyp_t)])
        ra, rp = amota_sweep(gt_t, hyp_t)
        amota_err = max(amota_err, abs(a - ra), abs(p - rp))

    ok = (abs(mota_miss - 0.9) < 1e-12 and switches == 2 and mota_p == 1.0 and motp_p == 0.0
          and amota_err <= 1e-9)
    report(3, ok, f"one-miss MOTA {mota_miss:.3f}, swap IDS {switches}, perfect MOTA/MOTP "
                  f"{mota_p}/{motp_p}, AMOTA sweep max err {amota_err:.1e}")
    assert ok


# --- 4 ---------------------------------------------------------------------------------------

def test_criterion_4_loss_closed_forms():
    track = tracking_loss(Tensor(np.zeros((2, 2))), _gt(1, 1, [(0, 0)])).item()
    rng = np.random.default_rng(4)
    boxes = np.column_stack([rng.normal(0, 10, (5, 3)), rng.uniform(1, 4, (5, 3)), rng.uniform(-3, 3, 5)])
    prev = boxes + rng.normal(0, 0.5, boxes.shape) * [1, 1, 1, 0, 0, 0, 1]
    zero = temporal_consistency_loss(Tensor(boxes), Tensor(prev), boxes, prev).item()
    pt, pp = boxes + rng.normal(0, 0.3, boxes.shape), prev + rng.normal(0, 0.3, boxes.shape)
    base = temporal_consistency_loss(Tensor(pt), Tensor(pp), boxes, prev).item()
    shift = np.array([3.0, -2.0, 0.5, 0, 0, 0, 0])
    moved = temporal_consistency_loss(Tensor(pt + shift), Tensor(pp + shift), boxes + shift,
                                      prev + shift).item()
    attr = aux_loss_terms(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))), Tensor(boxes[:2]),
                          np.zeros((2, 3)), np.array([0, 2]), boxes[:2])["attribute"].item()
    ok = (abs(track + math.log(0.25)) <= 1e-9 and zero == 0.0 and abs(moved - base) <= 1e-12
          and abs(attr - math.log(3)) <= 1e-9)
    report(4, ok, f"tracking {track:.12f} (-log 0.25 = {-math.log(0.25):.12f}), consistency on GT "
                  f"{zero}, translation drift {abs(moved - base):.1e}, uniform attribute CE {attr:.12f}")
    assert ok


# --- 5 ---------------------------------------------------------------------------------------

def _equivariance_error(rng) -> float:
    net = AssocNet(SMALL, seed=int(rng.integers(0, 1000)))
    xc, xp = _inputs(rng, 5), _inputs(rng, 4)
    pc, pp = rng.permutation(5), rng.permutation(4)

    def run(c, p):
        cur = net.spatial(net.embed(c))
        prev = net.motion(net.spatial(net.embed(p)), 0.5)
        agg, g = net.temporal(cur, prev)
        return cur.data, agg.data, g.data

    s1, a1, g1 = run(xc, xp)
    s2, a2, g2 = run(_permute(xc, pc), _permute(xp, pp))
    rows, cols = np.append(pc, 5), np.append(pp, 4)
    return max(np.abs(s1[pc] - s2).max(), np.abs(a1[pc] - a2).max(),
               np.abs(g1[np.ix_(rows, cols)] - g2).max())


def _padding_exact(rng) -> bool:
    params = init_params(SMALL, 5)
    outs = []
    for K in (6, 12):
        net = AssocNet(NetConfig(**{**SMALL.to_dict(), "K": K}), params)
        xc, xp = _inputs(np.random.default_rng(1), 3), _inputs(np.random.default_rng(2), 4)

        def padded(x, n):
            f = np.zeros((K, SMALL.d))
            f[:n] = net.embed(x).data
            f[n:] = rng.standard_normal((K - n, SMALL.d))
            m = np.zeros(K, dtype=bool)
            m[:n] = True
            return Tensor(f), m

        fc, mc = padded(xc, 3)
        fp, mp = padded(xp, 4)
        sc = net.spatial_flow(fc, mc)
        agg, aff = net.temporal_flow(sc, net.motion_modeling(net.spatial_flow(fp, mp), 0.5, mp), mc, mp)
        outs.append(sc.data[:3].tobytes() + agg.data[:3].tobytes() + aff.logits.data.tobytes())
    return outs[0] == outs[1]


def _cli_deterministic(tmp_path) -> bool:
    cfg = tmp_path / "train.json"
    cfg.write_text('{"train": {"epochs": 1, "steps_per_epoch": 2, "learning_rate": 0.001},'
                   ' "net": {"d": 16, "heads": 2, "n_spatial_layers": 1, "n_temporal_layers": 2}}')
    blobs = []
    for run in ("a", "b"):
        d = tmp_path / run
        assert cli_main(["simulate", "--seed", "4", "--out", str(d / "sim"),
                         "--config", str(_sim_cfg(tmp_path))]) == 0
        assert cli_main(["train", "--config", str(cfg), "--input", str(d / "sim"),
                         "--out", str(d / "m.ckpt")]) == 0
        assert cli_main(["track", "--input", str(d / "sim"), "--checkpoint", str(d / "m.ckpt"),
                         "--out", str(d / "tracks")]) == 0
        files = sorted(p for p in d.rglob("*") if p.is_file() and "manifest" not in p.name)
        blobs.append([(p.relative_to(d).as_posix(), p.read_bytes()) for p in files])
    return blobs[0] == blobs[1]


def _sim_cfg(tmp_path):
    p = tmp_path / "sim.json"
    p.write_text('{"n_scenes": 2, "scenario": {"n_frames": 10}}')
    return p


def test_criterion_5_structural_invariants(tmp_path):
    rng = np.random.default_rng(5)
    eq = max(_equivariance_error(rng) for _ in range(10))
    pad = _padding_exact(rng)
    det = _cli_deterministic(tmp_path)
    ok = eq <= 1e-12 and pad and det
    report(5, ok, f"equivariance max err {eq:.1e}, padding bit-exact {pad}, "
                  f"simulate/train/track bit-exact {det}")
    assert ok


# --- 6, 7: desk-scale training ---------------------------------------------------------------

class Runs:
    def __init__(self):
        self.train = scenario_suite(TRAIN_SEEDS[1], TRAIN_SEEDS[0])
        self.val = scenario_suite(VAL_SEEDS[1], VAL_SEEDS[0])
        self._cache = {}

    def get(self, name: str):
        if name not in self._cache:
            net_cfg = NetConfig(cues="appearance" if name == "appearance" else "both")
            cfg = TrainConfig(**{**TRAIN.to_dict(), "dt_range": tuple(TRAIN.dt_range),
                                 "use_consistency_loss": name != "no_consistency"})
            t0 = time.time()
            res = fit(cfg, self.train, net_cfg)
            self._cache[name] = (res.final.to_net(), time.time() - t0)
        return self._cache[name]


@pytest.fixture(scope="module")
def runs():
    return Runs()


def _row_argmax_accuracy(net, scenarios) -> float:
    hit = tot = 0
    with ad.no_grad():
        for sc in scenarios:
            for t in range(1, len(sc)):
                if not (sc.det_frames[t].detections and sc.det_frames[t - 1].detections):
                    continue
                p = build_pair(sc, t, 1, net.config)
                cur = net.spatial(net.embed(p.cur_inputs))
                prev = net.motion(net.spatial(net.embed(p.prev_inputs)), p.dt)
                _, g = net.temporal(cur, prev)
                a = p.association.matrix
                n, m = a.shape[0] - 1, a.shape[1] - 1
                rows = g.data[:n]
                birth = np.exp(rows - rows.max(axis=1, keepdims=True))
                birth = birth[:, m] / birth.sum(axis=1)
                full = np.column_stack([dual_softmax(g), birth])
                for i in range(n):
                    j = np.flatnonzero(a[i, :m])
                    if j.size:
                        tot += 1
                        hit += int(np.argmax(full[i]) == j[0])
    return hit / tot


@pytest.mark.slow
def test_criterion_6_desk_scale(runs):
    net, train_s = runs.get("full")
    acc = _row_argmax_accuracy(net, runs.val)
    t0 = time.time()
    learned = evaluate(net, runs.val)
    eval_s = time.time() - t0
    greedy = evaluate_metrics([gt_items(s) for s in runs.val],
                              [hyp_items(run_tracker(GreedyBEVTracker(), s.det_frames)) for s in runs.val])
    app_net, app_s = runs.get("appearance")
    app = evaluate(app_net, runs.val)
    ids_limit = 0.7 * greedy["id_switches"]
    checks = {
        "a": acc >= 0.95,
        "b": learned["mota"] >= 0.75 and learned["id_switches"] <= ids_limit,
        "c": learned["amota"] > app["amota"],
        "time": max(train_s, app_s) <= TRAIN_BUDGET_S and eval_s <= EVAL_BUDGET_S,
    }
    ok = all(checks.values())
    report(6, ok, f"(a) row-argmax {acc:.3f}; (b) MOTA {learned['mota']:.3f}, IDS {learned['id_switches']} "
                  f"vs greedy {greedy['id_switches']} (limit {ids_limit:.1f}); (c) AMOTA both "
                  f"{learned['amota']:.3f} vs appearance-only {app['amota']:.3f}; train {train_s:.0f}s/"
                  f"{app_s:.0f}s, eval {eval_s:.1f}s; failed: {[k for k, v in checks.items() if not v]}")
    assert ok


def mean_jerk(net, scenarios) -> tuple[float, float]:
    """Mean |third difference| / dt^3 of BEV centers along tracks, for refined
    boxes and for the raw detections the tracker assigned."""
    refined, raw = [], []
    for sc in scenarios:
        results = run_tracker(Tracker(net), sc.det_frames)
        paths: dict[int, list] = {}
        for f, r in zip(sc.det_frames, results):
            world = f.world_boxes()
            for o in r.outputs:
                paths.setdefault(o.track_id, []).append(
                    (f.frame_index, f.timestamp, (o.box.x, o.box.y), (world[o.detection_index].x,
                                                                       world[o.detection_index].y)))
        for p in paths.values():
            for k in range(len(p) - 3):
                seg = p[k:k + 4]
                if seg[-1][0] - seg[0][0] != 3:
                    continue
                dt = (seg[-1][1] - seg[0][1]) / 3
                for out, idx in ((refined, 2), (raw, 3)):
                    xy = np.array([s[idx] for s in seg])
                    out.append(np.linalg.norm(xy[3] - 3 * xy[2] + 3 * xy[1] - xy[0]) / dt ** 3)
    return float(np.mean(refined)), float(np.mean(raw))


@pytest.mark.slow
def test_criterion_7_smoothness(runs):
    net, _ = runs.get("full")
    plain, _ = runs.get("no_consistency")
    j_ref, j_raw = mean_jerk(net, runs.val)
    pairs = sample_pairs(runs.val, TrainConfig(batch_pairs=256), np.random.default_rng(77), net.config)
    with_c = consistency_eval_loss(net, pairs)
    without_c = consistency_eval_loss(plain, pairs)
    ok = j_ref <= j_raw and with_c < without_c
    report(7, ok, f"jerk refined {j_ref:.3f} vs detections {j_raw:.3f} m/s^3; validation consistency "
                  f"loss {with_c:.4f} (trained with) vs {without_c:.4f} (without)")
    assert ok


@pytest.mark.slow
def test_final_checkpoint_beats_initial_weights(runs):
    net, _ = runs.get("full")
    initial = AssocNet(NetConfig(), seed=TRAIN.seed)
    assert evaluate(net, runs.val)["amota"] >= evaluate(initial, runs.val)["amota"]
