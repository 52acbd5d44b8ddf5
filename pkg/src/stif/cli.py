"""Command-line entry point: ``stif simulate | train | track | eval | report``.

Exit codes: 0 success, 1 unexpected failure, 2 malformed input or config,
3 numeric failure (non-finite values).
"""

from __future__ import annotations

import os

_threads = os.environ.get("STIF_THREADS")
if _threads is not None and _threads.strip().isdigit() and int(_threads) > 0:
    # must precede the first numpy import to take effect
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads.strip())

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .assoc_net import ConfigError as NetConfigError, NetConfig, dual_softmax
from .autodiff import NumericError
from .formats import (FormatError, detection_frames, detection_records, dump_json,
                      ground_truth_frames, ground_truth_records, load_checkpoint, load_json,
                      read_jsonl, save_checkpoint, track_records, write_jsonl)
from .geometry import GeometryError
from .metrics import EvalConfig, GTItem, HypItem, MetricsError, evaluate as evaluate_metrics
from .simulator import ConfigError as SimConfigError, Scenario, ScenarioConfig, scenario_suite
from .tracker import GreedyBEVTracker, Tracker, TrackerConfig, TrackerError, run_tracker
from .trainer import Checkpoint, TrainConfig, TrainingError, fit

log = logging.getLogger("stif")

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3
INPUT_ERRORS = (FormatError, SimConfigError, NetConfigError, TrainingError, TrackerError,
                MetricsError, GeometryError)


class UsageError(ValueError):
    pass


# --- configs ------------------------------------------------------------------------------

def _dc_from_dict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise UsageError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise UsageError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**d)


@dataclass
class SimulateConfig:
    n_scenes: int = 1
    base_seed: int = 0
    n_objects_range: list[int] | None = None
    scenario: dict = field(default_factory=lambda: ScenarioConfig().to_dict())

    def build(self) -> list[Scenario]:
        over = {k: v for k, v in self.scenario.items() if k != "seed"}
        if self.n_objects_range is not None:
            over.pop("n_objects", None)
            return scenario_suite(self.n_scenes, self.base_seed, tuple(self.n_objects_range), **over)
        base = ScenarioConfig.from_dict({**over, "seed": self.base_seed})
        from .simulator import generate
        return [generate(ScenarioConfig.from_dict({**base.to_dict(), "seed": self.base_seed + i}))
                for i in range(self.n_scenes)]


def default_config(command: str) -> dict:
    if command == "simulate":
        return asdict(SimulateConfig())
    if command == "train":
        return {"train": TrainConfig().to_dict(), "net": NetConfig().to_dict(),
                "tracker": asdict(TrackerConfig()), "eval": EvalConfig().to_dict()}
    if command == "track":
        return {"tracker": asdict(TrackerConfig())}
    if command == "eval":
        return {"eval": EvalConfig().to_dict()}
    return {}


def load_config(command: str, path: str | None, seed: int | None) -> dict:
    cfg = default_config(command)
    if path:
        doc = load_json(path)
        for key, val in doc.items():
            if key not in cfg:
                raise UsageError(f"{path}: unknown section {key!r} for {command}")
            if isinstance(cfg[key], dict) and isinstance(val, dict) and key != "scenario":
                unknown = set(val) - set(cfg[key])
                if unknown:
                    raise UsageError(f"{path}: unknown keys in {key!r}: {sorted(unknown)}")
                cfg[key] = {**cfg[key], **val}
            elif key == "scenario":
                cfg[key] = {**cfg[key], **val}
            else:
                cfg[key] = val
    if seed is not None:
        if command == "simulate":
            cfg["base_seed"] = seed
        elif command == "train":
            cfg["train"]["seed"] = seed
    return cfg


# --- manifest ---------------------------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    inputs: list[str]
    outputs: list[str]
    tool_version: str = __version__
    wall_clock_seconds: float = 0.0

    def write(self, path: Path) -> None:
        dump_json(path, asdict(self))


# --- scenario directories -------------------------------------------------------------------------

def scene_stems(directory: Path) -> list[Path]:
    stems = sorted(p.with_name(p.name[: -len(".detections.jsonl")])
                   for p in directory.glob("*.detections.jsonl"))
    if not stems:
        raise FormatError("no *.detections.jsonl files", directory)
    return stems


def load_scene(stem: Path) -> Scenario:
    det_path = Path(f"{stem}.detections.jsonl")
    gt_path = Path(f"{stem}.gt.jsonl")
    dets = detection_frames(read_jsonl(det_path), det_path)
    gts = ground_truth_frames(read_jsonl(gt_path)) if gt_path.exists() else []
    if gts and len(gts) != len(dets):
        raise FormatError(f"{len(gts)} ground-truth frames vs {len(dets)} detection frames", gt_path)
    return Scenario(ScenarioConfig(), gts, dets)


def load_scenes(directory: str | Path) -> list[Scenario]:
    return [load_scene(s) for s in scene_stems(Path(directory))]


def _items_from_records(path: Path, kind: str):
    recs = read_jsonl(path)
    out = []
    for i, rec in enumerate(recs, start=1):
        if kind == "gt":
            ids = [o.gt_id for o in rec.objects]
            if any(v is None for v in ids):
                raise FormatError("ground-truth objects need gt_id", path, i)
            out.append([GTItem(o.gt_id, o.box3d) for o in rec.objects])
        else:
            # ground-truth files double as perfect hypotheses
            ids = [o.gt_id if rec.kind == "ground_truth" else o.track_id for o in rec.objects]
            if any(v is None for v in ids):
                raise FormatError("track objects need track_id", path, i)
            out.append([HypItem(h, o.box3d, o.confidence) for h, o in zip(ids, rec.objects)])
    return out


# --- commands -----------------------------------------------------------------------------------------

def cmd_simulate(args, cfg: dict) -> tuple[list[str], list[str]]:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sim = _dc_from_dict(SimulateConfig, cfg, "simulate config")
    outputs = []
    for i, sc in enumerate(sim.build()):
        stem = out / f"scene_{i:04d}"
        write_jsonl(f"{stem}.detections.jsonl", detection_records(sc))
        write_jsonl(f"{stem}.gt.jsonl", ground_truth_records(sc))
        outputs += [f"{stem}.detections.jsonl", f"{stem}.gt.jsonl"]
    return [], outputs


def cmd_train(args, cfg: dict) -> tuple[list[str], list[str]]:
    if not args.input:
        raise UsageError("train needs --input <scenario dir>")
    if not args.out:
        raise UsageError("train needs --out <checkpoint path>")
    tcfg = TrainConfig.from_dict(cfg["train"])
    ncfg = NetConfig.from_dict(cfg["net"])
    tracker_cfg = _dc_from_dict(TrackerConfig, cfg["tracker"], "tracker config")
    train = load_scenes(args.input)
    val = load_scenes(args.val) if args.val else None
    resume = load_checkpoint(args.checkpoint) if args.checkpoint else None
    result = fit(tcfg, train, ncfg, val_scenarios=val, resume=resume, tracker_cfg=tracker_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, result.best)
    save_checkpoint(out.with_name(out.stem + ".final" + out.suffix), result.final)
    curve = out.with_name(out.stem + ".loss.csv")
    write_loss_curve(curve, result.history)
    inputs = [args.input] + ([args.val] if args.val else []) + ([args.checkpoint] if args.checkpoint else [])
    return inputs, [str(out), str(out.with_name(out.stem + ".final" + out.suffix)), str(curve)]


def write_loss_curve(path: Path, history: list[dict]) -> None:
    cols = ["epoch", "step", "lr", "tracking", "consistency", "velocity", "attribute", "box", "total",
            "val_amota", "val_mota"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for e in history:
            val = e.get("val") or {}
            row = [e.get(c, "") for c in cols[:-2]] + [val.get("amota", ""), val.get("mota", "")]
            w.writerow([_fmt(v) for v in row])


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _track_one(det_path: Path, tracker, out_path: Path, affinity_path: Path | None) -> None:
    frames = detection_frames(read_jsonl(det_path), det_path)
    results = run_tracker(tracker, frames)
    write_jsonl(out_path, track_records(results, frames))
    if affinity_path is not None:
        with open(affinity_path, "w", encoding="utf-8") as fh:
            for f, r in zip(frames, results):
                aff = None if r.affinity is None else np.round(r.affinity, 12).tolist()
                fh.write(json.dumps({"schema_version": "1.0", "frame_index": f.frame_index,
                                     "affinity": aff}, separators=(",", ":")) + "\n")


def cmd_track(args, cfg: dict) -> tuple[list[str], list[str]]:
    if not args.input or not args.out:
        raise UsageError("track needs --input <detections.jsonl | scenario dir> and --out")
    tracker_cfg = _dc_from_dict(TrackerConfig, cfg["tracker"], "tracker config")
    ckpt = load_checkpoint(args.checkpoint) if args.checkpoint else None
    src = Path(args.input)
    out = Path(args.out)

    def make():
        if ckpt is None:
            return GreedyBEVTracker(TrackerConfig(**asdict(tracker_cfg)))
        return Tracker(ckpt.to_net(), TrackerConfig(**asdict(tracker_cfg)))

    inputs = [str(src)] + ([args.checkpoint] if args.checkpoint else [])
    outputs = []
    if src.is_dir():
        out.mkdir(parents=True, exist_ok=True)
        for stem in scene_stems(src):
            o = out / f"{stem.name}.tracks.jsonl"
            a = out / f"{stem.name}.affinity.jsonl" if ckpt is not None else None
            _track_one(Path(f"{stem}.detections.jsonl"), make(), o, a)
            outputs += [str(o)] + ([str(a)] if a else [])
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        a = out.with_name(out.name.replace(".jsonl", "") + ".affinity.jsonl") if ckpt is not None else None
        _track_one(src, make(), out, a)
        outputs = [str(out)] + ([str(a)] if a else [])
    return inputs, outputs


def _pair_eval_inputs(gt: Path, tracks: Path) -> list[tuple[Path, Path]]:
    if gt.is_dir() != tracks.is_dir():
        raise UsageError("--gt and --tracks must both be files or both be directories")
    if not gt.is_dir():
        return [(gt, tracks)]
    pairs = []
    for g in sorted(gt.glob("*.gt.jsonl")):
        t = tracks / g.name.replace(".gt.jsonl", ".tracks.jsonl")
        if not t.exists():
            raise FormatError(f"missing tracks file {t.name}", tracks)
        pairs.append((g, t))
    if not pairs:
        raise FormatError("no *.gt.jsonl files", gt)
    return pairs


def cmd_eval(args, cfg: dict) -> tuple[list[str], list[str]]:
    if not args.gt or not args.tracks or not args.out:
        raise UsageError("eval needs --gt, --tracks and --out")
    ecfg = _dc_from_dict(EvalConfig, cfg["eval"], "eval config")
    gts, hyps = [], []
    for g, t in _pair_eval_inputs(Path(args.gt), Path(args.tracks)):
        gi, hi = _items_from_records(g, "gt"), _items_from_records(t, "tracks")
        if len(gi) != len(hi):
            raise FormatError(f"{len(hi)} track frames vs {len(gi)} ground-truth frames", t)
        gts.append(gi)
        hyps.append(hi)
    report = evaluate_metrics(gts, hyps, ecfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(out / "metrics.json", {"metrics": report, "eval_config": ecfg.to_dict()})
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in report.items():
            w.writerow([k, _fmt(v)])
    return [args.gt, args.tracks], [str(out / "metrics.json"), str(out / "metrics.csv")]


def cmd_report(args, cfg: dict) -> tuple[list[str], list[str]]:
    """Plot-ready CSV dumps: BEV trajectories, affinity heatmaps, loss curves."""
    if not args.out or not (args.tracks or args.loss_curve):
        raise UsageError("report needs --out and at least one of --tracks / --loss-curve")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs, outputs = [], []
    if args.tracks:
        src = Path(args.tracks)
        files = sorted(src.glob("*.tracks.jsonl")) if src.is_dir() else [src]
        traj = out / "trajectories.csv"
        heat = out / "affinity.csv"
        with open(traj, "w", newline="") as ft, open(heat, "w", newline="") as fa:
            wt = csv.writer(ft, lineterminator="\n")
            wa = csv.writer(fa, lineterminator="\n")
            wt.writerow(["sequence", "frame_index", "timestamp", "track_id", "x", "y", "yaw"])
            wa.writerow(["sequence", "frame_index", "row", "col", "probability"])
            for f in files:
                seq = f.name.replace(".tracks.jsonl", "")
                for rec in read_jsonl(f):
                    for o in rec.objects:
                        wt.writerow([seq, rec.frame_index, _fmt(rec.timestamp), o.track_id,
                                     _fmt(o.box3d.x), _fmt(o.box3d.y), _fmt(o.box3d.yaw)])
                aff_path = f.with_name(f.name.replace(".tracks.jsonl", ".affinity.jsonl"))
                if aff_path.exists():
                    inputs.append(str(aff_path))
                    for ln, text in enumerate(aff_path.read_text().splitlines(), start=1):
                        try:
                            d = json.loads(text)
                        except json.JSONDecodeError as e:
                            raise FormatError(f"invalid JSON: {e.msg}", aff_path, ln) from None
                        for r, row in enumerate(d.get("affinity") or []):
                            for c, v in enumerate(row):
                                wa.writerow([seq, d["frame_index"], r, c, _fmt(float(v))])
                inputs.append(str(f))
        outputs += [str(traj), str(heat)]
    if args.loss_curve:
        src = Path(args.loss_curve)
        try:
            text = src.read_text()
        except OSError as e:
            raise FormatError(f"cannot open: {e.strerror}", src) from None
        dst = out / "loss_curve.csv"
        dst.write_text(text)
        inputs.append(str(src))
        outputs.append(str(dst))
    return inputs, outputs


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "track": cmd_track,
            "eval": cmd_eval, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stif", description="Spatio-temporal 3D association tracker")
    p.add_argument("--version", action="version", version=f"stif {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config (partial; missing keys take defaults)")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--out", help="output file or directory")
        s.add_argument("--checkpoint", help="model checkpoint (train: resume from it)")
        s.add_argument("--verbose", "-v", action="store_true")
        s.add_argument("--dump-config", action="store_true", help="print the full config and exit")
        if name in ("train", "track"):
            s.add_argument("--input", help="scenario directory or detections JSONL")
        if name == "train":
            s.add_argument("--val", help="held-out scenario directory")
        if name == "eval":
            s.add_argument("--gt", help="ground-truth JSONL file or scenario directory")
        if name in ("eval", "report"):
            s.add_argument("--tracks", help="tracks JSONL file or directory")
        if name == "report":
            s.add_argument("--loss-curve", help="loss curve CSV written by train")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if _threads is not None and not (_threads.strip().isdigit() and int(_threads) > 0):
        print(f"error: STIF_THREADS must be a positive integer, got {_threads!r}", file=sys.stderr)
        return EXIT_INPUT
    t0 = time.time()
    try:
        cfg = load_config(args.command, args.config, args.seed)
        if args.dump_config:
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return EXIT_OK
        if not args.out:
            raise UsageError(f"{args.command} needs --out")
        inputs, outputs = COMMANDS[args.command](args, cfg)
    except (UsageError, *INPUT_ERRORS) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericError, FloatingPointError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    seeds = {}
    if args.command == "simulate":
        seeds["base_seed"] = cfg["base_seed"]
    elif args.command == "train":
        seeds["train"] = cfg["train"]["seed"]
    out = Path(args.out)
    manifest_path = (out / "manifest.json") if out.is_dir() else out.with_name(out.name + ".manifest.json")
    RunManifest(args.command, cfg, seeds, [str(i) for i in inputs], outputs,
                wall_clock_seconds=time.time() - t0).write(manifest_path)
    log.info("wrote %s", manifest_path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
