"""On-disk formats: JSON Lines frame files, the binary checkpoint container,
JSON configs and run manifests.

Every file carries ``schema_version`` ("MAJOR.MINOR"); readers reject a
major version they do not know.
"""

from __future__ import annotations

import base64
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .assoc_net import NetConfig
from .geometry import Box2D, Box3D, EgoPose
from .simulator import (CATEGORIES, Detection, DetectionFrame, GroundTruthFrame, GTObject,
                        Scenario, ScenarioConfig)
from .trainer import Checkpoint

SCHEMA_VERSION = "1.0"
SCHEMA_MAJOR = 1
CHECKPOINT_MAGIC = b"STIFCKPT"


class FormatError(ValueError):
    """Malformed input; ``line`` is 1-based when known."""

    def __init__(self, message: str, path: str | Path | None = None, line: int | None = None):
        self.path, self.line = path, line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


def check_schema(version, path=None, line=None) -> None:
    if not isinstance(version, str) or "." not in version:
        raise FormatError(f"missing or malformed schema_version {version!r}", path, line)
    try:
        major = int(version.split(".", 1)[0])
    except ValueError:
        raise FormatError(f"malformed schema_version {version!r}", path, line) from None
    if major != SCHEMA_MAJOR:
        raise FormatError(f"unsupported schema major version {major} (expected {SCHEMA_MAJOR})", path, line)


# --- appearance vectors ------------------------------------------------------------------

def encode_vector(v: np.ndarray) -> str:
    return base64.b64encode(np.asarray(v, dtype="<f4").tobytes()).decode("ascii")


def decode_vector(s: str) -> np.ndarray:
    raw = base64.b64decode(s.encode("ascii"), validate=True)
    if len(raw) % 4:
        raise ValueError("appearance payload is not a whole number of float32 values")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


# --- frame records -----------------------------------------------------------------------

@dataclass
class FrameObject:
    box3d: Box3D
    box2d: Box2D | None = None
    category: int = 0
    confidence: float = 1.0
    track_id: int | None = None
    gt_id: int | None = None
    velocity: np.ndarray | None = None
    attribute: int | None = None
    appearance: np.ndarray | None = None


@dataclass
class FrameRecord:
    frame_index: int
    timestamp: float
    objects: list[FrameObject]
    ego_pose: EgoPose | None = None
    kind: str = "detections"  # detections | ground_truth | tracks


def _obj_to_json(o: FrameObject) -> dict:
    d: dict = {"box3d": [float(v) for v in o.box3d.as_array()],
               "category": CATEGORIES[o.category], "confidence": float(o.confidence)}
    if o.box2d is not None:
        d["box2d"] = [float(o.box2d.cx), float(o.box2d.cy), float(o.box2d.w), float(o.box2d.h)]
    if o.track_id is not None:
        d["track_id"] = int(o.track_id)
    if o.gt_id is not None:
        d["gt_id"] = int(o.gt_id)
    if o.velocity is not None:
        d["velocity"] = [float(v) for v in o.velocity]
    if o.attribute is not None:
        d["attribute"] = int(o.attribute)
    if o.appearance is not None:
        d["appearance"] = encode_vector(o.appearance)
    return d


def _obj_from_json(d: dict) -> FrameObject:
    cat = d.get("category", CATEGORIES[0])
    if isinstance(cat, str):
        if cat not in CATEGORIES:
            raise ValueError(f"unknown category {cat!r}")
        cat = CATEGORIES.index(cat)
    box3d = Box3D.from_array(_floats(d["box3d"], 7, "box3d"))
    box2d = Box2D(*_floats(d["box2d"], 4, "box2d")) if d.get("box2d") is not None else None
    vel = np.array(_floats(d["velocity"], 3, "velocity")) if d.get("velocity") is not None else None
    app = decode_vector(d["appearance"]) if d.get("appearance") is not None else None
    return FrameObject(box3d, box2d, int(cat), float(d.get("confidence", 1.0)),
                       _opt_int(d.get("track_id")), _opt_int(d.get("gt_id")), vel,
                       _opt_int(d.get("attribute")), app)


def _floats(v, n: int, name: str) -> list[float]:
    if not isinstance(v, list) or len(v) != n:
        raise ValueError(f"{name} must be a list of {n} numbers")
    out = [float(x) for x in v]
    if not all(np.isfinite(out)):
        raise ValueError(f"{name} has non-finite values")
    return out


def _opt_int(v) -> int | None:
    return None if v is None else int(v)


def record_to_json(rec: FrameRecord) -> str:
    d: dict = {"schema_version": SCHEMA_VERSION, "kind": rec.kind, "frame_index": rec.frame_index,
               "timestamp": float(rec.timestamp),
               "objects": [_obj_to_json(o) for o in rec.objects]}
    if rec.ego_pose is not None:
        d["ego_pose"] = {"rotation": rec.ego_pose.rotation.tolist(),
                         "translation": rec.ego_pose.translation.tolist()}
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def record_from_json(text: str, path=None, line=None) -> FrameRecord:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid JSON: {e.msg} (column {e.colno})", path, line) from None
    if not isinstance(d, dict):
        raise FormatError("frame line must be a JSON object", path, line)
    check_schema(d.get("schema_version"), path, line)
    try:
        pose = None
        if "ego_pose" in d:
            pose = EgoPose(np.array(d["ego_pose"]["rotation"], dtype=np.float64),
                           np.array(d["ego_pose"]["translation"], dtype=np.float64))
        objs = d["objects"]
        if not isinstance(objs, list):
            raise ValueError("objects must be a list")
        return FrameRecord(int(d["frame_index"]), float(d["timestamp"]),
                           [_obj_from_json(o) for o in objs], pose, str(d.get("kind", "detections")))
    except (KeyError, TypeError, ValueError) as e:
        msg = f"missing field {e}" if isinstance(e, KeyError) else str(e)
        raise FormatError(msg, path, line) from None


def write_jsonl(path: str | Path, records: Iterable[FrameRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(record_to_json(rec) + "\n")


def read_jsonl(path: str | Path) -> list[FrameRecord]:
    return list(iter_jsonl(path))


def iter_jsonl(path: str | Path) -> Iterator[FrameRecord]:
    try:
        fh = open(path, encoding="utf-8")
    except OSError as e:
        raise FormatError(f"cannot open: {e.strerror}", path) from None
    with fh:
        prev_t = None
        for i, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            rec = record_from_json(text, path, i)
            if prev_t is not None and rec.timestamp <= prev_t:
                raise FormatError("timestamps must increase strictly", path, i)
            prev_t = rec.timestamp
            yield rec


# --- scenario <-> records ---------------------------------------------------------------

def detection_records(scenario: Scenario) -> list[FrameRecord]:
    out = []
    for f in scenario.det_frames:
        objs = [FrameObject(d.box3d, d.box2d, d.category, d.confidence, None, d.gt_identity,
                            None, None, d.appearance) for d in f.detections]
        out.append(FrameRecord(f.frame_index, f.timestamp, objs, f.ego_pose, "detections"))
    return out


def ground_truth_records(scenario: Scenario) -> list[FrameRecord]:
    out = []
    for f in scenario.gt_frames:
        objs = [FrameObject(o.box, None, o.category, 1.0, None, o.identity, np.asarray(o.velocity),
                            o.attribute) for o in f.objects]
        out.append(FrameRecord(f.frame_index, f.timestamp, objs, f.ego_pose, "ground_truth"))
    return out


def detection_frames(records: list[FrameRecord], path=None) -> list[DetectionFrame]:
    """Rebuild tracker input; boxes are ego-frame, so an ego pose is required per line."""
    frames = []
    for i, rec in enumerate(records, start=1):
        if rec.ego_pose is None:
            raise FormatError("detection frame lacks ego_pose", path, i)
        dets = []
        for o in rec.objects:
            if o.appearance is None or o.box2d is None:
                raise FormatError("detections need box2d and appearance", path, i)
            dets.append(Detection(o.box2d, o.box3d, o.category, o.confidence, o.appearance, o.gt_id))
        frames.append(DetectionFrame(rec.frame_index, rec.timestamp, rec.ego_pose, dets))
    return frames


def ground_truth_frames(records: list[FrameRecord]) -> list[GroundTruthFrame]:
    frames = []
    for rec in records:
        objs = [GTObject(o.gt_id if o.gt_id is not None else -1, o.box3d,
                         o.velocity if o.velocity is not None else np.zeros(3),
                         o.attribute or 0, o.category) for o in rec.objects]
        frames.append(GroundTruthFrame(rec.frame_index, rec.timestamp, rec.ego_pose, objs))
    return frames


def track_records(step_results, det_frames) -> list[FrameRecord]:
    out = []
    for res, f in zip(step_results, det_frames):
        objs = [FrameObject(o.box, None, o.category, o.confidence, o.track_id, None,
                            None if o.velocity is None else np.asarray(o.velocity), o.attribute)
                for o in res.outputs]
        out.append(FrameRecord(f.frame_index, f.timestamp, objs, f.ego_pose, "tracks"))
    return out


# --- JSON documents ---------------------------------------------------------------------------

def dump_json(path: str | Path, doc: dict) -> None:
    doc = {"schema_version": SCHEMA_VERSION, **doc}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_json(path: str | Path, require_schema: bool = False) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise FormatError(f"cannot open: {e.strerror}", path) from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid JSON: {e.msg} (column {e.colno})", path, e.lineno) from None
    if not isinstance(doc, dict):
        raise FormatError("expected a JSON object", path, 1)
    if require_schema or "schema_version" in doc:
        check_schema(doc.get("schema_version"), path)
    doc.pop("schema_version", None)
    return doc


# --- checkpoints --------------------------------------------------------------------------------

def _jsonable_state(state):
    if isinstance(state, dict):
        return {k: _jsonable_state(v) for k, v in state.items()}
    if isinstance(state, (np.integer,)):
        return int(state)
    return state


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Header JSON (names, shapes, NetConfig, counters, PRNG state) then f64 little-endian arrays."""
    arrays: list[tuple[str, np.ndarray]] = [(f"param/{k}", v) for k, v in sorted(ckpt.params.items())]
    opt_meta = None
    if ckpt.optimizer is not None:
        opt_meta = {"t": int(ckpt.optimizer["t"])}
        for slot in ("m", "v"):
            arrays += [(f"{slot}/{k}", v) for k, v in sorted(ckpt.optimizer[slot].items())]
    header = {
        "schema_version": SCHEMA_VERSION,
        "net_config": ckpt.net_config.to_dict(),
        "step": int(ckpt.step), "epoch": int(ckpt.epoch),
        "rng_state": _jsonable_state(ckpt.rng_state),
        "optimizer": opt_meta,
        "train_config": ckpt.train_config,
        "metadata": ckpt.metadata,
        "tensors": [{"name": n, "shape": list(np.shape(a))} for n, a in arrays],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot open: {e.strerror}", path) from None
    if raw[:8] != CHECKPOINT_MAGIC or len(raw) < 16:
        raise FormatError("not a checkpoint file", path)
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("corrupt checkpoint header", path) from None
    check_schema(header.get("schema_version"), path)
    off = 16 + hlen
    tensors: dict[str, np.ndarray] = {}
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = off + 8 * count
        if end > len(raw):
            raise FormatError(f"truncated payload at tensor {t['name']}", path)
        tensors[t["name"]] = np.frombuffer(raw[off:end], dtype="<f8").astype(np.float64).reshape(shape)
        off = end
    if off != len(raw):
        raise FormatError("trailing bytes after checkpoint payload", path)
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    opt = None
    if header.get("optimizer") is not None:
        opt = {"t": header["optimizer"]["t"],
               "m": {k[2:]: v for k, v in tensors.items() if k.startswith("m/")},
               "v": {k[2:]: v for k, v in tensors.items() if k.startswith("v/")}}
    return Checkpoint(NetConfig.from_dict(header["net_config"]), params, header["step"], header["epoch"],
                      header.get("rng_state"), opt, header.get("train_config"), header.get("metadata") or {})


def scenario_config_from(doc: dict) -> ScenarioConfig:
    return ScenarioConfig.from_dict(doc)
