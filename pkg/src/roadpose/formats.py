"""On-disk formats of the command-line tool.

Every file carries a format name and an integer version: JSON files in
top-level ``format`` / ``version`` keys, the OBJ wireframe in its first
comment line. Writers are deterministic (sorted keys, ``repr`` floats).
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import multiview as mv
from .errors import FormatError
from .geometry import CameraIntrinsics, PlanePatch
from .pipeline import Detection, FrameInput, LocalizationResult
from .synthbench import NoiseSpec, make_suite

FRAME_FORMAT = "roadpose-frame"
RESULT_FORMAT = "roadpose-result"
SUITE_FORMAT = "roadpose-suite"
CONFIG_FORMAT = "roadpose-config"
WIREFRAME_FORMAT = "roadpose-wireframe"
VERSION = 1


def _dumps(d):
    return json.dumps(d, indent=1, sort_keys=True) + "\n"


def _read_json(path, fmt, what):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read {what}: {exc.strerror}", path) from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", path, exc.lineno) from exc
    if not isinstance(d, dict):
        raise FormatError(f"{what} must be a JSON object", path, 1)
    if fmt is not None:
        if d.get("format") != fmt:
            raise FormatError(f"not a {what} file (format={d.get('format')!r})", path)
        if d.get("version") != VERSION:
            raise FormatError(f"unsupported {what} version {d.get('version')!r}", path)
    return d


def _floats(x, shape, what, path):
    try:
        a = np.array(x, dtype=float)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{what}: {exc}", path) from exc
    if a.shape != shape:
        raise FormatError(f"{what} must have shape {shape}, got {a.shape}", path)
    return a


def _plane_dict(p: PlanePatch):
    return {"normal": [float(v) for v in p.normal], "offset": float(p.offset)}


def _plane_from(d, what, path):
    try:
        return PlanePatch(_floats(d["normal"], (3,), what + ".normal", path), float(d["offset"]))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{what} needs 'normal' and 'offset'", path) from exc


# --- frames ------------------------------------------------------------------

def frame_to_dict(frame: FrameInput, corr_files=()):
    intr = frame.rig.intr
    dets = []
    for det in frame.detections:
        kp = [None if c == 0 else [float(u), float(v)] for (u, v), c in zip(det.keypoints2d, det.confidences)]
        d = {"id": det.id, "bbox": [float(b) for b in det.bbox], "keypoints": kp,
             "confidences": [float(c) for c in det.confidences]}
        if det.plane_prior is not None:
            d["plane"] = _plane_dict(det.plane_prior)
        dets.append(d)
    return {
        "format": FRAME_FORMAT, "version": VERSION, "frame_id": frame.frame_id,
        "camera": {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy, "height": frame.rig.height},
        "correspondences": [str(c) for c in corr_files],
        "detections": dets,
    }


def save_frame(frame: FrameInput, path, corr_names=None):
    """Write the frame and its correspondence files next to it."""
    path = Path(path)
    names = corr_names or [f"{frame.frame_id}_{c.frames[0]}{c.frames[1]}.corr" for c in frame.correspondences]
    for c, name in zip(frame.correspondences, names):
        mv.save_correspondences(c, path.parent / name)
    path.write_text(_dumps(frame_to_dict(frame, names)))


def load_frame(path, extra_corr=()) -> FrameInput:
    """Parse a frame file; correspondence paths are relative to it.

    ``extra_corr`` are already-parsed sets offered by the caller; those whose
    first frame label continues the frame's chain are appended.
    """
    path = Path(path)
    d = _read_json(path, FRAME_FORMAT, "frame")
    try:
        cam = d["camera"]
        intr = CameraIntrinsics(float(cam["fx"]), float(cam["fy"]), float(cam["cx"]), float(cam["cy"]))
        rig = mv.CameraRig(intr, float(cam.get("height", 1.65)))
        raw = d["detections"]
        frame_id = str(d["frame_id"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"frame header incomplete or invalid: {exc}", path) from exc
    dets = []
    for i, r in enumerate(raw):
        what = f"detections[{i}]"
        try:
            kp_raw = r["keypoints"]
            conf = _floats(r["confidences"], (len(kp_raw),), what + ".confidences", path)
            kp = np.zeros((len(kp_raw), 2))
            for k, p in enumerate(kp_raw):
                if p is None:
                    conf[k] = 0.0
                else:
                    kp[k] = _floats(p, (2,), f"{what}.keypoints[{k}]", path)
            bbox = tuple(_floats(r["bbox"], (4,), what + ".bbox", path))
            plane = _plane_from(r["plane"], what + ".plane", path) if r.get("plane") is not None else None
            dets.append(Detection(bbox, kp, conf, id=str(r.get("id", f"det{i}")), plane_prior=plane))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{what} is missing {exc}", path) from exc
    corr = [mv.load_correspondences(path.parent / c) for c in d.get("correspondences", [])]
    corr = _chain(frame_id, corr + list(extra_corr), path)
    try:
        return FrameInput(frame_id, tuple(dets), rig, tuple(corr))
    except ValueError as exc:
        raise FormatError(str(exc), path) from exc


def _chain(frame_id, sets, path):
    """Order correspondence sets as (current-previous, previous-older)."""
    if not sets:
        return []
    first = [c for c in sets if c.frames[0] in (frame_id, "f1")]
    if not first:
        raise FormatError(f"no correspondence set starts at frame {frame_id!r}", path)
    chain = [first[0]]
    nxt = [c for c in sets if c is not first[0] and c.frames[0] == chain[0].frames[1]]
    if nxt:
        chain.append(nxt[0])
    return chain


# --- results -----------------------------------------------------------------

def result_to_dict(result: LocalizationResult, wireframe_file=None):
    vehicles = []
    for v in result.vehicles:
        st = v.state
        vehicles.append({
            "id": v.id,
            "translation": [float(x) for x in st.translation],
            "rotation_quaternion_wxyz": [float(x) for x in st.rotation.quaternion],
            "rotation_matrix": [[float(x) for x in row] for row in st.rotation.as_matrix()],
            "shape": [float(x) for x in st.shape],
            "plane": _plane_dict(v.plane),
            "plane_source": v.plane_source,
            "depth": v.depth,
            "costs": {k: float(c) for k, c in v.costs.items()},
        })
    phases = []
    if result.report is not None:
        phases = [{"name": p.name, "initial_cost": float(p.initial_cost), "final_cost": float(p.final_cost),
                   "iterations": int(p.iterations), "reason": p.reason} for p in result.report.phases]
    return {
        "format": RESULT_FORMAT, "version": VERSION, "frame_id": result.frame_id,
        "vehicles": vehicles,
        "unlocalized": [{"id": i, "reason": r} for i, r in result.unlocalized],
        "phases": phases,
        "wireframe_file": wireframe_file,
    }


def dumps_result(result, wireframe_file=None):
    return _dumps(result_to_dict(result, wireframe_file))


def load_result(path):
    """Parsed result file: the JSON dict with ``translation`` arrays as numpy."""
    d = _read_json(path, RESULT_FORMAT, "result")
    for v in d.get("vehicles", []):
        v["translation"] = _floats(v["translation"], (3,), "translation", path)
    return d


def translations(result_dict):
    return {v["id"]: v["translation"] for v in result_dict["vehicles"]}


def dumps_wireframe(result: LocalizationResult, edges):
    """OBJ text: one object per vehicle, keypoints as vertices, wireframe edges as lines."""
    lines = [f"# {WIREFRAME_FORMAT} {VERSION}", f"# frame {result.frame_id}"]
    base = 1
    for v in result.vehicles:
        lines.append(f"o {v.id}")
        lines += [f"v {x!r} {y!r} {z!r}" for x, y, z in (map(float, p) for p in v.wireframe)]
        lines += [f"l {a + base} {b + base}" for a, b in edges]
        base += len(v.wireframe)
    return "\n".join(lines) + "\n"


def loads_wireframe(text, path=None):
    """Inverse of ``dumps_wireframe``: {object: (vertices (N, 3), edges 0-based local)}."""
    rows = text.splitlines()
    if not rows or rows[0].split()[1:] != [WIREFRAME_FORMAT, str(VERSION)]:
        raise FormatError(f"missing '# {WIREFRAME_FORMAT} {VERSION}' header", path, 1)
    objs, verts, order = {}, [], []
    cur = None
    for ln, row in enumerate(rows, start=1):
        parts = row.split()
        if not parts or parts[0] == "#":
            continue
        try:
            if parts[0] == "o":
                cur = parts[1]
                objs[cur] = ([], [])
                order.append(cur)
            elif parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
                objs[cur][0].append(len(verts) - 1)
            elif parts[0] == "l":
                objs[cur][1].append((int(parts[1]) - 1, int(parts[2]) - 1))
            else:
                raise FormatError(f"unexpected record {parts[0]!r}", path, ln)
        except (IndexError, ValueError, KeyError) as exc:
            raise FormatError(f"malformed record: {row!r}", path, ln) from exc
    V = np.array(verts).reshape(-1, 3)
    out = {}
    for name in order:
        idx, edges = objs[name]
        lo = idx[0] if idx else 0
        out[name] = (V[idx], [(a - lo, b - lo) for a, b in edges])
    return out


# --- suites and config -------------------------------------------------------

def load_suite(path, seeds=None, base_seed=None):
    """Suite file -> list of SceneSpec.

    Keys: ``profiles`` ([kind, angle] pairs), ``depths``, ``seeds``,
    ``noise`` (NoiseSpec fields), ``shape_sigma``, ``base_seed``.
    """
    d = _read_json(path, SUITE_FORMAT, "suite")
    try:
        profiles = [(str(k), float(a)) for k, a in d["profiles"]]
        noise = NoiseSpec(**d.get("noise", {}))
        kw = dict(depths=tuple(float(x) for x in d.get("depths", (12, 15, 22, 30, 40))),
                  seeds=int(seeds if seeds is not None else d.get("seeds", 4)),
                  noise=noise, shape_sigma=float(d.get("shape_sigma", 0.0)),
                  base_seed=int(base_seed if base_seed is not None else d.get("base_seed", 0)))
        return make_suite(profiles, **kw)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"invalid suite: {exc}", path) from exc


def load_config(path):
    """Config file: optional sections ``weights``, ``solver``, ``pipeline`` (plain key/values)."""
    d = _read_json(path, None, "config")
    if "format" in d and d["format"] != CONFIG_FORMAT:
        raise FormatError(f"not a config file (format={d['format']!r})", path)
    unknown = set(d) - {"format", "version", "weights", "solver", "pipeline"}
    if unknown:
        raise FormatError(f"unknown config sections {sorted(unknown)}", path)
    return d
