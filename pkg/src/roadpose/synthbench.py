"""Synthetic road scenes with ground truth, and the ATE benchmark over them.

Roads are height fields in the first camera's frame (Y down): flat at the
camera height near the ego vehicle, and optionally pitched along Z, banked
along X or made of several pitched pieces further away. Vehicles are parked
with their wheels on the road; the two previous camera poses trail the
first one along -Z.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidSpec, RoadposeError
from .geometry import CameraIntrinsics, PlanePatch, Rotation, frame_on_plane
from .multiview import CameraRig, CorrespondenceSet
from .pipeline import Detection, FrameInput, PipelineConfig, ate, build_problem, localize_frame
from .shape_model import LAMBDA_BOUND, ShapePrior, VehicleState, instantiate, synthetic_prior

log = logging.getLogger(__name__)

PROFILES = ("flat", "pitched", "banked", "piecewise")
MAX_SLOPE_DEG = 25.0
BUCKETS = (("Overall", None, None), ("<=15m", None, 15.0), ("<=30m", None, 30.0), (">30m", 30.0, None))
REPORT_FORMAT = "roadpose-bench"
REPORT_VERSION = 1
DEFAULT_INTR = CameraIntrinsics(700.0, 700.0, 640.0, 360.0)
IMAGE_SIZE = (1280, 720)


@dataclass(frozen=True)
class RoadProfile:
    kind: str = "flat"
    angle: float = 0.0  # degrees; uphill / rising to the right when positive
    hinge: float = 6.0  # metres: start of the pitched (z) or banked (x) region
    pieces: tuple = ()  # piecewise: ((z_start, angle_deg), ...) increasing z_start

    def __post_init__(self):
        if self.kind not in PROFILES:
            raise InvalidSpec(f"unknown road profile {self.kind!r}")
        angles = [self.angle] + [a for _, a in self.pieces]
        if any(abs(a) > MAX_SLOPE_DEG for a in angles):
            raise InvalidSpec(f"road slopes are limited to {MAX_SLOPE_DEG} deg")
        if self.kind == "piecewise":
            z = [p[0] for p in self.pieces]
            if not z or any(b <= a for a, b in zip(z, z[1:])):
                raise InvalidSpec("piecewise profile needs pieces with increasing z_start")
        object.__setattr__(self, "pieces", tuple((float(a), float(b)) for a, b in self.pieces))

    @property
    def label(self):
        if self.kind == "flat":
            return "flat"
        if self.kind == "piecewise":
            return "piecewise(" + ",".join(f"{a:g}@{z:g}" for z, a in self.pieces) + ")"
        return f"{self.kind}({self.angle:g})"

    def _segments(self):
        """Pitch segments ``(z0, tan)`` along z, for pitched and piecewise roads."""
        if self.kind == "pitched":
            return [(self.hinge, np.tan(np.radians(self.angle)))]
        if self.kind == "piecewise":
            return [(z, np.tan(np.radians(a))) for z, a in self.pieces]
        return []

    def height(self, x, z, H):
        """Road Y (down) at ground position ``(x, z)``."""
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        y = np.full(np.broadcast(x, z).shape, float(H))
        if self.kind == "banked":
            y = y - np.tan(np.radians(self.angle)) * np.maximum(x - self.hinge, 0.0)
        segs = self._segments()
        for i, (z0, g) in enumerate(segs):
            z1 = segs[i + 1][0] if i + 1 < len(segs) else np.inf
            y = y - g * (np.clip(z, z0, z1) - z0)
        return y

    def plane_at(self, x, z, H):
        """Road plane (normal up) of the piece containing ``(x, z)``."""
        gx, gz = 0.0, 0.0
        if self.kind == "banked" and x > self.hinge:
            gx = np.tan(np.radians(self.angle))
        for z0, g in self._segments():
            if z > z0:
                gz = g
        # Y = Y0 - gx x - gz z locally, i.e. (gx, 1, gz) . X = const
        n = -np.array([gx, 1.0, gz])
        n /= np.linalg.norm(n)
        p = np.array([x, float(self.height(x, z, H)), z])
        return PlanePatch(n, float(n @ p))


@dataclass(frozen=True)
class VehicleSpec:
    depth: float = 20.0  # ground-truth t.z, metres
    lateral: float = 0.0  # x of the wheel-centre centroid
    yaw: float = 0.0  # degrees about the road normal
    shape: tuple = ()  # ground-truth coefficients, zero-padded to B


@dataclass(frozen=True)
class NoiseSpec:
    keypoint_sigma: float = 0.0
    keypoint_dropout: float = 0.0
    keypoint_outliers: float = 0.0  # fraction of visible keypoints replaced uniformly in the bbox
    corr_sigma: float = 0.0
    corr_outliers: float = 0.0


@dataclass(frozen=True)
class SceneSpec:
    profile: RoadProfile = field(default_factory=RoadProfile)
    vehicles: tuple = (VehicleSpec(),)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    camera_height: float = 1.65
    trajectory: tuple = (1.0, 2.0)  # metres behind the first camera, frames f2 and f3
    seed: int = 0
    scene_id: str = "scene"

    def __post_init__(self):
        if not self.vehicles:
            raise InvalidSpec("a scene needs at least one vehicle")
        if any(not v.depth > 0 for v in self.vehicles):
            raise InvalidSpec("vehicle depths must be positive")
        if not self.camera_height > 0:
            raise InvalidSpec("camera height must be positive")
        n = self.noise
        if min(n.keypoint_sigma, n.corr_sigma) < 0 or not all(
                0 <= r < 1 for r in (n.keypoint_dropout, n.keypoint_outliers, n.corr_outliers)):
            raise InvalidSpec("noise levels must be non-negative and rates in [0, 1)")
        object.__setattr__(self, "vehicles", tuple(self.vehicles))


@dataclass
class GroundTruth:
    states: dict  # id -> VehicleState (plane at wheel-centre level)
    planes: dict  # id -> road-surface PlanePatch under the vehicle
    camera_poses: dict  # frame -> (Rotation, t), X_f = R X_1 + t
    road_points: np.ndarray
    match_points: dict = field(default_factory=dict)  # (fa, fb) -> first-camera 3D point of each match
    match_outliers: dict = field(default_factory=dict)  # (fa, fb) -> indices of corrupted matches

    def translations(self):
        return {k: s.translation for k, s in self.states.items()}


@dataclass
class GeneratedScene:
    spec: SceneSpec
    frame: FrameInput
    truth: GroundTruth


# --- generation --------------------------------------------------------------

def _keypoint_normals(canonical):
    """Outward normals of the bounding ellipsoid at each canonical keypoint."""
    c = 0.5 * (canonical.max(axis=0) + canonical.min(axis=0))
    half = 0.5 * (canonical.max(axis=0) - canonical.min(axis=0))
    g = (canonical - c) / (half * half)
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def visible_keypoints(prior: ShapePrior, state: VehicleState):
    """Back-face test: keypoints whose outward normal faces the camera."""
    s = prior.canonical(state.shape)
    X = instantiate(prior, state)
    nrm = state.rotation.apply(_keypoint_normals(s))
    return np.einsum("ij,ij->i", nrm, -X) > 0


def place_vehicle(prior: ShapePrior, profile: RoadProfile, v: VehicleSpec, H):
    lam = np.zeros(prior.B)
    lam[:len(v.shape)] = np.asarray(v.shape, dtype=float)[:prior.B]
    if np.any(np.abs(lam) > LAMBDA_BOUND):
        raise InvalidSpec("vehicle shape coefficients exceed the prior bound")
    wbar = prior.canonical(lam)[list(prior.wheel_indices)].mean(axis=0)
    # the piece is picked at the nominal position, then the depth fixed
    z = v.depth
    for _ in range(3):
        road = profile.plane_at(v.lateral, z, H)
        R = frame_on_plane(road.normal) @ Rotation.from_rotvec([0.0, np.radians(v.yaw), 0.0])
        base = road.lifted(prior.base_height)
        off = R.apply(wbar)
        zc = v.depth + off[2]
        n = base.normal
        yc = (base.offset - n[0] * v.lateral - n[2] * zc) / n[1]
        t = np.array([v.lateral, yc, zc]) - off
        road2 = profile.plane_at(v.lateral, zc, H)
        if road2 == road:
            break
        z = zc
    state = VehicleState(R, t, lam, base)
    # every wheel must rest on the same planar piece
    X = instantiate(prior, state)
    bottoms = X[list(prior.wheel_indices)] + prior.base_height * -road.normal
    ys = profile.height(bottoms[:, 0], bottoms[:, 2], H)
    if np.max(np.abs(ys - bottoms[:, 1])) > 1e-9:
        raise InvalidSpec(f"vehicle at depth {v.depth} straddles a road kink")
    return state, road


def _project(P, intr):
    return np.column_stack([intr.fx * P[:, 0] / P[:, 2] + intr.cx, intr.fy * P[:, 1] / P[:, 2] + intr.cy])


def _in_image(px, margin=0.0):
    w, h = IMAGE_SIZE
    return (px[:, 0] >= -margin) & (px[:, 0] < w + margin) & (px[:, 1] >= -margin) & (px[:, 1] < h + margin)


def _road_samples(rng, spec, states):
    H = spec.camera_height
    prof = spec.profile
    near_x_hi = prof.hinge if prof.kind == "banked" else 3.0
    parts = [
        # ego band: flat, at camera height, where the scale is fixed
        np.column_stack([rng.uniform(-3.0, min(3.0, near_x_hi), 90), rng.uniform(3.5, 6.0, 90)]),
        np.column_stack([rng.uniform(-7.0, 9.0, 140), rng.uniform(6.0, 55.0, 140)]),
    ]
    for st in states:
        x, _, z = st.translation
        parts.append(np.column_stack([x + rng.uniform(-4.0, 4.0, 70), z + rng.uniform(-7.0, 7.0, 70)]))
    xz = np.vstack(parts)
    xz = xz[xz[:, 1] > 3.2]
    y = prof.height(xz[:, 0], xz[:, 1], H)
    P = np.column_stack([xz[:, 0], y, xz[:, 1]])
    # drop road points hidden under a vehicle body
    keep = np.ones(len(P), dtype=bool)
    for st in states:
        local = st.rotation.inverse().apply(P - st.translation)
        keep &= ~((np.abs(local[:, 0]) < 1.1) & (np.abs(local[:, 2]) < 2.3))
    return P[keep]


def _structure_samples(rng, H):
    n = 90
    side = np.where(rng.random(n) < 0.5, -10.0, 12.0)
    facades = np.column_stack([side, rng.uniform(-4.0, H - 0.2, n), rng.uniform(6.0, 60.0, n)])
    m = 40
    poles = np.column_stack([rng.uniform(-9.0, 11.0, m), rng.uniform(-3.0, H - 0.5, m), rng.uniform(8.0, 45.0, m)])
    return np.vstack([facades, poles])


def generate(spec: SceneSpec, prior: ShapePrior | None = None) -> GeneratedScene:
    prior = prior or synthetic_prior()
    rng = np.random.default_rng(spec.seed)
    intr = DEFAULT_INTR
    H = spec.camera_height
    rig = CameraRig(intr, H)
    noise = spec.noise

    states, planes, dets = {}, {}, []
    for j, v in enumerate(spec.vehicles):
        st, road = place_vehicle(prior, spec.profile, v, H)
        vid = f"v{j}"
        states[vid], planes[vid] = st, road
        X = instantiate(prior, st)
        px = _project(X, intr)
        bottoms = X[list(prior.wheel_indices)] - prior.base_height * road.normal
        allpx = np.vstack([px, _project(bottoms, intr)])
        bbox = (float(allpx[:, 0].min()), float(allpx[:, 1].min()), float(allpx[:, 0].max()), float(allpx[:, 1].max()))
        vis = visible_keypoints(prior, st)
        conf = vis.astype(float)
        if noise.keypoint_dropout > 0:
            conf[rng.random(prior.K) < noise.keypoint_dropout] = 0.0
        kp = px.copy()
        if noise.keypoint_sigma > 0:
            kp = kp + rng.normal(0.0, noise.keypoint_sigma, kp.shape)
        if noise.keypoint_outliers > 0:
            shown = np.flatnonzero(conf > 0)
            k = int(round(noise.keypoint_outliers * len(shown)))
            bad = rng.choice(shown, k, replace=False) if k else np.zeros(0, dtype=int)
            kp[bad] = rng.uniform(bbox[:2], bbox[2:], (len(bad), 2))
        kp[conf == 0] = 0.0
        dets.append(Detection(bbox, kp, conf, id=vid))

    road = _road_samples(rng, spec, list(states.values()))
    other = _structure_samples(rng, H)
    # points only the two previous cameras see: just in front of the first camera
    behind = np.column_stack([rng.uniform(-3, 3, 30), np.full(30, H), rng.uniform(0.8, 3.0, 30)])
    behind[:, 1] = spec.profile.height(behind[:, 0], behind[:, 2], H)
    offs = [np.array([0.0, 0.0, d]) for d in spec.trajectory]
    P = np.vstack([road, other, behind])
    labels = ["road"] * len(road) + ["non-road"] * len(other) + ["road"] * len(behind)
    views = [P] + [P + o for o in offs]
    pix = [None] * len(views)
    ok = np.ones(len(P), dtype=bool)
    for i, V in enumerate(views):
        with np.errstate(divide="ignore", invalid="ignore"):
            px = _project(V, intr)
        vis = (V[:, 2] > 0.5) & _in_image(px)
        if i == 0:
            vis[len(road) + len(other):] = True  # tracked in f2/f3 only
        ok &= vis
        pix[i] = px
    P = P[ok]
    labels = [lab for lab, k in zip(labels, ok) if k]
    only23 = np.zeros(len(ok), dtype=bool)
    only23[len(road) + len(other):] = True
    only23 = only23[ok]
    pix = [p[ok] for p in pix]

    def noisy(px):
        if noise.corr_sigma > 0:
            return px + rng.normal(0.0, noise.corr_sigma, px.shape)
        return px.copy()

    p1, p2, p3 = (noisy(p) for p in pix)

    def outliers(px, key):
        k = int(round(noise.corr_outliers * len(px)))
        idx = rng.choice(len(px), k, replace=False) if k else np.zeros(0, dtype=int)
        px[idx] = rng.uniform((0, 0), IMAGE_SIZE, (k, 2))
        bad[key] = np.sort(idx)
        return px

    bad = {}

    m12 = ~only23
    lab12 = tuple(lab for lab, k in zip(labels, m12) if k)
    corr12 = CorrespondenceSet(p1[m12], outliers(p2[m12].copy(), ("f1", "f2")), lab12, ("f1", "f2"))
    corr23 = CorrespondenceSet(p2, outliers(p3.copy(), ("f2", "f3")), tuple(labels), ("f2", "f3"))
    frame = FrameInput(spec.scene_id, tuple(dets), rig, (corr12, corr23))
    poses = {"f1": (Rotation.identity(), np.zeros(3))}
    for name, o in zip(("f2", "f3"), offs):
        poses[name] = (Rotation.identity(), o)
    truth = GroundTruth(states, planes, poses, road[ok[:len(road)]],
                        {("f1", "f2"): P[m12], ("f2", "f3"): P}, bad)
    return GeneratedScene(spec, frame, truth)


def truth_residuals(scene: GeneratedScene, prior: ShapePrior | None = None, config: PipelineConfig | None = None):
    """Largest |residual| of every energy term at the ground-truth states.

    The measured plane of each vehicle is its true plane, vehicles are paired
    as the pipeline would pair them.
    """
    prior = prior or synthetic_prior()
    cfg = config or PipelineConfig()
    intr = scene.frame.rig.intr
    states = [scene.truth.states[d.id] for d in scene.frame.detections]
    obs = [d.observation(intr) for d in scene.frame.detections]
    problem, _ = build_problem(states, obs, prior, cfg)
    out = {}
    for blk in problem.evaluate():
        if blk.residual.size:
            out[blk.term] = max(out.get(blk.term, 0.0), float(np.max(np.abs(blk.residual))))
    return out


# --- suites ------------------------------------------------------------------

DEFAULT_DEPTHS = (12.0, 15.0, 22.0, 30.0, 40.0)


def _vehicle(rng, depth, lateral=0.0, shape_sigma=0.0):
    shape = tuple(np.clip(rng.normal(0.0, 1.0, 5) * shape_sigma, -LAMBDA_BOUND, LAMBDA_BOUND).round(6))
    return VehicleSpec(depth, float(lateral + rng.uniform(-1.0, 1.0)), float(rng.uniform(-20.0, 20.0)), shape)


def _profile_for(kind, angle, depth):
    hinge = max(6.0, depth - 6.0)
    if kind == "pitched":
        return RoadProfile("pitched", angle, hinge)
    if kind == "banked":
        return RoadProfile("banked", angle, 2.5)
    if kind == "piecewise":
        second = max(depth - 6.0, 8.5)
        return RoadProfile("piecewise", pieces=((max(6.0, second - 8.0), angle / 2), (second, angle)))
    return RoadProfile()


def make_suite(profiles, depths=DEFAULT_DEPTHS, seeds=4, noise=NoiseSpec(), base_seed=0, shape_sigma=0.0):
    """Cartesian suite over ``(kind, angle)`` profiles, depths and seeds."""
    suite = []
    for kind, angle in profiles:
        for depth in depths:
            for s in range(seeds):
                seed = base_seed + s
                rng = np.random.default_rng([seed, int(depth * 10), int(round(angle * 10)), PROFILES.index(kind)])
                lateral = 5.5 if kind == "banked" else 0.0
                prof = _profile_for(kind, angle, depth)
                sid = f"{prof.label}-d{depth:g}-s{seed}"
                suite.append(SceneSpec(prof, (_vehicle(rng, depth, lateral, shape_sigma),), noise, seed=seed, scene_id=sid))
    return suite


def default_suite(seeds=4, noise=NoiseSpec()):
    """5 profiles x 5 depths x ``seeds`` scenes."""
    profiles = [("flat", 0.0), ("pitched", 10.0), ("pitched", 20.0), ("banked", 15.0), ("piecewise", 20.0)]
    return make_suite(profiles, seeds=seeds, noise=noise)


def sloped_suite(seeds=20, angles=(10.0, 15.0, 20.0, 25.0), keypoint_sigma=2.0, depths=DEFAULT_DEPTHS,
                 shape_sigma=0.1):
    return make_suite([("pitched", a) for a in angles], depths, seeds, NoiseSpec(keypoint_sigma=keypoint_sigma),
                      shape_sigma=shape_sigma)


def flat_suite(seeds=4, noise=NoiseSpec(), depths=DEFAULT_DEPTHS):
    return make_suite([("flat", 0.0)], depths, seeds, noise)


# --- benchmark ---------------------------------------------------------------

VARIANTS = {"coplanar": True, "joint": False}


@dataclass
class SceneRow:
    scene_id: str
    variant: str
    depth: float
    error: float | None  # ATE of the single-vehicle average; None when it failed
    status: str = "ok"


def _run_one(args):
    spec, variant, config, prior = args
    scene = generate(spec, prior)
    cfg = config.replace(coplanar_baseline=VARIANTS[variant])
    depth = float(np.mean([s.translation[2] for s in scene.truth.states.values()]))
    try:
        res = localize_frame(scene.frame, prior, cfg)
        if res.unlocalized:
            return SceneRow(spec.scene_id, variant, depth, None, "unlocalized: " + res.unlocalized[0][1])
        err = ate(res, scene.truth.translations()).mean
    except RoadposeError as e:
        return SceneRow(spec.scene_id, variant, depth, None, f"{type(e).__name__}: {e}")
    return SceneRow(spec.scene_id, variant, depth, err)


def run_benchmark(suite, config: PipelineConfig | None = None, variants=("coplanar", "joint"), jobs=1, prior=None):
    """Localize every scene with every variant; rows ordered by (scene, variant)."""
    if not suite:
        raise ValueError("benchmark suite is empty")
    cfg = config or PipelineConfig()
    prior = prior or synthetic_prior()
    tasks = [(spec, v, cfg, prior) for spec in suite for v in variants]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(_run_one, tasks, chunksize=4))
    else:
        rows = [_run_one(t) for t in tasks]
    return rows


def in_bucket(depth, lo, hi):
    """Bucket membership: ``lo < depth <= hi`` with open ends as None."""
    return (lo is None or depth > lo) and (hi is None or depth <= hi)


def summarize(rows, variants=None):
    """Mean / std / count of the error per variant and depth bucket."""
    variants = variants or list(dict.fromkeys(r.variant for r in rows))
    table = {}
    for v in variants:
        table[v] = {}
        for name, lo, hi in BUCKETS:
            e = np.array([r.error for r in rows if r.variant == v and r.error is not None and in_bucket(r.depth, lo, hi)])
            failed = sum(1 for r in rows if r.variant == v and r.error is None and in_bucket(r.depth, lo, hi))
            table[v][name] = {
                "mean": float(e.mean()) if e.size else None,
                "std": float(e.std()) if e.size else None,
                "n": int(e.size),
                "failed": failed,
            }
    return table


def report_dict(rows, table, meta=None):
    return {
        "format": REPORT_FORMAT,
        "version": REPORT_VERSION,
        "meta": meta or {},
        "buckets": [b[0] for b in BUCKETS],
        "summary": table,
        "rows": [asdict(r) for r in rows],
    }


def dumps_report(report) -> str:
    return json.dumps(report, indent=1, sort_keys=True) + "\n"


def format_table(table) -> str:
    """Aligned text table: one row per variant, 'mean (std)' per bucket."""
    heads = ["variant"] + [b[0] for b in BUCKETS]

    def cell(c):
        if c["mean"] is None:
            return "-"
        s = f"{c['mean']:.3f} ({c['std']:.3f})"
        return s + (f" [{c['failed']} failed]" if c["failed"] else "")

    body = [[v] + [cell(table[v][b[0]]) for b in BUCKETS] for v in table]
    widths = [max(len(r[i]) for r in [heads] + body) for i in range(len(heads))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(heads, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in body]
    return "\n".join(lines) + "\n"
