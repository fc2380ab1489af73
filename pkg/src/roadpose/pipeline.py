"""Per-frame vehicle localization on locally estimated road planes.

Planes handed around here are road-surface planes (tyre contact). The
vehicle state carries the parallel plane through the wheel centres, lifted
by ``prior.base_height``, because that is what the ground term constrains.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import multiview as mv
from .errors import (DegenerateConfiguration, IdMismatch, PlaneUnavailable, RayParallelToPlane,
                     RoadposeError)
from .geometry import CameraIntrinsics, PlanePatch, Rotation, frame_on_plane
from .residuals import (EnergyWeights, Observation, consistency_pair_residual, cost_by_term,
                        neighbor_pairs, plane_prior_residual, reprojection_residual,
                        shape_coefficient_residual, total_cost, vehicle_blocks)
from .shape_model import LAMBDA_BOUND, ShapePrior, VehicleState, dimensions, instantiate
from .solver import Phase, Problem, SolverConfig, default_schedule, solve

log = logging.getLogger(__name__)

FALLBACK_MODES = ("coplanar", "require_multiview")


@dataclass(frozen=True, eq=False)
class Detection:
    bbox: tuple
    keypoints2d: np.ndarray
    confidences: np.ndarray
    id: str = ""
    plane_prior: PlanePatch | None = None  # metric road plane from another source

    def observation(self, intr):
        return Observation(self.keypoints2d, self.confidences, self.bbox, intr)


@dataclass(frozen=True, eq=False)
class FrameInput:
    frame_id: str
    detections: tuple
    rig: mv.CameraRig
    correspondences: tuple = ()  # (f1-f2,) or (f1-f2, f2-f3)

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))
        object.__setattr__(self, "correspondences", tuple(self.correspondences))
        ids = [d.id for d in self.detections]
        if len(set(ids)) != len(ids):
            raise ValueError("detection ids must be unique within a frame")


@dataclass(frozen=True)
class PipelineConfig:
    neighbor_radius: float = 6.0
    bbox_expansion: float = 2.0
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    solver: SolverConfig = field(default_factory=SolverConfig)
    fallback_plane_mode: str = "coplanar"
    coplanar_baseline: bool = False
    sigma_dims: tuple = (0.1, 0.05, 0.05)  # length, width, height, metres
    sigma_shape: float = 0.5  # deformation coefficients, units of the basis
    sigma_plane_normal: float = 0.02  # measured-plane uncertainty, unit-normal components
    sigma_plane_offset: float = 0.05  # metres
    flip_test: bool = True
    plane_threshold: float = 0.02
    plane_iterations: int = 500
    ego_quantile: float = 0.3  # closest fraction of road points used to fix the scale
    seed: int = 0

    def __post_init__(self):
        if not self.neighbor_radius > 0:
            raise ValueError("neighbor_radius must be positive")
        if self.bbox_expansion < 1:
            raise ValueError("bbox_expansion must be >= 1")
        if self.fallback_plane_mode not in FALLBACK_MODES:
            raise ValueError(f"fallback_plane_mode must be one of {FALLBACK_MODES}")
        if any(s <= 0 for s in self.sigma_dims):
            raise ValueError("sigma_dims must be positive")

    def replace(self, **kw):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(kw)
        return PipelineConfig(**d)


@dataclass
class VehicleResult:
    id: str
    state: VehicleState
    wireframe: np.ndarray
    plane: PlanePatch  # road-surface plane under the vehicle
    plane_source: str
    costs: dict

    @property
    def depth(self):
        return float(np.linalg.norm(self.state.translation))

    @property
    def depth_z(self):
        return float(self.state.translation[2])


@dataclass
class LocalizationResult:
    frame_id: str
    vehicles: list
    unlocalized: list  # (id, reason)
    report: object = None  # SolveReport, None when nothing was solved

    def by_id(self):
        return {v.id: v for v in self.vehicles}


# --- planes ------------------------------------------------------------------

def coplanar_plane(rig: mv.CameraRig):
    return PlanePatch(np.array([0.0, -1.0, 0.0]), -rig.height)


class GroundModel:
    """Metric multiview reconstruction of one frame, shared by its detections."""

    def __init__(self, frame: FrameInput, config: PipelineConfig):
        self.error = None
        self.recon = None
        try:
            self.recon = self._build(frame, config)
        except RoadposeError as e:
            self.error = e
            log.debug("frame %s: multiview chain failed: %s", frame.frame_id, e)

    @staticmethod
    def _build(frame, cfg):
        if not frame.correspondences:
            raise PlaneUnavailable("no correspondences supplied")
        intr, rig = frame.rig.intr, frame.rig
        recon = mv.reconstruct_two_view(frame.correspondences[0], intr, seed=cfg.seed)
        if len(frame.correspondences) > 1:
            recon = mv.add_third_view(frame.correspondences[1], recon, intr, seed=cfg.seed)
        road = np.flatnonzero(recon.road_mask)
        if len(road) < 3:
            raise PlaneUnavailable("too few triangulated road points to fix the scale")
        s, _, _ = mv.metric_road_scale(recon.points[road], rig, cfg.plane_threshold, cfg.plane_iterations,
                                       cfg.seed, cfg.ego_quantile)
        return recon.scaled(s)

    def local_plane(self, bbox, cfg):
        if self.recon is None:
            raise PlaneUnavailable(f"multiview chain failed: {self.error}")
        r = self.recon
        idx = mv.select_road_points_near(r.pixels_a, r.labels, bbox, cfg.bbox_expansion)
        if len(idx) < 3:
            raise PlaneUnavailable(f"only {len(idx)} road points near the detection")
        try:
            plane, _ = mv.ransac_dominant_plane(r.points[idx], cfg.plane_threshold, cfg.plane_iterations, cfg.seed)
        except RoadposeError as e:
            raise PlaneUnavailable(f"local plane fit failed: {e}") from e
        return plane


def estimate_local_plane(frame: FrameInput, index: int, config: PipelineConfig | None = None, ground=None):
    """Metric road plane under one detection and where it came from."""
    cfg = config or PipelineConfig()
    det = frame.detections[index]
    if cfg.coplanar_baseline:
        return coplanar_plane(frame.rig), "coplanar"
    if det.plane_prior is not None:
        return det.plane_prior.oriented(), "external"
    ground = ground or GroundModel(frame, cfg)
    try:
        return ground.local_plane(det.bbox, cfg), "multiview"
    except PlaneUnavailable:
        if cfg.fallback_plane_mode == "require_multiview":
            raise
    return coplanar_plane(frame.rig), "coplanar"


# --- initialization ----------------------------------------------------------

def _yaw_flip(R: Rotation):
    return Rotation.from_matrix(R.as_matrix() @ np.diag([-1.0, 1.0, -1.0]))


def initialize_vehicle(detection: Detection, plane: PlanePatch, prior: ShapePrior, intr: CameraIntrinsics,
                       flip_test=True):
    """Place the mean car on ``plane`` (road level) under the bbox bottom edge."""
    plane = plane.oriented()
    n, d = plane.normal, plane.offset
    u0, v0, u1, v1 = detection.bbox
    ray = intr.ray((0.5 * (u0 + u1), v1))
    ray = ray / np.linalg.norm(ray)
    den = float(n @ ray)
    if abs(den) < 1e-6:
        raise RayParallelToPlane("bbox bottom ray is parallel to the road plane")
    lam = d / den
    R = frame_on_plane(n)
    forward = R.as_matrix()[:, 2]
    base_plane = plane.lifted(prior.base_height)
    if lam > 0:
        contact = lam * ray
        # the bbox bottom is roughly the nearest wheel contact; the wheel-centre
        # centroid sits half a wheelbase further along and base_height above it
        t_c = contact + prior.half_wheelbase() * forward + prior.base_height * n
    else:
        # the ray never reaches this plane (a car above the plane's horizon):
        # take the depth from the apparent height of the mean car and drop the
        # wheel centres onto the plane there
        hgt = dimensions(prior.mean)[2]
        z = intr.fy * hgt / max(v1 - v0, 1.0)
        p = ray / ray[2] * z
        t_c = p - (n @ p - base_plane.offset) * n
    lam0 = np.zeros(prior.B)
    wbar = prior.canonical(lam0)[list(prior.wheel_indices)].mean(axis=0)
    cands = [R, _yaw_flip(R)] if flip_test else [R]
    best, best_cost = None, np.inf
    obs = detection.observation(intr)
    for Rc in cands:
        t = t_c - Rc.apply(wbar)
        if t[2] <= 0:
            continue
        st = VehicleState(Rc, t, lam0, base_plane)
        try:
            c = total_cost([reprojection_residual(prior, st, obs)], EnergyWeights())
        except RoadposeError:
            continue
        if c < best_cost:
            best, best_cost = st, c
    if best is None:
        raise DegenerateConfiguration("initial vehicle placement is behind the camera")
    return best


# --- joint problem -----------------------------------------------------------

def _state_from(values, vid, plane_keys=True):
    return VehicleState(values[(vid, "rotation")], values[(vid, "translation")], values[(vid, "shape")],
                        PlanePatch(values[(vid, "plane_normal")], float(values[(vid, "plane_offset")][0])))


def _vehicle_terms(prior, st, obs, measured, vid, cfg, target):
    blocks = vehicle_blocks(prior, st, obs, cfg.weights, target, cfg.sigma_dims, vid=vid, guard=True)
    blocks.append(shape_coefficient_residual(st, prior, cfg.sigma_shape, vid))
    blocks.append(plane_prior_residual(st, measured, vid, cfg.sigma_plane_normal, cfg.sigma_plane_offset))
    return blocks


def build_problem(states, observations, prior, config: PipelineConfig):
    """Problem over all vehicles of a frame; neighbour pairs fixed from the initial states."""
    cfg = config
    w = cfg.weights
    target = dimensions(prior.mean)
    pb = Problem(w)
    for vid, st in enumerate(states):
        pb.add_block((vid, "rotation"), st.rotation, kind="rotation", role="rotation")
        pb.add_block((vid, "translation"), st.translation, role="translation")
        pb.add_block((vid, "shape"), st.shape, role="shape", bound=LAMBDA_BOUND)
        pb.add_block((vid, "plane_normal"), st.plane.normal, kind="unit_normal", role="plane_normal",
                     constant=cfg.coplanar_baseline)
        pb.add_block((vid, "plane_offset"), [st.plane.offset], role="plane_offset",
                     constant=cfg.coplanar_baseline)

    def vehicle_term(vid, obs, measured):
        def fn(values):
            st = _state_from(values, vid)
            return _vehicle_terms(prior, st, obs, measured, vid, cfg, target)
        return fn

    for vid, (obs, st) in enumerate(zip(observations, states)):
        pb.add_term(vehicle_term(vid, obs, st.plane), name=f"vehicle{vid}")
    pairs = neighbor_pairs([s.translation for s in states], cfg.neighbor_radius)

    def pair_term(a, b):
        def fn(values):
            return consistency_pair_residual(_state_from(values, a), _state_from(values, b), a, b, w)
        return fn

    for a, b in pairs:
        pb.add_term(pair_term(a, b), name=f"consistency{a}-{b}")
    return pb, pairs


def schedule_for(config: PipelineConfig):
    sched = list(config.solver.schedule)
    if config.coplanar_baseline:
        # planes stay frozen at the coplanar plane; the joint phase still couples
        # pose and shape, which the alternation alone leaves unresolved
        sched = [Phase(p.name, p.roles - {"plane_normal", "plane_offset"}) for p in sched]
        sched = [p for p in sched if p.roles]
    return sched


def localize_frame(frame: FrameInput, prior: ShapePrior, config: PipelineConfig | None = None):
    cfg = config or PipelineConfig()
    if not frame.detections:
        raise ValueError("frame has no detections")
    intr = frame.rig.intr
    ground = None
    if not cfg.coplanar_baseline and any(d.plane_prior is None for d in frame.detections):
        ground = GroundModel(frame, cfg)
    states, observations, meta, unlocalized = [], [], [], []
    for i, det in enumerate(frame.detections):
        try:
            plane, source = estimate_local_plane(frame, i, cfg, ground)
            st = initialize_vehicle(det, plane, prior, intr, cfg.flip_test)
        except RoadposeError as e:
            unlocalized.append((det.id, f"{type(e).__name__}: {e}"))
            continue
        states.append(st)
        observations.append(det.observation(intr))
        meta.append((det.id, source))
    if not states:
        return LocalizationResult(frame.frame_id, [], unlocalized, None)

    pb, pairs = build_problem(states, observations, prior, cfg)
    try:
        report = solve(pb, cfg.solver.replace(schedule=schedule_for(cfg)))
    except RoadposeError as e:
        unlocalized.extend((vid, f"{type(e).__name__}: {e}") for vid, _ in meta)
        return LocalizationResult(frame.frame_id, [], unlocalized, None)

    values = report.values
    final = [_state_from(values, v) for v in range(len(states))]
    target = dimensions(prior.mean)
    vehicles = []
    for vid, ((det_id, source), st, obs, st0) in enumerate(zip(meta, final, observations, states)):
        blocks = _vehicle_terms(prior, st, obs, st0.plane, vid, cfg, target)
        blocks += [consistency_pair_residual(final[a], final[b], a, b, cfg.weights) for a, b in pairs if a == vid]
        costs = cost_by_term(blocks, cfg.weights)
        road = PlanePatch(st.plane.normal, st.plane.offset - prior.base_height)
        vehicles.append(VehicleResult(det_id, st, instantiate(prior, st), road, source, costs))
    return LocalizationResult(frame.frame_id, vehicles, unlocalized, report)


# --- evaluation --------------------------------------------------------------

@dataclass
class ATE:
    per_vehicle: dict
    mean: float
    std: float


def ate(result: LocalizationResult, ground_truth: dict):
    """Translation error per vehicle id, with mean and (population) std."""
    est = {v.id: v.state.translation for v in result.vehicles}
    if set(est) != set(ground_truth):
        missing = sorted(set(ground_truth) - set(est))
        extra = sorted(set(est) - set(ground_truth))
        raise IdMismatch(f"vehicle ids differ: missing {missing}, unexpected {extra}")
    per = {k: float(np.linalg.norm(np.asarray(est[k]) - np.asarray(ground_truth[k], dtype=float))) for k in sorted(est)}
    e = np.array(list(per.values()))
    return ATE(per, float(e.mean()) if e.size else 0.0, float(e.std()) if e.size else 0.0)
