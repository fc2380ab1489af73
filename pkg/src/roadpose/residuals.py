"""Energy terms of the joint vehicle/ground objective.

Every term returns a :class:`ResidualBlock` holding the residual vector, a
per-row Huber scale and analytic Jacobians keyed by ``(vehicle_id, block)``.
Blocks are ``rotation`` (3, left axis-angle increment), ``translation`` (3),
``shape`` (B), ``plane_normal`` (3, ambient) and ``plane_offset`` (1).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from .errors import NearSingularDenominator
from .geometry import E2, CameraIntrinsics, project_wireframe, projection_jacobian, skew
from .shape_model import ShapePrior, VehicleState, canonical_normal_jacobian, dimensions

BLOCK_SIZES = {"rotation": 3, "translation": 3, "plane_normal": 3, "plane_offset": 1}
TERMS = ("reprojection", "ground", "normal", "disambiguation", "base", "consistency", "regularizer", "shape_prior", "plane_prior")
DENOM_GUARD = 1e-6


@dataclass
class ResidualBlock:
    term: str
    residual: np.ndarray
    deltas: np.ndarray
    jacobians: dict = field(default_factory=dict)

    @property
    def block_ids(self):
        return list(self.jacobians)

    def __post_init__(self):
        self.residual = np.asarray(self.residual, dtype=float).reshape(-1)
        self.deltas = np.broadcast_to(np.asarray(self.deltas, dtype=float), self.residual.shape).copy()
        for key, J in self.jacobians.items():
            J = np.asarray(J, dtype=float)
            if J.ndim == 1:
                J = J.reshape(self.residual.size, -1)
            if J.shape[0] != self.residual.size:
                raise ValueError(f"{self.term}: jacobian {key} has {J.shape[0]} rows for {self.residual.size} residuals")
            self.jacobians[key] = J


@dataclass(frozen=True)
class EnergyWeights:
    eta_r: float = 1.0
    eta_g: float = 100.0
    eta_n: float = 1.0
    eta_d: float = 0.05
    eta_b: float = 100.0
    eta_c: float = 1.0
    eta_reg: float = 1.0
    eta_s: float = 1.0
    eta_p: float = 1.0
    huber_delta_px: float = 2.0
    huber_delta_m: float = 0.5
    epsilon: float = 1e-3
    robust: bool = True

    def __post_init__(self):
        for name in ("eta_r", "eta_g", "eta_n", "eta_d", "eta_b", "eta_c", "eta_reg", "eta_s", "eta_p"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.huber_delta_px <= 0 or self.huber_delta_m <= 0:
            raise ValueError("Huber scales must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    def eta(self, term):
        return {
            "reprojection": self.eta_r, "ground": self.eta_g, "normal": self.eta_n,
            "disambiguation": self.eta_d, "base": self.eta_b, "consistency": self.eta_c,
            "regularizer": self.eta_reg, "shape_prior": self.eta_s, "plane_prior": self.eta_p,
        }[term]

    def replace(self, **kw):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(kw)
        return EnergyWeights(**d)


@dataclass(frozen=True, eq=False)
class Observation:
    keypoints2d: np.ndarray
    confidences: np.ndarray
    bbox: tuple
    intr: CameraIntrinsics

    def __post_init__(self):
        kp = np.array(self.keypoints2d, dtype=float).reshape(-1, 2)
        c = np.array(self.confidences, dtype=float).reshape(-1)
        if c.shape[0] != kp.shape[0]:
            raise ValueError("one confidence per keypoint required")
        if np.any((c < 0) | (c > 1)):
            raise ValueError("confidences must lie in [0, 1]")
        u0, v0, u1, v1 = (float(b) for b in self.bbox)
        if not (u1 > u0 and v1 > v0):
            raise ValueError(f"degenerate bounding box {self.bbox!r}")
        kp.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "keypoints2d", kp)
        object.__setattr__(self, "confidences", c)
        object.__setattr__(self, "bbox", (u0, v0, u1, v1))


class VehiclePose:
    """Quantities shared by several terms for one vehicle state."""

    def __init__(self, prior: ShapePrior, state: VehicleState):
        self.R = state.rotation.as_matrix()
        self.t = state.translation
        self.s = prior.canonical(state.shape)
        self.X = self.s @ self.R.T + self.t
        self.m, self.dm = canonical_normal_jacobian(prior, state.shape, state.rotation)
        self.n_c = self.R @ self.m
        self.dn_c = self.R @ self.dm
        self.wbar = self.s[list(prior.wheel_indices)].mean(axis=0)
        self.t_c = self.R @ self.wbar + self.t


def huber(r, delta):
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


def huber_weight(r, delta):
    """IRLS weight ``min(1, delta/|r|)``."""
    a = np.abs(r)
    with np.errstate(divide="ignore"):
        return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))


def reprojection_residual(prior, state, obs: Observation, vid=0, weights: EnergyWeights | None = None, pose=None):
    w = weights or EnergyWeights()
    P = pose or VehiclePose(prior, state)
    px = project_wireframe(P.X, obs.intr)
    c = obs.confidences
    r = (c[:, None] * (px - obs.keypoints2d)).reshape(-1)
    Jp = projection_jacobian(P.X, obs.intr) * c[:, None, None]  # (K, 2, 3)
    Rs = P.s @ P.R.T
    Jrot = -np.einsum("kij,kjl->kil", Jp, np.stack([skew(a) for a in Rs]))
    Jshape = np.einsum("kij,jl,klb->kib", Jp, P.R, prior.basis)
    K = prior.K
    return ResidualBlock("reprojection", r, w.huber_delta_px, {
        (vid, "rotation"): Jrot.reshape(2 * K, 3),
        (vid, "translation"): Jp.reshape(2 * K, 3),
        (vid, "shape"): Jshape.reshape(2 * K, prior.B),
    })


def ground_residual(state, prior, vid=0, weights: EnergyWeights | None = None, pose=None):
    w = weights or EnergyWeights()
    P = pose or VehiclePose(prior, state)
    r = P.n_c @ P.t_c - state.plane.offset
    Wb = prior.wheel_basis_mean()
    J_shape = (P.wbar + P.R.T @ P.t) @ P.dm + P.m @ Wb
    return ResidualBlock("ground", [r], w.huber_delta_m, {
        (vid, "rotation"): np.cross(P.n_c, P.t)[None, :],
        (vid, "translation"): P.n_c[None, :],
        (vid, "shape"): J_shape[None, :],
        (vid, "plane_offset"): [[-1.0]],
    })


def normal_alignment_residual(state, prior, vid=0, pose=None):
    P = pose or VehiclePose(prior, state)
    n_g = state.plane.normal
    r = np.cross(P.n_c, n_g)
    Sg = skew(n_g)
    return ResidualBlock("normal", r, 1.0, {
        (vid, "rotation"): Sg @ skew(P.n_c),
        (vid, "shape"): -Sg @ P.dn_c,
        (vid, "plane_normal"): skew(P.n_c),
    })


def _inverse_term(u, guard):
    if guard:
        if abs(u) < DENOM_GUARD:
            return -1.0 / (np.copysign(DENOM_GUARD, u) if u != 0 else DENOM_GUARD), 0.0
    elif abs(u) < 1e-12:
        raise NearSingularDenominator(f"disambiguation denominator {u!r} is numerically zero")
    return -1.0 / u, 1.0 / (u * u)


def disambiguation_residual(state, prior, weights: EnergyWeights | None = None, vid=0, guard=False, pose=None):
    w = weights or EnergyWeights()
    P = pose or VehiclePose(prior, state)
    n_g = state.plane.normal
    r1, g1 = _inverse_term(E2 @ P.n_c + w.epsilon, guard)
    r2, g2 = _inverse_term(E2 @ n_g + w.epsilon, guard)
    J_rot = np.zeros((2, 3))
    J_rot[0] = g1 * np.cross(P.n_c, E2)
    J_shape = np.zeros((2, prior.B))
    J_shape[0] = g1 * P.dn_c[1]
    J_n = np.zeros((2, 3))
    J_n[1] = g2 * E2
    return ResidualBlock("disambiguation", [r1, r2], 1.0, {
        (vid, "rotation"): J_rot,
        (vid, "shape"): J_shape,
        (vid, "plane_normal"): J_n,
    })


def base_point_offsets(keypoints3d, prior):
    """``n_c . t_c - n_c . X_b`` for every base keypoint of a camera-frame wireframe."""
    from .shape_model import car_base_normal

    X = np.asarray(keypoints3d, dtype=float)
    n_c = car_base_normal(X, prior)
    t_c = X[list(prior.wheel_indices)].mean(axis=0)
    return n_c @ t_c - X[list(prior.base_indices)] @ n_c


def base_points_residual(prior, state, vid=0, weights: EnergyWeights | None = None, pose=None):
    w = weights or EnergyWeights()
    P = pose or VehiclePose(prior, state)
    bi = list(prior.base_indices)
    # n_c . (t_c - X_b) = m . (wbar - s_b): invariant to the rigid pose
    diff = P.wbar - P.s[bi]
    r = diff @ P.m
    dV = prior.wheel_basis_mean()[None] - prior.basis[bi]  # (nb, 3, B)
    J_shape = diff @ P.dm + np.einsum("c,kcb->kb", P.m, dV)
    nb = len(bi)
    return ResidualBlock("base", r, w.huber_delta_m, {
        (vid, "rotation"): np.zeros((nb, 3)),
        (vid, "translation"): np.zeros((nb, 3)),
        (vid, "shape"): J_shape,
    })


def neighbor_pairs(translations, radius):
    """Ordered index pairs of vehicles whose translations are within ``radius``."""
    T = np.asarray(translations, dtype=float).reshape(-1, 3)
    out = []
    for a, b in permutations(range(T.shape[0]), 2):
        if np.linalg.norm(T[a] - T[b]) <= radius:
            out.append((a, b))
    return out


def consistency_pair_residual(state_a, state_b, ida, idb, weights: EnergyWeights | None = None):
    w = weights or EnergyWeights()
    r = np.concatenate([state_a.plane.normal - state_b.plane.normal, [state_a.plane.offset - state_b.plane.offset]])
    Jn = np.zeros((4, 3))
    Jn[:3] = np.eye(3)
    Jd = np.zeros((4, 1))
    Jd[3, 0] = 1.0
    return ResidualBlock("consistency", r, [1.0, 1.0, 1.0, w.huber_delta_m], {
        (ida, "plane_normal"): Jn,
        (ida, "plane_offset"): Jd,
        (idb, "plane_normal"): -Jn,
        (idb, "plane_offset"): -Jd,
    })


def consistency_residual(states, neighbor_radius=6.0, weights: EnergyWeights | None = None, pairs=None):
    """Plane agreement over every ordered neighbour pair, stacked into one block."""
    if pairs is None:
        pairs = neighbor_pairs([s.translation for s in states], neighbor_radius)
    blocks = [consistency_pair_residual(states[a], states[b], a, b, weights) for a, b in pairs]
    n = 4 * len(blocks)
    if not blocks:
        return ResidualBlock("consistency", np.zeros(0), np.zeros(0), {})
    keys = []
    for blk in blocks:
        keys.extend(k for k in blk.jacobians if k not in keys)
    jac = {}
    for k in keys:
        J = np.zeros((n, BLOCK_SIZES[k[1]]))
        for i, blk in enumerate(blocks):
            if k in blk.jacobians:
                J[4 * i:4 * i + 4] += blk.jacobians[k]
        jac[k] = J
    return ResidualBlock(
        "consistency",
        np.concatenate([b.residual for b in blocks]),
        np.concatenate([b.deltas for b in blocks]),
        jac,
    )


def dimension_regularizer(prior, state, target_dims, sigma_dims, vid=0, pose=None):
    s = pose.s if pose is not None else prior.canonical(state.shape)
    sig = np.asarray(sigma_dims, dtype=float)
    if np.any(sig <= 0):
        raise ValueError("dimension sigmas must be positive")
    dims = np.array(dimensions(s))
    r = (dims - np.asarray(target_dims, dtype=float)) / sig
    J = np.zeros((3, prior.B))
    # (length, width, height) <-> axes (z, x, y)
    for row, axis in enumerate((2, 0, 1)):
        hi = int(np.argmax(s[:, axis]))
        lo = int(np.argmin(s[:, axis]))
        J[row] = (prior.basis[hi, axis] - prior.basis[lo, axis]) / sig[row]
    return ResidualBlock("regularizer", r, 1.0, {(vid, "shape"): J})


def shape_coefficient_residual(state, prior, sigma=1.0, vid=0):
    """Gaussian prior on the deformation coefficients, ``lam / sigma``.

    Complements the dimension regularizer, which leaves modes that do not
    change the bounding extents unconstrained.
    """
    if not sigma > 0:
        raise ValueError("shape sigma must be positive")
    lam = np.asarray(state.shape, dtype=float)
    return ResidualBlock("shape_prior", lam / sigma, 1.0, {(vid, "shape"): np.eye(prior.B) / sigma})


def plane_prior_residual(state, measured, vid=0, sigma_normal=0.02, sigma_offset=0.05):
    """Deviation of the vehicle's plane from the measured one it was initialised on.

    ``measured`` is at the same (wheel-centre) level as ``state.plane``.
    """
    sn, sd = float(sigma_normal), float(sigma_offset)
    r = np.concatenate([(state.plane.normal - measured.normal) / sn, [(state.plane.offset - measured.offset) / sd]])
    Jn = np.zeros((4, 3))
    Jn[:3] = np.eye(3) / sn
    Jd = np.zeros((4, 1))
    Jd[3, 0] = 1.0 / sd
    return ResidualBlock("plane_prior", r, 1.0, {(vid, "plane_normal"): Jn, (vid, "plane_offset"): Jd})


def block_cost(block: ResidualBlock, weights: EnergyWeights):
    if block.residual.size == 0:
        return 0.0
    if weights.robust:
        rho = huber(block.residual, block.deltas)
    else:
        rho = 0.5 * block.residual**2
    return float(weights.eta(block.term) * rho.sum())


def total_cost(blocks, weights: EnergyWeights):
    return float(sum(block_cost(b, weights) for b in blocks))


def cost_by_term(blocks, weights: EnergyWeights):
    out = dict.fromkeys(TERMS, 0.0)
    for b in blocks:
        out[b.term] += block_cost(b, weights)
    return out


def vehicle_blocks(prior, state, obs, weights: EnergyWeights, target_dims, sigma_dims, vid=0, guard=True,
                   plane_terms=True):
    """All single-vehicle terms, sharing one kinematic evaluation."""
    P = VehiclePose(prior, state)
    blocks = [reprojection_residual(prior, state, obs, vid, weights, pose=P)]
    if plane_terms:
        blocks += [
            ground_residual(state, prior, vid, weights, pose=P),
            normal_alignment_residual(state, prior, vid, pose=P),
            disambiguation_residual(state, prior, weights, vid, guard=guard, pose=P),
            base_points_residual(prior, state, vid, weights, pose=P),
        ]
    blocks.append(dimension_regularizer(prior, state, target_dims, sigma_dims, vid, pose=P))
    return blocks
