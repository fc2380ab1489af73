"""Linear-subspace wireframe prior for cars.

An instance is ``R (mean + basis @ lam) + t`` over K = 36 named keypoints.
The object frame follows the camera convention: +X right, +Y down, +Z
towards the front of the car.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateConfiguration, FormatError
from .geometry import SINGULAR_GAP_TOL, PlanePatch, Rotation, fit_plane_least_squares

PRIOR_FORMAT = "roadpose-shape-prior"
PRIOR_VERSION = 1
NUM_KEYPOINTS = 36
DEFAULT_BASIS_SIZE = 5
LAMBDA_BOUND = 3.0

# left side is -X
KEYPOINT_NAMES = (
    "wheel_FL_center", "wheel_FR_center", "wheel_RL_center", "wheel_RR_center",
    "wheel_FL_bottom", "wheel_FR_bottom", "wheel_RL_bottom", "wheel_RR_bottom",
    "headlight_L", "headlight_R", "taillight_L", "taillight_R",
    "bumper_front_bottom_L", "bumper_front_bottom_R",
    "bumper_rear_bottom_L", "bumper_rear_bottom_R",
    "hood_front_L", "hood_front_R", "trunk_rear_L", "trunk_rear_R",
    "windshield_bottom_L", "windshield_bottom_R", "roof_front_L", "roof_front_R",
    "roof_rear_L", "roof_rear_R", "rear_window_bottom_L", "rear_window_bottom_R",
    "mirror_L", "mirror_R", "sill_front_L", "sill_front_R",
    "sill_rear_L", "sill_rear_R", "roof_mid_L", "roof_mid_R",
)

# (index a, index b) pairs drawn as wireframe edges
WIREFRAME_EDGES = (
    (0, 1), (2, 3), (0, 2), (1, 3),
    (0, 4), (1, 5), (2, 6), (3, 7),
    (12, 13), (14, 15), (12, 30), (30, 32), (32, 14), (13, 31), (31, 33), (33, 15),
    (8, 9), (16, 17), (8, 16), (9, 17), (8, 12), (9, 13),
    (10, 11), (18, 19), (10, 18), (11, 19), (10, 14), (11, 15),
    (16, 20), (17, 21), (20, 21), (20, 22), (21, 23), (22, 23),
    (22, 34), (23, 35), (34, 24), (35, 25), (24, 25), (34, 35),
    (24, 26), (25, 27), (26, 27), (26, 18), (27, 19),
    (28, 20), (29, 21),
)

# (x, height above ground, z) of the mean car before centring
_RAW_KEYPOINTS = {
    "wheel_FL_center": (-0.78, 0.32, 1.35),
    "wheel_RL_center": (-0.78, 0.32, -1.35),
    "wheel_FL_bottom": (-0.78, 0.0, 1.35),
    "wheel_RL_bottom": (-0.78, 0.0, -1.35),
    "headlight_L": (-0.62, 0.70, 2.15),
    "taillight_L": (-0.66, 0.88, -2.16),
    "bumper_front_bottom_L": (-0.72, 0.32, 2.22),
    "bumper_rear_bottom_L": (-0.72, 0.32, -2.20),
    "hood_front_L": (-0.70, 0.82, 2.05),
    "trunk_rear_L": (-0.68, 1.02, -2.10),
    "windshield_bottom_L": (-0.66, 0.98, 0.85),
    "roof_front_L": (-0.58, 1.44, 0.12),
    "roof_rear_L": (-0.58, 1.45, -0.88),
    "rear_window_bottom_L": (-0.64, 1.04, -1.62),
    "mirror_L": (-0.98, 1.00, 0.70),
    "sill_front_L": (-0.88, 0.32, 0.85),
    "sill_rear_L": (-0.88, 0.32, -0.85),
    "roof_mid_L": (-0.60, 1.48, -0.37),
}

_GREENHOUSE = ("windshield_bottom", "roof_front", "roof_rear", "roof_mid", "rear_window_bottom")
_NOSE_TAIL = ("headlight", "hood_front", "taillight", "trunk_rear")


@dataclass(frozen=True, eq=False)
class ShapePrior:
    mean: np.ndarray
    basis: np.ndarray  # (K, 3, B)
    names: tuple = KEYPOINT_NAMES
    base_indices: tuple = ()
    wheel_indices: tuple = ()  # order: FL, FR, RL, RR
    base_height: float = 0.0  # wheel-centre plane above the tyre contact plane, metres
    edges: tuple = WIREFRAME_EDGES
    _derived: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float)
        basis = np.array(self.basis, dtype=float)
        if basis.ndim == 2:
            basis = basis[:, :, None]
        K = mean.shape[0]
        if mean.shape != (K, 3) or basis.shape[:2] != (K, 3):
            raise ValueError("mean must be (K, 3) and basis (K, 3, B)")
        if len(self.names) != K:
            raise ValueError("one semantic name per keypoint required")
        wheels = tuple(int(i) for i in self.wheel_indices)
        base = tuple(int(i) for i in self.base_indices)
        if len(wheels) != 4 or len(set(wheels)) != 4:
            raise ValueError("exactly four distinct wheel-centre indices required")
        if not set(wheels) <= set(base):
            raise ValueError("wheel centres must be base keypoints")
        mean.setflags(write=False)
        basis.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "wheel_indices", wheels)
        object.__setattr__(self, "base_indices", base)
        object.__setattr__(self, "edges", tuple((int(a), int(b)) for a, b in self.edges))
        object.__setattr__(self, "base_height", float(self.base_height))

    @property
    def K(self):
        return self.mean.shape[0]

    @property
    def B(self):
        return self.basis.shape[2]

    def basis_matrix(self):
        """Dense ``3K x B`` basis, rows ordered ``x1, y1, z1, x2, ...``."""
        return self.basis.reshape(3 * self.K, self.B)

    def canonical(self, lam):
        return self.mean + self.basis @ np.asarray(lam, dtype=float)

    def wheel_basis_mean(self):
        d = self._derived
        if "wheel_basis_mean" not in d:
            d["wheel_basis_mean"] = self.basis[list(self.wheel_indices)].mean(axis=0)
        return d["wheel_basis_mean"]

    def half_wheelbase(self):
        z = self.mean[list(self.wheel_indices), 2]
        return float(abs(z[0] + z[1] - z[2] - z[3]) / 4.0)

    def index(self, name):
        return self.names.index(name)

    def __eq__(self, other):
        if not isinstance(other, ShapePrior):
            return NotImplemented
        return (
            np.array_equal(self.mean, other.mean)
            and np.array_equal(self.basis, other.basis)
            and self.names == other.names
            and self.base_indices == other.base_indices
            and self.wheel_indices == other.wheel_indices
            and self.base_height == other.base_height
            and self.edges == other.edges
        )


@dataclass(frozen=True, eq=False)
class VehicleState:
    rotation: Rotation
    translation: np.ndarray
    shape: np.ndarray
    plane: PlanePatch

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        lam = np.array(self.shape, dtype=float).reshape(-1)
        if not np.all(np.isfinite(t)) or not np.all(np.isfinite(lam)):
            raise ValueError("vehicle state must be finite")
        if t[2] <= 0:
            raise ValueError(f"vehicle translation depth must be positive, got {t[2]!r}")
        t.setflags(write=False)
        lam.setflags(write=False)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "shape", lam)

    def replace(self, **kw):
        d = dict(rotation=self.rotation, translation=self.translation, shape=self.shape, plane=self.plane)
        d.update(kw)
        return VehicleState(**d)


def check_coefficients(lam, bound=LAMBDA_BOUND):
    lam = np.asarray(lam, dtype=float)
    if np.any(np.abs(lam) > bound):
        raise ValueError(f"shape coefficients exceed bound {bound}")
    return lam


def instantiate(prior: ShapePrior, state: VehicleState):
    """Camera-frame keypoints ``(K, 3)`` of a vehicle state."""
    return state.rotation.apply(prior.canonical(state.shape)) + state.translation


def car_base_normal(keypoints3d, prior: ShapePrior):
    P = np.asarray(keypoints3d, dtype=float)
    return fit_plane_least_squares(P[list(prior.wheel_indices)]).normal


def base_translation(state: VehicleState, prior: ShapePrior, keypoints3d):
    """Bottom-of-vehicle point: centroid of the four wheel centres."""
    P = np.asarray(keypoints3d, dtype=float)
    return P[list(prior.wheel_indices)].mean(axis=0)


def dimensions(keypoints3d, rotation: Rotation | None = None):
    """(length, width, height) extents along the object Z, X, Y axes."""
    P = np.asarray(keypoints3d, dtype=float)
    if rotation is not None:
        P = rotation.inverse().apply(P)
    ext = P.max(axis=0) - P.min(axis=0)
    return float(ext[2]), float(ext[0]), float(ext[1])


def canonical_normal_jacobian(prior: ShapePrior, lam, rotation: Rotation):
    """Canonical wheel-plane normal ``m`` and ``dm/dlam`` (3 x B).

    The sign of ``m`` is chosen so that ``R m`` points up in the camera frame,
    matching :func:`car_base_normal` on the instantiated keypoints.
    """
    wi = list(prior.wheel_indices)
    W = prior.canonical(lam)[wi]
    A = W - W.mean(axis=0)
    C = A.T @ A
    evals, evecs = np.linalg.eigh(C)
    if evals[1] - evals[0] < SINGULAR_GAP_TOL:
        raise DegenerateConfiguration("wheel centres are collinear")
    m = evecs[:, 0]
    if (rotation.as_matrix() @ m)[1] > 0:
        m = -m
    dW = prior.basis[wi]  # (4, 3, B)
    dA = dW - dW.mean(axis=0)
    # dC_j = dA_j^T A + A^T dA_j, contracted with m
    dCm = np.einsum("kcb,kd,d->cb", dA, A, m) + np.einsum("kc,kdb,d->cb", A, dA, m)
    dm = np.zeros((3, prior.B))
    for k in (1, 2):
        u = evecs[:, k]
        dm += np.outer(u, (u @ dCm) / (evals[0] - evals[k]))
    return m, dm


def synthetic_prior(B: int = DEFAULT_BASIS_SIZE) -> ShapePrior:
    """Procedural box-like car prior with up to five orthonormal deformation modes.

    Modes, in order before orthonormalisation: length, width, body height,
    cabin fore/aft shift, nose and tail height. Base keypoints sit on the
    wheel-centre plane and every mode keeps them there.
    """
    if not 1 <= B <= 5:
        raise ValueError("synthetic prior supports 1 <= B <= 5")
    raw = np.zeros((NUM_KEYPOINTS, 3))
    for i, name in enumerate(KEYPOINT_NAMES):
        if name.endswith("_R") or "_FR_" in name or "_RR_" in name:
            left = name[:-2] + "_L" if name.endswith("_R") else name.replace("_FR_", "_FL_").replace("_RR_", "_RL_")
            x, h, z = _RAW_KEYPOINTS[left]
            raw[i] = (-x, h, z)
        else:
            raw[i] = _RAW_KEYPOINTS[name]
    wheel_h = _RAW_KEYPOINTS["wheel_FL_center"][1]
    x, h, z = raw.T
    y = -h

    def stem(name):
        return name.rsplit("_", 1)[0]

    modes = np.zeros((5, NUM_KEYPOINTS, 3))
    modes[0, :, 2] = z
    modes[1, :, 0] = x
    modes[2, :, 1] = np.where(h > wheel_h, -(h - wheel_h), 0.0)
    for i, name in enumerate(KEYPOINT_NAMES):
        if stem(name) in _GREENHOUSE:
            modes[3, i, 2] = 1.0
        if stem(name) in _NOSE_TAIL:
            modes[4, i, 1] = -1.0
    flat = modes.reshape(5, -1)
    Q = []
    for v in flat:
        for q in Q:
            v = v - (q @ v) * q
        Q.append(v / np.linalg.norm(v))
    basis = np.stack(Q[:B], axis=1).reshape(NUM_KEYPOINTS, 3, B)

    mean = np.column_stack([x, y, z])
    mean = mean - mean.mean(axis=0)
    wheels = tuple(KEYPOINT_NAMES.index(f"wheel_{w}_center") for w in ("FL", "FR", "RL", "RR"))
    base = tuple(
        i for i, n in enumerate(KEYPOINT_NAMES)
        if n.endswith("_center") or n.startswith("bumper_") or n.startswith("sill_")
    )
    return ShapePrior(
        mean=mean, basis=basis, names=KEYPOINT_NAMES, base_indices=base,
        wheel_indices=wheels, base_height=wheel_h, edges=WIREFRAME_EDGES,
    )


def prior_to_dict(prior: ShapePrior):
    return {
        "format": PRIOR_FORMAT,
        "version": PRIOR_VERSION,
        "K": prior.K,
        "B": prior.B,
        "base_height": prior.base_height,
        "wheel_indices": list(prior.wheel_indices),
        "base_indices": list(prior.base_indices),
        "keypoints": [
            {"name": n, "mean": [float(c) for c in prior.mean[i]]} for i, n in enumerate(prior.names)
        ],
        "basis": [
            [[float(c) for c in prior.basis[i, :, j]] for i in range(prior.K)] for j in range(prior.B)
        ],
        "edges": [list(e) for e in prior.edges],
    }


def prior_from_dict(d, path=None):
    if d.get("format") != PRIOR_FORMAT:
        raise FormatError(f"not a shape prior file (format={d.get('format')!r})", path)
    if d.get("version") != PRIOR_VERSION:
        raise FormatError(f"unsupported shape prior version {d.get('version')!r}", path)
    try:
        K, B = int(d["K"]), int(d["B"])
        kps = d["keypoints"]
        names = tuple(k["name"] for k in kps)
        mean = np.array([k["mean"] for k in kps], dtype=float)
        basis = np.array(d["basis"], dtype=float)  # (B, K, 3)
        if mean.shape != (K, 3) or basis.shape != (B, K, 3):
            raise FormatError(f"array shapes inconsistent with K={K}, B={B}", path)
        return ShapePrior(
            mean=mean,
            basis=np.transpose(basis, (1, 2, 0)),
            names=names,
            base_indices=tuple(d["base_indices"]),
            wheel_indices=tuple(d["wheel_indices"]),
            base_height=float(d["base_height"]),
            edges=tuple(tuple(e) for e in d.get("edges", WIREFRAME_EDGES)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"invalid shape prior: {exc}", path) from exc


def dumps_prior(prior: ShapePrior) -> str:
    return json.dumps(prior_to_dict(prior), indent=1) + "\n"


def save_prior(prior: ShapePrior, path):
    Path(path).write_text(dumps_prior(prior))


def load_prior(path) -> ShapePrior:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read shape prior: {exc.strerror}", path) from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", path, exc.lineno) from exc
    return prior_from_dict(d, path)
