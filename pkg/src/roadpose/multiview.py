"""Metric ground recovery from two or three views.

Frame ``a`` is the frame in which vehicles are detected. Relative poses map
frame-a coordinates into another camera, ``X_b = R X_a + t``, and all
reconstructed points live in frame a.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy.optimize import least_squares
from scipy.spatial import cKDTree

from .errors import (DegenerateMotion, FormatError, InsufficientParallax, InsufficientPoints,
                     NonPositiveMedian, ResectionFailure)
from .geometry import (DEPTH_EPS, CameraIntrinsics, PlanePatch, Rotation, fit_plane_least_squares,
                       projection_jacobian, skew, tangent_basis)

log = logging.getLogger(__name__)

LABELS = ("road", "non-road")
CORR_FORMAT = "roadpose-correspondences"
CORR_VERSION = 1
MIN_PARALLAX_DEG = 0.1
LO_SCHEDULE = (8.0, 4.0, 2.0, 2.0)  # consensus radii, in thresholds, while polishing
FINAL_WINDOW = 9.0  # radius, in thresholds, of the robust refit after RANSAC
FINAL_STARTS = 10  # best raw hypotheses that also seed the robust refit
TRIANGULATION_MIN_ANGLE = 1e-4  # rad; below this a match is treated as at infinity


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    points_a: np.ndarray
    points_b: np.ndarray
    labels: tuple
    frames: tuple = ("f1", "f2")

    def __post_init__(self):
        a = np.array(self.points_a, dtype=float).reshape(-1, 2)
        b = np.array(self.points_b, dtype=float).reshape(-1, 2)
        labels = tuple(str(x) for x in self.labels)
        if a.shape != b.shape or len(labels) != a.shape[0]:
            raise ValueError("points_a, points_b and labels must have equal length")
        bad = set(labels) - set(LABELS)
        if bad:
            raise ValueError(f"unknown labels {sorted(bad)}")
        if len(self.frames) != 2:
            raise ValueError("frames must name exactly two frames")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "points_a", a)
        object.__setattr__(self, "points_b", b)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "frames", tuple(str(f) for f in self.frames))

    def __len__(self):
        return self.points_a.shape[0]

    @property
    def road_mask(self):
        return np.array([lab == "road" for lab in self.labels], dtype=bool)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        return CorrespondenceSet(self.points_a[idx], self.points_b[idx],
                                 tuple(self.labels[i] for i in idx), self.frames)

    def __eq__(self, other):
        if not isinstance(other, CorrespondenceSet):
            return NotImplemented
        return (np.array_equal(self.points_a, other.points_a) and np.array_equal(self.points_b, other.points_b)
                and self.labels == other.labels and self.frames == other.frames)


@dataclass(frozen=True)
class CameraRig:
    intr: CameraIntrinsics
    height: float = 1.65

    def __post_init__(self):
        if not self.height > 0:
            raise ValueError("camera height must be positive")


@dataclass(frozen=True, eq=False)
class RelativePose:
    rotation: Rotation
    translation: np.ndarray
    inliers: np.ndarray | None = None

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        s = np.linalg.norm(t)
        if s > 0:
            t = t / s
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)


@dataclass
class Reconstruction:
    """Triangulated points in frame-a coordinates with their pixels and labels."""

    points: np.ndarray
    pixels_a: np.ndarray
    pixels_b: np.ndarray
    labels: tuple
    poses: dict = field(default_factory=dict)  # frame id -> (Rotation, t) with X_f = R X_a + t

    def __len__(self):
        return self.points.shape[0]

    @property
    def road_mask(self):
        return np.array([lab == "road" for lab in self.labels], dtype=bool)

    def scaled(self, s):
        poses = {k: (R, s * np.asarray(t)) for k, (R, t) in self.poses.items()}
        return Reconstruction(s * self.points, self.pixels_a, self.pixels_b, self.labels, poses)


# --- two-view geometry -------------------------------------------------------

def _hartley(x):
    c = x.mean(axis=0)
    d = np.sqrt(((x - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / max(d, 1e-300)
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return T


def eight_point(xa, xb):
    """Normalized 8-point essential matrix from normalized image coordinates."""
    Ta, Tb = _hartley(xa), _hartley(xb)
    ha = np.column_stack([xa, np.ones(len(xa))]) @ Ta.T
    hb = np.column_stack([xb, np.ones(len(xb))]) @ Tb.T
    A = np.einsum("ni,nj->nij", hb, ha).reshape(-1, 9)
    _, _, vt = np.linalg.svd(A)
    E = Tb.T @ vt[-1].reshape(3, 3) @ Ta
    U, _, Vt = np.linalg.svd(E)
    E = U @ np.diag([1.0, 1.0, 0.0]) @ Vt
    return E / np.linalg.norm(E)


def sampson_distance(E, xa, xb, intr: CameraIntrinsics):
    """Sampson distance in pixels for matches given in normalized coordinates."""
    K = intr.matrix()
    Kinv = np.linalg.inv(K)
    F = Kinv.T @ E @ Kinv
    pa = np.column_stack([xa, np.ones(len(xa))]) @ K.T
    pb = np.column_stack([xb, np.ones(len(xb))]) @ K.T
    Fa = pa @ F.T
    Fb = pb @ F
    num = np.einsum("ij,ij->i", pb, Fa) ** 2
    den = Fa[:, 0] ** 2 + Fa[:, 1] ** 2 + Fb[:, 0] ** 2 + Fb[:, 1] ** 2
    return np.sqrt(num / np.maximum(den, 1e-300))


def decompose_essential(E):
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
    t = U[:, 2]
    return [(U @ W @ Vt, t), (U @ W @ Vt, -t), (U @ W.T @ Vt, t), (U @ W.T @ Vt, -t)]


def _dlt(xa, xb, Pa, Pb):
    """Linear triangulation; returns homogeneous points ``(N, 4)``."""
    n = len(xa)
    A = np.empty((n, 4, 4))
    A[:, 0] = xa[:, 0, None] * Pa[2] - Pa[0]
    A[:, 1] = xa[:, 1, None] * Pa[2] - Pa[1]
    A[:, 2] = xb[:, 0, None] * Pb[2] - Pb[0]
    A[:, 3] = xb[:, 1, None] * Pb[2] - Pb[1]
    _, _, vt = np.linalg.svd(A)
    return vt[:, -1, :]


def _midpoint(xa, xb, Ra, ta, Rb, tb):
    """Midpoint of the closest approach of the two viewing rays (frame-a coordinates)."""
    ca, cb = -Ra.T @ ta, -Rb.T @ tb
    da = np.column_stack([xa, np.ones(len(xa))]) @ Ra
    db = np.column_stack([xb, np.ones(len(xb))]) @ Rb
    w = ca - cb
    a = (da * da).sum(1)
    b = (da * db).sum(1)
    c = (db * db).sum(1)
    d = da @ w
    e = db @ w
    den = a * c - b * b
    den = np.where(np.abs(den) < 1e-300, 1e-300, den)
    sa = (b * e - c * d) / den
    sb = (a * e - b * d) / den
    return 0.5 * ((ca + sa[:, None] * da) + (cb + sb[:, None] * db))


def triangulate_views(xa, xb, pose_a, pose_b, min_angle=TRIANGULATION_MIN_ANGLE):
    """Triangulate normalized matches seen by two cameras with known poses.

    Returns ``(points, keep)``: points for every match (NaN where rejected) and
    the boolean mask of matches in front of both cameras with enough parallax.
    """
    xa = np.asarray(xa, dtype=float).reshape(-1, 2)
    xb = np.asarray(xb, dtype=float).reshape(-1, 2)
    (Ra, ta), (Rb, tb) = pose_a, pose_b
    Ra, Rb = _as_matrix(Ra), _as_matrix(Rb)
    ta, tb = np.asarray(ta, dtype=float), np.asarray(tb, dtype=float)
    if len(xa) == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=bool)
    Pa = np.column_stack([Ra, ta])
    Pb = np.column_stack([Rb, tb])
    H = _dlt(xa, xb, Pa, Pb)
    # rays expressed in frame a; their angle is the triangulation parallax
    da = np.column_stack([xa, np.ones(len(xa))]) @ Ra
    db = np.column_stack([xb, np.ones(len(xb))]) @ Rb
    cosang = (da * db).sum(1) / (np.linalg.norm(da, axis=1) * np.linalg.norm(db, axis=1))
    ang = np.arccos(np.clip(cosang, -1.0, 1.0))
    w = H[:, 3]
    finite = np.abs(w) > 1e-12 * np.linalg.norm(H[:, :3], axis=1)
    X = np.full((len(xa), 3), np.nan)
    X[finite] = H[finite, :3] / w[finite, None]
    # midpoint fallback where the linear solve is numerically at infinity
    mid = ~finite & (ang >= min_angle)
    if mid.any():
        X[mid] = _midpoint(xa[mid], xb[mid], Ra, ta, Rb, tb)
    za = X @ Ra[2] + ta[2]
    zb = X @ Rb[2] + tb[2]
    with np.errstate(invalid="ignore"):
        keep = np.isfinite(za) & (za > DEPTH_EPS) & (zb > DEPTH_EPS) & (ang >= min_angle)
    X[~keep] = np.nan
    return X, keep


def _essential_from(rotvec, t):
    return skew(t) @ Rotation.from_rotvec(rotvec).as_matrix()


def _refine_essential(E, xa, xb, intr, loss="linear", f_scale=1.0):
    """Least-squares Sampson-error refinement of ``E`` over a consensus set."""
    R, t = max(decompose_essential(E), key=lambda c: _cheirality_count(c[0], c[1], xa, xb))
    B = tangent_basis(t)

    def fun(p):
        tt = t + B @ p[3:]
        return sampson_distance(_essential_from(p[:3], tt / np.linalg.norm(tt)), xa, xb, intr)

    p0 = np.concatenate([Rotation.from_matrix(R).as_rotvec(), np.zeros(2)])
    sol = least_squares(fun, p0, x_scale="jac", loss=loss, f_scale=f_scale)
    tt = t + B @ sol.x[3:]
    return _essential_from(sol.x[:3], tt / np.linalg.norm(tt))


def _msac(d, threshold):
    """Truncated quadratic consensus cost (lower is better)."""
    return float(np.minimum(d * d, threshold * threshold).sum())


def _polish(E, score, xa, xb, intr, threshold):
    """Local optimisation of a RANSAC hypothesis.

    The linear estimate is poorly conditioned for forward motion over a
    dominant road plane, so each new best hypothesis is refined by least
    squares on a consensus set whose radius shrinks towards the threshold.
    """
    for k in LO_SCHEDULE:
        w = sampson_distance(E, xa, xb, intr) < k * threshold
        if w.sum() < 8:
            break
        E2 = _refine_essential(E, xa[w], xb[w], intr)
        s2 = _msac(sampson_distance(E2, xa, xb, intr), threshold)
        if s2 < score:
            E, score = E2, s2
    return E, score


def _as_matrix(R):
    return R.as_matrix() if isinstance(R, Rotation) else np.asarray(R, dtype=float)


def _cheirality_count(R, t, xa, xb):
    """Matches whose ray midpoint lies in front of both cameras."""
    R = _as_matrix(R)
    t = np.asarray(t, dtype=float)
    X = _midpoint(xa, xb, np.eye(3), np.zeros(3), R, t)
    return int(np.sum((X[:, 2] > DEPTH_EPS) & (X @ R[2] + t[2] > DEPTH_EPS)))


def estimate_egomotion(corr: CorrespondenceSet, intr: CameraIntrinsics, threshold=1.0, iterations=256,
                       seed=0, min_parallax_px=1.0, sample_size=8):
    """Relative pose ``X_b = R X_a + t`` (unit ``t``) from pixel matches, robust to outliers."""
    n = len(corr)
    if n < 8:
        raise InsufficientPoints(f"egomotion needs at least 8 matches, got {n}")
    disp = np.linalg.norm(corr.points_b - corr.points_a, axis=1)
    if np.median(disp) <= min_parallax_px:
        raise InsufficientParallax(f"median image displacement {np.median(disp):.3g} px is too small")
    xa = intr.normalize(corr.points_a)
    xb = intr.normalize(corr.points_b)
    rng = np.random.default_rng(seed)
    best_E, best_score = None, np.inf
    starts, raw = [], []
    for it in range(iterations):
        idx = rng.choice(n, min(sample_size, n), replace=False)
        try:
            E = eight_point(xa[idx], xb[idx])
        except np.linalg.LinAlgError:
            continue
        score = _msac(sampson_distance(E, xa, xb, intr), threshold)
        raw.append((score, it, E))
        if score < best_score:  # strict: ties keep the earliest hypothesis
            E, score = _polish(E, score, xa, xb, intr, threshold)
            best_E, best_score = E, score
            starts.append(E)
    if best_E is None:
        raise InsufficientPoints("no essential-matrix hypothesis could be formed")
    # a hard-threshold consensus set favours matches agreeing with the current
    # estimate, and forward motion has shallow rotation/translation valleys, so
    # the final robust refit is started from several hypotheses
    starts += [E for _, _, E in sorted(raw, key=lambda r: r[:2])[:FINAL_STARTS]]
    E, final = best_E, best_score
    for E0 in starts:
        w = sampson_distance(E0, xa, xb, intr) < FINAL_WINDOW * threshold
        if w.sum() < 8:
            continue
        E1 = _refine_essential(E0, xa[w], xb[w], intr, loss="cauchy", f_scale=threshold)
        s1 = _msac(sampson_distance(E1, xa, xb, intr), threshold)
        if s1 < final:
            E, final = E1, s1
    inl = sampson_distance(E, xa, xb, intr) < threshold
    if inl.sum() < 8:
        raise InsufficientPoints(f"best essential matrix has only {int(inl.sum())} inliers")
    cands = decompose_essential(E)
    counts = [_cheirality_count(R, t, xa[inl], xb[inl]) for R, t in cands]
    R, t = cands[int(np.argmax(counts))]
    da = np.column_stack([xa[inl], np.ones(inl.sum())])
    db = np.column_stack([xb[inl], np.ones(inl.sum())]) @ R
    cosang = (da * db).sum(1) / (np.linalg.norm(da, axis=1) * np.linalg.norm(db, axis=1))
    ang = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    if np.all(ang < MIN_PARALLAX_DEG):
        raise DegenerateMotion("all inlier triangulation angles are below 0.1 deg (pure rotation?)")
    log.debug("egomotion: %d/%d inliers", int(inl.sum()), n)
    return RelativePose(Rotation.from_matrix(R), t, inliers=np.flatnonzero(inl))


def triangulate(corr: CorrespondenceSet, pose: RelativePose, intr: CameraIntrinsics, idx=None):
    """Points of the given matches in frame a, at the scale ``|t| = 1``.

    Returns ``(points, kept)`` where ``kept`` indexes into ``corr``.
    """
    idx = np.arange(len(corr)) if idx is None else np.asarray(idx, dtype=int)
    xa = intr.normalize(corr.points_a[idx]) if len(idx) else np.zeros((0, 2))
    xb = intr.normalize(corr.points_b[idx]) if len(idx) else np.zeros((0, 2))
    X, keep = triangulate_views(xa, xb, (np.eye(3), np.zeros(3)), (pose.rotation, pose.translation))
    return X[keep], idx[keep]


def reconstruct_two_view(corr: CorrespondenceSet, intr: CameraIntrinsics, seed=0):
    pose = estimate_egomotion(corr, intr, seed=seed)
    X, kept = triangulate(corr, pose, intr, pose.inliers)
    return Reconstruction(
        X, corr.points_a[kept], corr.points_b[kept], tuple(corr.labels[i] for i in kept),
        {corr.frames[0]: (Rotation.identity(), np.zeros(3)), corr.frames[1]: (pose.rotation, pose.translation)},
    )


def select_road_points_near(points2d, labels, bbox, expansion=2.0):
    """Indices of road-labelled pixels inside the bbox scaled about its centre."""
    if expansion < 1:
        raise ValueError("expansion must be >= 1")
    p = np.asarray(points2d, dtype=float).reshape(-1, 2)
    u0, v0, u1, v1 = bbox
    cu, cv = 0.5 * (u0 + u1), 0.5 * (v0 + v1)
    hw, hh = 0.5 * expansion * (u1 - u0), 0.5 * expansion * (v1 - v0)
    inside = (np.abs(p[:, 0] - cu) <= hw) & (np.abs(p[:, 1] - cv) <= hh)
    road = np.array([lab == "road" for lab in labels], dtype=bool)
    return np.flatnonzero(inside & road)


# --- planes and scale --------------------------------------------------------

def ransac_dominant_plane(points, threshold=0.02, iterations=500, seed=0):
    """Plane with the most inliers over 3-point hypotheses, refit on its inliers."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    n = P.shape[0]
    if n < 3:
        raise InsufficientPoints(f"plane RANSAC needs at least 3 points, got {n}")
    rng = np.random.default_rng(seed)
    if n == 3:
        idx = np.arange(3)[None]
    else:
        idx = np.stack([rng.choice(n, 3, replace=False) for _ in range(iterations)])
    a, b, c = P[idx[:, 0]], P[idx[:, 1]], P[idx[:, 2]]
    nrm = np.cross(b - a, c - a)
    size = np.linalg.norm(nrm, axis=1)
    good = size >= 1e-12  # same collinearity test as plane_through
    best = None
    if good.any():
        nrm = nrm[good] / size[good, None]
        off = (nrm * a[good]).sum(1)
        counts = (np.abs(P @ nrm.T - off) < threshold).sum(0)
        k = int(np.argmax(counts))  # first hypothesis among equals
        best = np.abs(P @ nrm[k] - off[k]) < threshold
    if best is None:
        raise InsufficientPoints("all point triples are collinear")
    inl = np.flatnonzero(best)
    plane = fit_plane_least_squares(P[inl]) if len(inl) >= 3 else None
    if plane is None:
        raise InsufficientPoints("plane consensus set has fewer than 3 points")
    return plane, inl


def _lower_median(x):
    x = np.sort(np.asarray(x, dtype=float))
    return float(x[(len(x) - 1) // 2])


def resolve_scale(plane: PlanePatch, road_points, rig: CameraRig):
    """Scale ``H / median(Y)`` of the inlier road points projected onto the plane."""
    P = np.asarray(road_points, dtype=float).reshape(-1, 3)
    if P.shape[0] == 0:
        raise InsufficientPoints("no road points to fix the scale")
    on_plane = P - (P @ plane.normal - plane.offset)[:, None] * plane.normal
    med = _lower_median(on_plane[:, 1])
    if med <= 1e-6:
        raise NonPositiveMedian(f"median road height {med!r} is not below the camera")
    return rig.height / med


def metric_road_scale(points, rig: CameraRig, threshold=0.02, iterations=500, seed=0, ego_quantile=1.0):
    """Scale making the road under the camera lie at the camera height.

    Only the nearest ``ego_quantile`` of the road points (by depth) take part,
    since that is where the known height holds. ``threshold`` is metric and is
    converted with a first height-based scale guess. Returns ``(s, plane, inliers)``
    with the plane and inlier indices in pre-scale units.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(P) < 3:
        raise InsufficientPoints(f"too few road points to fix the scale ({len(P)})")
    near = np.flatnonzero(P[:, 2] <= np.quantile(P[:, 2], ego_quantile))
    if len(near) < 3:
        near = np.arange(len(P))
    med = float(np.median(P[near, 1]))
    if med <= 1e-9:
        raise NonPositiveMedian(f"median road height {med!r} is not below the camera")
    plane, inl = ransac_dominant_plane(P[near], threshold * med / rig.height, iterations, seed)
    return resolve_scale(plane, P[near[inl]], rig), plane, near[inl]


# --- third view --------------------------------------------------------------

def _reproj_error(R, t, X, x):
    Xc = X @ R.T + t
    z = np.where(Xc[:, 2] > DEPTH_EPS, Xc[:, 2], np.nan)
    return np.linalg.norm(Xc[:, :2] / z[:, None] - x, axis=1)


def refine_pose(R, t, X, pixels, intr: CameraIntrinsics, huber_px=2.0):
    """Reprojection LM over (R, t) with the package's solver."""
    from .residuals import ResidualBlock
    from .solver import Phase, Problem, SolverConfig, solve

    pb = Problem()
    pb.add_block("rotation", Rotation.from_matrix(R), kind="rotation", role="rotation")
    pb.add_block("translation", t, role="translation")
    pixels = np.asarray(pixels, dtype=float)

    def term(values):
        Rm = values["rotation"].as_matrix()
        RX = X @ Rm.T
        Xc = RX + values["translation"]
        z = Xc[:, 2]
        if np.any(z <= DEPTH_EPS):
            raise ValueError("point behind resected camera")
        px = np.column_stack([intr.fx * Xc[:, 0] / z + intr.cx, intr.fy * Xc[:, 1] / z + intr.cy])
        Jp = projection_jacobian(Xc, intr)
        Jr = -np.einsum("kij,kjl->kil", Jp, np.stack([skew(a) for a in RX]))
        return ResidualBlock("reprojection", (px - pixels).reshape(-1), huber_px, {
            "rotation": Jr.reshape(-1, 3), "translation": Jp.reshape(-1, 3)})

    pb.add_term(term)
    rep = solve(pb, SolverConfig(schedule=[Phase.of("resection", "rotation", "translation")]))
    return rep.values["rotation"], rep.values["translation"]


def resect(X, pixels, intr: CameraIntrinsics, threshold=4.0, iterations=200, seed=0):
    """Camera pose ``x ~ R X + t`` from 3D-2D pairs: PnP RANSAC, then reprojection LM on the consensus set."""
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    n = len(X)
    if n < 6:
        raise ResectionFailure(f"resection needs at least 6 correspondences, got {n}")
    cv2.setRNGSeed(int(seed))
    ok, rvec, tvec, inl = cv2.solvePnPRansac(X, pixels, intr.matrix(), None, iterationsCount=iterations,
                                             reprojectionError=threshold, confidence=0.999,
                                             flags=cv2.SOLVEPNP_SQPNP)
    count = 0 if inl is None else len(inl)
    if not ok or count < max(6, 0.5 * n):
        raise ResectionFailure(f"resection inlier ratio {count}/{n} is below 50%")
    inl = np.sort(inl.ravel())
    R = Rotation.from_rotvec(rvec.ravel()).as_matrix()
    R, t = refine_pose(R, tvec.ravel(), X[inl], pixels[inl], intr)
    with np.errstate(invalid="ignore"):
        err = _reproj_error(R.as_matrix(), t, X, intr.normalize(pixels)) * intr.fx
    best = np.flatnonzero(err < threshold)
    if len(best) < max(6, 0.5 * n):
        raise ResectionFailure(f"refined resection keeps {len(best)}/{n} inliers, below 50%")
    return R, t, best


def _huber_cost(r, delta):
    a = np.abs(r)
    return float(np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta)).sum())


def refine_three_view(points, pixels, fixed_poses, R, t, intr: CameraIntrinsics, huber_px=2.0, iterations=50):
    """Joint reprojection LM over the last camera and the points, earlier cameras held fixed.

    ``pixels`` holds one ``(N, 2)`` array per view, the free view last; the
    free camera is ``x ~ R X + t``. The camera/point coupling is eliminated
    with a Schur complement, so each step costs O(N).
    """
    X = np.array(points, dtype=float).reshape(-1, 3)
    obs = [np.asarray(p, dtype=float).reshape(-1, 2) for p in pixels]
    fixed = [(_as_matrix(Rf), np.asarray(tf, dtype=float)) for Rf, tf in fixed_poses]
    R = Rotation.from_matrix(_as_matrix(R))
    t = np.asarray(t, dtype=float).copy()
    f = np.array([intr.fx, intr.fy])
    c = np.array([intr.cx, intr.cy])

    def project(Rm, tv, P):
        Q = P @ Rm.T + tv
        return Q, f * Q[:, :2] / Q[:, 2:3] + c

    def residuals(Rc, tc, P):
        out = []
        for (Rm, tv), x in zip(fixed + [(Rc.as_matrix(), tc)], obs):
            Q, px = project(Rm, tv, P)
            if np.any(Q[:, 2] <= DEPTH_EPS):
                return None
            out.append(px - x)
        return out

    def cost(res):
        return np.inf if res is None else sum(_huber_cost(r, huber_px) for r in res)

    res = residuals(R, t, X)
    if res is None:
        return R, t, X
    E = cost(res)
    mu = 1e-4
    for _ in range(iterations):
        Hpp = np.zeros((len(X), 3, 3))
        gp = np.zeros((len(X), 3))
        views = fixed + [(R.as_matrix(), t)]
        for k, ((Rm, tv), r) in enumerate(zip(views, res)):
            Q = X @ Rm.T + tv
            Jp = projection_jacobian(Q, intr)
            a = np.abs(r)
            w = np.where(a <= huber_px, 1.0, huber_px / np.maximum(a, 1e-300))  # IRLS weights per row
            JX = Jp @ Rm
            wJX = w[:, :, None] * JX
            Hpp += np.einsum("kri,krj->kij", JX, wJX)
            gp += np.einsum("kri,kr->ki", wJX, r)
            if k == len(views) - 1:
                Jrot = -np.einsum("kij,kjl->kil", Jp, np.stack([skew(q) for q in X @ Rm.T]))
                Jc = np.concatenate([Jrot, Jp], axis=2)  # (N, 2, 6)
                wJc = w[:, :, None] * Jc
                Hcc = np.einsum("kri,krj->ij", Jc, wJc)
                gc = np.einsum("kri,kr->i", wJc, r)
                Hcp = np.einsum("kri,krj->kij", wJc, JX)  # (N, 6, 3)
        while True:
            Dp = Hpp + mu * np.einsum("kii->ki", Hpp)[:, :, None] * np.eye(3)
            Dinv = np.linalg.inv(Dp)
            S = Hcc + mu * np.diag(np.diag(Hcc)) - np.einsum("kij,kjl,kml->im", Hcp, Dinv, Hcp)
            rhs = -gc + np.einsum("kij,kjl,kl->i", Hcp, Dinv, gp)
            try:
                dc = np.linalg.solve(S, rhs)
            except np.linalg.LinAlgError:
                dc = None
            if dc is not None:
                dX = -np.einsum("kij,kj->ki", Dinv, gp + np.einsum("kji,j->ki", Hcp, dc))
                R1, t1, X1 = R.perturb(dc[:3]), t + dc[3:], X + dX
                res1 = residuals(R1, t1, X1)
                E1 = cost(res1)
                if E1 < E:
                    break
            mu *= 10.0
            if mu > 1e10:
                return R, t, X
        rel = (E - E1) / max(E, 1e-300)
        R, t, X, res, E = R1, t1, X1, res1, E1
        mu = max(mu * 0.1, 1e-12)
        if rel < 1e-10:
            break
    return R, t, X


def add_third_view(corr23: CorrespondenceSet, recon: Reconstruction, intr: CameraIntrinsics, link_tol=0.5, seed=0):
    """Resect the third camera from propagated matches and triangulate the new f2-f3 matches."""
    f2, f3 = corr23.frames
    if f2 not in recon.poses:
        raise ResectionFailure(f"frame {f2!r} is not part of the reconstruction")
    if len(recon) == 0 or len(corr23) == 0:
        raise ResectionFailure("nothing to link between the reconstruction and the third view")
    tree = cKDTree(recon.pixels_b)
    dist, near = tree.query(corr23.points_a, k=1)
    linked = dist <= link_tol
    if linked.sum() < 6:
        raise ResectionFailure(f"only {int(linked.sum())} matches link to triangulated points")
    lk = np.flatnonzero(linked)
    R3, t3, inl = resect(recon.points[near[lk]], corr23.points_b[lk], intr, seed=seed)
    # the linked points were triangulated from the first baseline alone; refining
    # them with the new camera removes the depth bias they pass on to its position
    R2, t2 = recon.poses[f2]
    f1 = next(k for k in recon.poses if k != f2)
    idx = near[lk[inl]]
    R3, t3, Xr = refine_three_view(recon.points[idx], [recon.pixels_a[idx], recon.pixels_b[idx], corr23.points_b[lk[inl]]],
                                   [recon.poses[f1], (R2, t2)], R3, t3, intr)
    refined = recon.points.copy()
    refined[idx] = Xr
    new = np.flatnonzero(~linked)
    X, keep = triangulate_views(intr.normalize(corr23.points_a[new]) if len(new) else np.zeros((0, 2)),
                                intr.normalize(corr23.points_b[new]) if len(new) else np.zeros((0, 2)),
                                (R2, t2), (R3, t3))
    new = new[keep]
    X = X[keep]
    # frame-a pixels of the new points, for bbox-based selection
    pa = X[:, :2] / X[:, 2:3] if len(X) else np.zeros((0, 2))
    ok = X[:, 2] > DEPTH_EPS if len(X) else np.zeros(0, dtype=bool)
    X, new, pa = X[ok], new[ok], pa[ok]
    pa = np.column_stack([intr.fx * pa[:, 0] + intr.cx, intr.fy * pa[:, 1] + intr.cy]) if len(pa) else pa
    poses = dict(recon.poses)
    poses[f3] = (R3, np.asarray(t3, dtype=float))
    return Reconstruction(
        np.vstack([refined, X]) if len(X) else refined,
        np.vstack([recon.pixels_a, pa]) if len(X) else recon.pixels_a,
        np.vstack([recon.pixels_b, corr23.points_a[new]]) if len(X) else recon.pixels_b,
        recon.labels + tuple(corr23.labels[i] for i in new),
        poses,
    )


# --- file format -------------------------------------------------------------

def dumps_correspondences(corr: CorrespondenceSet) -> str:
    lines = [f"# {CORR_FORMAT} {CORR_VERSION}", f"frames {corr.frames[0]} {corr.frames[1]}",
             f"count {len(corr)}", "# u_a v_a u_b v_b label"]
    for (ua, va), (ub, vb), lab in zip(corr.points_a, corr.points_b, corr.labels):
        lines.append(f"{float(ua)!r} {float(va)!r} {float(ub)!r} {float(vb)!r} {lab}")
    return "\n".join(lines) + "\n"


def loads_correspondences(text: str, path=None) -> CorrespondenceSet:
    lines = text.splitlines()
    if not lines or lines[0].split()[1:2] != [CORR_FORMAT]:
        raise FormatError(f"missing '# {CORR_FORMAT} <version>' header", path, 1)
    try:
        version = int(lines[0].split()[2])
    except (IndexError, ValueError):
        raise FormatError("unreadable format version", path, 1) from None
    if version != CORR_VERSION:
        raise FormatError(f"unsupported version {version}", path, 1)
    frames, count, rows = None, None, []
    for no, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        if tok[0] == "frames":
            if len(tok) != 3:
                raise FormatError("expected 'frames <a> <b>'", path, no)
            frames = (tok[1], tok[2])
        elif tok[0] == "count":
            try:
                count = int(tok[1])
            except (IndexError, ValueError):
                raise FormatError("expected 'count <n>'", path, no) from None
        else:
            if len(tok) != 5:
                raise FormatError(f"expected 5 fields, got {len(tok)}", path, no)
            try:
                vals = [float(v) for v in tok[:4]]
            except ValueError:
                raise FormatError("non-numeric pixel coordinate", path, no) from None
            if tok[4] not in LABELS:
                raise FormatError(f"unknown label {tok[4]!r}", path, no)
            rows.append((vals, tok[4]))
    if frames is None:
        raise FormatError("missing 'frames' line", path, len(lines))
    if count is not None and count != len(rows):
        raise FormatError(f"count says {count} rows, found {len(rows)}", path, len(lines))
    pts = np.array([r[0] for r in rows], dtype=float).reshape(-1, 4)
    return CorrespondenceSet(pts[:, :2], pts[:, 2:], tuple(r[1] for r in rows), frames)


def save_correspondences(corr, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps_correspondences(corr))


def load_correspondences(path) -> CorrespondenceSet:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise FormatError(f"cannot read correspondences: {e.strerror}", path) from None
    return loads_correspondences(text, path)
