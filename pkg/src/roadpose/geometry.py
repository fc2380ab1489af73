"""Camera-frame geometry: rotations, pinhole projection and plane algebra.

Frame convention used everywhere: +X right, +Y down, +Z forward. Ground
normals are stored pointing up, i.e. with ``n . (0, 1, 0) <= 0``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration, NonPositiveDepth

DEPTH_EPS = 1e-6
UNIT_TOL = 1e-9
SINGULAR_GAP_TOL = 1e-9

E2 = np.array([0.0, 1.0, 0.0])
E2.setflags(write=False)


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def skew(v):
    """Cross-product matrix: ``skew(a) @ b == np.cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


class Rotation:
    """Unit quaternion ``(w, x, y, z)`` with left-multiplied axis-angle increments."""

    __slots__ = ("_q", "_m")

    def __init__(self, q):
        q = np.asarray(q, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("quaternion must be finite and non-zero")
        q = q / n
        if q[0] < 0.0:
            q = -q
        q.setflags(write=False)
        self._q = q
        self._m = None

    @classmethod
    def identity(cls):
        return cls([1.0, 0.0, 0.0, 0.0])

    @classmethod
    def from_rotvec(cls, v):
        v = np.asarray(v, dtype=float).reshape(3)
        theta = np.linalg.norm(v)
        if theta < 1e-12:
            # second-order accurate near zero
            return cls(np.concatenate([[1.0 - theta**2 / 8.0], 0.5 * v]))
        axis = v / theta
        return cls(np.concatenate([[np.cos(theta / 2)], np.sin(theta / 2) * axis]))

    @classmethod
    def from_axis_angle(cls, axis, angle):
        axis = np.asarray(axis, dtype=float)
        return cls.from_rotvec(axis / np.linalg.norm(axis) * angle)

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=float)
        tr = np.trace(m)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        return cls(q)

    @property
    def quaternion(self):
        return self._q

    def as_matrix(self):
        if self._m is None:
            w, x, y, z = self._q
            m = np.array([
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ])
            m.setflags(write=False)
            self._m = m
        return self._m

    def as_rotvec(self):
        w = np.clip(self._q[0], -1.0, 1.0)
        v = self._q[1:]
        s = np.linalg.norm(v)
        if s < 1e-12:
            return 2.0 * v
        return 2.0 * np.arctan2(s, w) * v / s

    def angle(self):
        return float(np.linalg.norm(self.as_rotvec()))

    def inverse(self):
        w, x, y, z = self._q
        return Rotation([w, -x, -y, -z])

    def __matmul__(self, other):
        if isinstance(other, Rotation):
            return Rotation(_quat_mul(self._q, other._q))
        return NotImplemented

    def apply(self, points):
        """Rotate a single 3-vector or an ``(N, 3)`` array."""
        return np.asarray(points) @ self.as_matrix().T

    def perturb(self, delta):
        """``exp(delta) * self`` -- the increment used by the optimizer."""
        return Rotation.from_rotvec(delta) @ self

    def __repr__(self):
        return f"Rotation(q={np.array2string(self._q, precision=6)})"


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def ray(self, pixel):
        """Direction (not normalised, z = 1) through a pixel."""
        u, v = pixel
        return np.array([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])

    def normalize(self, pixels):
        """Pixels ``(N, 2)`` -> normalized image coordinates ``(N, 2)``."""
        p = np.asarray(pixels, dtype=float)
        return np.column_stack([(p[:, 0] - self.cx) / self.fx, (p[:, 1] - self.cy) / self.fy])

    def shifted(self, du, dv):
        return CameraIntrinsics(self.fx, self.fy, self.cx + du, self.cy + dv)


@dataclass(frozen=True, eq=False)
class PlanePatch:
    """Plane ``n . X = d`` with unit normal ``n``."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = _frozen(self.normal).reshape(3)
        if abs(np.linalg.norm(n) - 1.0) >= UNIT_TOL:
            raise ValueError(f"plane normal must be unit length, got |n|={np.linalg.norm(n)!r}")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    @classmethod
    def from_unnormalized(cls, n, d):
        n = np.asarray(n, dtype=float)
        s = np.linalg.norm(n)
        return cls(n / s, d / s)

    def oriented(self):
        """Same plane with the normal flipped, if needed, to point up (``n_y <= 0``)."""
        if self.normal[1] > 0:
            return PlanePatch(-self.normal, -self.offset)
        return self

    def lifted(self, height):
        """Parallel plane ``height`` metres along the normal."""
        return PlanePatch(self.normal, self.offset + height)

    def tilt_deg(self):
        """Angle between the normal and straight up, in degrees."""
        return float(np.degrees(np.arccos(np.clip(-self.oriented().normal[1], -1.0, 1.0))))

    def __eq__(self, other):
        if not isinstance(other, PlanePatch):
            return NotImplemented
        return bool(np.array_equal(self.normal, other.normal) and self.offset == other.offset)

    def __repr__(self):
        return f"PlanePatch(normal={self.normal.tolist()}, offset={self.offset!r})"


def project(point, intr: CameraIntrinsics):
    X, Y, Z = np.asarray(point, dtype=float)
    if Z <= DEPTH_EPS:
        raise NonPositiveDepth(f"point depth {Z!r} is not in front of the camera")
    return np.array([intr.fx * X / Z + intr.cx, intr.fy * Y / Z + intr.cy])


def project_wireframe(points, intr: CameraIntrinsics):
    """Project ``(K, 3)`` camera-frame points to ``(K, 2)`` pixels, order preserved."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    Z = P[:, 2]
    bad = np.flatnonzero(Z <= DEPTH_EPS)
    if bad.size:
        i = int(bad[0])
        raise NonPositiveDepth(f"keypoint {i} has depth {Z[i]!r}", index=i)
    return np.column_stack([intr.fx * P[:, 0] / Z + intr.cx, intr.fy * P[:, 1] / Z + intr.cy])


def projection_jacobian(points, intr: CameraIntrinsics):
    """Per-point 2x3 Jacobians of the projection, shape ``(K, 2, 3)``."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    iz = 1.0 / P[:, 2]
    J = np.zeros((P.shape[0], 2, 3))
    J[:, 0, 0] = intr.fx * iz
    J[:, 0, 2] = -intr.fx * P[:, 0] * iz * iz
    J[:, 1, 1] = intr.fy * iz
    J[:, 1, 2] = -intr.fy * P[:, 1] * iz * iz
    return J


def unproject(pixel, depth, intr: CameraIntrinsics):
    return intr.ray(pixel) * depth


def signed_distance(plane: PlanePatch, point):
    return float(plane.normal @ np.asarray(point, dtype=float) - plane.offset)


def fit_plane_least_squares(points) -> PlanePatch:
    """Total-least-squares plane, normal oriented up."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if P.shape[0] < 3:
        raise DegenerateConfiguration("need at least 3 points to fit a plane")
    c = P.mean(axis=0)
    _, s, vt = np.linalg.svd(P - c, full_matrices=False)
    if s.size < 3 or s[1] - s[2] < SINGULAR_GAP_TOL:
        raise DegenerateConfiguration("points are collinear; plane normal is ambiguous")
    n = vt[2]
    if n[1] > 0:
        n = -n
    n = n / np.linalg.norm(n)
    return PlanePatch(n, float(n @ c))


def plane_through(p0, p1, p2):
    """Plane through three points, or None when they are collinear."""
    n = np.cross(np.asarray(p1) - p0, np.asarray(p2) - p0)
    s = np.linalg.norm(n)
    if s < 1e-12:
        return None
    n = n / s
    if n[1] > 0:
        n = -n
    return PlanePatch(n, float(n @ p0))


def frame_on_plane(normal, forward=(0.0, 0.0, 1.0)):
    """Rotation taking the canonical object axes onto a plane.

    Canonical down ``+Y`` maps to ``-normal`` and canonical forward ``+Z`` maps
    to the projection of ``forward`` onto the plane.
    """
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    f = np.asarray(forward, dtype=float)
    z = f - (f @ n) * n
    nz = np.linalg.norm(z)
    if nz < 1e-9:
        raise DegenerateConfiguration("forward direction is parallel to the plane normal")
    z = z / nz
    y = -n
    x = np.cross(y, z)
    return Rotation.from_matrix(np.column_stack([x, y, z]))


def angle_between(a, b):
    """Unsigned angle in radians between two vectors."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = np.cross(a, b)
    return float(np.arctan2(np.linalg.norm(c), a @ b))


def tangent_basis(n):
    """Deterministic orthonormal ``3 x 2`` basis of the plane orthogonal to ``n``."""
    n = np.asarray(n, dtype=float)
    a = np.zeros(3)
    a[int(np.argmin(np.abs(n)))] = 1.0
    b1 = np.cross(n, a)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(n, b1)
    return np.column_stack([b1, b2])


def sphere_retract(n, delta):
    """Move unit vector ``n`` along a geodesic by the tangent step ``delta`` (2,)."""
    n = np.asarray(n, dtype=float)
    v = tangent_basis(n) @ np.asarray(delta, dtype=float)
    a = np.linalg.norm(v)
    if a < 1e-15:
        return n / np.linalg.norm(n)
    out = np.cos(a) * n + np.sin(a) * (v / a)
    return out / np.linalg.norm(out)
