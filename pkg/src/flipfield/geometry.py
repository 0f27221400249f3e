"""Camera pose algebra: sphere fitting, mirror reflection, sphere projection,
look-at rotations, and the flipped-pose estimation pipeline built from them.

Conventions: world-from-camera poses, camera looks along its local -z axis,
world up is +z. All arrays are float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateConfiguration,
    DegenerateLookAt,
    FewerThanFourPoints,
    GeometryError,
    NoIntersection,
    OriginInput,
)

WORLD_UP = np.array([0.0, 0.0, 1.0])

_ORTHONORMAL_TOL = 1e-9
_RANK_RATIO_TOL = 1e-6
_LOOKAT_HARD_TOL = 1e-9
_SMALL_ANGLE = 1e-6


def _as_vec3(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=float)
    if v.shape != (3,):
        raise GeometryError(f"{name} must have shape (3,), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise GeometryError(f"{name} has non-finite entries")
    return v


@dataclass(frozen=True)
class Pose:
    """Rigid camera pose: world-from-camera rotation and camera center."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        t = _as_vec3(self.translation, "translation")
        if r.shape != (3, 3):
            raise GeometryError(f"rotation must be 3x3, got {r.shape}")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-6:
            raise GeometryError("rotation is not orthonormal")
        if np.linalg.det(r) < 0.0:
            raise GeometryError("rotation has negative determinant (improper)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise GeometryError(f"pose matrix must be 4x4, got {m.shape}")
        return cls(m[:3, :3].copy(), m[:3, 3].copy())

    def view_direction(self) -> np.ndarray:
        """Unit vector the camera looks along (-z column of the rotation)."""
        return -self.rotation[:, 2]


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        c = _as_vec3(self.center, "center")
        object.__setattr__(self, "center", c)
        if not (self.radius > 0.0):
            raise DegenerateConfiguration(f"sphere radius must be positive, got {self.radius}")


@dataclass(frozen=True)
class Plane:
    """Plane {x : normal . x = offset} with unit normal."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = _as_vec3(self.normal, "normal")
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            raise DegenerateConfiguration("plane normal has zero length")
        object.__setattr__(self, "normal", n / norm)
        object.__setattr__(self, "offset", float(self.offset) / norm)

    @classmethod
    def through_point(cls, normal, point) -> "Plane":
        n = _as_vec3(normal, "normal")
        p = _as_vec3(point, "point")
        return cls(n, float(n @ p))


def fit_sphere(points) -> Sphere:
    """Least-squares sphere through >= 4 points.

    Linearized fit: ||p||^2 = 2 p . c + (r^2 - ||c||^2), solved with lstsq.
    Coplanar inputs (rank-deficient design) fall back to the circumscribed
    circle of the point set inside its best-fit plane.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise GeometryError(f"points must have shape (n, 3), got {pts.shape}")
    if pts.shape[0] < 4:
        raise FewerThanFourPoints(f"sphere fit needs at least 4 points, got {pts.shape[0]}")
    if not np.all(np.isfinite(pts)):
        raise GeometryError("points contain non-finite values")

    design = np.column_stack([2.0 * pts, np.ones(len(pts))])
    rhs = np.einsum("ij,ij->i", pts, pts)
    sv = np.linalg.svd(design, compute_uv=False)
    if sv[-1] < _RANK_RATIO_TOL * sv[0]:
        return _fit_circle_coplanar(pts)
    sol, *_ = np.linalg.lstsq(design, rhs, rcond=None)
    center = sol[:3]
    r_sq = sol[3] + center @ center
    if r_sq <= 0.0:
        raise DegenerateConfiguration("sphere fit produced nonpositive squared radius")
    return Sphere(center, float(np.sqrt(r_sq)))


def _fit_circle_coplanar(pts: np.ndarray) -> Sphere:
    # Coplanar camera rigs (a single ring) have no unique sphere; use the
    # in-plane circle so projection keeps the cameras where they are.
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    if sv[0] < 1e-12 or sv[1] < _RANK_RATIO_TOL * sv[0]:
        raise DegenerateConfiguration("points are collinear or coincident; no circle fit")
    e1, e2 = vt[0], vt[1]
    q = centered @ np.column_stack([e1, e2])
    design = np.column_stack([2.0 * q, np.ones(len(q))])
    rhs = np.einsum("ij,ij->i", q, q)
    sol, *_ = np.linalg.lstsq(design, rhs, rcond=None)
    a, b = sol[0], sol[1]
    r_sq = sol[2] + a * a + b * b
    if r_sq <= 0.0:
        raise DegenerateConfiguration("circle fit produced nonpositive squared radius")
    center = centroid + a * e1 + b * e2
    return Sphere(center, float(np.sqrt(r_sq)))


def reflect_across_plane(point, plane: Plane) -> np.ndarray:
    """Mirror image p - 2 (n.p - d) n for unit normal n, offset d."""
    p = np.asarray(point, dtype=float)
    n = plane.normal
    signed = p @ n - plane.offset
    return p - 2.0 * np.multiply.outer(signed, n)


def project_onto_sphere(point, sphere: Sphere) -> np.ndarray:
    """Intersection of the ray {a*p : a > 0} from the world origin with the
    sphere surface, choosing the hit nearest to p. Raises NoIntersection when
    the open ray misses, OriginInput for p at the origin."""
    p = _as_vec3(point, "point")
    pp = p @ p
    if pp < 1e-24:
        raise OriginInput("cannot project the world origin onto a sphere")
    c = sphere.center
    # ||a p - c||^2 = r^2  =>  pp a^2 - 2 (p.c) a + (c.c - r^2) = 0
    pc = p @ c
    disc = pc * pc - pp * (c @ c - sphere.radius**2)
    if disc < 0.0:
        raise NoIntersection("ray from origin does not reach the sphere")
    root = np.sqrt(disc)
    alphas = np.array([(pc - root) / pp, (pc + root) / pp])
    alphas = alphas[alphas > 0.0]
    if alphas.size == 0:
        raise NoIntersection("sphere lies entirely behind the origin along this direction")
    best = alphas[np.argmin(np.abs(alphas - 1.0))]
    return best * p


def look_at_rotation(camera, target, up=WORLD_UP) -> np.ndarray:
    """World-from-camera rotation for a camera at `camera` looking at `target`.

    z = (camera - target)/|.|, x = (up x z)/|.|, y = z x x, columns [x y z].
    """
    c = _as_vec3(camera, "camera")
    t = _as_vec3(target, "target")
    u = _as_vec3(up, "up")
    z = c - t
    nz = np.linalg.norm(z)
    if nz < _LOOKAT_HARD_TOL:
        raise DegenerateLookAt("camera coincides with the look-at target")
    z = z / nz
    x = np.cross(u, z)
    nx = np.linalg.norm(x)
    if nx < _LOOKAT_HARD_TOL:
        raise DegenerateLookAt("viewing direction is parallel to the up vector")
    x = x / nx
    y = np.cross(z, x)
    return np.column_stack([x, y, z])


def default_symmetry_plane(poses, sphere: Sphere) -> Plane:
    """Vertical plane through the sphere center, spanned by world-up and the
    horizontal component of the mean viewing direction."""
    dirs = np.array([p.view_direction() for p in poses])
    mean_dir = dirs.mean(axis=0)
    horiz = mean_dir.copy()
    horiz[2] = 0.0
    nh = np.linalg.norm(horiz)
    if nh < 1e-9:
        raise DegenerateConfiguration(
            "mean viewing direction is vertical; supply the symmetry plane explicitly"
        )
    normal = np.cross(WORLD_UP, horiz / nh)
    return Plane.through_point(normal, sphere.center)


def estimate_flipped_poses(poses, plane: Plane | None = None, sphere: Sphere | None = None):
    """Poses observed by the horizontally mirrored images.

    Pipeline per camera: reflect the center across the symmetry plane, project
    back onto the fitted camera sphere, re-aim at the sphere center with a
    world-up look-at. Sphere and plane are fitted from the inputs when not
    supplied.
    """
    poses = list(poses)
    if len(poses) < 4 and sphere is None:
        raise FewerThanFourPoints(
            f"need at least 4 poses to fit the camera sphere, got {len(poses)}"
        )
    if sphere is None:
        sphere = fit_sphere(np.array([p.translation for p in poses]))
    if plane is None:
        plane = default_symmetry_plane(poses, sphere)

    flipped = []
    for idx, pose in enumerate(poses):
        try:
            mirrored = reflect_across_plane(pose.translation, plane)
            center = project_onto_sphere(mirrored, sphere)
            rot = look_at_rotation(center, sphere.center, WORLD_UP)
        except GeometryError as exc:
            raise type(exc)(f"pose {idx}: {exc}") from exc
        flipped.append(Pose(rot, center))
    return flipped


def _skew(w: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


def se3_exp(twist) -> tuple[np.ndarray, np.ndarray]:
    """Exponential of a twist (w, v) -> (R, t) via Rodrigues plus the V matrix.

    Below |w| = 1e-6 the trig coefficients switch to their series expansions.
    """
    xi = np.asarray(twist, dtype=float)
    if xi.shape != (6,):
        raise GeometryError(f"twist must have shape (6,), got {xi.shape}")
    w, v = xi[:3], xi[3:]
    theta = np.linalg.norm(w)
    k = _skew(w)
    k2 = k @ k
    if theta < _SMALL_ANGLE:
        rot = np.eye(3) + k + 0.5 * k2
        vmat = np.eye(3) + 0.5 * k + k2 / 6.0
    else:
        t2 = theta * theta
        rot = np.eye(3) + (np.sin(theta) / theta) * k + ((1.0 - np.cos(theta)) / t2) * k2
        vmat = (
            np.eye(3)
            + ((1.0 - np.cos(theta)) / t2) * k
            + ((theta - np.sin(theta)) / (t2 * theta)) * k2
        )
    return rot, vmat @ v


def se3_apply_twist(pose: Pose, twist) -> Pose:
    """Left-multiplicative pose update exp(twist) o pose."""
    rot, trans = se3_exp(twist)
    return Pose(rot @ pose.rotation, rot @ pose.translation + trans)


def rotation_angle_between(ra, rb) -> float:
    """Geodesic angle (radians) between two rotation matrices."""
    ra = np.asarray(ra, dtype=float)
    rb = np.asarray(rb, dtype=float)
    cos = (np.trace(ra @ rb.T) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))
