"""Dataset plumbing: transforms-format loading and generation, the
eight-configuration ring protocol, horizontal image flips with intrinsics
adjustment, and analytic test scenes rendered by exact ray casting.

The transforms format is the common synthetic-capture layout: a JSON file with
a top-level `camera_angle_x` (radians) and a `frames` list of records holding
an extensionless relative `file_path` and a row-major 4x4 camera-to-world
`transform_matrix` (camera looks along its -z axis).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import renderer as renderer_mod
from .errors import (
    AlreadyFlipped,
    DataError,
    EmptySplit,
    ImageDecodeError,
    MalformedTransforms,
    MissingFile,
    WrongObservationCount,
)
from .geometry import Plane, Pose
from .renderer import CameraIntrinsics

CAMERA_RADIUS = 4.0  # loader rescales camera centers to this maximum radius
RING_COUNT = 16
SPLIT_FILES = (
    ("train", "transforms_train.json"),
    ("test", "transforms_test.json"),
    ("upper", "transforms_upper.json"),
)


@dataclass
class Observation:
    image: np.ndarray
    pose: Pose
    intr: CameraIntrinsics
    is_flipped: bool = False
    pose_trainable: bool = False

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=float)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataError(f"observation image must be HxWx3, got {self.image.shape}")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise DataError("observation image values must lie in [0, 1]")
        if self.pose_trainable and not self.is_flipped:
            raise DataError("only flipped observations may have trainable poses")

    @property
    def shape(self):
        return self.image.shape[:2]


@dataclass
class Dataset:
    splits: dict
    scene_scale: float = 1.0
    scene_offset: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))

    def split(self, name: str):
        views = self.splits.get(name, [])
        if not views:
            raise EmptySplit(f"split {name!r} is empty or absent")
        return views


@dataclass(frozen=True)
class DatasetConfig:
    n: int
    indices: tuple

    def __post_init__(self):
        if not 1 <= self.n <= 8:
            raise DataError(f"config index must be in [1, 8], got {self.n}")
        if len(self.indices) != 8:
            raise DataError("a config selects exactly 8 images")


def config_indices(n: int) -> tuple:
    """1-based ring indices of config n: 8 consecutive starting at 2n-1, mod 16."""
    if not 1 <= n <= 8:
        raise DataError(f"config index must be in [1, 8], got {n}")
    return tuple((2 * n - 2 + k) % RING_COUNT + 1 for k in range(8))


def make_configs(dataset: Dataset):
    """The eight ring configurations over a 16-view train split."""
    train = dataset.splits.get("train", [])
    if len(train) != RING_COUNT:
        raise WrongObservationCount(
            f"ring protocol needs exactly {RING_COUNT} train views, got {len(train)}"
        )
    return [DatasetConfig(n, config_indices(n)) for n in range(1, 9)]


def flip_observation(obs: Observation) -> Observation:
    """Horizontally mirrored copy: image columns reversed, principal point
    mirrored (cx' = W - cx under the half-pixel center convention, so the
    flipped ray bundle is the exact mirror of the original). The pose is kept
    as a placeholder for the geometric estimate."""
    if obs.is_flipped:
        raise AlreadyFlipped("observation is already flipped")
    intr = obs.intr
    flipped_intr = CameraIntrinsics(intr.width, intr.height, intr.focal,
                                    intr.width - intr.cx, intr.cy)
    return Observation(obs.image[:, ::-1].copy(), obs.pose, flipped_intr,
                       is_flipped=True, pose_trainable=True)


# ---------------------------------------------------------------------------
# transforms-format I/O


def _decode_image(path: Path) -> np.ndarray:
    if not path.exists():
        raise MissingFile(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode == "RGBA":
                arr = np.asarray(im, dtype=float) / 255.0
                rgb, alpha = arr[..., :3], arr[..., 3:4]
                return rgb * alpha + (1.0 - alpha)  # composite over white
            return np.asarray(im.convert("RGB"), dtype=float) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc


def _frame_pose(frame: dict, label: str) -> Pose:
    if "transform_matrix" not in frame:
        raise MalformedTransforms(f"{label} lacks transform_matrix")
    mat = np.asarray(frame["transform_matrix"], dtype=float)
    if mat.shape != (4, 4) or not np.all(np.isfinite(mat)):
        raise MalformedTransforms(f"{label} transform_matrix is not a finite 4x4 matrix")
    rot = mat[:3, :3]
    if abs(np.linalg.det(rot)) < 1e-9:
        raise MalformedTransforms(f"{label} transform_matrix is not invertible")
    # project to the nearest rotation; reject anything not plausibly rigid
    u, _, vt = np.linalg.svd(rot)
    proper = u @ vt
    if np.linalg.det(proper) < 0 or np.abs(proper - rot).max() > 1e-3:
        raise MalformedTransforms(f"{label} rotation part is not orthonormal")
    return Pose(proper, mat[:3, 3].copy())


def _load_split(root: Path, fname: str):
    tpath = root / fname
    try:
        payload = json.loads(tpath.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedTransforms(f"{tpath} is not valid JSON: {exc}") from exc
    if "camera_angle_x" not in payload:
        raise MalformedTransforms(f"{tpath} lacks camera_angle_x")
    if "frames" not in payload or not isinstance(payload["frames"], list):
        raise MalformedTransforms(f"{tpath} lacks a frames list")

    views = []
    for i, frame in enumerate(payload["frames"]):
        fp = frame.get("file_path")
        label = f"frame {i}" + (f" ({fp})" if fp else "")
        if fp is None:
            raise MalformedTransforms(f"{tpath}: {label} lacks file_path")
        pose = _frame_pose(frame, f"{tpath}: {label}")
        img_path = root / fp
        if img_path.suffix == "":
            img_path = img_path.with_suffix(".png")
        image = _decode_image(img_path)
        h, w = image.shape[:2]
        intr = CameraIntrinsics.from_angle_x(w, h, float(payload["camera_angle_x"]))
        views.append(Observation(image, pose, intr))
    if views:
        first = views[0].shape
        if any(v.shape != first for v in views):
            raise MalformedTransforms(f"{tpath}: images differ in size within the split")
    return views


def load_nerf_synthetic(path) -> Dataset:
    """Load a transforms-format dataset directory.

    Reads transforms_train/test/upper.json (any subset; a bare transforms.json
    counts as train). Camera centers are rescaled so the farthest sits at
    radius 4, putting the subject inside the field's default [-1,1]^3 box.
    """
    root = Path(path)
    if not root.is_dir():
        raise MissingFile(f"dataset directory not found: {root}")
    splits = {}
    for split, fname in SPLIT_FILES:
        if (root / fname).exists():
            splits[split] = _load_split(root, fname)
    if "train" not in splits and (root / "transforms.json").exists():
        splits["train"] = _load_split(root, "transforms.json")
    if not splits:
        raise MissingFile(f"no transforms file found under {root}")

    radii = [np.linalg.norm(v.pose.translation) for views in splits.values() for v in views]
    max_r = max(radii)
    scale = CAMERA_RADIUS / max_r if max_r > 0 else 1.0
    for views in splits.values():
        for v in views:
            v.pose = Pose(v.pose.rotation, v.pose.translation * scale)
    return Dataset(splits, scene_scale=scale)


def save_image_png(path, image: np.ndarray) -> None:
    """Quantize [0,1] floats to 8-bit RGB and write a PNG."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path)


def save_variance_png(path, variance: np.ndarray):
    """Affine-normalize a variance map to 8-bit grayscale.

    Returns (vmin, vmax) so the caller can record the normalization."""
    vmin = float(variance.min())
    vmax = float(variance.max())
    span = vmax - vmin
    norm = (variance - vmin) / span if span > 0 else np.zeros_like(variance)
    arr = np.clip(np.round(norm * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path)
    return vmin, vmax


# ---------------------------------------------------------------------------
# analytic oracle scenes


@dataclass(frozen=True)
class SphereSpec:
    center: tuple
    radius: float


@dataclass(frozen=True)
class BoxSpec:
    lo: tuple
    hi: tuple


@dataclass(frozen=True)
class SyntheticScene:
    name: str
    spheres: tuple
    boxes: tuple
    color_fn: object
    mirror_plane: Plane
    background: tuple = (1.0, 1.0, 1.0)
    mirror_symmetric: bool = True


_PALETTE = np.array([
    [0.86, 0.20, 0.15],
    [0.95, 0.83, 0.20],
    [0.16, 0.44, 0.80],
    [0.22, 0.68, 0.36],
])


def _bands(z: np.ndarray) -> np.ndarray:
    return np.sin(5.0 * z) > 0.0


def _checker_colors(pts: np.ndarray) -> np.ndarray:
    # every use of y is squared, so the palette is bitwise even in y
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    rho = np.sqrt(x * x + y * y)
    cphi = x / np.maximum(rho, 1e-12)
    stripes = cphi * (4.0 * cphi * cphi - 3.0) > 0.0  # sign of cos(3*azimuth)
    return _PALETTE[2 * stripes.astype(int) + _bands(z).astype(int)]


def _asym_colors(pts: np.ndarray) -> np.ndarray:
    # sin(3*azimuth) is odd in y: deliberately breaks the mirror symmetry
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    rho = np.sqrt(x * x + y * y)
    sphi = y / np.maximum(rho, 1e-12)
    stripes = sphi * (3.0 - 4.0 * sphi * sphi) > 0.0
    return _PALETTE[2 * stripes.astype(int) + _bands(z).astype(int)]


_XZ_PLANE = Plane(np.array([0.0, 1.0, 0.0]), 0.0)
_SHAPES = (
    (SphereSpec((0.0, 0.0, 0.12), 0.62),),
    (BoxSpec((-0.42, -0.42, -0.88), (0.42, 0.42, -0.46)),),
)
# stud boxes poke out of the sphere at distinct azimuths and heights, in
# y-mirrored pairs (or straddling / on the z axis), so the silhouette changes
# under any rotation about z
_STUD_BOXES = (
    BoxSpec((0.391, 0.307, -0.01), (0.651, 0.567, 0.25)),
    BoxSpec((0.391, -0.567, -0.01), (0.651, -0.307, 0.25)),
    BoxSpec((-0.577, 0.357, -0.36), (-0.357, 0.577, -0.14)),
    BoxSpec((-0.577, -0.577, -0.36), (-0.357, -0.357, -0.14)),
    BoxSpec((-0.84, -0.12, 0.22), (-0.56, 0.12, 0.46)),
    BoxSpec((-0.13, -0.13, 0.70), (0.13, 0.13, 0.94)),
)


def sphere_checker_scene() -> SyntheticScene:
    """Mirror-symmetric oracle: sphere + pedestal, palette even in azimuth."""
    return SyntheticScene("sphere-checker", *_SHAPES, _checker_colors, _XZ_PLANE)


def sphere_asym_scene() -> SyntheticScene:
    """Same geometry, azimuthally odd palette: the mirrored half is wrong."""
    return SyntheticScene("sphere-asym", *_SHAPES, _asym_colors, _XZ_PLANE,
                          mirror_symmetric=False)


def sphere_studs_scene() -> SyntheticScene:
    """Mirror-symmetric oracle with protruding studs.

    The near-spherical scenes leave camera orbit about the object weakly
    observable (an orbited view of a ball differs only by texture shift);
    the studs pin azimuth through silhouette and parallax, which conditions
    pose-refinement experiments.
    """
    return SyntheticScene("sphere-studs", _SHAPES[0],
                          _SHAPES[1] + _STUD_BOXES, _checker_colors, _XZ_PLANE)


SCENES = {"sphere-checker": sphere_checker_scene, "sphere-asym": sphere_asym_scene,
          "sphere-studs": sphere_studs_scene}


def _sphere_hits(origin, dirs, sphere: SphereSpec):
    oc = origin - np.asarray(sphere.center, float)
    b = 2.0 * dirs @ oc
    c = oc @ oc - sphere.radius**2
    disc = b * b - 4.0 * c
    t = np.full(len(dirs), np.inf)
    ok = disc >= 0.0
    root = np.sqrt(np.where(ok, disc, 0.0))
    t1 = (-b - root) / 2.0
    t2 = (-b + root) / 2.0
    near = np.where(t1 > 1e-6, t1, t2)
    t[ok & (near > 1e-6)] = near[ok & (near > 1e-6)]
    return t


def _box_hits(origin, dirs, box: BoxSpec):
    lo = np.asarray(box.lo, float)
    hi = np.asarray(box.hi, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_lo = (lo - origin) * inv
        t_hi = (hi - origin) * inv
    t_near = np.nanmax(np.minimum(t_lo, t_hi), axis=1)
    t_far = np.nanmin(np.maximum(t_lo, t_hi), axis=1)
    t = np.full(len(dirs), np.inf)
    hit = (t_far >= t_near) & (t_far > 1e-6)
    entry = np.where(t_near > 1e-6, t_near, t_far)
    t[hit & (entry > 1e-6)] = entry[hit & (entry > 1e-6)]
    return t


def synth_scene_render(scene: SyntheticScene, pose: Pose, intr: CameraIntrinsics) -> np.ndarray:
    """Exact ray-cast render: nearest primitive hit colored by the scene's
    palette function, background elsewhere."""
    us, vs = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    origin, dirs = renderer_mod.rays_for_pixels(pose, intr, us.ravel(), vs.ravel())
    t_best = np.full(len(dirs), np.inf)
    for sphere in scene.spheres:
        t_best = np.minimum(t_best, _sphere_hits(origin, dirs, sphere))
    for box in scene.boxes:
        t_best = np.minimum(t_best, _box_hits(origin, dirs, box))
    img = np.tile(np.asarray(scene.background, float), (len(dirs), 1))
    hit = np.isfinite(t_best)
    if np.any(hit):
        pts = origin + t_best[hit, None] * dirs[hit]
        img[hit] = scene.color_fn(pts)
    return img.reshape(intr.height, intr.width, 3)


# ---------------------------------------------------------------------------
# dataset generation


@dataclass(frozen=True)
class RingSpec:
    """16-camera orbit. The default start azimuth puts the first 8 positions
    (configuration 1) entirely on the y > 0 side of the oracle scenes' mirror
    plane, so their reflections land exactly on the opposite (test) arc."""
    count: int = RING_COUNT
    radius: float = CAMERA_RADIUS
    height: float = 0.0
    start_deg: float = 11.25
    # ground-truth views of the unobserved arc; 0 = exactly the test poses,
    # which is the closest "real image nearest each test view" a synthetic
    # generator can supply
    upper_offset_deg: float = 0.0


def _ring_pose(azimuth_deg: float, ring: RingSpec) -> Pose:
    from .geometry import look_at_rotation

    az = np.deg2rad(azimuth_deg)
    center = np.array([ring.radius * np.cos(az), ring.radius * np.sin(az), ring.height])
    return Pose(look_at_rotation(center, np.zeros(3), np.array([0.0, 0.0, 1.0])), center)


def ring_azimuths(ring: RingSpec = RingSpec()):
    step = 360.0 / ring.count
    return ring.start_deg + step * np.arange(ring.count)


def generate_synthetic_dataset(
    scene: SyntheticScene,
    out_dir,
    ring: RingSpec = RingSpec(),
    image_size: int = 64,
    camera_angle_x: float = 0.6911112070083618,
) -> Dataset:
    """Render and write a full ring dataset in the transforms format.

    Splits: `train` = the 16-view ring; `test` = the 8 views diametrically
    opposite the first configuration's inputs; `upper` = ground-truth views
    of the test arc (offset by `upper_offset_deg` when a distinct nearby arc
    is wanted), used by the upper-bound training mode. Returns the dataset
    as re-loaded from disk, so generation round-trips by construction.
    """
    out = Path(out_dir)
    intr = CameraIntrinsics.from_angle_x(image_size, image_size, camera_angle_x)
    az = ring_azimuths(ring)
    step = 360.0 / ring.count
    arcs = {
        "train": az,
        "test": az[ring.count // 2:] if ring.count >= 2 else az,
        "upper": az[ring.count // 2:] + ring.upper_offset_deg,
    }
    for split, azimuths in arcs.items():
        frames = []
        for i, a in enumerate(azimuths):
            pose = _ring_pose(a, ring)
            image = synth_scene_render(scene, pose, intr)
            rel = f"./{split}/r_{i}"
            save_image_png(out / f"{rel}.png", image)
            frames.append({"file_path": rel, "transform_matrix": pose.matrix().tolist()})
        payload = {"camera_angle_x": camera_angle_x, "frames": frames}
        (out / f"transforms_{split}.json").write_text(json.dumps(payload, indent=2))
    return load_nerf_synthetic(out)
