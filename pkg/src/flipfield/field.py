"""Dense voxel radiance field: raw grids for density, color, and variance with
trilinear interpolation and closed-form activations.

Raw storage is one (Nx, Ny, Nz, 5) array, channels ordered
[sigma_raw, color_raw_r, color_raw_g, color_raw_b, beta_raw], so a batched
query gathers all channels in one pass. Activations: density softplus, color
sigmoid, variance beta_min^2 + softplus. Queries outside the bounds return
empty space (density 0, black, floor variance). The direction argument is
accepted for interface parity but ignored: the grid is view-independent.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import CheckpointError, FlipFieldError

CHECKPOINT_FORMAT = "flipfield-field-checkpoint"
CHECKPOINT_VERSION = 1
RAW_CHANNELS = ("sigma_raw", "color_raw_r", "color_raw_g", "color_raw_b", "beta_raw")

sigmoid = expit


def softplus(x):
    """log(1 + e^x), overflow-safe."""
    return np.logaddexp(0.0, x)


@dataclass
class FieldParams:
    """Voxel grid over an axis-aligned box.

    Node (i, j, k) sits at bounds_min + (i, j, k) * cell with the nodes
    spanning the bounds inclusively, so a query at a node reproduces that
    node's stored raws.
    """

    resolution: tuple
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    raw: np.ndarray

    def __post_init__(self):
        self.resolution = tuple(int(n) for n in self.resolution)
        if len(self.resolution) != 3 or any(n < 2 for n in self.resolution):
            raise FlipFieldError(f"resolution must be three sizes >= 2, got {self.resolution}")
        self.bounds_min = np.asarray(self.bounds_min, dtype=float)
        self.bounds_max = np.asarray(self.bounds_max, dtype=float)
        if self.bounds_min.shape != (3,) or self.bounds_max.shape != (3,):
            raise FlipFieldError("bounds must be 3-vectors")
        if not np.all(self.bounds_min < self.bounds_max):
            raise FlipFieldError("bounds_min must be strictly below bounds_max componentwise")
        self.raw = np.asarray(self.raw, dtype=float)
        expected = (*self.resolution, 5)
        if self.raw.shape != expected:
            raise FlipFieldError(f"raw grid must have shape {expected}, got {self.raw.shape}")
        if not np.all(np.isfinite(self.raw)):
            raise FlipFieldError("raw grid contains non-finite values")

    @classmethod
    def create(
        cls,
        resolution=(64, 64, 64),
        bounds_min=(-1.0, -1.0, -1.0),
        bounds_max=(1.0, 1.0, 1.0),
        sigma_raw=0.0,
        color_raw=0.0,
        beta_raw=0.0,
    ) -> "FieldParams":
        raw = np.empty((*resolution, 5), dtype=float)
        raw[..., 0] = sigma_raw
        raw[..., 1:4] = color_raw
        raw[..., 4] = beta_raw
        return cls(tuple(resolution), np.asarray(bounds_min, float),
                   np.asarray(bounds_max, float), raw)

    @property
    def sigma_raw(self) -> np.ndarray:
        return self.raw[..., 0]

    @property
    def color_raw(self) -> np.ndarray:
        return self.raw[..., 1:4]

    @property
    def beta_raw(self) -> np.ndarray:
        return self.raw[..., 4]

    @property
    def n_params(self) -> int:
        return int(np.prod(self.resolution)) * 5


@dataclass(frozen=True)
class FieldSample:
    color: np.ndarray
    density: float
    variance: float


@dataclass
class QueryCache:
    """Forward-pass byproducts needed by the backward pass."""

    n_points: int
    inside_idx: np.ndarray
    corners: np.ndarray
    weights: np.ndarray
    axis_weights: tuple
    raw8: np.ndarray
    act_sigma: np.ndarray
    act_color: np.ndarray
    act_beta: np.ndarray
    inv_cell: np.ndarray


def _corner_offsets(resolution) -> np.ndarray:
    ny, nz = resolution[1], resolution[2]
    off = []
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                off.append((dx * ny + dy) * nz + dz)
    return np.array(off, dtype=np.int64)


def _empty_cache(m: int) -> QueryCache:
    e = np.empty(0)
    return QueryCache(m, np.empty(0, np.int64), np.empty((0, 8), np.int64), np.empty((0, 8)),
                      (np.empty((0, 2)),) * 3, np.empty((0, 8, 5)), e, np.empty((0, 3)), e,
                      np.ones(3))


def query_batch(params: FieldParams, pts: np.ndarray, beta_min_sq: float):
    """Interpolate and activate the grid at pts (M, 3).

    Returns (sigma (M,), color (M,3), beta2 (M,), cache). Points outside the
    bounds get the empty-space values and contribute nothing to gradients.
    """
    pts = np.asarray(pts, dtype=float)
    m = pts.shape[0]
    res = np.array(params.resolution)
    span = params.bounds_max - params.bounds_min

    sigma = np.zeros(m)
    color = np.zeros((m, 3))
    beta2 = np.full(m, float(beta_min_sq))

    inside = np.all((pts >= params.bounds_min) & (pts <= params.bounds_max), axis=1)
    idx = np.nonzero(inside)[0]
    if idx.size == 0:
        return sigma, color, beta2, _empty_cache(m)

    u = (pts[idx] - params.bounds_min) / span * (res - 1)
    i0 = np.clip(np.floor(u).astype(np.int64), 0, res - 2)
    frac = u - i0

    wx = np.stack([1.0 - frac[:, 0], frac[:, 0]], axis=1)
    wy = np.stack([1.0 - frac[:, 1], frac[:, 1]], axis=1)
    wz = np.stack([1.0 - frac[:, 2], frac[:, 2]], axis=1)
    weights = (wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]).reshape(-1, 8)

    base = (i0[:, 0] * res[1] + i0[:, 1]) * res[2] + i0[:, 2]
    corners = base[:, None] + _corner_offsets(params.resolution)[None, :]
    raw8 = params.raw.reshape(-1, 5)[corners]
    interp = np.einsum("mc,mck->mk", weights, raw8)

    act_sigma = expit(interp[:, 0])
    act_color = expit(interp[:, 1:4])
    act_beta = expit(interp[:, 4])
    sigma[idx] = softplus(interp[:, 0])
    color[idx] = act_color
    beta2[idx] = beta_min_sq + softplus(interp[:, 4])

    cache = QueryCache(m, idx, corners, weights, (wx, wy, wz), raw8,
                       act_sigma, act_color, act_beta, (res - 1) / span)
    return sigma, color, beta2, cache


def query_batch_grad(
    params: FieldParams,
    cache: QueryCache,
    d_sigma: np.ndarray,
    d_color: np.ndarray,
    d_beta2: np.ndarray,
    position_mask: np.ndarray | None = None,
):
    """Backward pass of query_batch.

    Returns (grad_raw with the grid's shape, d_pts). d_pts is None unless
    position_mask selects rays that need spatial gradients (pose chain).
    Fragments are reduced by bincount over flat voxel indices, a deterministic
    ordering, so runs are bit-reproducible.
    """
    n_voxels = int(np.prod(params.resolution))
    grad_flat = np.zeros((n_voxels, 5))
    d_pts = np.zeros((cache.n_points, 3)) if position_mask is not None else None
    idx = cache.inside_idx
    if idx.size == 0:
        return grad_flat.reshape(*params.resolution, 5), d_pts

    # activation chain: softplus' = sigmoid, sigmoid' = s(1-s)
    d_interp = np.empty((idx.size, 5))
    d_interp[:, 0] = d_sigma[idx] * cache.act_sigma
    d_interp[:, 1:4] = d_color[idx] * cache.act_color * (1.0 - cache.act_color)
    d_interp[:, 4] = d_beta2[idx] * cache.act_beta

    contrib = cache.weights[:, :, None] * d_interp[:, None, :]
    flat_corners = cache.corners.ravel()
    for k in range(5):
        grad_flat[:, k] = np.bincount(flat_corners, weights=contrib[:, :, k].ravel(),
                                      minlength=n_voxels)

    if position_mask is not None:
        sub = position_mask[idx]
        if np.any(sub):
            r8 = cache.raw8[sub].reshape(-1, 2, 2, 2, 5)
            wx, wy, wz = (w[sub] for w in cache.axis_weights)
            di = d_interp[sub]
            # d interp/d frac_a = sum over the other two axes of
            # (high - low along a) * joint weight of the other axes
            gfx = np.einsum("my,mz,myzk,mk->m", wy, wz, r8[:, 1] - r8[:, 0], di)
            gfy = np.einsum("mx,mz,mxzk,mk->m", wx, wz, r8[:, :, 1] - r8[:, :, 0], di)
            gfz = np.einsum("mx,my,mxyk,mk->m", wx, wy, r8[:, :, :, 1] - r8[:, :, :, 0], di)
            d_pts[idx[sub]] = np.stack([gfx, gfy, gfz], axis=1) * cache.inv_cell
    return grad_flat.reshape(*params.resolution, 5), d_pts


def field_query(params: FieldParams, x, d=None, beta_min_sq: float = 0.05) -> FieldSample:
    """Sample the field at one position. `d` is ignored (view-independent grid)."""
    sigma, color, beta2, _ = query_batch(params, np.asarray(x, float)[None, :], beta_min_sq)
    return FieldSample(color[0], float(sigma[0]), float(beta2[0]))


def field_query_grad(
    params: FieldParams,
    x,
    d=None,
    beta_min_sq: float = 0.05,
    d_color=(0.0, 0.0, 0.0),
    d_density: float = 0.0,
    d_variance: float = 0.0,
) -> dict:
    """Gradient of a scalar loss through one field_query.

    Returns {voxel index triple: length-5 raw gradient} covering the (at most
    eight) voxels with nonzero weight. Empty when the upstream is all zero.
    """
    d_color = np.asarray(d_color, float)
    if d_density == 0.0 and d_variance == 0.0 and not np.any(d_color):
        return {}
    _, _, _, cache = query_batch(params, np.asarray(x, float)[None, :], beta_min_sq)
    grad, _ = query_batch_grad(params, cache, np.array([d_density]), d_color[None, :],
                               np.array([d_variance]))
    out = {}
    if cache.inside_idx.size:
        res = params.resolution
        for c, w in zip(cache.corners[0], cache.weights[0]):
            if w == 0.0:
                continue
            i, rem = divmod(int(c), res[1] * res[2])
            j, k = divmod(rem, res[2])
            g = grad[i, j, k]
            if np.any(g):
                out[(i, j, k)] = g
    return out


def save_checkpoint(params: FieldParams, path) -> None:
    """Single-file dump: one JSON header line, then the raw grid as little-endian
    float64 C-order bytes. Avoids zip containers so identical states produce
    identical bytes."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "resolution": list(params.resolution),
        "bounds_min": params.bounds_min.tolist(),
        "bounds_max": params.bounds_max.tolist(),
        "dtype": "<f8",
        "channels": list(RAW_CHANNELS),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(params.raw, dtype="<f8").tobytes())


def load_checkpoint(path) -> FieldParams:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        header_line = fh.readline()
        body = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header in {path}") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"not a field checkpoint: {path}")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    resolution = tuple(header["resolution"])
    expected = int(np.prod(resolution)) * 5 * 8
    if len(body) != expected:
        raise CheckpointError(
            f"checkpoint payload has {len(body)} bytes, expected {expected}"
        )
    raw = np.frombuffer(body, dtype="<f8").reshape(*resolution, 5).copy()
    return FieldParams(resolution, np.array(header["bounds_min"]),
                       np.array(header["bounds_max"]), raw)
