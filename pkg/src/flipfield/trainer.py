"""Joint optimization of the voxel field and the mirrored-view camera poses.

Five training modes share one loop:

- ``baseline``    squared-error photometric loss on the real input views.
- ``baseline_u``  photometric warmup, then a heteroscedastic negative
                  log-likelihood on every ray with the per-ray variance pinned
                  to the floor (the uncertainty head itself stays untrained).
- ``flip``        inputs plus horizontally mirrored copies with geometrically
                  estimated poses; everything photometric, mirrored poses
                  refined by gradient descent on twists.
- ``flip_u``      like ``flip``, but after warmup every ray scores under the
                  floor-normalized NLL: mirrored rays carry the field's
                  predicted variance while real rays stay pinned at the floor,
                  so unreliable mirrored evidence can be downweighted but
                  never outweigh the real views.
- ``upper``       inputs plus real views of the held-out arc; the reference
                  ceiling for what mirrored augmentation can recover.

NLL scores are normalized by 2 * beta_min^2: a floor-pinned ray then costs
exactly its squared color error plus a constant, so the loss scale is
continuous across the warmup boundary and the optimizer sees no step change.

Pose gradients use the left-multiplicative twist chain: a perturbation
exp(xi) o P transports every world-space sample rigidly, so dL/domega is the
sum of x cross dL/dx over that camera's samples and dL/dv is the plain sum.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field as dc_field, asdict
from pathlib import Path

import numpy as np

from .dataio import Dataset, config_indices, flip_observation
from .errors import (
    DataError,
    FlipFieldError,
    LengthMismatch,
    NonpositiveVariance,
    NumericFailure,
    UnknownMode,
)
from .field import FieldParams, query_batch, query_batch_grad, save_checkpoint
from .geometry import Pose, estimate_flipped_poses, se3_apply_twist, se3_exp
from .renderer import composite_batch, composite_batch_grad, sample_batch

MODES = ("baseline", "baseline_u", "flip", "flip_u", "upper")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

FIELD_INIT_SIGMA_RAW = -2.0  # start near-transparent so free space stays free
# the variance head starts at the floor, so the likelihood phase opens scoring
# every ray exactly like the photometric phase and variance rises only where
# residuals keep demanding it; a high start would suppress all mirrored
# supervision for the hundreds of iterations the head needs to descend
FIELD_INIT_BETA_RAW = -7.0


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "baseline"
    total_iters: int = 2500
    warmup_iters: int = 500
    rays_per_batch: int = 1024
    n_samples: int = 128
    lr_field: float = 0.1
    lr_pose: float = 1e-3
    reg_weight: float = 0.01
    # the floor doubles as the conflict threshold: rays whose squared
    # residual (3-channel sum) sits below it score exactly photometric, so
    # transient training error never downweights consistent supervision
    beta_min_sq: float = 0.05
    seed: int = 0
    resolution: tuple = (64, 64, 64)
    stratified: bool = True
    t_near: float = 2.0
    t_far: float = 6.0
    background: tuple = (1.0, 1.0, 1.0)
    variance_weighting: str = "squared"

    def __post_init__(self):
        if self.mode not in MODES:
            raise UnknownMode(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.total_iters < 1:
            raise FlipFieldError("total_iters must be >= 1")
        if not 0 <= self.warmup_iters <= self.total_iters:
            raise FlipFieldError("warmup_iters must lie in [0, total_iters]")
        if self.rays_per_batch < 1 or self.n_samples < 1:
            raise FlipFieldError("rays_per_batch and n_samples must be >= 1")
        if self.lr_field < 0 or self.lr_pose < 0 or self.reg_weight < 0:
            raise FlipFieldError("learning rates and reg_weight must be >= 0")
        if self.beta_min_sq <= 0:
            raise FlipFieldError("beta_min_sq must be > 0")
        if self.variance_weighting not in ("squared", "linear"):
            raise FlipFieldError(f"unknown variance weighting {self.variance_weighting!r}")
        if not 0 <= self.t_near < self.t_far:
            raise FlipFieldError("require 0 <= t_near < t_far")


@dataclass(frozen=True)
class LossBreakdown:
    """Batch-mean loss split by observation origin: real input rays, mirrored
    rays (photometric or NLL depending on phase), and the density penalty."""
    photometric_in: float
    flipped_term: float
    regularizer: float

    @property
    def total(self) -> float:
        return self.photometric_in + self.flipped_term + self.regularizer

    def as_dict(self):
        return {"photometric_in": self.photometric_in,
                "flipped_term": self.flipped_term,
                "regularizer": self.regularizer, "total": self.total}


# ---------------------------------------------------------------------------
# standalone per-ray losses (also the documented scoring rules)


def photometric_loss(target, rendered) -> np.ndarray:
    """Per-ray squared color error, summed over channels."""
    target = np.atleast_2d(np.asarray(target, float))
    rendered = np.atleast_2d(np.asarray(rendered, float))
    if target.shape != rendered.shape:
        raise LengthMismatch(f"shape mismatch {target.shape} vs {rendered.shape}")
    return ((rendered - target) ** 2).sum(axis=-1)


def uncertainty_loss(target, rendered, variance, sigma_samples=None,
                     reg_weight: float = 0.0) -> np.ndarray:
    """Per-ray heteroscedastic NLL with an optional density penalty.

    ||r||^2 / (2 b) + log(b) / 2 + (reg_weight / S) * sum_j sigma_j, where b is
    the composited ray variance and the penalty runs over the ray's S samples.
    """
    target = np.atleast_2d(np.asarray(target, float))
    rendered = np.atleast_2d(np.asarray(rendered, float))
    if target.shape != rendered.shape:
        raise LengthMismatch(f"shape mismatch {target.shape} vs {rendered.shape}")
    b = np.atleast_1d(np.asarray(variance, float))
    if np.any(b <= 0.0):
        raise NonpositiveVariance("ray variance must be positive for the NLL")
    nll = ((rendered - target) ** 2).sum(axis=-1) / (2.0 * b) + 0.5 * np.log(b)
    if sigma_samples is not None and reg_weight != 0.0:
        sig = np.atleast_2d(np.asarray(sigma_samples, float))
        nll = nll + reg_weight / sig.shape[-1] * sig.sum(axis=-1)
    return nll


# ---------------------------------------------------------------------------
# training state


@dataclass
class TrainState:
    params: FieldParams
    poses: list
    intrs: list
    images: np.ndarray          # (K, H, W, 3) stacked targets
    trainable: np.ndarray       # (K,) pose-trainable flags
    flipped: np.ndarray         # (K,) mirrored-observation flags
    iteration: int = 0
    m_field: np.ndarray = None
    v_field: np.ndarray = None
    m_twist: np.ndarray = None
    v_twist: np.ndarray = None
    loss_history: list = dc_field(default_factory=list)
    _perm: np.ndarray = dc_field(default=None, repr=False)
    _cursor: int = 0
    _rng: np.random.Generator = dc_field(default=None, repr=False)

    @property
    def n_obs(self) -> int:
        return len(self.poses)

    @property
    def twists(self):
        """Current twist coordinates, one per trainable pose. Updates fold
        straight into the stored poses, so these are anchored at zero."""
        return [np.zeros(6) for _ in range(int(self.trainable.sum()))]


def init_state(observations, config: TrainConfig) -> TrainState:
    obs = list(observations)
    if not obs:
        raise DataError("cannot train on an empty observation roster")
    shape = obs[0].shape
    if any(o.shape != shape for o in obs):
        raise DataError("all training observations must share one image size")
    params = FieldParams.create(resolution=config.resolution,
                                sigma_raw=FIELD_INIT_SIGMA_RAW,
                                beta_raw=FIELD_INIT_BETA_RAW)
    images = np.stack([o.image for o in obs])
    state = TrainState(
        params=params,
        poses=[o.pose for o in obs],
        intrs=[o.intr for o in obs],
        images=images,
        trainable=np.array([o.pose_trainable for o in obs]),
        flipped=np.array([o.is_flipped for o in obs]),
        m_field=np.zeros_like(params.raw),
        v_field=np.zeros_like(params.raw),
        m_twist=np.zeros((len(obs), 6)),
        v_twist=np.zeros((len(obs), 6)),
    )
    state._rng = np.random.Generator(np.random.Philox(key=config.seed))
    state._perm = state._rng.permutation(images.size // 3)
    return state


def _draw_batch(state: TrainState, n: int):
    """Next n pixels of the epoch permutation, reshuffling at exhaustion."""
    pool = state.images.size // 3
    chunks = []
    need = n
    while need > 0:
        if state._cursor >= pool:
            state._perm = state._rng.permutation(pool)
            state._cursor = 0
        take = min(need, pool - state._cursor)
        chunks.append(state._perm[state._cursor:state._cursor + take])
        state._cursor += take
        need -= take
    flat = np.concatenate(chunks)
    h, w = state.images.shape[1:3]
    return flat // (h * w), (flat % (h * w)) // w, flat % w  # obs, v, u


def _batch_rays(state: TrainState, obs_ids, us, vs):
    """World-space origins and unit directions, vectorized over mixed cameras."""
    focal = np.array([i.focal for i in state.intrs])[obs_ids]
    cx = np.array([i.cx for i in state.intrs])[obs_ids]
    cy = np.array([i.cy for i in state.intrs])[obs_ids]
    x = (us + 0.5 - cx) / focal
    y = -(vs + 0.5 - cy) / focal
    d_cam = np.stack([x, y, -np.ones_like(x)], axis=-1)
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    rots = np.stack([p.rotation for p in state.poses])[obs_ids]
    dirs = np.einsum("nij,nj->ni", rots, d_cam)
    origins = np.stack([p.translation for p in state.poses])[obs_ids]
    return origins, dirs


def _scoring_masks(config: TrainConfig, iteration: int, flipped_rays: np.ndarray):
    """(nll_mask, pinned_mask) for this iteration; other rays are photometric.

    In the uncertainty phase every active ray is scored by the negative
    log-likelihood, but only mirrored rays carry the field's predicted
    variance; rays from real images are pinned at the floor.  Pinning (rather
    than leaving real rays on the plain squared error) keeps the two ray
    families on the same precision scale, so mirrored evidence can only ever
    be downweighted relative to real evidence, never amplified above it.
    """
    phase2 = iteration >= config.warmup_iters
    all_rays = np.ones_like(flipped_rays, dtype=bool)
    none = np.zeros_like(flipped_rays, dtype=bool)
    if config.mode == "baseline_u" and phase2:
        return all_rays, all_rays
    if config.mode == "flip_u" and phase2:
        return all_rays, ~flipped_rays
    return none, none


def batch_loss(state: TrainState, config: TrainConfig, obs_ids, us, vs,
               iteration: int | None = None):
    """Loss and gradients for one pixel batch.

    Returns (LossBreakdown, field gradient with the grid's shape, twist
    gradients (K, 6)). Terms are means over the batch; each ray is scored by
    exactly one rule chosen by mode and phase.
    """
    if iteration is None:
        iteration = state.iteration
    obs_ids = np.asarray(obs_ids, dtype=np.int64)
    us = np.asarray(us, dtype=np.int64)
    vs = np.asarray(vs, dtype=np.int64)
    n = len(obs_ids)
    s_count = config.n_samples
    bg = np.asarray(config.background, float)

    origins, dirs = _batch_rays(state, obs_ids, us, vs)
    ray_ids = iteration * config.rays_per_batch + np.arange(n)
    t, delta = sample_batch(config.t_near, config.t_far, s_count,
                            config.stratified, config.seed, ray_ids)
    points = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]

    sigma_f, color_f, beta2_f, qcache = query_batch(
        state.params, points.reshape(-1, 3), config.beta_min_sq)
    sigma = sigma_f.reshape(n, s_count)
    color = color_f.reshape(n, s_count, 3)
    beta2 = beta2_f.reshape(n, s_count)

    core, variance, t_final, _, ccache = composite_batch(
        sigma, color, beta2, delta, config.variance_weighting)
    pixel = core + t_final[:, None] * bg
    target = state.images[obs_ids, vs, us]
    resid = pixel - target
    resid_sq = (resid ** 2).sum(axis=1)

    flipped_rays = state.flipped[obs_ids]
    nll_mask, pinned_mask = _scoring_masks(config, iteration, flipped_rays)
    photo_mask = ~nll_mask

    # the NLL variance is clamped at the floor so the log term stays bounded:
    # vacuum rays (or opacity spread thin, which drags the squared-weight
    # composite under the floor) score at exactly beta_min^2, leaving no
    # incentive to thin out density just to shrink the log term
    beta_eff = np.maximum(variance, config.beta_min_sq)
    beta_eff[pinned_mask] = config.beta_min_sq

    # NLL rays are scored as 2*beta_min^2 times the raw likelihood, which
    # calibrates the floor to the photometric rule: a floor-pinned ray costs
    # its squared error plus a constant and contributes the exact photometric
    # gradient, while a learned variance downweights its ray by
    # beta_min^2 / beta^2 < 1.  Per-ray minimizers are unchanged; without the
    # normalization the phase switch would rescale every gradient 50-fold,
    # which Adam's epsilon and stale moment estimates both turn into real
    # trajectory differences.
    scale = 2.0 * config.beta_min_sq
    ray_loss = np.empty(n)
    ray_loss[photo_mask] = resid_sq[photo_mask]
    ray_loss[nll_mask] = (resid_sq[nll_mask] / (2.0 * beta_eff[nll_mask])
                          + 0.5 * np.log(beta_eff[nll_mask])) * scale
    loss_in = ray_loss[~flipped_rays].sum() / n
    loss_flipped = ray_loss[flipped_rays].sum() / n
    reg = scale * config.reg_weight / s_count * sigma[nll_mask].sum() / n

    # upstream gradients, already divided by the batch size
    d_pixel = np.zeros((n, 3))
    d_pixel[photo_mask] = 2.0 * resid[photo_mask] / n
    d_beta_eff = np.zeros(n)
    if np.any(nll_mask):
        b = beta_eff[nll_mask]
        d_pixel[nll_mask] = scale * resid[nll_mask] / b[:, None] / n
        d_beta_eff[nll_mask] = (scale * (-resid_sq[nll_mask] / (2.0 * b * b)
                                         + 0.5 / b) / n)
    d_trans = d_pixel @ bg
    # below the clamp the loss is flat in the variance, which blocks the
    # log-shrinking incentive to thin density out, but it would also trap a
    # floor-level variance forever; a ray whose residual still exceeds the
    # floor (d_beta_eff < 0) therefore passes its upward pressure through the
    # clamp, so conflict can raise the variance from a floor start
    wants_up = d_beta_eff < 0.0
    d_variance = np.where(((variance > config.beta_min_sq) | wants_up)
                          & ~pinned_mask, d_beta_eff, 0.0)

    d_sigma, d_color_s, d_beta2, _ = composite_batch_grad(
        ccache, d_pixel, d_variance, d_trans)
    d_sigma = d_sigma + (scale * config.reg_weight / (s_count * n)) * nll_mask[:, None]

    trainable_rays = state.trainable[obs_ids]
    position_mask = None
    if np.any(trainable_rays):
        position_mask = np.repeat(trainable_rays, s_count)
    field_grad, d_pts = query_batch_grad(
        state.params, qcache, d_sigma.ravel(), d_color_s.reshape(-1, 3),
        d_beta2.ravel(), position_mask=position_mask)

    twist_grads = np.zeros((state.n_obs, 6))
    if d_pts is not None:
        g = d_pts.reshape(n, s_count, 3)
        moment = np.cross(points, g)   # d(omega x x)/domega chain: x cross g
        for k in np.unique(obs_ids[trainable_rays]):
            rows = obs_ids == k
            twist_grads[k, :3] = moment[rows].sum(axis=(0, 1))
            twist_grads[k, 3:] = g[rows].sum(axis=(0, 1))

    if not np.isfinite(field_grad).all() or not np.isfinite(twist_grads).all():
        raise NumericFailure("non-finite gradient", iteration=iteration)
    return (LossBreakdown(float(loss_in), float(loss_flipped), float(reg)),
            field_grad, twist_grads)


def _adam(grad, m, v, t, lr):
    m *= ADAM_BETA1
    m += (1.0 - ADAM_BETA1) * grad
    v *= ADAM_BETA2
    v += (1.0 - ADAM_BETA2) * grad * grad
    m_hat = m / (1.0 - ADAM_BETA1 ** t)
    v_hat = v / (1.0 - ADAM_BETA2 ** t)
    return -lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def apply_gradients(state: TrainState, config: TrainConfig, field_grad,
                    twist_grads) -> None:
    """One Adam step on the grid and on each trainable pose's twist.

    Twists are anchored at zero: the update exponentiates straight onto the
    pose, so the stored pose is always the current estimate.
    """
    t = state.iteration + 1
    step = _adam(field_grad, state.m_field, state.v_field, t, config.lr_field)
    state.params = FieldParams(state.params.resolution, state.params.bounds_min,
                               state.params.bounds_max, state.params.raw + step)
    for k in range(state.n_obs):
        if not state.trainable[k]:
            continue
        untouched = (not np.any(twist_grads[k])) and not np.any(state.m_twist[k])
        if untouched:
            continue  # bit-identical poses until the first real gradient
        delta = _adam(twist_grads[k], state.m_twist[k], state.v_twist[k], t,
                      config.lr_pose)
        state.poses[k] = se3_apply_twist(state.poses[k], delta)
    state.iteration += 1


def train_step(state: TrainState, config: TrainConfig) -> LossBreakdown:
    obs_ids, vs, us = _draw_batch(state, config.rays_per_batch)
    breakdown, field_grad, twist_grads = batch_loss(state, config, obs_ids, us, vs)
    apply_gradients(state, config, field_grad, twist_grads)
    state.loss_history.append(breakdown)
    return breakdown


# ---------------------------------------------------------------------------
# full schedules


def _perturb_rotation(pose: Pose, angle_deg: float, rng) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    rot, _ = se3_exp(np.concatenate([axis * np.deg2rad(angle_deg), np.zeros(3)]))
    return Pose(rot @ pose.rotation, pose.translation)


def build_roster(dataset: Dataset, config_n: int, mode: str, plane=None,
                 pose_noise_deg: float = 0.0, pose_noise_seed: int = 0):
    """Observation list for one (config, mode) run.

    Flip modes append mirrored copies of the inputs with geometrically
    estimated poses; optional rotation noise stresses the pose refinement.
    """
    train = dataset.split("train")
    indices = config_indices(config_n)
    if max(indices) > len(train):
        raise DataError(f"config {config_n} needs {max(indices)} train views, "
                        f"have {len(train)}")
    roster = [train[i - 1] for i in indices]
    if mode in ("flip", "flip_u"):
        mirrored = [flip_observation(o) for o in roster[:8]]
        est = estimate_flipped_poses([o.pose for o in roster[:8]], plane=plane)
        if pose_noise_deg != 0.0:
            rng = np.random.default_rng(pose_noise_seed)
            est = [_perturb_rotation(p, pose_noise_deg, rng) for p in est]
        for o, p in zip(mirrored, est):
            o.pose = p
        roster.extend(mirrored)
    elif mode == "upper":
        roster = roster + list(dataset.split("upper"))
    return roster


def run_schedule(dataset: Dataset, config_n: int, config: TrainConfig,
                 out_dir=None, plane=None, pose_noise_deg: float = 0.0,
                 pose_noise_seed: int = 0, verbose: bool = False):
    """Train one mode on one ring configuration; optionally write artifacts.

    Returns (state, manifest). With out_dir set, writes `field.ckpt` plus a
    `manifest.json` holding the run configuration and all final poses.
    """
    roster = build_roster(dataset, config_n, config.mode, plane,
                          pose_noise_deg, pose_noise_seed)
    state = init_state(roster, config)
    initial_poses = [p.matrix().tolist() for p in state.poses]

    start = time.perf_counter()
    for i in range(config.total_iters):
        breakdown = train_step(state, config)
        if verbose and ((i + 1) % 100 == 0 or i == 0):
            print(f"iter {i + 1}/{config.total_iters}  "
                  f"in {breakdown.photometric_in:.5f}  "
                  f"flipped {breakdown.flipped_term:.5f}  "
                  f"reg {breakdown.regularizer:.5f}", flush=True)
    wall = time.perf_counter() - start
    history = state.loss_history

    manifest = {
        "mode": config.mode,
        "config_n": config_n,
        "indices": list(config_indices(config_n)),
        "seed": config.seed,
        "config": asdict(config),
        "loss": history[-1].as_dict(),
        "loss_history": {str(i + 1): history[i].as_dict()
                         for i in range(99, len(history), 100)},
        "observations": [
            {
                "index": k,
                "is_flipped": bool(state.flipped[k]),
                "pose_trainable": bool(state.trainable[k]),
                "initial_pose": initial_poses[k],
                "final_pose": state.poses[k].matrix().tolist(),
                "intrinsics": {
                    "width": int(state.intrs[k].width),
                    "height": int(state.intrs[k].height),
                    "focal": float(state.intrs[k].focal),
                    "cx": float(state.intrs[k].cx),
                    "cy": float(state.intrs[k].cy),
                },
            }
            for k in range(state.n_obs)
        ],
        "checkpoint": "field.ckpt",
        "wall_clock_s": wall,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(state.params, out / "field.ckpt")
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return state, manifest
