"""Radiance-field training with mirrored-observation augmentation.

Estimates poses for horizontally flipped copies of the input images (sphere
fit + plane reflection + look-at), then trains a voxel radiance field jointly
with bundle adjustment over the flipped poses and an uncertainty-weighted
photometric loss, so views on the unobserved side of a symmetric object
render correctly.
"""
from .errors import FlipFieldError
from .geometry import (
    Plane,
    Pose,
    Sphere,
    estimate_flipped_poses,
    fit_sphere,
    look_at_rotation,
    project_onto_sphere,
    reflect_across_plane,
    se3_apply_twist,
)
from .field import FieldParams, FieldSample, field_query, field_query_grad
from .renderer import (
    CameraIntrinsics,
    Ray,
    RenderOutput,
    RenderSettings,
    composite,
    composite_grad,
    pixel_ray,
    render_image,
    sample_ray,
)
from .dataio import (
    Dataset,
    DatasetConfig,
    Observation,
    SCENES,
    config_indices,
    flip_observation,
    generate_synthetic_dataset,
    load_nerf_synthetic,
    make_configs,
    sphere_asym_scene,
    sphere_checker_scene,
)
from .trainer import LossBreakdown, TrainConfig, TrainState, run_schedule, train_step
from .metrics import MetricsReport, evaluate, psnr, ssim

__version__ = "0.1.0"
