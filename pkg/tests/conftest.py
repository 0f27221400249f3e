import numpy as np
from scipy.spatial.transform import Rotation


def random_rotation(rng) -> np.ndarray:
    """Uniform random rotation matrix (scipy-backed, independent of package code)."""
    return Rotation.random(random_state=rng).as_matrix()


def ring_pose_centers(count=8, radius=4.0, height=0.0, start_deg=-78.75, step_deg=22.5):
    az = np.deg2rad(start_deg + step_deg * np.arange(count))
    return np.stack([radius * np.cos(az), radius * np.sin(az),
                     np.full(count, float(height))], axis=1)
