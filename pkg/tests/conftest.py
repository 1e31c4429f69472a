import numpy as np
import pytest
import torch

from cgs.api.gaussians import Camera, GaussianField, look_at


torch.set_num_threads(1)


def make_camera(eye=(0.0, 0.0, 0.0), target=(0.0, 0.0, 1.0), width=32, height=32, focal=30.0,
                timestep=0, camera_id="cam0") -> Camera:
    """
    Pinhole camera with the principal point in the image center.
    """
    return Camera.from_params(focal, focal, 0.5 * (width - 1), 0.5 * (height - 1), look_at(eye, target),
                              width, height, timestep=timestep, camera_id=camera_id)


def random_field(n: int, seed: int = 0, depth=(2.5, 4.0), spread: float = 0.5, scale=(0.08, 0.2),
                 opacity=(0.3, 0.8)) -> GaussianField:
    """
    Anisotropic Gaussians in front of a camera at the origin looking down +z.
    """
    rng = np.random.default_rng(seed)
    positions = np.stack([
        rng.uniform(-spread, spread, n),
        rng.uniform(-spread, spread, n),
        rng.uniform(depth[0], depth[1], n)], axis=1)
    colors = rng.uniform(0.2, 0.8, (n, 3))
    field = GaussianField.from_points(positions, colors, scale=0.1, opacity=0.5)
    field.log_scales = np.log(rng.uniform(scale[0], scale[1], (n, 3)))
    q = rng.normal(size=(n, 4))
    field.rotations = q / np.linalg.norm(q, axis=1, keepdims=True)
    field.opacity_logits = np.log(rng.uniform(opacity[0], opacity[1], n))
    field.opacity_logits = field.opacity_logits - np.log1p(-np.exp(field.opacity_logits))
    field.sh_coeffs[:, 1:, :] = 0.05 * rng.normal(size=(n, 15, 3))
    field.background = np.array([0.1, 0.2, 0.3])
    return field


@pytest.fixture
def camera() -> Camera:
    return make_camera()


@pytest.fixture
def small_field() -> GaussianField:
    return random_field(12, seed=3)
