import numpy as np
import pytest

from icpcov.geometry import RigidTransform, exp_map


def random_transform(rng, max_angle=3.0, max_translation=1.0):
    omega = rng.normal(size=3)
    omega *= rng.uniform(0, max_angle) / np.linalg.norm(omega)
    u = rng.uniform(-max_translation, max_translation, size=3)
    return exp_map(np.concatenate([u, omega]))


def random_covariance(rng, scale=0.1, dim=6):
    A = rng.normal(size=(dim, dim)) * scale
    return A @ A.T / dim + np.eye(dim) * scale ** 2 * 0.05


def rot_z(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
