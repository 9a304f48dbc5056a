import numpy as np
import pytest

from splat4d.core import Camera, look_at_extrinsics


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


def make_camera(size=64, fov_deg=50.0, eye=(0.0, -4.0, 0.0), target=(0.0, 0.0, 0.0)):
    f = 0.5 * size / np.tan(np.deg2rad(fov_deg) / 2.0)
    K = np.array([[f, 0.0, size / 2.0], [0.0, f, size / 2.0], [0.0, 0.0, 1.0]])
    return Camera(K, look_at_extrinsics(np.array(eye, dtype=float), np.array(target, dtype=float)), size, size)


def random_camera(rng, size=48):
    """Camera at a random orbit position looking at the origin."""
    az = rng.uniform(0, 2 * np.pi)
    el = rng.uniform(-0.8, 0.8)
    r = rng.uniform(3.0, 6.0)
    eye = r * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    f = 0.5 * size / np.tan(np.deg2rad(rng.uniform(35, 70)) / 2.0)
    K = np.array([[f, 0.0, size / 2.0], [0.0, f, size / 2.0], [0.0, 0.0, 1.0]])
    return Camera(K, look_at_extrinsics(eye, np.zeros(3)), size, size)
