import numpy as np
import pytest

from crossview.camera import CameraModel


def random_rotation(rng):
    """Uniform-ish random rotation via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] *= -1
    return q


def random_camera(rng, width=640, height=480):
    return CameraModel(
        fx=float(rng.uniform(200, 800)),
        fy=float(rng.uniform(200, 800)),
        cx=float(rng.uniform(0.3, 0.7) * width),
        cy=float(rng.uniform(0.3, 0.7) * height),
        rotation=random_rotation(rng),
        translation=rng.uniform(-3, 3, size=3),
        image_width=width,
        image_height=height,
    )


def point_in_front(rng, cam, depth_range=(0.5, 10.0)):
    """Random world point with positive depth for the given camera."""
    depth = rng.uniform(*depth_range)
    u = rng.uniform(0, cam.image_width - 1)
    v = rng.uniform(0, cam.image_height - 1)
    ray = cam.rotation.T @ np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
    return cam.center() + depth * ray


def look_at_camera(position, target=(0.0, 0.0, 0.0), fx=400.0, width=640, height=480):
    """Simple ring-style camera for constructed-geometry tests."""
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    n = np.linalg.norm(right)
    right = np.array([1.0, 0.0, 0.0]) if n < 1e-12 else right / n
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return CameraModel(fx=fx, fy=fx, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                       rotation=rot, translation=-rot @ position,
                       image_width=width, image_height=height)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
