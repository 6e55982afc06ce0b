"""Calibrated pinhole cameras and world <-> pixel transforms.

Conventions (fixed across the toolkit):

* World frame: right-handed, origin at the scene center, z up.
* ``rotation`` maps world to camera: ``p_cam = R @ p_world + t``.
* Image axes: u right, v down; the pixel (u, v) of a world point is

      h = K @ (R @ p + t),   u = h0 / h2,   v = h1 / h2,   depth = h2

  with K the upper-triangular intrinsic matrix built from fx, fy, cx, cy.
* A projection is in-bounds when 0 <= u <= width-1, 0 <= v <= height-1 and
  depth > 0 (bilinear sampling needs all four neighbors; points behind the
  camera are meaningless).
"""

import math
import warnings
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from crossview.errors import GeometryError, ParseError

ORTHONORMAL_TOL = 1e-9          # CameraModel invariant, per matrix entry
CALIB_ORTHONORMAL_TOL = 1e-6    # parser rejection threshold
DEGENERATE_DEPTH = 1e-12


def _readonly(a, shape, name):
    arr = np.array(a, dtype=np.float64)
    if arr.shape != shape:
        raise GeometryError("bad-shape", f"{name} must have shape {shape}, got {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: intrinsics, world->camera extrinsics, image size."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray      # (3,3) row-major, world -> camera
    translation: np.ndarray   # (3,) meters
    image_width: int
    image_height: int

    def __post_init__(self):
        object.__setattr__(self, "rotation", _readonly(self.rotation, (3, 3), "rotation"))
        object.__setattr__(self, "translation", _readonly(self.translation, (3,), "translation"))
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("bad-intrinsics", f"fx, fy must be > 0, got {self.fx}, {self.fy}")
        if self.image_width < 1 or self.image_height < 1:
            raise GeometryError("bad-image-size",
                                f"image size must be >= 1, got {self.image_width}x{self.image_height}")
        dev = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if dev >= ORTHONORMAL_TOL:
            raise GeometryError("non-orthonormal",
                                f"rotation deviates from orthonormal by {dev:.3e}")

    @property
    def intrinsic_matrix(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def center(self):
        """Camera center in world coordinates (-R^T t)."""
        return -self.rotation.T @ self.translation


class PixelPoint(NamedTuple):
    u: float
    v: float
    depth: float   # camera-frame third coordinate, meters


def _world_to_camera(cam, x, y, z):
    """Camera-frame coordinates, written as explicit scalar expressions so
    single-point and batched callers run the identical float operations."""
    R = cam.rotation
    t = cam.translation
    xc = R[0, 0] * x + R[0, 1] * y + R[0, 2] * z + t[0]
    yc = R[1, 0] * x + R[1, 1] * y + R[1, 2] * z + t[1]
    zc = R[2, 0] * x + R[2, 1] * y + R[2, 2] * z + t[2]
    return xc, yc, zc


def _camera_to_pixel(cam, xc, yc, zc):
    safe = np.where(np.abs(zc) < DEGENERATE_DEPTH, 1.0, zc)
    u = (cam.fx * xc + cam.cx * zc) / safe
    v = (cam.fy * yc + cam.cy * zc) / safe
    return u, v, zc


def _project_arrays(cam, x, y, z):
    """Core projection of coordinate arrays; no degeneracy handling."""
    return _camera_to_pixel(cam, *_world_to_camera(cam, x, y, z))


def project_point(cam, p):
    """Project a world point; returns PixelPoint(u, v, depth).

    Raises GeometryError("degenerate-projection") when the point lies on
    the camera's principal plane (|depth| < 1e-12).
    """
    x, y, z = (float(p[0]), float(p[1]), float(p[2]))
    u, v, depth = _project_arrays(cam, x, y, z)
    if abs(depth) < DEGENERATE_DEPTH:
        raise GeometryError("degenerate-projection",
                            f"point {p!r} lies on the principal plane of the camera")
    return PixelPoint(float(u), float(v), float(depth))


def project_points(cam, pts):
    """Vectorized projection of an (N,3) array -> (u, v, depth) arrays.

    Degenerate depths are not raised here; callers get the raw depth array
    and decide (the LUT builder just flags those voxels out of bounds).
    """
    pts = np.asarray(pts, dtype=np.float64)
    return _project_arrays(cam, pts[..., 0], pts[..., 1], pts[..., 2])


def backproject_to_height(cam, u, v, z):
    """Invert the projection at a fixed world height z.

    Returns the (3,) world point where the viewing ray of pixel (u, v)
    meets the plane {world z = z}.
    """
    Rt = cam.rotation.T
    c = cam.center()
    d = Rt @ np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
    if abs(d[2]) < DEGENERATE_DEPTH:
        raise GeometryError("no-intersection",
                            f"ray of pixel ({u}, {v}) is parallel to the z={z} plane")
    s = (z - c[2]) / d[2]
    if s <= 0:
        raise GeometryError("behind-camera",
                            f"plane z={z} meets the ray of pixel ({u}, {v}) behind the camera")
    return c + s * d


def backproject_pixels_to_height(cam, u, v, z):
    """Vectorized ray/plane intersection for arrays of pixels.

    Returns (points (N,3), valid (N,)); invalid entries (ray parallel to the
    plane or intersection behind the camera) hold the camera center.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    Rt = cam.rotation.T
    c = cam.center()
    d = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1) @ Rt.T
    dz = d[..., 2]
    safe = np.where(np.abs(dz) < DEGENERATE_DEPTH, 1.0, dz)
    s = (z - c[2]) / safe
    valid = (np.abs(dz) >= DEGENERATE_DEPTH) & (s > 0)
    pts = c + np.where(valid, s, 0.0)[..., None] * d
    return pts, valid


@dataclass(frozen=True)
class VolumeSpec:
    """World-aligned axis box of the 3D feature volume and its voxel counts."""

    nx: int = 200
    ny: int = 200
    nz: int = 3
    x_min: float = -4.0
    x_max: float = 4.0
    y_min: float = -4.0
    y_max: float = 4.0
    z_min: float = 0.0
    z_max: float = 1.8

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise GeometryError("bad-volume", "voxel counts must be >= 1")
        for lo, hi, ax in ((self.x_min, self.x_max, "x"), (self.y_min, self.y_max, "y"),
                           (self.z_min, self.z_max, "z")):
            if not hi > lo:
                raise GeometryError("bad-volume", f"{ax}_max must exceed {ax}_min")

    @property
    def n_voxels(self):
        return self.nx * self.ny * self.nz

    def axis_centers(self):
        """Voxel-center coordinates along each axis (cell midpoints)."""
        xs = self.x_min + (np.arange(self.nx) + 0.5) * (self.x_max - self.x_min) / self.nx
        ys = self.y_min + (np.arange(self.ny) + 0.5) * (self.y_max - self.y_min) / self.ny
        zs = self.z_min + (np.arange(self.nz) + 0.5) * (self.z_max - self.z_min) / self.nz
        return xs, ys, zs

    def voxel_centers(self):
        """(nx*ny*nz, 3) voxel centers, index order (ix, iy, iz) row-major."""
        xs, ys, zs = self.axis_centers()
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


@dataclass(frozen=True)
class ProjectionLut:
    """Per-voxel pixel lookup for one camera: (u, v, depth, in_bounds).

    Arrays have shape (nx, ny, nz); a pure function of (camera, spec), so
    repeated builds are bit-identical.
    """

    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    in_bounds: np.ndarray
    image_width: int
    image_height: int
    spec: VolumeSpec


def camera_frame_voxels(cam, spec):
    """Camera-frame coordinates of all voxel centers.

    Reusable across intrinsic-only variants of the same physical camera
    (per-frame crop compositions), which skips the extrinsic transform in
    every LUT rebuild.
    """
    centers = spec.voxel_centers()
    return _world_to_camera(cam, centers[:, 0], centers[:, 1], centers[:, 2])


def build_volume_lut(cam, spec, cam_coords=None):
    """Project every voxel center; flag in-bounds ones.

    In-bounds means 0 <= u <= W-1, 0 <= v <= H-1 and depth > 0. Degenerate
    projections (|depth| < 1e-12) are flagged out-of-bounds, never raised.
    cam_coords, when given, must be camera_frame_voxels() of a camera with
    the same extrinsics (the result is bit-identical either way).
    """
    if cam_coords is None:
        cam_coords = camera_frame_voxels(cam, spec)
    u, v, depth = _camera_to_pixel(cam, *cam_coords)
    ok = (depth > 0) & (np.abs(depth) >= DEGENERATE_DEPTH)
    ok &= (u >= 0.0) & (u <= cam.image_width - 1.0)
    ok &= (v >= 0.0) & (v <= cam.image_height - 1.0)
    shape = (spec.nx, spec.ny, spec.nz)
    return ProjectionLut(u=u.reshape(shape), v=v.reshape(shape), depth=depth.reshape(shape),
                         in_bounds=ok.reshape(shape),
                         image_width=cam.image_width, image_height=cam.image_height, spec=spec)


@dataclass(frozen=True)
class BevGridSpec:
    """Square annotation grid over the ground plane, centered on the origin.

    Defaults are 400 x 400 cells spanning 8 m, i.e. 2 cm cells.
    """

    cells_x: int = 400
    cells_y: int = 400
    extent: float = 8.0

    def __post_init__(self):
        if self.cells_x < 1 or self.cells_y < 1 or not self.extent > 0:
            raise GeometryError("bad-grid", "cells must be >= 1 and extent > 0")

    @property
    def cell_size_x(self):
        return self.extent / self.cells_x

    @property
    def cell_size_y(self):
        return self.extent / self.cells_y

    def world_to_cell(self, x, y):
        """Cell indices of a world point, or None when outside the grid."""
        ix = math.floor((x + self.extent / 2.0) / self.cell_size_x)
        iy = math.floor((y + self.extent / 2.0) / self.cell_size_y)
        if 0 <= ix < self.cells_x and 0 <= iy < self.cells_y:
            return ix, iy
        return None

    def cell_center(self, ix, iy):
        x = (ix + 0.5) * self.cell_size_x - self.extent / 2.0
        y = (iy + 0.5) * self.cell_size_y - self.extent / 2.0
        return x, y


def bbox_to_ground_footprint(cam, box, grid, height_prior=1.0, samples=9):
    """Ground cells hit by backprojecting a pixel box through a camera.

    A samples x samples lattice over the box is cast through each of the
    heights {0, height_prior/2, height_prior}; rays that miss the plane or
    land outside the grid are dropped. Empty result means the view does not
    constrain the ground position.
    """
    if not (box.w > 0 and box.h > 0):
        raise GeometryError("degenerate-box", f"box needs positive size, got {box.w}x{box.h}")
    us = box.x + np.arange(samples) * (box.w / (samples - 1)) if samples > 1 else np.array([box.x + box.w / 2.0])
    vs = box.y + np.arange(samples) * (box.h / (samples - 1)) if samples > 1 else np.array([box.y + box.h / 2.0])
    gu, gv = np.meshgrid(us, vs, indexing="ij")
    cells = set()
    for z in (0.0, height_prior / 2.0, height_prior):
        pts, valid = backproject_pixels_to_height(cam, gu.ravel(), gv.ravel(), z)
        ix = np.floor((pts[:, 0] + grid.extent / 2.0) / grid.cell_size_x).astype(np.int64)
        iy = np.floor((pts[:, 1] + grid.extent / 2.0) / grid.cell_size_y).astype(np.int64)
        ok = valid & (ix >= 0) & (ix < grid.cells_x) & (iy >= 0) & (iy < grid.cells_y)
        cells.update(zip(ix[ok].tolist(), iy[ok].tolist()))
    return cells


def with_pixel_transform(cam, scale_x, scale_y, offset_x, offset_y, width, height):
    """Camera whose pixels are u' = (u - offset_x) * scale_x (likewise v).

    Composes a crop-and-resize into the intrinsics, which is how feature
    maps produced in crop coordinates are projected into the volume.
    """
    return CameraModel(
        fx=cam.fx * scale_x, fy=cam.fy * scale_y,
        cx=(cam.cx - offset_x) * scale_x, cy=(cam.cy - offset_y) * scale_y,
        rotation=cam.rotation, translation=cam.translation,
        image_width=width, image_height=height,
    )


def perturb_translation(cam, rng, amplitude=0.02):
    """Calibration-noise augmentation hook: C_t + U(-amplitude, amplitude)^3."""
    noise = rng.uniform(-amplitude, amplitude, size=3)
    return replace(cam, translation=cam.translation + noise)


# ---------------------------------------------------------------------------
# Calibration file format: UTF-8 text, "key: value" lines, "#" comments.
# Keys: fx fy cx cy width height, R (9 row-major numbers), t (3 numbers).

_CALIB_KEYS = ("fx", "fy", "cx", "cy", "width", "height", "R", "t")


def nearest_rotation(m):
    """Polar factor of m: the orthonormal matrix closest in Frobenius norm."""
    uu, _, vt = np.linalg.svd(m)
    return uu @ vt


def load_calibration(path):
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if ":" not in line:
                raise ParseError("malformed-calibration", "expected 'key: value'",
                                 path=str(path), line=lineno)
            key, _, rest = line.partition(":")
            key = key.strip()
            try:
                nums = [float(tok) for tok in rest.split()]
            except ValueError as exc:
                raise ParseError("malformed-number", str(exc), path=str(path), line=lineno) from None
            values[key] = nums
    missing = [k for k in _CALIB_KEYS if k not in values]
    if missing:
        raise ParseError("missing-calibration-key", f"missing keys: {' '.join(missing)}", path=str(path))
    for key, want in (("fx", 1), ("fy", 1), ("cx", 1), ("cy", 1), ("width", 1),
                      ("height", 1), ("R", 9), ("t", 3)):
        if len(values[key]) != want:
            raise ParseError("malformed-calibration",
                             f"key {key} needs {want} numbers, got {len(values[key])}",
                             path=str(path))
    R = np.array(values["R"]).reshape(3, 3)
    dev = np.abs(R.T @ R - np.eye(3)).max()
    if dev > CALIB_ORTHONORMAL_TOL:
        raise ParseError("non-orthonormal-rotation",
                         f"R deviates from orthonormal by {dev:.3e} (tolerance {CALIB_ORTHONORMAL_TOL})",
                         path=str(path))
    if dev >= ORTHONORMAL_TOL:
        warnings.warn(f"{path}: re-orthonormalized R (deviation {dev:.3e})", stacklevel=2)
        R = nearest_rotation(R)
    return CameraModel(
        fx=values["fx"][0], fy=values["fy"][0], cx=values["cx"][0], cy=values["cy"][0],
        rotation=R, translation=np.array(values["t"]),
        image_width=int(values["width"][0]), image_height=int(values["height"][0]),
    )


def save_calibration(path, cam):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# pinhole calibration (world->camera extrinsics)\n")
        fh.write(f"fx: {float(cam.fx)!r}\nfy: {float(cam.fy)!r}\n")
        fh.write(f"cx: {float(cam.cx)!r}\ncy: {float(cam.cy)!r}\n")
        fh.write(f"width: {cam.image_width}\nheight: {cam.image_height}\n")
        fh.write("R: " + " ".join(repr(float(x)) for x in cam.rotation.ravel()) + "\n")
        fh.write("t: " + " ".join(repr(float(x)) for x in cam.translation) + "\n")
