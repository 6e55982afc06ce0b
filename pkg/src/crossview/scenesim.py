"""Deterministic synthetic multi-camera scenes.

A scene is a ring of calibrated cameras gazing at the arena center, a box
target moving along a piecewise-linear ground trajectory, and static
axis-aligned occluders. Rendering produces, per view, the ground-truth box
(hull of the eight projected target corners), a visibility flag from
occlusion ray casting, and an idealized feature map: a Gaussian blob at the
projected target center when the target is visible, a zero map otherwise.
That blob is the designed seam letting geometry, fusion and evaluation be
exercised without any trained weights.
"""

import math
from dataclasses import dataclass

import numpy as np

from crossview.boxes import BBox2D
from crossview.camera import CameraModel, project_points
from crossview.errors import ContractError, GeometryError


@dataclass(frozen=True)
class Aabb:
    """World-space axis-aligned box (an occluder)."""

    x0: float
    x1: float
    y0: float
    y1: float
    z0: float
    z1: float

    def contains(self, p):
        return (self.x0 <= p[0] <= self.x1 and self.y0 <= p[1] <= self.y1
                and self.z0 <= p[2] <= self.z1)

    def segment_hits(self, p0, p1):
        """Slab test: does the open segment p0 -> p1 pass through the box?"""
        tmin, tmax = 0.0, 1.0
        for lo, hi, a, b in ((self.x0, self.x1, p0[0], p1[0]),
                             (self.y0, self.y1, p0[1], p1[1]),
                             (self.z0, self.z1, p0[2], p1[2])):
            d = b - a
            if abs(d) < 1e-15:
                if a < lo or a > hi:
                    return False
                continue
            t1, t2 = (lo - a) / d, (hi - a) / d
            if t1 > t2:
                t1, t2 = t2, t1
            tmin = max(tmin, t1)
            tmax = min(tmax, t2)
            if tmin > tmax:
                return False
        return True


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    n_cameras: int = 3            # dataset convention: 3 or 4 synchronized views
    arena_extent: float = 8.0     # meters per side, centered on the origin
    image_width: int = 256
    image_height: int = 192
    fov_deg: float = 70.0
    cam_radius_range: tuple = (4.2, 5.2)
    cam_height_range: tuple = (1.6, 2.6)
    waypoints: tuple = None       # ((x, y), ...); generated from seed if None
    speed: float = 0.06           # meters per frame along the trajectory
    target_size: tuple = (0.4, 0.3, 0.5)   # (sx, sy, height) meters
    occluders: tuple = ()
    n_frames: int = 100
    feature_channels: int = 1
    blob_amplitude: float = 1.0

    def __post_init__(self):
        if self.n_cameras < 1:
            raise ContractError("bad-config", "need at least one camera")
        if self.n_frames < 0:
            raise ContractError("bad-config", "n_frames must be >= 0")


@dataclass
class SimView:
    box: BBox2D
    visible: bool
    feature_map: np.ndarray   # (C, H, W)


@dataclass
class SimFrame:
    views: list
    ground_xy: np.ndarray     # (2,) target ground position, meters
    world_center: np.ndarray  # (3,) target center, meters


@dataclass
class Scene:
    cfg: SceneConfig
    cameras: list
    positions: np.ndarray     # (n_frames, 2) precomputed ground trajectory


def look_at_rotation(position, target):
    """World->camera rotation with the camera gazing from position at target,
    u right / v down image axes, world z up."""
    fwd = np.asarray(target, dtype=np.float64) - np.asarray(position, dtype=np.float64)
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-12:  # looking straight down/up: pick a fixed right axis
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd])


def _default_waypoints(rng, extent):
    lim = 0.30 * extent
    n = int(rng.integers(4, 7))
    pts = rng.uniform(-lim, lim, size=(n, 2))
    return tuple(map(tuple, pts))


def _trajectory(waypoints, speed, n_frames):
    """Constant-speed walk along the polyline, clamped at the last waypoint."""
    pts = np.asarray(waypoints, dtype=np.float64)
    if len(pts) == 1:
        return np.repeat(pts, max(n_frames, 1), axis=0)[:n_frames]
    seg = np.diff(pts, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    dist = np.minimum(np.arange(n_frames) * speed, cum[-1])
    idx = np.minimum(np.searchsorted(cum, dist, side="right") - 1, len(seg) - 1)
    frac = np.where(seg_len[idx] > 0, (dist - cum[idx]) / np.where(seg_len[idx] > 0, seg_len[idx], 1.0), 0.0)
    return pts[idx] + seg[idx] * frac[:, None]


def generate_scene(cfg):
    """Build cameras on a ring plus the target trajectory; pure in the seed."""
    rng = np.random.default_rng(cfg.seed)
    waypoints = cfg.waypoints if cfg.waypoints is not None else _default_waypoints(rng, cfg.arena_extent)
    positions = _trajectory(waypoints, cfg.speed, cfg.n_frames)
    if positions.size and np.abs(positions).max() > cfg.arena_extent / 2.0:
        raise GeometryError("infeasible-scene", "trajectory leaves the arena")

    fx = (cfg.image_width / 2.0) / math.tan(math.radians(cfg.fov_deg) / 2.0)
    cameras = []
    for i in range(cfg.n_cameras):
        azimuth = 2.0 * math.pi * i / cfg.n_cameras + rng.uniform(-0.15, 0.15)
        radius = rng.uniform(*cfg.cam_radius_range)
        height = rng.uniform(*cfg.cam_height_range)
        pos = np.array([radius * math.cos(azimuth), radius * math.sin(azimuth), height])
        for occ in cfg.occluders:
            if occ.contains(pos):
                raise GeometryError("infeasible-scene", f"camera {i} sits inside an occluder")
        rot = look_at_rotation(pos, (0.0, 0.0, 0.0))
        cameras.append(CameraModel(
            fx=fx, fy=fx,
            cx=(cfg.image_width - 1) / 2.0, cy=(cfg.image_height - 1) / 2.0,
            rotation=rot, translation=-rot @ pos,
            image_width=cfg.image_width, image_height=cfg.image_height,
        ))
    return Scene(cfg=cfg, cameras=cameras, positions=positions)


def target_corners(center_xy, size):
    sx, sy, sz = size
    x, y = center_xy
    return np.array([[x + dx * sx / 2.0, y + dy * sy / 2.0, z]
                     for dx in (-1.0, 1.0) for dy in (-1.0, 1.0) for z in (0.0, sz)])


def _sample_lattice(center_xy, size, n=5):
    sx, sy, sz = size
    x, y = center_xy
    ax = x + (np.arange(n) / (n - 1) - 0.5) * sx
    ay = y + (np.arange(n) / (n - 1) - 0.5) * sy
    az = (np.arange(n) / (n - 1)) * sz
    gx, gy, gz = np.meshgrid(ax, ay, az, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def render_frame(scene, t):
    """Ground-truth observation of frame t in every view."""
    cfg = scene.cfg
    if not 0 <= t < len(scene.positions):
        raise ContractError("bad-frame", f"frame {t} outside 0..{len(scene.positions) - 1}")
    ground = scene.positions[t]
    center = np.array([ground[0], ground[1], cfg.target_size[2] / 2.0])
    corners = target_corners(ground, cfg.target_size)
    samples = _sample_lattice(ground, cfg.target_size)

    views = []
    for cam in scene.cameras:
        u, v, depth = project_points(cam, corners)
        in_front = depth > 0
        if in_front.any():
            hull = BBox2D(x=float(u[in_front].min()), y=float(v[in_front].min()),
                          w=float(np.ptp(u[in_front])), h=float(np.ptp(v[in_front])),
                          visible=True).clipped(cam.image_width, cam.image_height)
        else:
            hull = BBox2D(0.0, 0.0, 0.0, 0.0, visible=False)

        su, sv, sdepth = project_points(cam, samples)
        cam_pos = cam.center()
        occluded = np.zeros(len(samples), dtype=bool)
        for occ in cfg.occluders:
            for i in range(len(samples)):
                if not occluded[i] and occ.segment_hits(cam_pos, samples[i]):
                    occluded[i] = True
        in_frame = (sdepth > 0) & (su >= 0) & (su <= cam.image_width - 1) \
            & (sv >= 0) & (sv <= cam.image_height - 1)
        clear = (~occluded) & in_frame
        visible = bool(clear.mean() >= 0.5) and hull.area > 0

        fmap = np.zeros((cfg.feature_channels, cfg.image_height, cfg.image_width))
        if visible:
            cu, cv, cdepth = project_points(cam, center[None, :])
            sigma = math.hypot(hull.w, hull.h) / 6.0
            if cdepth[0] > 0 and sigma > 0:
                ys = np.arange(cfg.image_height)[:, None]
                xs = np.arange(cfg.image_width)[None, :]
                blob = cfg.blob_amplitude * np.exp(
                    -((xs - cu[0]) ** 2 + (ys - cv[0]) ** 2) / (2.0 * sigma ** 2))
                fmap[:] = blob
        views.append(SimView(box=BBox2D(hull.x, hull.y, hull.w, hull.h, visible=visible),
                             visible=visible, feature_map=fmap))
    return SimFrame(views=views, ground_xy=ground.copy(), world_center=center)


def make_occlusion_scene(seed, n_frames=100, occluded_view=0, occlusion_start=40,
                         occlusion_length=30, path_length=4.5, **config_overrides):
    """Scene with a wall that fully hides the target from one view for
    (roughly) the requested frame window.

    The target walks a straight line perpendicular to the occluded camera's
    viewing direction; the wall is the axis-aligned hull of the mid-ray
    points during the window, so it blocks exactly that camera's sightline
    (rays from the other ring cameras never reach its depth). The sim's own
    visibility flags carry the authoritative episode boundaries.
    """
    rng = np.random.default_rng(seed)
    x0 = float(rng.uniform(-0.5, 0.5))
    half = path_length / 2.0
    waypoints = ((x0, -half), (x0, half))
    speed = path_length / max(n_frames - 1, 1)
    overrides = {k: v for k, v in config_overrides.items()
                 if k not in ("waypoints", "speed", "occluders")}
    probe = generate_scene(SceneConfig(seed=seed, n_frames=n_frames, waypoints=waypoints,
                                       speed=speed, **overrides))

    cam_pos = probe.cameras[occluded_view].center()
    t0, t1 = occlusion_start, min(occlusion_start + occlusion_length, n_frames)
    if t1 <= t0:
        raise ContractError("bad-config",
                            f"occlusion window [{occlusion_start}, {occlusion_start + occlusion_length})"
                            f" lies outside the {n_frames}-frame sequence")
    lam = 0.45
    margin = 0.10
    # a wall hull built from the window's corner rays keeps occluding while
    # the target crosses its own width; shrink the build window so the
    # reported invisibility run matches the request
    pad = int(round((0.5 * probe.cfg.target_size[1] + margin / lam) / speed))
    b0, b1 = t0 + pad, t1 - pad
    if b1 <= b0:
        b0, b1 = t0, t1
    pts = []
    for t in range(b0, b1):
        for corner in target_corners(probe.positions[t], probe.cfg.target_size):
            pts.append(cam_pos + lam * (corner - cam_pos))
    pts = np.asarray(pts)
    wall = Aabb(x0=float(pts[:, 0].min() - margin), x1=float(pts[:, 0].max() + margin),
                y0=float(pts[:, 1].min() - margin), y1=float(pts[:, 1].max() + margin),
                z0=0.0, z1=float(pts[:, 2].max() + margin))
    return generate_scene(SceneConfig(seed=seed, n_frames=n_frames, waypoints=waypoints,
                                      speed=speed, occluders=(wall,), **overrides))
