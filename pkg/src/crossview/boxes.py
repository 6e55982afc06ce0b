"""Axis-aligned boxes and the crop <-> frame coordinate transform."""

import math
from dataclasses import dataclass, replace

from crossview.errors import ContractError


@dataclass(frozen=True)
class BBox2D:
    """Axis-aligned pixel box (top-left corner, size) with a visibility flag.

    Invisible boxes carry no geometric meaning; metric code skips them.
    """

    x: float
    y: float
    w: float
    h: float
    visible: bool = True

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ContractError("negative-box", f"box size must be >= 0, got {self.w}x{self.h}")

    @property
    def cx(self):
        return self.x + self.w / 2.0

    @property
    def cy(self):
        return self.y + self.h / 2.0

    @property
    def area(self):
        return self.w * self.h

    @property
    def x2(self):
        return self.x + self.w

    @property
    def y2(self):
        return self.y + self.h

    def clipped(self, width, height):
        """Intersection with the image rectangle [0,width] x [0,height]."""
        x1 = min(max(self.x, 0.0), float(width))
        y1 = min(max(self.y, 0.0), float(height))
        x2 = min(max(self.x2, 0.0), float(width))
        y2 = min(max(self.y2, 0.0), float(height))
        return replace(self, x=x1, y=y1, w=max(x2 - x1, 0.0), h=max(y2 - y1, 0.0))


def intersection_area(a, b):
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def union_area(a, b):
    return a.area + b.area - intersection_area(a, b)


def enclosing_area(a, b):
    ew = max(a.x2, b.x2) - min(a.x, b.x)
    eh = max(a.y2, b.y2) - min(a.y, b.y)
    return ew * eh


def center_distance(a, b):
    return math.hypot(a.cx - b.cx, a.cy - b.cy)


@dataclass(frozen=True)
class CropTransform:
    """Invertible map between a square frame region and a resized crop.

    The source square has center (src_cx, src_cy) and side src_side in frame
    pixels; the crop is out_size x out_size. Round trips are exact to well
    under 1e-9 px.
    """

    src_cx: float
    src_cy: float
    src_side: float
    out_size: int

    def __post_init__(self):
        if not self.src_side > 0:
            raise ContractError("bad-crop", f"crop side must be > 0, got {self.src_side}")

    @property
    def scale(self):
        """Crop pixels per frame pixel."""
        return self.out_size / self.src_side

    @property
    def src_x0(self):
        return self.src_cx - self.src_side / 2.0

    @property
    def src_y0(self):
        return self.src_cy - self.src_side / 2.0

    def to_crop_xy(self, x, y):
        return (x - self.src_x0) * self.scale, (y - self.src_y0) * self.scale

    def to_frame_xy(self, x, y):
        return x / self.scale + self.src_x0, y / self.scale + self.src_y0

    def box_to_crop(self, box):
        x, y = self.to_crop_xy(box.x, box.y)
        return replace(box, x=x, y=y, w=box.w * self.scale, h=box.h * self.scale)

    def box_to_frame(self, box):
        x, y = self.to_frame_xy(box.x, box.y)
        return replace(box, x=x, y=y, w=box.w / self.scale, h=box.h / self.scale)


def reference_crop(box, scale_factor=2.0, out_size=182):
    """Reference-frame crop: square of side scale_factor * max(w, h)."""
    side = scale_factor * max(box.w, box.h)
    return CropTransform(src_cx=box.cx, src_cy=box.cy, src_side=side, out_size=out_size)


def search_crop(box, area_factor=4.5, out_size=364):
    """Search-frame crop: square whose area is area_factor * box area."""
    side = math.sqrt(area_factor * box.w * box.h)
    return CropTransform(src_cx=box.cx, src_cy=box.cy, src_side=side, out_size=out_size)


def full_frame_crop(width, height, out_size):
    """Fallback crop covering the whole frame (recovery search region)."""
    side = float(max(width, height))
    return CropTransform(src_cx=width / 2.0, src_cy=height / 2.0, src_side=side, out_size=out_size)
