"""Late-fusion baseline: vote independent single-view boxes onto the ground
grid, take the most-overlapped region, reproject it into every view.

Contrast with the feature-level fusion in crossview.integration; this is the
strategy used to give single-view trackers a multi-view output.
"""

from dataclasses import dataclass

import numpy as np

from crossview.boxes import BBox2D
from crossview.camera import bbox_to_ground_footprint, project_point
from crossview.errors import ContractError, GeometryError


@dataclass
class FusionResult:
    peak_cell: tuple          # (ix, iy), first max-count cell in row-major order
    world_xy: tuple           # centroid of the max-count region, meters
    boxes: list               # reprojected per-view BBox2D
    contributing: list        # per-view: footprint reached the grid


def post_fuse(view_boxes, cams, grid, height_prior=1.0, samples=9):
    """Fuse per-view boxes through ground-plane overlap voting.

    Invisible views are dropped. The fused ground position is the centroid
    of the cells with maximal view count (the most-overlapped region); a
    vertical segment of height_prior at that position is projected back to
    give each view's fused box, whose width comes from the median aspect
    ratio of the visible input boxes.
    """
    if len(view_boxes) != len(cams):
        raise ContractError("bad-shape", f"{len(view_boxes)} boxes vs {len(cams)} cameras")
    visible = [k for k, b in enumerate(view_boxes)
               if b is not None and b.visible and b.w > 0 and b.h > 0]
    if not visible:
        raise ContractError("nothing-to-fuse", "no visible input boxes")

    occupancy = np.zeros((grid.cells_x, grid.cells_y), dtype=np.int32)
    contributing = [False] * len(view_boxes)
    for k in visible:
        cells = bbox_to_ground_footprint(cams[k], view_boxes[k], grid, height_prior, samples)
        contributing[k] = bool(cells)
        for ix, iy in cells:
            occupancy[ix, iy] += 1
    if occupancy.max() == 0:
        raise ContractError("nothing-to-fuse", "no footprint reaches the grid")

    max_count = occupancy.max()
    max_cells = np.argwhere(occupancy == max_count)       # row-major sorted
    peak_cell = (int(max_cells[0][0]), int(max_cells[0][1]))
    centers = np.array([grid.cell_center(ix, iy) for ix, iy in max_cells])
    world_xy = (float(centers[:, 0].mean()), float(centers[:, 1].mean()))

    aspects = sorted(view_boxes[k].w / view_boxes[k].h for k in visible)
    median_aspect = aspects[len(aspects) // 2] if len(aspects) % 2 else \
        0.5 * (aspects[len(aspects) // 2 - 1] + aspects[len(aspects) // 2])

    boxes = []
    for cam in cams:
        try:
            foot = project_point(cam, (world_xy[0], world_xy[1], 0.0))
            top = project_point(cam, (world_xy[0], world_xy[1], height_prior))
        except GeometryError:
            boxes.append(BBox2D(0.0, 0.0, 0.0, 0.0, visible=False))
            continue
        if foot.depth <= 0 or top.depth <= 0:
            boxes.append(BBox2D(0.0, 0.0, 0.0, 0.0, visible=False))
            continue
        cx = 0.5 * (foot.u + top.u)
        cy = 0.5 * (foot.v + top.v)
        h = max(abs(foot.v - top.v), 1.0)
        w = h * median_aspect
        box = BBox2D(cx - w / 2.0, cy - h / 2.0, w, h, visible=True).clipped(
            cam.image_width, cam.image_height)
        if box.area <= 0:
            box = BBox2D(box.x, box.y, 0.0, 0.0, visible=False)
        boxes.append(box)
    return FusionResult(peak_cell=peak_cell, world_xy=world_xy, boxes=boxes,
                        contributing=contributing)
