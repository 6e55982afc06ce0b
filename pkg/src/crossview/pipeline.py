"""Streaming orchestration: crops, the joint token encoder, per-view steps,
and the multi-view refinement pass.

The per-view encoder is a seeded toy transformer. Tokens get one additive
encoding per slot type (current temporal, previous temporal, reference,
search) rather than per position, so a featureless frame yields identical
search tokens and therefore a flat score map; all spatial signal comes from
frame content and from the fused geometry.

During multi-view refinement the BEV score map is projected into each view
and multiplied into the refined score map as a spatial prior. A view whose
own evidence vanished (occlusion) then decodes at the geometrically
consistent cell instead of an arbitrary one; views with evidence are only
sharpened. The prior is skipped when the BEV peak itself is unreliable.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from crossview import boxes as boxmod
from crossview import integration, kernels, trackhead
from crossview.camera import (BevGridSpec, VolumeSpec, backproject_pixels_to_height,
                              build_volume_lut, camera_frame_voxels, with_pixel_transform)
from crossview.errors import ContractError
from crossview.tensorops import ParamGen, attention_forward, make_attention_params

SLOT_CURRENT, SLOT_PREVIOUS, SLOT_REFERENCE, SLOT_SEARCH = range(4)


@dataclass(frozen=True)
class TrackerConfig:
    seed: int = 0
    dim: int = 64
    num_heads: int = 4
    encoder_depth: int = 2
    refine_depth: int = 2
    patch: int = 14
    feat_channels: int = 32
    image_channels: int = 1
    ref_out: int = 182
    search_out: int = 364
    ref_scale: float = 2.0
    search_area_factor: float = 4.5
    vis_threshold: float = 0.3
    full_frame_after: int = 10
    volume: VolumeSpec = field(default_factory=VolumeSpec)
    bev_target_radius: int = 3
    eq1_sigmoid: bool = False
    z_shared: bool = False
    bev_reliable_threshold: float = 0.3
    prior_floor: float = 0.05

    def __post_init__(self):
        if self.search_out % self.patch or self.ref_out % self.patch:
            raise ContractError("bad-config",
                                f"crop sizes {self.ref_out}/{self.search_out} must be "
                                f"divisible by patch {self.patch}")


@dataclass
class EncoderParams:
    patch_embed: np.ndarray    # (C*p*p, D)
    patch_bias: np.ndarray     # (D,)
    slot_encodings: np.ndarray  # (4, D) one per slot type
    temporal_init: np.ndarray  # (D,) the learnable current-frame token
    blocks: list


def make_encoder_params(gen, cfg):
    return EncoderParams(
        patch_embed=gen.normal(cfg.image_channels * cfg.patch ** 2, cfg.dim, scale=0.05),
        patch_bias=gen.normal(cfg.dim, scale=0.01),
        slot_encodings=gen.normal(4, cfg.dim, scale=0.02),
        temporal_init=gen.normal(cfg.dim, scale=0.02),
        blocks=[make_attention_params(gen, cfg.dim, num_heads=cfg.num_heads)
                for _ in range(cfg.encoder_depth)],
    )


@dataclass
class ViewState:
    reference_tokens: np.ndarray   # (N_r, D) raw patch embeds of the reference crop
    temporal: np.ndarray           # (D,) carried token from the previous frame
    last_box: object               # BBox2D or None
    frames_since_visible: int
    reference_ok: bool             # False when the init box was invisible


@dataclass
class TrackState:
    views: list
    frame_index: int = 0


@dataclass
class StepOutput:
    head: trackhead.HeadOutput
    tokens: np.ndarray        # reweighted search tokens (N_s, D)
    feature2d: np.ndarray     # (channels, S, S)
    box: object               # unrefined decode, full-frame coords
    crop: boxmod.CropTransform
    peak_score: float
    reliable: bool


@dataclass
class MultiStepOutput:
    boxes: list               # refined per-view boxes, full-frame coords
    peak_cell: tuple          # (ix, iy) on the volume grid
    peak_world: tuple         # (x, y) meters
    bev_score: np.ndarray     # (nx, ny)
    bev_reliable: bool
    steps: list               # per-view StepOutput (unrefined)
    scores: list              # per-view refined peak scores


@dataclass
class BoxRecord:
    frame: int
    view: int
    box: object
    score: float


@dataclass
class TrackRun:
    mode: str
    records: list
    bev_track: list           # (frame, x, y) tuples, meters
    stats: dict


_CROP_GRID_CACHE = {}


def _crop_grid(out_size):
    if out_size not in _CROP_GRID_CACHE:
        ys, xs = np.meshgrid(np.arange(out_size, dtype=np.float64),
                             np.arange(out_size, dtype=np.float64), indexing="ij")
        _CROP_GRID_CACHE[out_size] = (xs.ravel(), ys.ravel())
    return _CROP_GRID_CACHE[out_size]


def _score_centroid(score, ix, iy, vol, radius=3):
    """Score-weighted sub-cell position around a peak cell, in meters."""
    x0, x1 = max(ix - radius, 0), min(ix + radius, vol.nx - 1)
    y0, y1 = max(iy - radius, 0), min(iy + radius, vol.ny - 1)
    window = score[x0:x1 + 1, y0:y1 + 1]
    total = window.sum()
    xs, ys, _ = vol.axis_centers()
    if total <= 0:
        return float(xs[ix]), float(ys[iy])
    wx = (window.sum(axis=1) * xs[x0:x1 + 1]).sum() / total
    wy = (window.sum(axis=0) * ys[y0:y1 + 1]).sum() / total
    return float(wx), float(wy)


def crop_image(frame, crop):
    """Resample a (C, H, W) frame into the crop's output square.

    Regions outside the frame are zero-padded (not edge-replicated).
    """
    frame = np.asarray(frame, dtype=np.float64)
    c, h, w = frame.shape
    s = crop.out_size
    xs, ys = _crop_grid(s)
    fx, fy = crop.to_frame_xy(xs, ys)
    out = kernels.bilinear_gather(frame, fx, fy).T.reshape(c, s, s)
    valid = ((fx >= 0) & (fx <= w - 1) & (fy >= 0) & (fy <= h - 1)).reshape(s, s)
    return out * valid


def patch_tokens(image, patch, params):
    """Non-overlapping patches (row-major) -> embedded tokens (N, D)."""
    c, h, w = image.shape
    gh, gw = h // patch, w // patch
    patches = image.reshape(c, gh, patch, gw, patch).transpose(1, 3, 0, 2, 4)
    flat = patches.reshape(gh * gw, c * patch * patch)
    return flat @ params.patch_embed + params.patch_bias


class Tracker:
    """Seeded multi-view tracker over feature-map frames.

    cameras (one CameraModel per view) are only required for the
    multi-view step.
    """

    def __init__(self, cfg=None, cameras=None):
        self.cfg = cfg if cfg is not None else TrackerConfig()
        self.cameras = list(cameras) if cameras is not None else None
        gen = ParamGen(self.cfg.seed)
        c = self.cfg
        self.encoder = make_encoder_params(gen, c)
        self.f2d = trackhead.make_feature2d_params(gen, c.dim, c.feat_channels, c.patch)
        size_prior = c.search_out / (c.patch * math.sqrt(c.search_area_factor))
        self.head_single = trackhead.make_box_head_params(gen, c.dim, size_prior)
        self.fusion = integration.make_fusion_params(
            gen, channels=c.feat_channels, nz=c.volume.nz, dim=c.dim,
            heads=c.num_heads, refine_depth=c.refine_depth, z_shared=c.z_shared)
        self.head_refined = trackhead.make_box_head_params(gen, c.dim, size_prior)
        self._voxel_cache = {}  # view index -> camera-frame voxel coordinates

    # -- initialization ----------------------------------------------------

    def init_track(self, frames, init_boxes):
        """Build per-view state from reference frames and init boxes."""
        if len(frames) != len(init_boxes):
            raise ContractError("bad-shape", "one init box per view required")
        first_visible = next((i for i, b in enumerate(init_boxes) if b is not None and b.visible), None)
        if first_visible is None:
            raise ContractError("no-visible-init", "at least one view needs a visible init box")

        reference_cache = {}

        def ref_tokens(view):
            if view not in reference_cache:
                crop = boxmod.reference_crop(init_boxes[view], self.cfg.ref_scale, self.cfg.ref_out)
                img = crop_image(frames[view], crop)
                reference_cache[view] = patch_tokens(img, self.cfg.patch, self.encoder)
            return reference_cache[view]

        views = []
        for i, box in enumerate(init_boxes):
            if box is not None and box.visible:
                views.append(ViewState(
                    reference_tokens=ref_tokens(i), temporal=np.zeros(self.cfg.dim),
                    last_box=box, frames_since_visible=0, reference_ok=True))
            else:
                # no appearance of its own: borrow the first visible view's
                # reference statistics and start from a full-frame search
                views.append(ViewState(
                    reference_tokens=ref_tokens(first_visible).copy(),
                    temporal=np.zeros(self.cfg.dim),
                    last_box=None, frames_since_visible=self.cfg.full_frame_after + 1,
                    reference_ok=False))
        return TrackState(views=views, frame_index=0)

    # -- single-view step ----------------------------------------------------

    def _search_crop(self, view_state, frame):
        c, h, w = frame.shape
        if view_state.last_box is None or view_state.frames_since_visible > self.cfg.full_frame_after:
            return boxmod.full_frame_crop(w, h, self.cfg.search_out)
        return boxmod.search_crop(view_state.last_box, self.cfg.search_area_factor,
                                  self.cfg.search_out)

    def track_step_single(self, state, view, frame):
        """One streaming step of one view; updates that view's temporal token."""
        frame = np.asarray(frame, dtype=np.float64)
        if self.cameras is not None and self.cameras[view] is not None:
            cam = self.cameras[view]
            if frame.shape[1] != cam.image_height or frame.shape[2] != cam.image_width:
                raise ContractError("frame-size-mismatch",
                                    f"frame {frame.shape[1:]} vs calibration "
                                    f"{cam.image_height}x{cam.image_width}")
        sv = state.views[view]
        crop = self._search_crop(sv, frame)
        img = crop_image(frame, crop)
        search = patch_tokens(img, self.cfg.patch, self.encoder)

        enc = self.encoder
        seq = np.vstack([
            enc.temporal_init + enc.slot_encodings[SLOT_CURRENT],
            sv.temporal + enc.slot_encodings[SLOT_PREVIOUS],
            sv.reference_tokens + enc.slot_encodings[SLOT_REFERENCE],
            search + enc.slot_encodings[SLOT_SEARCH],
        ])
        for blk in enc.blocks:
            seq = attention_forward(blk, seq)
        t_cur = seq[0]
        search_out = seq[2 + sv.reference_tokens.shape[0]:]

        tokens = trackhead.temporal_reweight(search_out, t_cur, self.cfg.eq1_sigmoid)
        gs = self.cfg.search_out // self.cfg.patch
        head = trackhead.run_box_head(self.head_single, tokens, (gs, gs))
        feature2d = trackhead.map_to_feature2d(tokens, (self.cfg.search_out, self.cfg.search_out),
                                               self.f2d)
        box = trackhead.decode_bbox(head, crop, self.cfg.patch, self.cfg.vis_threshold)
        sv.temporal = t_cur.copy()
        return StepOutput(head=head, tokens=tokens, feature2d=feature2d, box=box, crop=crop,
                          peak_score=float(head.score_map.max()), reliable=sv.reference_ok)

    def bev_target(self, ground_xy):
        """Supervision splat for the BEV score map, on the volume's grid."""
        vol = self.cfg.volume
        grid = BevGridSpec(cells_x=vol.nx, cells_y=vol.ny, extent=vol.x_max - vol.x_min)
        return integration.make_bev_target(ground_xy, grid, self.cfg.bev_target_radius)

    def commit_box(self, state, view, box, localized=None):
        """Feed a decoded box back into the view's search state."""
        sv = state.views[view]
        sv.last_box = box
        if box.visible or bool(localized):
            sv.frames_since_visible = 0
        else:
            sv.frames_since_visible += 1

    # -- multi-view step -----------------------------------------------------

    PRIOR_SUBCELLS = 4

    def _bev_prior(self, bev_score, crop, cam):
        """Project the BEV score map into a view's head grid.

        Sampled on a sub-cell lattice (PRIOR_SUBCELLS^2 rays per head cell)
        at the height of the first volume slab, where the consensus mass
        lives. Returns (per-cell prior normalized to peak 1, per-cell
        sub-cell offsets of the prior argmax).
        """
        cfg = self.cfg
        gs = cfg.search_out // cfg.patch
        ss = self.PRIOR_SUBCELLS
        n = gs * ss
        coords = (np.arange(n) + 0.5) * (cfg.patch / ss)
        cy, cx = np.meshgrid(coords, coords, indexing="ij")
        fx, fy = crop.to_frame_xy(cx.ravel(), cy.ravel())
        vol = cfg.volume
        slab0 = vol.z_min + 0.5 * (vol.z_max - vol.z_min) / vol.nz
        pts, valid = backproject_pixels_to_height(cam, fx, fy, slab0)
        gx = (pts[:, 0] - vol.x_min) / ((vol.x_max - vol.x_min) / vol.nx) - 0.5
        gy = (pts[:, 1] - vol.y_min) / ((vol.y_max - vol.y_min) / vol.ny) - 0.5
        inside = valid & (gx >= -0.5) & (gx <= vol.nx - 0.5) & (gy >= -0.5) & (gy <= vol.ny - 0.5)
        vals = kernels.bilinear_gather(bev_score[None, :, :], gy, gx)[:, 0]
        fine = np.where(inside, vals, 0.0).reshape(gs, ss, gs, ss).transpose(0, 2, 1, 3)
        fine = fine.reshape(gs, gs, ss * ss)
        sub_idx = np.argmax(fine, axis=2)
        prior = np.take_along_axis(fine, sub_idx[:, :, None], axis=2)[:, :, 0]
        off_y = (sub_idx // ss + 0.5) / ss
        off_x = (sub_idx % ss + 0.5) / ss
        peak = prior.max()
        prior = prior / peak if peak > 0 else np.ones_like(prior)
        return prior, np.stack([off_x, off_y])

    def track_step_multiview(self, state, frames):
        """Per-view steps, volume lift, BEV scoring, and refined decodes."""
        if self.cameras is None:
            raise ContractError("missing-calibration",
                                "multi-view stepping requires per-view cameras")
        if len(frames) != len(state.views) or len(frames) > len(self.cameras):
            raise ContractError("bad-shape",
                                f"{len(frames)} frames vs {len(state.views)} views / "
                                f"{len(self.cameras)} cameras")
        missing = [k for k in range(len(frames)) if self.cameras[k] is None]
        if missing:
            raise ContractError("missing-calibration",
                                f"no calibration for view(s) {missing}")
        cfg = self.cfg
        steps = [self.track_step_single(state, k, f) for k, f in enumerate(frames)]

        luts = []
        for k, step in enumerate(steps):
            crop_cam = with_pixel_transform(
                self.cameras[k], step.crop.scale, step.crop.scale,
                step.crop.src_x0, step.crop.src_y0, cfg.search_out, cfg.search_out)
            if k not in self._voxel_cache:
                self._voxel_cache[k] = camera_frame_voxels(self.cameras[k], cfg.volume)
            luts.append(build_volume_lut(crop_cam, cfg.volume,
                                         cam_coords=self._voxel_cache[k]))
        volume = integration.lift_to_volume([s.feature2d for s in steps], luts, cfg.volume)
        # Consensus gate before scoring: a single view cannot localize along
        # its own ray (the ray through its target blob scores as high as the
        # true position), so voxels seen by fewer than two views are dropped.
        # The rest are reweighted from mean to sum/K: per-voxel means jump by
        # count ratios exactly at coverage boundaries, which would pull the
        # peak to the edge of an occluded view's crop.
        min_views = min(2, len(frames))
        keep = volume.view_count >= min_views
        if keep.any():
            scored = integration.FeatureVolume(
                values=volume.values * (keep * volume.view_count / len(frames)),
                spec=volume.spec, view_count=volume.view_count)
        else:
            scored = volume
        bev = integration.aggregate_z(scored, self.fusion.z_kernel, self.fusion.channel_mix)
        bev_score = integration.bev_head(bev, self.fusion.bev)
        consensus = volume.view_count.max(axis=2) >= min_views
        voting = np.where(consensus, bev_score, 0.0) if consensus.any() else bev_score

        flat_peak = int(np.argmax(voting))
        ix, iy = divmod(flat_peak, voting.shape[1])
        peak_world = _score_centroid(voting, ix, iy, cfg.volume)
        reliable = bool(voting[ix, iy] >= cfg.bev_reliable_threshold)

        token3d = integration.embed_3d_token(bev, self.fusion.token)

        refined_boxes, scores = [], []
        for k, step in enumerate(steps):
            refined_tokens = integration.spatial_refine(token3d, step.tokens,
                                                        self.fusion.refine_blocks)
            gs = cfg.search_out // cfg.patch
            rhead = trackhead.run_box_head(self.head_refined, refined_tokens, (gs, gs))
            if reliable:
                prior, prior_offsets = self._bev_prior(voting, step.crop, self.cameras[k])
                rhead.score_map = rhead.score_map * (
                    cfg.prior_floor + (1.0 - cfg.prior_floor) * prior)
                rhead.offset_map = prior_offsets
            box = trackhead.decode_bbox(rhead, step.crop, cfg.patch, cfg.vis_threshold)
            refined_boxes.append(box)
            scores.append(float(rhead.score_map.max()))
            self.commit_box(state, k, box, localized=reliable)

        return MultiStepOutput(boxes=refined_boxes, peak_cell=(ix, iy), peak_world=peak_world,
                               bev_score=bev_score, bev_reliable=reliable, steps=steps,
                               scores=scores)

    # -- sequence driver -----------------------------------------------------

    def run_sequence(self, bundle, mode="multi", on_step=None):
        """Stream a loaded sequence; returns the per-frame track records.

        on_step, when given, receives (frame_index, step_result) with the
        MultiStepOutput (multi mode) or the list of StepOutputs (single).
        """
        if mode not in ("single", "multi"):
            raise ContractError("bad-mode", f"mode must be single or multi, got {mode}")
        t_start = time.perf_counter()
        records, bev_track = [], []
        n = bundle.n_frames
        if n > 0:
            frames0 = [bundle.feature_map(k, 0) for k in range(len(bundle.views))]
            init = [bundle.annotations[k][0] for k in range(len(bundle.views))]
            try:
                state = self.init_track(frames0, init)
            except ContractError as exc:
                raise ContractError(exc.code, f"frame 0: {exc.message}") from exc
            for t in range(n):
                frames = [bundle.feature_map(k, t) for k in range(len(bundle.views))]
                try:
                    if mode == "multi":
                        out = self.track_step_multiview(state, frames)
                        for k, box in enumerate(out.boxes):
                            records.append(BoxRecord(frame=t, view=k, box=box,
                                                     score=out.scores[k]))
                        bev_track.append((t, out.peak_world[0], out.peak_world[1]))
                        if on_step is not None:
                            on_step(t, out)
                    else:
                        steps = []
                        for k in range(len(bundle.views)):
                            step = self.track_step_single(state, k, frames[k])
                            self.commit_box(state, k, step.box)
                            records.append(BoxRecord(frame=t, view=k, box=step.box,
                                                     score=step.peak_score))
                            steps.append(step)
                        if on_step is not None:
                            on_step(t, steps)
                except ContractError as exc:
                    raise ContractError(exc.code, f"frame {t}: {exc.message}") from exc
                state.frame_index = t + 1
        elapsed = time.perf_counter() - t_start
        stats = {"frames": n, "seconds": elapsed,
                 "fps": (n / elapsed) if elapsed > 0 and n else 0.0}
        return TrackRun(mode=mode, records=records, bev_track=bev_track, stats=stats)
