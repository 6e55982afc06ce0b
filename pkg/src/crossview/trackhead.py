"""View-specific output machinery: temporal reweighting, the center-heatmap
box head and its decode, the dense 2D feature mapping, and the loss terms.

The box head is a deliberate toy stand-in for a trained head. Its size and
offset subnets are seeded linear readouts; the classification subnet scores
each cell by the energy of its reweighted token relative to the map median,
so that synthetic target blobs produce a peaked score map without any
training. Decoding and the losses are exact.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from crossview import boxes
from crossview.boxes import BBox2D
from crossview.errors import ContractError

ENERGY_EPS = 1e-12
DEFAULT_VIS_THRESHOLD = 0.3
FLAT_SCORE = 0.2  # cls response on a featureless (constant-energy) map


@dataclass(frozen=True)
class LossWeights:
    """Balancing coefficients of the combined tracking loss."""

    lambda_giou: float = 5.0
    lambda_l1: float = 2.0
    lambda_bev: float = 0.1

    def __post_init__(self):
        if min(self.lambda_giou, self.lambda_l1, self.lambda_bev) < 0:
            raise ContractError("negative-weight", "loss weights must be non-negative")


@dataclass
class HeadOutput:
    """Per-cell maps of the box head, all sharing one (Hc, Wc) extent."""

    score_map: np.ndarray    # (Hc, Wc), sigmoid scores in [0, 1]
    size_map: np.ndarray     # (2, Hc, Wc), (w, h) in cell units
    offset_map: np.ndarray   # (2, Hc, Wc), sub-cell (x, y) offsets in [0, 1)


def temporal_reweight(search_tokens, temporal_token, use_sigmoid=False):
    """Scale each search token by its similarity to the temporal token.

    out_i = <token_i, T> * token_i. No normalization of the similarities by
    default; use_sigmoid squashes them through a sigmoid first.
    """
    tokens = np.asarray(search_tokens, dtype=np.float64)
    tt = np.asarray(temporal_token, dtype=np.float64).reshape(-1)
    if tokens.ndim != 2 or tokens.shape[1] != tt.shape[0]:
        raise ContractError("bad-shape",
                            f"tokens {tokens.shape} incompatible with temporal token {tt.shape}")
    sims = tokens @ tt
    if use_sigmoid:
        sims = 1.0 / (1.0 + np.exp(-sims))
    return tokens * sims[:, None]


@dataclass
class Feature2dParams:
    """Seeded 1x1 channel projection used by map_to_feature2d."""

    proj: np.ndarray   # (D, channels)
    patch: int

    @property
    def channels(self):
        return self.proj.shape[1]


def make_feature2d_params(gen, dim, channels=32, patch=14, scale=0.05):
    return Feature2dParams(proj=gen.normal(dim, channels, scale=scale), patch=patch)


def map_to_feature2d(reweighted, search_size, params):
    """Tokens (N,D) -> dense (channels, H, W) map at search resolution.

    Tokens are arranged on the (H/p, W/p) grid row-major, channel-projected,
    then nearest-neighbor upsampled by the patch size.
    """
    tokens = np.asarray(reweighted, dtype=np.float64)
    hs, ws = int(search_size[0]), int(search_size[1])
    p = params.patch
    if hs % p or ws % p:
        raise ContractError("indivisible-size", f"search size {hs}x{ws} not divisible by patch {p}")
    gh, gw = hs // p, ws // p
    if tokens.shape[0] != gh * gw:
        raise ContractError("bad-shape",
                            f"{tokens.shape[0]} tokens cannot fill a {gh}x{gw} grid")
    grid = (tokens @ params.proj).reshape(gh, gw, params.channels).transpose(2, 0, 1)
    return np.repeat(np.repeat(grid, p, axis=1), p, axis=2)


@dataclass
class BoxHeadParams:
    """Toy center-heatmap head: energy-based cls + seeded size/offset nets."""

    w_size: np.ndarray     # (D, 2)
    w_offset: np.ndarray   # (D, 2)
    b_offset: np.ndarray   # (2,)
    size_prior_cells: float
    cls_gain: float = 1.0
    cls_bias: float = math.log(FLAT_SCORE / (1.0 - FLAT_SCORE))


def make_box_head_params(gen, dim, size_prior_cells, scale=0.01):
    return BoxHeadParams(
        w_size=gen.normal(dim, 2, scale=scale),
        w_offset=gen.normal(dim, 2, scale=scale),
        b_offset=gen.normal(2, scale=scale),
        size_prior_cells=float(size_prior_cells),
    )


def run_box_head(params, tokens, grid_shape):
    """Evaluate the head on reweighted tokens laid out row-major on a grid."""
    tokens = np.asarray(tokens, dtype=np.float64)
    hc, wc = grid_shape
    if tokens.shape[0] != hc * wc:
        raise ContractError("bad-shape", f"{tokens.shape[0]} tokens for a {hc}x{wc} head grid")
    energy = np.mean(tokens ** 2, axis=1)
    rel = np.log(energy + ENERGY_EPS) - np.log(np.median(energy) + ENERGY_EPS)
    score = 1.0 / (1.0 + np.exp(-(params.cls_gain * rel + params.cls_bias)))
    size = params.size_prior_cells * np.exp(tokens @ params.w_size)
    offset = 1.0 / (1.0 + np.exp(-(tokens @ params.w_offset + params.b_offset)))
    return HeadOutput(
        score_map=score.reshape(hc, wc),
        size_map=size.reshape(hc, wc, 2).transpose(2, 0, 1),
        offset_map=offset.reshape(hc, wc, 2).transpose(2, 0, 1),
    )


def decode_bbox(head, crop, stride, visibility_threshold=DEFAULT_VIS_THRESHOLD):
    """Peak-cell decode of a HeadOutput back to full-frame pixels.

    Argmax ties resolve to the first cell in row-major order. The predicted
    visible flag is (peak score >= visibility_threshold).
    """
    score = np.asarray(head.score_map, dtype=np.float64)
    idx = int(np.argmax(score))
    iy, ix = divmod(idx, score.shape[1])
    off_x = float(head.offset_map[0, iy, ix])
    off_y = float(head.offset_map[1, iy, ix])
    w = float(head.size_map[0, iy, ix]) * stride
    h = float(head.size_map[1, iy, ix]) * stride
    cx = (ix + off_x) * stride
    cy = (iy + off_y) * stride
    crop_box = BBox2D(x=cx - w / 2.0, y=cy - h / 2.0, w=w, h=h,
                      visible=bool(score[iy, ix] >= visibility_threshold))
    return crop.box_to_frame(crop_box)


def focal_loss_cls(pred, gt_heatmap, alpha=2.0, beta=4.0):
    """Penalty-reduced focal loss for center heatmaps.

    Cells where gt == 1 are positives; elsewhere the penalty is damped by
    (1-gt)^beta. Normalized by the number of positives (1 when there are
    none, with a warning).
    """
    p = np.clip(np.asarray(pred, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    g = np.asarray(gt_heatmap, dtype=np.float64)
    if p.shape != g.shape:
        raise ContractError("bad-shape", f"pred {p.shape} vs gt {g.shape}")
    pos = g == 1.0
    n_pos = int(pos.sum())
    if n_pos == 0:
        warnings.warn("focal_loss_cls: ground truth has no peak cell", stacklevel=2)
    pos_term = np.where(pos, (1.0 - p) ** alpha * np.log(p), 0.0).sum()
    neg_term = np.where(~pos, (1.0 - g) ** beta * p ** alpha * np.log(1.0 - p), 0.0).sum()
    return float(-(pos_term + neg_term) / max(n_pos, 1))


def giou(a, b):
    """Generalized IoU of two visible, non-degenerate boxes; in (-1, 1]."""
    for box in (a, b):
        if not box.visible:
            raise ContractError("invisible-box", "GIoU needs visible boxes")
        if box.w <= 0 or box.h <= 0:
            raise ContractError("degenerate-box", f"GIoU needs positive sizes, got {box.w}x{box.h}")
    inter = boxes.intersection_area(a, b)
    union = a.area + b.area - inter
    enclosing = boxes.enclosing_area(a, b)
    return inter / union - (enclosing - union) / enclosing


def giou_loss(a, b):
    """1 - GIoU; zero iff the boxes coincide, always < 2."""
    return 1.0 - giou(a, b)


def l1_box_loss(pred, gt, norm_size):
    """Mean absolute error of (cx, cy, w, h), normalized by the crop size."""
    nw, nh = float(norm_size[0]), float(norm_size[1])
    diffs = (abs(pred.cx - gt.cx) / nw, abs(pred.cy - gt.cy) / nh,
             abs(pred.w - gt.w) / nw, abs(pred.h - gt.h) / nh)
    return float(sum(diffs) / 4.0)


def total_track_loss(cls_term, giou_term, l1_term, bev_term, weights=LossWeights()):
    """Weighted combination of the four loss terms."""
    terms = (cls_term, giou_term, l1_term, bev_term)
    for name, t in zip(("cls", "giou", "l1", "bev"), terms):
        if not np.isfinite(t) or t < 0:
            raise ContractError("bad-loss-term", f"{name} term must be finite and >= 0, got {t}")
    return float(cls_term
                 + weights.lambda_giou * giou_term
                 + weights.lambda_l1 * l1_term
                 + weights.lambda_bev * bev_term)
