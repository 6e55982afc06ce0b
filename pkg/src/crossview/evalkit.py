"""Single-object tracking evaluation: overlap/precision metrics and curves,
recovery and robustness statistics, and automatic attribute labeling.

Conventions: frames with invisible ground truth are excluded from AUC,
precision and normalized precision; a visible ground truth paired with an
invisible prediction scores overlap 0 (a miss). Multi-sequence numbers are
averaged per sequence, then across sequences.
"""

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from crossview import boxes as boxmod
from crossview.errors import ContractError

SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
PRECISION_THRESHOLDS = np.linspace(0.0, 50.0, 51)       # pixels
NORM_PRECISION_THRESHOLDS = np.linspace(0.0, 0.5, 51)
DEFAULT_PRECISION_PX = 20.0
DEFAULT_NORM_PRECISION = 0.2
DEFAULT_RECOVERY_WINDOW = 10
RECOVERY_IOU = 0.5
LOSS_IOU = 0.1
LOSS_PATIENCE = 10
LOW_RESOLUTION_AREA = 1000.0
RATIO_BAND = (0.5, 2.0)


def iou(a, b):
    """Intersection over union of two visible boxes, in [0, 1]."""
    if not (a.visible and b.visible):
        raise ContractError("invisible-box", "IoU is undefined for invisible boxes")
    inter = boxmod.intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def _frame_iou(pred, gt):
    """Per-frame overlap with the miss convention (invisible pred -> 0)."""
    if pred is None or not pred.visible:
        return 0.0
    return iou(pred, gt)


def _check_lengths(pred, gt):
    if len(pred) != len(gt):
        raise ContractError("bad-shape", f"{len(pred)} predictions vs {len(gt)} ground truths")


def sequence_auc(pred, gt):
    """Mean overlap over gt-visible frames plus the 21-point success curve.

    The curve holds the fraction of gt-visible frames with IoU strictly
    above each threshold. Returns (auc, curve); auc is None when no frame
    has visible ground truth.
    """
    _check_lengths(pred, gt)
    ious = np.array([_frame_iou(p, g) for p, g in zip(pred, gt) if g.visible])
    if ious.size == 0:
        return None, np.zeros(len(SUCCESS_THRESHOLDS))
    curve = np.array([(ious > t).mean() for t in SUCCESS_THRESHOLDS])
    return float(ious.mean()), curve


def _center_distances(pred, gt):
    """(distances, normalized distances) over gt-visible frames; misses are inf."""
    dists, norm_dists = [], []
    for p, g in zip(pred, gt):
        if not g.visible:
            continue
        if p is None or not p.visible:
            dists.append(math.inf)
            norm_dists.append(math.inf)
            continue
        dists.append(boxmod.center_distance(p, g))
        if g.w <= 0 or g.h <= 0:
            warnings.warn("zero-size visible ground-truth box excluded from "
                          "normalized precision", stacklevel=3)
            norm_dists.append(None)
        else:
            norm_dists.append(math.hypot((p.cx - g.cx) / g.w, (p.cy - g.cy) / g.h))
    return dists, [d for d in norm_dists if d is not None]


def precision_at(pred, gt, threshold_px=DEFAULT_PRECISION_PX):
    """Fraction of gt-visible frames with center error <= threshold_px."""
    _check_lengths(pred, gt)
    dists, _ = _center_distances(pred, gt)
    if not dists:
        return None
    return float(np.mean([d <= threshold_px for d in dists]))


def norm_precision_at(pred, gt, threshold=DEFAULT_NORM_PRECISION):
    """Precision after dividing the center error by the gt box size."""
    _check_lengths(pred, gt)
    _, norm = _center_distances(pred, gt)
    if not norm:
        return None
    return float(np.mean([d <= threshold for d in norm]))


def precision_curves(pred, gt):
    """(precision_curve, norm_precision_curve), 51 points each."""
    _check_lengths(pred, gt)
    dists, norm = _center_distances(pred, gt)
    pc = np.array([np.mean([d <= t for d in dists]) if dists else 0.0
                   for t in PRECISION_THRESHOLDS])
    nc = np.array([np.mean([d <= t for d in norm]) if norm else 0.0
                   for t in NORM_PRECISION_THRESHOLDS])
    return pc, nc


def invisibility_episodes(gt):
    """Maximal runs of gt-invisible frames followed by a visible frame.

    Yields (start, end) with end exclusive; gt[end] is visible.
    """
    episodes = []
    start = None
    for i, g in enumerate(gt):
        if not g.visible:
            if start is None:
                start = i
        elif start is not None:
            episodes.append((start, i))
            start = None
    return episodes


def recovery_rate(pred, gt, window_k=DEFAULT_RECOVERY_WINDOW, recovery_iou=RECOVERY_IOU):
    """Fraction of invisibility episodes after which tracking resumes.

    Recovered means: within the first window_k gt-visible frames after the
    target reappears there is a frame with IoU >= recovery_iou. Returns
    (rate, n_episodes); rate is None when the sequence has no episode.
    """
    _check_lengths(pred, gt)
    episodes = invisibility_episodes(gt)
    if not episodes:
        return None, 0
    recovered = 0
    for _, end in episodes:
        seen = 0
        for i in range(end, len(gt)):
            if not gt[i].visible:
                continue
            seen += 1
            if _frame_iou(pred[i], gt[i]) >= recovery_iou:
                recovered += 1
                break
            if seen >= window_k:
                break
    return recovered / len(episodes), len(episodes)


def robust_tracking(pred, gt, loss_iou=LOSS_IOU, patience=LOSS_PATIENCE):
    """Longest clean run and the number of simulated restarts.

    A frame is lost when gt is visible and overlap < loss_iou. Once loss
    persists for more than patience consecutive frames a restart is logged
    and the loss counter resets (the trace is treated as re-aligned).
    Returns (max_continuous_length, restarts).
    """
    _check_lengths(pred, gt)
    max_run = run = loss_run = restarts = 0
    for p, g in zip(pred, gt):
        lost = g.visible and _frame_iou(p, g) < loss_iou
        if lost:
            run = 0
            loss_run += 1
            if loss_run > patience:
                restarts += 1
                loss_run = 0
        else:
            run += 1
            loss_run = 0
            max_run = max(max_run, run)
    return max_run, restarts


def auto_attributes(gt):
    """Per-frame LR / ARC / SV flags computed from the gt boxes.

    LR: box area below 1000 px. ARC / SV: aspect-ratio or area ratio to the
    first frame outside [0.5, 2]. The first frame must be visible and
    non-degenerate; invisible frames get all-False flags.
    """
    if not gt:
        raise ContractError("empty-sequence", "attributes need at least one frame")
    first = gt[0]
    if not first.visible or first.w <= 0 or first.h <= 0:
        raise ContractError("degenerate-first-box",
                            "attribute reference frame must be visible with positive size")
    ref_aspect = first.w / first.h
    ref_area = first.area
    n = len(gt)
    flags = {"LR": np.zeros(n, dtype=bool), "ARC": np.zeros(n, dtype=bool),
             "SV": np.zeros(n, dtype=bool)}
    lo, hi = RATIO_BAND
    for i, g in enumerate(gt):
        if not g.visible or g.w <= 0 or g.h <= 0:
            continue
        flags["LR"][i] = g.area < LOW_RESOLUTION_AREA
        aspect_ratio = (g.w / g.h) / ref_aspect
        flags["ARC"][i] = not lo <= aspect_ratio <= hi
        area_ratio = g.area / ref_area
        flags["SV"][i] = not lo <= area_ratio <= hi
    return flags


@dataclass
class EvalResult:
    auc: float
    precision: float
    norm_precision: float
    success_curve: np.ndarray
    precision_curve: np.ndarray
    norm_precision_curve: np.ndarray
    recovery_rate: float          # None without episodes
    recovery_episodes: int
    max_continuous_length: int
    restarts: int
    attributes: dict = field(default_factory=dict)
    n_frames: int = 0
    n_gt_visible: int = 0


def evaluate_sequence(pred, gt, recovery_window=DEFAULT_RECOVERY_WINDOW, manual_attrs=None):
    """Full per-sequence evaluation; manual_attrs adds name -> bool-array
    subsets to the attribute breakdown."""
    _check_lengths(pred, gt)
    auc, success = sequence_auc(pred, gt)
    prec = precision_at(pred, gt)
    nprec = norm_precision_at(pred, gt)
    pcurve, ncurve = precision_curves(pred, gt)
    rate, n_episodes = recovery_rate(pred, gt, recovery_window)
    max_len, restarts = robust_tracking(pred, gt)

    attr_flags = dict(auto_attributes(gt)) if gt and gt[0].visible and gt[0].area > 0 else {}
    if manual_attrs:
        attr_flags.update(manual_attrs)
    attributes = {}
    for name, mask in attr_flags.items():
        sub_pred = [p for p, m in zip(pred, mask) if m]
        sub_gt = [g for g, m in zip(gt, mask) if m]
        if not sub_gt:
            attributes[name] = {"frames": 0, "auc": None, "precision": None,
                                "norm_precision": None}
            continue
        a, _ = sequence_auc(sub_pred, sub_gt)
        attributes[name] = {"frames": len(sub_gt), "auc": a,
                            "precision": precision_at(sub_pred, sub_gt),
                            "norm_precision": norm_precision_at(sub_pred, sub_gt)}

    return EvalResult(
        auc=auc, precision=prec, norm_precision=nprec,
        success_curve=success, precision_curve=pcurve, norm_precision_curve=ncurve,
        recovery_rate=rate, recovery_episodes=n_episodes,
        max_continuous_length=max_len, restarts=restarts,
        attributes=attributes, n_frames=len(gt),
        n_gt_visible=sum(1 for g in gt if g.visible),
    )


def aggregate_results(results, per_frame=False):
    """Average EvalResults across sequences.

    Default: per-sequence averaging, then the mean over sequences. With
    per_frame=True the scalar metrics are weighted by gt-visible frames.
    """
    if not results:
        raise ContractError("empty-aggregate", "nothing to aggregate")

    def mean_of(values, weights):
        pairs = [(v, w) for v, w in zip(values, weights) if v is not None and w]
        if not pairs:
            return None
        if per_frame:
            total = sum(w for _, w in pairs)
            return sum(v * w for v, w in pairs) / total
        return sum(v for v, _ in pairs) / len(pairs)

    weights = [r.n_gt_visible for r in results]
    out = {
        "auc": mean_of([r.auc for r in results], weights),
        "precision": mean_of([r.precision for r in results], weights),
        "norm_precision": mean_of([r.norm_precision for r in results], weights),
        "recovery_rate": mean_of([r.recovery_rate for r in results],
                                 [r.recovery_episodes for r in results]),
        "max_continuous_length": float(np.mean([r.max_continuous_length for r in results])),
        "restarts": float(np.mean([r.restarts for r in results])),
        "sequences": len(results),
    }
    return out


# -- CSV emitters -----------------------------------------------------------

def write_curve_csv(path, thresholds, values):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "value"])
        for t, v in zip(thresholds, values):
            writer.writerow([f"{t:.6g}", f"{v:.6f}"])


def write_summary_csv(path, result):
    rows = [
        ("auc", result.auc), ("precision", result.precision),
        ("norm_precision", result.norm_precision),
        ("recovery_rate", result.recovery_rate),
        ("recovery_episodes", result.recovery_episodes),
        ("max_continuous_length", result.max_continuous_length),
        ("restarts", result.restarts),
        ("frames", result.n_frames), ("gt_visible_frames", result.n_gt_visible),
    ]
    for name, stats in sorted(result.attributes.items()):
        rows.append((f"attr_{name}_frames", stats["frames"]))
        rows.append((f"attr_{name}_auc", stats["auc"]))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for name, value in rows:
            writer.writerow([name, "" if value is None else f"{value:.6f}"
                             if isinstance(value, float) else str(value)])
