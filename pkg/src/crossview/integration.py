"""Multi-view core: lift per-view feature maps into the shared 3D volume,
collapse it onto the BEV plane, score it, embed it as a token, and refine
per-view tokens with that token in the loop.

Volume accumulation sorts the per-view contributions before summing, so the
result is bit-identical under any permutation of the input views (plain
accumulation order would leak into the float rounding).
"""

from dataclasses import dataclass

import numpy as np

from crossview import kernels, tensorops
from crossview.camera import VolumeSpec
from crossview.errors import ContractError


@dataclass
class FeatureVolume:
    values: np.ndarray       # (C, nx, ny, nz)
    spec: VolumeSpec
    view_count: np.ndarray   # (nx, ny, nz) contributing views per voxel


@dataclass
class BevFeature:
    values: np.ndarray       # (C, nx, ny)


def lift_to_volume(features, luts, spec):
    """Populate the volume: per voxel, the mean of the in-bounds views'
    bilinear samples; zero where no view contributes."""
    if len(features) == 0:
        raise ContractError("no-views", "lift_to_volume needs at least one view")
    if len(features) != len(luts):
        raise ContractError("bad-shape", f"{len(features)} feature maps vs {len(luts)} LUTs")
    channels = features[0].shape[0]
    n_vox = spec.n_voxels

    per_view = []  # (in-bounds mask, samples for the masked voxels)
    counts = np.zeros(n_vox, dtype=np.int32)
    for fmap, lut in zip(features, luts):
        fmap = np.asarray(fmap, dtype=np.float64)
        if fmap.shape[0] != channels:
            raise ContractError("bad-shape", "feature maps disagree on channel count")
        if fmap.shape[1] != lut.image_height or fmap.shape[2] != lut.image_width:
            raise ContractError("bad-shape",
                                f"feature map {fmap.shape[1:]} does not match LUT image "
                                f"{lut.image_height}x{lut.image_width}")
        mask = lut.in_bounds.ravel()
        sampled = kernels.bilinear_gather(fmap, lut.u.ravel()[mask], lut.v.ravel()[mask]).T \
            if mask.any() else np.zeros((channels, 0))
        per_view.append((mask, sampled))
        counts += mask

    # Plain accumulation is exact and order-free wherever at most one view
    # contributes; voxels with >= 2 views are re-summed in sorted order so
    # the result is bit-identical under any view permutation.
    total = np.zeros((channels, n_vox))
    for mask, sampled in per_view:
        total[:, mask] += sampled
    shared = np.flatnonzero(counts >= 2)
    if shared.size:
        stack = np.zeros((len(per_view), channels, shared.size))
        for k, (mask, sampled) in enumerate(per_view):
            pos = np.cumsum(mask) - 1           # voxel -> column in sampled
            sel = mask[shared]
            if sel.any():
                stack[k][:, sel] = sampled[:, pos[shared[sel]]]
        stack.sort(axis=0)
        total[:, shared] = stack.sum(axis=0)
    mean = np.divide(total, counts, out=total, where=counts > 0)

    shape = (spec.nx, spec.ny, spec.nz)
    return FeatureVolume(values=mean.reshape((channels,) + shape), spec=spec,
                         view_count=counts.reshape(shape))


def aggregate_z(vol, kernel, channel_mix=None):
    """Collapse the Z axis with a per-channel (or shared) 1D kernel, then
    optionally mix channels with a 1x1 matrix."""
    values = vol.values
    channels, nx, ny, nz = values.shape
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim == 1:
        if k.shape[0] != nz:
            raise ContractError("bad-shape", f"kernel length {k.shape[0]} != nz {nz}")
        k = np.broadcast_to(k, (channels, nz))
    elif k.shape != (channels, nz):
        raise ContractError("bad-shape", f"kernel must be ({channels},{nz}) or ({nz},), got {k.shape}")
    flat = values.reshape(channels, nx * ny, nz)
    agg = np.zeros((channels, nx * ny))
    for z in range(nz):  # short fixed z loop beats a general contraction here
        agg += flat[:, :, z] * k[:, z:z + 1]
    if channel_mix is not None:
        mix = np.asarray(channel_mix, dtype=np.float64)
        if mix.shape != (channels, channels):
            raise ContractError("bad-shape", f"channel mix must be {channels}x{channels}")
        agg = mix @ agg
    return BevFeature(values=agg.reshape(channels, nx, ny))


@dataclass
class BevHeadParams:
    """Two-layer cell-scoring head, monotone in feature magnitude by
    construction: the first layer's rows come in +/- pairs (so the rectified
    responses fold to |g . f|, insensitive to feature sign/direction) and the
    second layer's weights are non-negative. The input is standardized by
    its global RMS so the response is scale-free: cells far above the map's
    typical magnitude saturate toward 1, empty cells sit at the bias."""

    w1: np.ndarray        # (2*pairs, C), rows [G; -G]
    b1: np.ndarray        # (2*pairs,)
    w2: np.ndarray        # (2*pairs,) non-negative
    b2: float
    logit_bound: float = 30.0


def make_bev_head_params(gen, channels=32, pairs=32, scale=0.3):
    g = gen.normal(pairs, channels, scale=scale)
    gains = 4.0 * np.abs(gen.normal(pairs, scale=scale)) / pairs
    return BevHeadParams(
        w1=np.vstack([g, -g]),
        b1=np.zeros(2 * pairs),
        w2=np.concatenate([gains, gains]),
        b2=float(np.log(0.1 / 0.9)),
    )


def bev_head(bev, params):
    """Per-cell score map in (0, 1) from the BEV feature.

    Pre-sigmoid activations are squashed through a bounded tanh so strong
    peaks never collapse to float ties at exactly 1.0 (argmax order must
    survive saturation).
    """
    c, nx, ny = bev.values.shape
    rms = float(np.sqrt(np.mean(bev.values ** 2)))
    f = bev.values.reshape(c, nx * ny) / max(rms, 1e-300)
    h = params.w1 @ f + params.b1[:, None]
    np.maximum(h, 0.0, out=h)
    raw = params.w2 @ h + params.b2
    logits = params.logit_bound * np.tanh(raw / params.logit_bound)
    return (1.0 / (1.0 + np.exp(-logits))).reshape(nx, ny)


def make_bev_target(ground_xy, grid, radius_cells=3):
    """Truncated-Gaussian supervision map for a ground position.

    Peak 1 at the target cell, sigma = radius/3, zero outside the
    (2r+1)-cell square window. Returns (map indexed [ix, iy], present);
    a point outside the grid yields an all-zero map and present=False.
    """
    target = np.zeros((grid.cells_x, grid.cells_y))
    cell = grid.world_to_cell(float(ground_xy[0]), float(ground_xy[1]))
    if cell is None:
        return target, False
    ix, iy = cell
    r = int(radius_cells)
    if r == 0:
        target[ix, iy] = 1.0
        return target, True
    sigma = r / 3.0
    x0, x1 = max(ix - r, 0), min(ix + r, grid.cells_x - 1)
    y0, y1 = max(iy - r, 0), min(iy + r, grid.cells_y - 1)
    dx = np.arange(x0, x1 + 1) - ix
    dy = np.arange(y0, y1 + 1) - iy
    target[x0:x1 + 1, y0:y1 + 1] = np.exp(
        -(dx[:, None] ** 2 + dy[None, :] ** 2) / (2.0 * sigma ** 2))
    return target, True


@dataclass
class TokenEmbedParams:
    """Strided mean-pool to a pool_grid^2 summary, then an affine map to D."""

    w: np.ndarray   # (C * pool_grid^2, D)
    b: np.ndarray   # (D,)
    pool_grid: int


def make_token_embed_params(gen, channels=32, dim=64, pool_grid=4, scale=0.05):
    return TokenEmbedParams(w=gen.normal(channels * pool_grid ** 2, dim, scale=scale),
                            b=gen.normal(dim, scale=scale), pool_grid=pool_grid)


def embed_3d_token(bev, params):
    """Embed the BEV feature into a single (1, D) spatial token."""
    c, nx, ny = bev.values.shape
    g = params.pool_grid
    xb = (np.arange(g + 1) * nx) // g
    yb = (np.arange(g + 1) * ny) // g
    pooled = np.empty((c, g, g))
    for i in range(g):
        for j in range(g):
            block = bev.values[:, xb[i]:xb[i + 1], yb[j]:yb[j + 1]]
            pooled[:, i, j] = block.mean(axis=(1, 2))
    return (pooled.reshape(1, -1) @ params.w) + params.b


def spatial_refine(token3d, view_features, blocks):
    """Refine one view's tokens with the spatial token in the sequence.

    Concatenates [T_3D; tokens], runs the blocks, returns the refined token
    rows (the spatial row is dropped). Views are refined independently.
    """
    t3d = np.asarray(token3d, dtype=np.float64).reshape(1, -1)
    feats = np.asarray(view_features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != t3d.shape[1]:
        raise ContractError("bad-shape",
                            f"view features {feats.shape} incompatible with token {t3d.shape}")
    x = np.vstack([t3d, feats])
    for blk in blocks:
        x = tensorops.attention_forward(blk, x)
    return x[1:]


@dataclass
class FusionParams:
    """All seeded parameters of the multi-view integration stage."""

    z_kernel: np.ndarray          # (C, nz) positive, near 1/nz
    channel_mix: np.ndarray       # (C, C), near identity
    bev: BevHeadParams
    token: TokenEmbedParams
    refine_blocks: list


def make_fusion_params(gen, channels=32, nz=3, dim=64, heads=4, refine_depth=2,
                       z_shared=False):
    if z_shared:
        z_kernel = np.broadcast_to((1.0 / nz) * np.exp(gen.normal(nz, scale=0.1)),
                                   (channels, nz)).copy()
    else:
        z_kernel = (1.0 / nz) * np.exp(gen.normal(channels, nz, scale=0.1))
    return FusionParams(
        z_kernel=z_kernel,
        channel_mix=np.eye(channels) + gen.normal(channels, channels, scale=0.02),
        bev=make_bev_head_params(gen, channels=channels),
        token=make_token_embed_params(gen, channels=channels, dim=dim),
        refine_blocks=[tensorops.make_attention_params(gen, dim, num_heads=heads)
                       for _ in range(refine_depth)],
    )
