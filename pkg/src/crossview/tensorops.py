"""Minimal dense-array math used by the tracking pipeline.

Everything is float64 numpy (finite-difference oracles need the headroom)
and deterministic: parameters come from ParamGen, a seeded factory, and all
forwards are pure functions of (params, inputs).
"""

from dataclasses import dataclass

import numpy as np

from crossview import kernels
from crossview.errors import ContractError

LN_EPS = 1e-6


class ParamGen:
    """Seeded weight factory; creation order defines the parameters."""

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def normal(self, *shape, scale=0.02):
        return self.rng.normal(0.0, scale, size=shape)

    def uniform(self, *shape, low=-1.0, high=1.0):
        return self.rng.uniform(low, high, size=shape)


def softmax(x, axis=-1):
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def layer_norm(x, gain, bias, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def gelu(x):
    # tanh form (Hendrycks-Gimpel approximation)
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


def bilinear_sample(fmap, u, v):
    """Four-neighbor bilinear sample of a (C,H,W) map at one point.

    Coordinates are clamped to [0, W-1] x [0, H-1]; exact at integer nodes.
    Returns a (C,) vector.
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim != 3:
        raise ContractError("bad-shape", f"expected (C,H,W) map, got {fmap.shape}")
    return kernels.bilinear_gather(fmap, np.array([float(u)]), np.array([float(v)]))[0]


@dataclass
class AttentionParams:
    """One pre-norm transformer block (attention + feed-forward)."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray
    num_heads: int = 4

    @property
    def dim(self):
        return self.wq.shape[0]


def make_attention_params(gen, dim, num_heads=4, ffn_mult=4, scale=0.02):
    if dim % num_heads != 0:
        raise ContractError("bad-heads", f"dim {dim} not divisible by {num_heads} heads")
    hidden = ffn_mult * dim
    return AttentionParams(
        wq=gen.normal(dim, dim, scale=scale),
        wk=gen.normal(dim, dim, scale=scale),
        wv=gen.normal(dim, dim, scale=scale),
        wo=gen.normal(dim, dim, scale=scale),
        ln1_gain=np.ones(dim), ln1_bias=np.zeros(dim),
        ln2_gain=np.ones(dim), ln2_bias=np.zeros(dim),
        ffn_w1=gen.normal(dim, hidden, scale=scale),
        ffn_b1=np.zeros(hidden),
        ffn_w2=gen.normal(hidden, dim, scale=scale),
        ffn_b2=np.zeros(dim),
        num_heads=num_heads,
    )


def attention_weights(params, tokens, score_offset=0.0):
    """Row-stochastic attention matrices (H, N, N) of the block's MHA."""
    x = np.asarray(tokens, dtype=np.float64)
    _check_tokens(params, x)
    n, d = x.shape
    heads, hd = params.num_heads, d // params.num_heads
    ln = layer_norm(x, params.ln1_gain, params.ln1_bias)
    q = (ln @ params.wq).reshape(n, heads, hd).transpose(1, 0, 2)
    k = (ln @ params.wk).reshape(n, heads, hd).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(hd) + score_offset
    return softmax(scores, axis=-1)


def attention_forward(params, tokens, score_offset=0.0):
    """Pre-norm block: x + MHA(LN(x)), then + FFN(LN(.)).

    score_offset is a test hook adding a constant to every pre-softmax
    score (the weights are invariant to it).
    """
    x = np.asarray(tokens, dtype=np.float64)
    _check_tokens(params, x)
    n, d = x.shape
    heads, hd = params.num_heads, d // params.num_heads

    ln = layer_norm(x, params.ln1_gain, params.ln1_bias)
    q = (ln @ params.wq).reshape(n, heads, hd).transpose(1, 0, 2)
    k = (ln @ params.wk).reshape(n, heads, hd).transpose(1, 0, 2)
    v = (ln @ params.wv).reshape(n, heads, hd).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(hd) + score_offset
    w = softmax(scores, axis=-1)
    ctx = (w @ v).transpose(1, 0, 2).reshape(n, d)
    h = x + ctx @ params.wo

    ln2 = layer_norm(h, params.ln2_gain, params.ln2_bias)
    return h + gelu(ln2 @ params.ffn_w1 + params.ffn_b1) @ params.ffn_w2 + params.ffn_b2


def _check_tokens(params, x):
    if x.ndim != 2 or x.shape[0] < 1:
        raise ContractError("bad-shape", f"tokens must be (N,D), got {x.shape}")
    if x.shape[1] != params.dim:
        raise ContractError("bad-shape",
                            f"token dim {x.shape[1]} does not match params dim {params.dim}")


def finite_diff_grad(f, x, eps=1e-5):
    """Central-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)  # private copy; f sees the perturbed copy
    grad = np.empty_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ContractError("non-finite-eval",
                                f"f non-finite at perturbed coordinate {np.unravel_index(i, x.shape)}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


# ---------------------------------------------------------------------------
# Golden array snapshots.
#
# Byte layout (all little-endian): uint32 rank, then rank uint64 extents,
# then the values as float64 in C (row-major) order.

def save_array(path, arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(np.array(arr.ndim, dtype="<u4").tobytes())
        fh.write(np.asarray(arr.shape, dtype="<u8").tobytes())
        fh.write(arr.astype("<f8", copy=False).tobytes())


def load_array(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ContractError("bad-snapshot", f"{path}: truncated header")
    rank = int(np.frombuffer(raw, dtype="<u4", count=1)[0])
    shape = tuple(int(s) for s in np.frombuffer(raw, dtype="<u8", count=rank, offset=4))
    data = np.frombuffer(raw, dtype="<f8", offset=4 + 8 * rank)
    expected = int(np.prod(shape)) if shape else 1
    if data.size != expected:
        raise ContractError("bad-snapshot",
                            f"{path}: payload has {data.size} values, header implies {expected}")
    return data.reshape(shape).astype(np.float64)
