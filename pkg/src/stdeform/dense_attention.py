"""Dense multi-head attention over an explicit key set, with hand-written backward.

One query feature attends to every key feature through per-head bilinear
logits, softmax weights, and per-head value/output projections. The module
also carries the Monte-Carlo probe for how far softmax weights sit from the
uniform distribution when the projected queries and keys are unit normal at
initialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor_core import ClipFeatureMap, Tensor, make_rng, split_seed


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-logit subtraction)."""
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


@dataclass
class DenseAttnParams:
    """Per-head projections: logits use u/v, values use wp, outputs use wo.

    Shapes: u, v, wp are [M, C_v, C]; wo is [M, C, C_v] with C_v = C / M.
    """

    num_heads: int
    model_dim: int
    u: Tensor
    v: Tensor
    wp: Tensor
    wo: Tensor

    def __post_init__(self):
        m, c = self.num_heads, self.model_dim
        if m < 1 or c < 1 or c % m != 0:
            raise ParameterError(f"model_dim {c} must be a positive multiple of num_heads {m}")
        cv = c // m
        expect = {"u": (m, cv, c), "v": (m, cv, c), "wp": (m, cv, c), "wo": (m, c, cv)}
        for name, shape in expect.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise DimensionError(f"{name} must have shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ParameterError(f"{name} contains non-finite entries")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @staticmethod
    def random(num_heads: int, model_dim: int, seed) -> "DenseAttnParams":
        """All matrices drawn N(0, 1/sqrt(C))."""
        cv = model_dim // num_heads if num_heads else 0
        std = 1.0 / math.sqrt(model_dim)
        s = split_seed(seed, 4)
        shape = (num_heads, cv, model_dim)
        return DenseAttnParams(
            num_heads,
            model_dim,
            u=make_rng(s[0]).normal(0.0, std, shape),
            v=make_rng(s[1]).normal(0.0, std, shape),
            wp=make_rng(s[2]).normal(0.0, std, shape),
            wo=make_rng(s[3]).normal(0.0, std, (num_heads, model_dim, cv)),
        )

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + n: getattr(self, n) for n in ("u", "v", "wp", "wo")}


def _check_vec(name: str, vec: Tensor, c: int):
    if vec.ndim != 1 or vec.shape[0] != c:
        raise DimensionError(f"{name} must be a vector of length {c}, got shape {vec.shape}")


def attn_logits(params: DenseAttnParams, z_q: Tensor, x_k: Tensor) -> Tensor:
    """Per-head logit (U_m z_q) . (V_m x_k) / sqrt(C_v), returned as [M]."""
    c = params.model_dim
    _check_vec("z_q", np.asarray(z_q, dtype=np.float64), c)
    _check_vec("x_k", np.asarray(x_k, dtype=np.float64), c)
    uz = params.u @ z_q
    vx = params.v @ x_k
    return np.einsum("mi,mi->m", uz, vx) / math.sqrt(params.head_dim)


def multi_head_attn(params: DenseAttnParams, z_q: Tensor, keys, counter=None):
    """Attention output for one query over a key list.

    Returns (out, weights) where out has length C and weights is the [M, N_k]
    array of softmax attention weights (each row sums to 1).
    """
    c, m, cv = params.model_dim, params.num_heads, params.head_dim
    z_q = np.asarray(z_q, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    _check_vec("z_q", z_q, c)
    if keys.ndim != 2 or keys.shape[1] != c:
        raise DimensionError(f"keys must be [N_k, {c}], got shape {keys.shape}")
    n_k = keys.shape[0]
    if n_k < 1:
        raise ParameterError("key set must not be empty")

    uz = params.u @ z_q                                   # [M, C_v]
    vx = np.einsum("mic,kc->mki", params.v, keys)         # [M, N_k, C_v]
    wx = np.einsum("mic,kc->mki", params.wp, keys)        # [M, N_k, C_v]
    logits = np.einsum("mi,mki->mk", uz, vx) / math.sqrt(cv)
    weights = softmax(logits, axis=1)                     # [M, N_k]
    heads = np.einsum("mk,mki->mi", weights, wx)          # [M, C_v]
    out = np.einsum("mci,mi->c", params.wo, heads)

    if counter is not None:
        # Per-call accounting: keys are projected for this call.
        counter.add_matvec(cv, c, times=m)                # U z_q
        counter.add_matvec(cv, c, times=2 * m * n_k)      # V x_k and W' x_k
        counter.add_dot(cv, times=m * n_k)                # logits
        counter.add_weighted_sum(n_k, cv, times=m)        # attention-weighted values
        counter.add_matvec(c, cv, times=m)                # output projections
        counter.add_plain_adds((m - 1) * c)               # head accumulation
    return out, weights


def multi_head_attn_backward(params: DenseAttnParams, z_q: Tensor, keys, upstream: Tensor):
    """Gradients of upstream . multi_head_attn w.r.t. inputs and parameters.

    Returns a dict with keys "z_q" [C], "keys" [N_k, C], and "u"/"v"/"wp"/"wo"
    shaped like the parameter arrays.
    """
    c, m, cv = params.model_dim, params.num_heads, params.head_dim
    z_q = np.asarray(z_q, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    _check_vec("upstream", upstream, c)
    n_k = keys.shape[0]
    if n_k < 1:
        raise ParameterError("key set must not be empty")
    scale = 1.0 / math.sqrt(cv)

    # Recompute forward intermediates.
    uz = params.u @ z_q
    vx = np.einsum("mic,kc->mki", params.v, keys)
    wx = np.einsum("mic,kc->mki", params.wp, keys)
    logits = np.einsum("mi,mki->mk", uz, vx) * scale
    weights = softmax(logits, axis=1)
    heads = np.einsum("mk,mki->mi", weights, wx)

    g_heads = np.einsum("mci,c->mi", params.wo, upstream)            # [M, C_v]
    g_wo = np.einsum("c,mi->mci", upstream, heads)
    g_weights = np.einsum("mi,mki->mk", g_heads, wx)
    g_wx = weights[:, :, None] * g_heads[:, None, :]                 # [M, N_k, C_v]
    # Softmax Jacobian per head: a * (g - <a, g>).
    g_logits = weights * (g_weights - np.sum(weights * g_weights, axis=1, keepdims=True))
    g_uz = np.einsum("mk,mki->mi", g_logits, vx) * scale
    g_vx = g_logits[:, :, None] * uz[:, None, :] * scale

    g_u = np.einsum("mi,c->mic", g_uz, z_q)
    g_v = np.einsum("mki,kc->mic", g_vx, keys)
    g_wp = np.einsum("mki,kc->mic", g_wx, keys)
    g_z = np.einsum("mic,mi->c", params.u, g_uz)
    g_keys = np.einsum("mic,mki->kc", params.v, g_vx) + np.einsum(
        "mic,mki->kc", params.wp, g_wx
    )
    return {"z_q": g_z, "keys": g_keys, "u": g_u, "v": g_v, "wp": g_wp, "wo": g_wo}


def dense_encoder_pass(params: DenseAttnParams, fmap: ClipFeatureMap, counter=None) -> Tensor:
    """Every-cell-attends-to-every-cell pass over a clip feature map.

    Key/value projections are computed once per distinct cell and shared by
    all queries, which is the documented cost model of dense_attn_cost.
    Returns the [N, C] matrix of attention outputs in flattened cell order.
    """
    c, m, cv = params.model_dim, params.num_heads, params.head_dim
    if fmap.c_extent != c:
        raise DimensionError(f"feature map channels {fmap.c_extent} != model_dim {c}")
    feats = fmap.values.reshape(-1, c)                    # queries and keys alike
    n = feats.shape[0]

    uz = np.einsum("mic,qc->mqi", params.u, feats)        # [M, N, C_v]
    vx = np.einsum("mic,kc->mki", params.v, feats)
    wx = np.einsum("mic,kc->mki", params.wp, feats)
    logits = np.einsum("mqi,mki->mqk", uz, vx) / math.sqrt(cv)
    weights = softmax(logits, axis=2)                     # [M, N, N]
    heads = np.einsum("mqk,mki->mqi", weights, wx)
    out = np.einsum("mci,mqi->qc", params.wo, heads)

    if counter is not None:
        counter.add_matvec(cv, c, times=m * n)            # U projections, per query
        counter.add_matvec(cv, c, times=2 * m * n)        # V and W', per distinct key
        counter.add_dot(cv, times=m * n * n)              # logits
        counter.add_weighted_sum(n, cv, times=m * n)      # weighted value sums
        counter.add_matvec(c, cv, times=m * n)            # output projections
        counter.add_plain_adds((m - 1) * c, times=n)
    return out


def uniformity_at_init(n_k: int, trials: int, seed, c_v: int = 64,
                       force_zero_logits: bool = False):
    """Monte-Carlo deviation of init-time attention weights from uniform 1/N_k.

    Each trial draws the projected query u and projected keys v_k with unit
    normal coordinates, forms logits (u . v_k) / sqrt(C_v), applies softmax,
    and records max_k |A_k - 1/N_k|. Returns (scaled, unscaled) where
    scaled = N_k * mean-over-trials and unscaled is the raw mean.
    """
    if n_k < 2:
        raise ParameterError(f"n_k must be >= 2, got {n_k}")
    if trials < 1:
        raise ParameterError(f"trials must be >= 1, got {trials}")
    rng = make_rng(seed)
    devs = np.empty(trials)
    for i in range(trials):
        if force_zero_logits:
            logits = np.zeros(n_k)
        else:
            u = rng.normal(size=c_v)
            v = rng.normal(size=(n_k, c_v))
            logits = (v @ u) / math.sqrt(c_v)
        a = softmax(logits)
        devs[i] = np.max(np.abs(a - 1.0 / n_k))
    unscaled = float(np.mean(devs))
    return n_k * unscaled, unscaled
