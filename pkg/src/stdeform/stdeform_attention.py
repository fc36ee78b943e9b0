"""Spatio-temporal deformable attention: K learned sampling points per head.

Instead of attending to every cell of a clip feature map, each query predicts
K fractional (x, y, t) sampling offsets around its reference point plus a
softmax-normalized weight per point, and aggregates trilinearly sampled
features through per-head value/output projections. Offsets are expressed in
absolute grid units (cells/frames). With K equal to the full cell count and a
suitable parameter override the module reproduces dense attention exactly;
see dense_equivalence_construct.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dense_attention import DenseAttnParams, multi_head_attn, softmax
from .errors import DimensionError, ParameterError
from .interp import Point3, sample, sample_backward
from .tensor_core import ClipFeatureMap, Tensor, make_rng, split_seed, unflatten_index


@dataclass
class STDeformParams:
    """Learnables: value/output projections plus the offset and weight heads.

    wp is [M, C_v, C], wo is [M, C, C_v]. The offset head maps a query feature
    to [3*M*K] reals reshaped to [M, K, 3] in (x, y, t) order; the weight head
    maps it to [M*K] logits reshaped to [M, K].
    """

    num_heads: int
    model_dim: int
    points: int
    wp: Tensor
    wo: Tensor
    offset_w: Tensor
    offset_b: Tensor
    weight_w: Tensor
    weight_b: Tensor

    def __post_init__(self):
        m, c, k = self.num_heads, self.model_dim, self.points
        if m < 1 or c < 1 or c % m != 0:
            raise ParameterError(f"model_dim {c} must be a positive multiple of num_heads {m}")
        if k < 1:
            raise ParameterError(f"points must be >= 1, got {k}")
        cv = c // m
        expect = {
            "wp": (m, cv, c),
            "wo": (m, c, cv),
            "offset_w": (3 * m * k, c),
            "offset_b": (3 * m * k,),
            "weight_w": (m * k, c),
            "weight_b": (m * k,),
        }
        for name, shape in expect.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise DimensionError(f"{name} must have shape {shape}, got {arr.shape}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        fields = ("wp", "wo", "offset_w", "offset_b", "weight_w", "weight_b")
        return {prefix + n: getattr(self, n) for n in fields}


# Six axis directions followed by the eight cell diagonals, all within
# radius 2 of the origin. Used to seed offset-head biases deterministically.
_STAR_DIRECTIONS = np.array(
    [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    + [(sx, sy, st) for sx in (1, -1) for sy in (1, -1) for st in (1, -1)],
    dtype=np.float64,
)


def star_offsets(num_heads: int, points: int) -> Tensor:
    """Deterministic [M, K, 3] offset pattern over axes and diagonals, radius <= 2."""
    n_dirs = len(_STAR_DIRECTIONS)
    out = np.empty((num_heads, points, 3))
    for m in range(num_heads):
        for k in range(points):
            j = m + k
            radius = 1.0 + (j // n_dirs) % 2
            out[m, k] = radius * _STAR_DIRECTIONS[j % n_dirs]
    return out


def default_params(num_heads: int, model_dim: int, points: int, seed) -> "STDeformParams":
    """Reproducible default: star-pattern offsets, uniform weights.

    Value/output projections are N(0, 1/sqrt(C)); both prediction heads have
    zero weight matrices, so offsets equal the star-pattern biases and
    attention weights start uniform at 1/K.
    """
    cv = model_dim // num_heads
    std = 1.0 / math.sqrt(model_dim)
    s = split_seed(seed, 2)
    return STDeformParams(
        num_heads, model_dim, points,
        wp=make_rng(s[0]).normal(0.0, std, (num_heads, cv, model_dim)),
        wo=make_rng(s[1]).normal(0.0, std, (num_heads, model_dim, cv)),
        offset_w=np.zeros((3 * num_heads * points, model_dim)),
        offset_b=star_offsets(num_heads, points).reshape(-1),
        weight_w=np.zeros((num_heads * points, model_dim)),
        weight_b=np.zeros(num_heads * points),
    )


def random_params(num_heads: int, model_dim: int, points: int, seed) -> "STDeformParams":
    """Fully seeded random init: offset-head weights N(0, 0.01), fractional biases."""
    cv = model_dim // num_heads
    std = 1.0 / math.sqrt(model_dim)
    s = split_seed(seed, 6)
    return STDeformParams(
        num_heads, model_dim, points,
        wp=make_rng(s[0]).normal(0.0, std, (num_heads, cv, model_dim)),
        wo=make_rng(s[1]).normal(0.0, std, (num_heads, model_dim, cv)),
        offset_w=make_rng(s[2]).normal(0.0, 0.01, (3 * num_heads * points, model_dim)),
        offset_b=make_rng(s[3]).normal(0.0, 0.75, (3 * num_heads * points,)),
        weight_w=make_rng(s[4]).normal(0.0, 0.01, (num_heads * points, model_dim)),
        weight_b=make_rng(s[5]).normal(0.0, 0.01, (num_heads * points,)),
    )


@dataclass
class SamplingPlan:
    """Predicted offsets [M, K, 3] in (x, y, t) order and weights [M, K]."""

    offsets: Tensor
    weights: Tensor

    def point(self, m: int, k: int, p_q: Point3) -> Point3:
        dx, dy, dt = self.offsets[m, k]
        return p_q.shifted(float(dx), float(dy), float(dt))

    def all_points(self, p_q: Point3) -> list[Point3]:
        m_heads, k_pts, _ = self.offsets.shape
        return [self.point(m, k, p_q) for m in range(m_heads) for k in range(k_pts)]


def _check_query(params: STDeformParams, z_q: Tensor) -> Tensor:
    z_q = np.asarray(z_q, dtype=np.float64)
    if z_q.shape != (params.model_dim,):
        raise DimensionError(
            f"query must be a vector of length {params.model_dim}, got shape {z_q.shape}"
        )
    return z_q


def predict_offsets(params: STDeformParams, z_q: Tensor) -> Tensor:
    """Linear offset head: reshape(offset_w @ z_q + offset_b) as [M, K, 3]."""
    z_q = _check_query(params, z_q)
    raw = params.offset_w @ z_q + params.offset_b
    return raw.reshape(params.num_heads, params.points, 3)


def predict_weights(params: STDeformParams, z_q: Tensor) -> Tensor:
    """Linear weight head followed by a per-head softmax over the K points."""
    z_q = _check_query(params, z_q)
    raw = (params.weight_w @ z_q + params.weight_b).reshape(params.num_heads, params.points)
    return softmax(raw, axis=1)


def stdeform_attn(params: STDeformParams, z_q: Tensor, p_q: Point3, x: ClipFeatureMap,
                  counter=None):
    """Deformable attention output for one query; returns (out, SamplingPlan).

    Touches at most 8*M*K distinct grid cells: each sampled point reads only
    its own trilinear corner stencil of the raw feature map.
    """
    z_q = _check_query(params, z_q)
    if x.c_extent != params.model_dim:
        raise DimensionError(f"feature map channels {x.c_extent} != model_dim {params.model_dim}")
    m, k, c, cv = params.num_heads, params.points, params.model_dim, params.head_dim
    plan = SamplingPlan(predict_offsets(params, z_q), predict_weights(params, z_q))

    out = np.zeros(c)
    for mi in range(m):
        head = np.zeros(cv)
        for ki in range(k):
            sampled = sample(x, plan.point(mi, ki, p_q))
            head += plan.weights[mi, ki] * (params.wp[mi] @ sampled)
        out += params.wo[mi] @ head

    if counter is not None:
        # Per-query accounting for the sparse path: raw-channel interpolation
        # followed by per-point value projection.
        counter.add_matvec(3 * m * k, c, bias=True)       # offset head
        counter.add_matvec(m * k, c, bias=True)           # weight head
        counter.add_interp_sample(c, times=m * k)         # trilinear gather
        counter.add_matvec(cv, c, times=m * k)            # value projection per point
        counter.add_weighted_sum(k, cv, times=m)          # attention-weighted sum
        counter.add_matvec(c, cv, times=m)                # output projections
        counter.add_plain_adds((m - 1) * c)
    return out, plan


def stdeform_attn_backward(params: STDeformParams, z_q: Tensor, p_q: Point3,
                           x: ClipFeatureMap, upstream: Tensor):
    """Gradients of upstream . stdeform_attn w.r.t. inputs and all parameters.

    Returns a dict with gradients for "z_q" [C], "p_q" [3] in (x, y, t) order,
    the sparse map gradient "x_cells" {(t, y, x): [C]}, and every parameter
    array. Matches central finite differences away from lattice planes.
    """
    z_q = _check_query(params, z_q)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (params.model_dim,):
        raise DimensionError(f"upstream must have length {params.model_dim}")
    m, k, cv = params.num_heads, params.points, params.head_dim

    offsets = predict_offsets(params, z_q)
    weights = predict_weights(params, z_q)

    # Recompute per-point samples and head aggregates.
    sampled = np.empty((m, k, params.model_dim))
    for mi in range(m):
        for ki in range(k):
            dx, dy, dt = offsets[mi, ki]
            sampled[mi, ki] = sample(x, p_q.shifted(float(dx), float(dy), float(dt)))
    proj = np.einsum("mic,mkc->mki", params.wp, sampled)          # [M, K, C_v]
    heads = np.einsum("mk,mki->mi", weights, proj)

    g_heads = np.einsum("mci,c->mi", params.wo, upstream)
    g_wo = np.einsum("c,mi->mci", upstream, heads)
    g_weights = np.einsum("mi,mki->mk", g_heads, proj)
    g_proj = weights[:, :, None] * g_heads[:, None, :]
    g_wp = np.einsum("mki,mkc->mic", g_proj, sampled)
    g_sampled = np.einsum("mic,mki->mkc", params.wp, g_proj)

    g_cells: dict[tuple[int, int, int], Tensor] = {}
    g_offsets = np.empty((m, k, 3))
    g_pq = np.zeros(3)
    for mi in range(m):
        for ki in range(k):
            dx, dy, dt = offsets[mi, ki]
            point = p_q.shifted(float(dx), float(dy), float(dt))
            cell_grads, g_point = sample_backward(x, point, g_sampled[mi, ki])
            for cell, vec in cell_grads:
                if cell in g_cells:
                    g_cells[cell] = g_cells[cell] + vec
                else:
                    g_cells[cell] = vec
            g_offsets[mi, ki] = g_point.as_array()
            g_pq += g_offsets[mi, ki]

    # Softmax backward per head, then both linear heads.
    g_wlogits = weights * (g_weights - np.sum(weights * g_weights, axis=1, keepdims=True))
    g_wl_flat = g_wlogits.reshape(-1)
    g_off_flat = g_offsets.reshape(-1)
    g_z = (params.weight_w.T @ g_wl_flat) + (params.offset_w.T @ g_off_flat)

    return {
        "z_q": g_z,
        "p_q": g_pq,
        "x_cells": g_cells,
        "wp": g_wp,
        "wo": g_wo,
        "offset_w": np.outer(g_off_flat, z_q),
        "offset_b": g_off_flat,
        "weight_w": np.outer(g_wl_flat, z_q),
        "weight_b": g_wl_flat,
    }


def grad_cells_to_dense(g_cells: dict, like: ClipFeatureMap) -> Tensor:
    """Accumulate a sparse {cell: vector} gradient into a dense [T,H,W,C] array."""
    dense = np.zeros_like(like.values)
    for (t, y, x), vec in g_cells.items():
        dense[t, y, x] += vec
    return dense


def deformable_encoder_pass(params: STDeformParams, fmap: ClipFeatureMap, counter=None) -> Tensor:
    """Every-cell-as-query pass with value maps projected once per head.

    This is the amortized cost model of stdeform_cost: per-head projected
    value maps cost N*C^2 once, then each sampled point interpolates 8
    corners of a C_v-channel map. Returns the [N, C] outputs in flattened
    cell order. Numerically equivalent to per-cell stdeform_attn because
    projection and interpolation are both linear.
    """
    c, m, k, cv = params.model_dim, params.num_heads, params.points, params.head_dim
    if fmap.c_extent != c:
        raise DimensionError(f"feature map channels {fmap.c_extent} != model_dim {c}")
    tt, hh, ww = fmap.t_extent, fmap.h_extent, fmap.w_extent
    n = fmap.num_cells

    # Per-head projected value maps [T, H, W, C_v].
    vmaps = [ClipFeatureMap(np.einsum("ic,thwc->thwi", params.wp[mi], fmap.values))
             for mi in range(m)]
    feats = fmap.values.reshape(n, c)

    out = np.empty((n, c))
    for q in range(n):
        z_q = feats[q]
        t0, y0, x0 = unflatten_index(q, (tt, hh, ww))
        p_q = Point3(float(x0), float(y0), float(t0))
        offsets = predict_offsets(params, z_q)
        weights = predict_weights(params, z_q)
        acc = np.zeros(c)
        for mi in range(m):
            head = np.zeros(cv)
            for ki in range(k):
                dx, dy, dt = offsets[mi, ki]
                head += weights[mi, ki] * sample(vmaps[mi], p_q.shifted(float(dx), float(dy), float(dt)))
            acc += params.wo[mi] @ head
        out[q] = acc

    if counter is not None:
        counter.add_matvec(cv, c, times=m * n)            # value map projections
        counter.add_matvec(3 * m * k, c, bias=True, times=n)   # offset heads
        counter.add_matvec(m * k, c, bias=True, times=n)       # weight heads
        counter.add_interp_sample(cv, times=n * m * k)    # sampling in projected space
        counter.add_weighted_sum(k, cv, times=n * m)      # attention-weighted sums
        counter.add_matvec(c, cv, times=m * n)            # output projections
        counter.add_plain_adds((m - 1) * c, times=n)
    return out


def dense_equivalence_construct(x: ClipFeatureMap, dense: DenseAttnParams, z_q: Tensor,
                                p_q: Point3, points: int | None = None):
    """Parameter override that makes deformable attention reproduce dense attention.

    With K = H*W*T, offsets are biased to enumerate every lattice cell
    (cell - p_q) and the weight-head bias is set to log of the dense softmax
    weights for (z_q, all cells), which the weight-head softmax maps back to
    those exact weights. Value/output projections are shared. Returns
    (params_override, output, plan).
    """
    n = x.num_cells
    if points is not None and points != n:
        raise ParameterError(f"equivalence requires K = H*W*T = {n}, got K = {points}")
    if x.c_extent != dense.model_dim:
        raise DimensionError(f"map channels {x.c_extent} != model_dim {dense.model_dim}")
    m, c = dense.num_heads, dense.model_dim
    dims = (x.t_extent, x.h_extent, x.w_extent)

    keys = x.values.reshape(n, c)
    _, dense_weights = multi_head_attn(dense, z_q, keys)  # [M, N]

    offsets = np.empty((m, n, 3))
    for idx in range(n):
        t, y, xx = unflatten_index(idx, dims)
        offsets[:, idx] = (xx - p_q.x, y - p_q.y, t - p_q.t)

    override = STDeformParams(
        m, c, n,
        wp=dense.wp.copy(),
        wo=dense.wo.copy(),
        offset_w=np.zeros((3 * m * n, c)),
        offset_b=offsets.reshape(-1),
        weight_w=np.zeros((m * n, c)),
        weight_b=np.log(dense_weights).reshape(-1),
    )
    out, plan = stdeform_attn(override, z_q, p_q, x)
    return override, out, plan
