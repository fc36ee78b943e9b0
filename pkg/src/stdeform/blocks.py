"""Toy-scale deformable transformer layers over clip feature maps.

Encoder layers run deformable attention with each cell as its own reference
point; decoder layers keep dense self-attention among the object queries and
use deformable attention only for cross-attention into the encoder memory,
at a reference point predicted per query by a sigmoid head. Every layer has
a hand-written backward pass so the composed model can be gradient-checked
end to end against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .dense_attention import DenseAttnParams, multi_head_attn, multi_head_attn_backward
from .errors import DimensionError, ParameterError
from .interp import Point3
from .stdeform_attention import (
    STDeformParams,
    default_params,
    random_params,
    stdeform_attn,
    stdeform_attn_backward,
)
from .tensor_core import ClipFeatureMap, Tensor, make_rng, split_seed, unflatten_index

LN_EPS = 1e-12


# ---------------------------------------------------------------------------
# Fixed 3-d positional encoding


def positional_encoding(t: int, h: int, w: int, c: int) -> Tensor:
    """Fixed sinusoidal encoding [T, H, W, C]: C/3 channels per axis (x, y, t).

    Within an axis block, channel pair j holds sin/cos of position times
    10000^(-2j/B) where B = C/3, the standard geometric frequency ladder.
    """
    if c % 3 != 0 or (c // 3) % 2 != 0:
        raise ParameterError(f"channel count {c} must be divisible by 3 with c/3 even")
    block = c // 3
    freqs = 10000.0 ** (-2.0 * np.arange(block // 2) / block)

    def axis_block(positions: Tensor) -> Tensor:
        ang = np.outer(positions, freqs)
        out = np.empty((len(positions), block))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out

    xs = axis_block(np.arange(w, dtype=np.float64))      # [W, B]
    ys = axis_block(np.arange(h, dtype=np.float64))      # [H, B]
    ts = axis_block(np.arange(t, dtype=np.float64))      # [T, B]

    enc = np.empty((t, h, w, c))
    enc[..., 0:block] = xs[None, None, :, :]
    enc[..., block:2 * block] = ys[None, :, None, :]
    enc[..., 2 * block:] = ts[:, None, None, :]
    return enc


def channel_project(features, proj: Tensor) -> ClipFeatureMap:
    """Per-cell 1x1 projection [C, C_in]; no spatial or temporal mixing."""
    values = features.values if isinstance(features, ClipFeatureMap) else np.asarray(features)
    if values.ndim != 4:
        raise DimensionError(f"features must be [T,H,W,C_in], got shape {values.shape}")
    if proj.ndim != 2 or proj.shape[1] != values.shape[3]:
        raise DimensionError(
            f"projection {tuple(proj.shape)} does not match input channels {values.shape[3]}"
        )
    return ClipFeatureMap(np.einsum("oc,thwc->thwo", proj, values))


# ---------------------------------------------------------------------------
# Elementwise pieces


def _gelu(x):
    a = math.sqrt(2.0 / math.pi)
    u = a * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(u))


def _gelu_deriv(x):
    a = math.sqrt(2.0 / math.pi)
    u = a * (x + 0.044715 * x**3)
    th = np.tanh(u)
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * a * (1.0 + 3 * 0.044715 * x**2)


ACTIVATIONS = {
    "gelu": (_gelu, _gelu_deriv),
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
    "relu": (lambda x: np.maximum(0.0, x), lambda x: (x > 0).astype(np.float64)),
}


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Layer norm and feed-forward with caches for the backward pass


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    @staticmethod
    def identity(c: int) -> "LayerNormParams":
        return LayerNormParams(np.ones(c), np.zeros(c))

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {prefix + "gamma": self.gamma, prefix + "beta": self.beta}


def layer_norm(x: Tensor, ln: LayerNormParams):
    """Row-wise layer norm over the channel axis; returns (y, cache)."""
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    s = np.sqrt(var + LN_EPS)
    xhat = (x - mu) / s
    return ln.gamma * xhat + ln.beta, (xhat, s)


def layer_norm_backward(g: Tensor, ln: LayerNormParams, cache):
    xhat, s = cache
    gx = g * ln.gamma
    mean_gx = np.mean(gx, axis=-1, keepdims=True)
    mean_gx_xhat = np.mean(gx * xhat, axis=-1, keepdims=True)
    g_x = (gx - mean_gx - xhat * mean_gx_xhat) / s
    g_gamma = np.sum(g * xhat, axis=tuple(range(g.ndim - 1)))
    g_beta = np.sum(g, axis=tuple(range(g.ndim - 1)))
    return g_x, {"gamma": g_gamma, "beta": g_beta}


@dataclass
class FfnParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @staticmethod
    def random(c: int, hidden: int, seed) -> "FfnParams":
        s = split_seed(seed, 2)
        return FfnParams(
            w1=make_rng(s[0]).normal(0.0, 1.0 / math.sqrt(c), (hidden, c)),
            b1=np.zeros(hidden),
            w2=make_rng(s[1]).normal(0.0, 1.0 / math.sqrt(hidden), (c, hidden)),
            b2=np.zeros(c),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {prefix + n: getattr(self, n) for n in ("w1", "b1", "w2", "b2")}


def ffn_forward(x: Tensor, ffn: FfnParams, activation: str):
    f, _ = ACTIVATIONS[activation]
    pre = x @ ffn.w1.T + ffn.b1
    hid = f(pre)
    return hid @ ffn.w2.T + ffn.b2, (x, pre, hid)


def ffn_backward(g: Tensor, ffn: FfnParams, activation: str, cache):
    x, pre, hid = cache
    _, df = ACTIVATIONS[activation]
    g_hid = g @ ffn.w2
    g_pre = g_hid * df(pre)
    grads = {
        "w2": g.T @ hid,
        "b2": np.sum(g, axis=0),
        "w1": g_pre.T @ x,
        "b1": np.sum(g_pre, axis=0),
    }
    return g_pre @ ffn.w1, grads


# ---------------------------------------------------------------------------
# Encoder layer


@dataclass
class EncoderLayer:
    attn: STDeformParams
    ln1: LayerNormParams
    ffn: FfnParams
    ln2: LayerNormParams

    @staticmethod
    def random(cfg: ModelConfig, seed) -> "EncoderLayer":
        s = split_seed(seed, 2)
        init = default_params if cfg.init == "pattern" else random_params
        return EncoderLayer(
            attn=init(cfg.heads, cfg.c, cfg.points, s[0]),
            ln1=LayerNormParams.identity(cfg.c),
            ffn=FfnParams.random(cfg.c, cfg.hidden_width, s[1]),
            ln2=LayerNormParams.identity(cfg.c),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        out.update(self.attn.named(prefix + "attn."))
        out.update(self.ln1.named(prefix + "ln1."))
        out.update(self.ffn.named(prefix + "ffn."))
        out.update(self.ln2.named(prefix + "ln2."))
        return out


def _cell_points(fmap: ClipFeatureMap) -> list[Point3]:
    dims = (fmap.t_extent, fmap.h_extent, fmap.w_extent)
    points = []
    for idx in range(fmap.num_cells):
        t, y, x = unflatten_index(idx, dims)
        points.append(Point3(float(x), float(y), float(t)))
    return points


def encoder_forward(layer: EncoderLayer, features: ClipFeatureMap, pos: Tensor | None,
                    cfg: ModelConfig, counter=None) -> ClipFeatureMap:
    """One encoder layer; output shape equals input shape."""
    out, _ = encoder_forward_cached(layer, features, pos, cfg, counter=counter)
    return out


def encoder_forward_cached(layer: EncoderLayer, features: ClipFeatureMap, pos: Tensor | None,
                           cfg: ModelConfig, counter=None):
    if features.c_extent != cfg.c:
        raise DimensionError(f"feature channels {features.c_extent} != config c {cfg.c}")
    shape = features.values.shape
    flat = features.values.reshape(-1, cfg.c)
    pos_flat = None if pos is None else pos.reshape(-1, cfg.c)
    post = cfg.norm_placement == "post"
    cache: dict = {"features": features, "pos_flat": pos_flat}

    if post:
        attn_src = features
        src_flat = flat
    else:
        x0, ln1c = layer_norm(flat, layer.ln1)
        attn_src = ClipFeatureMap(x0.reshape(shape))
        src_flat = x0
        cache["ln1"] = ln1c

    # Each cell queries the (possibly normed) map with itself as reference point.
    z = src_flat if pos_flat is None else src_flat + pos_flat
    attn_out = np.empty_like(flat)
    points = _cell_points(features)
    plans = []
    for i, p_q in enumerate(points):
        attn_out[i], plan = stdeform_attn(layer.attn, z[i], p_q, attn_src, counter=counter)
        plans.append(plan)
    cache.update(z=z, attn_src=attn_src, attn_out=attn_out, points=points, plans=plans)

    if post:
        h1, ln1c = layer_norm(flat + attn_out, layer.ln1)
        cache["ln1"] = ln1c
        ffn_out, ffnc = ffn_forward(h1, layer.ffn, cfg.activation)
        out, ln2c = layer_norm(h1 + ffn_out, layer.ln2)
    else:
        h1 = flat + attn_out
        x1, ln2c = layer_norm(h1, layer.ln2)
        cache["ln2_in"] = x1
        ffn_out, ffnc = ffn_forward(x1, layer.ffn, cfg.activation)
        out = h1 + ffn_out
    cache.update(h1=h1, ffn=ffnc, ln2=ln2c)
    return ClipFeatureMap(out.reshape(shape)), cache


def encoder_backward(layer: EncoderLayer, cfg: ModelConfig, cache, g_out: Tensor):
    """Backward through one encoder layer.

    g_out is the dense [T,H,W,C] (or [N,C]) gradient of the layer output.
    Returns (g_features [T,H,W,C], grads keyed like EncoderLayer.named("")).
    """
    features: ClipFeatureMap = cache["features"]
    shape = features.values.shape
    g = np.asarray(g_out).reshape(-1, cfg.c)
    post = cfg.norm_placement == "post"
    grads: dict[str, Tensor] = {}

    if post:
        g_r2, ln2g = layer_norm_backward(g, layer.ln2, cache["ln2"])
        g_ffn_in, ffng = ffn_backward(g_r2, layer.ffn, cfg.activation, cache["ffn"])
        g_h1 = g_r2 + g_ffn_in
        g_r1, ln1g = layer_norm_backward(g_h1, layer.ln1, cache["ln1"])
        g_flat = g_r1.copy()
        g_attn_out = g_r1
    else:
        g_h1 = g.copy()
        g_ffn_in, ffng = ffn_backward(g, layer.ffn, cfg.activation, cache["ffn"])
        g_x1, ln2g = layer_norm_backward(g_ffn_in, layer.ln2, cache["ln2"])
        g_h1 += g_x1
        g_flat = g_h1.copy()
        g_attn_out = g_h1

    grads.update({"ffn." + k: v for k, v in ffng.items()})
    grads.update({"ln2." + k: v for k, v in ln2g.items()})

    # Attention sublayer: accumulate per-cell backward into the source map.
    g_src = np.zeros_like(g_flat)
    attn_grads = {k: np.zeros_like(v) for k, v in layer.attn.named("").items()}
    z, attn_src, points = cache["z"], cache["attn_src"], cache["points"]
    dims = (features.t_extent, features.h_extent, features.w_extent)
    for i, p_q in enumerate(points):
        gr = stdeform_attn_backward(layer.attn, z[i], p_q, attn_src, g_attn_out[i])
        g_src[i] += gr["z_q"]
        for (t, y, x), vec in gr["x_cells"].items():
            g_src[(t * dims[1] + y) * dims[2] + x] += vec
        for name in attn_grads:
            attn_grads[name] += gr[name]
    grads.update({"attn." + k: v for k, v in attn_grads.items()})

    if post:
        grads.update({"ln1." + k: v for k, v in ln1g.items()})
        g_flat += g_src
    else:
        g_x0, ln1g = layer_norm_backward(g_src, layer.ln1, cache["ln1"])
        grads.update({"ln1." + k: v for k, v in ln1g.items()})
        g_flat += g_x0
    return g_flat.reshape(shape), grads


# ---------------------------------------------------------------------------
# Decoder layer


@dataclass
class DecoderLayer:
    self_attn: DenseAttnParams
    ln1: LayerNormParams
    ref_w: Tensor
    ref_b: Tensor
    cross: STDeformParams
    ln2: LayerNormParams
    ffn: FfnParams
    ln3: LayerNormParams

    @staticmethod
    def random(cfg: ModelConfig, seed) -> "DecoderLayer":
        s = split_seed(seed, 4)
        init = default_params if cfg.init == "pattern" else random_params
        return DecoderLayer(
            self_attn=DenseAttnParams.random(cfg.heads, cfg.c, s[0]),
            ln1=LayerNormParams.identity(cfg.c),
            ref_w=make_rng(s[1]).normal(0.0, 1.0 / math.sqrt(cfg.c), (3, cfg.c)),
            ref_b=np.zeros(3),
            cross=init(cfg.heads, cfg.c, cfg.points, s[2]),
            ln2=LayerNormParams.identity(cfg.c),
            ffn=FfnParams.random(cfg.c, cfg.hidden_width, s[3]),
            ln3=LayerNormParams.identity(cfg.c),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        out.update(self.self_attn.named(prefix + "self."))
        out.update(self.ln1.named(prefix + "ln1."))
        out[prefix + "ref_w"] = self.ref_w
        out[prefix + "ref_b"] = self.ref_b
        out.update(self.cross.named(prefix + "cross."))
        out.update(self.ln2.named(prefix + "ln2."))
        out.update(self.ffn.named(prefix + "ffn."))
        out.update(self.ln3.named(prefix + "ln3."))
        return out


def _reference_scale(memory: ClipFeatureMap) -> Tensor:
    # Sigmoid outputs are stretched over [0, extent-1] per axis (x, y, t).
    return np.array([
        memory.w_extent - 1.0,
        memory.h_extent - 1.0,
        memory.t_extent - 1.0,
    ])


def decoder_forward(layer: DecoderLayer, queries: Tensor, memory: ClipFeatureMap,
                    cfg: ModelConfig, counter=None):
    """One decoder layer: returns (embeddings [N, C], reference points)."""
    emb, refs, _ = decoder_forward_cached(layer, queries, memory, cfg, counter=counter)
    return emb, refs


def decoder_forward_cached(layer: DecoderLayer, queries: Tensor, memory: ClipFeatureMap,
                           cfg: ModelConfig, counter=None):
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != cfg.c:
        raise DimensionError(f"queries must be [N, {cfg.c}], got shape {queries.shape}")
    n = queries.shape[0]
    post = cfg.norm_placement == "post"
    cache: dict = {"queries": queries, "memory": memory}

    # Dense self-attention among the object queries (queries are both query
    # and key elements).
    if post:
        self_in = queries
    else:
        self_in, ln1c = layer_norm(queries, layer.ln1)
        cache["ln1"] = ln1c
    self_out = np.empty_like(queries)
    for q in range(n):
        self_out[q], _ = multi_head_attn(layer.self_attn, self_in[q], self_in, counter=counter)
    cache.update(self_in=self_in, self_out=self_out)

    if post:
        h1, ln1c = layer_norm(queries + self_out, layer.ln1)
        cache["ln1"] = ln1c
        cross_in = h1
    else:
        h1 = queries + self_out
        cross_in, ln2c = layer_norm(h1, layer.ln2)
        cache["ln2"] = ln2c
    cache["h1"] = h1

    # Per-query reference point from a sigmoid head, scaled to grid extents.
    scale = _reference_scale(memory)
    sig = _sigmoid(cross_in @ layer.ref_w.T + layer.ref_b)          # [N, 3]
    refs = [Point3(*(sig[q] * scale)) for q in range(n)]
    cache.update(cross_in=cross_in, sig=sig, refs=refs, scale=scale)

    cross_out = np.empty_like(queries)
    plans = []
    for q in range(n):
        cross_out[q], plan = stdeform_attn(layer.cross, cross_in[q], refs[q], memory,
                                           counter=counter)
        plans.append(plan)
    cache.update(cross_out=cross_out, plans=plans)

    if post:
        h2, ln2c = layer_norm(h1 + cross_out, layer.ln2)
        cache["ln2"] = ln2c
        ffn_out, ffnc = ffn_forward(h2, layer.ffn, cfg.activation)
        out, ln3c = layer_norm(h2 + ffn_out, layer.ln3)
    else:
        h2 = h1 + cross_out
        x2, ln3c = layer_norm(h2, layer.ln3)
        cache["ln3_in"] = x2
        ffn_out, ffnc = ffn_forward(x2, layer.ffn, cfg.activation)
        out = h2 + ffn_out
    cache.update(h2=h2, ffn=ffnc, ln3=ln3c)
    return out, refs, cache


def decoder_backward(layer: DecoderLayer, cfg: ModelConfig, cache, g_out: Tensor):
    """Backward through one decoder layer.

    Returns (g_queries [N, C], g_memory [T, H, W, C], grads keyed like
    DecoderLayer.named("")).
    """
    queries = cache["queries"]
    memory: ClipFeatureMap = cache["memory"]
    g = np.asarray(g_out)
    post = cfg.norm_placement == "post"
    grads: dict[str, Tensor] = {}

    if post:
        g_r3, ln3g = layer_norm_backward(g, layer.ln3, cache["ln3"])
        g_ffn_in, ffng = ffn_backward(g_r3, layer.ffn, cfg.activation, cache["ffn"])
        g_h2 = g_r3 + g_ffn_in
        g_r2, ln2g = layer_norm_backward(g_h2, layer.ln2, cache["ln2"])
        grads.update({"ln2." + k: v for k, v in ln2g.items()})
        g_h1 = g_r2.copy()
        g_cross_out = g_r2
    else:
        g_h2 = g.copy()
        g_ffn_in, ffng = ffn_backward(g, layer.ffn, cfg.activation, cache["ffn"])
        g_x2, ln3g = layer_norm_backward(g_ffn_in, layer.ln3, cache["ln3"])
        g_h2 += g_x2
        g_h1 = g_h2.copy()
        g_cross_out = g_h2
    grads.update({"ffn." + k: v for k, v in ffng.items()})
    grads.update({"ln3." + k: v for k, v in ln3g.items()})

    # Cross-attention backward: gradients flow to the query path, the memory,
    # and through the reference points into the sigmoid head.
    cross_in, sig, refs, scale = (cache[k] for k in ("cross_in", "sig", "refs", "scale"))
    n = queries.shape[0]
    g_cross_in = np.zeros_like(queries)
    g_memory = np.zeros_like(memory.values)
    g_ref_w = np.zeros_like(layer.ref_w)
    g_ref_b = np.zeros_like(layer.ref_b)
    cross_grads = {k: np.zeros_like(v) for k, v in layer.cross.named("").items()}
    for q in range(n):
        gr = stdeform_attn_backward(layer.cross, cross_in[q], refs[q], memory, g_cross_out[q])
        g_cross_in[q] += gr["z_q"]
        for (t, y, x), vec in gr["x_cells"].items():
            g_memory[t, y, x] += vec
        for name in cross_grads:
            cross_grads[name] += gr[name]
        # Reference head: r = sigmoid(ref_w @ cross_in + ref_b) * scale.
        g_sig = gr["p_q"] * scale
        g_pre = g_sig * sig[q] * (1.0 - sig[q])
        g_ref_w += np.outer(g_pre, cross_in[q])
        g_ref_b += g_pre
        g_cross_in[q] += layer.ref_w.T @ g_pre
    grads.update({"cross." + k: v for k, v in cross_grads.items()})
    grads["ref_w"] = g_ref_w
    grads["ref_b"] = g_ref_b

    if post:
        g_h1 += g_cross_in
        g_r1, ln1g = layer_norm_backward(g_h1, layer.ln1, cache["ln1"])
        grads.update({"ln1." + k: v for k, v in ln1g.items()})
        g_queries = g_r1.copy()
        g_self_out = g_r1
    else:
        g_x1, ln2g = layer_norm_backward(g_cross_in, layer.ln2, cache["ln2"])
        g_h1 += g_x1
        grads.update({"ln2." + k: v for k, v in ln2g.items()})
        g_queries = g_h1.copy()
        g_self_out = g_h1

    # Dense self-attention backward, accumulating over all query positions.
    self_in = cache["self_in"]
    g_self_in = np.zeros_like(queries)
    self_grads = {k: np.zeros_like(v) for k, v in layer.self_attn.named("").items()}
    for q in range(n):
        gr = multi_head_attn_backward(layer.self_attn, self_in[q], self_in, g_self_out[q])
        g_self_in[q] += gr["z_q"]
        g_self_in += gr["keys"]
        for name in self_grads:
            self_grads[name] += gr[name]
    grads.update({"self." + k: v for k, v in self_grads.items()})

    if post:
        g_queries += g_self_in
    else:
        g_x0, ln1g = layer_norm_backward(g_self_in, layer.ln1, cache["ln1"])
        grads.update({"ln1." + k: v for k, v in ln1g.items()})
        g_queries += g_x0
    return g_queries, g_memory, grads


# ---------------------------------------------------------------------------
# Full model


@dataclass
class Model:
    cfg: ModelConfig
    encoder: list[EncoderLayer]
    decoder: list[DecoderLayer]
    queries: Tensor
    pos: Tensor = field(repr=False)

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.encoder):
            out.update(layer.named(f"enc{i}."))
        for i, layer in enumerate(self.decoder):
            out.update(layer.named(f"dec{i}."))
        out["queries"] = self.queries
        return out


def build_model(cfg: ModelConfig) -> Model:
    seeds = split_seed(cfg.seed, cfg.layers_enc + cfg.layers_dec + 1)
    encoder = [EncoderLayer.random(cfg, seeds[i]) for i in range(cfg.layers_enc)]
    decoder = [DecoderLayer.random(cfg, seeds[cfg.layers_enc + i])
               for i in range(cfg.layers_dec)]
    queries = make_rng(seeds[-1]).normal(0.0, 1.0, (cfg.num_queries, cfg.c))
    return Model(cfg, encoder, decoder, queries,
                 pos=positional_encoding(cfg.t, cfg.h, cfg.w, cfg.c))


def model_forward(model: Model, clip: ClipFeatureMap, counter=None, dec_counter=None):
    """Full forward pass: returns (embeddings [N, C], refs, cache).

    `counter` tallies encoder attention work; decoder attention goes to
    `dec_counter` when given, otherwise to `counter` as well.
    """
    cfg = model.cfg
    enc_caches = []
    memory = clip
    for i, layer in enumerate(model.encoder):
        pos = model.pos if (i == 0 or cfg.pos_every_layer) else None
        memory, cache = encoder_forward_cached(layer, memory, pos, cfg, counter=counter)
        enc_caches.append(cache)

    emb = model.queries
    refs = []
    dec_caches = []
    for layer in model.decoder:
        emb, refs, cache = decoder_forward_cached(
            layer, emb, memory, cfg,
            counter=dec_counter if dec_counter is not None else counter)
        dec_caches.append(cache)
    return emb, refs, {"enc": enc_caches, "dec": dec_caches, "memory": memory}


def model_backward(model: Model, cache, g_emb: Tensor):
    """Backward through all layers; returns (grads by parameter name, g_clip)."""
    grads: dict[str, Tensor] = {}
    g = np.asarray(g_emb)
    g_memory = None
    for i in reversed(range(len(model.decoder))):
        g, g_mem_layer, layer_grads = decoder_backward(
            model.decoder[i], model.cfg, cache["dec"][i], g)
        grads.update({f"dec{i}." + k: v for k, v in layer_grads.items()})
        g_memory = g_mem_layer if g_memory is None else g_memory + g_mem_layer
    grads["queries"] = g

    g_map = g_memory if g_memory is not None else np.zeros_like(cache["memory"].values)
    for i in reversed(range(len(model.encoder))):
        g_map, layer_grads = encoder_backward(model.encoder[i], model.cfg, cache["enc"][i], g_map)
        grads.update({f"enc{i}." + k: v for k, v in layer_grads.items()})
    return grads, g_map


def collect_sampled_points(cache) -> list[Point3]:
    """Every fractional point sampled during a cached forward pass."""
    points: list[Point3] = []
    for enc_cache in cache["enc"]:
        for plan, p_q in zip(enc_cache["plans"], enc_cache["points"]):
            points.extend(plan.all_points(p_q))
    for dec_cache in cache["dec"]:
        for plan, ref in zip(dec_cache["plans"], dec_cache["refs"]):
            points.extend(plan.all_points(ref))
    return points
