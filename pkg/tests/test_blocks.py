import math

import numpy as np
import pytest

from stdeform.blocks import (
    ACTIVATIONS,
    DecoderLayer,
    EncoderLayer,
    LN_EPS,
    build_model,
    channel_project,
    collect_sampled_points,
    decoder_forward,
    encoder_forward,
    model_forward,
    positional_encoding,
)
from stdeform.config import ModelConfig
from stdeform.errors import DimensionError, ParameterError
from stdeform.interp import Point3
from stdeform.stdeform_attention import stdeform_attn
from stdeform.tensor_core import ClipFeatureMap, make_rng, randn

ENC_CFG = ModelConfig(t=1, h=2, w=2, c=6, heads=1, points=2, layers_enc=1,
                      layers_dec=1, num_queries=2, seed=123, init="random")


def manual_layer_norm(x, gamma, beta):
    mu = x.mean()
    s = math.sqrt(((x - mu) ** 2).mean() + LN_EPS)
    return gamma * (x - mu) / s + beta


class TestPositionalEncoding:
    def test_t_only_difference_stays_in_t_block(self):
        enc = positional_encoding(3, 2, 2, 6)
        a, b = enc[0, 1, 1], enc[2, 1, 1]
        assert np.array_equal(a[:4], b[:4])       # x and y blocks identical
        assert not np.array_equal(a[4:], b[4:])   # t block differs

    def test_position_zero_is_sin0_cos1(self):
        enc = positional_encoding(2, 2, 2, 12)
        cell = enc[0, 0, 0]
        # per axis block: even channels sin(0)=0, odd channels cos(0)=1
        for start in (0, 4, 8):
            assert np.array_equal(cell[start:start + 4:2], [0.0, 0.0])
            assert np.array_equal(cell[start + 1:start + 4:2], [1.0, 1.0])

    def test_closed_form_c6(self):
        # C=6 gives one frequency pair (freq=1) per axis: blocks are
        # (sin x, cos x, sin y, cos y, sin t, cos t).
        enc = positional_encoding(4, 4, 4, 6)
        t, y, x = 1, 2, 3
        want = [math.sin(x), math.cos(x), math.sin(y), math.cos(y),
                math.sin(t), math.cos(t)]
        assert np.allclose(enc[t, y, x], want, rtol=0, atol=1e-15)

    def test_distinct_cells_have_distinct_encodings(self):
        enc = positional_encoding(3, 5, 64, 6)
        rows = enc.reshape(-1, 6)
        assert len({row.tobytes() for row in rows}) == rows.shape[0]

    def test_divisibility_errors(self):
        with pytest.raises(ParameterError):
            positional_encoding(2, 2, 2, 8)   # not divisible by 3
        with pytest.raises(ParameterError):
            positional_encoding(2, 2, 2, 9)   # c/3 odd


class TestChannelProject:
    def test_identity(self):
        fmap = randn((2, 2, 2, 3), 1)
        out = channel_project(fmap, np.eye(3))
        assert np.array_equal(out.values, fmap)

    def test_locality(self):
        values = np.zeros((2, 2, 2, 3))
        values[1, 0, 1] = [1.0, 2.0, 3.0]
        out = channel_project(values, randn((4, 3), 2))
        nonzero = np.argwhere(np.any(out.values != 0, axis=-1))
        assert nonzero.tolist() == [[1, 0, 1]]

    def test_per_cell_matvec_oracle(self):
        values = randn((2, 2, 2, 3), 3)
        proj = randn((4, 3), 4)
        out = channel_project(values, proj)
        for t in range(2):
            for y in range(2):
                for x in range(2):
                    want = [sum(proj[o][c] * values[t, y, x, c] for c in range(3))
                            for o in range(4)]
                    assert np.allclose(out.values[t, y, x], want, rtol=0, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            channel_project(randn((2, 2, 2, 3), 5), np.zeros((4, 2)))


class TestEncoderLayer:
    def test_residual_only_when_attention_and_ffn_are_zeroed(self):
        cfg = ENC_CFG
        layer = EncoderLayer.random(cfg, 7)
        layer.attn.wo[:] = 0.0   # attention contributes nothing
        layer.ffn.w2[:] = 0.0    # feed-forward contributes nothing
        layer.ffn.b2[:] = 0.0
        features = ClipFeatureMap(randn((cfg.t, cfg.h, cfg.w, cfg.c), 8))
        out = encoder_forward(layer, features, None, cfg)
        for idx in np.ndindex(cfg.t, cfg.h, cfg.w):
            f = features.values[idx]
            want = manual_layer_norm(manual_layer_norm(f, layer.ln1.gamma, layer.ln1.beta),
                                     layer.ln2.gamma, layer.ln2.beta)
            assert np.allclose(out.values[idx], want, rtol=0, atol=1e-12)

    def test_deterministic(self):
        cfg = ENC_CFG
        layer = EncoderLayer.random(cfg, 9)
        features = ClipFeatureMap(randn((cfg.t, cfg.h, cfg.w, cfg.c), 10))
        pos = positional_encoding(cfg.t, cfg.h, cfg.w, cfg.c)
        a = encoder_forward(layer, features, pos, cfg)
        b = encoder_forward(layer, features, pos, cfg)
        assert a.values.tobytes() == b.values.tobytes()

    def test_shape_preserved_across_layers(self):
        cfg = ModelConfig(t=2, h=3, w=2, c=6, heads=2, points=3, seed=4, init="random")
        features = ClipFeatureMap(randn((2, 3, 2, 6), 11))
        pos = positional_encoding(2, 3, 2, 6)
        out = features
        for seed in (12, 13, 14):
            out = encoder_forward(EncoderLayer.random(cfg, seed), out, pos, cfg)
            assert out.values.shape == features.values.shape

    def test_composition_oracle_and_golden_value(self):
        cfg = ENC_CFG
        layer = EncoderLayer.random(cfg, 42)
        features = ClipFeatureMap(randn((cfg.t, cfg.h, cfg.w, cfg.c), 43))
        pos = positional_encoding(cfg.t, cfg.h, cfg.w, cfg.c)
        out = encoder_forward(layer, features, pos, cfg)

        # Step-by-step composition from already-verified primitives.
        f0 = features.values[0, 0, 0]
        z0 = f0 + pos[0, 0, 0]
        attn0, _ = stdeform_attn(layer.attn, z0, Point3(0.0, 0.0, 0.0), features)
        h1 = manual_layer_norm(f0 + attn0, layer.ln1.gamma, layer.ln1.beta)
        act = ACTIVATIONS[cfg.activation][0]
        ffn0 = layer.ffn.w2 @ act(layer.ffn.w1 @ h1 + layer.ffn.b1) + layer.ffn.b2
        want = manual_layer_norm(h1 + ffn0, layer.ln2.gamma, layer.ln2.beta)
        assert np.allclose(out.values[0, 0, 0], want, rtol=0, atol=1e-12)

        golden = GOLDEN_ENCODER_CELL
        assert np.allclose(out.values[0, 0, 0], golden, rtol=0, atol=1e-12)

    def test_zero_features_depend_only_on_positions(self):
        cfg = ENC_CFG
        layer = EncoderLayer.random(cfg, 21)
        pos = positional_encoding(cfg.t, cfg.h, cfg.w, cfg.c)
        zeros = ClipFeatureMap(np.zeros((cfg.t, cfg.h, cfg.w, cfg.c)))
        a = encoder_forward(layer, zeros, pos, cfg)
        b = encoder_forward(layer, ClipFeatureMap(np.zeros_like(zeros.values)), pos, cfg)
        assert a.values.tobytes() == b.values.tobytes()


class TestDecoderLayer:
    def test_single_query_runs_and_bounds_reference(self):
        cfg = ModelConfig(t=2, h=3, w=3, c=6, heads=1, points=2, num_queries=1,
                          seed=31, init="random")
        layer = DecoderLayer.random(cfg, 32)
        memory = ClipFeatureMap(randn((2, 3, 3, 6), 33))
        emb, refs = decoder_forward(layer, randn((1, 6), 34), memory, cfg)
        assert emb.shape == (1, 6)
        (r,) = refs
        assert 0.0 <= r.x <= 2.0 and 0.0 <= r.y <= 2.0 and 0.0 <= r.t <= 1.0

    def test_zero_reference_head_centers_points(self):
        cfg = ModelConfig(t=3, h=3, w=5, c=6, heads=1, points=2, num_queries=3,
                          seed=35, init="random")
        layer = DecoderLayer.random(cfg, 36)
        layer.ref_w[:] = 0.0
        layer.ref_b[:] = 0.0
        memory = ClipFeatureMap(randn((3, 3, 5, 6), 37))
        _, refs = decoder_forward(layer, randn((3, 6), 38), memory, cfg)
        for r in refs:
            assert (r.x, r.y, r.t) == (2.0, 1.0, 1.0)  # sigmoid(0)=0.5 scaled

    def test_reference_points_always_inside_grid(self):
        cfg = ModelConfig(t=2, h=4, w=3, c=6, heads=2, points=2, num_queries=4,
                          seed=39, init="random")
        memory = ClipFeatureMap(randn((2, 4, 3, 6), 40))
        for seed in range(6):
            layer = DecoderLayer.random(cfg, 50 + seed)
            layer.ref_w += make_rng(seed).normal(0, 2.0, size=layer.ref_w.shape)
            _, refs = decoder_forward(layer, randn((4, 6), 41 + seed), memory, cfg)
            for r in refs:
                assert 0.0 <= r.x <= 2.0 and 0.0 <= r.y <= 3.0 and 0.0 <= r.t <= 1.0

    def test_composition_oracle_via_primitives(self):
        from stdeform.dense_attention import multi_head_attn

        cfg = ModelConfig(t=2, h=2, w=2, c=6, heads=1, points=2, num_queries=2,
                          seed=60, init="random")
        layer = DecoderLayer.random(cfg, 61)
        memory = ClipFeatureMap(randn((2, 2, 2, 6), 62))
        queries = randn((2, 6), 63)
        emb, refs = decoder_forward(layer, queries, memory, cfg)

        # Manual composition for query 0.
        self_out0, _ = multi_head_attn(layer.self_attn, queries[0], queries)
        h1 = np.array([
            manual_layer_norm(
                queries[q] + multi_head_attn(layer.self_attn, queries[q], queries)[0],
                layer.ln1.gamma, layer.ln1.beta)
            for q in range(2)
        ])
        sig = 1.0 / (1.0 + np.exp(-(layer.ref_w @ h1[0] + layer.ref_b)))
        ref0 = Point3(sig[0] * 1.0, sig[1] * 1.0, sig[2] * 1.0)
        assert np.allclose([refs[0].x, refs[0].y, refs[0].t],
                           [ref0.x, ref0.y, ref0.t], rtol=0, atol=1e-12)
        cross0, _ = stdeform_attn(layer.cross, h1[0], ref0, memory)
        h2 = manual_layer_norm(h1[0] + cross0, layer.ln2.gamma, layer.ln2.beta)
        act = ACTIVATIONS[cfg.activation][0]
        ffn0 = layer.ffn.w2 @ act(layer.ffn.w1 @ h2 + layer.ffn.b1) + layer.ffn.b2
        want = manual_layer_norm(h2 + ffn0, layer.ln3.gamma, layer.ln3.beta)
        assert np.allclose(emb[0], want, rtol=0, atol=1e-12)


class TestFullModel:
    def test_forward_shapes_and_determinism(self):
        cfg = ModelConfig(seed=77)
        model = build_model(cfg)
        clip = ClipFeatureMap(randn((cfg.t, cfg.h, cfg.w, cfg.c), 78))
        emb1, refs1, _ = model_forward(model, clip)
        emb2, refs2, _ = model_forward(model, clip)
        assert emb1.shape == (cfg.num_queries, cfg.c)
        assert len(refs1) == cfg.num_queries
        assert emb1.tobytes() == emb2.tobytes()

    def test_pre_norm_variant_gradients(self):
        from stdeform.gradcheck import check, make_composed_instance

        cfg = ModelConfig(t=2, h=2, w=2, c=6, heads=1, points=2, layers_enc=1,
                          layers_dec=1, num_queries=2, init="random",
                          norm_placement="pre")
        reports = check(make_composed_instance(31, cfg=cfg), tolerance=1e-5)
        assert reports and all(r.passed for r in reports)

    def test_sampled_point_collection(self):
        cfg = ModelConfig(t=2, h=2, w=2, c=6, heads=1, points=2, layers_enc=1,
                          layers_dec=1, num_queries=2, seed=83, init="random")
        model = build_model(cfg)
        clip = ClipFeatureMap(randn((2, 2, 2, 6), 84))
        _, _, cache = model_forward(model, clip)
        points = collect_sampled_points(cache)
        # encoder: 8 cells * M*K, decoder: 2 queries * M*K
        assert len(points) == 8 * 2 + 2 * 2


# Output of the composition oracle above at the fixed seeds, frozen.
GOLDEN_ENCODER_CELL = np.array([
    0.2903449029781211, -2.024974762182224, -0.21014118725929576,
    1.2022604627070002, 0.21325762168940682, 0.5292529620669915,
])
