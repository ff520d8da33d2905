"""Network components against shape contracts and loop oracles."""

import numpy as np
import pytest

from convsst import ops
from convsst.model import (
    ModelConfig,
    attention,
    cgrm,
    count_parameters,
    encoder_forward,
    init_weights,
    model_forward,
    msa,
    stem_forward,
    tokenize,
)
from convsst.tensor import Tensor, TensorError

from oracles import attention_reference


def tiny_config(**overrides):
    base = dict(bands=12, classes=3, patch_size=5, embed_dim=16, depth=2,
                heads=2, dropout=0.1, k_spec=9)
    base.update(overrides)
    return ModelConfig(**base)


class TestConfig:
    def test_mlp_dim_defaults_to_four_times_embed(self):
        assert ModelConfig(bands=32, classes=4).mlp_dim == 256
        assert ModelConfig(bands=32, classes=4, embed_dim=16).mlp_dim == 64

    def test_validation(self):
        with pytest.raises(TensorError):
            ModelConfig(bands=32, classes=4, patch_size=10)
        with pytest.raises(TensorError):
            ModelConfig(bands=32, classes=4, embed_dim=30, heads=4)
        with pytest.raises(TensorError):
            ModelConfig(bands=4, classes=4, k_spec=9)
        with pytest.raises(TensorError):
            ModelConfig(bands=32, classes=4, depth=0)

    def test_round_trip_dict(self):
        cfg = ModelConfig(bands=64, classes=11, depth=3, head="cls")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestInitWeights:
    def test_same_seed_bit_identical(self):
        cfg = tiny_config()
        w1 = init_weights(cfg, np.random.default_rng(9))
        w2 = init_weights(cfg, np.random.default_rng(9))
        assert w1.names() == w2.names()
        for name in w1.names():
            assert w1[name].data.tobytes() == w2[name].data.tobytes()

    def test_full_width_shape_contract(self):
        cfg = ModelConfig(bands=144, classes=15)
        w = init_weights(cfg, np.random.default_rng(0))
        assert w["stem.conv3d.weight"].shape == (8, 1, 3, 3, 9)
        assert w["stem.het_gw.weight"].shape == (64, 136, 3, 3)   # 1088 / 8 groups
        assert w["stem.het_pw.weight"].shape == (64, 1088, 1, 1)
        assert w["tokenize.pos_embed"].shape == (121, 64)
        for layer in (1, 2):
            assert w[f"enc{layer}.attn.wq"].shape == (64, 64)
            assert w[f"enc{layer}.mlp.w1"].shape == (64, 256)
            assert w[f"enc{layer}.mlp.w2"].shape == (256, 64)
        assert w["cgrm1.weight"].shape == (1, 1, 2, 3, 3)
        assert "cgrm2.weight" not in w
        assert w["head.weight"].shape == (64, 15)
        assert w["head.bias"].shape == (15,)

    def test_norm_scales_initialized_to_one(self):
        w = init_weights(tiny_config(), np.random.default_rng(0))
        assert np.all(w["enc1.ln1.gamma"].data == 1.0)
        assert np.all(w["final_ln.gamma"].data == 1.0)
        assert np.all(w["stem.bn3d.gamma"].data == 1.0)

    def test_cls_mode_adds_token_and_grows_pe(self):
        cfg = tiny_config(head="cls")
        w = init_weights(cfg, np.random.default_rng(0))
        assert w["tokenize.cls_token"].shape == (1, 16)
        assert w["tokenize.pos_embed"].shape == (26, 16)


class TestCountParameters:
    def test_head_contribution(self):
        cfg = ModelConfig(bands=144, classes=15)
        w = init_weights(cfg, np.random.default_rng(0))
        assert w["head.weight"].size + w["head.bias"].size == 64 * 15 + 15

    def test_pos_embed_contribution(self):
        cfg = ModelConfig(bands=144, classes=15)
        w = init_weights(cfg, np.random.default_rng(0))
        assert w["tokenize.pos_embed"].size == 121 * 64

    def test_freezing_reduces_count(self):
        cfg = tiny_config()
        w = init_weights(cfg, np.random.default_rng(0))
        full = count_parameters(w)
        w["head.weight"].trainable = False
        assert count_parameters(w) == full - 16 * 3

    def test_running_stats_not_counted(self):
        w = init_weights(tiny_config(), np.random.default_rng(0))
        names = [n for n, _ in w.trainable_items()]
        assert not any("running" in n for n in names)


class TestStem:
    def test_houston_width_shapes(self, rng):
        cfg = ModelConfig(bands=144, classes=15)
        w = init_weights(cfg, rng, dtype=np.float32)
        x = Tensor(np.random.default_rng(0).normal(size=(2, 11, 11, 144)).astype(np.float32))
        trace = {}
        out = stem_forward(x, w, cfg, training=False, trace=trace)
        assert trace["stem.conv3d"].shape == (2, 8, 11, 11, 136)
        assert out.shape == (2, 64, 11, 11)

    def test_muufl_width_channel_arithmetic(self):
        cfg = ModelConfig(bands=64, classes=11)
        assert cfg.stem_channels == 8 * 56

    def test_zero_input_zero_stats_gives_zero(self, rng):
        cfg = tiny_config()
        w = init_weights(cfg, rng)
        x = Tensor(np.zeros((2, 5, 5, 12), dtype=np.float32))
        out = stem_forward(x, w, cfg, training=False)
        assert np.all(out.data == 0.0)

    def test_bn_after_sum_variant_runs(self, rng):
        cfg = tiny_config(hetconv_bn_after_sum=True)
        w = init_weights(cfg, rng)
        assert "stem.het_bn.gamma" in w and "stem.het_gw_bn.gamma" not in w
        x = Tensor(np.random.default_rng(1).normal(size=(2, 5, 5, 12)).astype(np.float32))
        assert stem_forward(x, w, cfg, training=True).shape == (2, 16, 5, 5)


class TestTokenize:
    def test_token_count_full_width(self, rng):
        cfg = ModelConfig(bands=144, classes=15)
        w = init_weights(cfg, rng, dtype=np.float32)
        feats = Tensor(np.random.default_rng(0).normal(size=(3, 64, 11, 11)).astype(np.float32))
        tokens = tokenize(feats, w, cfg, training=False)
        assert tokens.shape == (3, 121, 64)

    def test_zero_pe_eval_is_pure_rearrangement(self, rng):
        cfg = tiny_config()
        w = init_weights(cfg, rng)
        w["tokenize.pos_embed"].data[...] = 0.0
        feats = np.random.default_rng(0).normal(size=(2, 16, 5, 5)).astype(np.float32)
        tokens = tokenize(Tensor(feats), w, cfg, training=False)
        expected = feats.reshape(2, 16, 25).transpose(0, 2, 1)
        np.testing.assert_array_equal(tokens.data, expected)

    def test_cls_token_prepended(self, rng):
        cfg = tiny_config(head="cls")
        w = init_weights(cfg, rng)
        w["tokenize.pos_embed"].data[...] = 0.0
        feats = Tensor(np.zeros((2, 16, 5, 5), dtype=np.float32))
        tokens = tokenize(feats, w, cfg, training=False)
        assert tokens.shape == (2, 26, 16)
        np.testing.assert_allclose(tokens.data[:, 0],
                                   np.tile(w["tokenize.cls_token"].data, (2, 1)))


class TestAttention:
    def test_single_token_returns_value(self, rng):
        q = Tensor(rng.normal(size=(1, 4)))
        k = Tensor(rng.normal(size=(1, 4)))
        v = Tensor(rng.normal(size=(1, 4)))
        np.testing.assert_allclose(attention(q, k, v).data, v.data, rtol=1e-12)

    def test_identical_tokens_average_values(self, rng):
        q = Tensor(np.tile(rng.normal(size=(1, 4)), (3, 1)))
        k = Tensor(np.tile(rng.normal(size=(1, 4)), (3, 1)))
        v = Tensor(rng.normal(size=(3, 4)))
        out = attention(q, k, v).data
        np.testing.assert_allclose(out, np.tile(v.data.mean(axis=0), (3, 1)), rtol=1e-10)

    def test_matches_loop_oracle(self):
        r = np.random.default_rng(3)
        q, k, v = (r.normal(size=(3, 4)) for _ in range(3))
        out = attention(Tensor(q), Tensor(k), Tensor(v)).data
        np.testing.assert_allclose(out, attention_reference(q, k, v), atol=1e-6)

    def test_weights_are_row_stochastic(self, rng):
        q = Tensor(rng.normal(size=(2, 3, 5, 4)))
        k = Tensor(rng.normal(size=(2, 3, 5, 4)))
        v = Tensor(rng.normal(size=(2, 3, 5, 4)))
        captured = []
        attention(q, k, v, weights_out=captured)
        sums = captured[0].data.sum(axis=-1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-6)


class TestMsa:
    def _mats(self, d, seed):
        r = np.random.default_rng(seed)
        return [Tensor(r.normal(size=(d, d))) for _ in range(4)]

    def test_single_head_reduces_to_attention_plus_projection(self, rng):
        d = 8
        wq, wk, wv, wo = self._mats(d, 0)
        tokens = rng.normal(size=(5, d))
        out = msa(Tensor(tokens), wq, wk, wv, wo, heads=1).data
        ref = attention_reference(tokens @ wq.data, tokens @ wk.data, tokens @ wv.data) @ wo.data
        np.testing.assert_allclose(out, ref, atol=1e-8)

    def test_output_shape(self, rng):
        wq, wk, wv, wo = self._mats(64, 1)
        for n in (1, 7, 121):
            tokens = Tensor(rng.normal(size=(2, n, 64)))
            assert msa(tokens, wq, wk, wv, wo, heads=4).shape == (2, n, 64)

    def test_matches_per_head_loop_oracle(self):
        d, heads, n = 16, 4, 6
        dh = d // heads
        r = np.random.default_rng(5)
        wq, wk, wv, wo = (r.normal(size=(d, d)) for _ in range(4))
        tokens = r.normal(size=(n, d))
        out = msa(Tensor(tokens), Tensor(wq), Tensor(wk), Tensor(wv), Tensor(wo), heads).data

        q, k, v = tokens @ wq, tokens @ wk, tokens @ wv
        per_head = [attention_reference(q[:, h * dh:(h + 1) * dh],
                                        k[:, h * dh:(h + 1) * dh],
                                        v[:, h * dh:(h + 1) * dh]) for h in range(heads)]
        ref = np.concatenate(per_head, axis=1) @ wo
        np.testing.assert_allclose(out, ref, atol=1e-6)

    def test_indivisible_heads_rejected(self, rng):
        wq, wk, wv, wo = self._mats(6, 2)
        with pytest.raises(TensorError):
            msa(Tensor(rng.normal(size=(3, 6))), wq, wk, wv, wo, heads=4)


class TestEncoder:
    def test_zeroed_projections_give_identity(self, rng):
        cfg = tiny_config(dropout=0.0)
        w = init_weights(cfg, rng)
        for name in ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.w1", "mlp.w2"):
            w[f"enc1.{name}"].data[...] = 0.0
        z = Tensor(np.random.default_rng(0).normal(size=(2, 25, 16)).astype(np.float32))
        out = encoder_forward(z, w, 1, cfg, training=False)
        np.testing.assert_allclose(out.data, z.data, atol=1e-6)

    def test_shape_preserved(self, rng):
        cfg = tiny_config()
        w = init_weights(cfg, rng)
        z = Tensor(np.random.default_rng(0).normal(size=(3, 25, 16)).astype(np.float32))
        assert encoder_forward(z, w, 2, cfg, training=False).shape == (3, 25, 16)

    def test_eval_equals_rate_zero_training(self, rng):
        cfg = tiny_config(dropout=0.0)
        w = init_weights(cfg, rng)
        z = Tensor(np.random.default_rng(0).normal(size=(2, 25, 16)).astype(np.float32))
        a = encoder_forward(z, w, 1, cfg, training=False)
        b = encoder_forward(z, w, 1, cfg, training=True, rng=np.random.default_rng(0))
        assert a.data.tobytes() == b.data.tobytes()


class TestCgrm:
    def test_shape_preserved(self, rng):
        prev = Tensor(rng.normal(size=(2, 25, 16)))
        curr = Tensor(rng.normal(size=(2, 25, 16)))
        weight = Tensor(rng.normal(size=(1, 1, 2, 3, 3)))
        assert cgrm(prev, curr, weight, 5).shape == (2, 25, 16)

    def test_average_kernel_oracle(self, rng):
        prev = Tensor(rng.normal(size=(2, 25, 16)))
        curr = Tensor(rng.normal(size=(2, 25, 16)))
        kernel = np.zeros((1, 1, 2, 3, 3))
        kernel[0, 0, 0, 1, 1] = 0.5
        kernel[0, 0, 1, 1, 1] = 0.5
        out = cgrm(prev, curr, Tensor(kernel), 5).data
        np.testing.assert_allclose(out, 0.5 * (prev.data + curr.data), rtol=1e-10)

    def test_zero_kernel_gives_zero(self, rng):
        prev = Tensor(rng.normal(size=(1, 25, 8)))
        curr = Tensor(rng.normal(size=(1, 25, 8)))
        out = cgrm(prev, curr, Tensor(np.zeros((1, 1, 2, 3, 3))), 5)
        assert np.all(out.data == 0.0)

    def test_linearity(self, rng):
        weight = Tensor(rng.normal(size=(1, 1, 2, 3, 3)))
        a, b, c, d = (rng.normal(size=(1, 25, 4)) for _ in range(4))
        lhs = cgrm(Tensor(a), Tensor(b), weight, 5).data + cgrm(Tensor(c), Tensor(d), weight, 5).data
        rhs = cgrm(Tensor(a + c), Tensor(b + d), weight, 5).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_non_square_token_count_rejected(self, rng):
        t = Tensor(rng.normal(size=(1, 24, 4)))
        with pytest.raises(TensorError):
            cgrm(t, t, Tensor(rng.normal(size=(1, 1, 2, 3, 3))), 5)


class TestModelForward:
    def test_logit_shape(self, rng):
        cfg = tiny_config()
        w = init_weights(cfg, rng)
        batch = Tensor(np.random.default_rng(0).normal(size=(4, 5, 5, 12)).astype(np.float32))
        assert model_forward(batch, w, cfg, training=False).shape == (4, 3)

    def test_depth_one_has_no_fusion_weights(self, rng):
        cfg = tiny_config(depth=1)
        w = init_weights(cfg, rng)
        assert not any(n.startswith("cgrm") for n in w.names())
        batch = Tensor(np.random.default_rng(0).normal(size=(2, 5, 5, 12)).astype(np.float32))
        assert model_forward(batch, w, cfg, training=False).shape == (2, 3)

    def test_batch_permutation_permutes_logits(self, rng):
        cfg = tiny_config()
        w = init_weights(cfg, rng)
        batch = np.random.default_rng(0).normal(size=(5, 5, 5, 12)).astype(np.float32)
        logits = model_forward(Tensor(batch), w, cfg, training=False).data
        perm = np.array([3, 0, 4, 1, 2])
        permuted = model_forward(Tensor(batch[perm]), w, cfg, training=False).data
        np.testing.assert_allclose(permuted, logits[perm], atol=1e-5)

    def test_cls_mode_runs_with_fusion(self, rng):
        cfg = tiny_config(head="cls")
        w = init_weights(cfg, rng)
        batch = Tensor(np.random.default_rng(0).normal(size=(2, 5, 5, 12)).astype(np.float32))
        assert model_forward(batch, w, cfg, training=False).shape == (2, 3)

    def test_gap_head_permutation_invariant_tokens(self, rng):
        # with zero positional embeddings and no fusion, shuffling spatial
        # positions must not change GAP logits
        cfg = tiny_config(use_cgrm=False, dropout=0.0)
        w = init_weights(cfg, rng, dtype=np.float64)
        w["tokenize.pos_embed"].data[...] = 0.0
        feats = np.random.default_rng(0).normal(size=(2, 16, 5, 5))

        def logits_from(maps):
            z = tokenize(Tensor(maps), w, cfg, training=False)
            for layer in (1, 2):
                z = encoder_forward(z, w, layer, cfg, training=False)
            z = ops.layernorm(z, w["final_ln.gamma"], w["final_ln.beta"])
            pooled = ops.reduce_mean(z, axis=1)
            return ops.add(ops.matmul(pooled, w["head.weight"]), w["head.bias"]).data

        base = logits_from(feats)
        flat = feats.reshape(2, 16, 25)
        perm = np.random.default_rng(1).permutation(25)
        shuffled = flat[:, :, perm].reshape(2, 16, 5, 5)
        np.testing.assert_allclose(logits_from(shuffled), base, atol=1e-6)

    def test_attention_rows_stochastic_at_every_layer(self, rng):
        cfg = tiny_config(depth=3)
        w = init_weights(cfg, rng)
        batch = Tensor(np.random.default_rng(0).normal(size=(2, 5, 5, 12)).astype(np.float32))
        trace = {}
        model_forward(batch, w, cfg, training=False, trace=trace)
        for layer in (1, 2, 3):
            sums = trace[f"enc{layer}.attn"].data.sum(axis=-1)
            np.testing.assert_allclose(sums, 1.0, atol=1e-6)
