from dataclasses import replace

import numpy as np
import pytest

from conftest import brute_masked_attention
from ctxshare.errors import BadImageShape, InvalidConfig
from ctxshare.model import (
    TEXT,
    VISION,
    Model,
    ModelConfig,
    TokenBlock,
    encode_image,
    encode_prompt,
    init_model,
    mma_forward,
    pool_image,
    predict_velocity,
    project_qkv,
    zero_mask,
)


class TestConfig:
    def test_defaults_valid(self):
        ModelConfig().validate()

    @pytest.mark.parametrize(
        "bad",
        [
            dict(d=65),  # not divisible by H=4
            dict(n_I=48),  # not a perfect square
            dict(rcm_gate_layer=8),  # outside [0, L)
            dict(L=0),
        ],
    )
    def test_invalid_configs(self, bad):
        with pytest.raises(InvalidConfig):
            ModelConfig(**bad).validate()


class TestInitModel:
    def test_deterministic(self):
        a = init_model(ModelConfig(seed=5))
        b = init_model(ModelConfig(seed=5))
        assert a.w_out.tobytes() == b.w_out.tobytes()
        for la, lb in zip(a.layers, b.layers):
            assert la.wq_i.tobytes() == lb.wq_i.tobytes()
            assert la.wv_p.tobytes() == lb.wv_p.tobytes()

    def test_seed_changes_weights(self):
        a = init_model(ModelConfig(seed=5))
        b = init_model(ModelConfig(seed=6))
        assert np.any(a.layers[0].wq_i != b.layers[0].wq_i)

    def test_weight_variance_near_one_over_d(self):
        model = init_model(ModelConfig(seed=0))
        d = model.config.d
        for w in (model.layers[0].wq_i, model.layers[3].wk_p, model.w_out):
            assert np.var(w) == pytest.approx(1.0 / d, rel=0.2)


class TestEncodePrompt:
    def test_deterministic(self, desk_model):
        a = encode_prompt("a cat sat", desk_model)
        b = encode_prompt("a cat sat", desk_model)
        assert a.tokens.tobytes() == b.tokens.tobytes()
        assert a.modality == TEXT

    def test_rows_differ_only_for_differing_words(self, desk_model):
        a = encode_prompt("a cat", desk_model)
        b = encode_prompt("a dog", desk_model)
        assert np.array_equal(a.tokens[0], b.tokens[0])
        assert np.any(a.tokens[1] != b.tokens[1])
        assert np.array_equal(a.tokens[2:], b.tokens[2:])  # shared padding

    def test_empty_string_is_all_padding(self, desk_model):
        block = encode_prompt("", desk_model)
        assert block.tokens.shape == (desk_model.config.n_P, desk_model.config.d)
        assert np.array_equal(block.tokens, np.repeat(block.tokens[:1], block.n, axis=0))

    def test_truncates_to_n_p(self, desk_model):
        long = " ".join(f"w{i}" for i in range(40))
        assert encode_prompt(long, desk_model).n == desk_model.config.n_P


class TestEncodeImage:
    def test_uniform_gray_gives_identical_tokens(self, desk_model):
        img = np.full((64, 64), 88, dtype=np.uint8)
        block = encode_image(img, desk_model)
        assert block.modality == VISION
        assert np.array_equal(block.tokens, np.repeat(block.tokens[:1], block.n, axis=0))

    def test_one_patch_change_touches_one_token(self, desk_model):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 255, size=(64, 64), dtype=np.uint8)
        img2 = img.copy()
        img2[8:16, 16:24] += 1  # patch (row 1, col 2) -> token index 10
        a = encode_image(img, desk_model).tokens
        b = encode_image(img2, desk_model).tokens
        diff_rows = np.flatnonzero(np.any(a != b, axis=1))
        assert diff_rows.tolist() == [10]

    def test_checkerboard_pooling_matches_loop_oracle(self):
        # 16x16 board of 2x2 blocks pooled on an 8x8 grid: +/-1 exactly
        i = np.arange(16)[:, None] // 2
        j = np.arange(16)[None, :] // 2
        img = (((i + j) % 2) * 255).astype(np.uint8)
        pooled = pool_image(img, 8)
        expected = np.empty((64, 1))
        for r in range(8):
            for c in range(8):
                expected[r * 8 + c, 0] = img[2 * r : 2 * r + 2, 2 * c : 2 * c + 2].mean() / 127.5 - 1.0
        assert np.array_equal(pooled, expected)
        assert set(np.unique(pooled)) == {-1.0, 1.0}

    def test_rejects_indivisible_shape(self, desk_model):
        with pytest.raises(BadImageShape):
            encode_image(np.zeros((60, 64), dtype=np.uint8), desk_model)


class TestProjectQkv:
    def test_zero_block_zero_projection(self, tiny_model):
        block = TokenBlock(VISION, np.zeros((4, 8)))
        q, k, v = project_qkv(block, 0, tiny_model)
        assert not q.any() and not k.any() and not v.any()

    def test_matches_direct_multiply_and_slicing(self):
        model = init_model(ModelConfig(L=1, d=4, H=2, n_I=1, n_P=2, rcm_gate_layer=0, seed=3))
        rng = np.random.default_rng(1)
        block = TokenBlock(TEXT, rng.normal(size=(2, 4)))
        q, k, v = project_qkv(block, 0, model)
        w = model.layers[0]
        assert np.array_equal(q, block.tokens @ w.wq_p)
        assert np.array_equal(k, block.tokens @ w.wk_p)
        assert np.array_equal(v, block.tokens @ w.wv_p)
        # head h occupies columns [h*d_h, (h+1)*d_h)
        assert np.array_equal(q[:, 0:2], (block.tokens @ w.wq_p)[:, 0:2])

    def test_modality_selects_weights(self, tiny_model):
        rng = np.random.default_rng(2)
        tokens = rng.normal(size=(2, 8))
        qv, _, _ = project_qkv(TokenBlock(VISION, tokens), 0, tiny_model)
        qp, _, _ = project_qkv(TokenBlock(TEXT, tokens), 0, tiny_model)
        assert np.any(qv != qp)

    def test_text_weight_change_leaves_vision_alone(self, tiny_model):
        rng = np.random.default_rng(3)
        vision = TokenBlock(VISION, rng.normal(size=(4, 8)))
        q1, _, _ = project_qkv(vision, 0, tiny_model)
        perturbed_layer = replace(tiny_model.layers[0], wq_p=np.ones((8, 8)))
        model2 = Model(tiny_model.config, (perturbed_layer,) + tiny_model.layers[1:], tiny_model.w_out)
        q2, _, _ = project_qkv(vision, 0, model2)
        assert np.array_equal(q1, q2)


def _random_blocks(rng, n_i, n_p, d):
    return (
        TokenBlock(VISION, rng.normal(size=(n_i, d))),
        TokenBlock(TEXT, rng.normal(size=(n_p, d))),
    )


class TestMmaForward:
    def test_dual_update_moves_both_modalities(self, desk_model):
        rng = np.random.default_rng(0)
        cfg = desk_model.config
        vision, text = _random_blocks(rng, cfg.n_I, cfg.n_P, cfg.d)
        mask = zero_mask(cfg.n_I + cfg.n_P, cfg.n_I + cfg.n_P)
        v2, t2 = mma_forward(vision, text, mask, 0, desk_model)
        assert np.linalg.norm(t2.tokens - text.tokens) > 0
        assert np.linalg.norm(v2.tokens - vision.tokens) > 0

    @pytest.mark.parametrize("n_i", [1, 4, 9, 16])
    @pytest.mark.parametrize("n_p", [1, 4])
    def test_single_head_matches_flat_brute_force(self, n_i, n_p):
        model = init_model(ModelConfig(L=1, d=8, H=1, n_I=max(n_i, 1), n_P=n_p, rcm_gate_layer=0, seed=9))
        rng = np.random.default_rng(n_i * 10 + n_p)
        vision, text = _random_blocks(rng, n_i, n_p, 8)
        mask = zero_mask(n_i + n_p, n_i + n_p)
        v2, t2 = mma_forward(vision, text, mask, 0, model)

        qi, ki, vi = project_qkv(vision, 0, model)
        qp, kp, vp = project_qkv(text, 0, model)
        q = np.concatenate([qi, qp])
        k = np.concatenate([ki, kp])
        v = np.concatenate([vi, vp])
        flat = brute_masked_attention(q, k, v, mask, 8)
        got = np.concatenate([v2.tokens - vision.tokens, t2.tokens - text.tokens])
        assert np.max(np.abs(got - flat)) < 1e-12

    def test_zero_value_weights_give_residual_identity(self, tiny_model):
        z = np.zeros((8, 8))
        layer0 = replace(tiny_model.layers[0], wv_i=z, wv_p=z)
        model = Model(tiny_model.config, (layer0,) + tiny_model.layers[1:], tiny_model.w_out)
        rng = np.random.default_rng(4)
        vision, text = _random_blocks(rng, 4, 2, 8)
        mask = zero_mask(6, 6)
        v2, t2 = mma_forward(vision, text, mask, 0, model)
        assert np.array_equal(v2.tokens, vision.tokens)
        assert np.array_equal(t2.tokens, text.tokens)

    def test_modality_blocking_reduces_to_self_attention(self, tiny_model):
        from ctxshare.numerics import masked_attention

        rng = np.random.default_rng(5)
        vision, text = _random_blocks(rng, 4, 2, 8)
        mask = zero_mask(6, 6)
        mask[4:, :4] = -np.inf  # text queries never see vision keys
        mask[:4, 4:] = -np.inf  # vision queries never see text keys
        _, t2 = mma_forward(vision, text, mask, 0, tiny_model)

        qp, kp, vp = project_qkv(text, 0, tiny_model)
        d_h = tiny_model.config.d_h
        expected = text.tokens.copy()
        for h in range(tiny_model.config.H):
            sl = slice(h * d_h, (h + 1) * d_h)
            expected += np.pad(
                masked_attention(qp[:, sl], kp[:, sl], vp[:, sl], np.zeros((2, 2)), d_h),
                ((0, 0), (h * d_h, (tiny_model.config.H - 1 - h) * d_h)),
            )
        assert np.max(np.abs(t2.tokens - expected)) < 1e-12


class TestPredictVelocity:
    def test_zero_tokens_zero_velocity(self, tiny_model):
        assert not predict_velocity(TokenBlock(VISION, np.zeros((4, 8))), tiny_model).any()

    def test_deterministic(self, tiny_model):
        rng = np.random.default_rng(6)
        block = TokenBlock(VISION, rng.normal(size=(4, 8)))
        assert np.array_equal(
            predict_velocity(block, tiny_model), predict_velocity(block, tiny_model)
        )

    def test_linearity(self, tiny_model):
        rng = np.random.default_rng(7)
        a = TokenBlock(VISION, rng.normal(size=(4, 8)))
        b = TokenBlock(VISION, rng.normal(size=(4, 8)))
        ab = TokenBlock(VISION, a.tokens + b.tokens)
        lhs = predict_velocity(ab, tiny_model)
        rhs = predict_velocity(a, tiny_model) + predict_velocity(b, tiny_model)
        assert np.max(np.abs(lhs - rhs)) < 1e-12
