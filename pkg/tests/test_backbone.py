import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dmpt import backbone as bb
from dmpt import tensor as T
from dmpt.container import WEIGHTS_MAGIC, parse_container
from dmpt.errors import ConfigError, ContractError, DimensionError, FormatError, PlanError, VocabularyError
from dmpt.tensor import Tensor


@pytest.fixture(scope="module")
def vocab():
    return bb.Vocabulary.default()


@pytest.fixture(scope="module")
def weights(vocab):
    return bb.init_weights(bb.BackboneConfig(vocab_size=len(vocab)), seed=3)


def random_images(n, seed=0, size=32):
    return np.random.default_rng(seed).uniform(-1, 1, (n, 3, size, size)).astype(np.float32)


class TestConfig:
    def test_patch_count(self):
        cfg = bb.BackboneConfig()
        assert cfg.num_patches == (cfg.image_size // cfg.patch_size) ** 2 == 16

    def test_indivisible_image_rejected(self):
        with pytest.raises(ConfigError):
            bb.BackboneConfig(image_size=30, patch_size=8)

    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError):
            bb.BackboneConfig(d_visual=64, heads=5)


class TestEmbedPatches:
    def test_zero_image_gives_positional_rows(self, weights):
        w = weights
        out = bb.embed_patches(np.zeros((3, 32, 32), np.float32), w)
        np.testing.assert_allclose(out.data[0], w["visual.pos_embed"].data[1:], atol=1e-7)

    def test_single_pixel_touches_one_row(self, weights):
        img = np.zeros((1, 3, 32, 32), np.float32)
        img[0, 1, 13, 22] = 1.0
        out = bb.embed_patches(img, weights, positional=False).data[0]
        changed = np.nonzero(np.abs(out).sum(axis=1) > 0)[0]
        # row-major patch grid: row 13 // 8, column 22 // 8
        assert changed.tolist() == [(13 // 8) * 4 + 22 // 8]

    def test_wrong_size_rejected(self, weights):
        with pytest.raises(DimensionError):
            bb.embed_patches(np.zeros((3, 16, 16), np.float32), weights)


class TestTransformerLayer:
    @settings(max_examples=10, deadline=None)
    @given(n=st.integers(1, 12), seed=st.integers(0, 100))
    def test_shape_and_attention_rows(self, weights, n, seed):
        x = Tensor(np.random.default_rng(seed).standard_normal((2, n, 64)).astype(np.float32))
        out, attn = bb.transformer_layer_forward(x, weights.layer("visual", 0), 4)
        assert out.shape == (2, n, 64)
        assert attn.shape == (2, 4, n, n)
        np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-6)

    def test_row_swap_equivariance(self, weights):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 6, 64)).astype(np.float32)
        swapped = x.copy()
        swapped[0, [2, 4]] = swapped[0, [4, 2]]
        lw = weights.layer("visual", 1)
        a, _ = bb.transformer_layer_forward(Tensor(x), lw, 4)
        b, _ = bb.transformer_layer_forward(Tensor(swapped), lw, 4)
        expected = a.data.copy()
        expected[0, [2, 4]] = expected[0, [4, 2]]
        np.testing.assert_allclose(b.data, expected, atol=1e-5)

    def test_causal_mask_blocks_future(self, weights):
        x = np.random.default_rng(1).standard_normal((1, 5, 64)).astype(np.float32)
        mask = bb._causal_mask(5, np.float32)
        _, attn = bb.transformer_layer_forward(Tensor(x), weights.layer("text", 0), 4, mask=mask)
        assert np.all(np.triu(attn[0, 0], k=1) == 0)


class TestImageEncode:
    def test_empty_plan_unit_feature(self, weights):
        feats, attn = bb.image_encode(random_images(3), [], weights)
        assert feats.shape == (3, 64)
        np.testing.assert_allclose(np.linalg.norm(feats.data, axis=1), 1.0, atol=1e-6)
        assert attn.shape == (3, 4, 1 + 16)

    def test_prompted_sequence_length(self, weights):
        prompts = Tensor(np.random.default_rng(0).normal(0, 0.02, (10, 64)).astype(np.float32))
        _, attn, n_prompts = bb.image_encode(random_images(2), [prompts] * 4, weights, return_tokens=True)
        assert n_prompts == [10, 10, 10, 10]
        assert attn.shape[-1] == 1 + 10 + 16

    def test_plan_longer_than_depth(self, weights):
        with pytest.raises(PlanError):
            bb.image_encode(random_images(1), [None] * 5, weights)

    def test_prompt_outputs_are_discarded(self, weights, monkeypatch):
        prompts = Tensor(np.random.default_rng(2).normal(0, 0.5, (10, 64)).astype(np.float32))
        images = random_images(2, seed=4)
        reference, _ = bb.image_encode(images, [prompts] * 4, weights)
        original = bb.transformer_layer_forward

        def zero_prompt_slots(x, lw, heads, mask=None):
            out, attn = original(x, lw, heads, mask)
            data = out.data.copy()
            data[:, 1 : 1 + 10] = 0.0
            return Tensor(data), attn

        monkeypatch.setattr(bb, "transformer_layer_forward", zero_prompt_slots)
        zeroed, _ = bb.image_encode(images, [prompts] * 4, weights)
        np.testing.assert_array_equal(zeroed.data, reference.data)

    def test_prompts_change_the_feature(self, weights):
        prompts = Tensor(np.random.default_rng(2).normal(0, 0.5, (10, 64)).astype(np.float32))
        images = random_images(1)
        plain, _ = bb.image_encode(images, [], weights)
        prompted, _ = bb.image_encode(images, [prompts], weights)
        assert np.abs(plain.data - prompted.data).max() > 0

    def test_single_image_accepted(self, weights):
        images = random_images(1)
        a, _ = bb.image_encode(images[0], [], weights)
        b, _ = bb.image_encode(images, [], weights)
        np.testing.assert_array_equal(a.data, b.data)


class TestTextEncode:
    def test_deterministic_unit_norm(self, weights, vocab):
        seq = bb.template_sequence("red_square", vocab, 20)
        a = bb.text_encode(seq, weights)
        b = bb.text_encode(seq, weights)
        np.testing.assert_array_equal(a.data, b.data)
        assert abs(np.linalg.norm(a.data) - 1.0) < 1e-6

    def test_context_sensitivity(self, weights, vocab):
        seq = bb.context_sequence("red_square", 16, vocab, 20)
        ctx = np.random.default_rng(0).normal(0, 0.02, (16, 64)).astype(np.float32)
        base = bb.text_encode(seq, weights, Tensor(ctx)).data
        ctx[7, 3] += 0.1
        moved = bb.text_encode(seq, weights, Tensor(ctx)).data
        assert np.linalg.norm(moved - base) > 0

    def test_template_layout(self, vocab):
        seq = bb.template_sequence("blue_triangle", vocab, 20)
        words = [vocab.words[i] for i in seq.token_ids[: seq.end_position + 1]]
        assert words == ["<sos>", "a", "photo", "of", "a", "blue_triangle", "<eos>"]
        assert seq.class_token_position == 5

    def test_too_long_rejected(self, weights, vocab):
        with pytest.raises(DimensionError):
            bb.context_sequence("red_square", 30, vocab, 20)

    def test_unknown_word(self, vocab):
        with pytest.raises(VocabularyError):
            bb.template_sequence("purple_hexagon", vocab, 20)

    def test_padding_after_end_is_ignored(self, weights, vocab):
        # causal mask: tokens after the pooled position cannot leak back
        seq = bb.template_sequence("red_square", vocab, 20)
        other = bb.TokenSequence(list(seq.token_ids), seq.class_token_position, seq.end_position)
        other.token_ids[-1] = vocab.id("shape")
        np.testing.assert_array_equal(bb.text_encode(seq, weights).data, bb.text_encode(other, weights).data)


class TestZeroShotLogits:
    def test_matching_class_scores_inverse_temperature(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal((5, 8))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        logits = bb.zero_shot_logits(Tensor(w[2]), Tensor(w), 0.01).data
        assert np.argmax(logits) == 2
        assert logits[2] == pytest.approx(100.0, rel=1e-5)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 16))
        w = rng.standard_normal((6, 16))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        q, _ = np.linalg.qr(rng.standard_normal((16, 16)))
        a = bb.zero_shot_logits(Tensor(x), Tensor(w), 0.01).data
        b = bb.zero_shot_logits(Tensor(x @ q), Tensor(w @ q), 0.01).data
        np.testing.assert_allclose(a, b, atol=1e-3, rtol=1e-5)

    def test_unnormalised_rejected(self):
        with pytest.raises(ContractError):
            bb.zero_shot_logits(Tensor(np.ones(4)), Tensor(np.eye(4)), 0.01)

    def test_composition_matches_manual_pipeline(self, weights, vocab):
        names = ["red_square", "green_circle", "blue_triangle"]
        images = random_images(2, seed=9)
        feats, _ = bb.image_encode(images, [], weights)
        cls = bb.handcrafted_class_features(names, vocab, weights)
        logits = bb.zero_shot_logits(feats, cls, weights.temperature).data
        manual = feats.data @ cls.data.T / np.float32(0.01)
        np.testing.assert_allclose(logits, manual, rtol=1e-5)


class TestWeights:
    def test_frozen_and_seeded(self, vocab):
        cfg = bb.BackboneConfig(vocab_size=len(vocab))
        a, b = bb.init_weights(cfg, 7), bb.init_weights(cfg, 7)
        assert a.fingerprint() == b.fingerprint()
        assert a.all_frozen()
        assert a.fingerprint() != bb.init_weights(cfg, 8).fingerprint()

    def test_init_statistics(self, weights):
        w = weights["visual.layers.0.attn.wq"].data
        assert abs(float(w.std()) - 0.02) < 0.003
        np.testing.assert_array_equal(weights["visual.layers.0.ln1.gain"].data, 1.0)
        np.testing.assert_array_equal(weights["visual.layers.0.attn.bq"].data, 0.0)

    def test_round_trip(self, weights, tmp_path):
        path = tmp_path / "w.bin"
        bb.save_weights(weights, path)
        loaded = bb.init_or_load_weights(weights.config, path)
        assert loaded.fingerprint() == weights.fingerprint()
        assert loaded.all_frozen()

    def test_config_mismatch_rejected(self, weights, tmp_path):
        path = tmp_path / "w.bin"
        bb.save_weights(weights, path)
        other = bb.BackboneConfig(vocab_size=weights.config.vocab_size, visual_layers=3)
        with pytest.raises(ConfigError, match="visual_layers"):
            bb.load_weights(path, other)

    def test_bad_magic_offset(self, weights, tmp_path):
        path = tmp_path / "w.bin"
        bb.save_weights(weights, path)
        raw = bytearray(path.read_bytes())
        raw[:8] = b"NOTMAGIC"
        with pytest.raises(FormatError) as err:
            parse_container(bytes(raw), WEIGHTS_MAGIC)
        assert err.value.offset == 0

    def test_truncated_payload_offset(self, weights, tmp_path):
        path = tmp_path / "w.bin"
        bb.save_weights(weights, path)
        raw = path.read_bytes()
        with pytest.raises(FormatError) as err:
            parse_container(raw[:-10], WEIGHTS_MAGIC)
        assert 12 < err.value.offset < len(raw)
        assert "offset" in str(err.value)

    def test_trailing_bytes_rejected(self, weights, tmp_path):
        path = tmp_path / "w.bin"
        bb.save_weights(weights, path)
        with pytest.raises(FormatError):
            parse_container(path.read_bytes() + b"\0", WEIGHTS_MAGIC)

    def test_forward_pass_leaves_weights_untouched(self, weights):
        before = weights.fingerprint()
        prompts = Tensor(np.zeros((10, 64), np.float32), requires_grad=True)
        feats, _ = bb.image_encode(random_images(2), [prompts] * 4, weights)
        T.backward(feats.sum())
        assert prompts.grad is not None
        assert weights.fingerprint() == before
        assert weights.all_frozen()
