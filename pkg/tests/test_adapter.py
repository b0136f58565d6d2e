import numpy as np
import pytest

import numerics as nx
from adapter import (
    AdapterWeights,
    build_vocab,
    cross_attend_fuse,
    encode_reference,
    encode_text,
    mean_pool,
    reference_vector,
    style_embedding,
)
from dataset import ReferenceClip
from dsp import DspConfig
from errors import ContractError, DimensionError, InputError
from helpers import randomize, tone

SMALL_DSP = DspConfig(hop=512, mel_bins=16)
CAPTIONS = ["a dog barks", "a bell rings", "rain falls"]


def small_adapter(rng, **kwargs):
    options = dict(d=8, heads=2, d_r=8, r_len=4, encoder_channels=(2, 4, 4, 4), dsp_cfg=SMALL_DSP)
    options.update(kwargs)
    return AdapterWeights(build_vocab(CAPTIONS), rng, **options)


def scalar_adapter(rng, w_v=1.0):
    weights = AdapterWeights(build_vocab(["a"]), rng, d=1, heads=1, d_r=1, r_len=1,
                             encoder_channels=(2,), dsp_cfg=SMALL_DSP)
    weights.w_q.data = np.array([[1.0]])
    weights.w_k.data = np.array([[1.0]])
    weights.w_v.data = np.array([[w_v]])
    return weights


class TestVocab:
    def test_unk_is_zero_and_tokens_sorted(self):
        vocab = build_vocab(["B a", "c a"])
        assert vocab == {"<unk>": 0, "a": 1, "b": 2, "c": 3}

    def test_meta_round_trip(self, rng):
        weights = small_adapter(rng)
        assert AdapterWeights.vocab_from_meta(weights.meta()) == weights.vocab


class TestEncodeReference:
    def test_shape_and_determinism(self, rng):
        weights = small_adapter(rng)
        clip = ReferenceClip("bell", tone(660.0, 2.0), 0)
        a, b = encode_reference(clip, weights), encode_reference(clip, weights)
        assert a.shape == (4, 8)
        np.testing.assert_array_equal(a.data, b.data)

    def test_zero_encoder_gives_zero_embedding(self, rng):
        weights = small_adapter(rng)
        for p in weights.encoder.parameters():
            p.data = np.zeros_like(p.data)
        assert not encode_reference(tone(440.0, 2.0), weights).data.any()

    def test_wrong_length(self, rng):
        with pytest.raises(ContractError, match="32000"):
            encode_reference(np.zeros(16000), small_adapter(rng))

    def test_too_few_frames_for_sequence(self, rng):
        with pytest.raises(ContractError, match="r_len"):
            encode_reference(tone(440.0, 2.0), small_adapter(rng, r_len=8))

    def test_reference_vector(self, rng):
        assert reference_vector(tone(440.0, 2.0), small_adapter(rng)).shape == (8,)


class TestEncodeText:
    def test_rows_of_the_table(self, rng):
        weights = small_adapter(rng)
        emb = encode_text("Dog barks", weights)
        ids = [weights.vocab["dog"], weights.vocab["barks"]]
        assert emb.token_ids == ids
        np.testing.assert_array_equal(emb.e_t.data, weights.token_table.data[ids])

    def test_unseen_word_maps_to_unk(self, rng):
        weights = small_adapter(rng)
        emb = encode_text("zebra", weights)
        assert emb.token_ids == [0]
        np.testing.assert_array_equal(emb.e_t.data[0], weights.token_table.data[0])

    def test_same_caption_twice(self, rng):
        weights = small_adapter(rng)
        np.testing.assert_array_equal(encode_text("a dog", weights).e_t.data, encode_text("a dog", weights).e_t.data)

    def test_empty_caption(self, rng):
        with pytest.raises(InputError):
            encode_text("   ", small_adapter(rng))


class TestCrossAttendFuse:
    def test_scalar_hand_case(self, rng):
        out = cross_attend_fuse(np.array([[1.0]]), np.array([[2.0]]), scalar_adapter(rng))
        np.testing.assert_array_equal(out.data, [[3.0]])

    def test_single_key_passes_value_through(self, rng):
        weights = small_adapter(rng, r_len=1)
        e_t, e_r = rng.normal((3, 8)), rng.normal((1, 8))
        out = cross_attend_fuse(e_t, e_r, weights)
        np.testing.assert_allclose(out.data, e_r @ weights.w_v.data + e_t, atol=1e-12)

    def test_zero_value_path_is_residual(self, rng):
        weights = small_adapter(rng)
        weights.w_v.data = np.zeros_like(weights.w_v.data)
        e_t = rng.normal((5, 8))
        np.testing.assert_array_equal(cross_attend_fuse(e_t, rng.normal((4, 8)), weights).data, e_t)

    def test_attention_rows_sum_to_one(self, rng):
        weights = small_adapter(rng)
        _, maps = cross_attend_fuse(rng.normal((5, 8)), rng.normal((4, 8)) * 5, weights, return_attention=True)
        assert len(maps) == 2
        for attn in maps:
            assert attn.shape == (5, 4)
            np.testing.assert_allclose(attn.sum(axis=1), 1.0, atol=1e-12)

    def test_reference_changes_output(self, rng):
        weights = small_adapter(rng)
        e_t = rng.normal((3, 8))
        a = cross_attend_fuse(e_t, rng.normal((4, 8)), weights).data
        b = cross_attend_fuse(e_t, rng.normal((4, 8)), weights).data
        assert not np.allclose(a, b)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionError):
            cross_attend_fuse(rng.normal((3, 6)), rng.normal((4, 8)), small_adapter(rng))
        with pytest.raises(DimensionError):
            cross_attend_fuse(rng.normal((3, 8)), rng.normal((4, 5)), small_adapter(rng))


class TestMeanPool:
    def test_single_row(self):
        np.testing.assert_array_equal(mean_pool(np.array([[1.0, 2.0]])).data, [1.0, 2.0])

    def test_hand_case(self):
        np.testing.assert_array_equal(mean_pool(np.array([[1.0, 3.0], [3.0, 5.0]])).data, [2.0, 4.0])

    def test_permutation_invariant(self, rng):
        x = rng.normal((5, 3))
        np.testing.assert_allclose(mean_pool(x[::-1]).data, mean_pool(x).data, atol=1e-15)

    def test_empty(self):
        with pytest.raises(ContractError):
            mean_pool(np.zeros((0, 3)))


class TestStyleEmbedding:
    def test_shape(self, rng):
        assert style_embedding("a dog barks", tone(440.0, 2.0), small_adapter(rng)).shape == (8,)

    def test_concat_fusion(self, rng):
        weights = small_adapter(rng, fusion="concat")
        assert style_embedding("a dog barks", tone(440.0, 2.0), weights).shape == (8,)

    def test_reference_matters(self, rng):
        weights = small_adapter(rng)
        a = style_embedding("a dog barks", tone(440.0, 2.0), weights).data
        b = style_embedding("a dog barks", tone(2000.0, 2.0, amp=0.1), weights).data
        assert not np.allclose(a, b)

    def test_unknown_fusion(self, rng):
        with pytest.raises(ContractError):
            small_adapter(rng, fusion="sum")

    def test_full_gradient_check(self, rng):
        weights = small_adapter(rng, r_len=2)
        randomize(weights, rng)
        target = rng.normal(8)
        clip = tone(440.0, 2.0) + 0.05 * rng.normal(32000)
        params = dict(weights.named_parameters())
        errors = nx.gradient_check(lambda: nx.tsum(style_embedding("a dog barks", clip, weights) * target), params)
        assert max(errors.values()) < 1e-4
