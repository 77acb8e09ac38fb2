"""Sign quantization, bit packing, and the xnor dot product."""

import itertools

import numpy as np
import pytest

from bnll.bintensor import (
    BitPlaneTensor,
    QuantizationPolicy,
    ShapeError,
    pack_bits,
    pack_sign_rows,
    quantize_weights,
    unpack_bits,
    words_per_filter,
    xnor_dot,
)


def brute_dot(a, b):
    """Independent oracle: plain +-1 dot product."""
    return int(sum(int(x) * int(y) for x, y in zip(a, b)))


class TestQuantizeWeights:
    def test_single_filter_alpha_is_mean_abs(self):
        w = np.array([0.5, -1.0, 0.3, -0.2], np.float32).reshape(1, 1, 1, 4)
        b = quantize_weights(w)
        assert np.allclose(unpack_bits(b).ravel(), [1, -1, 1, -1])
        assert b.alphas[0] == pytest.approx(0.5)

    def test_all_zeros_sign_is_plus_one(self):
        w = np.zeros((1, 1, 3, 3), np.float32)
        b = quantize_weights(w)
        assert np.all(unpack_bits(b) == 1)
        assert b.alphas[0] == 0.0

    def test_symmetric_magnitudes(self):
        w = np.array([2.0, -2.0], np.float32).reshape(1, 1, 1, 2)
        b = quantize_weights(w)
        assert np.allclose(unpack_bits(b).ravel(), [1, -1])
        assert b.alphas[0] == pytest.approx(2.0)

    def test_scaling_off_gives_unit_alphas(self):
        w = np.random.default_rng(0).normal(size=(4, 2, 3, 3)).astype(np.float32)
        b = quantize_weights(w, QuantizationPolicy(weight_scaling=False))
        assert np.all(b.alphas == 1.0)

    def test_empty_tensor_rejected(self):
        with pytest.raises(ShapeError):
            quantize_weights(np.zeros((0, 1, 3, 3), np.float32))

    def test_nan_rejected(self):
        w = np.full((1, 1, 1, 2), np.nan, np.float32)
        with pytest.raises(ValueError):
            quantize_weights(w)

    @pytest.mark.parametrize("n", [2, 3, 4])
    def test_alpha_sign_pair_minimizes_l2(self, n):
        # brute force over every sign assignment; closed-form best alpha per
        # assignment is dot(w, s)/n
        rng = np.random.default_rng(n)
        w = rng.normal(size=n)
        best = np.inf
        for signs in itertools.product([-1.0, 1.0], repeat=n):
            s = np.array(signs)
            alpha = max(0.0, float(w @ s) / n)
            best = min(best, float(((w - alpha * s) ** 2).sum()))
        b = quantize_weights(w.reshape(1, 1, 1, n).astype(np.float32))
        ours = float(((w - b.alphas[0] * unpack_bits(b).ravel()) ** 2).sum())
        assert ours == pytest.approx(best, rel=1e-5)


class TestPacking:
    def test_three_elements_lsb_first(self):
        signs = np.array([1.0, 1.0, -1.0]).reshape(1, 1, 1, 3)
        b = pack_bits(signs)
        assert b.words.shape == (1, 1)
        assert int(b.words[0, 0]) == 0b011

    def test_round_trip_random(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            shape = tuple(rng.integers(1, 6, size=4))
            signs = rng.choice([-1.0, 1.0], size=shape).astype(np.float32)
            assert np.array_equal(unpack_bits(pack_bits(signs)), signs)

    def test_65_elements_two_words(self):
        assert words_per_filter(65) == 2
        signs = np.ones((1, 1, 1, 65), np.float32)
        signs[0, 0, 0, 64] = -1.0
        b = pack_bits(signs)
        assert b.words.shape == (1, 2)
        assert int(b.words[0, 1]) == 0  # 65th bit is -1 -> 0, rest padding
        assert np.array_equal(unpack_bits(b), signs)

    def test_pack_unpack_identity_on_bitplanes(self):
        rng = np.random.default_rng(3)
        signs = rng.choice([-1.0, 1.0], size=(4, 3, 3, 3)).astype(np.float32)
        b = pack_bits(signs)
        b2 = pack_bits(unpack_bits(b))
        assert np.array_equal(b.words, b2.words)

    def test_non_sign_input_rejected(self):
        with pytest.raises(ValueError):
            pack_bits(np.array([1.0, 0.5]).reshape(1, 1, 1, 2))

    def test_padding_bits_forced_zero(self):
        words = np.array([[np.uint64(0xFFFF_FFFF_FFFF_FFFF)]])
        b = BitPlaneTensor((1, 1, 1, 3), words.astype(np.uint64))
        assert int(b.words[0, 0]) == 0b111


class TestXnorDot:
    def test_identical_operands(self):
        a = pack_sign_rows(np.array([[1.0, -1.0, 1.0, -1.0]]))
        assert xnor_dot(a[0], a[0], 4) == 4

    def test_three_bit_example(self):
        a = pack_sign_rows(np.array([[1.0, 1.0, -1.0]]))
        b = pack_sign_rows(np.array([[1.0, -1.0, -1.0]]))
        assert xnor_dot(a[0], b[0], 3) == 1

    def test_alternating_eight(self):
        va = [1, -1, 1, -1, 1, -1, 1, -1]
        vb = [1, 1, -1, -1, 1, 1, -1, -1]
        a = pack_sign_rows(np.array([va], float))
        b = pack_sign_rows(np.array([vb], float))
        assert xnor_dot(a[0], b[0], 8) == brute_dot(va, vb)

    def test_word_count_mismatch(self):
        a = pack_sign_rows(np.ones((1, 4)))
        b = pack_sign_rows(np.ones((1, 70)))
        with pytest.raises(ShapeError):
            xnor_dot(a[0], b[0], 4)

    def test_wrong_logical_length(self):
        a = pack_sign_rows(np.ones((1, 4)))
        with pytest.raises(ShapeError):
            xnor_dot(a[0], a[0], 100)

    @pytest.mark.parametrize("n", range(1, 9))
    def test_exhaustive_small_lengths(self, n):
        vecs = [np.array(v, float) for v in itertools.product([-1.0, 1.0], repeat=n)]
        packed = pack_sign_rows(np.stack(vecs))
        for i, va in enumerate(vecs):
            for j, vb in enumerate(vecs):
                assert xnor_dot(packed[i], packed[j], n) == brute_dot(va, vb)

    def test_random_lengths_to_twelve(self):
        rng = np.random.default_rng(11)
        for _ in range(2000):
            n = int(rng.integers(1, 13))
            va = rng.choice([-1.0, 1.0], size=n)
            vb = rng.choice([-1.0, 1.0], size=n)
            pa = pack_sign_rows(va[None, :])
            pb = pack_sign_rows(vb[None, :])
            assert xnor_dot(pa[0], pb[0], n) == brute_dot(va, vb)

    def test_long_vectors(self):
        rng = np.random.default_rng(13)
        for n in (64, 65, 1000, 4096):
            va = rng.choice([-1.0, 1.0], size=n)
            vb = rng.choice([-1.0, 1.0], size=n)
            pa = pack_sign_rows(va[None, :])
            pb = pack_sign_rows(vb[None, :])
            assert xnor_dot(pa[0], pb[0], n) == int(va @ vb)
