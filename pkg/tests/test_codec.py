import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from axisdelta.codec import (
    AxisScaleVector,
    PackedSignMask,
    constant_vector,
    pack_signs,
    patched_forward,
    reconstruct,
    scalar_reconstruct,
    sign_mask,
    unpack_signs,
)
from axisdelta.model import DeltaProfile, ModelSpec, init_base, synth_finetune
from axisdelta.tensor import DimensionError, matmul, to_half_array


def vec(axis, values):
    return AxisScaleVector(axis, to_half_array(np.asarray(values, np.float32)))


class TestSignMask:
    def test_hand_example_with_zero(self):
        m = sign_mask(np.array([[0.5, -0.2], [0.0, 1.0]], np.float32))
        assert np.array_equal(unpack_signs(m), [[1, -1], [1, 1]])

    def test_all_negative_is_all_zero_bits(self):
        m = sign_mask(-np.ones((3, 9), np.float32))
        assert not m.bits.any()

    def test_roundtrip_vs_scalar_sign_loop(self):
        rng = np.random.default_rng(2)
        d = rng.normal(size=(33, 65)).astype(np.float32)
        got = unpack_signs(sign_mask(d))
        for i in range(33):
            for j in range(65):
                assert got[i, j] == (1.0 if d[i, j] >= 0 else -1.0)

    @settings(deadline=None, max_examples=40)
    @given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 10**6))
    def test_pack_unpack_identity_any_shape(self, d_out, d_in, seed):
        rng = np.random.default_rng(seed)
        signs01 = rng.integers(0, 2, size=(d_out, d_in))
        packed = pack_signs(signs01)
        mask = PackedSignMask(d_out, d_in, packed)
        assert np.array_equal((unpack_signs(mask) + 1) / 2, signs01)
        assert np.array_equal(pack_signs((unpack_signs(mask) + 1) / 2), mask.bits)

    def test_padding_bits_zero(self):
        mask = sign_mask(np.ones((2, 11), np.float32))
        # 11 columns: last byte has 3 used bits, 5 padding bits must be zero
        assert np.array_equal(mask.bits[:, 1] >> 3, np.zeros(2, np.uint8))

    def test_lsb_first_bit_order(self):
        d = np.array([[1.0, -1.0, 1.0, -1.0, -1.0, -1.0, -1.0, -1.0, 1.0]], np.float32)
        mask = sign_mask(d)
        assert mask.bits[0, 0] == 0b00000101
        assert mask.bits[0, 1] == 0b00000001


class TestReconstruct:
    def test_zero_scale_is_base(self):
        base = np.random.default_rng(0).normal(size=(4, 6)).astype(np.float32)
        mask = sign_mask(base)
        out = reconstruct(base, mask, vec("row", np.zeros(4)))
        assert np.array_equal(out, base)

    def test_hand_example(self):
        base = np.zeros((2, 2), np.float32)
        mask = sign_mask(np.array([[1.0, -1.0], [1.0, 1.0]], np.float32))
        out = reconstruct(base, mask, vec("row", [1.0, 2.0]))
        assert np.array_equal(out, [[1.0, -1.0], [2.0, 2.0]])

    def test_true_row_scales_recover_finetuned_within_half_rounding(self):
        spec = ModelSpec(vocab=32, d_model=16, n_heads=2, d_ff=24, n_layers=1, seed=2)
        base = init_base(spec)
        ft = synth_finetune(base, DeltaProfile(axis="row", seed=6))
        name = "blocks.0.attn.v_proj"
        _, s = ft.true_scales[name]
        delta = ft.model.params[name] - base.params[name]
        out = reconstruct(base.params[name], sign_mask(delta), vec("row", s))
        rel = np.abs(out - ft.model.params[name]) / np.maximum(
            np.abs(ft.model.params[name]), 1e-12
        )
        assert rel.max() <= 2.0**-11 * 4  # half rounding of s, scaled by base ratio

    def test_shape_mismatch(self):
        base = np.zeros((3, 4), np.float32)
        mask = sign_mask(np.ones((3, 4), np.float32))
        with pytest.raises(DimensionError):
            reconstruct(base, mask, vec("row", np.zeros(4)))
        with pytest.raises(DimensionError):
            reconstruct(np.zeros((4, 4), np.float32), mask, vec("row", np.zeros(3)))

    def test_linearity_in_v(self):
        rng = np.random.default_rng(1)
        base = np.zeros((8, 8), np.float32)  # keeps the subtraction below exact
        mask = sign_mask(rng.normal(size=(8, 8)).astype(np.float32))
        # dyadic values so fp32 sums below stay exact
        v1 = (rng.integers(0, 16, 8) / 64.0).astype(np.float32)
        v2 = (rng.integers(0, 16, 8) / 64.0).astype(np.float32)
        d12 = reconstruct(base, mask, vec("row", v1 + v2)) - base
        d1 = reconstruct(base, mask, vec("row", v1)) - base
        d2 = reconstruct(base, mask, vec("row", v2)) - base
        assert np.array_equal(d12, d1 + d2)

    def test_row_col_coincide_1x1(self):
        base = np.array([[0.25]], np.float32)
        mask = sign_mask(np.array([[-1.0]], np.float32))
        r = reconstruct(base, mask, vec("row", [0.5]))
        c = reconstruct(base, mask, vec("col", [0.5]))
        assert np.array_equal(r, c)


class TestPatchedForward:
    def test_zero_scale_matches_base_matmul(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(5, 6)).astype(np.float32)
        base = rng.normal(size=(3, 6)).astype(np.float32)
        mask = sign_mask(rng.normal(size=(3, 6)).astype(np.float32))
        out = patched_forward(x, base, mask, vec("row", np.zeros(3)))
        assert np.array_equal(out, matmul(x, base))

    def test_one_hot_probe(self):
        rng = np.random.default_rng(8)
        base = rng.normal(size=(3, 5)).astype(np.float32)
        mask = sign_mask(rng.normal(size=(3, 5)).astype(np.float32))
        signs = unpack_signs(mask)
        v = vec("col", [0.5, 0.25, 0.125, 1.0, 2.0])
        j = 3
        x = np.zeros((1, 5), np.float32)
        x[0, j] = 1.0
        out = patched_forward(x, base, mask, v)
        expect = base[:, j] + np.float32(v.values[j]) * signs[:, j]
        assert np.allclose(out[0], expect, rtol=1e-6)

    @pytest.mark.parametrize("axis", ["row", "col"])
    def test_matches_dense_reconstruction(self, axis):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(128, 128)).astype(np.float32)
        base = rng.normal(size=(128, 128)).astype(np.float32)
        mask = sign_mask(rng.normal(size=(128, 128)).astype(np.float32))
        v = vec(axis, rng.uniform(0, 0.1, 128))
        fast = patched_forward(x, base, mask, v)
        dense = matmul(x, reconstruct(base, mask, v))
        rel = np.linalg.norm(fast - dense) / np.linalg.norm(dense)
        assert rel <= 1e-5


class TestScalarReconstruct:
    def test_alpha_zero(self):
        base = np.random.default_rng(0).normal(size=(4, 4)).astype(np.float32)
        mask = sign_mask(base)
        assert np.array_equal(scalar_reconstruct(base, mask, 0.0), base)

    def test_equals_constant_row_vector(self):
        rng = np.random.default_rng(3)
        base = rng.normal(size=(4, 7)).astype(np.float32)
        mask = sign_mask(rng.normal(size=(4, 7)).astype(np.float32))
        alpha = 0.125  # exactly representable in half
        a = scalar_reconstruct(base, mask, alpha)
        b = reconstruct(base, mask, constant_vector("row", 4, alpha))
        assert np.array_equal(a, b)


class TestAxisScaleVector:
    def test_rejects_bad_axis(self):
        with pytest.raises(ValueError):
            AxisScaleVector("diag", np.zeros(3, np.float16))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            AxisScaleVector("row", np.array([np.inf], np.float16))
