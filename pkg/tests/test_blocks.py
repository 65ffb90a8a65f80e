"""Gating, differential attention, encoder, fusion and decoder blocks."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradformer import tensor as T
from gradformer.checks import check_module
from gradformer.decoder import Decoder, predict
from gradformer.encoder import AFRAR, EncoderBlock, SiameseEncoder
from gradformer.errors import ConfigError, DimensionError
from gradformer.fusion import DifferentialAmalgamation
from gradformer.glfr import GLFR, compute_lambda, differential_attention, head_dim, simple_attention
from gradformer.sea import SEA
from oracles import da_scalar, sea_scalar, standard_attention


class TestSEA:
    def test_gate_bounds(self, rng):
        sea = SEA(4)
        sea.gamma.data[:] = rng.standard_normal(4) * 10
        sea.beta.data[:] = rng.standard_normal(4) * 10
        g = sea.gate(T.Tensor(rng.standard_normal((3, 4, 5, 5)).astype(np.float32))).data
        assert np.all(g >= 0) and np.all(g <= 2)

    def test_matches_scalar_oracle_with_random_parameters(self, rng, f64):
        sea = SEA(5)
        for p in (sea.alpha, sea.gamma, sea.beta):
            p.data = rng.standard_normal(5)
        x = rng.standard_normal((2, 5, 4, 3))
        expected = sea_scalar(x, sea.alpha.data, sea.gamma.data, sea.beta.data, sea.eps)
        np.testing.assert_allclose(sea(T.Tensor(x)).data, expected, rtol=0, atol=1e-12)

    def test_eps_range_enforced(self):
        with pytest.raises(ConfigError):
            SEA(4, eps=1e-3)

    def test_zero_input_is_finite(self):
        sea = SEA(2)
        sea.gamma.data[:] = 1.0
        out = sea(T.Tensor(np.zeros((1, 2, 3, 3))))
        assert np.all(np.isfinite(out.data))

    def test_gradients(self, rng):
        sea = SEA(4)
        with T.float64_mode():
            for p in sea.parameters():
                p.data = rng.standard_normal(p.shape)
            assert check_module(sea, [rng.standard_normal((2, 4, 3, 3))]).passed


class TestDifferentialAttention:
    def _qkv(self, rng, b=2, cq=16, cv=8, h=3, w=4):
        return (T.Tensor(rng.standard_normal((b, cq, h, w))), T.Tensor(rng.standard_normal((b, cq, h, w))),
                T.Tensor(rng.standard_normal((b, cv, h, w))))

    def test_head_dim(self):
        assert head_dim(64, 4) == 4
        assert head_dim(256, 4) == 16
        with pytest.raises(ConfigError):
            head_dim(8, 4)

    @given(st.floats(-2, 2))
    def test_rows_sum_to_one_minus_lambda(self, lam):
        rng = np.random.default_rng(0)
        q, k, v = self._qkv(rng)
        _, maps = differential_attention(q, k, v, lam, 4, return_maps=True)
        np.testing.assert_allclose(maps.a.sum(axis=-1), 1.0 - lam, atol=1e-12)
        np.testing.assert_allclose(maps.a1.sum(axis=-1), 1.0, atol=1e-12)

    def test_zero_lambda_is_standard_attention_on_first_half(self, rng):
        q, k, v = self._qkv(rng)
        out = differential_attention(q, k, v, 0.0, 4).data
        expected = standard_attention(q.data[:, :8], k.data[:, :8], v.data, 4)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_single_position(self, rng):
        q, k, v = self._qkv(rng, h=1, w=1)
        out = differential_attention(q, k, v, 0.3, 4).data
        np.testing.assert_allclose(out, 0.7 * v.data, atol=1e-12)

    def test_lambda_reparameterization(self):
        z = T.Tensor(np.zeros(4))
        assert compute_lambda(z, z, z, z, 0.8).item() == 0.8
        a = T.Tensor(np.array([1.0, 0.5]))
        b = T.Tensor(np.array([0.2, -0.4]))
        expected = np.exp(1.0 * 0.2 + 0.5 * -0.4) - np.exp(0.2 * 0.2 + -0.4 * -0.4) + 0.8
        assert compute_lambda(a, b, b, b, 0.8).item() == pytest.approx(expected, rel=1e-15)

    def test_chunked_inference_matches_batched(self, rng, monkeypatch):
        from gradformer import glfr

        q, k, v = self._qkv(rng, b=3)
        full = differential_attention(q, k, v, 0.4, 4).data
        monkeypatch.setattr(glfr, "_CHUNK_ELEMENTS", 1)
        with T.no_grad():
            chunked = differential_attention(q, k, v, 0.4, 4).data
        np.testing.assert_allclose(chunked, full, atol=1e-12)

    def test_simple_attention_shape(self, rng):
        q, k, v = self._qkv(rng, cq=8)
        assert simple_attention(q, k, v, 4).shape == v.shape


class TestGLFR:
    def test_projection_shapes(self):
        m = GLFR(64)
        assert m.wq.out_channels == 32 and m.wv.out_channels == 16 and m.local_proj.out_channels == 16
        assert m.lambda_q1.shape == (m.h_dim,) == (4,)
        out = m(T.Tensor(np.zeros((1, 32, 2, 2))))
        assert out.shape == (1, 32, 2, 2)

    def test_simple_variant_has_no_lambda(self):
        m = GLFR(64, attention="simple")
        assert m.wq.out_channels == 16
        assert not any("lambda" in n for n, _ in m.named_parameters())

    def test_lambda_init_is_close_to_constant(self):
        # the four vectors start near zero, so lambda starts near lambda_init
        assert abs(GLFR(256).lam().item() - 0.8) < 0.2

    def test_rejects_wrong_channels(self):
        with pytest.raises(DimensionError):
            GLFR(32)(T.Tensor(np.zeros((1, 8, 2, 2))))

    @pytest.mark.parametrize("attention", ["differential", "simple"])
    def test_gradients(self, attention, rng):
        with T.float64_mode():
            assert check_module(GLFR(16, attention=attention, rng=rng), [rng.standard_normal((2, 8, 3, 3))]).passed


class TestEncoder:
    def test_afrar_preserves_shape_and_routes_halves(self, rng):
        m = AFRAR(32, rng=rng)
        x = rng.standard_normal((1, 32, 4, 4)).astype(np.float32)
        out = m(T.Tensor(x)).data
        assert out.shape == x.shape
        # SEA is the identity at initialization, so the second half passes through
        np.testing.assert_array_equal(out[:, 16:], x[:, 16:])

    def test_block_is_residual(self):
        # zero pre-norm affine maps feed zeros into both branches, which map 0 -> 0
        block = EncoderBlock(16)
        for p in block.mlp.parameters() + block.norm1.parameters() + block.norm2.parameters():
            p.data[...] = 0.0
        x = np.random.default_rng(0).standard_normal((1, 16, 4, 4)).astype(np.float32)
        np.testing.assert_array_equal(block(T.Tensor(x)).data, x)

    def test_stage_resolutions(self):
        enc = SiameseEncoder((16, 32, 48, 64), (1, 1, 1, 1))
        feats = enc(T.Tensor(np.zeros((1, 3, 64, 64))))
        assert [f.shape for f in feats] == [(1, 16, 16, 16), (1, 32, 8, 8), (1, 48, 4, 4), (1, 64, 2, 2)]

    def test_requires_multiple_of_32(self):
        enc = SiameseEncoder((16, 32, 48, 64), (1, 1, 1, 1))
        with pytest.raises(DimensionError):
            enc(T.Tensor(np.zeros((1, 3, 48, 48))))

    def test_pair_batching_equals_separate_passes(self, rng, f64):
        enc = SiameseEncoder((16, 32, 48, 64), (1, 1, 1, 1))
        a, b = rng.uniform(size=(1, 3, 32, 32)), rng.uniform(size=(1, 3, 32, 32))
        pre, post = enc.encode_pair(T.Tensor(a), T.Tensor(b))
        for got, ref in zip(pre, enc(T.Tensor(a))):
            np.testing.assert_allclose(got.data, ref.data, rtol=1e-10, atol=1e-12)
        for got, ref in zip(post, enc(T.Tensor(b))):
            np.testing.assert_allclose(got.data, ref.data, rtol=1e-10, atol=1e-12)


class TestFusion:
    def test_matches_scalar_oracle(self, rng, f64):
        da = DifferentialAmalgamation(3, rng=rng)
        pre, post = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 4, 4))
        expected = da_scalar(pre, post, da.proj.weight.data, da.proj.bias.data)
        np.testing.assert_allclose(da(T.Tensor(pre), T.Tensor(post)).data, expected, atol=1e-12)

    def test_identical_inputs_null_the_difference_channels(self, rng, f64):
        da = DifferentialAmalgamation(2, rng=rng)
        x = T.Tensor(rng.standard_normal((1, 2, 3, 3)))
        before = da(x, x).data
        da.proj.weight.data[:, 4:] = 123.0
        np.testing.assert_array_equal(da(x, x).data, before)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            DifferentialAmalgamation(2)(T.Tensor(np.zeros((1, 2, 2, 2))), T.Tensor(np.zeros((1, 2, 4, 4))))


class TestDecoder:
    def _fused(self, size=8, channels=(16, 32, 48, 64)):
        return [T.Tensor(np.zeros((1, c, size >> i, size >> i))) for i, c in enumerate(channels)]

    def test_output_resolution_is_four_times_stage_one(self):
        out = Decoder((16, 32, 48, 64), 8)(self._fused())
        assert out.shape == (1, 2, 32, 32)

    def test_merge_channels(self):
        assert Decoder((16, 32, 48, 64), 8).merge(self._fused()).shape == (1, 160, 8, 8)

    def test_rejects_misaligned_stages(self):
        fused = self._fused()
        fused[2] = T.Tensor(np.zeros((1, 48, 3, 3)))
        with pytest.raises(DimensionError):
            Decoder((16, 32, 48, 64), 8)(fused)

    def test_predict_ties_go_to_no_change(self):
        logits = np.array([[[[1.0, 0.0, 2.0]], [[1.0, 0.5, 1.0]]]])
        assert predict(logits).tolist() == [[[0, 1, 0]]]
