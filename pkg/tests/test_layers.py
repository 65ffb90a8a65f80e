import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradformer import tensor as T
from gradformer.errors import DimensionError
from gradformer.layers import (ConvMlp, Conv2d, ConvTranspose2d, InstanceNorm2d, Module, PatchEmbed,
                               conv2d, conv_transpose2d, instance_norm, stage_embed)
from oracles import conv2d_loops, conv_transpose2d_loops


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 1), (1, 1, 3), (2, 1, 3), (4, 3, 7), (2, 0, 2)])
def test_conv2d_integer_inputs_exact(rng, stride, pad, k):
    x = rng.integers(-4, 5, (2, 3, 9, 9)).astype(np.float64)
    w = rng.integers(-3, 4, (4, 3, k, k)).astype(np.float64)
    b = rng.integers(-2, 3, 4).astype(np.float64)
    got = conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride, pad).data
    np.testing.assert_array_equal(got, conv2d_loops(x, w, b, stride, pad))


@pytest.mark.parametrize("stride,pad,k", [(2, 0, 2), (1, 1, 3), (2, 1, 3)])
def test_conv_transpose2d_integer_inputs_exact(rng, stride, pad, k):
    x = rng.integers(-4, 5, (2, 3, 4, 5)).astype(np.float64)
    w = rng.integers(-3, 4, (3, 2, k, k)).astype(np.float64)
    b = rng.integers(-2, 3, 2).astype(np.float64)
    got = conv_transpose2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride, pad).data
    np.testing.assert_array_equal(got, conv_transpose2d_loops(x, w, b, stride, pad))


def test_conv_transpose_is_adjoint_of_conv(rng):
    # <conv(x), y> == <x, conv_t(y)> for the same kernel
    x = rng.standard_normal((1, 3, 7, 7))
    w = rng.standard_normal((5, 3, 3, 3))
    y = rng.standard_normal((1, 5, 4, 4))
    lhs = np.sum(conv2d(T.Tensor(x), T.Tensor(w), None, 2, 1).data * y)
    rhs = np.sum(x * conv_transpose2d(T.Tensor(y), T.Tensor(w), None, 2, 1).data)
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_grouped_conv_matches_per_group_convs(rng):
    x = rng.standard_normal((1, 4, 5, 5))
    w = rng.standard_normal((6, 2, 3, 3))
    got = conv2d(T.Tensor(x), T.Tensor(w), None, 1, 1, groups=2).data
    first = conv2d_loops(x[:, :2], w[:3], None, 1, 1)
    second = conv2d_loops(x[:, 2:], w[3:], None, 1, 1)
    np.testing.assert_allclose(got, np.concatenate([first, second], axis=1), atol=1e-12)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d(T.Tensor(np.ones((1, 2, 4, 4))), T.Tensor(np.ones((1, 3, 1, 1))))


def test_instance_norm_statistics(rng):
    x = rng.standard_normal((2, 3, 6, 6)) * 5 + 2
    out = instance_norm(T.Tensor(x), T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)), eps=0.0).data
    np.testing.assert_allclose(out.mean(axis=(2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(2, 3)), 1.0, rtol=1e-10)


def test_instance_norm_is_per_sample(rng):
    norm = InstanceNorm2d(3)
    a, b = rng.standard_normal((1, 3, 4, 4)), rng.standard_normal((1, 3, 4, 4))
    joint = norm(T.Tensor(np.concatenate([a, b]))).data
    np.testing.assert_array_equal(joint[:1], norm(T.Tensor(a)).data)


@pytest.mark.parametrize("module_fn,shape", [
    (lambda: Conv2d(3, 4, 3, stride=2, padding=1), (2, 3, 6, 6)),
    (lambda: ConvTranspose2d(3, 2, 2, 2), (1, 3, 3, 3)),
    (lambda: ConvMlp(4, 2), (1, 4, 3, 3)),
], ids=["conv", "conv_t", "mlp"])
def test_module_gradients(module_fn, shape, rng):
    from gradformer.checks import check_module

    with T.float64_mode():
        report = check_module(module_fn(), [rng.standard_normal(shape)])
    assert report.passed, report


@pytest.mark.parametrize("stage,size,expected", [(1, 64, 16), (2, 16, 8), (3, 8, 4), (4, 4, 2)])
def test_stage_embed_downsampling(stage, size, expected):
    embed = stage_embed(stage, 3, 16)
    assert isinstance(embed, PatchEmbed)
    out = embed(T.Tensor(np.zeros((1, 3, size, size))))
    assert out.shape == (1, 16, expected, expected)


def test_patch_embed_rejects_indivisible_input():
    with pytest.raises(DimensionError):
        stage_embed(1, 3, 16)(T.Tensor(np.zeros((1, 3, 30, 30))))


class _Pair(Module):
    def __init__(self):
        self.a = Conv2d(2, 2, 1)
        self.b = InstanceNorm2d(2)


def test_module_parameter_names_follow_attribute_order():
    names = [n for n, _ in _Pair().named_parameters()]
    assert names == ["a.weight", "a.bias", "b.gain", "b.shift"]


def test_state_dict_is_a_copy():
    m = _Pair()
    state = m.state_dict()
    m.a.weight.data += 1.0
    assert not np.array_equal(state["a.weight"], m.a.weight.data)
    m.load_state_dict(state)
    np.testing.assert_array_equal(state["a.weight"], m.a.weight.data)


def test_load_state_dict_rejects_wrong_shape():
    m = _Pair()
    state = m.state_dict()
    state["a.weight"] = np.zeros((3, 2, 1, 1))
    with pytest.raises(DimensionError):
        m.load_state_dict(state)


@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2), st.integers(3, 9))
def test_conv_output_size_formula(k, stride, pad, size):
    if size + 2 * pad < k:
        return
    out = conv2d(T.Tensor(np.zeros((1, 1, size, size))), T.Tensor(np.zeros((1, 1, k, k))), None,
                 stride, pad)
    assert out.shape[-1] == (size + 2 * pad - k) // stride + 1


@given(st.integers(0, 2), st.integers(1, 2))
def test_pointwise_conv_with_padding_matches_oracle(pad, stride):
    rng = np.random.default_rng(pad * 10 + stride)
    x, w = rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((3, 2, 1, 1))
    got = conv2d(T.Tensor(x), T.Tensor(w), None, stride, pad).data
    np.testing.assert_allclose(got, conv2d_loops(x, w, None, stride, pad), atol=1e-12)
