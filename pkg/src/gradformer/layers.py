"""Neural-network building blocks on top of :mod:`gradformer.tensor`."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable tensor."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype or T.default_dtype())


class Module:
    """Minimal container that discovers parameters and submodules by attribute.

    Attribute insertion order defines the parameter namespace, so names are
    stable across builds of the same configuration.
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = [name for name in own if name not in state]
        if missing:
            raise KeyError(f"missing entry {missing[0]!r}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise DimensionError(f"entry {name!r}: shape {value.shape} != expected {p.shape}")
            p.data = np.array(value, dtype=p.dtype, copy=True)

    def astype(self, dtype):
        """Cast every parameter in place; returns ``self``."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def _he_normal(rng, shape, fan_in):
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape)


# ---------------------------------------------------------------------------
# Convolution kernels
# ---------------------------------------------------------------------------

def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp, kh, kw, sh, sw, ho, wo):
    """Padded input [B,C,Hp,Wp] -> columns [B*Ho*Wo, C*kh*kw]."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    b, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)


def _col2im(cols, shape, kh, kw, sh, sw, ho, wo):
    """Scatter-add columns [B,Ho,Wo,C,kh,kw] back into a padded image."""
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.transpose(0, 3, 4, 5, 1, 2)  # B,C,kh,kw,Ho,Wo
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += cols[:, :, i, j]
    return out


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """2-D cross-correlation. ``weight`` is [Cout, Cin/groups, kh, kw]."""
    x, weight = T.as_tensor(x), T.as_tensor(weight)
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects [B,C,H,W], got {x.shape}")
    b, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if cin != cin_g * groups or cout % groups:
        raise DimensionError(f"conv2d channel mismatch: input {cin}, weight {weight.shape}, groups {groups}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    ho, wo = _conv_out(h, kh, sh, ph), _conv_out(w, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise DimensionError(f"input {h}x{w} too small for kernel {kh}x{kw} with padding {padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    cout_g = cout // groups
    pointwise = kh == kw == 1 and sh == sw == 1 and not (ph or pw)

    cols_per_group = []
    out = np.empty((b, cout, ho, wo), dtype=np.result_type(x.dtype, weight.dtype))
    for gi in range(groups):
        xs = xp[:, gi * cin_g:(gi + 1) * cin_g]
        wmat = weight.data[gi * cout_g:(gi + 1) * cout_g].reshape(cout_g, -1)
        if pointwise:
            cols_per_group.append(None)
            out[:, gi * cout_g:(gi + 1) * cout_g] = np.matmul(wmat, xs.reshape(b, cin_g, h * w)).reshape(b, cout_g, ho, wo)
        else:
            cols = _im2col(xs, kh, kw, sh, sw, ho, wo)
            cols_per_group.append(cols)
            res = cols @ wmat.T
            out[:, gi * cout_g:(gi + 1) * cout_g] = res.reshape(b, ho, wo, cout_g).transpose(0, 3, 1, 2)
    parents = [x, weight]
    if bias is not None:
        bias = T.as_tensor(bias)
        out += bias.data.reshape(1, cout, 1, 1)
        parents.append(bias)

    def backward_fn(g):
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(weight.data) if weight.requires_grad else None
        for gi in range(groups):
            gs = g[:, gi * cout_g:(gi + 1) * cout_g]
            wmat = weight.data[gi * cout_g:(gi + 1) * cout_g].reshape(cout_g, -1)
            if pointwise:
                gflat = gs.reshape(b, cout_g, h * w)
                xs = xp[:, gi * cin_g:(gi + 1) * cin_g].reshape(b, cin_g, h * w)
                if gw is not None:
                    gw[gi * cout_g:(gi + 1) * cout_g] = np.tensordot(
                        gflat, xs, axes=([0, 2], [0, 2])).reshape(cout_g, cin_g, 1, 1)
                if gx is not None:
                    gx[:, gi * cin_g:(gi + 1) * cin_g] = np.matmul(wmat.T, gflat).reshape(b, cin_g, h, w)
                continue
            gcols = gs.transpose(0, 2, 3, 1).reshape(b * ho * wo, cout_g)
            if gw is not None:
                gw[gi * cout_g:(gi + 1) * cout_g] = (gcols.T @ cols_per_group[gi]).reshape(cout_g, cin_g, kh, kw)
            if gx is not None:
                dcols = (gcols @ wmat).reshape(b, ho, wo, cin_g, kh, kw)
                gx[:, gi * cin_g:(gi + 1) * cin_g] = _col2im(
                    dcols, (b, cin_g) + xp.shape[2:], kh, kw, sh, sw, ho, wo)
        if gx is not None and (ph or pw):
            gx = gx[:, :, ph:ph + h, pw:pw + w]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return tuple(grads)

    return T.record_op(out, parents, backward_fn)


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0):
    """Transposed convolution (gradient of conv2d w.r.t. its input).

    ``weight`` is [Cin, Cout, kh, kw]; output extent is
    ``(in - 1) * stride - 2 * padding + k``.
    """
    x, weight = T.as_tensor(x), T.as_tensor(weight)
    if x.ndim != 4:
        raise DimensionError(f"conv_transpose2d expects [B,C,H,W], got {x.shape}")
    b, cin, h, w = x.shape
    cin_w, cout, kh, kw = weight.shape
    if cin != cin_w:
        raise DimensionError(f"conv_transpose2d channel mismatch: input {cin}, weight {weight.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    hfull, wfull = (h - 1) * sh + kh, (w - 1) * sw + kw
    ho, wo = hfull - 2 * ph, wfull - 2 * pw
    if ho < 1 or wo < 1:
        raise DimensionError("conv_transpose2d output would be empty")
    wmat = weight.data.reshape(cin, cout * kh * kw)
    xflat = x.data.transpose(0, 2, 3, 1).reshape(b * h * w, cin)
    cols = (xflat @ wmat).reshape(b, h, w, cout, kh, kw)
    full = _col2im(cols, (b, cout, hfull, wfull), kh, kw, sh, sw, h, w)
    out = np.ascontiguousarray(full[:, :, ph:ph + ho, pw:pw + wo])
    parents = [x, weight]
    if bias is not None:
        bias = T.as_tensor(bias)
        out += bias.data.reshape(1, cout, 1, 1)
        parents.append(bias)

    def backward_fn(g):
        gfull = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else g
        gcols = _im2col(gfull, kh, kw, sh, sw, h, w)  # [B*H*W, Cout*kh*kw]
        gx = gw = None
        if x.requires_grad:
            gx = (gcols @ wmat.T).reshape(b, h, w, cin).transpose(0, 3, 1, 2)
        if weight.requires_grad:
            gw = (xflat.T @ gcols).reshape(cin, cout, kh, kw)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return tuple(grads)

    return T.record_op(out, parents, backward_fn)


def instance_norm(x, gain, shift, eps=1e-5):
    """Normalize each (sample, channel) over its spatial positions, then apply the affine map."""
    x = T.as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"instance_norm expects [B,C,H,W], got {x.shape}")
    mu = T.mean(x, axis=(2, 3), keepdims=True)
    xc = x - mu
    var = T.mean(T.square(xc), axis=(2, 3), keepdims=True)
    xhat = xc / T.sqrt(var + eps)
    c = x.shape[1]
    return xhat * T.reshape(gain, (1, c, 1, 1)) + T.reshape(shift, (1, c, 1, 1))


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel_size=1, stride=1, padding=0, groups=1, bias=True, rng=None):
        if in_ch % groups or out_ch % groups:
            raise DimensionError(f"channels {in_ch}->{out_ch} not divisible by groups={groups}")
        rng = rng if rng is not None else np.random.default_rng(0)
        kh, kw = _pair(kernel_size)
        self.stride, self.padding, self.groups = stride, padding, groups
        fan_in = in_ch // groups * kh * kw
        self.weight = Parameter(_he_normal(rng, (out_ch, in_ch // groups, kh, kw), fan_in))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None

    @property
    def in_channels(self):
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class ConvTranspose2d(Module):
    def __init__(self, in_ch, out_ch, kernel_size=2, stride=2, padding=0, bias=True, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        kh, kw = _pair(kernel_size)
        sh, sw = _pair(stride)
        self.stride, self.padding = stride, padding
        # each output pixel sees in_ch * (kh/sh) * (kw/sw) inputs
        fan_in = max(1, in_ch * kh * kw // (sh * sw))
        self.weight = Parameter(_he_normal(rng, (in_ch, out_ch, kh, kw), fan_in))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None

    def forward(self, x):
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class InstanceNorm2d(Module):
    def __init__(self, channels, eps=1e-5):
        self.eps = eps
        self.gain = Parameter(np.ones(channels))
        self.shift = Parameter(np.zeros(channels))

    def forward(self, x):
        if x.shape[1] != self.gain.shape[0]:
            raise DimensionError(f"instance norm expects {self.gain.shape[0]} channels, got {x.shape[1]}")
        return instance_norm(x, self.gain, self.shift, self.eps)


class ConvMlp(Module):
    """1x1 expand -> GELU -> 1x1 project; channel count preserved."""

    def __init__(self, channels, ratio=4, rng=None):
        self.expand = Conv2d(channels, ratio * channels, 1, rng=rng)
        self.project = Conv2d(ratio * channels, channels, 1, rng=rng)

    def forward(self, x):
        return self.project(T.gelu(self.expand(x)))


class PatchEmbed(Module):
    """Strided convolution followed by instance normalization."""

    def __init__(self, in_ch, out_ch, kernel_size, stride, padding, eps=1e-5, rng=None):
        self.stride = stride
        self.conv = Conv2d(in_ch, out_ch, kernel_size, stride, padding, rng=rng)
        self.norm = InstanceNorm2d(out_ch, eps)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % self.stride or w % self.stride:
            raise DimensionError(f"spatial size {h}x{w} not divisible by patch stride {self.stride}")
        return self.norm(self.conv(x))


def stage_embed(stage_index, in_ch, out_ch, eps=1e-5, rng=None):
    """Patch embedding for encoder stage ``stage_index`` (1-based):
    7x7/4 for the first stage, 3x3/2 afterwards."""
    if stage_index == 1:
        return PatchEmbed(in_ch, out_ch, 7, 4, 3, eps, rng)
    return PatchEmbed(in_ch, out_ch, 3, 2, 1, eps, rng)
