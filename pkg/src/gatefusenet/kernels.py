"""Differentiable volumetric kernels: conv3d, pooling, batch norm, linear.

Convolution is cross-correlation (no kernel flip), the convention of the
frameworks this mirrors.  The forward pass lowers each group to one GEMM
per sample batch via an as_strided patch view (stride and dilation folded
into the view strides), which keeps the hot loop inside BLAS.  Backward
recomputes the patch view instead of storing it, and scatters the input
gradient with 27 strided slice-adds, so accumulation order is fixed and
results are reproducible bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import Parameter, Tensor, concat_channels, make_op  # noqa: F401 (re-export)

AXIS_NAMES = ("depth", "height", "width")


def _triple(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 3:
            raise ConfigError(f"expected 3 per-axis values, got {v!r}")
        return tuple(int(x) for x in v)
    return (int(v),) * 3


def require_tensor5(x, what="input"):
    if not isinstance(x, Tensor):
        raise ConfigError(f"{what} must be a Tensor, got {type(x).__name__}")
    if x.data.ndim != 5:
        raise ConfigError(f"{what} must be rank-5 (n,c,d,h,w), got shape {x.data.shape}")
    if min(x.data.shape) < 1:
        raise ConfigError(f"{what} has an empty axis: shape {x.data.shape}")
    return x


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 3D convolution: kernel, stride, dilation, groups, padding."""

    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    dilation: tuple = (1, 1, 1)
    groups: int = 1
    padding: tuple = (0, 0, 0)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "dilation", _triple(self.dilation))
        object.__setattr__(self, "padding", _triple(self.padding))
        if self.groups < 1:
            raise ConfigError(f"groups must be positive, got {self.groups}")
        for name, vals in (("kernel", self.kernel), ("stride", self.stride), ("dilation", self.dilation)):
            if min(vals) < 1:
                raise ConfigError(f"{name} entries must be >= 1, got {vals}")
        if min(self.padding) < 0:
            raise ConfigError(f"padding must be >= 0, got {self.padding}")

    def out_size(self, in_size):
        """Output spatial extent per axis; raises if any axis collapses."""
        out = []
        for ax in range(3):
            n = (in_size[ax] + 2 * self.padding[ax] - self.dilation[ax] * (self.kernel[ax] - 1) - 1) \
                // self.stride[ax] + 1
            if n < 1:
                raise ConfigError(
                    f"conv output collapses along {AXIS_NAMES[ax]}: input {in_size[ax]}, "
                    f"kernel {self.kernel[ax]}, dilation {self.dilation[ax]}, "
                    f"stride {self.stride[ax]}, padding {self.padding[ax]}"
                )
            out.append(n)
        return tuple(out)


def _patch_view(xp, spec, out_sz):
    """(n, c, od, oh, ow, kd, kh, kw) strided view over the padded input."""
    n, c = xp.shape[:2]
    sn, sc, sd, sh, sw = xp.strides
    kd, kh, kw = spec.kernel
    td, th, tw = spec.stride
    dd, dh, dw = spec.dilation
    shape = (n, c, out_sz[0], out_sz[1], out_sz[2], kd, kh, kw)
    strides = (sn, sc, sd * td, sh * th, sw * tw, sd * dd, sh * dh, sw * dw)
    return np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides, writeable=False)


def _tap_offsets(spec, padded_sz):
    """Flat padded-grid offset of each kernel element, row-major (kd,kh,kw)."""
    _, hp, wp = padded_sz
    kd, kh, kw = spec.kernel
    dd, dh, dw = spec.dilation
    return [
        (a * dd * hp + b * dh) * wp + c * dw
        for a in range(kd)
        for b in range(kh)
        for c in range(kw)
    ]


def _conv_fast_forward(xd, wd, spec, out_sz):
    """Stride-1 path: one small GEMM per kernel tap on a channels-last view.

    Avoids materializing the im2col matrix, which on bandwidth-starved
    hosts costs far more than the arithmetic itself.
    """
    n, in_c = xd.shape[:2]
    out_c, cin_g = wd.shape[:2]
    g = spec.groups
    co_g = out_c // g
    pd, ph, pw = spec.padding
    xp = np.pad(xd, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw))) if max(spec.padding) else xd
    padded_sz = xp.shape[2:]
    lp = int(np.prod(padded_sz))
    offs = _tap_offsets(spec, padded_sz)
    lv = lp - offs[-1]
    svol = int(np.prod(out_sz))
    _, hp, wp = padded_sz

    out = np.empty((n, out_c) + out_sz, dtype=xd.dtype)
    for gi in range(g):
        xcl = np.ascontiguousarray(
            xp[:, gi * cin_g:(gi + 1) * cin_g].reshape(n, cin_g, lp).transpose(0, 2, 1)
        )
        wg = wd[gi * co_g:(gi + 1) * co_g].reshape(co_g, cin_g, -1)
        # contiguous (cin_g, co_g) tap matrices keep matmul on the BLAS path
        taps = [np.ascontiguousarray(wg[:, :, j].T) for j in range(len(offs))]
        acc = np.zeros((n, lv, co_g), dtype=xd.dtype)
        tmp = np.empty((n, lv, co_g), dtype=xd.dtype)
        for j, off in enumerate(offs):
            np.matmul(xcl[:, off:off + lv, :], taps[j], out=tmp)
            acc += tmp
        sv = acc.strides
        valid = np.lib.stride_tricks.as_strided(
            acc,
            shape=(n, out_sz[0], out_sz[1], out_sz[2], co_g),
            strides=(sv[0], sv[1] * hp * wp, sv[1] * wp, sv[1], sv[2]),
        )
        out[:, gi * co_g:(gi + 1) * co_g] = valid.transpose(0, 4, 1, 2, 3)
    return out, xp


def _conv_fast_backward(grad, xp, wd, spec, in_sz, out_sz, need_gx=True, need_gw=True):
    """Gradients for the stride-1 path, mirroring its tap-GEMM structure."""
    n = grad.shape[0]
    out_c, cin_g = wd.shape[:2]
    g = spec.groups
    co_g = out_c // g
    in_c = cin_g * g
    pd, ph, pw = spec.padding
    padded_sz = xp.shape[2:]
    _, hp, wp = padded_sz
    lp = int(np.prod(padded_sz))
    offs = _tap_offsets(spec, padded_sz)
    maxoff = offs[-1]
    lv = lp - maxoff

    gx = np.empty((n, in_c) + in_sz, dtype=grad.dtype) if need_gx else None
    gw = np.empty_like(wd) if need_gw else None
    for gi in range(g):
        wg = wd[gi * co_g:(gi + 1) * co_g].reshape(co_g, cin_g, -1)
        # embed grad on the padded flat grid, channels-last, with a maxoff
        # halo in front so every backward tap slice stays in bounds
        gpad = np.zeros((n, maxoff + lp, co_g), dtype=grad.dtype)
        target = np.lib.stride_tricks.as_strided(
            gpad[:, maxoff:, :],
            shape=(n, out_sz[0], out_sz[1], out_sz[2], co_g),
            strides=(gpad.strides[0], gpad.strides[1] * hp * wp,
                     gpad.strides[1] * wp, gpad.strides[1], gpad.strides[2]),
        )
        target[...] = grad[:, gi * co_g:(gi + 1) * co_g].transpose(0, 2, 3, 4, 1)

        if need_gw:
            xcl = np.ascontiguousarray(
                xp[:, gi * cin_g:(gi + 1) * cin_g].reshape(n, cin_g, lp).transpose(0, 2, 1)
            )
            gp_t = np.ascontiguousarray(gpad[:, maxoff:maxoff + lv, :].transpose(0, 2, 1))
            gw_taps = np.empty((co_g, cin_g, len(offs)), dtype=grad.dtype)
            for j, off in enumerate(offs):
                gw_taps[:, :, j] = np.matmul(gp_t, xcl[:, off:off + lv, :]).sum(axis=0)
            gw[gi * co_g:(gi + 1) * co_g] = gw_taps.reshape(co_g, cin_g, *spec.kernel)

        if need_gx:
            taps = [np.ascontiguousarray(wg[:, :, j]) for j in range(len(offs))]
            dxp = np.zeros((n, lp, cin_g), dtype=grad.dtype)
            tmp = np.empty((n, lp, cin_g), dtype=grad.dtype)
            for j, off in enumerate(offs):
                np.matmul(gpad[:, maxoff - off:maxoff - off + lp, :], taps[j], out=tmp)
                dxp += tmp
            dxp = dxp.transpose(0, 2, 1).reshape(n, cin_g, *padded_sz)
            gx[:, gi * cin_g:(gi + 1) * cin_g] = dxp[:, :, pd:pd + in_sz[0], ph:ph + in_sz[1], pw:pw + in_sz[2]]
    return gx, gw


def conv3d(x, weight, bias=None, spec=ConvSpec()):
    """Grouped, dilated, strided 3D cross-correlation.

    x: (n, in_c, d, h, w); weight: (out_c, in_c/groups, kd, kh, kw);
    bias: (out_c,) or None.  Output shape follows the usual floor formula.
    """
    require_tensor5(x, "conv3d input")
    w = weight
    if w.data.ndim != 5:
        raise ConfigError(f"conv3d weight must be rank-5, got shape {w.data.shape}")
    n, in_c = x.data.shape[:2]
    out_c, cin_g = w.data.shape[:2]
    g = spec.groups
    if in_c % g or out_c % g:
        raise ConfigError(f"channels (in={in_c}, out={out_c}) not divisible by groups={g}")
    if cin_g != in_c // g:
        raise ConfigError(f"weight expects {cin_g} channels per group, input provides {in_c // g}")
    if tuple(w.data.shape[2:]) != spec.kernel:
        raise ConfigError(f"weight kernel {w.data.shape[2:]} does not match spec kernel {spec.kernel}")
    if bias is not None and bias.data.shape != (out_c,):
        raise ConfigError(f"bias must have shape ({out_c},), got {bias.data.shape}")

    in_sz = x.data.shape[2:]
    out_sz = spec.out_size(in_sz)
    fast = spec.stride == (1, 1, 1)

    if fast:
        out, xp = _conv_fast_forward(x.data, w.data, spec, out_sz)
    else:
        pd, ph, pw = spec.padding
        xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw))) if max(spec.padding) else x.data
        co_g = out_c // g
        kvol = int(np.prod(spec.kernel))
        svol = int(np.prod(out_sz))
        out = np.empty((n, out_c) + out_sz, dtype=x.data.dtype)
        for gi in range(g):
            view = _patch_view(xp[:, gi * cin_g:(gi + 1) * cin_g], spec, out_sz)
            cols = np.ascontiguousarray(view.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(n, svol, cin_g * kvol)
            wmat = w.data[gi * co_g:(gi + 1) * co_g].reshape(co_g, cin_g * kvol)
            prod = cols @ wmat.T
            out[:, gi * co_g:(gi + 1) * co_g] = prod.transpose(0, 2, 1).reshape(n, co_g, *out_sz)
    if bias is not None:
        out += bias.data.reshape(1, out_c, 1, 1, 1)

    parents = (x, w) if bias is None else (x, w, bias)
    need_gx, need_gw = x.requires_grad, w.requires_grad

    def vjp(grad):
        if fast:
            gx, gw = _conv_fast_backward(grad, xp, w.data, spec, in_sz, out_sz,
                                         need_gx=need_gx, need_gw=need_gw)
        else:
            gx, gw = _conv_general_backward(grad, xp, w.data, spec, in_sz, out_sz)
        grads = [gx, gw]
        if bias is not None:
            grads.append(grad.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    return make_op(out, parents, vjp, "conv3d")


def _conv_general_backward(grad, xp, wd, spec, in_sz, out_sz):
    """im2col-style gradients for strided convolutions (small tensors only)."""
    n = grad.shape[0]
    out_c, cin_g = wd.shape[:2]
    g = spec.groups
    co_g = out_c // g
    in_c = cin_g * g
    pd, ph, pw = spec.padding
    kvol = int(np.prod(spec.kernel))
    svol = int(np.prod(out_sz))
    gx_p = np.zeros_like(xp)
    gw = np.empty_like(wd)
    for gi in range(g):
        xs = xp[:, gi * cin_g:(gi + 1) * cin_g]
        view = _patch_view(xs, spec, out_sz)
        cols = np.ascontiguousarray(view.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(n, svol, cin_g * kvol)
        go = grad[:, gi * co_g:(gi + 1) * co_g].reshape(n, co_g, svol)
        gw_flat = np.tensordot(go, cols, axes=([0, 2], [0, 1]))
        gw[gi * co_g:(gi + 1) * co_g] = gw_flat.reshape(co_g, cin_g, *spec.kernel)
        dcols = np.matmul(go.transpose(0, 2, 1), wd[gi * co_g:(gi + 1) * co_g].reshape(co_g, -1))
        dcols = dcols.reshape((n,) + out_sz + (cin_g,) + spec.kernel)
        gxs = gx_p[:, gi * cin_g:(gi + 1) * cin_g]
        for a in range(spec.kernel[0]):
            for b in range(spec.kernel[1]):
                for c in range(spec.kernel[2]):
                    zs = slice(a * spec.dilation[0], a * spec.dilation[0] + out_sz[0] * spec.stride[0], spec.stride[0])
                    ys = slice(b * spec.dilation[1], b * spec.dilation[1] + out_sz[1] * spec.stride[1], spec.stride[1])
                    xsl = slice(c * spec.dilation[2], c * spec.dilation[2] + out_sz[2] * spec.stride[2], spec.stride[2])
                    gxs[:, :, zs, ys, xsl] += dcols[:, :, :, :, :, a, b, c].transpose(0, 4, 1, 2, 3)
    if max(spec.padding):
        gx_p = gx_p[:, :, pd:pd + in_sz[0], ph:ph + in_sz[1], pw:pw + in_sz[2]]
    return gx_p, gw


def maxpool3d_2(x):
    """Non-overlapping 2x2x2 max pool; each spatial axis must be even.

    Backward routes the gradient to the window argmax, breaking ties in
    favour of the first voxel in (d, h, w) order.
    """
    require_tensor5(x, "maxpool input")
    n, c, d, h, w = x.data.shape
    for ax, size in zip(AXIS_NAMES, (d, h, w)):
        if size % 2:
            raise ConfigError(f"maxpool3d_2 requires an even {ax} axis, got {size}")
    od, oh, ow = d // 2, h // 2, w // 2
    win = x.data.reshape(n, c, od, 2, oh, 2, ow, 2).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    flat = win.reshape(n, c, od, oh, ow, 8)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def vjp(grad):
        gflat = np.zeros((n, c, od, oh, ow, 8), dtype=grad.dtype)
        np.put_along_axis(gflat, idx[..., None], grad[..., None], axis=-1)
        gwin = gflat.reshape(n, c, od, oh, ow, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return (gwin.reshape(n, c, d, h, w),)

    return make_op(out, (x,), vjp, "maxpool3d_2")


def global_avg_pool(x):
    """Mean over (d, h, w) per sample and channel; returns (n, c)."""
    require_tensor5(x, "global_avg_pool input")
    n, c, d, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3, 4))

    def vjp(grad):
        scale = 1.0 / (d * h * w)
        return (np.broadcast_to((grad * scale)[:, :, None, None, None], x.data.shape).copy(),)

    return make_op(out, (x,), vjp, "global_avg_pool")


def global_max_pool(x):
    """Max over (d, h, w) per sample and channel; returns (n, c)."""
    require_tensor5(x, "global_max_pool input")
    n, c = x.data.shape[:2]
    flat = x.data.reshape(n, c, -1)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def vjp(grad):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], grad[..., None], axis=-1)
        return (gflat.reshape(x.data.shape),)

    return make_op(out, (x,), vjp, "global_max_pool")


def linear(x, weight, bias=None):
    """Affine map on per-sample feature vectors: (n, f) @ (out, f)^T + b."""
    if x.data.ndim != 2:
        raise ConfigError(f"linear expects (n, features), got shape {x.data.shape}")
    out_f, in_f = weight.data.shape
    if x.data.shape[1] != in_f:
        raise ConfigError(f"linear weight expects {in_f} features, input has {x.data.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(grad):
        grads = [grad @ weight.data, grad.T @ x.data]
        if bias is not None:
            grads.append(grad.sum(axis=0))
        return tuple(grads)

    return make_op(out, parents, vjp, "linear")


class BatchNormState:
    """Per-channel batch normalization with train/eval modes.

    Train mode normalizes with the current batch statistics over
    (n, d, h, w) and folds them into the running estimates with the
    configured momentum; eval mode is a fixed affine map built from the
    running statistics.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32, name=""):
        self.gamma = Parameter((channels,), dtype=dtype, name=f"{name}.gamma", init_const=1.0)
        self.beta = Parameter((channels,), dtype=dtype, name=f"{name}.beta", init_const=0.0)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.mode = "train"

    @property
    def channels(self):
        return self.gamma.data.shape[0]


def batchnorm(x, state):
    """Apply batch normalization to a rank-5 tensor using ``state``."""
    require_tensor5(x, "batchnorm input")
    n, c, d, h, w = x.data.shape
    if c != state.channels:
        raise ConfigError(f"batchnorm has {state.channels} channels, input has {c}")
    count = n * d * h * w
    if count == 0:
        raise ConfigError("batchnorm requires non-empty batch and spatial extent")
    gamma, beta = state.gamma, state.beta
    axes = (0, 2, 3, 4)

    if state.mode == "train":
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.running_mean = ((1.0 - state.momentum) * state.running_mean
                              + state.momentum * mu).astype(state.running_mean.dtype)
        state.running_var = ((1.0 - state.momentum) * state.running_var
                             + state.momentum * var).astype(state.running_var.dtype)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mu[None, :, None, None, None]) * inv_std[None, :, None, None, None]
        out = gamma.data[None, :, None, None, None] * xhat + beta.data[None, :, None, None, None]

        def vjp(grad):
            dgamma = (grad * xhat).sum(axis=axes)
            dbeta = grad.sum(axis=axes)
            dxhat = grad * gamma.data[None, :, None, None, None]
            mean_dxhat = dxhat.mean(axis=axes)
            mean_dxhat_xhat = (dxhat * xhat).mean(axis=axes)
            dx = inv_std[None, :, None, None, None] * (
                dxhat
                - mean_dxhat[None, :, None, None, None]
                - xhat * mean_dxhat_xhat[None, :, None, None, None]
            )
            return dx, dgamma, dbeta

        return make_op(out, (x, gamma, beta), vjp, "batchnorm_train")

    inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
    scale = (gamma.data * inv_std)[None, :, None, None, None]
    shift = (beta.data - gamma.data * state.running_mean * inv_std)[None, :, None, None, None]
    out = scale * x.data + shift

    def vjp(grad):
        dgamma = (grad * (x.data - state.running_mean[None, :, None, None, None])
                  * inv_std[None, :, None, None, None]).sum(axis=axes)
        dbeta = grad.sum(axis=axes)
        return grad * scale, dgamma, dbeta

    return make_op(out, (x, gamma, beta), vjp, "batchnorm_eval")
