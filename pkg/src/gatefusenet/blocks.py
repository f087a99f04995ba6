"""Building blocks of the fusion network.

The gated fusion (GF) block is the core mechanism: an adaptive multimodal
attention stage produces per-voxel, per-channel modality weights that are
normalized into a near-convex combination, and a learnable channel gate
decides how much of the fused tensor is injected back into the anchor
branch through a residual addition.  The other two branches always pass
through unchanged.
"""

from __future__ import annotations

import numpy as np

from .config import MODALITIES, NetworkConfig
from .errors import ConfigError
from .kernels import (
    BatchNormState,
    ConvSpec,
    batchnorm,
    concat_channels,
    conv3d,
    global_avg_pool,
    global_max_pool,
    linear,
    maxpool3d_2,
)
from .tensor import Parameter, Tensor


class Module:
    """Minimal layer container: stable parameter enumeration, train/eval."""

    def named_parameters(self, prefix=""):
        for attr, value in vars(self).items():
            yield from _walk_params(value, f"{prefix}{attr}")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_states(self, prefix=""):
        """Non-learnable persistent arrays (batch-norm running statistics)."""
        for attr, value in vars(self).items():
            yield from _walk_states(value, f"{prefix}{attr}")

    def modules(self):
        yield self
        for value in vars(self).values():
            yield from _walk_modules(value)

    def train(self):
        for m in self.modules():
            if isinstance(m, BatchNormState):
                m.mode = "train"
        return self

    def eval(self):
        for m in self.modules():
            if isinstance(m, BatchNormState):
                m.mode = "eval"
        return self


def _walk_params(value, path):
    if isinstance(value, Parameter):
        value.name = path
        yield path, value
    elif isinstance(value, BatchNormState):
        value.gamma.name = f"{path}.gamma"
        value.beta.name = f"{path}.beta"
        yield f"{path}.gamma", value.gamma
        yield f"{path}.beta", value.beta
    elif isinstance(value, Module):
        yield from value.named_parameters(f"{path}.")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk_params(item, f"{path}.{i}")
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk_params(item, f"{path}.{key}")


def _walk_states(value, path):
    if isinstance(value, BatchNormState):
        yield f"{path}.running_mean", value
        yield f"{path}.running_var", value
    elif isinstance(value, Module):
        yield from value.named_states(f"{path}.")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk_states(item, f"{path}.{i}")
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk_states(item, f"{path}.{key}")


def _walk_modules(value):
    if isinstance(value, (Module, BatchNormState)):
        yield value
        if isinstance(value, Module):
            for sub in vars(value).values():
                yield from _walk_modules(sub)
    elif isinstance(value, (list, tuple)):
        for item in value:
            yield from _walk_modules(item)
    elif isinstance(value, dict):
        for item in value.values():
            yield from _walk_modules(item)


def init_params(module, seed):
    """Fill parameters deterministically: fan-in-scaled uniform weights,
    constant biases/norm parameters, gate vectors at their configured
    starting value.  Iteration order is the stable registration order, so a
    fixed seed reproduces the network bit for bit."""
    rng = np.random.default_rng(seed)
    for name, p in module.named_parameters():
        if p.init_const is not None:
            p.data = np.full(p.data.shape, p.init_const, dtype=p.data.dtype)
        else:
            if not p.fan_in:
                raise ConfigError(f"parameter {name} lacks fan-in for initialization")
            bound = 1.0 / np.sqrt(p.fan_in)
            p.data = rng.uniform(-bound, bound, size=p.data.shape).astype(p.data.dtype)
        p.grad = None


class ModalityTriple:
    """Aligned (roi, qsm, t1) tensors at one network stage.

    Batch and spatial dims must agree everywhere; channel counts differ
    only for the raw input triple (one-hot ROI vs single-channel images),
    and are identical at every stage after the stems.
    """

    __slots__ = ("roi", "qsm", "t1")

    def __init__(self, roi, qsm, t1):
        keys = {
            (t.data.shape[0],) + tuple(t.data.shape[2:]) for t in (roi, qsm, t1)
        }
        if len(keys) != 1:
            raise ConfigError(
                f"modality batch/spatial shapes differ: roi {roi.data.shape}, "
                f"qsm {qsm.data.shape}, t1 {t1.data.shape}"
            )
        self.roi, self.qsm, self.t1 = roi, qsm, t1

    def get(self, modality):
        return getattr(self, modality)

    def replace(self, modality, tensor):
        parts = {m: self.get(m) for m in MODALITIES}
        parts[modality] = tensor
        return ModalityTriple(parts["roi"], parts["qsm"], parts["t1"])

    def as_list(self):
        return [self.roi, self.qsm, self.t1]

    @property
    def shape(self):
        return self.roi.data.shape


class Conv3d(Module):
    """Convolution layer owning its weight/bias and geometry."""

    def __init__(self, in_c, out_c, kernel=3, stride=1, dilation=1, groups=1,
                 padding=0, bias=True, dtype=np.float32):
        self.spec = ConvSpec(kernel=kernel, stride=stride, dilation=dilation,
                             groups=groups, padding=padding)
        if in_c % groups or out_c % groups:
            raise ConfigError(f"channels ({in_c}->{out_c}) not divisible by groups {groups}")
        kd, kh, kw = self.spec.kernel
        fan_in = (in_c // groups) * kd * kh * kw
        self.weight = Parameter((out_c, in_c // groups, kd, kh, kw), dtype=dtype, fan_in=fan_in)
        self.bias = Parameter((out_c,), dtype=dtype, init_const=0.0) if bias else None

    def forward(self, x):
        return conv3d(x, self.weight, self.bias, self.spec)


class Linear(Module):
    def __init__(self, in_f, out_f, bias=True, dtype=np.float32):
        self.weight = Parameter((out_f, in_f), dtype=dtype, fan_in=in_f)
        self.bias = Parameter((out_f,), dtype=dtype, init_const=0.0) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class StemEncoder(Module):
    """Per-modality encoder: three shape-preserving 3x3x3 convs with ELU,
    then a 2x2x2 max pool.  The three stems share structure, never weights."""

    def __init__(self, in_c, width, dtype=np.float32):
        self.conv1 = Conv3d(in_c, width, kernel=3, padding=1, dtype=dtype)
        self.conv2 = Conv3d(width, width, kernel=3, padding=1, dtype=dtype)
        self.conv3 = Conv3d(width, width, kernel=3, padding=1, dtype=dtype)

    def forward(self, x):
        for ax, size in zip(("depth", "height", "width"), x.data.shape[2:]):
            if size % 2:
                raise ConfigError(f"stem input {ax} axis must be even for pooling, got {size}")
        y = self.conv1.forward(x).elu()
        y = self.conv2.forward(y).elu()
        y = self.conv3.forward(y).elu()
        return maxpool3d_2(y)


class AMFBlock(Module):
    """Adaptive multimodal attention over a concatenated modality triple.

    Each modality head is a 3x3x3 grouped conv (3C -> C) with batch norm
    and a sigmoid, giving a raw weight map per modality.  Voxel-wise
    normalization by the sum (plus eps) yields near-convex weights, and
    the fused tensor is the weight-by-feature sum.
    """

    def __init__(self, channels, groups=1, eps=1e-6, dtype=np.float32):
        self.heads = [
            Conv3d(3 * channels, channels, kernel=3, padding=1, groups=groups,
                   bias=False, dtype=dtype)
            for _ in MODALITIES
        ]
        self.norms = [BatchNormState(channels, dtype=dtype) for _ in MODALITIES]
        self.eps = float(eps)

    def attention(self, triple):
        """Raw and normalized attention maps, ordered (roi, qsm, t1)."""
        stacked = concat_channels(triple.as_list())
        raw = [
            batchnorm(head.forward(stacked), norm).sigmoid()
            for head, norm in zip(self.heads, self.norms)
        ]
        denom = raw[0] + raw[1] + raw[2] + self.eps
        return raw, [a / denom for a in raw]

    def forward(self, triple):
        _, normed = self.attention(triple)
        feats = triple.as_list()
        return normed[0] * feats[0] + normed[1] * feats[1] + normed[2] * feats[2]


class ChannelGate(Module):
    """Learnable per-channel gate applied to the fused tensor before the
    residual injection into the anchor branch."""

    def __init__(self, channels, theta0=0.0, dtype=np.float32):
        self.theta = Parameter((channels,), dtype=dtype, init_const=float(theta0))

    def forward(self, fused, anchor):
        if fused.data.shape != anchor.data.shape:
            raise ConfigError(
                f"gate inputs differ: fused {fused.data.shape}, anchor {anchor.data.shape}"
            )
        c = fused.data.shape[1]
        if self.theta.data.shape != (c,):
            raise ConfigError(f"gate has {self.theta.data.shape[0]} channels, input has {c}")
        gate = self.theta.sigmoid().reshape(1, c, 1, 1, 1)
        return anchor + gate * fused


class GFBlock(Module):
    """One fusion point: produces the next triple from the current one.

    The configured strategy decides how the fused tensor is built:
    ``gated`` (attention + channel gate), ``concat`` (1x1x1 projection of
    the channel concatenation), or ``weighted_average`` (softmax-weighted
    global modality mix).  In every case only the anchor branch changes.
    """

    def __init__(self, channels, cfg: NetworkConfig, dtype=np.float32):
        self.strategy = cfg.fusion
        self.anchor = cfg.anchor
        if self.strategy == "gated":
            self.amf = AMFBlock(channels, groups=cfg.attn_groups, eps=cfg.attn_eps, dtype=dtype)
            self.gate = ChannelGate(channels, theta0=cfg.gate_init, dtype=dtype)
        elif self.strategy == "concat":
            self.proj = Conv3d(3 * channels, channels, kernel=1, dtype=dtype)
            # start from the anchor-only network and learn the injection;
            # a random projection would flood the residual stream at step 0
            self.proj.weight.init_const = 0.0
        else:  # weighted_average
            self.mix_logits = [
                Parameter((), dtype=dtype, init_const=0.0) for _ in MODALITIES
            ]

    def fused_tensor(self, triple):
        if self.strategy == "gated":
            return self.amf.forward(triple)
        if self.strategy == "concat":
            return self.proj.forward(concat_channels(triple.as_list()))
        exps = [l.exp() for l in self.mix_logits]
        total = exps[0] + exps[1] + exps[2]
        feats = triple.as_list()
        return ((exps[0] / total) * feats[0]
                + (exps[1] / total) * feats[1]
                + (exps[2] / total) * feats[2])

    def forward(self, triple):
        fused = self.fused_tensor(triple)
        anchor = triple.get(self.anchor)
        if self.strategy == "gated":
            new_anchor = self.gate.forward(fused, anchor)
        else:
            new_anchor = anchor + fused
        return triple.replace(self.anchor, new_anchor)


class CBAMBlock(Module):
    """Sequential channel-then-spatial attention refinement.

    Channel attention: shared two-layer MLP over global-average and
    global-max channel descriptors, summed and squashed.  Spatial
    attention: small conv over the channel-wise mean/max maps.  Both maps
    lie in (0, 1), so the block is a contraction.  The MLP uses ELU rather
    than a rectifier so no unit can go silent on small batches.
    """

    def __init__(self, channels, reduction=8, spatial_kernel=3, dtype=np.float32):
        if channels % reduction:
            raise ConfigError(f"channels {channels} not divisible by CBAM reduction {reduction}")
        hidden = max(1, channels // reduction)
        self.fc1 = Linear(channels, hidden, bias=False, dtype=dtype)
        self.fc2 = Linear(hidden, channels, bias=False, dtype=dtype)
        self.spatial = Conv3d(2, 1, kernel=spatial_kernel, padding=spatial_kernel // 2,
                              bias=False, dtype=dtype)

    def channel_attention(self, x):
        avg = self.fc2.forward(self.fc1.forward(global_avg_pool(x)).elu())
        mx = self.fc2.forward(self.fc1.forward(global_max_pool(x)).elu())
        return (avg + mx).sigmoid()

    def spatial_attention(self, x):
        mean_map = x.mean(axis=1, keepdims=True)
        max_map = x.max(axis=1, keepdims=True)
        return self.spatial.forward(concat_channels([mean_map, max_map])).sigmoid()

    def forward(self, x):
        n, c = x.data.shape[:2]
        ca = self.channel_attention(x).reshape(n, c, 1, 1, 1)
        y = x * ca
        return y * self.spatial_attention(y)


class Bottleneck(Module):
    """1x1x1 reduce -> grouped (dilated) 3x3x3 -> 1x1x1 expand -> CBAM,
    with a residual connection and a trailing ELU.

    The 3x3x3 conv carries the stride when the block downsamples, and a
    strided 1x1x1 projection matches the residual path whenever shape or
    width changes.
    """

    def __init__(self, in_c, out_c, cfg: NetworkConfig, stride=1, dilation=1, dtype=np.float32):
        mid = out_c // 2
        self.reduce = Conv3d(in_c, mid, kernel=1, dtype=dtype)
        self.conv = Conv3d(mid, mid, kernel=3, stride=stride, dilation=dilation,
                           padding=dilation, groups=cfg.bottleneck_groups, dtype=dtype)
        self.expand = Conv3d(mid, out_c, kernel=1, dtype=dtype)
        self.cbam = CBAMBlock(out_c, reduction=cfg.cbam_reduction,
                              spatial_kernel=cfg.cbam_spatial_kernel, dtype=dtype)
        if stride != 1 or in_c != out_c:
            self.proj = Conv3d(in_c, out_c, kernel=1, stride=stride, dtype=dtype)
        else:
            self.proj = None

    def forward(self, x):
        y = self.reduce.forward(x).elu()
        y = self.conv.forward(y).elu()
        y = self.expand.forward(y)
        y = self.cbam.forward(y)
        shortcut = x if self.proj is None else self.proj.forward(x)
        return (y + shortcut).elu()
