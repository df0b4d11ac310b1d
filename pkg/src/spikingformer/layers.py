"""Spike-driven building blocks.

Every block here comes in two residual styles:

* ``spike-driven``: units are SN -> ConvBN, so each convolution only ever
  sees binary spikes and the residual add happens on post-conv real values.
* ``add``: the comparison style, ConvBN -> SN with an ADD shortcut, whose
  residual sums feed integer-valued (> 1) activations into later convs.

Token-space "convolutions" are 1x1 (per-token linear maps with shared
weights); the tokenizer uses real 3x3 spatial convolutions.
"""

from __future__ import annotations

import math

import numpy as np

from .neuron import LIFParams, multistep_lif
from .tensor import Tensor, conv2d, maxpool2d, default_dtype

SPIKE_DRIVEN = "spike-driven"
ADD = "add"

HEAD_AVGPOOL_FC = "avgpool-fc"
HEAD_SN_AVGPOOL_FC = "sn-avgpool-fc"
HEAD_FC_AVGPOOL = "fc-avgpool"
HEAD_SN_FC_AVGPOOL = "sn-fc-avgpool"
HEAD_VARIANTS = (HEAD_AVGPOOL_FC, HEAD_SN_AVGPOOL_FC, HEAD_FC_AVGPOOL, HEAD_SN_FC_AVGPOOL)


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Tiny module tree: tracks parameters, buffers and submodules by name."""

    def __init__(self):
        self.training = True

    def _members(self):
        for name, value in vars(self).items():
            yield name, value

    def named_parameters(self, prefix: str = ""):
        for name, value in self._members():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{path}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def named_buffers(self, prefix: str = ""):
        buffers = getattr(self, "_buffers", {})
        for name in buffers:
            yield f"{prefix}{name}", buffers[name]
        for name, value in self._members():
            path = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(f"{path}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{path}.{i}.")

    def modules(self):
        yield self
        for _, value in self._members():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self):
        for m in self.modules():
            m.training = True
        return self

    def eval(self):
        for m in self.modules():
            m.training = False
        return self

    def parameters(self):
        return [p for _, p in self.named_parameters()]


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(default_dtype())


class BatchNorm(Module):
    """Per-channel batch normalization over an arbitrary channel axis."""

    def __init__(self, num_features: int, axis: int = 1, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        if eps <= 0:
            raise ValueError("batchnorm eps must be > 0")
        self.axis = axis
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(num_features, dtype=default_dtype()))
        self.beta = Parameter(np.zeros(num_features, dtype=default_dtype()))
        self._buffers = {
            "running_mean": np.zeros(num_features, dtype=default_dtype()),
            "running_var": np.ones(num_features, dtype=default_dtype()),
        }
        self.num_batches = 0

    def _param_shape(self, ndim: int):
        shape = [1] * ndim
        shape[self.axis] = -1
        return tuple(shape)

    def forward(self, x: Tensor) -> Tensor:
        ndim = x.ndim
        axis = self.axis % ndim
        if x.shape[axis] != self.gamma.size:
            raise ValueError(
                f"batchnorm expects {self.gamma.size} channels on axis {axis}, got {x.shape[axis]}"
            )
        shape = self._param_shape(ndim)
        reduce_axes = tuple(a for a in range(ndim) if a != axis)
        if self.training:
            mu = x.mean(axis=reduce_axes, keepdims=True)
            var = ((x - mu) ** 2.0).mean(axis=reduce_axes, keepdims=True)
            m = self.momentum
            self._buffers["running_mean"] = (
                (1 - m) * self._buffers["running_mean"] + m * mu.data.reshape(-1)
            ).astype(x.data.dtype)
            self._buffers["running_var"] = (
                (1 - m) * self._buffers["running_var"] + m * var.data.reshape(-1)
            ).astype(x.data.dtype)
            self.num_batches += 1
        else:
            if np.any(self._buffers["running_var"] + self.eps <= 0):
                raise ValueError("batchnorm running variance + eps must be positive")
            mu = Tensor(self._buffers["running_mean"].reshape(shape))
            var = Tensor(self._buffers["running_var"].reshape(shape))
        inv_std = (var + Tensor(np.asarray(self.eps, dtype=x.data.dtype))) ** -0.5
        return (x - mu) * inv_std * self.gamma.reshape(shape) + self.beta.reshape(shape)

    def scale_and_shift(self):
        """Deployment-mode affine (w_BN, b_BN) from the running statistics."""
        var = self._buffers["running_var"]
        if np.any(var + self.eps <= 0):
            raise ValueError("batchnorm running variance + eps must be positive")
        w = self.gamma.data / np.sqrt(var + self.eps)
        b = self.beta.data - w * self._buffers["running_mean"]
        return w, b


class SN(Module):
    """Multistep spiking-neuron layer over tensors with T folded into batch."""

    def __init__(self, params: LIFParams, input_scale: float = 1.0):
        super().__init__()
        self.params = params
        self.input_scale = input_scale
        self.mode = "spiking"

    def forward(self, x: Tensor, t_steps: int) -> Tensor:
        shape = x.shape
        if shape[0] % t_steps:
            raise ValueError(f"batch axis {shape[0]} not divisible by T={t_steps}")
        xr = x.reshape((t_steps, shape[0] // t_steps) + shape[1:])
        s = multistep_lif(xr, self.params, mode=self.mode, input_scale=self.input_scale)
        return s.reshape(shape)


class ConvBN2d(Module):
    """3x3 (by default) convolution + batchnorm on [B, C, H, W] maps."""

    def __init__(self, in_channels, out_channels, rng, kernel_size=3, stride=1, padding=1,
                 first_encoding=False):
        super().__init__()
        k = kernel_size
        self.stride = stride
        self.padding = padding
        self.first_encoding = first_encoding
        self.weight = Parameter(
            _kaiming_uniform(rng, (out_channels, in_channels, k, k), in_channels * k * k)
        )
        self.bn = BatchNorm(out_channels, axis=1)
        self.fused_weight = None
        self.fused_bias = None
        self.recorder = None
        self.name = ""

    @property
    def fused(self):
        return self.fused_weight is not None

    def forward(self, x: Tensor) -> Tensor:
        if self.recorder is not None:
            _, c, h, w = x.shape
            o = self.weight.shape[0]
            oh = (h + 2 * self.padding - self.weight.shape[2]) // self.stride + 1
            ow = (w + 2 * self.padding - self.weight.shape[3]) // self.stride + 1
            flops = oh * ow * o * c * self.weight.shape[2] * self.weight.shape[3]
            self.recorder.observe_conv(self, x.data, flops)
        if self.fused:
            return conv2d(x, self.fused_weight, self.stride, self.padding, bias=self.fused_bias)
        return self.bn.forward(conv2d(x, self.weight, self.stride, self.padding))

    def fuse(self):
        """Fold the BN affine into the kernel and a bias (in place)."""
        w_bn, b_bn = self.bn.scale_and_shift()
        self.fused_weight = Parameter(self.weight.data * w_bn[:, None, None, None])
        self.fused_bias = Parameter(b_bn)


class TokenConvBN(Module):
    """1x1 convolution over the token axis (shared per-token linear) + BN."""

    def __init__(self, in_dim, out_dim, rng, first_encoding=False):
        super().__init__()
        self.first_encoding = first_encoding
        self.weight = Parameter(_kaiming_uniform(rng, (in_dim, out_dim), in_dim))
        self.bn = BatchNorm(out_dim, axis=-1)
        self.fused_weight = None
        self.fused_bias = None
        self.recorder = None
        self.name = ""

    @property
    def fused(self):
        return self.fused_weight is not None

    def forward(self, x: Tensor) -> Tensor:
        if self.recorder is not None:
            n = x.shape[-2]
            flops = n * self.weight.shape[0] * self.weight.shape[1]
            self.recorder.observe_conv(self, x.data, flops)
        if self.fused:
            return x @ self.fused_weight + self.fused_bias
        return self.bn.forward(x @ self.weight)

    def fuse(self):
        w_bn, b_bn = self.bn.scale_and_shift()
        self.fused_weight = Parameter(self.weight.data * w_bn[None, :])
        self.fused_bias = Parameter(b_bn)


def fuse_convbn(layer):
    """Return the (kernel, bias) of the equivalent single convolution.

    W = w_BN * w_conv per output channel, B = b_BN (+ w_BN * b_conv when the
    conv carries its own bias; ours never do, BN follows immediately).
    """
    w_bn, b_bn = layer.bn.scale_and_shift()
    if isinstance(layer, ConvBN2d):
        return layer.weight.data * w_bn[:, None, None, None], b_bn
    if isinstance(layer, TokenConvBN):
        return layer.weight.data * w_bn[None, :], b_bn
    raise TypeError(f"not a ConvBN layer: {type(layer)!r}")


class PatchEmbedUnit(Module):
    """One SPE/SPED tokenizer unit: optional SN, optional stride-2 maxpool, ConvBN.

    ``spike-driven`` order is SN -> (MP) -> ConvBN; ``add`` order is
    ConvBN -> SN -> (MP). The tokenizer's first unit carries no leading SN in
    spike-driven style: its conv is the spike encoder and the single layer
    allowed to see analog input.
    """

    def __init__(self, in_channels, out_channels, rng, lif: LIFParams,
                 downsample: bool, style: str, is_first: bool = False):
        super().__init__()
        self.downsample = downsample
        self.style = style
        self.is_first = is_first
        self.sn = None if (is_first and style == SPIKE_DRIVEN) else SN(lif)
        self.conv = ConvBN2d(in_channels, out_channels, rng,
                             first_encoding=is_first)

    def forward(self, x: Tensor, t_steps: int) -> Tensor:
        if self.style == SPIKE_DRIVEN:
            if self.sn is not None:
                x = self.sn.forward(x, t_steps)
            if self.downsample:
                x = maxpool2d(x)
            return self.conv.forward(x)
        x = self.conv.forward(x)
        x = self.sn.forward(x, t_steps)
        if self.downsample:
            x = maxpool2d(x)
        return x


class SpikingTokenizer(Module):
    """Input stage: a stack of SPE/SPED units plus a final D->D embedding unit.

    Channel widths double per unit, ending at the embedding dimension; the
    output spatial grid is flattened into N tokens.
    """

    def __init__(self, plan, in_channels, embed_dim, rng, lif: LIFParams, style: str):
        super().__init__()
        n = len(plan)
        if embed_dim % (2 ** (n - 1)):
            raise ValueError(f"embed_dim {embed_dim} not divisible by 2^{n - 1} for plan {plan}")
        widths = [embed_dim // 2 ** (n - 1 - i) for i in range(n)]
        self.units = []
        prev = in_channels
        for i, (kind, width) in enumerate(zip(plan, widths)):
            if kind not in ("spe", "sped"):
                raise ValueError(f"unknown tokenizer unit kind {kind!r}")
            self.units.append(
                PatchEmbedUnit(prev, width, rng, lif, downsample=(kind == "sped"),
                               style=style, is_first=(i == 0))
            )
            prev = width
        # final embedding unit, geometry-preserving
        self.units.append(
            PatchEmbedUnit(embed_dim, embed_dim, rng, lif, downsample=False, style=style)
        )
        self.downsample_factor = 2 ** sum(1 for k in plan if k == "sped")

    def forward(self, x: Tensor, t_steps: int) -> Tensor:
        for unit in self.units:
            x = unit.forward(x, t_steps)
        tb, d, h, w = x.shape
        return x.reshape(tb, d, h * w).transpose((0, 2, 1))  # [T*B, N, D]


def attention_core(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Q K^T V on the trailing two axes (no softmax)."""
    return (q @ k.transpose(tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))) @ v


class SpikingSelfAttention(Module):
    """Multi-head spiking self attention over [T*B, N, D] token tensors.

    Binary Q, K, V are produced three ways, the per-head Q K^T V core is
    scaled by ``scale`` (folded into the following neuron's input) and sent
    through SN then a projection ConvBN.
    """

    def __init__(self, embed_dim, heads, rng, lif: LIFParams, scale: float, style: str):
        super().__init__()
        if embed_dim % heads:
            raise ValueError(f"embed_dim {embed_dim} not divisible by {heads} heads")
        if scale <= 0:
            raise ValueError("attention scale must be > 0")
        self.heads = heads
        self.scale = scale
        self.style = style
        self.sn_in = SN(lif) if style == SPIKE_DRIVEN else None
        self.conv_q = TokenConvBN(embed_dim, embed_dim, rng)
        self.conv_k = TokenConvBN(embed_dim, embed_dim, rng)
        self.conv_v = TokenConvBN(embed_dim, embed_dim, rng)
        self.sn_q = SN(lif)
        self.sn_k = SN(lif)
        self.sn_v = SN(lif)
        self.sn_attn = SN(lif, input_scale=scale)
        self.conv_proj = TokenConvBN(embed_dim, embed_dim, rng)
        self.sn_proj = SN(lif) if style == ADD else None
        self.recorder = None
        self.name = ""

    def _split_heads(self, x: Tensor) -> Tensor:
        tb, n, d = x.shape
        return x.reshape(tb, n, self.heads, d // self.heads).transpose((0, 2, 1, 3))

    def _merge_heads(self, x: Tensor) -> Tensor:
        tb, h, n, dh = x.shape
        return x.transpose((0, 2, 1, 3)).reshape(tb, n, h * dh)

    def forward(self, x: Tensor, t_steps: int) -> Tensor:
        if self.style == SPIKE_DRIVEN:
            x = self.sn_in.forward(x, t_steps)
        q = self.sn_q.forward(self.conv_q.forward(x), t_steps)
        k = self.sn_k.forward(self.conv_k.forward(x), t_steps)
        v = self.sn_v.forward(self.conv_v.forward(x), t_steps)
        qh, kh, vh = self._split_heads(q), self._split_heads(k), self._split_heads(v)
        if self.recorder is not None:
            self.recorder.observe_attention(self, qh.data, kh.data, vh.data)
        core = self._merge_heads(attention_core(qh, kh, vh))
        attn = self.sn_attn.forward(core, t_steps)  # scale applied inside the neuron
        out = self.conv_proj.forward(attn)
        if self.style == ADD:
            out = self.sn_proj.forward(out, t_steps)
        return out


class SpikingMLP(Module):
    """Two chained token-space patch-embedding units, hidden dim = ratio * D."""

    def __init__(self, embed_dim, rng, lif: LIFParams, style: str, ratio: int = 4):
        super().__init__()
        hidden = ratio * embed_dim
        self.style = style
        self.sn1 = SN(lif)
        self.conv1 = TokenConvBN(embed_dim, hidden, rng)
        self.sn2 = SN(lif)
        self.conv2 = TokenConvBN(hidden, embed_dim, rng)

    def forward(self, x: Tensor, t_steps: int) -> Tensor:
        if self.style == SPIKE_DRIVEN:
            x = self.conv1.forward(self.sn1.forward(x, t_steps))
            return self.conv2.forward(self.sn2.forward(x, t_steps))
        x = self.sn1.forward(self.conv1.forward(x), t_steps)
        return self.sn2.forward(self.conv2.forward(x), t_steps)


class SpikingTransformerBlock(Module):
    """X' = MSSA(X) + X; out = SMLP(X') + X'."""

    def __init__(self, embed_dim, heads, rng, lif: LIFParams, scale: float, style: str,
                 mlp_ratio: int = 4):
        super().__init__()
        self.attn = SpikingSelfAttention(embed_dim, heads, rng, lif, scale, style)
        self.mlp = SpikingMLP(embed_dim, rng, lif, style, ratio=mlp_ratio)

    def forward(self, x: Tensor, t_steps: int) -> Tensor:
        x = self.attn.forward(x, t_steps) + x
        return self.mlp.forward(x, t_steps) + x


class ClassificationHead(Module):
    """The four classifier variants over [T*B, N, D] features.

    Pooling always averages over both the token and time axes; the FC is a
    single D -> classes affine map shared by every variant.
    """

    def __init__(self, embed_dim, num_classes, rng, lif: LIFParams, variant: str):
        super().__init__()
        if variant not in HEAD_VARIANTS:
            raise ValueError(f"unknown head variant {variant!r}; expected one of {HEAD_VARIANTS}")
        self.variant = variant
        self.weight = Parameter(_kaiming_uniform(rng, (embed_dim, num_classes), embed_dim))
        self.bias = Parameter(np.zeros(num_classes, dtype=default_dtype()))
        self.sn = SN(lif)

    def forward(self, x: Tensor, t_steps: int) -> Tensor:
        if self.variant in (HEAD_SN_AVGPOOL_FC, HEAD_SN_FC_AVGPOOL):
            x = self.sn.forward(x, t_steps)
        tb, n, d = x.shape
        xt = x.reshape(t_steps, tb // t_steps, n, d)
        if self.variant in (HEAD_AVGPOOL_FC, HEAD_SN_AVGPOOL_FC):
            pooled = xt.mean(axis=(0, 2))  # [B, D]
            return pooled @ self.weight + self.bias
        logits = xt @ self.weight + self.bias  # [T, B, N, classes]
        return logits.mean(axis=(0, 2))
