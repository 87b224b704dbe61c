"""Stateful layers: thin wrappers that own Parameters and call the ops.

Every layer derives its initialization stream from ``fold(seed, name)``, so
two builds with the same seed get identical weights regardless of how many
other layers exist or in which order they are constructed.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .fusion import fuse_add
from .rng import Stream, fold
from .tensor import Parameter, Tensor

_NP_DTYPE = {"float32": np.float32, "float64": np.float64}


class Conv2d:
    """Convolution layer, He-normal initialized (std = sqrt(2 / fan_in)).

    Layers feeding a batch norm carry no bias.
    """

    def __init__(self, name: str, in_ch: int, out_ch: int, kernel: int,
                 stride: int = 1, padding: int = 0, bias: bool = False,
                 seed: int = 0, dtype: str = "float32"):
        self.name = name
        self.stride = stride
        self.padding = padding
        np_dtype = _NP_DTYPE[dtype]
        fan_in = in_ch * kernel * kernel
        std = float(np.sqrt(2.0 / fan_in))
        wdata = Stream(fold(seed, name, "weight")).normal(out_ch * in_ch * kernel * kernel, 0.0, std)
        self.weight = Parameter(f"{name}.weight",
                                wdata.reshape(out_ch, in_ch, kernel, kernel).astype(np_dtype),
                                "conv_weight")
        self.bias = Parameter(f"{name}.bias", np.zeros(out_ch, np_dtype), "conv_bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def params(self):
        yield self.weight
        if self.bias is not None:
            yield self.bias

    def state(self):
        return ()

    def flops(self, out_h: int, out_w: int) -> int:
        o, i, kh, kw = self.weight.shape
        macs = out_h * out_w * o * i * kh * kw
        if self.bias is not None:
            macs += out_h * out_w * o
        return macs


class BatchNorm2d:
    """Batch normalization layer.

    ``weight_init`` is ``"constant1"`` (scale starts at exactly 1) or
    ``"normal01"`` (scale drawn from N(0, 1)); the bias starts at 0 in both
    modes.  Running statistics are plain arrays, not Parameters.
    """

    def __init__(self, name: str, ch: int, weight_init: str = "constant1",
                 seed: int = 0, dtype: str = "float32",
                 eps: float = 1e-5, momentum: float = 0.1):
        if weight_init not in ("constant1", "normal01"):
            raise ValueError(f"unknown bn weight init {weight_init!r}")
        self.name = name
        self.eps = eps
        self.momentum = momentum
        np_dtype = _NP_DTYPE[dtype]
        if weight_init == "constant1":
            wdata = np.ones(ch, np_dtype)
        else:
            wdata = Stream(fold(seed, name, "weight")).normal(ch, 0.0, 1.0).astype(np_dtype)
        self.weight = Parameter(f"{name}.weight", wdata, "bn_weight")
        self.bias = Parameter(f"{name}.bias", np.zeros(ch, np_dtype), "bn_bias")
        self.running_mean = np.zeros(ch, np_dtype)
        self.running_var = np.ones(ch, np_dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ops.batch_norm2d(x, self.weight, self.bias, self.running_mean,
                                self.running_var, training, self.eps, self.momentum)

    def params(self):
        yield self.weight
        yield self.bias

    def state(self):
        yield f"{self.name}.running_mean", self.running_mean
        yield f"{self.name}.running_var", self.running_var

    def flops(self, h: int, w: int) -> int:
        return 2 * self.weight.shape[0] * h * w


class Bottleneck:
    """Residual bottleneck: 1x1 reduce, 3x3 (optionally strided), 1x1 expand,
    conv-BN-ReLU ordering, with the final ReLU after the shortcut add.

    A 1x1 projection (with BN) replaces the identity shortcut whenever the
    stride or the channel count changes.
    """

    def __init__(self, name: str, in_ch: int, mid_ch: int, out_ch: int,
                 stride: int = 1, bn_init: str = "constant1",
                 seed: int = 0, dtype: str = "float32"):
        if stride not in (1, 2):
            raise ValueError(f"bottleneck stride must be 1 or 2, got {stride}")
        self.name = name
        self.stride = stride
        kw = dict(seed=seed, dtype=dtype)
        self.conv1 = Conv2d(f"{name}.conv1", in_ch, mid_ch, 1, **kw)
        self.bn1 = BatchNorm2d(f"{name}.bn1", mid_ch, bn_init, **kw)
        self.conv2 = Conv2d(f"{name}.conv2", mid_ch, mid_ch, 3, stride=stride, padding=1, **kw)
        self.bn2 = BatchNorm2d(f"{name}.bn2", mid_ch, bn_init, **kw)
        self.conv3 = Conv2d(f"{name}.conv3", mid_ch, out_ch, 1, **kw)
        self.bn3 = BatchNorm2d(f"{name}.bn3", out_ch, bn_init, **kw)
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(f"{name}.proj", in_ch, out_ch, 1, stride=stride, **kw)
            self.proj_bn = BatchNorm2d(f"{name}.proj_bn", out_ch, bn_init, **kw)
        else:
            self.proj = None
            self.proj_bn = None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = ops.relu(self.bn1(self.conv1(x), training))
        h = ops.relu(self.bn2(self.conv2(h), training))
        h = self.bn3(self.conv3(h), training)
        shortcut = x if self.proj is None else self.proj_bn(self.proj(x), training)
        return ops.relu(fuse_add([h, shortcut]))

    def children(self):
        out = [self.conv1, self.bn1, self.conv2, self.bn2, self.conv3, self.bn3]
        if self.proj is not None:
            out += [self.proj, self.proj_bn]
        return out

    def params(self):
        for child in self.children():
            yield from child.params()

    def state(self):
        for child in self.children():
            yield from child.state()

    def flops(self, in_h: int, in_w: int) -> int:
        oh, ow = in_h // self.stride, in_w // self.stride
        total = self.conv1.flops(in_h, in_w) + self.bn1.flops(in_h, in_w)
        total += self.conv2.flops(oh, ow) + self.bn2.flops(oh, ow)
        total += self.conv3.flops(oh, ow) + self.bn3.flops(oh, ow)
        if self.proj is not None:
            total += self.proj.flops(oh, ow) + self.proj_bn.flops(oh, ow)
        mid_ch = self.conv1.weight.shape[0]
        out_ch = self.conv3.weight.shape[0]
        # one op per element: relu after bn1/bn2, then residual add + relu
        total += mid_ch * in_h * in_w + mid_ch * oh * ow + 2 * out_ch * oh * ow
        return total
