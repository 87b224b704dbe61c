"""Feature-fusion strategies for skip connections.

Five ways to merge a shallow (skip) branch ``x1`` with a deep (decoder)
branch ``x2``:

* ``naive_concat`` / ``naive_add`` - plain channel concat or elementwise sum.
* ``weighted`` - concat(alpha * x1, beta * x2) with *constant* alpha/beta.
  The constants are hyperparameters, never touched by the optimizer; with
  alpha = beta = 1 the result is bit-identical to the naive concat.
* ``dynamic`` - a learnable per-channel scale on the skip branch before
  concatenation.
* ``gated`` - data-dependent sigmoid gates: each branch is modulated by its
  own gate and cross-modulated by the other branch's gate before concat.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .ops import conv2d, sigmoid
from .rng import Stream, fold
from .tensor import (Parameter, Tensor, accumulate, add, concat_channels,
                     mul_elementwise, mul_scalar, push)

FUSION_KINDS = ("naive_concat", "naive_add", "weighted", "dynamic", "gated")


@dataclass
class FusionSpec:
    """What one fusion site does.

    ``alpha`` scales the shallow/skip branch, ``beta`` the deep/decoder
    branch; both are plain constants.  Kinds other than ``weighted`` must
    leave them at 1.
    """

    kind: str = "weighted"
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.kind not in FUSION_KINDS:
            raise ValueError(f"unknown fusion kind {self.kind!r}")
        if self.kind != "weighted" and (self.alpha != 1.0 or self.beta != 1.0):
            raise ValueError(f"{self.kind} fusion takes no alpha/beta constants")


def fuse_concat(xs: list[Tensor]) -> Tensor:
    """Plain channel concatenation of same-resolution feature maps."""
    return concat_channels(xs)


def fuse_add(xs: list[Tensor]) -> Tensor:
    """Elementwise sum of identically shaped feature maps."""
    if len(xs) == 0:
        raise ValueError("fuse_add: need at least one input")
    out = xs[0]
    for x in xs[1:]:
        out = add(out, x)
    return out


def weighted_concat(x1: Tensor, x2: Tensor, alpha: float, beta: float) -> Tensor:
    """concat(alpha * x1, beta * x2) with constant branch weights."""
    return concat_channels([mul_scalar(x1, alpha), mul_scalar(x2, beta)])


def dynamic_channel_weight(x: Tensor, w: Parameter) -> Tensor:
    """Scale each channel of ``x`` by the learnable vector ``w``."""
    if w.data.ndim != 1 or w.shape[0] != x.shape[1]:
        raise ShapeError(f"dynamic_channel_weight: weight {w.shape} vs {x.shape[1]} channels")
    wcol = w.data.reshape(1, -1, 1, 1)
    out = Tensor(x.data * wcol)

    def bwd(g):
        accumulate(x, g * wcol)
        accumulate(w, (g * x.data).sum(axis=(0, 2, 3)))

    return push(out, (x, w), bwd)


def gate(x: Tensor, w_gate: Tensor) -> Tensor:
    """Sigmoid of a 1x1 convolution of ``x``: a (0,1)-bounded gate map."""
    if w_gate.data.ndim != 4 or w_gate.shape[2:] != (1, 1):
        raise ShapeError(f"gate: weight must be (O, C, 1, 1), got {w_gate.shape}")
    if w_gate.shape[1] != x.shape[1]:
        raise ShapeError(f"gate: weight expects {w_gate.shape[1]} channels, input has {x.shape[1]}")
    return sigmoid(conv2d(x, w_gate))


def _one_like(x: Tensor) -> Tensor:
    return Tensor(np.ones_like(x.data))


def _one_minus(g: Tensor) -> Tensor:
    return add(_one_like(g), mul_scalar(g, -1.0))


def _one_plus(g: Tensor) -> Tensor:
    return add(_one_like(g), g)


def gff_fuse(x_l: Tensor, others: list[Tensor], g_l: Tensor, g_others: list[Tensor]) -> Tensor:
    """Gated fully-fused combination of one level with its peers:

        (1 + g_l) * x_l + (1 - g_l) * sum_i g_i * x_i
    """
    if len(others) != len(g_others):
        raise ValueError("gff_fuse: need one gate per peer feature map")
    out = mul_elementwise(_one_plus(g_l), x_l)
    if others:
        acc = mul_elementwise(g_others[0], others[0])
        for xi, gi in zip(others[1:], g_others[1:]):
            acc = add(acc, mul_elementwise(gi, xi))
        out = add(out, mul_elementwise(_one_minus(g_l), acc))
    return out


def gated_concat(x1: Tensor, x2: Tensor, w_gate1: Tensor, w_gate2: Tensor) -> Tensor:
    """Two-branch gated fusion followed by concatenation.

    With gates g1 = gate(x1), g2 = gate(x2), each branch keeps what its own
    gate passes and imports what the other branch's gate selects:

        x1' = (1 + g1) * x1 + (1 - g1) * (g2 * x2)
        x2' = (1 + g2) * x2 + (1 - g2) * (g1 * x1)

    and the output is concat(x1', x2').  Requires equal shapes.
    """
    if x1.shape != x2.shape:
        raise ShapeError(f"gated_concat: shapes {x1.shape} and {x2.shape} differ")
    g1 = gate(x1, w_gate1)
    g2 = gate(x2, w_gate2)
    x1p = gff_fuse(x1, [x2], g1, [g2])
    x2p = gff_fuse(x2, [x1], g2, [g1])
    return concat_channels([x1p, x2p])


def absorb_weight(w: Tensor, beta: float) -> Tensor:
    """Fold a constant branch scale into the weights that feed the branch."""
    if not np.isfinite(beta):
        raise ValueError(f"absorb_weight: scale must be finite, got {beta}")
    return Tensor(w.data * w.dtype.type(beta))


class FusionSite:
    """One skip-fusion point in a model: a spec plus any learnable state.

    ``skip_ch``/``stream_ch`` are the channel counts of the two incoming
    branches; ``out_channels`` is what the following block receives.
    """

    def __init__(self, name: str, spec: FusionSpec, skip_ch: int, stream_ch: int,
                 seed: int = 0, dtype: str = "float32"):
        self.name = name
        self.spec = spec
        self.skip_ch = skip_ch
        self.stream_ch = stream_ch
        self.channel_weights: Parameter | None = None
        self.gate_skip: Parameter | None = None
        self.gate_stream: Parameter | None = None
        np_dtype = np.float32 if dtype == "float32" else np.float64
        if spec.kind == "dynamic":
            self.channel_weights = Parameter(
                f"{name}.channel_weights", np.ones(skip_ch, np_dtype), "fusion_channel")
        elif spec.kind == "gated":
            if skip_ch != stream_ch:
                raise ShapeError(
                    f"{name}: gated fusion needs equal channels, got {skip_ch} vs {stream_ch}")
            for attr, ch in (("gate_skip", skip_ch), ("gate_stream", stream_ch)):
                w = Stream(fold(seed, name, attr)).normal(ch, 0.0, 0.01)
                setattr(self, attr, Parameter(
                    f"{name}.{attr}", w.reshape(1, ch, 1, 1).astype(np_dtype), "gate_weight"))
        elif spec.kind == "naive_add" and skip_ch != stream_ch:
            raise ShapeError(f"{name}: additive fusion needs equal channels")

    @property
    def out_channels(self) -> int:
        if self.spec.kind == "naive_add":
            return self.skip_ch
        return self.skip_ch + self.stream_ch

    def params(self):
        for p in (self.channel_weights, self.gate_skip, self.gate_stream):
            if p is not None:
                yield p

    def state(self):
        return ()

    def constants(self) -> list[float]:
        """Fusion constants that differ from the neutral value 1."""
        if self.spec.kind != "weighted":
            return []
        return [c for c in (self.spec.alpha, self.spec.beta) if c != 1.0]

    def __call__(self, skip: Tensor, stream: Tensor) -> Tensor:
        kind = self.spec.kind
        if kind == "naive_concat":
            return fuse_concat([skip, stream])
        if kind == "naive_add":
            return fuse_add([skip, stream])
        if kind == "weighted":
            return weighted_concat(skip, stream, self.spec.alpha, self.spec.beta)
        if kind == "dynamic":
            return fuse_concat([dynamic_channel_weight(skip, self.channel_weights), stream])
        return gated_concat(skip, stream, self.gate_skip, self.gate_stream)
