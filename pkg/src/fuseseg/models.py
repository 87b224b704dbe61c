"""Model builders: bottleneck residual U-Net and its dense-skip variant.

The residual U-Net downsamples with stride-2 bottleneck convolutions (no
pooling) and upsamples with bilinear interpolation.  Each of the ``levels``
decoder stages fuses the same-resolution encoder feature map with the
decoder stream through a configurable :class:`~fuseseg.fusion.FusionSite`;
the decoder reduces channels back to the skip width of the level before the
next stage, so every site sees equal skip/stream channel counts.

The fused variant replaces each site with a dense fusion: the decoder stage
at level ``i`` concatenates bilinearly resized copies of *all* encoder
features at levels 0..i, each scaled by one constant ``fused_weight``, plus
the unscaled decoder stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .fusion import FUSION_KINDS, FusionSite, FusionSpec
from .layers import BatchNorm2d, Bottleneck, Conv2d
from .ops import bilinear_resize, bilinear_upsample, relu
from .tensor import Tensor, mul_scalar, concat_channels

# Full-scale reference configuration (Massachusetts buildings experiments).
# The exact channel plan of that model is not public, so these are soft
# comparison points only; the +4 / +480 parameter deltas are exact.
REFERENCE_PARAM_COUNT = 5_110_000
REFERENCE_GFLOPS = 5.62


def _mid(ch: int) -> int:
    return max(ch // 4, 1)


@dataclass
class BottleneckConfig:
    in_channels: int
    mid_channels: int
    out_channels: int
    stride: int = 1


def build_bottleneck(cfg: BottleneckConfig, name: str = "block",
                     bn_init: str = "constant1", seed: int = 0,
                     dtype: str = "float32") -> Bottleneck:
    if min(cfg.in_channels, cfg.mid_channels, cfg.out_channels) < 1:
        raise ConfigError("bottleneck channel counts must be positive")
    return Bottleneck(name, cfg.in_channels, cfg.mid_channels, cfg.out_channels,
                      cfg.stride, bn_init, seed, dtype)


@dataclass
class ResUNetConfig:
    levels: int = 4
    in_channels: int = 3
    classes: int = 2
    skip_channels: tuple = (32, 64, 128, 256)
    stem_channels: int | None = None
    alphas: tuple | None = None
    betas: tuple | None = None
    fusion: str = "weighted"
    bn_weight_init: str = "normal01"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.skip_channels = tuple(int(c) for c in self.skip_channels)
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if len(self.skip_channels) != self.levels:
            raise ConfigError(
                f"skip_channels has {len(self.skip_channels)} entries for {self.levels} levels")
        if any(c < 1 for c in self.skip_channels):
            raise ConfigError("skip_channels must be positive")
        if self.stem_channels is None:
            self.stem_channels = self.skip_channels[0]
        if self.stem_channels != self.skip_channels[0]:
            raise ConfigError("stem_channels must equal skip_channels[0]")
        self.alphas = (1.0,) * self.levels if self.alphas is None else tuple(float(a) for a in self.alphas)
        self.betas = (1.0,) * self.levels if self.betas is None else tuple(float(b) for b in self.betas)
        if len(self.alphas) != self.levels or len(self.betas) != self.levels:
            raise ConfigError("alphas/betas must list one constant per level")
        if self.fusion not in FUSION_KINDS:
            raise ConfigError(f"unknown fusion kind {self.fusion!r}")
        if self.fusion != "weighted" and (set(self.alphas) != {1.0} or set(self.betas) != {1.0}):
            raise ConfigError(f"{self.fusion} fusion does not take alpha/beta constants")
        if self.classes < 2:
            raise ConfigError("classes must be >= 2")

    @property
    def bridge_channels(self) -> int:
        return 2 * self.skip_channels[-1]

    @property
    def divisor(self) -> int:
        return 2 ** self.levels


@dataclass
class FusedUNetConfig(ResUNetConfig):
    fused_weight: float = 1.0

    def __post_init__(self):
        super().__post_init__()
        if self.fusion != "weighted":
            raise ConfigError("the fused architecture uses constant branch weights only")
        if not np.isfinite(self.fused_weight):
            raise ConfigError("fused_weight must be finite")


class _ModelBase:
    config: ResUNetConfig

    def modules(self) -> list:
        raise NotImplementedError

    def fusion_sites(self) -> list[FusionSite]:
        return [m for m in self.modules() if isinstance(m, FusionSite)]

    def parameters(self):
        out = []
        for m in self.modules():
            out.extend(m.params())
        return out

    def named_parameters(self):
        return [(p.name, p) for p in self.parameters()]

    def state_arrays(self):
        out = []
        for m in self.modules():
            out.extend(m.state())
        return out

    def zero_grads(self):
        for p in self.parameters():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def param_count_by_kind(self) -> dict:
        counts: dict[str, int] = {}
        for p in self.parameters():
            counts[p.kind] = counts.get(p.kind, 0) + p.size
        return counts

    def fusion_constant_count(self) -> int:
        """Number of non-neutral constants the fusion sites introduce."""
        return sum(len(s.constants()) for s in self.fusion_sites())

    def _check_input(self, x: Tensor):
        cfg = self.config
        if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected (N, {cfg.in_channels}, H, W), got {x.shape}")
        _, _, h, w = x.shape
        d = cfg.divisor
        if h % d or w % d:
            raise ShapeError(f"input extents {h}x{w} must be divisible by {d}")

    def summary(self, input_hw: tuple = (128, 128)) -> dict:
        cfg = self.config
        flops = self.flops_count(input_hw)
        return {
            "arch": type(self).__name__,
            "levels": cfg.levels,
            "skip_channels": list(cfg.skip_channels),
            "fusion": cfg.fusion,
            "param_count": self.param_count(),
            "param_count_by_kind": self.param_count_by_kind(),
            "fusion_constant_count": self.fusion_constant_count(),
            "input_hw": list(input_hw),
            "mac_count": flops,
            "gflops": 2.0 * flops / 1e9,
            "reference_param_count": REFERENCE_PARAM_COUNT,
            "reference_gflops": REFERENCE_GFLOPS,
        }


class ResUNet(_ModelBase):
    def __init__(self, cfg: ResUNetConfig):
        self.config = cfg
        wch = cfg.skip_channels
        kw = dict(seed=cfg.seed, dtype=cfg.dtype)
        bn = cfg.bn_weight_init
        self.stem_conv = Conv2d("stem.conv", cfg.in_channels, wch[0], 3, padding=1, **kw)
        self.stem_bn = BatchNorm2d("stem.bn", wch[0], bn, **kw)
        self.encoder = []
        for i in range(1, cfg.levels):
            self.encoder.append((
                Bottleneck(f"enc{i}.down", wch[i - 1], _mid(wch[i]), wch[i], 2, bn, **kw),
                Bottleneck(f"enc{i}.block", wch[i], _mid(wch[i]), wch[i], 1, bn, **kw),
            ))
        bch = cfg.bridge_channels
        self.bridge = (
            Bottleneck("bridge.down", wch[-1], _mid(bch), bch, 2, bn, **kw),
            Bottleneck("bridge.block", bch, _mid(bch), bch, 1, bn, **kw),
        )
        self.decoder = []
        for i in reversed(range(cfg.levels)):
            stream_in = bch if i == cfg.levels - 1 else wch[i + 1]
            site = FusionSite(f"dec{i}.fuse", self._site_spec(i), wch[i], wch[i], **kw)
            self.decoder.append((
                i,
                Conv2d(f"dec{i}.conv", stream_in, wch[i], 3, padding=1, **kw),
                BatchNorm2d(f"dec{i}.bn", wch[i], bn, **kw),
                site,
                Bottleneck(f"dec{i}.block", site.out_channels, _mid(wch[i]), wch[i], 1, bn, **kw),
            ))
        self.head = Conv2d("head", wch[0], cfg.classes, 1, bias=True, **kw)

    def _site_spec(self, level: int) -> FusionSpec:
        cfg = self.config
        if cfg.fusion == "weighted":
            return FusionSpec("weighted", cfg.alphas[level], cfg.betas[level])
        return FusionSpec(cfg.fusion)

    def modules(self) -> list:
        out = [self.stem_conv, self.stem_bn]
        for down, block in self.encoder:
            out += [down, block]
        out += list(self.bridge)
        for _, conv, bn, site, block in self.decoder:
            out += [conv, bn, site, block]
        out.append(self.head)
        return out

    def forward(self, x: Tensor, training: bool = False, trace: dict | None = None) -> Tensor:
        self._check_input(x)
        t = relu(self.stem_bn(self.stem_conv(x), training))
        skips = [t]
        for down, block in self.encoder:
            t = block(down(t, training), training)
            skips.append(t)
        t = self.bridge[1](self.bridge[0](t, training), training)
        for i, conv, bn, site, block in self.decoder:
            t = bilinear_upsample(t, 2)
            t = relu(bn(conv(t), training))
            skip = skips[i]
            if trace is not None:
                trace[f"dec{i}.skip"] = skip
                trace[f"dec{i}.stream"] = t
            fused = site(skip, t)
            if trace is not None:
                trace[f"dec{i}.fused"] = fused
            t = block(fused, training)
        return self.head(t)

    def flops_count(self, input_hw: tuple = (128, 128)) -> int:
        """Multiply-accumulate count for one image.

        Cost model: convolutions contribute out_h*out_w*O*I*kh*kw (+bias
        adds), batch norm 2 per element, relu/residual-add 1 per element,
        bilinear resampling 4 per output element, branch scaling 1 per
        element.
        """
        cfg = self.config
        h, w = input_hw
        if h % cfg.divisor or w % cfg.divisor:
            raise ShapeError(f"extents {h}x{w} not divisible by {cfg.divisor}")
        wch = cfg.skip_channels
        total = self.stem_conv.flops(h, w) + self.stem_bn.flops(h, w) + wch[0] * h * w
        sh, sw = h, w
        for down, block in self.encoder:
            total += down.flops(sh, sw)
            sh, sw = sh // 2, sw // 2
            total += block.flops(sh, sw)
        total += self.bridge[0].flops(sh, sw)
        sh, sw = sh // 2, sw // 2
        total += self.bridge[1].flops(sh, sw)
        ch = cfg.bridge_channels
        for i, conv, bn, site, block in self.decoder:
            sh, sw = sh * 2, sw * 2
            total += 4 * ch * sh * sw                      # bilinear upsample
            total += conv.flops(sh, sw) + bn.flops(sh, sw) + wch[i] * sh * sw
            if site.spec.kind == "weighted":
                total += 2 * wch[i] * sh * sw              # two branch scalings
            elif site.spec.kind == "dynamic":
                total += wch[i] * sh * sw
            elif site.spec.kind == "gated":
                # two 1x1 gate convs + sigmoid + the gated mixing arithmetic
                total += 2 * (wch[i] + 1) * sh * sw + 8 * wch[i] * sh * sw
            total += block.flops(sh, sw)
            ch = wch[i]
        total += self.head.flops(h, w)
        return total


class FusedUNet(_ModelBase):
    def __init__(self, cfg: FusedUNetConfig):
        self.config = cfg
        wch = cfg.skip_channels
        kw = dict(seed=cfg.seed, dtype=cfg.dtype)
        bn = cfg.bn_weight_init
        self.stem_conv = Conv2d("stem.conv", cfg.in_channels, wch[0], 3, padding=1, **kw)
        self.stem_bn = BatchNorm2d("stem.bn", wch[0], bn, **kw)
        self.encoder = []
        for i in range(1, cfg.levels):
            self.encoder.append((
                Bottleneck(f"enc{i}.down", wch[i - 1], _mid(wch[i]), wch[i], 2, bn, **kw),
                Bottleneck(f"enc{i}.block", wch[i], _mid(wch[i]), wch[i], 1, bn, **kw),
            ))
        bch = cfg.bridge_channels
        self.bridge = (
            Bottleneck("bridge.down", wch[-1], _mid(bch), bch, 2, bn, **kw),
            Bottleneck("bridge.block", bch, _mid(bch), bch, 1, bn, **kw),
        )
        self.decoder = []
        for i in reversed(range(cfg.levels)):
            stream_in = bch if i == cfg.levels - 1 else wch[i + 1]
            fused_ch = wch[i] + sum(wch[: i + 1])
            self.decoder.append((
                i,
                Conv2d(f"dec{i}.conv", stream_in, wch[i], 3, padding=1, **kw),
                BatchNorm2d(f"dec{i}.bn", wch[i], bn, **kw),
                Bottleneck(f"dec{i}.block", fused_ch, _mid(wch[i]), wch[i], 1, bn, **kw),
            ))
        self.head = Conv2d("head", wch[0], cfg.classes, 1, bias=True, **kw)

    def modules(self) -> list:
        out = [self.stem_conv, self.stem_bn]
        for down, block in self.encoder:
            out += [down, block]
        out += list(self.bridge)
        for _, conv, bn, block in self.decoder:
            out += [conv, bn, block]
        out.append(self.head)
        return out

    def forward(self, x: Tensor, training: bool = False, trace: dict | None = None) -> Tensor:
        self._check_input(x)
        w_f = self.config.fused_weight
        t = relu(self.stem_bn(self.stem_conv(x), training))
        skips = [t]
        for down, block in self.encoder:
            t = block(down(t, training), training)
            skips.append(t)
        t = self.bridge[1](self.bridge[0](t, training), training)
        for i, conv, bn, block in self.decoder:
            t = bilinear_upsample(t, 2)
            t = relu(bn(conv(t), training))
            th, tw = t.shape[2], t.shape[3]
            branches = []
            for j in range(i + 1):
                s = skips[j]
                resized = s if s.shape[2:] == (th, tw) else bilinear_resize(s, th, tw)
                weighted = mul_scalar(resized, w_f)
                if trace is not None:
                    trace[f"dec{i}.branch{j}"] = resized
                    trace[f"dec{i}.branch{j}.weighted"] = weighted
                branches.append(weighted)
            branches.append(t)
            if trace is not None:
                trace[f"dec{i}.stream"] = t
            t = block(concat_channels(branches), training)
        return self.head(t)

    def flops_count(self, input_hw: tuple = (128, 128)) -> int:
        cfg = self.config
        h, w = input_hw
        if h % cfg.divisor or w % cfg.divisor:
            raise ShapeError(f"extents {h}x{w} not divisible by {cfg.divisor}")
        wch = cfg.skip_channels
        total = self.stem_conv.flops(h, w) + self.stem_bn.flops(h, w) + wch[0] * h * w
        sh, sw = h, w
        for down, block in self.encoder:
            total += down.flops(sh, sw)
            sh, sw = sh // 2, sw // 2
            total += block.flops(sh, sw)
        total += self.bridge[0].flops(sh, sw)
        sh, sw = sh // 2, sw // 2
        total += self.bridge[1].flops(sh, sw)
        ch = cfg.bridge_channels
        for i, conv, bn, block in self.decoder:
            sh, sw = sh * 2, sw * 2
            total += 4 * ch * sh * sw
            total += conv.flops(sh, sw) + bn.flops(sh, sw) + wch[i] * sh * sw
            for j in range(i + 1):
                if j != i:
                    total += 4 * wch[j] * sh * sw          # resize to this level
                total += wch[j] * sh * sw                  # branch scaling
            total += block.flops(sh, sw)
            ch = wch[i]
        total += self.head.flops(h, w)
        return total


def build_res_unet(cfg: ResUNetConfig) -> ResUNet:
    return ResUNet(cfg)


def build_fused_unet(cfg: FusedUNetConfig) -> FusedUNet:
    return FusedUNet(cfg)


def forward(model: _ModelBase, batch: Tensor, training: bool = False) -> Tensor:
    return model.forward(batch, training=training)


def param_count(model: _ModelBase) -> int:
    return model.param_count()


def named_parameters(model: _ModelBase):
    return model.named_parameters()


def flops_count(model: _ModelBase, input_hw: tuple = (128, 128)) -> int:
    return model.flops_count(input_hw)


def classify_dependency(tape, src: Tensor, dst: Tensor) -> str:
    """"series" when ``dst`` was computed (transitively) from ``src`` on the
    given tape, else "parallel"."""
    by_out = {id(node.out): node for node in tape.nodes}
    stack, seen = [dst], set()
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t is src:
            return "series"
        node = by_out.get(id(t))
        if node is not None:
            stack.extend(node.inputs)
    return "parallel"


def classify_fusion_sites(model: ResUNet, input_hw: tuple | None = None) -> list[str]:
    """Tag each fusion site by whether its decoder stream depends on its skip."""
    from .tensor import record

    cfg = model.config
    if input_hw is None:
        input_hw = (2 * cfg.divisor, 2 * cfg.divisor)
    x = Tensor(np.zeros((1, cfg.in_channels, *input_hw),
                        np.float32 if cfg.dtype == "float32" else np.float64))
    trace: dict = {}
    with record() as tape:
        model.forward(x, training=False, trace=trace)
    out = []
    for i in range(cfg.levels):
        out.append(classify_dependency(tape, trace[f"dec{i}.skip"], trace[f"dec{i}.stream"]))
    return out
