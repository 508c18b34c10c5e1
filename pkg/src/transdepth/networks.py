"""The four learned components, as small fixed architectures.

* :class:`SingleViewNet` - U-Net from (RGB, raw depth, mask) to a probability
  volume over the hypothesis planes.
* :class:`SPPExtractor` - spatial-pyramid-pooling features, one parameter set
  shared by the reference and source image.
* :class:`InjectionNet` - 3-D encoder/decoder that re-injects the single-view
  volume into the cost volume at every scale; with ``inject=False`` it is the
  same topology fed the cost volume alone (the ablation baseline).
* :class:`CostRegularizer` and :class:`ConfidenceHead`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import diffcore as dc
from .diffcore import Parameter, Tensor

SPP_FACTORS = (1, 2, 4, 8)
UNET_LEVELS = 3


@dataclass(frozen=True)
class NetworkConfig:
    base_channels: int = 16
    feature_stride: int = 4
    feature_channels: int = 16
    injection_scales: int = 3
    plane_count: int = 16
    inject: bool = True
    seed: int = 0

    def __post_init__(self):
        s = self.feature_stride
        if s < 1 or s & (s - 1):
            raise ValueError(f"feature_stride must be a power of two, got {s}")
        if self.injection_scales < 1:
            raise ValueError(f"injection_scales must be >= 1, got {self.injection_scales}")
        if self.base_channels < 1 or self.feature_channels < 1:
            raise ValueError("channel widths must be positive")
        if self.plane_count < 2:
            raise ValueError(f"plane_count must be >= 2, got {self.plane_count}")

    @property
    def volume_divisor(self) -> int:
        return 2 ** (self.injection_scales - 1)

    @property
    def image_divisor(self) -> int:
        """Image sides must be multiples of this for every network to fit."""
        grid = max(2 ** UNET_LEVELS, max(SPP_FACTORS), self.volume_divisor)
        return self.feature_stride * grid

    def check_image(self, height: int, width: int) -> None:
        d = self.image_divisor
        if height % d or width % d:
            raise ValueError(f"image size {height}x{width} must be divisible by {d} "
                             f"(feature stride {self.feature_stride} x {d // self.feature_stride})")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class Conv:
    """Convolution layer (2-D or 3-D) with bias, initialised uniform in +-sqrt(1/fan_in)."""

    def __init__(self, name: str, rng: np.random.Generator, c_in: int, c_out: int,
                 kernel: int = 3, stride: int = 1, nd: int = 2):
        fan_in = c_in * kernel ** nd
        bound = np.sqrt(1.0 / fan_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (c_out, c_in) + (kernel,) * nd),
                                f"{name}.weight")
        self.bias = Parameter(rng.uniform(-bound, bound, c_out), f"{name}.bias")
        self.stride = stride
        self.padding = kernel // 2
        self._op = dc.conv2d if nd == 2 else dc.conv3d

    def __call__(self, x) -> Tensor:
        return self._op(x, self.weight, self.stride, self.padding, bias=self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class Network:
    """Holds an ordered list of layers; parameters are gathered from them."""

    layers: list

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())


def _stem(name, rng, c_in, width, stride) -> list[Conv]:
    layers = []
    for i in range(int(np.log2(stride))):
        layers.append(Conv(f"{name}.stem{i}", rng, c_in if i == 0 else width, width, stride=2))
    return layers


class SingleViewNet(Network):
    """U-Net over the feature grid; output is softmax-normalised over planes."""

    IN_CHANNELS = 5  # rgb, normalised raw depth, mask

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator, name: str = "single"):
        self.cfg = cfg
        b = cfg.base_channels
        self.stem = _stem(name, rng, self.IN_CHANNELS, b, cfg.feature_stride)
        first = self.IN_CHANNELS if not self.stem else b
        widths = [b, 2 * b, 4 * b, 4 * b]
        self.enc = [Conv(f"{name}.enc0", rng, first, widths[0])]
        for lvl in range(1, UNET_LEVELS + 1):
            self.enc.append(Conv(f"{name}.enc{lvl}", rng, widths[lvl - 1], widths[lvl], stride=2))
        self.dec = {}
        for lvl in range(UNET_LEVELS - 1, -1, -1):
            self.dec[lvl] = Conv(f"{name}.dec{lvl}", rng, widths[lvl + 1] + widths[lvl], widths[lvl])
        self.head = Conv(f"{name}.head", rng, widths[0], cfg.plane_count, kernel=1)
        self.layers = self.stem + self.enc + [self.dec[k] for k in sorted(self.dec, reverse=True)] \
            + [self.head]

    def __call__(self, rgb, raw_depth_normalized, mask) -> Tensor:
        rgb = dc.as_tensor(rgb)
        self.cfg.check_image(*rgb.shape[1:])
        x = dc.concat([rgb, raw_depth_normalized, mask], axis=0)
        for conv in self.stem:
            x = dc.relu(conv(x))
        skips = []
        for conv in self.enc:
            x = dc.relu(conv(x))
            skips.append(x)
        for lvl in range(UNET_LEVELS - 1, -1, -1):
            x = dc.relu(self.dec[lvl](dc.concat([dc.upsample2d(x, 2), skips[lvl]], axis=0)))
        return dc.softmax_over_axis(self.head(x), axis=0)


class SPPExtractor(Network):
    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator, name: str = "spp"):
        self.cfg = cfg
        b = cfg.base_channels
        self.branch_channels = max(b // 2, 1)
        self.stem = _stem(name, rng, 3, b, cfg.feature_stride)
        self.trunk = Conv(f"{name}.trunk", rng, b if self.stem else 3, b)
        self.branches = [Conv(f"{name}.pool{f}", rng, b, self.branch_channels, kernel=1)
                         for f in SPP_FACTORS]
        self.fuse = Conv(f"{name}.fuse", rng, self.branch_channels * len(SPP_FACTORS),
                         cfg.feature_channels)
        self.layers = self.stem + [self.trunk] + self.branches + [self.fuse]

    def __call__(self, image) -> Tensor:
        image = dc.as_tensor(image)
        self.cfg.check_image(*image.shape[1:])
        x = image
        for conv in self.stem:
            x = dc.relu(conv(x))
        x = dc.relu(self.trunk(x))
        pyramid = []
        for factor, conv in zip(SPP_FACTORS, self.branches):
            y = dc.avg_pool2d(x, factor) if factor > 1 else x
            y = dc.relu(conv(y))
            pyramid.append(dc.upsample2d(y, factor) if factor > 1 else y)
        return self.fuse(dc.concat(pyramid, axis=0))


class InjectionNet(Network):
    """Multi-scale 3-D encoder/decoder over the cost volume.

    Encoder level ``s`` sees the previous encoding (the cost volume at level
    0) concatenated with the single-view volume max-pooled by ``2**s``, and
    halves the resolution except at the last level. The decoder upsamples
    and concatenates the encoder input of the matching scale. With
    ``inject=False`` the probability volume is never concatenated.
    """

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator, name: str = "inject"):
        self.cfg = cfg
        self.inject = cfg.inject
        b, c, scales = cfg.base_channels, cfg.feature_channels, cfg.injection_scales
        extra = 1 if self.inject else 0
        self.enc, self.dec = [], []
        self.in_channels = []
        prev = c
        for s in range(scales):
            c_in = prev + extra
            self.in_channels.append(c_in)
            last = s == scales - 1
            c_out = c if scales == 1 else b * 2 ** s
            self.enc.append(Conv(f"{name}.enc{s}", rng, c_in, c_out, stride=1 if last else 2, nd=3))
            prev = c_out
        for s in range(scales - 2, -1, -1):
            c_out = c if s == 0 else b * 2 ** (s - 1)
            self.dec.append(Conv(f"{name}.dec{s}", rng, prev + self.in_channels[s], c_out, nd=3))
            prev = c_out
        self.layers = self.enc + self.dec

    def __call__(self, cost, prob) -> Tensor:
        cost, prob = dc.as_tensor(cost), dc.as_tensor(prob)
        if cost.shape[1:] != prob.shape:
            raise ValueError(f"cost volume {cost.shape} and probability volume {prob.shape} "
                             f"disagree on (N, h, w)")
        div = self.cfg.volume_divisor
        n, h, w = prob.shape
        if h % div or w % div:
            raise ValueError(f"volume grid {h}x{w} must be divisible by {div}")
        pad = -n % div
        if pad:
            # zero planes (no cost, no probability) beyond d_max, cropped off at the end
            cost = dc.concat([cost, np.zeros((cost.shape[0], pad, h, w))], axis=1)
            prob = dc.concat([prob, np.zeros((pad, h, w))], axis=0)
        prob4 = dc.reshape(prob, (1,) + prob.shape)
        scales = len(self.enc)
        inputs = []
        x = cost
        for s, conv in enumerate(self.enc):
            if self.inject:
                pooled = prob4 if s == 0 else dc.maxpool3d(prob4, 2 ** s, 2 ** s)
                x = dc.concat([x, pooled], axis=0)
            inputs.append(x)
            x = conv(x)
            if scales > 1:
                x = dc.relu(x)
        for i, conv in enumerate(self.dec):
            s = scales - 2 - i
            x = conv(dc.concat([dc.upsample3d(x, 2), inputs[s]], axis=0))
            if s > 0:
                x = dc.relu(x)
        return x[:, :n] if pad else x


class CostRegularizer(Network):
    """Three 3-D convolutions C -> base -> base -> 1, giving per-plane scores."""

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator, name: str = "regularizer"):
        b = cfg.base_channels
        self.layers = [Conv(f"{name}.conv0", rng, cfg.feature_channels, b, nd=3),
                       Conv(f"{name}.conv1", rng, b, b, nd=3),
                       Conv(f"{name}.conv2", rng, b, 1, nd=3)]

    def __call__(self, cost) -> Tensor:
        x = dc.relu(self.layers[0](cost))
        x = dc.relu(self.layers[1](x))
        x = self.layers[2](x)
        return dc.reshape(x, x.shape[1:])


class ConfidenceHead(Network):
    """Two 3x3 convolutions to a pair of per-pixel confidences that sum to one."""

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator, name: str = "confidence"):
        b = cfg.base_channels
        self.layers = [Conv(f"{name}.conv0", rng, cfg.feature_channels + cfg.plane_count, b),
                       Conv(f"{name}.conv1", rng, b, 2)]

    def __call__(self, ref_features, multi_prob) -> tuple[Tensor, Tensor]:
        ref_features, multi_prob = dc.as_tensor(ref_features), dc.as_tensor(multi_prob)
        if ref_features.shape[1:] != multi_prob.shape[1:]:
            raise ValueError(f"features {ref_features.shape} and probability volume "
                             f"{multi_prob.shape} differ in (h, w)")
        x = dc.relu(self.layers[0](dc.concat([ref_features, multi_prob], axis=0)))
        pair = dc.softmax_over_axis(self.layers[1](x), axis=0)
        return pair[0], pair[1]


class DepthModel:
    """All four networks built from one config and one seeded generator."""

    def __init__(self, cfg: NetworkConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.single_view = SingleViewNet(cfg, rng)
        self.spp = SPPExtractor(cfg, rng)
        self.injection = InjectionNet(cfg, rng)
        self.regularizer = CostRegularizer(cfg, rng)
        self.confidence = ConfidenceHead(cfg, rng)
        names = [p.name for p in self.parameters()]
        if len(set(names)) != len(names):
            raise RuntimeError("duplicate parameter identifiers")

    @property
    def networks(self) -> dict[str, Network]:
        return {"single_view": self.single_view, "spp": self.spp, "injection": self.injection,
                "regularizer": self.regularizer, "confidence": self.confidence}

    def parameters(self) -> list[Parameter]:
        return [p for net in self.networks.values() for p in net.parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()
