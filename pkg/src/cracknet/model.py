"""Context-CrackNet: residual encoder, CAGM bottleneck, RFEM decoder, K-class head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .cagm import CAGM, CagmConfig, complexity_estimate
from .errors import ConfigError, DimensionError
from .nn import BatchNorm2d, Conv2d, Module, maxpool2d, conv_output_size, upsample2x
from .rfem import RFEM, ConvBlock, RfemConfig
from .tensor import Tensor, relu, sigmoid, softmax

FULL_WIDTHS = (64, 256, 512, 1024)


@dataclass
class ModelConfig:
    height: int = 64
    width: int = 64
    in_channels: int = 3
    num_classes: int = 1
    base_widths: tuple = FULL_WIDTHS
    width_mult: float = 0.125
    block: str = "basic"
    blocks_per_stage: tuple = (1, 1, 1)
    use_cagm: bool = True
    use_rfem: bool = True
    upsample: str = "bilinear"
    cagm_d_k: int | None = None
    cagm_rank: int | None = None
    rfem_f_int: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        self.base_widths = tuple(self.base_widths)
        self.blocks_per_stage = tuple(self.blocks_per_stage)
        if self.rfem_f_int is not None:
            self.rfem_f_int = tuple(self.rfem_f_int)
        if self.height % 16 or self.width % 16 or self.height < 16 or self.width < 16:
            raise ConfigError(f"input size {self.height}x{self.width} must be a positive multiple of 16")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.width_mult <= 0:
            raise ConfigError("width_mult must be > 0")
        if len(self.base_widths) != 4 or len(self.blocks_per_stage) != 3:
            raise ConfigError("need 4 stage widths and 3 residual stage depths")
        if self.block not in ("basic", "bottleneck"):
            raise ConfigError(f"unknown block type {self.block!r}")
        if self.upsample not in ("bilinear", "nearest"):
            raise ConfigError(f"unknown upsample mode {self.upsample!r}")
        if self.block == "bottleneck" and min(self.widths[1:]) < 4:
            raise ConfigError("bottleneck blocks need stage widths >= 4")

    @property
    def widths(self) -> tuple[int, int, int, int]:
        return tuple(max(1, int(round(w * self.width_mult))) for w in self.base_widths)

    @property
    def cagm(self) -> CagmConfig:
        c3 = self.widths[3]
        return CagmConfig(c3, self.height // 16, self.width // 16, self.cagm_d_k, self.cagm_rank)

    @property
    def rfem(self) -> list[RfemConfig]:
        """Decoder stage configs, deepest first (skips from F2, F1, F0)."""
        c = self.widths
        f_int = self.rfem_f_int or (None, None, None)
        return [
            RfemConfig(c[2], c[3], c[2], f_int[0]),
            RfemConfig(c[1], c[2], c[1], f_int[1]),
            RfemConfig(c[0], c[1], c[0], f_int[2]),
        ]

    def to_dict(self) -> dict:
        d = asdict(self)
        for key, value in d.items():
            if isinstance(value, tuple):
                d[key] = list(value)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def full_width(cls, size: int = 448, num_classes: int = 1) -> "ModelConfig":
        """ResNet50-like encoder widths with bottleneck blocks (3, 4, 6)."""
        return cls(height=size, width=size, num_classes=num_classes, width_mult=1.0,
                   block="bottleneck", blocks_per_stage=(3, 4, 6))


@dataclass
class FeaturePyramid:
    f0: Tensor
    f1: Tensor
    f2: Tensor
    f3: Tensor

    def as_list(self) -> list[Tensor]:
        return [self.f0, self.f1, self.f2, self.f3]


def _conv_flops(conv: Conv2d, shape) -> tuple[int, tuple]:
    return conv.flops(shape)


class BasicBlock(Module):
    def __init__(self, c_in: int, c_out: int, stride: int, rng):
        self.conv1 = Conv2d(c_in, c_out, 3, stride=stride, padding=1, rng=rng)
        self.bn1 = BatchNorm2d(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, padding=1, rng=rng)
        self.bn2 = BatchNorm2d(c_out)
        if stride != 1 or c_in != c_out:
            self.down = Conv2d(c_in, c_out, 1, stride=stride, rng=rng)
            self.down_bn = BatchNorm2d(c_out)
        else:
            self.down = None

    def convs(self):
        return [self.conv1, self.conv2]

    def forward(self, x: Tensor) -> Tensor:
        out = relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        shortcut = x if self.down is None else self.down_bn(self.down(x))
        return relu(out + shortcut)

    def flops(self, shape):
        total, s = 0, shape
        for conv in self.convs():
            f, s = _conv_flops(conv, s)
            total += f
        if self.down is not None:
            total += _conv_flops(self.down, shape)[0]
        return total, s


class BottleneckBlock(BasicBlock):
    def __init__(self, c_in: int, c_out: int, stride: int, rng):
        mid = c_out // 4
        self.conv1 = Conv2d(c_in, mid, 1, rng=rng)
        self.bn1 = BatchNorm2d(mid)
        self.conv2 = Conv2d(mid, mid, 3, stride=stride, padding=1, rng=rng)
        self.bn2 = BatchNorm2d(mid)
        self.conv3 = Conv2d(mid, c_out, 1, rng=rng)
        self.bn3 = BatchNorm2d(c_out)
        if stride != 1 or c_in != c_out:
            self.down = Conv2d(c_in, c_out, 1, stride=stride, rng=rng)
            self.down_bn = BatchNorm2d(c_out)
        else:
            self.down = None

    def convs(self):
        return [self.conv1, self.conv2, self.conv3]

    def forward(self, x: Tensor) -> Tensor:
        out = relu(self.bn1(self.conv1(x)))
        out = relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        shortcut = x if self.down is None else self.down_bn(self.down(x))
        return relu(out + shortcut)


class Encoder(Module):
    """Stem (7x7/2 conv, BN, ReLU) gives F0 at H/2; a 3x3/2 max-pool then
    three residual stages give F1 (H/4), F2 (H/8) and F3 (H/16)."""

    def __init__(self, config: ModelConfig, rng):
        c0, c1, c2, c3 = config.widths
        self.stem = Conv2d(config.in_channels, c0, 7, stride=2, padding=3, rng=rng)
        self.stem_bn = BatchNorm2d(c0)
        block = BasicBlock if config.block == "basic" else BottleneckBlock
        self.stages = []
        c_prev = c0
        for c_out, depth, stride in zip((c1, c2, c3), config.blocks_per_stage, (1, 2, 2)):
            stage = []
            for i in range(depth):
                stage.append(block(c_prev, c_out, stride if i == 0 else 1, rng))
                c_prev = c_out
            self.stages.append(_Sequential(stage))

    def forward(self, x: Tensor) -> FeaturePyramid:
        f0 = relu(self.stem_bn(self.stem(x)))
        h = maxpool2d(f0, 3, 2, 1)
        feats = [f0]
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return FeaturePyramid(*feats)

    def flops(self, shape):
        total, s = _conv_flops(self.stem, shape)
        B, C, H, W = s
        s = (B, C, conv_output_size(H, 3, 2, 1), conv_output_size(W, 3, 2, 1))
        for stage in self.stages:
            for blk in stage.items:
                f, s = blk.flops(s)
                total += f
        return total, s


class _Sequential(Module):
    def __init__(self, items):
        self.items = list(items)

    def forward(self, x):
        for m in self.items:
            x = m(x)
        return x


class ContextCrackNet(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.encoder = Encoder(config, rng)
        self.cagm = CAGM(config.cagm, rng=rng) if config.use_cagm else None
        self.decoder = [RFEM(rc, gated=config.use_rfem, rng=rng) for rc in config.rfem]
        self.head = Conv2d(config.widths[0], config.num_classes, 1, rng=rng)

    def encode(self, image: Tensor) -> FeaturePyramid:
        cfg = self.config
        if image.ndim != 4 or image.shape[1:] != (cfg.in_channels, cfg.height, cfg.width):
            raise DimensionError(
                f"expected input [B,{cfg.in_channels},{cfg.height},{cfg.width}], got {image.shape}")
        return self.encoder(image)

    def bottleneck(self, f3: Tensor) -> Tensor:
        return self.cagm(f3) if self.cagm is not None else f3

    def decode(self, feats: FeaturePyramid, d: Tensor) -> Tensor:
        mode = self.config.upsample
        for stage, skip in zip(self.decoder, (feats.f2, feats.f1, feats.f0)):
            d = stage(skip, upsample2x(d, mode))
        return self.head(upsample2x(d, mode))

    def forward(self, image: Tensor) -> Tensor:
        """Image ``[B, C, H, W]`` to logits ``[B, K, H, W]``."""
        feats = self.encode(image)
        return self.decode(feats, self.bottleneck(feats.f3))

    def attention_maps(self) -> list[np.ndarray]:
        """Gate maps ``[B,1,h,w]`` from the last forward, deepest stage first."""
        return [st.last_psi for st in self.decoder if st.gated and st.last_psi is not None]

    def flops(self, shape) -> int:
        total, s = self.encoder.flops(shape)
        if self.cagm is not None:
            total += complexity_estimate(self.cagm.config, batch=shape[0])["total"]
        B = shape[0]
        for stage in self.decoder:
            _, _, h, w = s
            s = (B, stage.config.c_dec, 2 * h, 2 * w)
            skip_shape = (B, stage.config.c_enc, 2 * h, 2 * w)
            if stage.gated:
                total += _conv_flops(stage.gate_x, skip_shape)[0]
                g, gs = _conv_flops(stage.gate_g, s)
                total += g + _conv_flops(stage.psi, gs)[0]
            cat = (B, stage.config.c_enc + stage.config.c_dec, 2 * h, 2 * w)
            f, s = _conv_flops(stage.block.conv1, cat)
            total += f
            f, s = _conv_flops(stage.block.conv2, s)
            total += f
        _, C, h, w = s
        total += _conv_flops(self.head, (B, C, 2 * h, 2 * w))[0]
        return total


def probabilities(logits: Tensor) -> Tensor:
    """Sigmoid for a single-logit head, softmax over classes otherwise."""
    return sigmoid(logits) if logits.shape[1] == 1 else softmax(logits, axis=1)


def predict_mask(logits) -> np.ndarray:
    """Hard labels ``[B, H, W]``: strict ``sigmoid > 0.5`` for K=1, argmax else."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if arr.shape[1] == 1:
        # sigmoid(z) > 0.5  <=>  z > 0
        return (arr[:, 0] > 0).astype(np.int64)
    return arr.argmax(axis=1).astype(np.int64)
