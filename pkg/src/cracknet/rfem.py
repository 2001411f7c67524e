"""Region-focused enhancement module: attention-gated skip fusion.

Encoder skip features are scaled by a single-channel spatial gate computed
from the encoder features and the upsampled decoder features, concatenated
with the decoder features and refined by two conv-BN-ReLU stages.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DimensionError
from .nn import BatchNorm2d, Conv2d, Module
from .tensor import Tensor, concat, relu, sigmoid


@dataclass(frozen=True)
class RfemConfig:
    c_enc: int
    c_dec: int
    c_out: int
    f_int: int | None = None

    def __post_init__(self):
        if self.f_int is None:
            object.__setattr__(self, "f_int", max(1, self.c_enc // 2))
        if min(self.c_enc, self.c_dec, self.c_out, self.f_int) < 1:
            raise DimensionError("RFEM channel counts must be positive")


class ConvBlock(Module):
    """Two stages of 3x3 conv (pad 1) -> BatchNorm -> ReLU."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.conv1 = Conv2d(c_in, c_out, 3, padding=1, rng=rng)
        self.bn1 = BatchNorm2d(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, padding=1, rng=rng)
        self.bn2 = BatchNorm2d(c_out)

    def forward(self, x: Tensor) -> Tensor:
        x = relu(self.bn1(self.conv1(x)))
        return relu(self.bn2(self.conv2(x)))


class RFEM(Module):
    """With ``gated=False`` the gate convs are not built and the module is
    the plain concat + conv-block skip fusion (the ablation baseline)."""

    def __init__(self, config: RfemConfig, gated: bool = True,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        self.gated = gated
        if gated:
            self.gate_x = Conv2d(config.c_enc, config.f_int, 1, rng=rng)
            self.gate_g = Conv2d(config.c_dec, config.f_int, 1, rng=rng)
            self.psi = Conv2d(config.f_int, 1, 1, rng=rng)
        self.block = ConvBlock(config.c_enc + config.c_dec, config.c_out, rng)
        self.last_psi: np.ndarray | None = None

    def forward(self, f_enc: Tensor, f_dec: Tensor) -> Tensor:
        if f_enc.shape[2:] != f_dec.shape[2:] or f_enc.shape[0] != f_dec.shape[0]:
            raise DimensionError(f"encoder {f_enc.shape} and decoder {f_dec.shape} do not align")
        if self.gated:
            psi = attention_coefficients(f_enc, f_dec, self)
            self.last_psi = psi.data
            f_enc = modulate(psi, f_enc)
        return self.block(concat([f_enc, f_dec], axis=1))


def attention_coefficients(f_enc: Tensor, f_dec: Tensor, params: RFEM) -> Tensor:
    """Gate map ``sigmoid(psi(relu(W_g * F_d + W_x * F_e)))`` of shape ``[B,1,H,W]``."""
    if f_enc.shape[2:] != f_dec.shape[2:]:
        raise DimensionError(f"spatial dims differ: {f_enc.shape[2:]} vs {f_dec.shape[2:]}")
    y = relu(params.gate_g(f_dec) + params.gate_x(f_enc))
    return sigmoid(params.psi(y))


def modulate(psi: Tensor, f_enc: Tensor) -> Tensor:
    return psi * f_enc


def export_attention_map(psi, path) -> np.ndarray:
    """Write one ``[H, W]`` gate map as 8-bit grayscale, ``round-half-up(255*psi)``.

    Accepts a Tensor or array of shape [H,W], [1,H,W] or [1,1,H,W].
    """
    arr = psi.data if isinstance(psi, Tensor) else np.asarray(psi, dtype=np.float64)
    arr = np.squeeze(arr)
    if arr.ndim != 2:
        raise DimensionError(f"attention map must be 2-D after squeezing, got {arr.shape}")
    q = np.floor(255.0 * np.clip(arr, 0.0, 1.0) + 0.5).astype(np.uint8)
    path = Path(path)
    try:
        Image.fromarray(q).save(path, format="PNG")
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot write attention map to {path}: {exc}") from exc
    return q
