"""Context-aware global module: low-rank linear self-attention at the bottleneck.

The bottleneck map ``[B, C, H, W]`` is flattened row-major into ``N = H*W``
tokens. Keys and values are compressed along the token axis by learned
``[N, k]`` matrices, so the attention matrix is ``N x k`` instead of
``N x N``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .nn import Dense, Module, parameter
from .tensor import Tensor, matmul, softmax


@dataclass(frozen=True)
class CagmConfig:
    channels: int
    height: int
    width: int
    d_k: int | None = None
    rank: int | None = None

    def __post_init__(self):
        if self.channels < 1 or self.height < 1 or self.width < 1:
            raise DimensionError("CAGM channels and spatial dims must be positive")
        if self.d_k is None:
            object.__setattr__(self, "d_k", self.channels)
        if self.rank is None:
            object.__setattr__(self, "rank", max(1, self.n_tokens // 8))
        if self.d_k < 1 or self.rank < 1:
            raise DimensionError("d_k and rank must be >= 1")
        if self.rank > self.n_tokens:
            raise DimensionError(f"rank {self.rank} exceeds sequence length {self.n_tokens}")

    @property
    def n_tokens(self) -> int:
        return self.height * self.width


def flatten_spatial(f: Tensor, height: int | None = None, width: int | None = None) -> Tensor:
    """``[B, C, H, W] -> [B, H*W, C]``; token ``i*W + j`` is pixel ``(i, j)``."""
    B, C, H, W = f.shape
    if (height is not None and H != height) or (width is not None and W != width):
        raise DimensionError(f"bottleneck is {H}x{W}, module was built for {height}x{width}")
    return f.reshape(B, C, H * W).permute(0, 2, 1)


def unflatten_spatial(x: Tensor, height: int, width: int) -> Tensor:
    B, N, C = x.shape
    if N != height * width:
        raise DimensionError(f"{N} tokens cannot fill a {height}x{width} map")
    return x.permute(0, 2, 1).reshape(B, C, height, width)


class CAGM(Module):
    def __init__(self, config: CagmConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        C, d, N, k = config.channels, config.d_k, config.n_tokens, config.rank
        self.query = Dense(C, d, rng=rng)
        self.key = Dense(C, d, rng=rng)
        self.value = Dense(C, d, rng=rng)
        self.key_proj = parameter(rng.normal(0.0, 1.0 / math.sqrt(N), size=(N, k)))
        self.value_proj = parameter(rng.normal(0.0, 1.0 / math.sqrt(N), size=(N, k)))
        self.out = Dense(d, C, rng=rng)
        self.last_attention: np.ndarray | None = None

    def attention(self, x: Tensor) -> Tensor:
        """Token sequence ``[B, N, C]`` to context sequence ``[B, N, d_k]``."""
        return linear_attention(x, self)

    def forward(self, f: Tensor) -> Tensor:
        cfg = self.config
        x = flatten_spatial(f, cfg.height, cfg.width)
        z = linear_attention(x, self)
        return unflatten_spatial(self.out(z), cfg.height, cfg.width)


def linear_attention(x: Tensor, params: CAGM) -> Tensor:
    d_k = params.config.d_k
    if x.shape[1] != params.config.n_tokens:
        raise DimensionError(f"sequence length {x.shape[1]} != configured {params.config.n_tokens}")
    q = params.query(x)
    k = params.key(x)
    v = params.value(x)
    # [k, N] @ [B, N, d_k] -> [B, k, d_k]
    k_proj = matmul(params.key_proj.transpose(0, 1), k)
    v_proj = matmul(params.value_proj.transpose(0, 1), v)
    logits = matmul(q, k_proj.transpose(-2, -1)) * (1.0 / math.sqrt(d_k))
    a = softmax(logits, axis=-1)
    params.last_attention = a.data
    return matmul(a, v_proj)


def complexity_estimate(config: CagmConfig, batch: int = 1) -> dict[str, int]:
    """Analytic FLOPs of one CAGM forward, multiply and add counted separately.

    Every term is linear in ``N`` for fixed ``k``, ``d_k`` and ``C``.
    """
    N, C, d, k = config.n_tokens, config.channels, config.d_k, config.rank
    terms = {
        "qkv_projection": 3 * (2 * N * C * d + N * d),
        "low_rank_projection": 2 * (2 * k * N * d),
        "attention": attention_flops(N, k, d),
        "output_projection": 2 * N * d * C + N * C,
    }
    terms = {name: batch * v for name, v in terms.items()}
    terms["total"] = sum(terms.values())
    return terms


def attention_flops(n_queries: int, n_keys: int, d_k: int) -> int:
    """Logits, scaling, softmax (exp, sum, divide) and value aggregation."""
    nk = n_queries * n_keys
    return 2 * nk * d_k + nk + 3 * nk + 2 * nk * d_k


def naive_attention_flops(n: int, d_k: int) -> int:
    """Same accounting for full ``N x N`` softmax attention."""
    return 2 * n * n * d_k + n * n + 3 * n * n + 2 * n * n * d_k
