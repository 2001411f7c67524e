"""Trainable layers: convolution, batch norm, dense, pooling, upsampling."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateStatisticsError, DimensionError, UsageError
from .tensor import Tensor, make_op


class Module:
    """Minimal module container.

    Parameters are ``Tensor`` attributes with ``requires_grad=True``;
    sub-modules may be attributes or lists of modules. Iteration follows
    attribute assignment order, which fixes the checkpoint layout.
    """

    training = True
    buffer_names: tuple[str, ...] = ()

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(
                isinstance(v, Module) for v in value
            ):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = prefix + name
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def state_dict(self, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
        """Parameters and buffers in declaration order."""
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, value in self._children():
            full = prefix + name
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out[full] = value.data
            else:
                out.update(value.state_dict(full + "."))
        for name in self.buffer_names:
            out[prefix + name] = getattr(self, name)
        return out

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        own = self.state_dict()
        if strict:
            missing = [k for k in own if k not in state]
            extra = [k for k in state if k not in own]
            if missing or extra:
                raise UsageError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for key, arr in own.items():
            if key not in state:
                continue
            src = np.asarray(state[key], dtype=np.float64)
            if src.shape != arr.shape:
                raise DimensionError(f"{key}: shape {src.shape} != {arr.shape}")
            arr[...] = src

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# -- convolution -----------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over ``[B, C_in, H, W]`` with zero padding (im2col + GEMM)."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    Co, Ci, k, k2 = weight.shape
    if C != Ci:
        raise DimensionError(f"conv2d: input has {C} channels, weight expects {Ci}")
    Ho, Wo = conv_output_size(H, k, stride, padding), conv_output_size(W, k2, stride, padding)
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d: input {H}x{W} too small for kernel {k} (padding {padding})")
    wd = weight.data
    wm = wd.reshape(Co, -1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    if k == 1 and k2 == 1 and stride == 1 and padding == 0:
        xd = x.data
        out = np.einsum("oc,bchw->bohw", wm, xd, optimize=True)
        if bias is not None:
            out += bias.data[None, :, None, None]

        def backward(g):
            gx = np.einsum("oc,bohw->bchw", wm, g, optimize=True)
            gw = np.einsum("bohw,bchw->oc", g, xd, optimize=True).reshape(wd.shape)
            grads = [gx, gw]
            if bias is not None:
                grads.append(g.sum(axis=(0, 2, 3)))
            return grads

        return make_op(out, parents, backward, "conv2d")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (k, k2), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, Ci * k * k2)
    out = cols @ wm.T
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, Co)
        gw = (gm.T @ cols).reshape(wd.shape)
        dcols = (gm @ wm).reshape(B, Ho, Wo, Ci, k, k2).transpose(0, 3, 4, 5, 1, 2)
        gxp = np.zeros(xp.shape)
        for i in range(k):
            for j in range(k2):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, i, j]
        gx = gxp[:, :, padding:padding + H, padding:padding + W]
        grads = [gx, gw]
        if bias is not None:
            grads.append(gm.sum(axis=0))
        return grads

    return make_op(np.ascontiguousarray(out), parents, backward, "conv2d")


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride, self.padding = stride, padding
        fan_in = c_in * k * k
        self.weight = parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k)))
        self.bias = parameter(np.zeros(c_out))

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def output_shape(self, shape):
        B, _, H, W = shape
        return (B, self.c_out, conv_output_size(H, self.k, self.stride, self.padding),
                conv_output_size(W, self.k, self.stride, self.padding))

    def flops(self, shape) -> tuple[int, tuple]:
        """``2*k*k*C_in`` per output element plus one bias add; returns (flops, output shape)."""
        out = self.output_shape(shape)
        B, Co, Ho, Wo = out
        return B * (2 * self.k * self.k * self.c_in * Co * Ho * Wo + Co * Ho * Wo), out

    def __repr__(self):
        return f"Conv2d({self.c_in}, {self.c_out}, k={self.k}, stride={self.stride}, padding={self.padding})"


# -- batch normalization ---------------------------------------------------

def batchnorm2d(x: Tensor, layer: "BatchNorm2d", mode: str | None = None) -> Tensor:
    if mode is None:
        mode = "train" if layer.training else "eval"
    if x.ndim != 4 or x.shape[1] != layer.num_features:
        raise DimensionError(f"batchnorm2d expects [B,{layer.num_features},H,W], got {x.shape}")
    gamma, beta = layer.gamma, layer.beta
    g4 = gamma.data[None, :, None, None]
    xd = x.data
    axes = (0, 2, 3)

    if mode == "train":
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        if m < 2:
            raise DegenerateStatisticsError(
                f"batch statistics need at least 2 values per channel, got {m}")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + layer.eps)
        xhat = (xd - mu[None, :, None, None]) * inv_std[None, :, None, None]
        mom = layer.momentum
        layer.running_mean[...] = (1 - mom) * layer.running_mean + mom * mu
        layer.running_var[...] = (1 - mom) * layer.running_var + mom * var * m / (m - 1)

        def backward(g):
            dxhat = g * g4
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            gx = inv_std[None, :, None, None] / m * (m * dxhat - s1 - xhat * s2)
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    elif mode == "eval":
        inv_std = 1.0 / np.sqrt(layer.running_var + layer.eps)
        xhat = (xd - layer.running_mean[None, :, None, None]) * inv_std[None, :, None, None]

        def backward(g):
            return g * g4 * inv_std[None, :, None, None], (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        raise UsageError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")

    out = xhat * g4 + beta.data[None, :, None, None]
    return make_op(out, (x, gamma, beta), backward, "batchnorm2d")


class BatchNorm2d(Module):
    buffer_names = ("running_mean", "running_var")

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        self.num_features = num_features
        self.eps, self.momentum = eps, momentum
        self.gamma = parameter(np.ones(num_features))
        self.beta = parameter(np.zeros(num_features))
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm2d(x, self)


# -- dense -----------------------------------------------------------------

class Dense(Module):
    """``y = x @ W + b`` over the last axis; weight stored as ``[in, out]``."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_in, self.d_out = d_in, d_out
        bound = 1.0 / np.sqrt(d_in)
        self.weight = parameter(rng.uniform(-bound, bound, size=(d_in, d_out)))
        if bias:
            self.bias = parameter(rng.uniform(-bound, bound, size=d_out))
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"Dense expects last dim {self.d_in}, got {x.shape}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y

    def flops(self, shape) -> tuple[int, tuple]:
        rows = int(np.prod(shape[:-1], dtype=np.int64))
        per_row = 2 * self.d_in * self.d_out + (self.d_out if self.bias is not None else 0)
        return rows * per_row, tuple(shape[:-1]) + (self.d_out,)


# -- pooling / resampling --------------------------------------------------

def maxpool2d(x: Tensor, k: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    B, C, H, W = x.shape
    Ho, Wo = conv_output_size(H, k, stride, padding), conv_output_size(W, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    flat = win.reshape(B, C, Ho, Wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros(xp.shape)
        for o in range(k * k):
            i, j = divmod(o, k)
            gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += g * (arg == o)
        return (gxp[:, :, padding:padding + H, padding:padding + W],)

    return make_op(out, (x,), backward, "maxpool2d")


def interp_matrix(n_in: int, n_out: int, mode: str = "bilinear") -> np.ndarray:
    """Row ``i`` holds the weights that output sample ``i`` takes from the input.

    Bilinear follows the half-pixel (align_corners=False) convention with
    edge clamping; nearest picks ``floor(i * n_in / n_out)``.
    """
    M = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    if mode == "nearest":
        M[rows, np.minimum(rows * n_in // n_out, n_in - 1)] = 1.0
        return M
    if mode != "bilinear":
        raise UsageError(f"unknown interpolation mode {mode!r}")
    src = np.maximum((rows + 0.5) * n_in / n_out - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    np.add.at(M, (rows, i0), 1.0 - lam)
    np.add.at(M, (rows, i1), lam)
    return M


def resample(x: Tensor, out_h: int, out_w: int, mode: str = "bilinear") -> Tensor:
    H, W = x.shape[-2:]
    mh, mw = interp_matrix(H, out_h, mode), interp_matrix(W, out_w, mode)
    out = mh @ x.data @ mw.T
    return make_op(out, (x,), lambda g: (mh.T @ g @ mw,), "resample")


def upsample2x(x: Tensor, mode: str = "bilinear") -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"upsample2x expects [B,C,H,W], got {x.shape}")
    return resample(x, 2 * x.shape[2], 2 * x.shape[3], mode)
