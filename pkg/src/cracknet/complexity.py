"""Parameter, FLOP and latency accounting.

FLOP convention: a multiply and an add count as two operations; each bias
add counts one. Convolutions, dense projections and the attention terms of
the bottleneck are counted; normalization, activations, pooling and
resampling are not.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ContextCrackNet, ModelConfig
from .nn import Module
from .tensor import Tensor, no_grad
from .errors import UsageError

# Reference row for the full model at 448 x 448 (params in millions, GFLOPs, ms on an A40).
PUBLISHED_REFERENCE = {"params_m": 82.05, "gflops": 243.78, "latency_ms": 15.63}


def count_params(model: Module) -> int:
    return model.num_parameters()


def count_flops(model: Module, input_shape) -> int:
    """Analytic FLOPs of one forward pass for ``input_shape`` (``(B, C, H, W)`` for convs).

    Works on the full network and on any layer exposing ``flops(shape)``.
    """
    out = model.flops(tuple(input_shape))
    return int(out[0] if isinstance(out, tuple) else out)


def _conv(ci: int, co: int, k: int) -> int:
    return co * (ci * k * k + 1)


def _bn(c: int) -> int:
    return 2 * c


def analytic_param_count(config: ModelConfig) -> int:
    """Parameter count from the configuration alone (no model instantiated)."""
    c0, c1, c2, c3 = config.widths
    total = _conv(config.in_channels, c0, 7) + _bn(c0)
    prev = c0
    for co, depth, stride in zip((c1, c2, c3), config.blocks_per_stage, (1, 2, 2)):
        for i in range(depth):
            s = stride if i == 0 else 1
            if config.block == "basic":
                total += _conv(prev, co, 3) + _bn(co) + _conv(co, co, 3) + _bn(co)
            else:
                mid = co // 4
                total += (_conv(prev, mid, 1) + _bn(mid) + _conv(mid, mid, 3) + _bn(mid)
                          + _conv(mid, co, 1) + _bn(co))
            if s != 1 or prev != co:
                total += _conv(prev, co, 1) + _bn(co)
            prev = co
    if config.use_cagm:
        cg = config.cagm
        C, d = cg.channels, cg.d_k
        total += 3 * (C * d + d) + 2 * cg.n_tokens * cg.rank + d * C + C
    for rc in config.rfem:
        if config.use_rfem:
            total += _conv(rc.c_enc, rc.f_int, 1) + _conv(rc.c_dec, rc.f_int, 1) + _conv(rc.f_int, 1, 1)
        total += _conv(rc.c_enc + rc.c_dec, rc.c_out, 3) + _bn(rc.c_out)
        total += _conv(rc.c_out, rc.c_out, 3) + _bn(rc.c_out)
    total += _conv(c0, config.num_classes, 1)
    return total


def measure_latency(model: ContextCrackNet, input_size: tuple[int, int] | None = None,
                    runs: int = 20, warmup: int = 3, seed: int = 0) -> dict:
    """Wall-clock ms of single-image eval-mode forwards after ``warmup`` passes."""
    if runs < 1:
        raise UsageError("runs must be >= 1")
    if warmup < 3:
        raise UsageError("at least 3 warm-up passes are required")
    cfg = model.config
    h, w = input_size or (cfg.height, cfg.width)
    x = Tensor(np.random.default_rng(seed).normal(size=(1, cfg.in_channels, h, w)))
    model.eval()
    times = []
    with no_grad():
        for _ in range(warmup):
            model(x)
        for _ in range(runs):
            t0 = time.perf_counter()
            model(x)
            times.append((time.perf_counter() - t0) * 1e3)
    return {
        "mean_ms": statistics.fmean(times),
        "min_ms": min(times),
        "max_ms": max(times),
        "std_ms": statistics.pstdev(times),
        "runs": runs,
        "warmup": warmup,
    }


@dataclass
class ComplexityReport:
    params: int
    flops: int
    input_shape: tuple
    latency: dict | None = None
    config: dict = field(default_factory=dict)

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    @property
    def gmacs(self) -> float:
        return self.flops / 2e9

    def reference_deviation(self) -> dict:
        ref = PUBLISHED_REFERENCE
        return {
            "params_m": self.params / 1e6,
            "params_ref_m": ref["params_m"],
            "params_dev_pct": 100.0 * (self.params / 1e6 - ref["params_m"]) / ref["params_m"],
            "gflops": self.gflops,
            "gflops_ref": ref["gflops"],
            "gflops_dev_pct": 100.0 * (self.gflops - ref["gflops"]) / ref["gflops"],
            "gmacs": self.gmacs,
            "gmacs_dev_pct": 100.0 * (self.gmacs - ref["gflops"]) / ref["gflops"],
        }

    def to_dict(self) -> dict:
        d = {
            "params": self.params,
            "flops": self.flops,
            "gflops": self.gflops,
            "gmacs": self.gmacs,
            "flop_convention": "multiply and add counted separately (MACs = FLOPs / 2); "
                               "conv, dense and attention terms only",
            "input_shape": list(self.input_shape),
            "latency": self.latency,
            "reference_comparison": self.reference_deviation(),
            "config": self.config,
        }
        return d

    def to_text(self) -> str:
        dev = self.reference_deviation()
        lines = [
            f"input            {'x'.join(str(s) for s in self.input_shape)}",
            f"parameters       {self.params:,} ({dev['params_m']:.2f} M; reference "
            f"{dev['params_ref_m']:.2f} M, {dev['params_dev_pct']:+.1f}%)",
            f"GFLOPs           {self.gflops:.2f} (reference {dev['gflops_ref']:.2f}, "
            f"{dev['gflops_dev_pct']:+.1f}%)",
            f"GMACs            {self.gmacs:.2f} ({dev['gmacs_dev_pct']:+.1f}% vs reference GFLOPs)",
        ]
        if self.latency:
            lat = self.latency
            lines.append(f"latency (ms)     mean {lat['mean_ms']:.2f}  min {lat['min_ms']:.2f}  "
                         f"max {lat['max_ms']:.2f}  over {lat['runs']} runs")
        return "\n".join(lines)


def complexity_report(model: ContextCrackNet, batch: int = 1, runs: int | None = None) -> ComplexityReport:
    cfg = model.config
    shape = (batch, cfg.in_channels, cfg.height, cfg.width)
    latency = measure_latency(model, runs=runs) if runs else None
    return ComplexityReport(count_params(model), count_flops(model, shape), shape, latency, cfg.to_dict())


def config_report(config: ModelConfig, batch: int = 1) -> ComplexityReport:
    """Params and FLOPs for a config without running it (used for full-width sizes)."""
    model = ContextCrackNet(config)
    shape = (batch, config.in_channels, config.height, config.width)
    return ComplexityReport(count_params(model), count_flops(model, shape), shape, None, config.to_dict())
