"""Exact parameter and operation counts, plus a wall-clock throughput probe.

Counting conventions (all integer arithmetic):

* conv / deconv: ``params = Kw*Kh*Cin*Cout (+ Cout bias)`` and
  ``flops = params * Wout * Hout``.  A transposed convolution is counted as a
  convolution evaluated on its output grid.
* batch norm: ``2*C`` learned parameters (running statistics excluded) and one
  operation per output element.
* activation, add: one operation per output element.
* pool, bilinear up-sampling: ``window`` operations per output element.
* concat: free.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass

import numpy as np

from .layers import LayerDescriptor

KERNEL_KINDS = ("conv", "deconv")
ELEMENTWISE_KINDS = ("bn", "activation", "add")
WINDOW_KINDS = ("pool", "upsample")
KINDS = KERNEL_KINDS + ELEMENTWISE_KINDS + WINDOW_KINDS + ("concat",)


class DescriptorError(ValueError):
    """A layer descriptor lacks a field its kind requires."""


def _need(d: LayerDescriptor, *names):
    missing = [n for n in names if getattr(d, n) is None]
    if missing:
        raise DescriptorError(f"layer {d.name!r} ({d.kind}) is missing {', '.join(missing)}")


def layer_params(d: LayerDescriptor) -> int:
    if d.kind not in KINDS:
        raise DescriptorError(f"layer {d.name!r}: unknown kind {d.kind!r}")
    if d.kind in KERNEL_KINDS:
        _need(d, "k_w", "k_h", "c_in", "c_out")
        return d.k_w * d.k_h * d.c_in * d.c_out + (d.c_out if d.has_bias else 0)
    if d.kind == "bn":
        _need(d, "c_out")
        return 2 * d.c_out
    return 0


def layer_flops(d: LayerDescriptor) -> int:
    if d.kind not in KINDS:
        raise DescriptorError(f"layer {d.name!r}: unknown kind {d.kind!r}")
    _need(d, "out_w", "out_h")
    outputs = d.out_w * d.out_h
    if d.kind in KERNEL_KINDS:
        return layer_params(d) * outputs
    _need(d, "c_out")
    if d.kind in ELEMENTWISE_KINDS:
        return d.c_out * outputs
    if d.kind in WINDOW_KINDS:
        _need(d, "window")
        return d.window * d.c_out * outputs
    return 0


@dataclass(frozen=True)
class ReportRow:
    name: str
    kind: str
    params: int
    flops: int


@dataclass
class ComplexityReport:
    rows: list[ReportRow]
    params: int
    flops: int
    input_size: tuple[int, int]  # (H, W)

    def to_text(self) -> str:
        width = max([len(r.name) for r in self.rows] + [5])
        h, w = self.input_size
        lines = [f"input {h}x{w}",
                 f"{'layer':<{width}}  {'kind':<10} {'params':>12} {'flops':>16}"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}  {r.kind:<10} {r.params:>12,} {r.flops:>16,}")
        lines.append(f"{'TOTAL':<{width}}  {'':<10} {self.params:>12,} {self.flops:>16,}")
        lines.append(f"params {self.params / 1e6:.2f} M, flops {self.flops / 1e9:.2f} G")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["name", "params", "flops"])
        for r in self.rows:
            wr.writerow([r.name, r.params, r.flops])
        wr.writerow(["TOTAL", self.params, self.flops])
        return buf.getvalue()


def report_from_descriptors(descs, input_size) -> ComplexityReport:
    rows = [ReportRow(d.name, d.kind, layer_params(d), layer_flops(d)) for d in descs]
    return ComplexityReport(rows, sum(r.params for r in rows), sum(r.flops for r in rows),
                            tuple(int(v) for v in input_size))


def model_report(model, input_size=None) -> ComplexityReport:
    """Walk the model graph in topological order and count every layer.

    ``input_size`` is ``(H, W)``; it defaults to the model's configured size.
    """
    if input_size is None:
        input_size = model.cfg.input_size
    h, w = (int(v) for v in input_size)
    descs, _ = model.describe((3, h, w))
    return report_from_descriptors(descs, (h, w))


@dataclass(frozen=True)
class FpsResult:
    mean: float
    std: float
    times: tuple[float, ...]

    def __str__(self):
        return f"{self.mean:.2f} FPS (std {self.std:.2f}, {len(self.times)} iters)"


def bench_fps(model, input_size=None, warmup: int = 2, iters: int = 10, seed: int = 0) -> FpsResult:
    """Single-image eval-mode forward passes; the first ``warmup`` runs are discarded."""
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    if warmup < 0:
        raise ValueError(f"warmup must be >= 0, got {warmup}")
    if input_size is None:
        input_size = model.cfg.input_size
    h, w = input_size
    x = np.random.default_rng(seed).random((1, 3, h, w), dtype=np.float32)
    was_training = model.training
    model.eval()
    try:
        for _ in range(warmup):
            model.forward(x, check_finite=False)
        times = []
        for _ in range(iters):
            t0 = time.perf_counter()
            model.forward(x, check_finite=False)
            times.append(time.perf_counter() - t0)
    finally:
        model.train(was_training)
    fps = 1.0 / np.asarray(times)
    std = float(fps.std(ddof=1)) if iters > 1 else 0.0
    mean = float(fps.mean())
    if not (math.isfinite(mean) and mean > 0):
        raise RuntimeError(f"non-positive throughput measured: {mean}")
    return FpsResult(mean, std, tuple(times))
