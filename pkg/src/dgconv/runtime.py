"""Inference path: dynamic index plans, MAC accounting, micro-benchmarks.

An index plan freezes one sample's gating decisions into pre-gathered
filter slices so the sparse convolution runs as a dense one on a reduced
channel set. Plan execution reproduces the reference evaluation forward
bit for bit because both sides run the identical gather-scale-convolve
sequence on identical arrays.

MAC counts follow the standard conv cost k^2*C'*C*H'*W' and the DGC
decomposition into per-head saliency cost 2*C^2/d and reduced conv cost
k^2*kept*(C'/H)*H'*W'.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .core import ConvFilter, conv2d_forward, conv_output_size
from .dgc import (
    DgcLayer,
    GateDecision,
    _gathered_head_forward,
    channel_shuffle,
    gather_filters,
    headwise_gate,
    kept_channels,
    saliency_forward,
    sgc_forward,
)

__all__ = ["LayerShape", "MacReport", "mac_dense", "mac_sgc", "mac_dgc",
           "IndexPlan", "build_index_plan", "plan_from_forward",
           "execute_plan", "BenchResult", "run_benchmark",
           "BENCH_CSV_HEADER", "bench_csv_rows", "read_bench_csv"]


# ---------------------------------------------------------------------------
# MAC accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerShape:
    in_channels: int
    out_channels: int
    kernel_size: int
    out_h: int
    out_w: int

    def __post_init__(self) -> None:
        for name in ("in_channels", "out_channels", "kernel_size", "out_h",
                     "out_w"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_input(cls, in_channels: int, out_channels: int, kernel_size: int,
                   h: int, w: int, stride: int = 1,
                   padding: int = 0) -> "LayerShape":
        return cls(in_channels, out_channels, kernel_size,
                   conv_output_size(h, kernel_size, stride, padding),
                   conv_output_size(w, kernel_size, stride, padding))

    @property
    def spatial(self) -> int:
        return self.out_h * self.out_w


def mac_dense(shape: LayerShape) -> int:
    """Multiply-accumulates of a dense convolution: k^2 * C' * C * H' * W'."""
    return (shape.kernel_size ** 2 * shape.out_channels * shape.in_channels
            * shape.spatial)


def mac_sgc(shape: LayerShape, groups: int) -> int:
    if shape.in_channels % groups or shape.out_channels % groups:
        raise ValueError(f"{groups} groups do not divide the channel counts")
    return mac_dense(shape) // groups


@dataclass(frozen=True)
class MacReport:
    dense_macs: int
    saliency_macs: int
    conv_macs: int

    def __post_init__(self) -> None:
        if min(self.dense_macs, self.saliency_macs, self.conv_macs) < 0:
            raise ValueError("MAC counts must be non-negative")

    @property
    def total_macs(self) -> int:
        return self.saliency_macs + self.conv_macs

    @property
    def saving_ratio(self) -> float:
        return self.dense_macs / self.total_macs


def mac_dgc(shape: LayerShape, prune_rate: float, heads: int, squeeze: int,
            measured_kept: list[float] | None = None) -> MacReport:
    """DGC cost model. Head-wise mode derives the kept-channel count from
    the pruning rate; global mode passes the measured per-head averages."""
    c, cp = shape.in_channels, shape.out_channels
    if cp % heads:
        raise ValueError(f"{heads} heads do not divide {cp} output channels")
    saliency = heads * round(2 * c * c / squeeze)
    if measured_kept is None:
        kept = [kept_channels(c, prune_rate)] * heads
    else:
        if len(measured_kept) != heads:
            raise ValueError(f"need one measured count per head, got "
                             f"{len(measured_kept)} for {heads} heads")
        kept = list(measured_kept)
    conv = round(sum(shape.kernel_size ** 2 * kc * (cp // heads) * shape.spatial
                     for kc in kept))
    return MacReport(mac_dense(shape), saliency, conv)


# ---------------------------------------------------------------------------
# Index plans
# ---------------------------------------------------------------------------

@dataclass
class IndexPlan:
    """One sample's frozen gating for one DGC layer: sorted channel indices,
    amplifications, and pre-gathered filter banks, per head."""

    indices: list[np.ndarray]
    amplify: list[np.ndarray]
    filters: list[np.ndarray]
    in_channels: int
    stride: int
    padding: int
    timestamp: float = field(default_factory=time.time)

    @property
    def heads(self) -> int:
        return len(self.indices)


def build_index_plan(layer: DgcLayer, decisions: list[GateDecision]) -> IndexPlan:
    """Freeze per-head decisions against the layer's current filter banks.

    Decisions that no longer fit the layer (index out of range, head count
    drift) are stale and rejected.
    """
    cfg = layer.config
    if len(decisions) != cfg.heads:
        raise ValueError(f"plan needs {cfg.heads} head decisions, "
                         f"got {len(decisions)}")
    indices, amps, banks = [], [], []
    for head, dec in zip(layer.heads, decisions):
        if dec.indices.size and (dec.indices[0] < 0
                                 or dec.indices[-1] >= cfg.in_channels):
            raise ValueError(f"stale decision: channel indices {dec.indices} "
                             f"exceed {cfg.in_channels} input channels")
        indices.append(dec.indices.copy())
        amps.append(dec.amplify.copy())
        banks.append(gather_filters(head.filters, dec.indices))
    return IndexPlan(indices, amps, banks, cfg.in_channels, cfg.stride,
                     cfg.padding)


def plan_from_forward(layer: DgcLayer, fwd, sample: int) -> IndexPlan:
    """Plan for one sample of a completed dgc_forward pass."""
    return build_index_plan(
        layer, [fwd.decisions(h)[sample] for h in range(layer.config.heads)])


def execute_plan(plan: IndexPlan, x_sample: np.ndarray) -> np.ndarray:
    """Run the planned sparse convolution on a (C, H, W) sample.

    Performs exactly the gather-scale-convolve sequence of the reference
    evaluation forward, so outputs are equal to it bit for bit.
    """
    if x_sample.ndim != 3 or x_sample.shape[0] != plan.in_channels:
        raise ValueError(f"plan expects ({plan.in_channels}, H, W) input, "
                         f"got {x_sample.shape}")
    outs = []
    for idx, amp, bank in zip(plan.indices, plan.amplify, plan.filters):
        co, _, k, _ = bank.shape
        if idx.size == 0:
            oh = conv_output_size(x_sample.shape[1], k, plan.stride, plan.padding)
            ow = conv_output_size(x_sample.shape[2], k, plan.stride, plan.padding)
            outs.append(np.zeros((co, oh, ow)))
            continue
        xs = x_sample[idx] * amp[:, None, None]
        outs.append(conv2d_forward(xs[None],
                                   ConvFilter(bank, plan.stride, plan.padding))[0])
    return channel_shuffle(np.concatenate(outs)[None], plan.heads)[0]


# ---------------------------------------------------------------------------
# Benchmarks
# ---------------------------------------------------------------------------

MIN_SAMPLE_SECONDS = 2e-4


@dataclass
class BenchResult:
    variant: str
    shape: str
    threads: int
    repeats: int
    inner_loops: int
    median_s: float
    iqr_s: float
    mean_s: float
    components_s: dict[str, float] = field(default_factory=dict)
    note: str = ""


def _limit_threads(threads: int | None):
    if threads is None:
        import contextlib
        return contextlib.nullcontext(), 0
    try:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=threads), threads
    except ImportError:
        import contextlib
        return contextlib.nullcontext(), threads


def _time_callable(fn, repeats: int, warmup: int) -> tuple[np.ndarray, int, str]:
    """Warm up, auto-scale the inner loop until one sample exceeds the
    timer floor, then collect per-repetition seconds."""
    for _ in range(warmup):
        fn()
    inner, note = 1, ""
    while True:
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        elapsed = time.perf_counter() - t0
        if elapsed >= MIN_SAMPLE_SECONDS or inner >= 4096:
            break
        inner *= 2
    if inner > 1:
        note = f"inner loop scaled to {inner} for timer resolution"
    samples = np.empty(repeats)
    for i in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        samples[i] = (time.perf_counter() - t0) / inner
    return samples, inner, note


def _median_iqr(samples: np.ndarray) -> tuple[float, float]:
    q1, med, q3 = np.percentile(samples, [25, 50, 75])
    return float(med), float(q3 - q1)


def _dgc_instrumented(x, heads_params, prune_rate, stride, padding):
    """One batch-1 DGC forward, returning (total, saliency, index, conv)
    seconds; concat + shuffle are accounted to the conv phase so the three
    components partition the whole call."""
    sal = idx_t = conv = 0.0
    outs = []
    start = time.perf_counter()
    for head in heads_params:
        t0 = time.perf_counter()
        g = saliency_forward(x, head)[0]
        t1 = time.perf_counter()
        dec = headwise_gate(g, prune_rate)
        xs = x[0, dec.indices] * dec.amplify[:, None, None]
        bank = gather_filters(head.filters, dec.indices)
        t2 = time.perf_counter()
        outs.append(conv2d_forward(xs[None],
                                   ConvFilter(bank, stride, padding))[0])
        t3 = time.perf_counter()
        sal += t1 - t0
        idx_t += t2 - t1
        conv += t3 - t2
    channel_shuffle(np.concatenate(outs)[None], len(heads_params))
    end = time.perf_counter()
    conv += end - t3
    return end - start, sal, idx_t, conv


def _bench_dgc(x, layer, prune_rate, stride, pad, repeats, warmup):
    args = (x, layer.heads, prune_rate, stride, pad)
    for _ in range(warmup):
        _dgc_instrumented(*args)
    rows = np.array([_dgc_instrumented(*args) for _ in range(repeats)])
    med, iqr = _median_iqr(rows[:, 0])
    means = rows.mean(axis=0)
    components = {"saliency": float(means[1]), "index": float(means[2]),
                  "conv": float(means[3])}
    return med, iqr, float(means[0]), components


def run_benchmark(shapes: list[tuple[int, int, int, int]],
                  variants: list[str] | None = None,
                  threads: int | None = 1, repeats: int = 30,
                  warmup: int = 5, groups: int = 4, heads: int = 4,
                  prune_rate: float = 0.75,
                  seed: int = 0) -> list[BenchResult]:
    """Time dense, SGC, and DGC batch-1 forwards on (C, C', H, k) shapes.

    DGC runs are instrumented so the reported saliency/index/conv
    components partition the measured call; all variants of a shape see
    the same input tensor.
    """
    from .dgc import DgcLayerConfig, init_dgc_layer

    if variants is None:
        variants = ["dense", "sgc", "dgc"]
    if repeats < 1:
        raise ValueError("repeats must be positive")
    rng = np.random.default_rng(seed)
    ctx, recorded_threads = _limit_threads(threads)
    results = []
    with ctx:
        for c, cp, hw, k in shapes:
            pad = k // 2
            desc = f"{c}x{cp}x{hw}x{hw}k{k}"
            x = rng.normal(size=(1, c, hw, hw))
            squeeze = max(d for d in (16, 8, 4, 2, 1) if c % d == 0)
            layer = None
            if "dgc" in variants:
                layer = init_dgc_layer(
                    DgcLayerConfig(c, cp, k, 1, pad, heads=heads,
                                   squeeze=squeeze, prune_rate=prune_rate),
                    rng)
            dense_filt = ConvFilter(rng.normal(size=(cp, c, k, k)), 1, pad)
            group_w = rng.normal(size=(cp, c // groups, k, k))
            for variant in variants:
                if variant == "dgc":
                    med, iqr, mean, components = _bench_dgc(
                        x, layer, prune_rate, 1, pad, repeats, warmup)
                    results.append(BenchResult(variant, desc, recorded_threads,
                                               repeats, 1, med, iqr, mean,
                                               components))
                    continue
                if variant == "dense":
                    def fn():
                        conv2d_forward(x, dense_filt)
                elif variant == "sgc":
                    def fn():
                        sgc_forward(x, group_w, groups, 1, pad)
                else:
                    raise ValueError(f"unknown benchmark variant {variant!r}")
                samples, inner, note = _time_callable(fn, repeats, warmup)
                med, iqr = _median_iqr(samples)
                results.append(BenchResult(variant, desc, recorded_threads,
                                           repeats, inner, med, iqr,
                                           float(samples.mean()), {}, note))
    return results


BENCH_CSV_HEADER = ("variant,shape,threads,repeats,inner_loops,median_s,"
                    "iqr_s,mean_s,saliency_s,index_s,conv_s,note")


def bench_csv_rows(results: list[BenchResult]) -> list[str]:
    rows = []
    for r in results:
        comp = [r.components_s.get(key, float("nan"))
                for key in ("saliency", "index", "conv")]
        rows.append(f"{r.variant},{r.shape},{r.threads},{r.repeats},"
                    f"{r.inner_loops},{r.median_s!r},{r.iqr_s!r},"
                    f"{r.mean_s!r},"
                    + ",".join(repr(float(v)) for v in comp) + f",{r.note}")
    return rows


def read_bench_csv(lines: list[str]) -> list[BenchResult]:
    """Parse bench_csv_rows output (header and comment lines skipped)."""
    out = []
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#") or line.startswith("variant,"):
            continue
        parts = line.split(",")
        if len(parts) != len(BENCH_CSV_HEADER.split(",")):
            raise ValueError(f"benchmark row has {len(parts)} columns: {line}")
        comp_vals = [float(v) for v in parts[8:11]]
        components = {k: v for k, v in zip(("saliency", "index", "conv"),
                                           comp_vals) if not math.isnan(v)}
        out.append(BenchResult(parts[0], parts[1], int(parts[2]),
                               int(parts[3]), int(parts[4]), float(parts[5]),
                               float(parts[6]), float(parts[7]), components,
                               parts[11]))
    return out
