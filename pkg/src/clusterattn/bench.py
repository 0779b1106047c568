"""Complexity verification: analytic flop tallies plus wall-time scaling.

The flop model counts one multiply-add as 2 operations and assigns a flat
8-op cost per softmax element (exp, subtract-max, divide, reductions).
Those constants only shift log-log intercepts; the asymptotic assertions
ride on the exponents. Timing runs pin the BLAS pools to one thread and
report the median (and interquartile range) over several repetitions of
dedicated single-head numpy kernels whose arithmetic matches the tally
term for term.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

MA = 2  # ops per multiply-add
SOFTMAX_OPS = 8  # ops per softmax element

MECHANISMS = ("self_attention", "rca")

CSV_HEADER = "mechanism,HW,K,D,T,flops,time_ns_median,time_ns_iqr"

AXES = {"HW": "hw", "K": "k", "T": "t"}


def flop_terms(mechanism: str, hw: int, k: int, d: int, t: int
               ) -> dict[str, tuple[int, dict[str, int]]]:
    """Per-term (ops, exponent-per-axis) breakdown of one forward pass."""
    if mechanism == "self_attention":
        return {
            "proj_qkv": (3 * MA * hw * d * d, {"HW": 1}),
            "logits": (MA * hw * hw * d, {"HW": 2}),
            "softmax": (SOFTMAX_OPS * hw * hw, {"HW": 2}),
            "aggregate": (MA * hw * hw * d, {"HW": 2}),
        }
    if mechanism == "rca":
        return {
            "proj_kv": (2 * MA * hw * d * d, {"HW": 1}),
            "proj_q": (t * MA * k * d * d, {"K": 1, "T": 1}),
            "logits": (t * MA * k * hw * d, {"HW": 1, "K": 1, "T": 1}),
            "softmax": (t * SOFTMAX_OPS * k * hw, {"HW": 1, "K": 1, "T": 1}),
            "m_step": (t * MA * k * hw * d, {"HW": 1, "K": 1, "T": 1}),
        }
    raise ValueError(f"unknown mechanism {mechanism!r} (expected one of {MECHANISMS})")


def flop_total(mechanism: str, hw: int, k: int, d: int, t: int) -> int:
    return sum(ops for ops, _ in flop_terms(mechanism, hw, k, d, t).values())


@dataclass(frozen=True)
class CostSample:
    mechanism: str
    hw: int
    k: int
    d: int
    t: int
    flops: int
    time_ns_median: int
    time_ns_iqr: int

    def __post_init__(self):
        if self.flops <= 0 or self.time_ns_median <= 0:
            raise ValueError("flop tally and median time must be positive")

    @property
    def unstable(self) -> bool:
        return self.time_ns_iqr > 0.2 * self.time_ns_median

    def csv_row(self) -> str:
        return (f"{self.mechanism},{self.hw},{self.k},{self.d},{self.t},"
                f"{self.flops},{self.time_ns_median},{self.time_ns_iqr}")

    @classmethod
    def from_csv_row(cls, row: str) -> "CostSample":
        parts = row.strip().split(",")
        if len(parts) != 8:
            raise ValueError(f"bad benchmark CSV row: {row!r}")
        return cls(mechanism=parts[0], hw=int(parts[1]), k=int(parts[2]),
                   d=int(parts[3]), t=int(parts[4]), flops=int(parts[5]),
                   time_ns_median=int(parts[6]), time_ns_iqr=int(parts[7]))


# ---------------------------------------------------------------------------
# kernels (single head, no biases; arithmetic mirrors the flop model)


def _self_attention_kernel(x, wq, wk, wv):
    q = x @ wq
    k = x @ wk
    v = x @ wv
    logits = q @ k.T
    logits -= logits.max(axis=1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=1, keepdims=True)
    return logits @ v


def _rca_kernel(x, c0, wq, wk, wv, t):
    k = x @ wk
    v = x @ wv
    c = c0
    for _ in range(t):
        q = c @ wq
        logits = q @ k.T
        logits -= logits.max(axis=0, keepdims=True)
        np.exp(logits, out=logits)
        logits /= logits.sum(axis=0, keepdims=True)
        c = logits @ v
    return c


def measure_cost(mechanism: str, hw: int, k: int = 8, d: int = 64, t: int = 3,
                 runs: int = 5, warmup: int = 2, target_ns: int = 2_000_000,
                 seed: int = 0) -> CostSample:
    """Analytic tally plus measured median wall time for one configuration.

    Each timing sample loops the kernel enough times to exceed `target_ns`
    so interpreter overhead does not distort small problem sizes.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((hw, d)).astype(np.float32)
    wq = rng.standard_normal((d, d)).astype(np.float32)
    wk = rng.standard_normal((d, d)).astype(np.float32)
    wv = rng.standard_normal((d, d)).astype(np.float32)
    if mechanism == "self_attention":
        def kernel():
            _self_attention_kernel(x, wq, wk, wv)
    elif mechanism == "rca":
        c0 = rng.standard_normal((k, d)).astype(np.float32)

        def kernel():
            _rca_kernel(x, c0, wq, wk, wv, t)
    else:
        raise ValueError(f"unknown mechanism {mechanism!r}")

    with threadpool_limits(limits=1):
        for _ in range(max(warmup, 1)):
            kernel()
        t0 = time.perf_counter_ns()
        kernel()
        est = max(time.perf_counter_ns() - t0, 1)
        inner = max(1, min(10_000, -(-target_ns // est)))
        times = []
        for _ in range(max(runs, 5)):
            t0 = time.perf_counter_ns()
            for _ in range(inner):
                kernel()
            times.append((time.perf_counter_ns() - t0) / inner)
    q25, q50, q75 = np.percentile(times, [25, 50, 75])
    return CostSample(mechanism=mechanism, hw=hw, k=k, d=d, t=t,
                      flops=flop_total(mechanism, hw, k, d, t),
                      time_ns_median=max(1, int(round(q50))),
                      time_ns_iqr=int(round(q75 - q25)))


# ---------------------------------------------------------------------------
# scaling fits


@dataclass(frozen=True)
class ScalingFit:
    mechanism: str
    axis: str
    flop_slope: float  # log-log slope of the dominant-term tally (exact power)
    time_slope: float  # least-squares log-log slope of median wall times
    dominant_exponent: int


def fit_scaling(samples: list[CostSample], axis: str) -> ScalingFit:
    """Slopes along one axis; all other dimensions must be held constant.

    The flop slope is fitted on the sum of the analytically dominant terms
    for the axis (those with the maximal exponent), which is an exact power
    law, so the fitted value equals the exponent up to float rounding.
    """
    if axis not in AXES:
        raise ValueError(f"axis must be one of {sorted(AXES)}, got {axis!r}")
    attr = AXES[axis]
    if len({s.mechanism for s in samples}) != 1:
        raise ValueError("fit_scaling needs samples from a single mechanism")
    xs = [getattr(s, attr) for s in samples]
    if len(set(xs)) < 4:
        raise ValueError(f"need >= 4 distinct {axis} points, got {sorted(set(xs))}")
    if max(xs) < 8 * min(xs):
        raise ValueError(f"{axis} points must span at least an 8x range")
    for other_axis, other_attr in AXES.items():
        if other_axis != axis and len({getattr(s, other_attr) for s in samples}) != 1:
            raise ValueError(f"{other_axis} varies across samples; hold it constant")
    if len({s.d for s in samples}) != 1:
        raise ValueError("D varies across samples; hold it constant")

    mech = samples[0].mechanism
    exponent = max(exps.get(axis, 0)
                   for _, exps in flop_terms(mech, *_dims(samples[0])).values())
    dom = []
    for s in samples:
        terms = flop_terms(mech, *_dims(s))
        dom.append(sum(ops for ops, exps in terms.values()
                       if exps.get(axis, 0) == exponent))
    order = np.argsort(xs)
    log_x = np.log([xs[i] for i in order])
    flop_slope = float(np.polyfit(log_x, np.log([dom[i] for i in order]), 1)[0])
    times = [samples[i].time_ns_median for i in order]
    time_slope = float(np.polyfit(log_x, np.log(times), 1)[0])
    return ScalingFit(mechanism=mech, axis=axis, flop_slope=flop_slope,
                      time_slope=time_slope, dominant_exponent=exponent)


def _dims(s: CostSample) -> tuple[int, int, int, int]:
    return s.hw, s.k, s.d, s.t


# ---------------------------------------------------------------------------
# CSV


def write_csv(samples: list[CostSample], path):
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for s in samples:
            fh.write(s.csv_row() + "\n")


def read_csv(path) -> list[CostSample]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path}: missing benchmark CSV header")
    return [CostSample.from_csv_row(line) for line in lines[1:] if line.strip()]
