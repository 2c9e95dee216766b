"""Inference latency measurement and model size comparison.

Latency is wall-clock (monotonic perf counter) per batch over the given
number of repeats, after one untimed warm-up batch. The timed region
covers the forward pass and, when a PCA model is supplied, the projection
of the raw batch through it. Absolute milliseconds are hardware-bound and
never asserted anywhere; only ordering (min <= avg <= max) and batch
counts are contractual. The timed region runs under a single BLAS thread
by default so numbers are comparable across machines with different core
counts.
"""

from __future__ import annotations

import contextlib
import json
import math
import time
from dataclasses import dataclass, asdict

import numpy as np

from .errors import EmptySet, IncomparableArchitectures, InvalidConfig
from .net import Network, count_params, model_size_bytes
from .pca import PcaModel, project


@dataclass
class LatencyStats:
    batch_size: int
    repeats: int
    sample_count: int
    n_timed_batches: int
    min_ms: float
    avg_ms: float
    max_ms: float
    threads: int
    pca_in_timed_region: bool


@dataclass
class SizeComparison:
    params_with_pca: int
    params_without_pca: int
    bytes_with_pca: int
    bytes_without_pca: int
    degenerate: bool          # True when both nets are identical in size


@dataclass
class BenchReport:
    latencies: list
    sizes: SizeComparison | None = None

    def to_text(self) -> str:
        lines = []
        for stats in self.latencies:
            tag = "with_pca_projection" if stats.pca_in_timed_region else "forward_only"
            lines.append(f"[latency {tag}]")
            lines.append(f"batch_size {stats.batch_size}")
            lines.append(f"repeats {stats.repeats}")
            lines.append(f"sample_count {stats.sample_count}")
            lines.append(f"timed_batches {stats.n_timed_batches}")
            lines.append(f"min_ms {stats.min_ms:.4f}")
            lines.append(f"avg_ms {stats.avg_ms:.4f}")
            lines.append(f"max_ms {stats.max_ms:.4f}")
            lines.append(f"threads {stats.threads}")
            lines.append("")
        if self.sizes is not None:
            lines.append("[size]")
            lines.append(f"params_with_pca {self.sizes.params_with_pca}")
            lines.append(f"params_without_pca {self.sizes.params_without_pca}")
            lines.append(f"bytes_with_pca {self.sizes.bytes_with_pca}")
            lines.append(f"bytes_without_pca {self.sizes.bytes_without_pca}")
            lines.append(f"degenerate {self.sizes.degenerate}")
            lines.append("")
        return "\n".join(lines)

    def to_json(self) -> str:
        payload = {
            "latencies": [asdict(s) for s in self.latencies],
            "sizes": None if self.sizes is None else asdict(self.sizes),
        }
        return json.dumps(payload, indent=2)


def measure_inference(net: Network, rasters, batch_size: int = 64,
                      repeats: int = 5, pca_model: PcaModel | None = None,
                      threads: int = 1) -> LatencyStats:
    """Time eval-mode forward passes batch by batch.

    ``rasters`` is an (N, B, H, W) stack. With a PCA model the projection
    of each raw batch is inside the timed region; without one, batches are
    flattened views and only the forward pass is timed.
    """
    if batch_size < 1 or repeats < 1:
        raise InvalidConfig("batch_size and repeats must be >= 1")
    arr = np.asarray(rasters, dtype=np.float64)
    if arr.ndim != 4:
        raise InvalidConfig("expected an (N, B, H, W) raster stack")
    n = arr.shape[0]
    if n == 0:
        raise EmptySet("cannot benchmark an empty set")

    def run_batch(batch):
        if pca_model is not None:
            batch = project(pca_model, batch)
        flat = batch.reshape(batch.shape[0], -1)
        net.forward(flat, mode="eval")

    n_batches = math.ceil(n / batch_size)
    timings = []
    with _thread_limit(threads):
        run_batch(arr[:batch_size])        # warm-up, untimed
        for _ in range(repeats):
            for s in range(0, n, batch_size):
                batch = arr[s:s + batch_size]
                t0 = time.perf_counter()
                run_batch(batch)
                timings.append((time.perf_counter() - t0) * 1000.0)
    timings = np.asarray(timings)
    return LatencyStats(
        batch_size=batch_size,
        repeats=repeats,
        sample_count=n,
        n_timed_batches=repeats * n_batches,
        min_ms=float(timings.min()),
        avg_ms=float(timings.mean()),
        max_ms=float(timings.max()),
        threads=threads,
        pca_in_timed_region=pca_model is not None,
    )


@contextlib.contextmanager
def _thread_limit(threads):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:          # best effort; matrices here are tiny anyway
        yield
        return
    with threadpool_limits(limits=threads):
        yield


def compare_sizes(net_with_pca: Network, net_without_pca: Network) -> SizeComparison:
    """Exact parameter and byte counts for the reduced/full input pair.

    The two networks must be identical except for the first layer's input
    dimension; the reduced-input one must not be the larger. A pair with
    equal input dimensions is allowed but flagged degenerate.
    """
    a, b = net_with_pca, net_without_pca
    if len(a.layers) != len(b.layers) or a.n_encoder_layers != b.n_encoder_layers:
        raise IncomparableArchitectures("layer structure differs")
    for i, (la, lb) in enumerate(zip(a.layers, b.layers)):
        same = (la.out_dim == lb.out_dim and la.activation == lb.activation
                and la.dropout == lb.dropout)
        if i > 0:
            same = same and la.in_dim == lb.in_dim
        if not same:
            raise IncomparableArchitectures(f"layer {i} differs beyond input width")
    if a.input_dim > b.input_dim:
        raise IncomparableArchitectures(
            "the with-PCA network has the wider input; arguments look swapped")
    return SizeComparison(
        params_with_pca=count_params(a),
        params_without_pca=count_params(b),
        bytes_with_pca=model_size_bytes(a),
        bytes_without_pca=model_size_bytes(b),
        degenerate=a.input_dim == b.input_dim,
    )
