"""Occupancy benchmark: rulebook sparse conv vs the dense oracle.

Reports medians over repeats: build/forward wall times, tracemalloc peak
bytes for each path, the analytic dense-embedding footprint, and a value
agreement column as a sanity check.
"""

from __future__ import annotations

import csv
import time
import tracemalloc
from dataclasses import dataclass

import numpy as np

from .conv import ConvParams, ConvSpec, build_conv_rulebook, sac_apply
from .oracles import dense_conv_oracle
from .sparse import build_sparse_map


@dataclass
class BenchRow:
    occupancy: float
    size: int
    n: int
    rulebook_build_ms: float
    sparse_forward_ms: float
    dense_oracle_ms: float
    sparse_peak_bytes: int
    dense_peak_bytes: int
    dense_embed_bytes: int
    max_abs_diff: float


FIELDS = [
    "occupancy", "size", "n", "rulebook_build_ms", "sparse_forward_ms",
    "dense_oracle_ms", "sparse_peak_bytes", "dense_peak_bytes",
    "dense_embed_bytes", "max_abs_diff",
]


def _blob_layout(rng, size: int, occupancy: float) -> np.ndarray:
    """Tissue-like layout: one compact rectangle at ~the target occupancy."""
    area = occupancy * size * size
    w = int(np.clip(round(np.sqrt(area)), 1, size))
    h = int(np.clip(round(area / w), 1, size))
    x0 = int(rng.integers(0, size - w + 1))
    y0 = int(rng.integers(0, size - h + 1))
    ys, xs = np.mgrid[y0 : y0 + h, x0 : x0 + w]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.int64)


def _timed(fn):
    tracemalloc.start()
    t0 = time.perf_counter()
    out = fn()
    ms = (time.perf_counter() - t0) * 1e3
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    return out, ms, peak


def bench_once(rng, occupancy: float, size: int, kernel: int = 2, stride: int = 2,
               dim: int = 16):
    coords = _blob_layout(rng, size, occupancy)
    feats = rng.normal(size=(len(coords), dim)).astype(np.float32)
    smap = build_sparse_map(coords, feats)
    weights = rng.normal(size=(kernel * kernel, dim, dim)).astype(np.float32)
    bias = rng.normal(size=dim).astype(np.float32)
    params = ConvParams(weights, bias)
    spec = ConvSpec(kernel, stride, 1, dim, dim)

    rb, build_ms, _ = _timed(lambda: build_conv_rulebook(smap.coords, spec))
    (sp_out, _, _), sparse_ms, sparse_peak = _timed(
        lambda: sac_apply(smap.features, smap.context, rb, params))

    dense = np.zeros((size + kernel - 1, size + kernel - 1, dim), dtype=np.float32)
    dense[smap.coords[:, 1], smap.coords[:, 0]] = smap.features
    dense_embed_bytes = dense.nbytes
    dense_out, dense_ms, dense_peak = _timed(
        lambda: dense_conv_oracle(dense, kernel, stride, 1, weights, bias))

    got = dense_out[rb.out_coords[:, 1], rb.out_coords[:, 0]]
    diff = float(np.abs(got - sp_out).max()) if len(sp_out) else 0.0
    return BenchRow(occupancy, size, smap.n, build_ms, sparse_ms, dense_ms,
                    sparse_peak, dense_peak, dense_embed_bytes, diff)


def run_bench(occupancies, sizes, repeats: int = 3, seed: int = 0,
              dim: int = 16) -> list[BenchRow]:
    rows = []
    for size in sizes:
        for occ in occupancies:
            rng = np.random.default_rng(seed)
            reps = [bench_once(rng, occ, size, dim=dim) for _ in range(repeats)]
            med = lambda key: float(np.median([getattr(r, key) for r in reps]))
            rows.append(BenchRow(
                occupancy=occ, size=size, n=reps[0].n,
                rulebook_build_ms=med("rulebook_build_ms"),
                sparse_forward_ms=med("sparse_forward_ms"),
                dense_oracle_ms=med("dense_oracle_ms"),
                sparse_peak_bytes=int(med("sparse_peak_bytes")),
                dense_peak_bytes=int(med("dense_peak_bytes")),
                dense_embed_bytes=reps[0].dense_embed_bytes,
                max_abs_diff=max(r.max_abs_diff for r in reps),
            ))
    return rows


def write_csv(path, rows: list[BenchRow]):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: getattr(r, k) for k in FIELDS})
