"""Wall-clock timing of graph construction, EdgeConv and the full classifier."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .edgeconv import EdgeConv
from .graph import knn_indices
from .models import ClassifierConfig, DGCNNClassifier

CSV_HEADER = ("op", "n", "k", "features", "reps", "median_ms", "p95_ms")


@dataclass
class BenchRow:
    op: str
    n: int
    k: int
    features: int
    reps: int
    median_ms: float
    p95_ms: float

    def cells(self) -> list[str]:
        return [self.op, str(self.n), str(self.k), str(self.features), str(self.reps),
                f"{self.median_ms:.4f}", f"{self.p95_ms:.4f}"]


def _summarize(samples: Sequence[float]) -> tuple[float, float]:
    ms = np.asarray(samples) * 1000.0
    return float(np.median(ms)), float(np.percentile(ms, 95))


def time_calls(fn: Callable[[], object], reps: int, warmup: int = 1) -> list[float]:
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


def bench_grid(sizes: Sequence[int], ks: Sequence[int], features: Sequence[int], reps: int,
               seed: int = 0, width: int = 64) -> list[BenchRow]:
    """k-NN construction and one EdgeConv layer (``features -> width``) per grid cell."""
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        for k in ks:
            if k > n:
                continue
            for f in features:
                x = rng.normal(size=(n, f)).astype(T.get_default_dtype())
                rows.append(BenchRow("knn_graph", n, k, f, reps, *_summarize(time_calls(lambda: knn_indices(x, k), reps))))
                conv = EdgeConv(f, [width], rng)
                idx = knn_indices(x, k)
                rows.append(BenchRow("edgeconv_forward", n, k, f, reps,
                                     *_summarize(time_calls(lambda: conv(x, idx), reps))))
    return rows


def bench_classifier(n: int = 1024, k: int = 20, reps: int = 50, seed: int = 0,
                     cfg: ClassifierConfig | None = None) -> list[BenchRow]:
    """Eval-mode forward time of one cloud with a static and a dynamic graph.

    Both variants share the same weights; repetitions alternate between them
    so drift in machine load affects both equally.
    """
    base = replace(cfg or ClassifierConfig(), k=k)
    dynamic = DGCNNClassifier(replace(base, dynamic_graph=True), np.random.default_rng(seed))
    static = DGCNNClassifier(replace(base, dynamic_graph=False), np.random.default_rng(seed))
    x = np.random.default_rng(seed + 1).normal(size=(n, 3))
    dynamic(x)
    static(x)
    times = {"static": [], "dynamic": []}
    for _ in range(reps):
        for label, model in (("static", static), ("dynamic", dynamic)):
            t0 = time.perf_counter()
            model(x)
            times[label].append(time.perf_counter() - t0)
    return [BenchRow(f"classifier_forward_{label}", n, k, 3, reps, *_summarize(t)) for label, t in times.items()]


def write_csv(path, rows: Sequence[BenchRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow(r.cells())
