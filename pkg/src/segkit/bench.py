"""Wall-clock sweeps: full vs axis-decomposed 2D attention, and the three retention paradigms.

Every sweep runs a correctness gate before it times anything, pins BLAS to
one thread (``SEGKIT_THREADS`` overrides), and reports the median of several
trials after a warmup call.
"""

from __future__ import annotations

import contextlib
import csv
import gc
import logging
import math
import os
import time
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from . import retention as R
from . import tensor as T
from .tensor import Tensor

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("kernel", "H", "W", "N", "d", "heads", "ns_median", "flops_est")
MIN_TRIALS = 5


class BenchGateError(RuntimeError):
    """The kernels under comparison disagree numerically, so timing them is meaningless."""


@dataclass
class BenchRecord:
    kernel: str
    H: int
    W: int
    N: int
    d: int
    heads: int
    ns_median: float  # per image; NaN when skipped
    flops_est: float
    trials: int = MIN_TRIALS
    batch: int = 1
    note: str = ""

    @property
    def skipped(self) -> bool:
        return math.isnan(self.ns_median)


@contextlib.contextmanager
def pinned_threads(n: Optional[int] = None):
    n = int(os.environ.get("SEGKIT_THREADS", "1")) if n is None else n
    with threadpool_limits(limits=n):
        yield


def time_fn(fn: Callable[[], object], trials: int = MIN_TRIALS, warmup: int = 1) -> float:
    """Median wall time of ``fn()`` in nanoseconds; warmup calls are discarded.

    The cyclic garbage collector is paused while timing, as ``timeit`` does,
    so sweeps are not skewed by whatever else the process is holding.
    """
    if trials < MIN_TRIALS:
        raise ValueError(f"need at least {MIN_TRIALS} trials, got {trials}")
    for _ in range(warmup):
        fn()
    samples = []
    enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        for _ in range(trials):
            t0 = time.perf_counter_ns()
            fn()
            samples.append(time.perf_counter_ns() - t0)
    finally:
        if enabled:
            gc.enable()
    return float(np.median(samples))


# ---------------------------------------------------------------------------
# 2D attention
# ---------------------------------------------------------------------------

def attention_flops(kernel: str, h: int, w: int, d: int, heads: int = 1) -> float:
    """Multiply-adds of the two attention products, counted as 2 FLOPs each."""
    n = h * w
    if kernel == "masa_full":
        return 4.0 * n * n * d * heads
    if kernel == "resa_decomposed":
        return 4.0 * n * (h + w) * d * heads
    raise ValueError(f"unknown attention kernel {kernel!r}")


def _gate_attention(params: R.RetentionParams, lengths: Iterable[int], rng, tol: float = 1e-10) -> None:
    """Decomposed and full attention must agree on single-row and single-column grids."""
    for n in lengths:
        for h, w in ((1, n), (n, 1)):
            x = Tensor(rng.normal(size=(h * w, params.d_model)))
            full = R.masa_full(x, params, h, w).data
            dec = R.resa_decomposed(x, params, h, w).data
            err = float(np.max(np.abs(full - dec)))
            if err > tol:
                raise BenchGateError(f"decomposed attention differs from full on a {h}x{w} grid (max diff {err:.2e})")


def run_attention_sweep(
    sizes: Sequence[Tuple[int, int]] = ((16, 16), (32, 32), (64, 64)),
    d: int = 32,
    heads: int = 1,
    dtype: str = "f32",
    token_budget: int = 16384,
    memory_budget: int = 1 << 30,
    trials: int = MIN_TRIALS,
    seed: int = 0,
) -> List[BenchRecord]:
    """Time the attention cores of ``masa_full`` and ``resa_decomposed`` on identical inputs.

    Q, K, V are projected once outside the timed region, since the
    projection is the same for both kernels.  Small grids are batched up to
    ``token_budget`` tokens and times are reported per image.  A size whose
    full score tensor would exceed ``memory_budget`` bytes is skipped.
    """
    rng = np.random.default_rng(seed)
    gate = R.RetentionParams.random(d, d // heads, heads=heads, rng=rng, dtype="f64")
    _gate_attention(gate, sorted({max(h, w) for h, w in sizes} | {1, 2, 5}), rng)

    dt = T.resolve_dtype(dtype)
    params = R.RetentionParams.random(d, d // heads, heads=heads, rng=rng, dtype=dtype)
    dk = params.d_k
    records = []
    with pinned_threads(), T.no_grad():
        for h, w in sizes:
            n = h * w
            batch = max(1, token_budget // n)
            need = 3 * batch * heads * n * n * dt.itemsize
            if need > memory_budget:
                note = f"skipped: full scores need {need / 2**20:.0f} MiB > budget {memory_budget / 2**20:.0f} MiB"
                logger.warning("%dx%d %s", h, w, note)
                for kernel in ("masa_full", "resa_decomposed"):
                    records.append(BenchRecord(kernel, h, w, n, dk, heads, float("nan"),
                                               attention_flops(kernel, h, w, dk, heads), 0, batch, note))
                continue
            q, k, v = (Tensor._wrap(rng.normal(size=(batch, heads, n, dk)).astype(dt)) for _ in range(3))
            for kernel, fn in (("masa_full", R.masa_attend), ("resa_decomposed", R.resa_attend)):
                ns = time_fn(lambda: fn(q, k, v, params, h, w), trials) / batch
                records.append(BenchRecord(kernel, h, w, n, dk, heads, ns,
                                           attention_flops(kernel, h, w, dk, heads), trials, batch))
    return records


def attention_ratio_trend(records: Sequence[BenchRecord]) -> List[dict]:
    """Measured and analytic full/decomposed ratios per square size, with growth between successive sizes."""
    by = {}
    for r in records:
        if r.H == r.W and not r.skipped:
            by.setdefault(r.H, {})[r.kernel] = r
    rows = []
    prev = None
    for h in sorted(by):
        pair = by[h]
        if len(pair) != 2:
            continue
        full, dec = pair["masa_full"], pair["resa_decomposed"]
        row = {
            "H": h,
            "measured": full.ns_median / dec.ns_median,
            "analytic": full.flops_est / dec.flops_est,
        }
        if prev is not None:
            row["measured_growth"] = row["measured"] / prev["measured"]
            row["analytic_growth"] = row["analytic"] / prev["analytic"]
        rows.append(row)
        prev = row
    return rows


# ---------------------------------------------------------------------------
# retention paradigms
# ---------------------------------------------------------------------------

def paradigm_flops(kernel: str, n: int, d: int, heads: int = 1, chunk: Optional[int] = None) -> float:
    if kernel == "parallel":
        return 4.0 * n * n * d * heads
    if kernel == "recurrent":
        return 4.0 * n * d * d * heads
    if kernel == "chunkwise":
        b = chunk or max(1, round(math.sqrt(n)))
        return (4.0 * n * b * d + 4.0 * n * d * d) * heads
    raise ValueError(f"unknown paradigm {kernel!r}")


def run_paradigm_sweep(
    lengths: Sequence[int] = (64, 256, 1024),
    d: int = 32,
    heads: int = 1,
    dtype: str = "f64",
    trials: int = MIN_TRIALS,
    seed: int = 0,
    tol: float = 1e-8,
) -> List[BenchRecord]:
    """Time parallel, recurrent and chunkwise (chunk = sqrt N) retention after checking they agree."""
    rng = np.random.default_rng(seed)
    params = R.RetentionParams.random(d, d // heads, heads=heads, rng=rng, dtype=dtype)
    dk = params.d_k
    dt = T.resolve_dtype(dtype)
    records = []
    with pinned_threads(), T.no_grad():
        for n in lengths:
            chunk = max(1, round(math.sqrt(n)))
            x = Tensor._wrap(rng.normal(size=(n, d)).astype(dt))
            kernels = {
                "parallel": lambda: R.retention_parallel(x, params),
                "recurrent": lambda: R.retention_recurrent(x, params),
                "chunkwise": lambda: R.retention_chunkwise(x, params, chunk),
            }
            outs = {k: f().data for k, f in kernels.items()}
            scale = max(1.0, float(np.max(np.abs(outs["parallel"]))))
            for k in ("recurrent", "chunkwise"):
                err = float(np.max(np.abs(outs[k] - outs["parallel"]))) / scale
                if err > tol:
                    raise BenchGateError(f"{k} retention differs from parallel at N={n} (rel diff {err:.2e})")
            for k, f in kernels.items():
                ns = time_fn(f, trials)
                records.append(BenchRecord(k, 1, n, n, dk, heads, ns,
                                           paradigm_flops(k, n, dk, heads, chunk), trials, 1,
                                           f"chunk={chunk}" if k == "chunkwise" else ""))
    return records


def growth(records: Sequence[BenchRecord], kernel: str) -> List[Tuple[int, int, float, float]]:
    """``(N_prev, N, time growth, size growth)`` between successive sizes of one kernel."""
    rs = sorted((r for r in records if r.kernel == kernel and not r.skipped), key=lambda r: r.N)
    return [(a.N, b.N, b.ns_median / a.ns_median, b.N / a.N) for a, b in zip(rs, rs[1:])]


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.6g}" if v != int(v) or abs(v) >= 1e15 else str(int(v))
    return str(v)


def write_csv(records: Sequence[BenchRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(CSV_COLUMNS)
        for r in records:
            row = asdict(r)
            wr.writerow([_fmt(row[c]) for c in CSV_COLUMNS])


def read_csv(path) -> List[BenchRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(BenchRecord(
                row["kernel"], int(row["H"]), int(row["W"]), int(row["N"]), int(row["d"]), int(row["heads"]),
                float(row["ns_median"]) if row["ns_median"] else float("nan"), float(row["flops_est"]),
            ))
    return out


def write_gnuplot(records: Sequence[BenchRecord], path) -> None:
    """One whitespace-separated block per kernel (blocks separated by two blank lines)."""
    kernels = list(dict.fromkeys(r.kernel for r in records))
    with open(path, "w") as fh:
        for i, k in enumerate(kernels):
            if i:
                fh.write("\n\n")
            fh.write(f"# {k}\n# N H W ns_median flops_est\n")
            for r in records:
                if r.kernel == k and not r.skipped:
                    fh.write(f"{r.N} {r.H} {r.W} {r.ns_median:.1f} {r.flops_est:.6g}\n")
