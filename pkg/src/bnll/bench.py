"""GEMM benchmark: XNOR-popcount kernel against this project's float GEMM.

The float baseline is the project's own blocked multiply-accumulate (no BLAS
call), so both paths are plain vectorized kernels over the same logical
problem. Every row is correctness-gated: the popcount result must equal the
dense integer product before any timing is reported.
"""

from __future__ import annotations

import platform
import time
from dataclasses import dataclass

import numpy as np

from .bintensor import WORD_BITS, pack_sign_rows
from .ops import gemm_popcount

_BLOCK_ELEMS = 1 << 22


def float_gemm_naive(a: np.ndarray, bt: np.ndarray) -> np.ndarray:
    """Blocked multiply-accumulate of a (m, k) by bt (n, k) -> (m, n).

    Intentionally avoids BLAS so the comparison is kernel vs kernel.
    """
    m, k = a.shape
    n = bt.shape[0]
    out = np.empty((m, n), np.float32)
    block = max(1, _BLOCK_ELEMS // max(1, bt.size))
    for i in range(0, m, block):
        out[i : i + block] = (a[i : i + block, None, :] * bt[None, :, :]).sum(
            axis=2, dtype=np.float32)
    return out


@dataclass
class BenchRow:
    m: int
    n: int
    k: int
    float_ms: float
    popcount_ms: float
    checksum_ok: bool

    @property
    def speedup(self) -> float:
        return self.float_ms / self.popcount_ms if self.popcount_ms else float("inf")


@dataclass
class BenchReport:
    rows: list[BenchRow]
    environment: str

    def table(self) -> str:
        head = f"{'m':>6} {'n':>6} {'k':>6} {'float_ms':>10} {'popcnt_ms':>10} {'speedup':>8} {'check':>6}"
        lines = [head]
        for r in self.rows:
            lines.append(
                f"{r.m:>6} {r.n:>6} {r.k:>6} {r.float_ms:>10.3f} {r.popcount_ms:>10.3f} "
                f"{r.speedup:>8.2f} {'ok' if r.checksum_ok else 'FAIL':>6}"
            )
        lines.append(f"# {self.environment}")
        lines.append("# float baseline is this project's own blocked kernel, not a vendor BLAS")
        return "\n".join(lines) + "\n"

    def tsv_rows(self) -> list[str]:
        out = ["m\tn\tk\tfloat_ms\tpopcount_ms\tspeedup\tchecksum_ok"]
        for r in self.rows:
            out.append(
                f"{r.m}\t{r.n}\t{r.k}\t{r.float_ms:.4f}\t{r.popcount_ms:.4f}\t"
                f"{r.speedup:.3f}\t{int(r.checksum_ok)}"
            )
        return out


def _time(fn, reps: int) -> float:
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps * 1e3


def bench_gemm(sizes: list[tuple[int, int, int]], reps: int = 3,
               seed: int = 0) -> BenchReport:
    """Time both kernels on +-1 operands of each (m, n, k).

    A row whose popcount output disagrees with the dense integer oracle is
    marked failed and reported with zeroed timings.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for m, n, k in sizes:
        if min(m, n, k) < 1:
            raise ValueError(f"bad GEMM size {(m, n, k)}")
        a = rng.choice([-1.0, 1.0], size=(m, k)).astype(np.float32)
        bt = rng.choice([-1.0, 1.0], size=(n, k)).astype(np.float32)
        pa, pb = pack_sign_rows(a), pack_sign_rows(bt)
        got = gemm_popcount(pa, pb, k)
        want = a.astype(np.int64) @ bt.astype(np.int64).T
        ok = bool(np.array_equal(got.astype(np.int64), want))
        if not ok:
            rows.append(BenchRow(m, n, k, 0.0, 0.0, False))
            continue
        t_float = _time(lambda: float_gemm_naive(a, bt), reps)
        t_pop = _time(lambda: gemm_popcount(pa, pb, k), reps)
        rows.append(BenchRow(m, n, k, t_float, t_pop, True))
    env = (f"python {platform.python_version()}, numpy {np.__version__}, "
           f"{platform.machine()}, word={WORD_BITS} bits, reps={reps}")
    return BenchReport(rows, env)


def parse_sizes(text: str) -> list[tuple[int, int, int]]:
    """Parse "m,n,k[;m,n,k...]" into size triples."""
    sizes = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        bits = part.split(",")
        if len(bits) != 3:
            raise ValueError(f"size {part!r} is not m,n,k")
        sizes.append(tuple(int(b) for b in bits))
    if not sizes:
        raise ValueError("no sizes given")
    return sizes
