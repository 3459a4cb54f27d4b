"""First-order complex linear recurrences evaluated three ways.

The recurrence state[t] = a[t] * state[t-1] + b[t] (complex, elementwise per
channel) is an associative operation on (a, b) pairs, so a whole sequence can
be evaluated sequentially, by a work-efficient parallel tree, or in contiguous
chunks stitched together by a carry pass.  All three produce the same states
up to float reassociation; chunked with workers=1 is bit-identical to
sequential because chunk 0 runs the sequential kernel directly from h0.

Complex values are carried as separate real/imaginary float planes, never as
numpy complex dtypes, so the float32/float64 story stays uniform with the
rest of the package.
"""

from __future__ import annotations

import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor as tz

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only where numba is absent
    numba = None
    HAVE_NUMBA = False

# Set true to force the pure-python kernels even when numba is importable.
FORCE_PYTHON_KERNELS = False


@dataclass
class ScanElement:
    """Per-step transition coefficients, each plane shaped [time, channels]."""

    a_re: np.ndarray
    a_im: np.ndarray
    b_re: np.ndarray
    b_im: np.ndarray

    @property
    def shape(self):
        return self.a_re.shape


@dataclass
class ScanCarry:
    """A state vector, one complex value per channel as two real planes."""

    h_re: np.ndarray
    h_im: np.ndarray

    @staticmethod
    def zeros(channels: int, dtype=np.float32) -> "ScanCarry":
        return ScanCarry(np.zeros(channels, dtype=dtype), np.zeros(channels, dtype=dtype))


@dataclass
class ScanStates:
    """All states of a scan, planes shaped [time, channels]."""

    re: np.ndarray
    im: np.ndarray


def combine(left, right):
    """Compose two (a, b) transition pairs, left applied first:
    (a_l, b_l) then (a_r, b_r) gives (a_l*a_r, b_l*a_r + b_r).
    Each side is a 4-tuple of real planes (a_re, a_im, b_re, b_im)."""
    la_re, la_im, lb_re, lb_im = left
    ra_re, ra_im, rb_re, rb_im = right
    a_re = la_re * ra_re - la_im * ra_im
    a_im = la_re * ra_im + la_im * ra_re
    b_re = lb_re * ra_re - lb_im * ra_im + rb_re
    b_im = lb_re * ra_im + lb_im * ra_re + rb_im
    return a_re, a_im, b_re, b_im


def identity_element(shape, dtype=np.float32):
    """The combine() identity: a = 1, b = 0."""
    one = np.ones(shape, dtype=dtype)
    return one, np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype)


# ---------------------------------------------------------------------------
# sequential kernels

def _seq_kernel_py(ar, ai, br, bi, hr, hi, sr, si):
    steps = ar.shape[0]
    for t in range(steps):
        nr = ar[t] * hr - ai[t] * hi + br[t]
        ni = ar[t] * hi + ai[t] * hr + bi[t]
        sr[t] = nr
        si[t] = ni
        hr, hi = nr, ni


def _seq_prefix_kernel_py(ar, ai, br, bi, sr, si, pr, pi):
    # scan from zero state while tracking the running product of a,
    # needed to splice a chunk onto an incoming carry afterwards
    steps = ar.shape[0]
    hr = np.zeros_like(ar[0])
    hi = np.zeros_like(ar[0])
    qr = np.ones_like(ar[0])
    qi = np.zeros_like(ar[0])
    for t in range(steps):
        nr = ar[t] * hr - ai[t] * hi + br[t]
        ni = ar[t] * hi + ai[t] * hr + bi[t]
        mr = ar[t] * qr - ai[t] * qi
        mi = ar[t] * qi + ai[t] * qr
        sr[t] = nr
        si[t] = ni
        pr[t] = mr
        pi[t] = mi
        hr, hi, qr, qi = nr, ni, mr, mi


if HAVE_NUMBA:

    @numba.njit(cache=True, nogil=True)
    def _seq_kernel_nb(ar, ai, br, bi, hr, hi, sr, si):  # pragma: no cover - compiled
        steps, channels = ar.shape
        for t in range(steps):
            for c in range(channels):
                nr = ar[t, c] * hr[c] - ai[t, c] * hi[c] + br[t, c]
                ni = ar[t, c] * hi[c] + ai[t, c] * hr[c] + bi[t, c]
                hr[c] = nr
                hi[c] = ni
                sr[t, c] = nr
                si[t, c] = ni

    @numba.njit(cache=True, nogil=True)
    def _seq_prefix_kernel_nb(ar, ai, br, bi, sr, si, pr, pi):  # pragma: no cover - compiled
        steps, channels = ar.shape
        for c in range(channels):
            hr = 0.0
            hi = 0.0
            qr = 1.0
            qi = 0.0
            for t in range(steps):
                nr = ar[t, c] * hr - ai[t, c] * hi + br[t, c]
                ni = ar[t, c] * hi + ai[t, c] * hr + bi[t, c]
                mr = ar[t, c] * qr - ai[t, c] * qi
                mi = ar[t, c] * qi + ai[t, c] * qr
                hr = nr
                hi = ni
                qr = mr
                qi = mi
                sr[t, c] = nr
                si[t, c] = ni
                pr[t, c] = mr
                pi[t, c] = mi


def _use_numba() -> bool:
    return HAVE_NUMBA and not FORCE_PYTHON_KERNELS


def _run_sequential(ar, ai, br, bi, h_re, h_im):
    """Shared sequential engine; returns (states_re, states_im)."""
    sr = np.empty_like(ar)
    si = np.empty_like(ar)
    hr = h_re.astype(ar.dtype, copy=True)
    hi = h_im.astype(ar.dtype, copy=True)
    if _use_numba():
        _seq_kernel_nb(ar, ai, br, bi, hr, hi, sr, si)
    else:
        _seq_kernel_py(ar, ai, br, bi, hr, hi, sr, si)
    return sr, si


def _run_sequential_prefix(ar, ai, br, bi):
    """Zero-state scan plus running products of a; returns (sr, si, pr, pi)."""
    sr = np.empty_like(ar)
    si = np.empty_like(ar)
    pr = np.empty_like(ar)
    pi = np.empty_like(ar)
    if _use_numba():
        _seq_prefix_kernel_nb(ar, ai, br, bi, sr, si, pr, pi)
    else:
        _seq_prefix_kernel_py(ar, ai, br, bi, sr, si, pr, pi)
    return sr, si, pr, pi


def _carry(elems: ScanElement, h0: ScanCarry | None) -> tuple[np.ndarray, np.ndarray]:
    channels = elems.a_re.shape[1]
    dtype = elems.a_re.dtype
    if h0 is None:
        return np.zeros(channels, dtype=dtype), np.zeros(channels, dtype=dtype)
    return np.asarray(h0.h_re, dtype=dtype), np.asarray(h0.h_im, dtype=dtype)


def scan_sequential(elems: ScanElement, h0: ScanCarry | None = None) -> tuple[ScanStates, ScanCarry]:
    """Reference O(T) evaluation of the recurrence."""
    hr, hi = _carry(elems, h0)
    sr, si = _run_sequential(elems.a_re, elems.a_im, elems.b_re, elems.b_im, hr, hi)
    return ScanStates(sr, si), ScanCarry(sr[-1].copy(), si[-1].copy())


def scan_tree(elems: ScanElement, h0: ScanCarry | None = None) -> tuple[ScanStates, ScanCarry]:
    """Work-efficient tree scan: pad to a power of two with the identity,
    up-sweep totals, down-sweep exclusive prefixes, then fold in h0."""
    ar, ai, br, bi = elems.a_re, elems.a_im, elems.b_re, elems.b_im
    steps, channels = ar.shape
    dtype = ar.dtype
    n = 1 if steps <= 1 else 1 << (steps - 1).bit_length()

    st = np.empty((4, n, channels), dtype=dtype)
    st[0, :steps], st[1, :steps], st[2, :steps], st[3, :steps] = ar, ai, br, bi
    st[0, steps:] = 1.0
    st[1, steps:] = 0.0
    st[2, steps:] = 0.0
    st[3, steps:] = 0.0

    stride = 2
    while stride <= n:
        left = np.arange(stride // 2 - 1, n, stride)
        right = left + stride // 2
        lv = (st[0, left], st[1, left], st[2, left], st[3, left])
        rv = (st[0, right], st[1, right], st[2, right], st[3, right])
        st[0, right], st[1, right], st[2, right], st[3, right] = combine(lv, rv)
        stride *= 2

    # down-sweep turns subtree totals into exclusive prefixes
    st[0, n - 1], st[1, n - 1], st[2, n - 1], st[3, n - 1] = 1.0, 0.0, 0.0, 0.0
    stride = n
    while stride >= 2:
        half = stride // 2
        left = np.arange(half - 1, n, stride)
        right = left + half
        lv = (st[0, left].copy(), st[1, left].copy(), st[2, left].copy(), st[3, left].copy())
        rv = (st[0, right].copy(), st[1, right].copy(), st[2, right].copy(), st[3, right].copy())
        st[0, left], st[1, left], st[2, left], st[3, left] = rv
        # the right child's prefix is (everything before the parent) then the left subtree
        st[0, right], st[1, right], st[2, right], st[3, right] = combine(rv, lv)
        stride //= 2

    excl = (st[0, :steps], st[1, :steps], st[2, :steps], st[3, :steps])
    pa_re, pa_im, pb_re, pb_im = combine(excl, (ar, ai, br, bi))

    if h0 is None:
        sr, si = pb_re, pb_im
    else:
        hr, hi = _carry(elems, h0)
        sr = pa_re * hr - pa_im * hi + pb_re
        si = pa_re * hi + pa_im * hr + pb_im
    return ScanStates(sr, si), ScanCarry(sr[-1].copy(), si[-1].copy())


def _chunk_bounds(steps: int, workers: int) -> list[tuple[int, int]]:
    sizes = [steps // workers + (1 if k < steps % workers else 0) for k in range(workers)]
    bounds = []
    at = 0
    for s in sizes:
        bounds.append((at, at + s))
        at += s
    return [b for b in bounds if b[1] > b[0]]


def scan_chunked(elems: ScanElement, h0: ScanCarry | None = None, workers: int = 2) -> tuple[ScanStates, ScanCarry]:
    """Chunked evaluation: each worker scans a contiguous chunk, a sequential
    pass combines the chunk carries, then workers splice the carries back in.

    Chunk 0 scans directly from h0 with the sequential kernel, so workers=1
    degenerates to exactly scan_sequential, bit for bit."""
    ar, ai, br, bi = elems.a_re, elems.a_im, elems.b_re, elems.b_im
    steps, channels = ar.shape
    workers = max(1, min(int(workers), steps))
    bounds = _chunk_bounds(steps, workers)
    nchunks = len(bounds)
    hr, hi = _carry(elems, h0)

    sr = np.empty_like(ar)
    si = np.empty_like(ar)
    prefixes: list[tuple[np.ndarray, np.ndarray] | None] = [None] * nchunks

    def phase_local(k: int):
        lo, hi_ = bounds[k]
        if k == 0:
            sr[lo:hi_], si[lo:hi_] = _run_sequential(ar[lo:hi_], ai[lo:hi_], br[lo:hi_], bi[lo:hi_], hr, hi)
        else:
            s_re, s_im, p_re, p_im = _run_sequential_prefix(ar[lo:hi_], ai[lo:hi_], br[lo:hi_], bi[lo:hi_])
            sr[lo:hi_], si[lo:hi_] = s_re, s_im
            prefixes[k] = (p_re, p_im)

    def run_parallel(fn, items):
        if workers > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(fn, items))
        else:
            for it in items:
                fn(it)

    run_parallel(phase_local, range(nchunks))

    # sequential carry pass: state entering chunk k+1 is chunk k's final state
    carries = [None] * nchunks
    carries[0] = (hr, hi)
    for k in range(nchunks - 1):
        lo, hi_ = bounds[k]
        if k == 0:
            carries[1] = (sr[hi_ - 1].copy(), si[hi_ - 1].copy())
        else:
            p_re, p_im = prefixes[k]
            cin_re, cin_im = carries[k]
            carries[k + 1] = (
                sr[hi_ - 1] + p_re[-1] * cin_re - p_im[-1] * cin_im,
                si[hi_ - 1] + p_re[-1] * cin_im + p_im[-1] * cin_re,
            )

    def phase_fixup(k: int):
        lo, hi_ = bounds[k]
        p_re, p_im = prefixes[k]
        cin_re, cin_im = carries[k]
        sr[lo:hi_] += p_re * cin_re - p_im * cin_im
        si[lo:hi_] += p_re * cin_im + p_im * cin_re

    run_parallel(phase_fixup, range(1, nchunks))

    return ScanStates(sr, si), ScanCarry(sr[-1].copy(), si[-1].copy())


_ENGINES = {
    "sequential": scan_sequential,
    "tree": scan_tree,
    "chunked": scan_chunked,
}


def run_scan(elems: ScanElement, h0: ScanCarry | None = None, variant: str = "sequential",
             workers: int = 1) -> tuple[ScanStates, ScanCarry]:
    if variant not in _ENGINES:
        raise ValueError(f"unknown scan variant {variant!r}, expected one of {sorted(_ENGINES)}")
    if variant == "chunked":
        return scan_chunked(elems, h0, workers=workers)
    return _ENGINES[variant](elems, h0)


# ---------------------------------------------------------------------------
# backward pass

def scan_backward(elems: ScanElement, h0: ScanCarry | None, states: ScanStates,
                  grad_re: np.ndarray, grad_im: np.ndarray, variant: str = "sequential",
                  workers: int = 1) -> tuple[ScanElement, ScanCarry]:
    """Adjoint of the scan.  The reverse-time recurrence
    g[t] = grad_states[t] + conj(a[t+1]) * g[t+1]
    is itself a first-order linear recurrence, so it reuses the same engines
    on time-reversed arrays.  Returns (gradient ScanElement, gradient carry)."""
    ar, ai = elems.a_re, elems.a_im
    steps, channels = ar.shape
    dtype = ar.dtype

    # reversed transition: A[tau] = conj(a[T - tau]), A[0] unused via zero carry
    rev_a_re = np.empty_like(ar)
    rev_a_im = np.empty_like(ar)
    rev_a_re[1:] = ar[::-1][:-1]
    rev_a_im[1:] = -ai[::-1][:-1]
    rev_a_re[0] = 0.0
    rev_a_im[0] = 0.0
    rev = ScanElement(rev_a_re, rev_a_im,
                      np.ascontiguousarray(grad_re[::-1]),
                      np.ascontiguousarray(grad_im[::-1]))
    gstates, _ = run_scan(rev, None, variant=variant, workers=workers)
    g_re = np.ascontiguousarray(gstates.re[::-1])
    g_im = np.ascontiguousarray(gstates.im[::-1])

    # previous states, with h0 (or zero) in front
    hr, hi = _carry(elems, h0)
    prev_re = np.concatenate([hr[None, :], states.re[:-1]], axis=0)
    prev_im = np.concatenate([hi[None, :], states.im[:-1]], axis=0)

    # grad_a[t] = g[t] * conj(state[t-1]); grad_b[t] = g[t]
    ga_re = g_re * prev_re + g_im * prev_im
    ga_im = g_im * prev_re - g_re * prev_im
    gh_re = ar[0] * g_re[0] + ai[0] * g_im[0]
    gh_im = ar[0] * g_im[0] - ai[0] * g_re[0]
    return ScanElement(ga_re, ga_im, g_re, g_im), ScanCarry(gh_re, gh_im)


# ---------------------------------------------------------------------------
# tape integration

def linear_recurrence(a_re: tz.Tensor, a_im: tz.Tensor, b_re: tz.Tensor, b_im: tz.Tensor,
                      h0_re: tz.Tensor | None = None, h0_im: tz.Tensor | None = None,
                      variant: str = "sequential", workers: int = 1) -> tz.Tensor:
    """Differentiable scan node: inputs [time, channels], output [2, time,
    channels] with the real plane at index 0 and imaginary at index 1.
    The backward pass runs the same scan variant in reverse time."""
    steps, channels = a_re.data.shape
    have_h0 = h0_re is not None
    if have_h0 != (h0_im is not None):
        raise ValueError("h0_re and h0_im must be given together")
    if not have_h0:
        zeros = np.zeros(channels, dtype=a_re.data.dtype)
        h0_re, h0_im = tz.Tensor(zeros), tz.Tensor(zeros)

    elems = ScanElement(a_re.data, a_im.data, b_re.data, b_im.data)
    h0 = ScanCarry(h0_re.data, h0_im.data)
    states, _ = run_scan(elems, h0, variant=variant, workers=workers)
    out = np.stack([states.re, states.im])

    def bwd(g):
        gel, gcarry = scan_backward(elems, h0, states, g[0], g[1], variant=variant, workers=workers)
        return (gel.a_re, gel.a_im, gel.b_re, gel.b_im, gcarry.h_re, gcarry.h_im)

    return tz.record_node(out, (a_re, a_im, b_re, b_im, h0_re, h0_im), bwd)


# ---------------------------------------------------------------------------
# microbenchmark entry point

def _random_elems(rng, steps, channels, dtype=np.float32) -> ScanElement:
    mag = rng.uniform(0.8, 0.999, size=(steps, channels))
    ang = rng.uniform(0.0, 2 * np.pi, size=(steps, channels))
    return ScanElement(
        (mag * np.cos(ang)).astype(dtype),
        (mag * np.sin(ang)).astype(dtype),
        rng.standard_normal((steps, channels)).astype(dtype),
        rng.standard_normal((steps, channels)).astype(dtype),
    )


def benchmark(steps: int = 1 << 16, channels: int = 128, workers=(1, 2, 4, 8), repeats: int = 3) -> dict:
    """Throughput of each variant in scanned elements per second."""
    rng = np.random.default_rng(0)
    elems = _random_elems(rng, steps, channels)
    results = {}

    def timed(fn):
        fn()  # warm up kernels and caches
        best = min(_timeit(fn) for _ in range(repeats))
        return steps / best

    results["sequential"] = timed(lambda: scan_sequential(elems))
    results["tree"] = timed(lambda: scan_tree(elems))
    for w in workers:
        results[f"chunked_w{w}"] = timed(lambda w=w: scan_chunked(elems, workers=w))
    return results


def _timeit(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    steps = int(argv[0]) if len(argv) > 0 else 1 << 16
    channels = int(argv[1]) if len(argv) > 1 else 128
    print(f"steps={steps} channels={channels} numba={int(_use_numba())}")
    for name, rate in benchmark(steps, channels).items():
        print(f"scan_{name}_elems_per_s={rate:.0f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
