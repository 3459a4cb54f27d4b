"""Scan engine: algebraic properties of combine, cross-variant equivalence,
the adjoint against finite differences, and the stability bound."""

import numpy as np
import pytest

from hrnn import scan as S
from hrnn import tensor as T

from conftest import fd_gradients, rel_err, tape_gradients


def random_elems(rng, steps, channels, dtype=np.float32, max_mag=0.999):
    mag = rng.uniform(0.5, max_mag, size=(steps, channels))
    ang = rng.uniform(0, 2 * np.pi, size=(steps, channels))
    return S.ScanElement(
        (mag * np.cos(ang)).astype(dtype),
        (mag * np.sin(ang)).astype(dtype),
        rng.standard_normal((steps, channels)).astype(dtype),
        rng.standard_normal((steps, channels)).astype(dtype),
    )


def random_carry(rng, channels, dtype=np.float32):
    return S.ScanCarry(rng.standard_normal(channels).astype(dtype),
                       rng.standard_normal(channels).astype(dtype))


def naive_complex_reference(elems, h0):
    """Independent oracle: complex128 python loop, no shared kernel code."""
    a = elems.a_re.astype(np.float64) + 1j * elems.a_im.astype(np.float64)
    b = elems.b_re.astype(np.float64) + 1j * elems.b_im.astype(np.float64)
    h = h0.h_re.astype(np.float64) + 1j * h0.h_im.astype(np.float64)
    out = np.empty_like(a)
    for t in range(a.shape[0]):
        h = a[t] * h + b[t]
        out[t] = h
    return out


def test_combine_is_associative():
    rng = np.random.default_rng(0)
    for _ in range(50):
        x, y, z = (tuple(rng.uniform(-1, 1, size=4).astype(np.float64)) for _ in range(3))
        left = S.combine(S.combine(x, y), z)
        right = S.combine(x, S.combine(y, z))
        for l, r in zip(left, right):
            assert abs(l - r) < 1e-12


def test_identity_element_is_exact_both_sides():
    rng = np.random.default_rng(1)
    e = tuple(rng.standard_normal((3, 2)) for _ in range(4))
    ident = S.identity_element((3, 2), dtype=np.float64)
    for got, want in zip(S.combine(ident, e), e):
        np.testing.assert_array_equal(got, want)
    for got, want in zip(S.combine(e, ident), e):
        np.testing.assert_array_equal(got, want)


def test_sequential_matches_complex128_reference():
    rng = np.random.default_rng(2)
    elems = random_elems(rng, 64, 5, dtype=np.float64)
    h0 = random_carry(rng, 5, dtype=np.float64)
    states, final = S.scan_sequential(elems, h0)
    want = naive_complex_reference(elems, h0)
    assert rel_err(states.re, want.real) < 1e-12
    assert rel_err(states.im, want.imag) < 1e-12
    np.testing.assert_array_equal(final.h_re, states.re[-1])
    np.testing.assert_array_equal(final.h_im, states.im[-1])


def test_zero_carry_default_matches_explicit_zeros():
    rng = np.random.default_rng(3)
    elems = random_elems(rng, 32, 4)
    a, _ = S.scan_sequential(elems)
    b, _ = S.scan_sequential(elems, S.ScanCarry.zeros(4))
    np.testing.assert_array_equal(a.re, b.re)
    np.testing.assert_array_equal(a.im, b.im)


def mean_max_rel(got, want):
    # pointwise relative error floored at the signal RMS: near zero-crossings
    # of the state the pointwise quotient is meaningless for reassociated
    # float arithmetic, so errors there are measured against the data scale
    want64 = want.astype(np.float64)
    denom = np.maximum(np.abs(want64), np.sqrt(np.mean(want64**2)))
    rel = np.abs(got.astype(np.float64) - want64) / denom
    return rel.mean(), rel.max()


@pytest.mark.parametrize("steps", [2, 3, 192, 1000, 1024])
def test_tree_matches_sequential(steps):
    rng = np.random.default_rng(steps)
    elems = random_elems(rng, steps, 6)
    h0 = random_carry(rng, 6)
    seq, seq_f = S.scan_sequential(elems, h0)
    tree, tree_f = S.scan_tree(elems, h0)
    for got, want in ((tree.re, seq.re), (tree.im, seq.im)):
        mean, peak = mean_max_rel(got, want)
        assert mean < 1e-4 and peak < 1e-3, (mean, peak)


def test_tree_length_one_is_bit_exact():
    rng = np.random.default_rng(9)
    elems = random_elems(rng, 1, 8)
    h0 = random_carry(rng, 8)
    seq, _ = S.scan_sequential(elems, h0)
    tree, _ = S.scan_tree(elems, h0)
    np.testing.assert_array_equal(tree.re, seq.re)
    np.testing.assert_array_equal(tree.im, seq.im)


@pytest.mark.parametrize("workers", [2, 3, 4, 8])
def test_chunked_matches_sequential(workers):
    rng = np.random.default_rng(100 + workers)
    elems = random_elems(rng, 1000, 6)
    h0 = random_carry(rng, 6)
    seq, _ = S.scan_sequential(elems, h0)
    chk, _ = S.scan_chunked(elems, h0, workers=workers)
    for got, want in ((chk.re, seq.re), (chk.im, seq.im)):
        mean, peak = mean_max_rel(got, want)
        assert mean < 1e-4 and peak < 1e-3, (mean, peak)


def test_chunked_single_worker_is_bit_identical():
    rng = np.random.default_rng(4)
    elems = random_elems(rng, 777, 5)
    h0 = random_carry(rng, 5)
    seq, seq_f = S.scan_sequential(elems, h0)
    chk, chk_f = S.scan_chunked(elems, h0, workers=1)
    assert chk.re.tobytes() == seq.re.tobytes()
    assert chk.im.tobytes() == seq.im.tobytes()
    assert chk_f.h_re.tobytes() == seq_f.h_re.tobytes()


def test_chunked_more_workers_than_steps():
    rng = np.random.default_rng(5)
    elems = random_elems(rng, 3, 2)
    seq, _ = S.scan_sequential(elems)
    chk, _ = S.scan_chunked(elems, workers=16)
    mean, peak = mean_max_rel(chk.re, seq.re)
    assert peak < 1e-3


def test_python_and_numba_kernels_agree():
    if not S.HAVE_NUMBA:
        pytest.skip("numba unavailable")
    rng = np.random.default_rng(6)
    elems = random_elems(rng, 256, 7)
    h0 = random_carry(rng, 7)
    fast, _ = S.scan_sequential(elems, h0)
    try:
        S.FORCE_PYTHON_KERNELS = True
        slow, _ = S.scan_sequential(elems, h0)
    finally:
        S.FORCE_PYTHON_KERNELS = False
    assert rel_err(fast.re, slow.re) < 1e-6
    assert rel_err(fast.im, slow.im) < 1e-6


def test_run_scan_rejects_unknown_variant():
    rng = np.random.default_rng(7)
    elems = random_elems(rng, 4, 2)
    with pytest.raises(ValueError, match="variant"):
        S.run_scan(elems, variant="warp")


def test_stability_bound_linear_growth():
    # for |a| <= 1 and |b| <= M the state magnitude after t steps is <= (t+1)M
    rng = np.random.default_rng(8)
    steps, channels, bound = 512, 4, 0.5
    elems = random_elems(rng, steps, channels, dtype=np.float64, max_mag=1.0)
    scale = bound / np.maximum(np.hypot(elems.b_re, elems.b_im), 1e-9)
    elems.b_re *= np.minimum(scale, 1.0)
    elems.b_im *= np.minimum(scale, 1.0)
    states, _ = S.scan_sequential(elems)
    mags = np.hypot(states.re, states.im)
    limit = (np.arange(1, steps + 1)[:, None]) * bound
    assert (mags <= limit * (1 + 1e-12)).all()


@pytest.mark.parametrize("variant,workers", [("sequential", 1), ("tree", 1), ("chunked", 3)])
def test_linear_recurrence_gradients_match_finite_differences(variant, workers):
    rng = np.random.default_rng(10)
    with T.precision("float64"):
        steps, channels = 6, 3
        el = random_elems(rng, steps, channels, dtype=np.float64)
        a_re = T.Tensor(el.a_re, requires_grad=True)
        a_im = T.Tensor(el.a_im, requires_grad=True)
        b_re = T.Tensor(el.b_re, requires_grad=True)
        b_im = T.Tensor(el.b_im, requires_grad=True)
        h_re = T.Tensor(rng.standard_normal(channels), requires_grad=True)
        h_im = T.Tensor(rng.standard_normal(channels), requires_grad=True)
        leaves = [a_re, a_im, b_re, b_im, h_re, h_im]
        w = T.Tensor(rng.standard_normal((2, steps, channels)))

        def loss():
            states = S.linear_recurrence(a_re, a_im, b_re, b_im, h_re, h_im,
                                         variant=variant, workers=workers)
            return T.reduce_sum(states * w)

        got = tape_gradients(loss, leaves)
        want = fd_gradients(lambda: float(loss().data), [t.data for t in leaves], eps=1e-5)
        for g, f in zip(got, want):
            assert rel_err(g, f) < 1e-4


def test_linear_recurrence_forward_matches_sequential():
    rng = np.random.default_rng(11)
    el = random_elems(rng, 40, 3)
    out = S.linear_recurrence(T.Tensor(el.a_re), T.Tensor(el.a_im),
                              T.Tensor(el.b_re), T.Tensor(el.b_im))
    states, _ = S.scan_sequential(el)
    np.testing.assert_array_equal(out.data[0], states.re)
    np.testing.assert_array_equal(out.data[1], states.im)


def test_backward_variants_agree():
    rng = np.random.default_rng(12)
    elems = random_elems(rng, 260, 4)
    h0 = random_carry(rng, 4)
    states, _ = S.scan_sequential(elems, h0)
    g_re = rng.standard_normal(states.re.shape).astype(np.float32)
    g_im = rng.standard_normal(states.re.shape).astype(np.float32)
    base_el, base_h = S.scan_backward(elems, h0, states, g_re, g_im, variant="sequential")
    for variant, workers in (("tree", 1), ("chunked", 4)):
        el, h = S.scan_backward(elems, h0, states, g_re, g_im, variant=variant, workers=workers)
        for got, want in ((el.a_re, base_el.a_re), (el.b_re, base_el.b_re), (h.h_re, base_h.h_re)):
            mean, peak = mean_max_rel(got, want)
            assert peak < 1e-2, (variant, mean, peak)


def test_benchmark_reports_all_variants():
    rates = S.benchmark(steps=2048, channels=8, workers=(1, 2), repeats=1)
    assert set(rates) == {"sequential", "tree", "chunked_w1", "chunked_w2"}
    assert all(r > 0 for r in rates.values())
