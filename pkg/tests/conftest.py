"""Shared oracles: finite-difference gradients and tolerance helpers."""

import numpy as np
import pytest

from hrnn import tensor as T


def rel_err(got: np.ndarray, want: np.ndarray) -> float:
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    scale = max(np.abs(want).max(initial=0.0), 1e-12)
    return float(np.abs(got - want).max(initial=0.0) / scale)


def fd_gradients(loss_fn, arrays, eps=1e-5):
    """Central finite differences of loss_fn() w.r.t. each array, mutating the
    arrays in place one coordinate at a time.  Run under float64."""
    grads = []
    for x in arrays:
        g = np.zeros_like(x)
        xf, gf = x.reshape(-1), g.reshape(-1)
        for j in range(xf.size):
            orig = xf[j]
            xf[j] = orig + eps
            fp = loss_fn()
            xf[j] = orig - eps
            fm = loss_fn()
            xf[j] = orig
            gf[j] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads


def tape_gradients(loss_fn, leaves):
    """Gradients of loss_fn() w.r.t. requires_grad leaf tensors via the tape."""
    with T.recording():
        loss = loss_fn()
        grads = T.backward(loss)
    return [grads[t].data if t in grads else np.zeros_like(t.data) for t in leaves]


def assert_grads_match(build_loss, leaves, eps=1e-5, tol=1e-4):
    """Dual-route check: tape backward vs central finite differences.
    Must be called with float64 tensors (use T.precision('float64'))."""
    got = tape_gradients(build_loss, leaves)
    want = fd_gradients(lambda: _loss_value(build_loss), [t.data for t in leaves], eps=eps)
    for g, w, t in zip(got, want, leaves):
        err = rel_err(g, w)
        assert err < tol, f"gradient mismatch for leaf {t.shape}: rel err {err:.3e}"


def _loss_value(build_loss) -> float:
    return float(build_loss().data)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
