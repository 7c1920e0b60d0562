import numpy as np
import pytest

from hategraph import autodiff as ad


def set_data(t: ad.Tensor, arr: np.ndarray) -> None:
    """Rebind a leaf tensor's storage (test-only knob for FD perturbations)."""
    arr = np.array(arr, dtype=t.dtype)
    arr.flags.writeable = False
    t.data = arr


def fd_grads(f, params, h=1e-5):
    """Central-difference gradients of a scalar-valued ``f()`` w.r.t. leaf tensors.

    Independent of the reverse-mode engine: it only re-evaluates the forward
    function with perturbed leaf data.  Use float64 leaves.
    """
    grads = []
    for p in params:
        base = p.data.copy()
        g = np.zeros_like(base)
        flat = g.reshape(-1)
        base_flat = base.reshape(-1)
        for i in range(base_flat.size):
            orig = base_flat[i]
            base_flat[i] = orig + h
            set_data(p, base)
            up = float(f())
            base_flat[i] = orig - h
            set_data(p, base)
            down = float(f())
            base_flat[i] = orig
            flat[i] = (up - down) / (2.0 * h)
        set_data(p, base)
        grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-4):
    """Per-element |a - n| / max(1, |n|) < rtol."""
    for a, n in zip(analytic, numeric):
        denom = np.maximum(1.0, np.abs(n))
        err = np.abs(a - n) / denom
        assert err.max() < rtol, f"max relative error {err.max():.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(0)
