import numpy as np
import pytest

from spikingformer import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64_engine():
    """Run a test with the tensor engine in float64 (finite-difference work)."""
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(np.float32)


def finite_difference(f, params, h=1e-3):
    """Central-difference gradients of scalar f() wrt a list of Tensors."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data, dtype=np.float64)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f()
            flat[i] = orig - h
            lo = f()
            flat[i] = orig
            g.reshape(-1)[i] = (hi - lo) / (2 * h)
        grads.append(g)
    return grads


def relative_error(a, b, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / denom
