import numpy as np
import pytest


def finite_difference_grads(f, arrays, h=1e-3):
    """Central finite differences of a scalar function of float32 arrays."""
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = f(arrays)
            flat[i] = orig - h
            minus = f(arrays)
            flat[i] = orig
            g.reshape(-1)[i] = (plus - minus) / (2.0 * h)
        grads.append(g)
    return grads


def grad_rel_error(fd, ad):
    """Max absolute deviation relative to the gradient scale."""
    fd = np.asarray(fd, dtype=np.float64)
    ad = np.asarray(ad, dtype=np.float64)
    scale = max(np.abs(fd).max(), np.abs(ad).max(), 1e-8)
    return float(np.abs(fd - ad).max() / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(42)
