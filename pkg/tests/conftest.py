import numpy as np
import pytest


def numeric_grad(fn, x, step=1e-4):
    """Central-difference gradient of scalar ``fn`` with respect to array ``x``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(x)
        flat[i] = orig - step
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return g


def assert_grads_close(analytic, numeric, rtol=1e-4, floor=1e-7):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    bad = diff > np.maximum(floor, rtol * scale)
    assert not bad.any(), (
        "gradient mismatch at %d/%d entries; worst diff %.3e (analytic %.6e vs numeric %.6e)"
        % (bad.sum(), bad.size, diff[bad].max(),
           analytic[bad][np.argmax(diff[bad])], numeric[bad][np.argmax(diff[bad])])
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)
