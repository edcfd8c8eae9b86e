import numpy as np
import pytest

from augscore import autodiff as ad


def central_diff(f, arrays, eps=1e-5):
    """Central finite differences of a scalar function of numpy arrays.

    ``f`` receives the arrays and returns a float.  Returns one gradient
    array per input.  Everything runs in float64.
    """
    grads = []
    for k, base in enumerate(arrays):
        base = np.asarray(base, dtype=np.float64)
        g = np.zeros_like(base)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            bumped = [np.array(a, dtype=np.float64, copy=True) for a in arrays]
            bumped[k].reshape(-1)[i] = flat[i] + eps
            hi = f(*bumped)
            bumped[k].reshape(-1)[i] = flat[i] - eps
            lo = f(*bumped)
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def check_grads(build, arrays, rtol=1e-4, eps=1e-5):
    """Compare autodiff gradients of ``build`` against central differences.

    ``build`` maps tracked Tensors to a scalar Tensor.
    """
    tensors = [ad.tensor(a, dtype=np.float64, track=True) for a in arrays]
    loss = build(*tensors)
    gmap = ad.backward(loss)

    def as_float(*arrs):
        return float(build(*[ad.tensor(a, dtype=np.float64) for a in arrs]).data)

    fd = central_diff(as_float, arrays, eps=eps)
    for t, g_fd in zip(tensors, fd):
        g_ad = gmap[t].data
        scale = max(np.max(np.abs(g_fd)), 1.0)
        np.testing.assert_allclose(g_ad, g_fd, rtol=rtol, atol=rtol * scale)


@pytest.fixture
def rngs():
    return np.random.default_rng(0)
