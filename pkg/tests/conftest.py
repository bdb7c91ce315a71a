import numpy as np
import pytest

from poisonforge import models
from poisonforge.linalg import BoxDomain, RngStream


@pytest.fixture
def rng():
    return RngStream(1234)


def random_dataset(rng, n=12, m=5, domain=(-10.0, 10.0)):
    X = rng.standard_normal((n, m))
    y = (rng.uniform(n) > 0.5).astype(float)
    return models.Dataset(X, y, BoxDomain.cube(*domain))


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    scale = max(np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


def safe_fixture(spec, data, w, margin=1e-6):
    """True when no pre-activation sits within `margin` of a leaky kink."""
    if spec.kind == "logreg":
        return True
    from poisonforge.models import _forward
    zs, _ = _forward(spec, data.X, w)
    return all(np.min(np.abs(z)) > margin for z in zs[:-1])
