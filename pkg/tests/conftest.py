# Test-environment defaults. Settings reads the environment once at import;
# CI has no .env, so pin the values the tests rely on before any zipln module
# is imported. setdefault keeps a real local value if one is exported.
import os

os.environ.setdefault("ZIPLN_MAX_ITERS", "1000")
os.environ.setdefault("ZIPLN_TOL", "1e-6")
os.environ.setdefault("ZIPLN_WINDOW", "10")
os.environ.setdefault("ZIPLN_LEARNING_RATE", "0.01")
os.environ.setdefault("ZIPLN_JOBS", "1")
os.environ.setdefault("ZIPLN_LOG_LEVEL", "WARNING")

import numpy as np
import pytest

from zipln.model import CountDataset, ModelParams, VariationalParams, ZIVariant


def random_instance(rng, n=6, p=3, d=2, variant=ZIVariant.ND, d0=2, offsets=True):
    """Small random (data, theta, psi) with moderate magnitudes and some zeros in Y."""
    X = rng.normal(size=(n, d))
    X[:, 0] = 1.0
    O = rng.normal(0.0, 0.3, size=(n, p)) if offsets else np.zeros((n, p))
    Y = rng.poisson(1.5, size=(n, p))
    Y[rng.random((n, p)) < 0.3] = 0
    Y[0, 0] = 0
    Y[-1, -1] = max(Y[-1, -1], 2)
    X0 = X0bar = zi = None
    if variant == ZIVariant.ND:
        zi = rng.normal(size=1)
    elif variant == ZIVariant.CD:
        X0 = rng.normal(size=(n, d0))
        zi = rng.normal(0.0, 0.5, size=(d0, p))
    elif variant == ZIVariant.RD:
        X0bar = rng.normal(size=(d0, p))
        zi = rng.normal(0.0, 0.5, size=(n, d0))
    data = CountDataset.from_arrays(Y, X=X, O=O, X0=X0, X0bar=X0bar)
    C = np.tril(rng.normal(0.0, 0.2, size=(p, p)), -1) + np.diag(rng.uniform(0.7, 1.3, size=p))
    theta = ModelParams.from_factor(C, rng.normal(0.0, 0.5, size=(d, p)), variant, zi)
    P = rng.uniform(0.1, 0.9, size=(n, p)) * data.zero_mask
    if variant == ZIVariant.NONE:
        P = np.zeros((n, p))
    psi = VariationalParams(M=rng.normal(0.0, 0.5, size=(n, p)), S=rng.uniform(0.5, 1.2, size=(n, p)), P=P)
    return data, theta, psi


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
