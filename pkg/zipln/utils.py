from typing import Any, List
import hashlib

import numpy as np
from scipy.special import expit, logit

from .errors import ConfigurationError

MAX_SEED = 2**63 - 1
# Variational probabilities are kept this far from {0, 1} inside logarithms.
P_CLAMP = 1e-7


def coerce_seed(value: Any) -> int:
    """User-supplied seed as an int in [0, MAX_SEED]."""
    try:
        seed = int(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"seed must be an integer, got {value!r}")
    if seed < 0 or seed > MAX_SEED:
        raise ConfigurationError(f"seed must be between 0 and {MAX_SEED}")
    return seed


def spawn_seeds(seed: int, count: int) -> List[np.random.SeedSequence]:
    """Independent child streams of one root seed, one per job.

    The i-th child only depends on (seed, i), so results do not depend on how
    jobs are scheduled.
    """
    return np.random.SeedSequence(coerce_seed(seed)).spawn(max(int(count), 0))


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    return np.random.default_rng(coerce_seed(seed))


def sigmoid(x):
    return expit(x)


def clamped_logit(p):
    return logit(np.clip(p, P_CLAMP, 1.0 - P_CLAMP))


def fingerprint(counts: np.ndarray) -> str:
    """sha256 of the count matrix (shape and integer values)."""
    arr = np.ascontiguousarray(np.asarray(counts, dtype=np.int64))
    h = hashlib.sha256()
    h.update(f"{arr.shape[0]}x{arr.shape[1]}".encode())
    h.update(arr.tobytes())
    return h.hexdigest()
