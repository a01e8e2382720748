import numpy as np
import pytest
from scipy.special import logit

from zipln.errors import ConfigurationError
from zipln.utils import (
    P_CLAMP,
    clamped_logit,
    coerce_seed,
    fingerprint,
    make_rng,
    spawn_seeds,
)


def test_coerce_seed_is_strict():
    assert coerce_seed("7") == 7
    assert coerce_seed(0) == 0
    for bad in (-1, "nope", None, 2**63):
        with pytest.raises(ConfigurationError):
            coerce_seed(bad)


def test_spawned_streams_are_stable_and_distinct():
    a = [s.generate_state(1)[0] for s in spawn_seeds(11, 4)]
    b = [s.generate_state(1)[0] for s in spawn_seeds(11, 6)]
    assert a == b[:4]
    assert len(set(a)) == 4


def test_make_rng_accepts_generators_and_sequences():
    gen = np.random.default_rng(1)
    assert make_rng(gen) is gen
    seq = np.random.SeedSequence(5)
    assert make_rng(seq).integers(1 << 30) == np.random.default_rng(np.random.SeedSequence(5)).integers(1 << 30)
    assert make_rng(3).random() == np.random.default_rng(3).random()


def test_clamped_logit_is_finite_at_the_boundary():
    values = clamped_logit(np.array([0.0, 0.5, 1.0]))
    assert np.all(np.isfinite(values))
    assert values[0] == pytest.approx(logit(P_CLAMP))
    assert values[1] == 0.0


def test_fingerprint_depends_on_shape_and_values():
    Y = np.arange(6).reshape(2, 3)
    assert fingerprint(Y) == fingerprint(Y.astype(float))
    assert fingerprint(Y) != fingerprint(Y.reshape(3, 2))
    Z = Y.copy()
    Z[0, 0] = 1
    assert fingerprint(Y) != fingerprint(Z)
