import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from tse.elliptical import RectangleProbSettings


def z_within(analytic, estimate, se, k=4.0):
    """True when every entry of |analytic - estimate| is within k standard errors."""
    a = np.asarray(analytic, dtype=float)
    e = np.asarray(estimate, dtype=float)
    s = np.maximum(np.asarray(se, dtype=float), 1e-300)
    return bool(np.all(np.abs(a - e) <= k * s))


def max_z(analytic, estimate, se):
    a = np.asarray(analytic, dtype=float)
    e = np.asarray(estimate, dtype=float)
    s = np.maximum(np.asarray(se, dtype=float), 1e-300)
    return float(np.max(np.abs(a - e) / s))


@pytest.fixture
def rng():
    return np.random.default_rng(20260808)


@pytest.fixture
def fast_settings():
    """Cheaper QMC budget for Monte Carlo comparisons where 1e-5 accuracy suffices."""
    return RectangleProbSettings(max_points=4000, num_shifts=8, seed=7,
                                 target_abs_error=1e-4)
