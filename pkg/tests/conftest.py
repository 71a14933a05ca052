"""Shared problem builders for the test suite.

``random_problem`` makes tiny instances with random data and weights, the
workhorse for oracle agreement checks.  ``bench_problem`` is the 32x32
synthetic scan used by the acceptance suite, built once per session.
"""

import numpy as np
import pytest

from macetomo.config import default_config
from macetomo.geometry import Geometry, build_system_matrix
from macetomo.models import PriorParams, ReconProblem
from macetomo.runner import prepare_problem


def random_problem(seed=0, n_side=6, n_views=12, n_channels=9, beta=0.5,
                   kind="quadratic-mrf", sigma_x=1.0):
    """Small reconstruction problem with random data and positive weights."""
    rng = np.random.default_rng(seed)
    geom = Geometry(
        n_side=n_side,
        pixel_pitch=1.0,
        n_views=n_views,
        n_channels=n_channels,
        channel_pitch=n_side / n_channels * 1.1,
    )
    matrices = build_system_matrix(geom)
    y = rng.standard_normal((n_views, n_channels))
    weights = 0.5 + rng.random((n_views, n_channels))
    prior = PriorParams(kind=kind, beta=beta, sigma_x=sigma_x)
    return ReconProblem(geom, matrices, y, weights, prior)


@pytest.fixture(scope="session")
def bench():
    """The 32x32 / 64-view / 96-channel default problem plus its phantom."""
    cfg = default_config()
    problem, phantom, _ = prepare_problem(cfg)
    return {"problem": problem, "phantom": phantom, "sigma": 0.03}
