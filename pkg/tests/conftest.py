"""Shared fixtures: models and datasets that several test modules reuse."""

import numpy as np
import pytest

from morphfit.synthetic import (DatasetSpec, PoseRanges, SyntheticModelSpec,
                                build_dataset, generate_model)

# Pose ranges wide enough to exercise real rotation/scale variation in the
# fitting tests; the near-frontal defaults are deliberately much tighter.
WIDE_RANGES = PoseRanges(yaw=(-0.15, 0.15), pitch=(-0.25, 0.25),
                         roll=(-0.15, 0.15), scale=(0.9, 1.1),
                         tx=(-0.1, 0.1), ty=(-0.1, 0.1), tz=(-0.1, 0.1))


@pytest.fixture(scope="session")
def desk_model():
    """Default desk-scale model: 600 vertices, 20 identity / 8 residual axes."""
    return generate_model(SyntheticModelSpec())


@pytest.fixture(scope="session")
def small_model():
    return generate_model(SyntheticModelSpec(n_vertices=150, k_id=6, k_exp=4,
                                             smoothness=0.5, seed=5))


@pytest.fixture(scope="session")
def default_dataset(desk_model):
    """The K=20 x M=10 default dataset at 32x32, seed 0."""
    return build_dataset(desk_model, DatasetSpec())
