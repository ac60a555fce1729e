import numpy as np
import pytest

from facejitter.population import build_synthetic_model


@pytest.fixture(scope="session")
def model():
    """Default-resolution synthetic model (about 4.9k vertices)."""
    return build_synthetic_model(0)


@pytest.fixture(scope="session")
def small_model():
    """Coarse model for tests that only exercise plumbing."""
    return build_synthetic_model(1, n_subjects=40, n_expressions=20, rank_subject=10,
                                 rank_expression=5, n_lon=48, n_lat=25)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
