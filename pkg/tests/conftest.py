import pytest

from petctseg.data import generate_phantom_cohort


@pytest.fixture(scope="session")
def phantom_cohort():
    """Small deterministic cohort shared by data/metrics/trainer tests."""
    return generate_phantom_cohort(12, (8, 32, 32), seed=7)
