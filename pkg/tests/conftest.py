# tests/conftest.py
import pytest
from prefect.testing.utilities import prefect_test_harness


@pytest.fixture(scope="session")
def prefect_backend():
    """Throwaway Prefect API for tests that run the training flow."""
    with prefect_test_harness():
        yield
