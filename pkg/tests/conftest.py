import pytest
from threadpoolctl import threadpool_limits

from egt import tensor as T


@pytest.fixture(autouse=True, scope="session")
def single_thread():
    with threadpool_limits(1):
        yield


@pytest.fixture
def f64():
    with T.precision("float64"):
        yield
