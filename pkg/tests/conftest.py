import pytest

from twoscale.models import builtin


@pytest.fixture(scope="session")
def sincos():
    return builtin("SINCOS")


@pytest.fixture(scope="session")
def lingauss():
    return builtin("LINGAUSS")


@pytest.fixture(scope="session")
def ou2d():
    return builtin("OU2D")
