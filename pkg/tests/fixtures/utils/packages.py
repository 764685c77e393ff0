from importlib.metadata import PackageNotFoundError
from unittest.mock import patch

import pytest

from splatengine.utils.packages import PACKAGE_NAME

MOCK_VERSION = "MOCK_VERSION"


@pytest.fixture
def patch_importlib_version():
    def mock_version(package_name):
        if package_name == PACKAGE_NAME:
            return MOCK_VERSION
        raise PackageNotFoundError(package_name)

    with patch(
        "splatengine.utils.packages.version", side_effect=mock_version
    ) as mock:
        yield mock
