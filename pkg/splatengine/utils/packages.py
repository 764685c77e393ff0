from importlib.metadata import PackageNotFoundError, version

PACKAGE_NAME = "splatengine"


def get_package_version(package_name: str = PACKAGE_NAME) -> str:
    """Installed version of a package, or "unknown" from a source tree."""
    try:
        return version(package_name)
    except PackageNotFoundError:
        return "unknown"
