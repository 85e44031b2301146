from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("avh-forge")
except PackageNotFoundError:  # noqa: F401
    # package is not installed
    pass

del version, PackageNotFoundError
