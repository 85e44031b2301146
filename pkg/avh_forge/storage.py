import os
from abc import ABC, abstractmethod
from contextlib import contextmanager
from dataclasses import dataclass
from typing import BinaryIO, List, NoReturn

import fsspec


class AbstractTarget(ABC):
    @abstractmethod
    def get_mapper(self, path=""):
        pass

    @abstractmethod
    def exists(self, path) -> bool:
        """Check that the file exists."""
        pass

    @abstractmethod
    def rm(self, path, recursive=False) -> NoReturn:
        """Remove file."""
        pass

    @abstractmethod
    def ls(self, path="") -> List[str]:
        """List the names directly under ``path``."""
        pass

    @contextmanager
    def open(self, path, **kwargs) -> BinaryIO:
        """Open file with a context manager."""
        pass


@dataclass
class FSSpecTarget(AbstractTarget):
    """Representation of a storage location for pipeline artifacts.

    :param fs: The filesystem object we are writing to.
    :param root_path: The path under which the artifacts will be stored.
    """

    fs: fsspec.AbstractFileSystem
    root_path: str = ""

    @classmethod
    def from_url(cls, url: str, **storage_options) -> "FSSpecTarget":
        fs, root_path = fsspec.core.url_to_fs(url, **storage_options)
        return cls(fs, root_path)

    def get_mapper(self, path="") -> fsspec.mapping.FSMap:
        """Get a mutable mapping object suitable for storing Zarr data."""
        return self.fs.get_mapper(self._full_path(path) if path else self.root_path)

    def _full_path(self, path):
        return os.path.join(self.root_path, path)

    def url(self, path="") -> str:
        """The full path of ``path`` on the target's filesystem."""
        return self._full_path(path)

    def exists(self, path) -> bool:
        """Check that the file is in the target."""
        return self.fs.exists(self._full_path(path))

    def rm(self, path, recursive=False) -> NoReturn:
        """Remove file from the target."""
        self.fs.rm(self._full_path(path), recursive=recursive)

    def ls(self, path="") -> List[str]:
        full = self._full_path(path)
        if not self.fs.isdir(full):
            return []
        return sorted(os.path.basename(p.rstrip("/")) for p in self.fs.ls(full, detail=False))

    @contextmanager
    def open(self, path, **kwargs) -> BinaryIO:
        """Open file with a context manager; parent directories are created for writing."""
        full = self._full_path(path)
        if "w" in kwargs.get("mode", "rb"):
            self.fs.makedirs(os.path.dirname(full), exist_ok=True)
        with self.fs.open(full, **kwargs) as f:
            yield f

    def __post_init__(self):
        if not self.fs.isdir(self.root_path):
            self.fs.makedirs(self.root_path, exist_ok=True)


class UninitializedTarget(AbstractTarget):
    def get_mapper(self, path=""):
        raise UninitializedTargetError

    def exists(self, path) -> bool:
        raise UninitializedTargetError

    def rm(self, path, recursive=False) -> NoReturn:
        raise UninitializedTargetError

    def ls(self, path="") -> List[str]:
        raise UninitializedTargetError

    def open(self, path, **kwargs) -> BinaryIO:
        raise UninitializedTargetError


class TargetError(Exception):
    """Base class for exceptions in this module."""

    pass


class UninitializedTargetError(TargetError):
    """Operation on an uninitialized Target."""

    pass
