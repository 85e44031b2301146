import dataclasses
import hashlib
import itertools
import json

import fsspec
import numpy as np


# https://alexwlchan.net/2018/12/iterating-in-fixed-size-chunks/
def chunked_iterable(iterable, size):
    it = iter(iterable)
    while True:
        chunk = tuple(itertools.islice(it, size))
        if not chunk:
            break
        yield chunk


def parse_frame_range(text):
    """Parse an ``a..b`` range (both ends inclusive, either end optional)."""
    if text is None:
        return None
    start, sep, stop = text.partition("..")
    if not sep:
        index = int(start)
        return slice(index, index + 1)
    return slice(int(start) if start else None, int(stop) + 1 if stop else None)


def to_jsonable(obj):
    """Convert dataclasses, numpy values and tuples into plain JSON types."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def canonical_json(obj) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"))


def config_hash(*parts) -> str:
    """SHA-256 of the canonical JSON of everything that shapes an artifact."""
    return hashlib.sha256(canonical_json(list(parts)).encode("utf-8")).hexdigest()


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with fsspec.open(path, mode="rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
