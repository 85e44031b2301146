"""
Readers and writers for the files the pipeline exchanges.

* OBJ subset: ``v``, ``vt``, ``vn`` and ``f`` records; polygons are fan-triangulated.
* PNG: 8-bit RGB textures and 8-bit single-channel masks / previews.
* PFM: 32-bit float grids, ``PF`` (3 channels) or ``Pf`` (1 channel), always
  written little-endian (scale ``-1.0``) with rows stored bottom-first.
* JSON sidecars with sorted keys.
* AVHW: decoder weight files.

Every function accepts either a path/URL (opened with fsspec) or an open
binary file object.
"""

import io
import json
import logging
import struct
from contextlib import contextmanager
from typing import Dict, List, Tuple

import fsspec
import numpy as np
from PIL import Image

from .mesh import TriMesh
from .utils import to_jsonable

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"AVHW"
WEIGHTS_VERSION = 1


@contextmanager
def _opened(path_or_file, mode):
    if hasattr(path_or_file, "read") or hasattr(path_or_file, "write"):
        yield path_or_file
    else:
        with fsspec.open(path_or_file, mode=mode) as f:
            yield f


# OBJ


def _corner_index(token: str, count: int) -> int:
    i = int(token)
    if i < 0:
        i += count
    else:
        i -= 1
    if i < 0 or i >= count:
        raise FormatError(f"OBJ index {token} out of range")
    return i


def _optional_index(corner, slot: int, count: int) -> int:
    if len(corner) > slot and corner[slot]:
        return _corner_index(corner[slot], count)
    return -1


def parse_obj(text: str) -> TriMesh:
    positions, texcoords, normals = [], [], []
    faces, face_uvs, face_normals = [], [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *fields = line.split()
        try:
            if tag == "v":
                positions.append([float(x) for x in fields[:3]])
            elif tag == "vt":
                texcoords.append([float(x) for x in fields[:2]])
            elif tag == "vn":
                normals.append([float(x) for x in fields[:3]])
            elif tag == "f":
                corners = [c.split("/") for c in fields]
                if len(corners) < 3:
                    raise FormatError(f"line {lineno}: face with fewer than 3 corners")
                for k in range(1, len(corners) - 1):
                    tri = [corners[0], corners[k], corners[k + 1]]
                    faces.append([_corner_index(c[0], len(positions)) for c in tri])
                    face_uvs.append([_optional_index(c, 1, len(texcoords)) for c in tri])
                    face_normals.append([_optional_index(c, 2, len(normals)) for c in tri])
            # other records (o, g, s, usemtl, mtllib, ...) are ignored
        except (ValueError, IndexError) as e:
            raise FormatError(f"line {lineno}: cannot parse {raw!r}") from e

    if not positions:
        raise FormatError("OBJ file has no vertices")
    vertices = np.array(positions, dtype=np.float64)
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
    face_uvs = np.array(face_uvs, dtype=np.int64).reshape(-1, 3)
    face_normals = np.array(face_normals, dtype=np.int64).reshape(-1, 3)

    uv_corners = None
    if len(faces) and np.all(face_uvs >= 0):
        uv_corners = np.array(texcoords, dtype=np.float64)[face_uvs]
    elif np.any(face_uvs >= 0):
        logger.warning("OBJ file gives texture coordinates for only some faces; dropping them")

    vertex_normals = None
    if len(faces) and np.all(face_normals >= 0):
        table = np.array(normals, dtype=np.float64)
        vertex_normals = np.zeros_like(vertices)
        vertex_normals[faces.ravel()] = table[face_normals.ravel()]
        if np.any(np.linalg.norm(vertex_normals, axis=1) == 0):
            vertex_normals = None
        else:
            vertex_normals /= np.linalg.norm(vertex_normals, axis=1, keepdims=True)
    return TriMesh(vertices, faces, uv_corners=uv_corners, vertex_normals=vertex_normals)


def read_obj(path_or_file) -> TriMesh:
    with _opened(path_or_file, "rb") as f:
        text = f.read().decode("utf-8")
    return parse_obj(text)


def format_obj(mesh: TriMesh, comment: str = "") -> str:
    out = io.StringIO()
    if comment:
        out.write(f"# {comment}\n")
    for x, y, z in mesh.vertices:
        out.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
    uv_index = None
    if mesh.has_uvs:
        table, uv_index = np.unique(mesh.uv_corners.reshape(-1, 2), axis=0, return_inverse=True)
        uv_index = uv_index.reshape(-1, 3)
        for u, v in table:
            out.write(f"vt {u:.9g} {v:.9g}\n")
    if mesh.vertex_normals is not None:
        for x, y, z in mesh.vertex_normals:
            out.write(f"vn {x:.9g} {y:.9g} {z:.9g}\n")
    for f, face in enumerate(mesh.faces + 1):
        corners = []
        for k, v in enumerate(face):
            vt = "" if uv_index is None else str(uv_index[f, k] + 1)
            if mesh.vertex_normals is not None:
                corners.append(f"{v}/{vt}/{v}")
            elif vt:
                corners.append(f"{v}/{vt}")
            else:
                corners.append(str(v))
        out.write("f " + " ".join(corners) + "\n")
    return out.getvalue()


def write_obj(path_or_file, mesh: TriMesh, comment: str = ""):
    with _opened(path_or_file, "wb") as f:
        f.write(format_obj(mesh, comment).encode("utf-8"))


# PNG


def to_uint8(values) -> np.ndarray:
    """Quantize values in ``[0, 1]`` to 8 bits (value x 255, rounded)."""
    values = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.round(values * 255.0).astype(np.uint8)


def write_png(path_or_file, image):
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = to_uint8(image)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[..., 0]
    if not (image.ndim == 2 or (image.ndim == 3 and image.shape[2] == 3)):
        raise FormatError(f"cannot write an image of shape {image.shape} as PNG")
    pil = Image.fromarray(np.ascontiguousarray(image))
    with _opened(path_or_file, "wb") as f:
        pil.save(f, format="PNG")


def read_png(path_or_file, grayscale: bool = False) -> np.ndarray:
    with _opened(path_or_file, "rb") as f:
        with Image.open(f) as pil:
            pil = pil.convert("L" if grayscale else "RGB")
            return np.array(pil, dtype=np.uint8)


def read_textured_obj(obj_path, texture_path) -> TriMesh:
    mesh = read_obj(obj_path)
    return mesh.replace(texture=read_png(texture_path))


# PFM


def write_pfm(path_or_file, grid):
    grid = np.asarray(grid, dtype=np.float32)
    if grid.ndim == 3 and grid.shape[2] == 1:
        grid = grid[..., 0]
    if grid.ndim == 2:
        identifier = b"Pf"
    elif grid.ndim == 3 and grid.shape[2] == 3:
        identifier = b"PF"
    else:
        raise FormatError(f"PFM holds 1 or 3 channels, got shape {grid.shape}")
    height, width = grid.shape[:2]
    header = identifier + b"\n" + f"{width} {height}\n-1.0\n".encode("ascii")
    data = np.ascontiguousarray(np.flipud(grid)).astype("<f4").tobytes()
    with _opened(path_or_file, "wb") as f:
        f.write(header + data)


def _read_header_line(f) -> str:
    line = f.readline()
    if not line.endswith(b"\n"):
        raise FormatError("unexpected end of PFM header")
    return line.decode("ascii").strip()


def read_pfm(path_or_file) -> np.ndarray:
    """Read a PFM file into ``(H, W)`` (``Pf``) or ``(H, W, 3)`` (``PF``) float32."""
    with _opened(path_or_file, "rb") as f:
        identifier = _read_header_line(f)
        if identifier == "PF":
            channels = 3
        elif identifier == "Pf":
            channels = 1
        else:
            raise FormatError(f"unrecognized PFM identifier {identifier!r}")
        try:
            width, height = (int(x) for x in _read_header_line(f).split())
            scale = float(_read_header_line(f))
        except ValueError as e:
            raise FormatError("malformed PFM header") from e
        dtype = "<f4" if scale < 0 else ">f4"
        payload = f.read()
    expected = width * height * channels * 4
    if len(payload) != expected:
        raise FormatError(f"PFM payload has {len(payload)} bytes, expected {expected}")
    grid = np.frombuffer(payload, dtype=dtype).reshape(height, width, channels)
    grid = np.flipud(grid).astype(np.float32)
    return grid[..., 0] if channels == 1 else grid


# JSON


def dumps_json(obj) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=2) + "\n"


def write_json(path_or_file, obj):
    with _opened(path_or_file, "wb") as f:
        f.write(dumps_json(obj).encode("utf-8"))


def read_json(path_or_file):
    with _opened(path_or_file, "rb") as f:
        try:
            return json.loads(f.read().decode("utf-8"))
        except ValueError as e:
            raise FormatError(f"invalid JSON: {e}") from e


# AVHW weight files
#
#   magic "AVHW" | u32 version | u32 n + n bytes of config JSON |
#   u32 tensor count | per tensor: u16 n + n bytes of name, u8 ndim,
#   ndim x u32 dims, f32 data in C order
#
# All integers and floats are little-endian.


def write_weights(path_or_file, config: dict, tensors: List[Tuple[str, np.ndarray]]):
    out = io.BytesIO()
    out.write(WEIGHTS_MAGIC)
    out.write(struct.pack("<I", WEIGHTS_VERSION))
    blob = json.dumps(to_jsonable(config), sort_keys=True, separators=(",", ":")).encode("utf-8")
    out.write(struct.pack("<I", len(blob)))
    out.write(blob)
    out.write(struct.pack("<I", len(tensors)))
    for name, array in tensors:
        array = np.asarray(array)
        encoded = name.encode("utf-8")
        out.write(struct.pack("<H", len(encoded)))
        out.write(encoded)
        out.write(struct.pack("<B", array.ndim))
        out.write(struct.pack(f"<{array.ndim}I", *array.shape))
        out.write(np.ascontiguousarray(array).astype("<f4").tobytes())
    with _opened(path_or_file, "wb") as f:
        f.write(out.getvalue())


def read_weights(path_or_file) -> Tuple[dict, Dict[str, np.ndarray]]:
    with _opened(path_or_file, "rb") as f:
        buf = io.BytesIO(f.read())

    def take(fmt):
        size = struct.calcsize(fmt)
        chunk = buf.read(size)
        if len(chunk) != size:
            raise FormatError("truncated weight file")
        return struct.unpack(fmt, chunk)

    if buf.read(4) != WEIGHTS_MAGIC:
        raise FormatError("not an AVHW weight file")
    (version,) = take("<I")
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported weight file version {version}")
    (n,) = take("<I")
    config = json.loads(buf.read(n).decode("utf-8"))
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (n,) = take("<H")
        name = buf.read(n).decode("utf-8")
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) * 4
        data = buf.read(size)
        if len(data) != size:
            raise FormatError(f"truncated tensor {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)
    return config, tensors


class FormatError(Exception):
    """Base class for exceptions in this module."""

    pass
