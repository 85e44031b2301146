import io
import struct

import numpy as np
import pytest

from avh_forge.formats import (
    FormatError,
    dumps_json,
    format_obj,
    parse_obj,
    read_json,
    read_obj,
    read_pfm,
    read_png,
    read_weights,
    to_uint8,
    write_json,
    write_obj,
    write_pfm,
    write_png,
    write_weights,
)

QUAD_OBJ = """\
# a unit quad
o quad
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
vt 0 0
vt 1 0
vt 1 1
vt 0 1
vn 0 0 1
usemtl skin
f 1/1/1 2/2/1 3/3/1 4/4/1
"""


def test_parse_obj_fans_polygons():
    mesh = parse_obj(QUAD_OBJ)
    np.testing.assert_array_equal(mesh.faces, [(0, 1, 2), (0, 2, 3)])
    np.testing.assert_allclose(mesh.uv_corners[1], [(0, 0), (1, 1), (0, 1)])
    np.testing.assert_allclose(mesh.vertex_normals, [(0, 0, 1)] * 4)


def test_parse_obj_negative_indices():
    mesh = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n")
    np.testing.assert_array_equal(mesh.faces, [(0, 1, 2)])
    assert mesh.uv_corners is None
    assert mesh.vertex_normals is None


def test_parse_obj_partial_texcoords(caplog):
    text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nvt 0 0\nf 1/1 2/1 3/1\nf 2 4 3\n"
    mesh = parse_obj(text)
    assert mesh.uv_corners is None
    assert "only some faces" in caplog.text


@pytest.mark.parametrize(
    "text",
    [
        "",
        "v 0 0 0\nv 1 0 0\nf 1 2\n",
        "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n",
        "v 0 0 zero\n",
        "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n",
    ],
)
def test_parse_obj_errors(text):
    with pytest.raises(FormatError):
        parse_obj(text)


def test_obj_file_round_trip(tmp_path, unit_quad):
    path = str(tmp_path / "quad.obj")
    write_obj(path, unit_quad, comment="unit quad")
    with open(path) as f:
        assert f.readline() == "# unit quad\n"
    mesh = read_obj(path)
    np.testing.assert_allclose(mesh.vertices, unit_quad.vertices)
    np.testing.assert_array_equal(mesh.faces, unit_quad.faces)
    np.testing.assert_allclose(mesh.uv_corners, unit_quad.uv_corners)
    np.testing.assert_allclose(mesh.vertex_normals, unit_quad.vertex_normals)


def test_format_obj_shares_texcoords(unit_quad):
    text = format_obj(unit_quad.replace(vertex_normals=None))
    assert sum(line.startswith("vt ") for line in text.splitlines()) == 4
    # the table is sorted: (0, 0), (0, 1), (1, 0), (1, 1)
    assert "f 1/1 2/3 3/4" in text.splitlines()
    assert "f 1/1 3/4 4/2" in text.splitlines()


def test_pfm_bytes():
    grid = np.array([[1.0], [2.0]])
    out = io.BytesIO()
    write_pfm(out, grid)
    # rows go bottom-first
    assert out.getvalue() == b"Pf\n1 2\n-1.0\n" + struct.pack("<2f", 2.0, 1.0)


def test_pfm_big_endian():
    data = b"PF\n1 1\n1.0\n" + struct.pack(">3f", 0.25, -1.5, 3.0)
    grid = read_pfm(io.BytesIO(data))
    assert grid.dtype == np.float32
    np.testing.assert_array_equal(grid, [[(0.25, -1.5, 3.0)]])


@pytest.mark.parametrize("shape", [(3, 5), (3, 5, 3), (4, 2, 1)])
def test_pfm_file(tmp_path, shape):
    grid = np.random.default_rng(0).normal(size=shape).astype(np.float32)
    path = str(tmp_path / "grid.pfm")
    write_pfm(path, grid)
    expected = grid[..., 0] if shape[-1] == 1 else grid
    np.testing.assert_array_equal(read_pfm(path), expected)


@pytest.mark.parametrize(
    "data",
    [
        b"P6\n1 1\n-1.0\n" + bytes(4),
        b"Pf\n1 1\n-1.0\n" + bytes(3),
        b"Pf\none 1\n-1.0\n" + bytes(4),
        b"Pf\n1 1",
    ],
)
def test_pfm_errors(data):
    with pytest.raises(FormatError):
        read_pfm(io.BytesIO(data))


def test_pfm_rejects_two_channels():
    with pytest.raises(FormatError):
        write_pfm(io.BytesIO(), np.zeros((2, 2, 2)))


def test_png_rgb(tmp_path):
    image = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3) * 10
    path = str(tmp_path / "image.png")
    write_png(path, image)
    np.testing.assert_array_equal(read_png(path), image)


def test_png_float_mask():
    out = io.BytesIO()
    write_png(out, np.array([[0.0, 0.5], [1.0, 2.0]]))
    out.seek(0)
    np.testing.assert_array_equal(read_png(out, grayscale=True), [[0, 128], [255, 255]])


def test_png_bad_shape():
    with pytest.raises(FormatError):
        write_png(io.BytesIO(), np.zeros((2, 2, 2), dtype=np.uint8))


def test_to_uint8():
    np.testing.assert_array_equal(to_uint8([-1.0, 0.2, 129 / 255, 1.5]), [0, 51, 129, 255])


def test_json_sorted_and_plain(tmp_path):
    path = str(tmp_path / "sidecar.json")
    write_json(path, {"b": np.float32(0.5), "a": (1, 2), "c": np.arange(2)})
    assert read_json(path) == {"a": [1, 2], "b": 0.5, "c": [0, 1]}
    assert dumps_json({"b": 1, "a": 2}).index('"a"') < dumps_json({"b": 1, "a": 2}).index('"b"')


def test_json_invalid():
    with pytest.raises(FormatError):
        read_json(io.BytesIO(b"{not json"))


def test_weights_file(tmp_path):
    tensors = [("fc.weight", np.ones((2, 3))), ("fc.bias", np.arange(3.0)), ("scale", 2.0)]
    path = str(tmp_path / "weights.avhw")
    write_weights(path, {"latent_size": 4}, tensors)
    config, loaded = read_weights(path)
    assert config == {"latent_size": 4}
    assert list(loaded) == ["fc.weight", "fc.bias", "scale"]
    assert loaded["fc.weight"].dtype == np.float32
    np.testing.assert_array_equal(loaded["fc.bias"], [0, 1, 2])
    assert loaded["scale"].shape == ()
    with open(path, "rb") as f:
        assert f.read(8) == b"AVHW" + struct.pack("<I", 1)


def test_weights_errors():
    out = io.BytesIO()
    write_weights(out, {}, [("w", np.ones(4))])
    data = out.getvalue()
    with pytest.raises(FormatError, match="not an AVHW"):
        read_weights(io.BytesIO(b"XXXX" + data[4:]))
    with pytest.raises(FormatError, match="version"):
        read_weights(io.BytesIO(data[:4] + struct.pack("<I", 9) + data[8:]))
    with pytest.raises(FormatError, match="truncated"):
        read_weights(io.BytesIO(data[:-2]))
