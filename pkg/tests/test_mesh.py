import numpy as np
import pytest

from avh_forge.mesh import (
    DegenerateMeshError,
    MeshError,
    TriMesh,
    bilinear_sample,
    compute_normals,
    interpolate,
    rasterize_uv,
    sample_texture,
    surface_at_texels,
    texel_centers,
    texel_to_surface,
)


def test_texel_centers_top_row_first():
    centers = texel_centers(2, 2)
    np.testing.assert_allclose(centers[0, 0], (0.25, 0.75))
    np.testing.assert_allclose(centers[1, 1], (0.75, 0.25))


def test_flat_normals(unit_quad):
    np.testing.assert_allclose(unit_quad.vertex_normals, [(0.0, 0.0, 1.0)] * 4)


def test_normals_of_degenerate_mesh():
    mesh = TriMesh(vertices=[(0, 0, 0), (1, 0, 0), (2, 0, 0)], faces=[(0, 1, 2)])
    with pytest.raises(DegenerateMeshError):
        compute_normals(mesh)


def test_unused_vertex_gets_up_normal():
    mesh = TriMesh(
        vertices=[(0, 0, 0), (0, 1, 0), (0, 0, 1), (5, 5, 5)], faces=[(0, 1, 2)]
    )
    normals = compute_normals(mesh).vertex_normals
    np.testing.assert_allclose(normals[0], (1.0, 0.0, 0.0))
    np.testing.assert_allclose(normals[3], (0.0, 0.0, 1.0))


def test_face_index_out_of_range():
    with pytest.raises(MeshError):
        TriMesh(vertices=[(0, 0, 0)], faces=[(0, 1, 2)])


def test_rasterize_covers_the_square(unit_quad):
    texel_map = rasterize_uv(unit_quad, 8)
    assert texel_map.defined.all()
    assert texel_map.overlaps == 0
    np.testing.assert_allclose(texel_map.barycentric.sum(axis=-1), 1.0)


def test_surface_at_texels_follows_uv(unit_quad):
    texel_map = rasterize_uv(unit_quad, 4)
    positions, normals = surface_at_texels(unit_quad, texel_map)
    centers = texel_centers(4, 4).reshape(-1, 2)
    np.testing.assert_allclose(positions[:, :2], centers, atol=1e-12)
    np.testing.assert_allclose(normals, [(0.0, 0.0, 1.0)] * 16)


@pytest.mark.parametrize("uv", [(0.3, 0.6), (0.9, 0.1), (0.0, 0.0), (1.0, 1.0)])
def test_texel_to_surface(unit_quad, uv):
    point = texel_to_surface(unit_quad, uv)
    np.testing.assert_allclose(point.position, (uv[0], uv[1], 0.0), atol=1e-12)
    np.testing.assert_allclose(point.normal, (0.0, 0.0, 1.0))
    assert point.overlaps == 0


@pytest.mark.parametrize("uv", [(1.5, 0.2), (-0.1, 0.5), (np.nan, 0.5)])
def test_texel_to_surface_outside(unit_quad, uv):
    assert texel_to_surface(unit_quad, uv) is None


def test_overlapping_charts_lowest_face_wins():
    uv = [[(0, 0), (1, 0), (0, 1)]] * 2
    mesh = TriMesh(
        vertices=[(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 2), (1, 0, 2), (0, 1, 2)],
        faces=[(0, 1, 2), (3, 4, 5)],
        uv_corners=uv,
    )
    point = texel_to_surface(mesh, (0.2, 0.2))
    assert point.face_index == 0
    assert point.overlaps == 1
    texel_map = rasterize_uv(mesh, 4)
    assert texel_map.overlaps > 0
    assert set(np.unique(texel_map.face_index)) <= {-1, 0}


def test_interpolate_linear_field(unit_quad):
    values = unit_quad.vertices[:, 0] + 2 * unit_quad.vertices[:, 1]
    bary = np.array([[0.2, 0.3, 0.5]])
    expected = bary[0] @ values[unit_quad.faces[1]]
    np.testing.assert_allclose(interpolate(unit_quad, values, np.array([1]), bary), [expected])


def test_bilinear_sample():
    grid = np.array([[0.0, 1.0], [2.0, 3.0]])
    # texel centres reproduce the grid; the middle is the mean
    np.testing.assert_allclose(bilinear_sample(grid, [(0.25, 0.75), (0.75, 0.25)]), [0.0, 3.0])
    np.testing.assert_allclose(bilinear_sample(grid, [(0.5, 0.5)]), [1.5])
    # clamp to edge
    np.testing.assert_allclose(bilinear_sample(grid, [(0.0, 0.0), (1.0, 1.0)]), [2.0, 1.0])


def test_bilinear_sample_channels():
    grid = np.zeros((4, 4, 3))
    grid[..., 1] = 1.0
    out = bilinear_sample(grid, np.full((5, 7, 2), 0.4))
    assert out.shape == (5, 7, 3)
    np.testing.assert_allclose(out[..., 1], 1.0)


def test_sample_texture_rescales_bytes():
    image = np.full((2, 2, 3), 255, dtype=np.uint8)
    image[1, 0] = (0, 51, 102)
    np.testing.assert_allclose(sample_texture(image, [(0.25, 0.25)]), [(0.0, 0.2, 0.4)])
    with pytest.raises(MeshError):
        sample_texture(np.zeros((0, 0, 3), dtype=np.uint8), [(0.5, 0.5)])
