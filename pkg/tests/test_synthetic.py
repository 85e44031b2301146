import numpy as np
import pytest

from avh_forge.manifest import ProjectManifest
from avh_forge.mesh import rasterize_uv
from avh_forge.skinning import Pose
from avh_forge.synthetic import (
    PARTS,
    atlas_cell,
    desk_scale_blocks,
    procedural_texture,
    random_poses,
    synthetic_scan,
)


def test_capsule_person(capsule):
    mesh = capsule.rest_mesh
    assert capsule.n_joints == 24
    assert capsule.n_shape == 2
    per_part = mesh.n_faces // len(PARTS)
    for index in range(len(PARTS)):
        u0, v0, width, height = atlas_cell(index)
        uv = mesh.uv_corners[index * per_part : (index + 1) * per_part]
        assert np.all(uv[..., 0] >= u0 - 1e-12) and np.all(uv[..., 0] <= u0 + width + 1e-12)
        assert np.all(uv[..., 1] >= v0 - 1e-12) and np.all(uv[..., 1] <= v0 + height + 1e-12)
    # the charts never overlap
    assert rasterize_uv(mesh, 128).overlaps == 0


@pytest.mark.parametrize("offset", [0.0, 0.02])
def test_synthetic_scan(capsule, offset):
    pose = Pose(theta=random_poses(1, seed=2)[0])
    scan = synthetic_scan(capsule, capsule.zero_shape(), pose, offset, texture_size=16)
    posed = synthetic_scan(capsule, capsule.zero_shape(), pose, 0.0, texture_size=16)
    distance = np.linalg.norm(scan.vertices - posed.vertices, axis=1)
    np.testing.assert_allclose(distance, offset, atol=1e-12)
    assert scan.texture.shape == (16, 16, 3)
    np.testing.assert_array_equal(scan.faces, capsule.rest_mesh.faces)


def test_random_poses():
    poses = random_poses(4, seed=1, amplitude=0.1)
    assert len(poses) == 4
    theta = np.stack(poses)
    assert theta.shape == (4, 23, 3)
    assert np.all(theta[..., 1] == 0.0)
    assert np.all(np.abs(theta) <= 0.1)
    np.testing.assert_array_equal(theta, np.stack(random_poses(4, seed=1, amplitude=0.1)))


def test_procedural_texture():
    texture = procedural_texture(32)
    assert texture.shape == (32, 32, 3) and texture.dtype == np.uint8
    assert 0.15 * 255 - 1 <= texture.min() and texture.max() <= 0.85 * 255 + 1


def test_desk_scale_blocks_are_valid():
    manifest = ProjectManifest.from_dict({"template": "t.json", **desk_scale_blocks()})
    assert manifest.decoder.out_resolution == 32
    assert manifest.selection.n_frames == 2
