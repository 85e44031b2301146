import numpy as np
import pytest

from avh_forge.formats import write_json
from avh_forge.mesh import TriMesh
from avh_forge.skinning import (
    Pose,
    Shape,
    SkinnedTemplate,
    SkinningError,
    encode_pose,
    load_template,
    pose_mesh,
    poses_from_json,
    rodrigues,
    save_template,
)

QUARTER_Z = (0.0, 0.0, np.pi / 2)


@pytest.fixture(scope="module")
def chain():
    """Three joints along x; vertex 3 is split evenly between joints 0 and 1."""
    mesh = TriMesh(
        vertices=[(0.5, 0.0, 0.0), (1.5, 0.0, 0.0), (2.5, 0.5, 0.0), (2.0, 0.0, 0.0)],
        faces=[(0, 1, 2)],
    )
    basis = np.zeros((4, 3, 1))
    basis[:, 1, 0] = 0.1
    return SkinnedTemplate(
        rest_mesh=mesh,
        parents=[-1, 0, 1],
        joint_positions=[(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (2.0, 0.0, 0.0)],
        skin_indices=[(0, 0), (1, 1), (2, 2), (0, 1)],
        skin_weights=[(1.0, 0.0), (1.0, 0.0), (1.0, 0.0), (0.5, 0.5)],
        shape_basis=basis,
    )


def test_rodrigues():
    r = rodrigues([QUARTER_Z, (0.0, 0.0, 0.0), (1e-10, 0.0, 0.0)])
    np.testing.assert_allclose(r[0] @ (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), atol=1e-15)
    np.testing.assert_array_equal(r[1], np.eye(3))
    np.testing.assert_allclose(r[2], np.eye(3), atol=1e-9)
    rng = np.random.default_rng(0)
    for m in rodrigues(rng.normal(size=(20, 3))):
        np.testing.assert_allclose(m @ m.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(m) == pytest.approx(1.0)


def test_rest_pose_is_identity(capsule):
    posed = pose_mesh(capsule, capsule.zero_shape(), capsule.rest_pose())
    np.testing.assert_allclose(posed.vertices, capsule.rest_mesh.vertices, atol=1e-12)
    np.testing.assert_allclose(posed.uv_corners, capsule.rest_mesh.uv_corners)
    assert posed.vertex_normals is not None


def test_chain_rotation(chain):
    theta = [QUARTER_Z, (0.0, 0.0, 0.0)]
    posed = pose_mesh(chain, chain.zero_shape(), Pose(theta=theta))
    expected = [(0.5, 0.0, 0.0), (1.0, 0.5, 0.0), (0.5, 1.5, 0.0), (1.5, 0.5, 0.0)]
    np.testing.assert_allclose(posed.vertices, expected, atol=1e-12)


def test_shape_blendshape(chain):
    posed = pose_mesh(chain, Shape([2.0]), chain.rest_pose())
    np.testing.assert_allclose(posed.vertices, chain.rest_mesh.vertices + (0.0, 0.2, 0.0))


def test_global_transform(chain):
    pose = Pose(
        theta=np.zeros((2, 3)),
        global_translation=(0.0, 0.0, 1.0),
        global_rotation=QUARTER_Z,
        global_scale=2.0,
    )
    posed = pose_mesh(chain, chain.zero_shape(), pose)
    np.testing.assert_allclose(posed.vertices[0], (0.0, 1.0, 1.0), atol=1e-12)


def test_pose_shape_mismatch(chain):
    with pytest.raises(SkinningError):
        pose_mesh(chain, chain.zero_shape(), Pose.rest(24))
    with pytest.raises(SkinningError):
        pose_mesh(chain, Shape([1.0, 2.0]), chain.rest_pose())


@pytest.mark.parametrize(
    "kwargs",
    [
        {"theta": [(np.nan, 0.0, 0.0)]},
        {"theta": [(0.0, 0.0, 0.0)], "global_scale": 0.0},
        {"theta": [(0.0, 0.0, 0.0)], "global_translation": (np.inf, 0.0, 0.0)},
    ],
)
def test_invalid_pose(kwargs):
    with pytest.raises(SkinningError):
        Pose(**kwargs)


@pytest.mark.parametrize(
    "changes, message",
    [
        ({"parents": [0, 0, 1]}, "root"),
        ({"parents": [-1, 2, 1]}, "lower index"),
        ({"skin_weights": [(0.9, 0.0)] * 4}, "sum to 1"),
        ({"skin_indices": [(0, 3)] * 4}, "out of range"),
        ({"skin_indices": [(0,)] * 4}, "(V, K)"),
        ({"shape_basis": np.zeros((3, 3, 1))}, "shape_basis"),
    ],
)
def test_template_validation(chain, changes, message):
    fields = dict(
        rest_mesh=chain.rest_mesh,
        parents=chain.parents,
        joint_positions=chain.joint_positions,
        skin_indices=chain.skin_indices,
        skin_weights=chain.skin_weights,
        shape_basis=chain.shape_basis,
    )
    fields.update(changes)
    with pytest.raises(SkinningError, match=message.replace("(", r"\(").replace(")", r"\)")):
        SkinnedTemplate(**fields)


def test_encode_pose():
    encoded = encode_pose(np.zeros((23, 3)))
    assert encoded.shape == (138,)
    np.testing.assert_array_equal(encoded[0::2], 0.0)
    np.testing.assert_array_equal(encoded[1::2], 1.0)
    a, b, c = 0.1, -0.2, 0.3
    np.testing.assert_allclose(
        encode_pose([(a, b, c)], size=None),
        [np.sin(a), np.cos(a), np.sin(b), np.cos(b), np.sin(c), np.cos(c)],
    )
    assert encode_pose(np.zeros((2, 3)), size=12).shape == (12,)
    with pytest.raises(SkinningError):
        encode_pose([(np.nan, 0.0, 0.0)], size=None)


@pytest.mark.parametrize("joints", [1, 22, 24])
def test_encode_pose_checks_joint_count(joints):
    with pytest.raises(SkinningError, match="not 138"):
        encode_pose(np.zeros((joints, 3)))
    assert encode_pose(np.zeros((joints, 3)), size=None).shape == (6 * joints,)


def test_poses_from_json():
    theta = [[0.0, 0.1, 0.2], [0.3, 0.4, 0.5]]
    assert len(poses_from_json(theta)) == 1
    assert len(poses_from_json([theta, theta, theta])) == 3
    pose = poses_from_json({"theta": theta, "global_scale": 2.0})[0]
    assert pose.global_scale == 2.0
    np.testing.assert_array_equal(pose.theta, theta)
    animation = poses_from_json([{"theta": theta}, {"theta": theta, "global_rotation": QUARTER_Z}])
    np.testing.assert_allclose(animation[1].global_rotation, QUARTER_Z)


@pytest.mark.parametrize(
    "data",
    [
        [],
        "pose",
        [0.1, 0.2, 0.3],
        {"angles": [[0.0, 0.0, 0.0]]},
        {"theta": [[0.0, 0.0, 0.0]], "speed": 1},
        [[[[0.0, 0.0, 0.0]]]],
    ],
)
def test_poses_from_json_errors(data):
    with pytest.raises(SkinningError):
        poses_from_json(data)


def test_template_files(tmp_path, capsule):
    path = str(tmp_path / "template" / "capsule.json")
    (tmp_path / "template").mkdir()
    save_template(capsule, path)
    loaded = load_template(path)
    np.testing.assert_allclose(loaded.rest_mesh.vertices, capsule.rest_mesh.vertices, atol=1e-8)
    np.testing.assert_array_equal(loaded.rest_mesh.faces, capsule.rest_mesh.faces)
    np.testing.assert_allclose(loaded.rest_mesh.uv_corners, capsule.rest_mesh.uv_corners)
    np.testing.assert_array_equal(loaded.parents, capsule.parents)
    np.testing.assert_array_equal(loaded.skin_indices, capsule.skin_indices)
    np.testing.assert_allclose(loaded.shape_basis, capsule.shape_basis, rtol=1e-6, atol=1e-9)
    assert loaded.joint_regressor is None


def test_load_template_rejects_other_json(tmp_path):
    path = str(tmp_path / "other.json")
    write_json(path, {"format": "something-else"})
    with pytest.raises(SkinningError):
        load_template(path)
