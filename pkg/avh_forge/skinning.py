"""
Skinned body templates: shape blendshapes, a joint tree and linear blend
skinning, plus the sin/cos pose encoding fed to the decoder.

The template plays the role of an SMPL-style body model: joint 0 is the root,
every other joint has a parent with a lower index, and a pose carries one
axis-angle rotation per non-root joint. The root's orientation and placement
come from the pose's global transform, applied as scale, then rotation, then
translation.
"""

import logging
import posixpath
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import fsspec
import numpy as np

from .formats import read_json, read_obj, write_json, write_obj
from .mesh import TriMesh, compute_normals

logger = logging.getLogger(__name__)

_WEIGHT_TOL = 1e-6
_TAYLOR_BELOW = 1e-8
TEMPLATE_FORMAT = "avh-template"
TEMPLATE_VERSION = 1
# sin and cos of three angles for each of 23 non-root joints
POSE_SIZE = 2 * 3 * 23


@dataclass(frozen=True)
class Pose:
    """
    :param theta: ``(J - 1, 3)`` axis-angle rotations of the non-root joints, radians.
    :param global_translation: meters.
    :param global_rotation: axis-angle, radians.
    :param global_scale: positive factor.
    """

    theta: np.ndarray
    global_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    global_rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    global_scale: float = 1.0

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64).reshape(-1, 3)
        translation = np.array(self.global_translation, dtype=np.float64).reshape(3)
        rotation = np.array(self.global_rotation, dtype=np.float64).reshape(3)
        scale = float(self.global_scale)
        if not all(np.all(np.isfinite(a)) for a in (theta, translation, rotation)):
            raise SkinningError("pose values must be finite")
        if not (np.isfinite(scale) and scale > 0):
            raise SkinningError(f"global_scale must be positive, got {scale}")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "global_translation", translation)
        object.__setattr__(self, "global_rotation", rotation)
        object.__setattr__(self, "global_scale", scale)

    @classmethod
    def rest(cls, n_joints: int = 24) -> "Pose":
        return cls(theta=np.zeros((n_joints - 1, 3)))


@dataclass(frozen=True)
class Shape:
    beta: np.ndarray

    def __post_init__(self):
        beta = np.array(self.beta, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(beta)):
            raise SkinningError("shape coefficients must be finite")
        object.__setattr__(self, "beta", beta)


@dataclass(frozen=True)
class SkinnedTemplate:
    """A rest mesh rigged to a joint tree.

    :param rest_mesh: Rest-pose mesh; its UV layout is shared by every posed frame.
    :param parents: ``(J,)`` parent index per joint, -1 for the root.
    :param joint_positions: ``(J, 3)`` rest joint locations.
    :param skin_indices: ``(V, K)`` joint indices, ``K <= 4``.
    :param skin_weights: ``(V, K)`` weights, each row summing to 1.
    :param shape_basis: ``(V, 3, B)`` per-vertex offsets per shape coefficient.
    :param joint_regressor: Optional ``(J, V)`` matrix placing joints on the
      shaped mesh; without it the rest joints are used for every shape.
    """

    rest_mesh: TriMesh
    parents: np.ndarray
    joint_positions: np.ndarray
    skin_indices: np.ndarray
    skin_weights: np.ndarray
    shape_basis: np.ndarray
    joint_regressor: Optional[np.ndarray] = None

    def __post_init__(self):
        parents = np.array(self.parents, dtype=np.int64).reshape(-1)
        joints = np.array(self.joint_positions, dtype=np.float64).reshape(-1, 3)
        indices = np.array(self.skin_indices, dtype=np.int64)
        weights = np.array(self.skin_weights, dtype=np.float64)
        basis = np.array(self.shape_basis, dtype=np.float64)
        n_vertices = self.rest_mesh.n_vertices
        n_joints = len(parents)
        if len(joints) != n_joints:
            raise SkinningError("joint_positions must have one row per joint")
        if n_joints == 0 or parents[0] != -1:
            raise SkinningError("joint 0 must be the root")
        if np.any(parents[1:] < 0) or np.any(parents[1:] >= np.arange(1, n_joints)):
            raise SkinningError("every non-root joint needs a parent with a lower index")
        if indices.ndim != 2 or indices.shape != weights.shape or len(indices) != n_vertices:
            raise SkinningError("skin indices and weights must both be (V, K)")
        if indices.shape[1] > 4:
            raise SkinningError("at most 4 skin influences per vertex")
        if indices.size and (indices.min() < 0 or indices.max() >= n_joints):
            raise SkinningError("skin index out of range")
        if not np.allclose(weights.sum(axis=1), 1.0, rtol=0, atol=_WEIGHT_TOL):
            raise SkinningError("skin weight rows must sum to 1")
        if basis.ndim == 2:
            basis = basis[..., None]
        if basis.shape[:2] != (n_vertices, 3):
            raise SkinningError(f"shape_basis must be (V, 3, B), got {basis.shape}")
        regressor = self.joint_regressor
        if regressor is not None:
            regressor = np.array(regressor, dtype=np.float64)
            if regressor.shape != (n_joints, n_vertices):
                raise SkinningError("joint_regressor must be (J, V)")
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "joint_positions", joints)
        object.__setattr__(self, "skin_indices", indices)
        object.__setattr__(self, "skin_weights", weights)
        object.__setattr__(self, "shape_basis", basis)
        object.__setattr__(self, "joint_regressor", regressor)

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[2]

    def zero_shape(self) -> Shape:
        return Shape(np.zeros(self.n_shape))

    def rest_pose(self) -> Pose:
        return Pose.rest(self.n_joints)


def rodrigues(rotvecs) -> np.ndarray:
    """Rotation matrices ``(N, 3, 3)`` for axis-angle vectors ``(N, 3)``."""
    rotvecs = np.asarray(rotvecs, dtype=np.float64).reshape(-1, 3)
    angle = np.linalg.norm(rotvecs, axis=1)
    small = angle < _TAYLOR_BELOW
    safe = np.where(small, 1.0, angle)
    a = np.where(small, 1.0 - angle ** 2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - angle ** 2 / 24.0, (1.0 - np.cos(safe)) / safe ** 2)
    x, y, z = rotvecs.T
    zero = np.zeros_like(x)
    k = np.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=1).reshape(-1, 3, 3)
    return np.eye(3) + a[:, None, None] * k + b[:, None, None] * (k @ k)


def shaped_rest(template: SkinnedTemplate, shape: Shape):
    """Rest vertices with shape blendshapes applied, and the matching joints."""
    if shape.beta.shape != (template.n_shape,):
        raise SkinningError(
            f"expected {template.n_shape} shape coefficients, got {shape.beta.shape[0]}"
        )
    offsets = np.einsum("vcb,b->vc", template.shape_basis, shape.beta)
    vertices = template.rest_mesh.vertices + offsets
    if template.joint_regressor is not None:
        joints = template.joint_regressor @ vertices
    else:
        joints = template.joint_positions
    return vertices, joints


def forward_kinematics(parents, joints, theta):
    """World rotations ``(J, 3, 3)`` and positions ``(J, 3)`` of every joint.

    The root keeps the identity; ``theta`` holds the local rotations of joints 1..J-1.
    """
    local = np.concatenate([np.eye(3)[None], rodrigues(theta)])
    rotations = np.empty_like(local)
    positions = np.empty_like(joints)
    rotations[0] = local[0]
    positions[0] = joints[0]
    for j in range(1, len(parents)):
        p = parents[j]
        rotations[j] = rotations[p] @ local[j]
        positions[j] = rotations[p] @ (joints[j] - joints[p]) + positions[p]
    return rotations, positions


def apply_global(points, pose: Pose):
    """Scale, then rotate, then translate."""
    rotation = rodrigues(pose.global_rotation)[0]
    return (pose.global_scale * points) @ rotation.T + pose.global_translation


def pose_mesh(template: SkinnedTemplate, shape: Shape, pose: Pose) -> TriMesh:
    """Pose the template: shape at rest, linear blend skinning, global transform.

    UVs are copied from the rest mesh; normals are recomputed.
    """
    if pose.theta.shape != (template.n_joints - 1, 3):
        raise SkinningError(
            f"expected theta of shape {(template.n_joints - 1, 3)}, got {pose.theta.shape}"
        )
    vertices, joints = shaped_rest(template, shape)
    rotations, positions = forward_kinematics(template.parents, joints, pose.theta)
    offsets = positions - np.einsum("jab,jb->ja", rotations, joints)
    w = template.skin_weights[..., None, None]
    blend_r = np.sum(w * rotations[template.skin_indices], axis=1)
    blend_t = np.sum(template.skin_weights[..., None] * offsets[template.skin_indices], axis=1)
    skinned = np.einsum("vab,vb->va", blend_r, vertices) + blend_t
    posed = template.rest_mesh.replace(
        vertices=apply_global(skinned, pose), vertex_normals=None, texture=None
    )
    return compute_normals(posed)


def encode_pose(theta, size: Optional[int] = POSE_SIZE) -> np.ndarray:
    """``[sin a1, cos a1, sin a2, cos a2, ...]`` over the joint-major flattened angles.

    :param size: Required length of the encoding, 138 for 23 joints; ``None``
      accepts any number of joints.
    """
    angles = np.asarray(theta, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(angles)):
        raise SkinningError("pose angles must be finite")
    if size is not None and 2 * angles.size != size:
        raise SkinningError(
            f"pose of {angles.size} angles encodes to {2 * angles.size} values, not {size}"
        )
    out = np.empty(2 * angles.size)
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    return out


def _pose_from_json(item) -> Pose:
    if isinstance(item, dict):
        unknown = set(item) - {"theta", "global_translation", "global_rotation", "global_scale"}
        if unknown or "theta" not in item:
            raise SkinningError(f"invalid pose object with keys {sorted(item)}")
        return Pose(**item)
    return Pose(theta=item)


def poses_from_json(data) -> List[Pose]:
    """Poses from parsed JSON: a pose object, a bare ``(J - 1, 3)`` angle list,
    or a list of either (an animation)."""
    if isinstance(data, dict):
        return [_pose_from_json(data)]
    if not isinstance(data, list) or not data:
        raise SkinningError("a pose file holds a pose or a non-empty list of poses")
    if all(isinstance(item, dict) for item in data):
        return [_pose_from_json(item) for item in data]
    try:
        depth = np.asarray(data, dtype=np.float64).ndim
    except ValueError as e:
        raise SkinningError(f"cannot read poses: {e}") from e
    if depth == 2:
        return [Pose(theta=data)]
    if depth == 3:
        return [Pose(theta=theta) for theta in data]
    raise SkinningError(f"pose angles must nest 2 or 3 levels deep, found {depth}")


def _read_binary(path, dtype, shape):
    with fsspec.open(path, mode="rb") as f:
        data = f.read()
    array = np.frombuffer(data, dtype=dtype)
    if array.size != int(np.prod(shape)):
        raise SkinningError(f"{path}: expected {int(np.prod(shape))} values, found {array.size}")
    return array.reshape(shape)


def _write_binary(path, array, dtype):
    with fsspec.open(path, mode="wb") as f:
        f.write(np.ascontiguousarray(array).astype(dtype).tobytes())


def template_files(path: str, manifest: Optional[dict] = None) -> Dict[str, str]:
    """Paths of the data files a template manifest references, by role.

    :param path: Path of the template manifest.
    :param manifest: The parsed manifest, read from ``path`` when not given.
    """
    if manifest is None:
        manifest = read_json(path)
    if not isinstance(manifest, dict) or manifest.get("format") != TEMPLATE_FORMAT:
        raise SkinningError(f"{path} is not a template manifest")
    root = posixpath.dirname(path)

    def resolve(name):
        return posixpath.join(root, name) if root else name

    try:
        files = {
            "rest_mesh": resolve(manifest["rest_mesh"]),
            "skin_indices": resolve(manifest["skin"]["indices"]),
            "skin_weights": resolve(manifest["skin"]["weights"]),
            "shape_basis": resolve(manifest["shape_basis"]["path"]),
        }
    except (KeyError, TypeError) as e:
        raise SkinningError(f"{path}: incomplete template manifest ({e})") from e
    if manifest.get("joint_regressor"):
        files["joint_regressor"] = resolve(manifest["joint_regressor"])
    return files


def load_template(path: str) -> SkinnedTemplate:
    """Load a template manifest (JSON) and the files it references.

    Binary arrays are little-endian: skin indices int32, weights and shape
    basis float32. Weight rows are renormalized after loading.
    """
    logger.info(f"Loading template '{path}'")
    manifest = read_json(path)
    files = template_files(path, manifest)
    rest = read_obj(files["rest_mesh"])
    n_vertices = rest.n_vertices
    k = int(manifest["skin"]["influences"])
    b = int(manifest["shape_basis"]["count"])
    indices = _read_binary(files["skin_indices"], "<i4", (n_vertices, k))
    weights = _read_binary(files["skin_weights"], "<f4", (n_vertices, k))
    weights = weights.astype(np.float64)
    weights /= weights.sum(axis=1, keepdims=True)
    basis = _read_binary(files["shape_basis"], "<f4", (n_vertices, 3, b))
    parents = manifest["parents"]
    regressor = None
    if "joint_regressor" in files:
        regressor = _read_binary(files["joint_regressor"], "<f4", (len(parents), n_vertices))
    return SkinnedTemplate(
        rest_mesh=rest,
        parents=parents,
        joint_positions=manifest["joint_positions"],
        skin_indices=indices,
        skin_weights=weights,
        shape_basis=basis,
        joint_regressor=regressor,
    )


def save_template(template: SkinnedTemplate, path: str):
    root = posixpath.dirname(path)
    stem = posixpath.splitext(posixpath.basename(path))[0]

    def resolve(name):
        return posixpath.join(root, name) if root else name

    names = {
        "rest_mesh": f"{stem}.rest.obj",
        "indices": f"{stem}.skin_indices.bin",
        "weights": f"{stem}.skin_weights.bin",
        "basis": f"{stem}.shape_basis.bin",
        "regressor": f"{stem}.joint_regressor.bin",
    }
    write_obj(resolve(names["rest_mesh"]), template.rest_mesh.replace(vertex_normals=None))
    _write_binary(resolve(names["indices"]), template.skin_indices, "<i4")
    _write_binary(resolve(names["weights"]), template.skin_weights, "<f4")
    _write_binary(resolve(names["basis"]), template.shape_basis, "<f4")
    manifest = {
        "format": TEMPLATE_FORMAT,
        "version": TEMPLATE_VERSION,
        "rest_mesh": names["rest_mesh"],
        "parents": template.parents,
        "joint_positions": template.joint_positions,
        "skin": {
            "influences": template.skin_indices.shape[1],
            "indices": names["indices"],
            "weights": names["weights"],
        },
        "shape_basis": {"count": template.n_shape, "path": names["basis"]},
        "joint_regressor": None,
    }
    if template.joint_regressor is not None:
        _write_binary(resolve(names["regressor"]), template.joint_regressor, "<f4")
        manifest["joint_regressor"] = names["regressor"]
    write_json(path, manifest)


class SkinningError(Exception):
    """Base class for exceptions in this module."""

    pass
