"""
A synthetic "capsule person" with the joint layout of an SMPL-style body, and
synthetic scans and projects built from it.

Every body part is a latitude-longitude ellipsoid rigidly bound to one joint
and unwrapped into its own cell of a 4 x 4 UV atlas.
"""

import logging
import os
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .formats import write_json, write_obj, write_png
from .mesh import TriMesh, compute_normals
from .skinning import Pose, Shape, SkinnedTemplate, pose_mesh, save_template
from .utils import to_jsonable

logger = logging.getLogger(__name__)

N_JOINTS = 24
PARENTS = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21]

# pelvis, hips, spine, knees, spine, ankles, spine, feet, neck, collars, head,
# shoulders, elbows, wrists, hands; y is up, the body faces +z
JOINT_POSITIONS = [
    (0.0, 0.95, 0.0),
    (0.09, 0.88, 0.0),
    (-0.09, 0.88, 0.0),
    (0.0, 1.05, 0.0),
    (0.09, 0.5, 0.0),
    (-0.09, 0.5, 0.0),
    (0.0, 1.18, 0.0),
    (0.09, 0.1, 0.0),
    (-0.09, 0.1, 0.0),
    (0.0, 1.3, 0.0),
    (0.09, 0.03, 0.08),
    (-0.09, 0.03, 0.08),
    (0.0, 1.48, 0.0),
    (0.07, 1.42, 0.0),
    (-0.07, 1.42, 0.0),
    (0.0, 1.58, 0.0),
    (0.18, 1.42, 0.0),
    (-0.18, 1.42, 0.0),
    (0.45, 1.42, 0.0),
    (-0.45, 1.42, 0.0),
    (0.7, 1.42, 0.0),
    (-0.7, 1.42, 0.0),
    (0.78, 1.42, 0.0),
    (-0.78, 1.42, 0.0),
]

# (bound joint, start, end, radius)
PARTS = [
    (0, (0.0, 0.82, 0.0), (0.0, 1.02, 0.0), 0.14),
    (3, (0.0, 1.0, 0.0), (0.0, 1.22, 0.0), 0.13),
    (9, (0.0, 1.2, 0.0), (0.0, 1.46, 0.0), 0.15),
    (15, (0.0, 1.5, 0.0), (0.0, 1.78, 0.0), 0.1),
    (1, (0.09, 0.88, 0.0), (0.09, 0.5, 0.0), 0.07),
    (2, (-0.09, 0.88, 0.0), (-0.09, 0.5, 0.0), 0.07),
    (4, (0.09, 0.5, 0.0), (0.09, 0.08, 0.0), 0.055),
    (5, (-0.09, 0.5, 0.0), (-0.09, 0.08, 0.0), 0.055),
    (16, (0.18, 1.42, 0.0), (0.45, 1.42, 0.0), 0.05),
    (17, (-0.18, 1.42, 0.0), (-0.45, 1.42, 0.0), 0.05),
    (18, (0.45, 1.42, 0.0), (0.7, 1.42, 0.0), 0.04),
    (19, (-0.45, 1.42, 0.0), (-0.7, 1.42, 0.0), 0.04),
    (20, (0.7, 1.42, 0.0), (0.85, 1.42, 0.0), 0.03),
    (21, (-0.7, 1.42, 0.0), (-0.85, 1.42, 0.0), 0.03),
]

ATLAS_CELLS = 4
ATLAS_MARGIN = 0.02


def _perpendiculars(axis):
    ref = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(axis, ref)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(axis, e1)


def atlas_cell(index: int, cells: int = ATLAS_CELLS, margin: float = ATLAS_MARGIN):
    """``(u0, v0, width, height)`` of atlas cell ``index``, row by row from the bottom."""
    size = 1.0 / cells
    row, col = divmod(index, cells)
    return col * size + margin, row * size + margin, size - 2 * margin, size - 2 * margin


def lat_long_ellipsoid(
    start, end, radius: float, cell=(0.0, 0.0, 1.0, 1.0), n_lat: int = 8, n_lon: int = 12
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ellipsoid spanning ``start`` to ``end`` with outward-facing triangles.

    :param cell: ``(u0, v0, width, height)`` of its UV chart.
    :returns: ``(vertices, faces, uv_corners)``; the two poles are the last vertices.
    """
    start, end = np.asarray(start, dtype=np.float64), np.asarray(end, dtype=np.float64)
    axis = end - start
    half = np.linalg.norm(axis) / 2.0
    axis /= 2.0 * half
    centre = (start + end) / 2.0
    e1, e2 = _perpendiculars(axis)
    lat = -np.pi / 2 + np.pi * (np.arange(n_lat) + 1) / (n_lat + 1)
    phi = 2.0 * np.pi * np.arange(n_lon) / n_lon
    lat_g, phi_g = np.meshgrid(lat, phi, indexing="ij")
    ring = (
        centre
        + np.sin(lat_g)[..., None] * half * axis
        + radius
        * np.cos(lat_g)[..., None]
        * (np.cos(phi_g)[..., None] * e1 + np.sin(phi_g)[..., None] * e2)
    )
    vertices = np.concatenate([ring.reshape(-1, 3), [centre - half * axis, centre + half * axis]])
    bottom, top = n_lat * n_lon, n_lat * n_lon + 1

    u0, v0, cw, ch = cell

    def uv(i, j):
        # i: ring index (-1 bottom pole, n_lat top pole), j: unwrapped longitude index
        return u0 + cw * j / n_lon, v0 + ch * (i + 1) / (n_lat + 1)

    def vid(i, j):
        return i * n_lon + j % n_lon

    faces, uvs = [], []
    for j in range(n_lon):
        faces.append((bottom, vid(0, j + 1), vid(0, j)))
        uvs.append(((u0 + cw * (j + 0.5) / n_lon, v0), uv(0, j + 1), uv(0, j)))
        for i in range(n_lat - 1):
            faces.append((vid(i, j), vid(i, j + 1), vid(i + 1, j + 1)))
            uvs.append((uv(i, j), uv(i, j + 1), uv(i + 1, j + 1)))
            faces.append((vid(i, j), vid(i + 1, j + 1), vid(i + 1, j)))
            uvs.append((uv(i, j), uv(i + 1, j + 1), uv(i + 1, j)))
        faces.append((top, vid(n_lat - 1, j), vid(n_lat - 1, j + 1)))
        top_uv = (u0 + cw * (j + 0.5) / n_lon, v0 + ch)
        uvs.append((top_uv, uv(n_lat - 1, j), uv(n_lat - 1, j + 1)))
    return vertices, np.array(faces, dtype=np.int64), np.array(uvs, dtype=np.float64)


def capsule_person(n_lat: int = 8, n_lon: int = 12) -> SkinnedTemplate:
    """The synthetic 24-joint template with two shape directions: girth and height."""
    vertices, faces, uvs, joints, radial = [], [], [], [], []
    offset = 0
    for index, (joint, start, end, radius) in enumerate(PARTS):
        v, f, uv = lat_long_ellipsoid(start, end, radius, atlas_cell(index), n_lat, n_lon)
        axis = np.subtract(end, start) / np.linalg.norm(np.subtract(end, start))
        along = (v - np.asarray(start)) @ axis
        out = v - np.asarray(start) - along[:, None] * axis
        lengths = np.linalg.norm(out, axis=1, keepdims=True)
        radial.append(np.where(lengths > 0, out / np.where(lengths > 0, lengths, 1.0), 0.0))
        vertices.append(v)
        faces.append(f + offset)
        uvs.append(uv)
        joints += [joint] * len(v)
        offset += len(v)
    vertices = np.concatenate(vertices)
    rest = compute_normals(
        TriMesh(vertices=vertices, faces=np.concatenate(faces), uv_corners=np.concatenate(uvs))
    )
    girth = 0.01 * np.concatenate(radial)
    height = np.zeros_like(vertices)
    height[:, 1] = 0.05 * (vertices[:, 1] - JOINT_POSITIONS[0][1])
    return SkinnedTemplate(
        rest_mesh=rest,
        parents=PARENTS,
        joint_positions=JOINT_POSITIONS,
        skin_indices=np.array(joints)[:, None],
        skin_weights=np.ones((len(vertices), 1)),
        shape_basis=np.stack([girth, height], axis=2),
    )


def procedural_texture(size: int = 256) -> np.ndarray:
    """Smooth 8-bit RGB pattern over the whole UV square."""
    t = (np.arange(size) + 0.5) / size
    u, v = np.meshgrid(t, 1.0 - t)
    rgb = np.stack(
        [
            0.5 + 0.35 * np.sin(2 * np.pi * (2 * u + v)),
            0.5 + 0.35 * np.cos(2 * np.pi * (u - 3 * v)),
            0.5 + 0.35 * np.sin(2 * np.pi * 3 * u) * np.cos(2 * np.pi * 2 * v),
        ],
        axis=-1,
    )
    return np.round(rgb * 255).astype(np.uint8)


def synthetic_scan(
    template: SkinnedTemplate,
    shape: Shape,
    pose: Pose,
    offset: float = 0.02,
    texture_size: int = 256,
) -> TriMesh:
    """The posed template pushed ``offset`` along its vertex normals, textured
    with :func:`procedural_texture`."""
    posed = pose_mesh(template, shape, pose)
    moved = posed.with_vertices(posed.vertices + offset * posed.vertex_normals)
    return compute_normals(moved).replace(texture=procedural_texture(texture_size))


def random_poses(n: int, seed: int = 0, amplitude: float = 0.25) -> List[np.ndarray]:
    """Poses with every joint turned by up to ``amplitude`` radians about ``x`` and ``z``."""
    rng = np.random.default_rng(seed)
    theta = rng.uniform(-amplitude, amplitude, size=(n, N_JOINTS - 1, 3))
    theta[:, :, 1] = 0.0
    return list(theta)


def desk_scale_blocks() -> dict:
    """Manifest config blocks small enough for a desktop CPU."""
    return {
        "registration": {"max_iters": 20},
        "bake": {"resolution": 64},
        "confidence": {"hemisphere_samples": 16},
        "inpaint": {"radius": 3},
        "selection": {"n_frames": 2, "n_validation": 1},
        "decoder": {"fc_size": 8, "latent_size": 16, "hidden_size": 32, "out_resolution": 32},
        "training": {"epochs": 5, "batch_size": 4, "lr_decay": 0.99},
        "render": {"subdivision_levels": 2, "preview_size": 128},
    }


def write_synthetic_project(
    directory: str,
    n_frames: int = 3,
    seed: int = 0,
    offset: float = 0.02,
    poses: Optional[Sequence] = None,
    blocks: Optional[dict] = None,
) -> str:
    """Write a template, ``n_frames`` textured scans and a project manifest.

    :returns: Path of ``project.json``.
    """
    os.makedirs(os.path.join(directory, "template"), exist_ok=True)
    os.makedirs(os.path.join(directory, "scans"), exist_ok=True)
    template = capsule_person()
    save_template(template, os.path.join(directory, "template", "capsule.json"))
    shape = template.zero_shape()
    poses = list(poses) if poses is not None else random_poses(n_frames, seed)
    frames = []
    for i, theta in enumerate(poses):
        frame_id = f"frame_{i:03d}"
        scan = synthetic_scan(template, shape, Pose(theta=theta), offset)
        write_obj(os.path.join(directory, "scans", f"{frame_id}.obj"), scan)
        write_png(os.path.join(directory, "scans", f"{frame_id}.png"), scan.texture)
        frames.append(
            {
                "id": frame_id,
                "theta": theta,
                "scan": f"scans/{frame_id}.obj",
                "scan_texture": f"scans/{frame_id}.png",
            }
        )
    manifest = {
        "template": "template/capsule.json",
        "beta": shape.beta,
        "output_dir": "output",
        "seed": seed,
        "frames": frames,
    }
    manifest.update(desk_scale_blocks() if blocks is None else blocks)
    path = os.path.join(directory, "project.json")
    write_json(path, to_jsonable(manifest))
    logger.info(f"Wrote synthetic project with {len(frames)} frames to '{directory}'")
    return path
