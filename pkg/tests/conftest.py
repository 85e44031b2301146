import fsspec
import numpy as np
import pytest

from avh_forge.mesh import TriMesh, compute_normals
from avh_forge.storage import FSSpecTarget, UninitializedTarget
from avh_forge.synthetic import capsule_person, lat_long_ellipsoid, write_synthetic_project


@pytest.fixture()
def tmp_target(tmpdir_factory):
    fs = fsspec.get_filesystem_class("file")()
    path = str(tmpdir_factory.mktemp("target"))
    return FSSpecTarget(fs, path)


@pytest.fixture()
def uninitialized_target():
    return UninitializedTarget()


@pytest.fixture(scope="session")
def unit_quad():
    """Two triangles covering the unit square at z = 0, with uv = (x, y)."""
    vertices = [(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (1.0, 1.0, 0.0), (0.0, 1.0, 0.0)]
    faces = [(0, 1, 2), (0, 2, 3)]
    uv_corners = np.array([[v[:2] for v in (vertices[i] for i in f)] for f in faces])
    return compute_normals(TriMesh(vertices=vertices, faces=faces, uv_corners=uv_corners))


@pytest.fixture(scope="session")
def sphere():
    """A closed lat-long sphere of radius 0.5 around the origin, one UV chart."""
    vertices, faces, uv_corners = lat_long_ellipsoid(
        (0.0, -0.5, 0.0), (0.0, 0.5, 0.0), 0.5, n_lat=12, n_lon=24
    )
    return compute_normals(TriMesh(vertices=vertices, faces=faces, uv_corners=uv_corners))


@pytest.fixture(scope="session")
def capsule():
    return capsule_person()


@pytest.fixture()
def synthetic_project(tmp_path):
    """Path of a three-frame synthetic project's manifest."""
    return write_synthetic_project(str(tmp_path / "project"), n_frames=3, seed=0)
