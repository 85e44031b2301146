import itertools

import numpy as np
import pytest

from avh_forge.accel import build_accel, intersect_ray_triangles
from avh_forge.baking import (
    BakeConfig,
    BakeError,
    Polarity,
    _select,
    bake_frame,
    filter_outliers,
    find_match,
    load_bundle,
    preview_images,
    read_sidecar,
    resample_bundle,
    save_bundle,
)
from avh_forge.confidence import ConfidenceConfig, apply_confidence, frame_quality
from avh_forge.mesh import TriMesh

SKIN = (255, 0, 51)


def plane(z, facing_up=True, lo=-1.0, hi=2.0):
    vertices = [(lo, lo, z), (hi, lo, z), (hi, hi, z), (lo, hi, z)]
    faces = [(0, 1, 2), (0, 2, 3)] if facing_up else [(0, 2, 1), (0, 3, 2)]
    return vertices, faces


def two_planes(upper_up, lower_up):
    v1, f1 = plane(0.1, upper_up)
    v2, f2 = plane(-0.15, lower_up)
    return TriMesh(vertices=v1 + v2, faces=f1 + [tuple(i + 4 for i in f) for f in f2])


def select_by_rule(ahead_d, behind_d, ahead_positive, behind_positive):
    """Whether the +n hit is taken, written case by case."""
    if np.isinf(ahead_d):
        return False
    if np.isinf(behind_d):
        return True
    if ahead_positive == behind_positive:
        return ahead_d <= behind_d
    if ahead_positive:
        return ahead_d <= 2 * behind_d
    return not behind_d <= 2 * ahead_d


def test_select_matches_rule():
    distances = [0.0, 0.1, 0.2, 0.25, 0.4, np.inf]
    cases = [
        (a, b, pa, pb)
        for a, b in itertools.product(distances, repeat=2)
        for pa, pb in itertools.product([True, False], repeat=2)
        if np.isfinite(a) or np.isfinite(b)
    ]
    a, b, pa, pb = (np.array(column) for column in zip(*cases))
    expected = [select_by_rule(*case) for case in cases]
    np.testing.assert_array_equal(_select(a, b, pa, pb), expected)


@pytest.mark.parametrize(
    "z, distance, hit_z",
    [(0.1, 0.1, 0.0), (-0.1, 0.1, 0.0), (0.0, 0.0, 0.0)],
)
def test_find_match_on_plane(z, distance, hit_z):
    vertices, faces = plane(0.0)
    accel = build_accel(TriMesh(vertices=vertices, faces=faces))
    match = find_match((0.5, 0.5, z), (0.0, 0.0, 1.0), accel)
    assert match.distance == pytest.approx(distance, abs=1e-9)
    np.testing.assert_allclose(match.target_point, (0.5, 0.5, hit_z), atol=1e-12)
    assert match.polarity == Polarity.POSITIVE


def test_find_match_mixed_polarity_prefers_positive():
    # +n hits a negative surface at 0.1, -n a positive one at 0.15
    accel = build_accel(two_planes(upper_up=False, lower_up=True))
    match = find_match((0.5, 0.5, 0.0), (0.0, 0.0, 1.0), accel)
    assert match.polarity == Polarity.POSITIVE
    assert match.distance == pytest.approx(0.15)
    # same polarity: the nearer hit
    accel = build_accel(two_planes(upper_up=True, lower_up=True))
    match = find_match((0.5, 0.5, 0.0), (0.0, 0.0, 1.0), accel)
    assert match.target_point[2] == pytest.approx(0.1)


def test_find_match_limits():
    vertices, faces = plane(0.0)
    accel = build_accel(TriMesh(vertices=vertices, faces=faces))
    assert find_match((0.5, 0.5, 0.5), (0.0, 0.0, 1.0), accel, max_dist=0.1) is None
    with pytest.raises(BakeError):
        find_match((0.5, 0.5, 0.5), (0.0, 0.0, 2.0), accel)


def random_triangles(n_faces, seed):
    rng = np.random.default_rng(seed)
    centres = rng.uniform(-1.0, 1.0, size=(n_faces, 1, 3))
    corners = centres + rng.normal(scale=0.2, size=(n_faces, 3, 3))
    return TriMesh(vertices=corners.reshape(-1, 3), faces=np.arange(3 * n_faces).reshape(-1, 3))


def match_by_exhaustion(mesh, r, n, eps, max_dist):
    """Nearest hit along +n and -n over every triangle, then the selection rule."""
    tri = mesh.corners()
    normals = mesh.face_normals()
    found = []
    for sign in (1.0, -1.0):
        d = sign * n
        origin = (r - eps * d)[None]
        bounds = np.zeros(1), np.full(1, max_dist + eps)
        t, _, _ = intersect_ray_triangles(origin, d[None], tri[:, 0], tri[:, 1], tri[:, 2], *bounds)
        face = int(np.argmin(t[0]))
        if np.isinf(t[0, face]):
            found.append((np.inf, False, None))
            continue
        point = r - eps * d + t[0, face] * d
        found.append((max(t[0, face] - eps, 0.0), normals[face] @ n > 0, point))
    (ahead_d, ahead_pos, ahead_point), (behind_d, behind_pos, behind_point) = found
    if np.isinf(ahead_d) and np.isinf(behind_d):
        return None
    if select_by_rule(ahead_d, behind_d, ahead_pos, behind_pos):
        return ahead_d, ahead_pos, ahead_point
    return behind_d, behind_pos, behind_point


@pytest.mark.parametrize("seed", range(3))
def test_find_match_matches_exhaustive(seed):
    mesh = random_triangles(200, seed)
    accel = build_accel(mesh)
    rng = np.random.default_rng(seed + 10)
    normals = rng.normal(size=(300, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    misses = 0
    for r, n in zip(rng.uniform(-1.0, 1.0, size=(300, 3)), normals):
        match = find_match(r, n, accel, max_dist=0.5)
        expected = match_by_exhaustion(mesh, r, n, accel.epsilon, 0.5)
        if expected is None:
            assert match is None
            misses += 1
            continue
        distance, positive, point = expected
        assert match.distance == pytest.approx(distance, abs=1e-12)
        assert (match.polarity == Polarity.POSITIVE) == positive
        np.testing.assert_allclose(match.target_point, point, atol=1e-9)
    assert 0 < misses < 300


@pytest.fixture
def scan(unit_quad):
    texture = np.empty((4, 4, 3), dtype=np.uint8)
    texture[:] = SKIN
    moved = unit_quad.with_vertices(unit_quad.vertices + (0.0, 0.0, 0.01))
    return moved.replace(texture=texture)


@pytest.fixture
def bundle(unit_quad, scan):
    shadow = unit_quad.with_vertices(unit_quad.vertices - (0.0, 0.0, 0.02))
    return bake_frame(unit_quad, shadow, scan, resolution=8, frame_id="f0", theta=np.ones((2, 3)))


def test_bake_frame(bundle):
    assert bundle.resolution == 8
    assert bundle.defined.all() and bundle.matched.all()
    np.testing.assert_allclose(bundle.texture, np.broadcast_to(np.divide(SKIN, 255), (8, 8, 3)))
    # displacement is measured from the unregistered surface, offset from the registered one
    np.testing.assert_allclose(bundle.displacement[..., 2], 0.03, atol=1e-12)
    np.testing.assert_allclose(bundle.displacement[..., :2], 0.0, atol=1e-12)
    np.testing.assert_allclose(bundle.offset[..., 2], 0.01, atol=1e-12)
    np.testing.assert_allclose(bundle.distance, 0.01, atol=1e-12)
    np.testing.assert_allclose(bundle.normal_dot, 1.0)
    assert bundle.matches.matched.sum() == 64


def test_bake_frame_inputs(unit_quad, scan):
    bare = TriMesh(vertices=unit_quad.vertices, faces=unit_quad.faces)
    with pytest.raises(BakeError):
        bake_frame(bare, bare, scan, resolution=4)
    with pytest.raises(BakeError):
        bake_frame(unit_quad, unit_quad, scan.replace(texture=None), resolution=4)
    flipped = unit_quad.replace(faces=unit_quad.faces[:, ::-1])
    with pytest.raises(BakeError):
        bake_frame(unit_quad, flipped, scan, resolution=4)
    with pytest.raises(BakeError):
        BakeConfig(resolution=0)


def test_unmatched_texels_stay_zero(unit_quad, scan):
    far = scan.with_vertices(scan.vertices + (0.0, 0.0, 1.0))
    bundle = bake_frame(unit_quad, unit_quad, far, resolution=4)
    assert bundle.defined.all()
    assert not bundle.matched.any()
    np.testing.assert_array_equal(bundle.texture, 0.0)
    np.testing.assert_array_equal(bundle.displacement, 0.0)


def test_filter_outliers(bundle):
    assert filter_outliers(bundle, limit=0.05) is bundle
    filtered = filter_outliers(bundle.replace(confidence=np.ones((8, 8))), limit=0.005)
    assert not filtered.matched.any()
    np.testing.assert_array_equal(filtered.confidence, 0.0)


def test_filter_outliers_rescores_the_frame(unit_quad, scan):
    bundle = bake_frame(unit_quad, unit_quad, scan, resolution=8)
    scored = apply_confidence(bundle, unit_quad, scan, ConfidenceConfig(hemisphere_samples=16))
    offset = scored.offset.copy()
    offset[:4] = 0.1
    filtered = filter_outliers(scored.replace(offset=offset), limit=0.05)
    assert filtered.matched.sum() == 32
    rescored = frame_quality(filtered.confidence, filtered.defined)
    assert filtered.quality == pytest.approx(rescored.mean)
    assert filtered.quality == pytest.approx(scored.quality / 2)
    # an unscored bake has no quality to update
    assert filter_outliers(bundle.replace(offset=offset), limit=0.05).quality is None


def test_resample_bundle(bundle):
    matched = bundle.matched.copy()
    matched[:2, :2] = False
    small = resample_bundle(bundle.replace(matched=matched), 4)
    assert small.resolution == 4
    assert not small.matched[0, 0] and small.matched[1, 1]
    np.testing.assert_allclose(small.displacement[..., 2], 0.03)
    assert resample_bundle(bundle, 8) is bundle
    with pytest.raises(BakeError):
        resample_bundle(bundle, 3)


def test_bundle_files(tmp_target, bundle):
    bundle = bundle.replace(confidence=np.full((8, 8), 0.5), quality=0.5, config_hash="abc")
    save_bundle(bundle, tmp_target, "frames/f0")
    sidecar = read_sidecar(tmp_target, "frames/f0")
    assert sidecar["matched_texels"] == 64
    assert sidecar["files"]["displacement"] == "displacement.pfm"
    loaded = load_bundle(tmp_target, "frames/f0")
    assert (loaded.frame_id, loaded.quality, loaded.config_hash) == ("f0", 0.5, "abc")
    np.testing.assert_array_equal(loaded.theta, np.ones((2, 3)))
    np.testing.assert_array_equal(loaded.matched, bundle.matched)
    np.testing.assert_allclose(loaded.texture, bundle.texture, atol=0.5 / 255)
    np.testing.assert_allclose(loaded.displacement, bundle.displacement, rtol=1e-6, atol=1e-12)
    assert loaded.matches is None
    assert tmp_target.exists("frames/f0/confidence.png")


def test_preview_images(bundle):
    d = np.zeros((8, 8, 3))
    d[..., 2] = 0.03
    d[0, 0, 0] = -0.03
    images = preview_images(bundle.replace(displacement=d))
    assert all(image.dtype == np.uint8 for image in images.values())
    displacement = images["displacement"]
    np.testing.assert_array_equal(displacement[..., 2], 255)
    assert displacement[0, 0, 0] == 0
    np.testing.assert_array_equal(displacement[1:, :, :2], 128)
    flat = preview_images(bundle.replace(displacement=np.zeros((8, 8, 3))))
    np.testing.assert_array_equal(flat["displacement"], 128)
