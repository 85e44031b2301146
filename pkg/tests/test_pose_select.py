import numpy as np
import pytest

from avh_forge.pose_select import (
    SelectionConfig,
    SelectionError,
    kmeans,
    pose_features,
    select,
    select_frames,
)


def clustered_poses(n_per_cluster=10, seed=0):
    rng = np.random.default_rng(seed)
    centres = [np.full((23, 3), a) for a in (-1.0, 0.2, 1.4)]
    poses = [
        c + rng.normal(scale=0.01, size=(23, 3)) for c in centres for _ in range(n_per_cluster)
    ]
    return poses, np.repeat(np.arange(3), n_per_cluster)


def test_pose_features():
    theta = np.zeros((23, 3))
    theta[0] = (np.pi, 0.0, np.pi / 2)
    features = pose_features(theta)
    assert features.shape == (69,)
    np.testing.assert_allclose(features[:3], (-1.0, 1.0, 0.0), atol=1e-15)


def test_one_frame_per_cluster():
    poses, groups = clustered_poses()
    selection = select(poses, SelectionConfig(n_frames=3, n_validation=3))
    assert sorted(groups[selection.training]) == [0, 1, 2]
    assert sorted(groups[selection.validation]) == [0, 1, 2]
    assert not set(selection.training) & set(selection.validation)
    assert selection.training == sorted(selection.training)
    assert selection.degenerate_clusters == 0


def test_selection_is_deterministic():
    poses, _ = clustered_poses(seed=3)
    config = SelectionConfig(n_frames=5, n_validation=4, seed=7)
    first = select(poses, config)
    second = select(poses, config)
    assert (first.training, first.validation) == (second.training, second.validation)
    np.testing.assert_array_equal(first.labels, second.labels)


def test_identical_poses_are_degenerate(caplog):
    poses = [np.full((23, 3), 0.3)] * 200
    selection = select(poses, SelectionConfig(n_frames=5))
    assert selection.training == [0, 1, 2, 3, 4]
    assert selection.degenerate_clusters == 4
    assert "4 of 5 k-means clusters had no frame of their own" in caplog.text
    assert selection.validation == list(range(5, 15))


def test_validation_limited_by_frames_left(caplog):
    poses, _ = clustered_poses(n_per_cluster=2)
    selection = select(poses, SelectionConfig(n_frames=4, n_validation=5))
    assert len(selection.validation) == 2
    assert sorted(selection.training + selection.validation) == list(range(6))
    assert "only 2 frames left" in caplog.text


def test_too_few_frames():
    with pytest.raises(SelectionError):
        select([np.zeros((23, 3))] * 3, SelectionConfig(n_frames=4))
    with pytest.raises(SelectionError):
        SelectionConfig(n_frames=0)


def test_kmeans_inertia_never_increases():
    X = np.random.default_rng(2).normal(size=(300, 6))
    result = kmeans(X, 8, seed=1)
    assert np.all(np.diff(result.inertia) <= 1e-9)
    assert result.iterations == len(result.inertia) - 1


def test_select_frames():
    poses, groups = clustered_poses()
    frames = select_frames(poses, f=3)
    assert frames == sorted(frames)
    assert sorted(groups[frames]) == [0, 1, 2]
