import os

import pytest
from click.testing import CliRunner

from avh_forge.cli import EXIT_INVALID, EXIT_OK, EXIT_PARTIAL, main, training_hash
from avh_forge.decoder import DecoderWeights
from avh_forge.formats import read_json, read_obj, write_json
from avh_forge.manifest import ProjectManifest
from avh_forge.synthetic import desk_scale_blocks, random_poses, write_synthetic_project


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A synthetic project taken through bake, select and train."""
    blocks = desk_scale_blocks()
    blocks["confidence"] = dict(blocks["confidence"], quality_threshold=0.0)
    directory = tmp_path_factory.mktemp("cli")
    manifest = write_synthetic_project(str(directory / "project"), n_frames=3, blocks=blocks)
    results = {
        "bake": invoke("bake", "-m", manifest, "-j", 2),
        "select": invoke("select", "-m", manifest),
        "train": invoke("train", "-m", manifest, "-j", 2),
    }
    return manifest, os.path.join(os.path.dirname(manifest), "output"), results


def test_pipeline(trained):
    manifest, output, results = trained
    for step, result in results.items():
        assert result.exit_code == EXIT_OK, (step, result.output)
    assert "Baked 3 frames" in results["bake"].output
    assert "Selected 2 training and 1 validation frames" in results["select"].output
    assert "Trained 5 steps" in results["train"].output

    quality = read_json(os.path.join(output, "quality.json"))
    assert all(entry["keep"] for entry in quality.values())
    selection = read_json(os.path.join(output, "selection.json"))
    assert len(selection["training"]) == 2
    assert not set(selection["training"]) & set(selection["validation"])
    with open(os.path.join(output, "loss.csv")) as f:
        lines = f.read().splitlines()
    header = ["epoch", "step", "lr", "train_loss", "validation_loss", "config_hash"]
    assert lines[0].split(",") == header
    assert len(lines) == 6
    weights = DecoderWeights.load(os.path.join(output, "weights.avhw"))
    assert weights.config.out_resolution == 32
    project = ProjectManifest.load(manifest)
    target = project.output_target()
    assert weights.config_hash == training_hash(project, target, selection)
    assert {line.rsplit(",", 1)[1] for line in lines[1:]} == {weights.config_hash}


def test_training_hash_follows_its_inputs(trained):
    manifest, _, _ = trained
    project = ProjectManifest.load(manifest)
    target = project.output_target()
    selection = read_json(target.url("selection.json"))
    h = training_hash(project, target, selection)
    assert training_hash(project.with_overrides(seed=7), target, selection) != h
    swapped = dict(selection, validation=[])
    assert training_hash(project, target, swapped) != h


def test_synth_frame(trained):
    manifest, output, _ = trained
    result = invoke("synth", "-m", manifest, "--frame", "frame_001", "--preview", "--dump-maps")
    assert result.exit_code == EXIT_OK, result.output
    assert "Wrote 1 meshes" in result.output
    names = sorted(os.listdir(os.path.join(output, "synth")))
    assert names == [
        "pose_0000.obj",
        "pose_0000.png",
        "pose_0000_displacement.pfm",
        "pose_0000_preview.png",
        "pose_0000_texture.pfm",
    ]


def test_synth_animation(trained, tmp_path):
    manifest, output, _ = trained
    pose_file = str(tmp_path / "walk.json")
    write_json(pose_file, [{"theta": theta.tolist()} for theta in random_poses(3, seed=5)])
    out = str(tmp_path / "walk")
    weights = os.path.join(output, "weights.avhw")
    result = invoke(
        "synth", "-m", manifest, "--pose", pose_file, "--weights", weights, "--out", out
    )
    assert result.exit_code == EXIT_OK, result.output
    assert sorted(f for f in os.listdir(out) if f.endswith(".obj")) == [
        "pose_0000.obj",
        "pose_0001.obj",
        "pose_0002.obj",
    ]
    assert read_obj(os.path.join(out, "pose_0002.obj")).has_uvs


def test_synth_usage(trained, tmp_path):
    manifest, _, _ = trained
    result = invoke("synth", "-m", manifest)
    assert result.exit_code == EXIT_INVALID
    assert "exactly one of --pose and --frame" in result.output
    bad = str(tmp_path / "bad.json")
    write_json(bad, {"theta": [[0.0, 0.0]], "speed": 2})
    result = invoke("synth", "-m", manifest, "--pose", bad)
    assert result.exit_code == EXIT_INVALID
    assert "Invalid pose" in result.output


def test_inspect(trained, tmp_path):
    manifest, _, _ = trained
    out = str(tmp_path / "inspect")
    result = invoke("inspect", "frame_000", "-m", manifest, "--out", out)
    assert result.exit_code == EXIT_OK, result.output
    assert "Frame 'frame_000': mean confidence" in result.output
    assert sorted(os.listdir(out)) == ["confidence.png", "displacement.png", "texture.png"]
    result = invoke("inspect", "frame_999", "-m", manifest)
    assert result.exit_code == EXIT_INVALID


def test_failed_frame_exit_code(synthetic_project):
    os.remove(os.path.join(os.path.dirname(synthetic_project), "scans", "frame_001.obj"))
    result = invoke("bake", "-m", synthetic_project, "--frames", "1")
    assert result.exit_code == EXIT_PARTIAL
    assert "1 of 1 frames failed: frame_001" in result.output


@pytest.mark.parametrize(
    "args, message",
    [
        (("bake", "--frames", "a..b"), "Invalid frame range"),
        (("select",), "run 'avh bake' first"),
        (("select", "--n-frames", "0"), "n_frames"),
        (("train",), "run 'avh select' first"),
        (("synth", "--frame", "frame_000"), "run 'avh train' first"),
    ],
)
def test_invalid_invocations(synthetic_project, args, message):
    if args[0] == "select" and len(args) > 1:
        os.makedirs(os.path.join(os.path.dirname(synthetic_project), "output"), exist_ok=True)
        write_json(os.path.join(os.path.dirname(synthetic_project), "output", "quality.json"), {})
    result = invoke(*args, "-m", synthetic_project)
    assert result.exit_code == EXIT_INVALID
    assert message in result.output


def test_invalid_manifest(tmp_path):
    result = invoke("bake", "-m", tmp_path / "missing.json")
    assert result.exit_code == EXIT_INVALID
    assert "Invalid manifest" in result.output


def test_params():
    result = invoke("params", "--hidden", 256)
    assert result.exit_code == EXIT_OK
    assert result.output.count("fc=") == 6
    assert "ratio" in result.output


def test_demo(tmp_path):
    result = invoke("demo", tmp_path / "demo", "--frames", 2)
    assert result.exit_code == EXIT_OK
    project = read_json(str(tmp_path / "demo" / "project.json"))
    assert [f["id"] for f in project["frames"]] == ["frame_000", "frame_001"]


def test_version():
    result = invoke("--version")
    assert result.exit_code == EXIT_OK
    assert "version" in result.output
