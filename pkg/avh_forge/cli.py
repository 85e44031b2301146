import dataclasses
import logging
import os
import sys

import click

from . import pose_select, training
from .baking import load_bundle, preview_images, read_sidecar
from .decoder import (
    REFERENCE_HIDDEN_SIZES,
    DecoderError,
    DecoderWeights,
    describe,
    reference_configs,
)
from .executors import run_pipelines
from .formats import FormatError, read_json, write_json, write_png
from .manifest import ManifestError, ProjectManifest
from .recipe import (
    QUALITY_REPORT,
    TRAINING_STORE,
    BakeRecipe,
    SynthRecipe,
    TrainingSetRecipe,
    frame_prefix,
    kept_frames,
    read_quality_report,
)
from .skinning import SkinningError, poses_from_json
from .storage import FSSpecTarget
from .synthetic import write_synthetic_project
from .utils import config_hash, parse_frame_range

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_INVALID = 2

SELECTION_FILE = "selection.json"
WEIGHTS_FILE = "weights.avhw"
LOSS_FILE = "loss.csv"

manifest_option = click.option(
    "--manifest",
    "-m",
    default="project.json",
    show_default=True,
    type=click.Path(dir_okay=False),
    help="Path of the project manifest.",
)
jobs_option = click.option("--jobs", "-j", type=int, default=None, help="Frames processed at once.")
frames_option = click.option(
    "--frames", default=None, help="Range of manifest frames, 'a..b' with both ends inclusive."
)
seed_option = click.option("--seed", type=int, default=None, help="Override the manifest seed.")


def _configure_logging():
    name = os.environ.get("AVH_LOG", "WARNING").upper()
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _fail(message, code=EXIT_INVALID):
    click.echo(message, err=True)
    sys.exit(code)


def _load(manifest, jobs=None, seed=None) -> ProjectManifest:
    try:
        project = ProjectManifest.load(manifest)
        return project.with_overrides(jobs=jobs, seed=seed)
    except ManifestError as e:
        _fail(f"Invalid manifest: {e}")


def training_hash(project: ProjectManifest, target, selection: dict) -> str:
    """Hash of everything a training run depends on: the decoder and training
    blocks, the selection and the config hashes of the selected bundles."""
    bundles = {
        frame_id: read_sidecar(target, frame_prefix(frame_id)).get("config_hash")
        for frame_id in selection["training"] + selection["validation"]
    }
    return config_hash(project.decoder, project.training, selection, bundles)


@click.group()
@click.version_option(package_name="avh-forge")
def main():
    """
    Build an animatable virtual human from a sequence of textured scans.

    The typical workflow is

    * avh bake      # register and bake every frame, write the quality report
    * avh select    # pick training and validation frames by pose variance
    * avh train     # fit the texture and displacement decoder
    * avh synth     # synthesize meshes for new poses

    Set AVH_LOG (e.g. INFO, DEBUG) for progress output.
    """
    _configure_logging()


@click.command()
@manifest_option
@jobs_option
@frames_option
@seed_option
@click.option("--force/--no-force", default=False, help="Rebake frames that are up to date.")
def bake(manifest, jobs, frames, seed, force):
    """
    Register each frame's posed template to its scan and bake color,
    displacement and confidence maps into the output directory.
    """
    project = _load(manifest, jobs, seed)
    try:
        frame_range = parse_frame_range(frames)
    except ValueError:
        _fail(f"Invalid frame range '{frames}'")
    recipe = BakeRecipe(project, project.output_target(), frames=frame_range, force=force)
    try:
        recipe.template
    except (ManifestError, SkinningError, FormatError) as e:
        _fail(f"Invalid template: {e}")
    run_pipelines(recipe.to_pipelines(), project.jobs)
    n = len(list(recipe.iter_inputs()))
    if recipe.failed:
        failed = ", ".join(recipe.failed)
        _fail(f"{len(recipe.failed)} of {n} frames failed: {failed}", EXIT_PARTIAL)
    click.echo(f"Baked {n} frames into {recipe.target.url()}")


@click.command()
@manifest_option
@seed_option
@click.option("--n-frames", "-f", type=int, default=None, help="Number of training frames.")
def select(manifest, seed, n_frames):
    """
    Choose training frames, one per k-means cluster of the poses of the kept
    frames, and validation frames from the remaining ones.
    """
    project = _load(manifest, seed=seed)
    target = project.output_target()
    if not target.exists(QUALITY_REPORT):
        _fail(f"No {QUALITY_REPORT} in {target.url()}; run 'avh bake' first")
    ids = kept_frames(project, read_quality_report(target))
    config = project.selection
    if n_frames is not None:
        try:
            config = dataclasses.replace(config, n_frames=n_frames)
        except pose_select.SelectionError as e:
            _fail(str(e))
    try:
        result = pose_select.select([project.frame(i).theta for i in ids], config)
    except pose_select.SelectionError as e:
        _fail(f"Cannot select frames: {e}")
    selection = {
        "training": [ids[i] for i in result.training],
        "validation": [ids[i] for i in result.validation],
        "degenerate_clusters": result.degenerate_clusters,
        "config_hash": config_hash(config, ids),
    }
    with target.open(SELECTION_FILE, mode="wb") as f:
        write_json(f, selection)
    click.echo(
        f"Selected {len(selection['training'])} training and "
        f"{len(selection['validation'])} validation frames"
    )


@click.command()
@manifest_option
@jobs_option
@seed_option
def train(manifest, jobs, seed):
    """
    Assemble the selected frames into a training set and fit the decoder.
    Writes the weight file and the per-epoch loss curves.
    """
    project = _load(manifest, jobs, seed)
    target = project.output_target()
    if not target.exists(SELECTION_FILE):
        _fail(f"No {SELECTION_FILE} in {target.url()}; run 'avh select' first")
    with target.open(SELECTION_FILE, mode="rb") as f:
        selection = read_json(f)
    recipe = TrainingSetRecipe(
        project,
        target,
        training_ids=selection["training"],
        validation_ids=selection["validation"],
    )
    try:
        run_pipelines(recipe.to_pipelines(), project.jobs)
    except FileNotFoundError as e:
        _fail(f"Missing bundle: {e}")
    data, validation = training.open_training_set(target.get_mapper(TRAINING_STORE))
    trained_from = training_hash(project, target, selection)
    try:
        result = training.train(data, project.decoder, project.training, validation)
    except (training.TrainingError, DecoderError) as e:
        _fail(f"Training failed: {e}", EXIT_PARTIAL)
    result.weights.config_hash = trained_from
    with target.open(WEIGHTS_FILE, mode="wb") as f:
        result.weights.save(f)
    with target.open(LOSS_FILE, mode="w") as f:
        training.write_history(result.history, f, trained_from)
    final = result.history.iloc[-1]
    click.echo(
        f"Trained {int(final['step'])} steps, final training loss {final['train_loss']:.6g}"
    )


@click.command()
@manifest_option
@jobs_option
@click.option("--pose", "pose_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--frame", "frame_id", default=None, help="Use the pose of a manifest frame.")
@click.option("--weights", "weights_path", default=None, help="Weight file to synthesize with.")
@click.option("--out", default=None, help="Output directory; default <output_dir>/synth.")
@click.option("--preview/--no-preview", default=False, help="Also write a shaded preview.")
@click.option("--dump-maps/--no-dump-maps", default=False, help="Also write the maps as PFM.")
def synth(manifest, jobs, pose_file, frame_id, weights_path, out, preview, dump_maps):
    """
    Synthesize a displaced, textured mesh for every pose of a JSON pose file
    (a pose, or a list of poses for an animation), or for a manifest frame.
    """
    if (pose_file is None) == (frame_id is None):
        raise click.UsageError("give exactly one of --pose and --frame")
    project = _load(manifest, jobs)
    target = project.output_target()
    try:
        if pose_file is not None:
            poses = poses_from_json(read_json(pose_file))
        else:
            poses = [project.frame(frame_id).pose()]
    except (SkinningError, FormatError, ManifestError) as e:
        _fail(f"Invalid pose: {e}")
    try:
        if weights_path is not None:
            weights = DecoderWeights.load(weights_path)
        elif target.exists(WEIGHTS_FILE):
            with target.open(WEIGHTS_FILE, mode="rb") as f:
                weights = DecoderWeights.load(f)
        else:
            _fail(f"No {WEIGHTS_FILE} in {target.url()}; run 'avh train' first")
    except (FileNotFoundError, FormatError, DecoderError) as e:
        _fail(f"Cannot load weights: {e}")
    if out is not None:
        target, prefix = FSSpecTarget.from_url(out), ""
    else:
        prefix = "synth"
    recipe = SynthRecipe(
        project,
        weights,
        poses,
        target=target,
        prefix=prefix,
        preview=preview,
        dump_maps=dump_maps,
    )
    try:
        run_pipelines(recipe.to_pipelines(), project.jobs)
    except (SkinningError, DecoderError) as e:
        _fail(f"Synthesis failed: {e}")
    click.echo(f"Wrote {len(poses)} meshes to {target.url(prefix)}")


@click.command()
@click.argument("frame_id")
@manifest_option
@click.option("--out", default=None, help="Output directory; default frames/<id>/inspect.")
def inspect(frame_id, manifest, out):
    """
    Write PNG previews of a baked frame: color, normalized displacement and
    confidence.
    """
    project = _load(manifest)
    target = project.output_target()
    prefix = frame_prefix(frame_id)
    if not target.exists(f"{prefix}/bundle.json"):
        _fail(f"No bundle for frame '{frame_id}' in {target.url()}")
    bundle = load_bundle(target, prefix)
    if out is not None:
        dest, dest_prefix = FSSpecTarget.from_url(out), ""
    else:
        dest, dest_prefix = target, f"{prefix}/inspect"
    for name, image in preview_images(bundle).items():
        path = f"{dest_prefix}/{name}.png" if dest_prefix else f"{name}.png"
        with dest.open(path, mode="wb") as f:
            write_png(f, image)
    matched = float(bundle.matched.sum()) / max(int(bundle.defined.sum()), 1)
    click.echo(
        f"Frame '{frame_id}': mean confidence {bundle.quality}, "
        f"{matched:.1%} of defined texels matched"
    )


@click.command()
@click.option(
    "--hidden",
    "hidden_sizes",
    type=int,
    multiple=True,
    help="MLP hidden sizes to report (default 128, 256 and 512).",
)
def params(hidden_sizes):
    """
    Print the decoder's parameter count per block for the reference
    architecture-size configurations.
    """
    for hidden in hidden_sizes or REFERENCE_HIDDEN_SIZES:
        for cfg, reference in reference_configs(hidden):
            click.echo(
                f"fc={cfg.fc_size} latent={cfg.latent_size} hidden={cfg.hidden_size} "
                f"out={cfg.out_resolution}"
            )
            click.echo(describe(cfg, reference))
            click.echo()


@click.command()
@click.argument("directory", type=click.Path(file_okay=False))
@click.option("--frames", "n_frames", type=int, default=8, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def demo(directory, n_frames, seed):
    """
    Write a small synthetic project (a capsule person and scans displaced
    along its normals) to DIRECTORY.
    """
    path = write_synthetic_project(directory, n_frames=n_frames, seed=seed)
    click.echo(f"Wrote {path}")


main.add_command(bake)
main.add_command(select)
main.add_command(train)
main.add_command(synth)
main.add_command(inspect)
main.add_command(params)
main.add_command(demo)


if __name__ == "__main__":
    main()
