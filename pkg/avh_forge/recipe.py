"""
Recipes: frame-level work expressed as stages for an executor.
"""

import logging
import posixpath
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Dict, Hashable, Iterable, List, NoReturn, Optional, Sequence

import numpy as np
import xarray as xr
import zarr
from rechunker.types import MultiStagePipeline, ParallelPipelines, Stage

from .accel import build_accel
from .baking import BakeBundle, bake_frame, filter_outliers, load_bundle, read_sidecar, save_bundle
from .confidence import apply_confidence
from .decoder import DecoderWeights, forward
from .formats import read_json, read_textured_obj, write_json, write_obj, write_pfm, write_png
from .inpaint import fill_bundle
from .manifest import FrameRecord, ProjectManifest, frame_hash
from .registration import register
from .renderer import load_finger_mask, render_preview, synthesize
from .skinning import Pose, Shape, SkinnedTemplate, pose_mesh
from .storage import AbstractTarget, UninitializedTarget
from .training import TRAINING, VALIDATION, to_dataset, training_set

logger = logging.getLogger(__name__)

FRAMES_DIR = "frames"
QUALITY_REPORT = "quality.json"
TRAINING_STORE = "training.zarr"
FRAME_ID_DTYPE = "U64"

# How to manually execute a recipe:
#
#   r = BakeRecipe(manifest, target=manifest.output_target())
#   r.prepare_target()
#   for frame_id in r.iter_inputs():
#       r.process_input(frame_id)
#   r.finalize_target()


class BaseRecipe(ABC):
    """Base recipe class from which all other Recipes inherit."""

    @property
    @abstractmethod
    def prepare_target(self) -> Callable[[], NoReturn]:
        """Prepare the recipe for execution by initializing the target.
        Attribute that returns a callable function.
        """
        pass

    @abstractmethod
    def iter_inputs(self) -> Iterable[Hashable]:
        """Iterate over all inputs."""
        pass

    @property
    @abstractmethod
    def process_input(self) -> Callable[[Hashable], NoReturn]:
        """Process one input and store its results in the target.
        Attribute that returns a callable function.
        """
        pass

    @property
    @abstractmethod
    def finalize_target(self) -> Callable[[], NoReturn]:
        """Final step to finish the recipe after data has been written.
        Attribute that returns a callable function.
        """
        pass

    def to_pipelines(self) -> ParallelPipelines:
        """Translate recipe to pipeline for execution."""
        pipeline = []  # type: MultiStagePipeline
        pipeline.append(Stage(self.prepare_target))
        pipeline.append(Stage(self.process_input, list(self.iter_inputs())))
        pipeline.append(Stage(self.finalize_target))
        return [pipeline]


def frame_prefix(frame_id: str) -> str:
    return posixpath.join(FRAMES_DIR, frame_id)


def bake_record(
    manifest: ProjectManifest,
    template: SkinnedTemplate,
    shape: Shape,
    record: FrameRecord,
    config_hash: str = "",
) -> BakeBundle:
    """Pose, register, bake, score, filter and inpaint one frame."""
    shadow = pose_mesh(template, shape, record.pose())
    scan = read_textured_obj(
        manifest.resolve(record.scan), manifest.resolve(record.scan_texture)
    )
    scan_accel = build_accel(scan, manifest.accel)
    registered = register(shadow, scan_accel, manifest.registration)
    bundle = bake_frame(
        registered,
        shadow,
        scan,
        config=manifest.bake,
        frame_id=record.id,
        theta=record.theta,
        scan_accel=scan_accel,
    )
    bundle = apply_confidence(
        bundle,
        registered,
        scan,
        manifest.confidence,
        registered_accel=build_accel(registered, manifest.accel),
        scan_accel=scan_accel,
    )
    bundle = filter_outliers(bundle, manifest.bake.outlier_limit)
    bundle = fill_bundle(bundle, manifest.inpaint.radius)
    return bundle.replace(config_hash=config_hash)


@dataclass
class BakeRecipe(BaseRecipe):
    """Bake every frame of a project into ``frames/<id>/`` and write a quality
    report.

    A frame whose ``bundle.json`` already carries the current config hash is
    skipped. A failing frame gets an ``error.json`` instead of a bundle; the
    other frames proceed.

    :param manifest: The project.
    :param target: Where the bundles go, usually the project's output directory.
    :param frames: Optional slice of the manifest's frames to bake.
    :param force: Rebake frames that are up to date.
    """

    manifest: ProjectManifest
    target: AbstractTarget = field(default_factory=UninitializedTarget)
    frames: Optional[slice] = None
    force: bool = False
    _template: Optional[SkinnedTemplate] = field(default=None, init=False, repr=False)
    _status: Dict[str, str] = field(default_factory=dict, init=False, repr=False)

    @property
    def template(self) -> SkinnedTemplate:
        if self._template is None:
            self._template = self.manifest.load_template()
        return self._template

    def iter_inputs(self):
        for frame_id in self.manifest.frame_ids(self.frames):
            yield frame_id

    @property
    def failed(self) -> List[str]:
        """Frames that failed during this run."""
        return sorted(k for k, v in self._status.items() if v == "failed")

    @property
    def prepare_target(self) -> Callable:
        def _prepare_target():
            # load once, before frames are processed concurrently
            logger.info(f"Baking {len(list(self.iter_inputs()))} frames into {self.target}")
            _ = self.template

        return _prepare_target

    def is_current(self, frame_id: str, config_hash: str) -> bool:
        prefix = frame_prefix(frame_id)
        if not self.target.exists(f"{prefix}/bundle.json"):
            return False
        return read_sidecar(self.target, prefix).get("config_hash") == config_hash

    @property
    def process_input(self) -> Callable:
        def _process_input(frame_id: str):
            record = self.manifest.frame(frame_id)
            prefix = frame_prefix(frame_id)
            h = frame_hash(self.manifest, record)
            if not self.force and self.is_current(frame_id, h):
                logger.info(f"Frame '{frame_id}' is up to date")
                self._status[frame_id] = "cached"
                return
            try:
                shape = self.manifest.full_shape(self.template)
                bundle = bake_record(self.manifest, self.template, shape, record, h)
            except Exception as e:
                logger.error(f"Frame '{frame_id}' failed: {e}")
                self._status[frame_id] = "failed"
                if self.target.exists(f"{prefix}/bundle.json"):
                    self.target.rm(f"{prefix}/bundle.json")
                with self.target.open(f"{prefix}/error.json", mode="wb") as f:
                    write_json(f, {"frame_id": frame_id, "config_hash": h, "error": str(e)})
                return
            save_bundle(bundle, self.target, prefix)
            if self.target.exists(f"{prefix}/error.json"):
                self.target.rm(f"{prefix}/error.json")
            self._status[frame_id] = "ok"

        return _process_input

    def frame_report(self, frame_id: str) -> dict:
        prefix = frame_prefix(frame_id)
        threshold = self.manifest.confidence.quality_threshold
        if self.target.exists(f"{prefix}/error.json"):
            with self.target.open(f"{prefix}/error.json", mode="rb") as f:
                error = read_json(f)
            return {"quality": None, "keep": False, "status": "failed", "error": error["error"]}
        if self.target.exists(f"{prefix}/bundle.json"):
            quality = read_sidecar(self.target, prefix).get("quality")
            keep = quality is not None and quality >= threshold
            if not keep:
                logger.warning(f"Frame '{frame_id}' is discarded (mean confidence {quality})")
            return {"quality": quality, "keep": keep, "status": "ok", "error": None}
        return {"quality": None, "keep": False, "status": "missing", "error": None}

    @property
    def finalize_target(self) -> Callable:
        def _finalize_target():
            report = {f: self.frame_report(f) for f in self.manifest.frame_ids()}
            with self.target.open(QUALITY_REPORT, mode="wb") as f:
                write_json(f, report)
            kept = sum(r["keep"] for r in report.values())
            logger.info(f"Quality report: {kept} of {len(report)} frames kept")

        return _finalize_target


def read_quality_report(target: AbstractTarget) -> dict:
    with target.open(QUALITY_REPORT, mode="rb") as f:
        return read_json(f)


def kept_frames(manifest: ProjectManifest, report: dict) -> List[str]:
    """Frames, in manifest order, that baked and passed the quality gate."""
    return [
        frame_id
        for frame_id in manifest.frame_ids()
        if report.get(frame_id, {}).get("status") == "ok" and report[frame_id].get("keep")
    ]


@dataclass
class TrainingSetRecipe(BaseRecipe):
    """Gather the selected bundles, resampled to the decoder's resolution, into
    one Zarr store along a ``frame`` dimension.

    :param manifest: The project.
    :param target: The output directory holding ``frames/<id>/``.
    :param training_ids: Frames to train on.
    :param validation_ids: Frames held out for validation.
    :param store: Name of the Zarr store within the target.
    """

    manifest: ProjectManifest
    target: AbstractTarget = field(default_factory=UninitializedTarget)
    training_ids: Sequence[str] = ()
    validation_ids: Sequence[str] = ()
    store: str = TRAINING_STORE

    def __post_init__(self):
        self._inputs = [(frame_id, TRAINING) for frame_id in self.training_ids] + [
            (frame_id, VALIDATION) for frame_id in self.validation_ids
        ]
        if not self._inputs:
            raise RecipeError("a training set needs at least one frame")
        too_long = [f for f, _ in self._inputs if len(f) > int(FRAME_ID_DTYPE[1:])]
        if too_long:
            raise RecipeError(f"frame ids too long for the store: {too_long}")

    def iter_inputs(self):
        for index in range(len(self._inputs)):
            yield index

    def open_frame(self, index: int) -> xr.Dataset:
        frame_id, role = self._inputs[index]
        logger.info(f"Loading bundle of frame '{frame_id}' ({role})")
        bundle = load_bundle(self.target, frame_prefix(frame_id))
        data = training_set([bundle], self.manifest.decoder.out_resolution)
        ds = to_dataset(data, role)
        return ds.assign_coords(frame=ds["frame"].values.astype(FRAME_ID_DTYPE))

    def open_target(self) -> xr.Dataset:
        return xr.open_zarr(self.target.get_mapper(self.store))

    def expand_target_dim(self, dim: str, dimsize: int):
        zgroup = zarr.open_group(self.target.get_mapper(self.store))
        ds = self.open_target()
        axes = {v: ds[v].get_axis_num(dim) for v in ds.variables if dim in ds[v].dims}
        for v, axis in axes.items():
            arr = zgroup[v]
            shape = list(arr.shape)
            shape[axis] = dimsize
            arr.resize(shape)

    @property
    def prepare_target(self) -> Callable:
        def _prepare_target():
            ds = self.open_frame(0).chunk()
            logger.info(f"Creating a training set of {len(self._inputs)} frames")
            ds.to_zarr(self.target.get_mapper(self.store), mode="w", compute=False)
            self.expand_target_dim("frame", len(self._inputs))

        return _prepare_target

    @property
    def process_input(self) -> Callable:
        def _process_input(index: int):
            ds = self.open_frame(index)
            region = {"frame": slice(index, index + 1)}
            logger.debug(f"Storing frame {index} to Zarr region {region}")
            ds.to_zarr(self.target.get_mapper(self.store), region=region)

        return _process_input

    @property
    def finalize_target(self) -> Callable:
        def _finalize_target():
            logger.info("Consolidating Zarr metadata")
            zarr.consolidate_metadata(self.target.get_mapper(self.store))

        return _finalize_target


@dataclass
class SynthRecipe(BaseRecipe):
    """Synthesize one displaced, textured mesh per pose.

    Pose ``i`` is written as ``<prefix>/pose_<i>.obj`` with its texture
    ``pose_<i>.png``; ``preview`` adds ``pose_<i>_preview.png`` and
    ``dump_maps`` the predicted maps as PFM.
    """

    manifest: ProjectManifest
    weights: DecoderWeights
    poses: Sequence[Pose]
    target: AbstractTarget = field(default_factory=UninitializedTarget)
    prefix: str = "synth"
    preview: bool = False
    dump_maps: bool = False
    _template: Optional[SkinnedTemplate] = field(default=None, init=False, repr=False)
    _finger_mask: Optional[np.ndarray] = field(default=None, init=False, repr=False)

    def iter_inputs(self):
        for index in range(len(self.poses)):
            yield index

    def name(self, index: int) -> str:
        return posixpath.join(self.prefix, f"pose_{index:04d}")

    @property
    def prepare_target(self) -> Callable:
        def _prepare_target():
            self._template = self.manifest.load_template()
            mask_path = self.manifest.render.finger_mask
            if mask_path:
                self._finger_mask = load_finger_mask(
                    self.manifest.resolve(mask_path), self.weights.config.out_resolution
                )

        return _prepare_target

    @property
    def process_input(self) -> Callable:
        def _process_input(index: int):
            if self._template is None:
                self.prepare_target()
            pose = self.poses[index]
            name = self.name(index)
            logger.info(f"Synthesizing pose {index} into '{name}.obj'")
            maps = forward(self.weights, pose.theta)
            mesh = synthesize(
                self.weights,
                self._template,
                self.manifest.full_shape(self._template),
                pose,
                self.manifest.render,
                finger_mask=self._finger_mask,
                maps=maps,
            )
            with self.target.open(f"{name}.obj", mode="wb") as f:
                write_obj(f, mesh, comment=f"pose {index}")
            with self.target.open(f"{name}.png", mode="wb") as f:
                write_png(f, mesh.texture)
            if self.preview:
                with self.target.open(f"{name}_preview.png", mode="wb") as f:
                    write_png(f, render_preview(mesh, self.manifest.render.preview_size))
            if self.dump_maps:
                for head in ("texture", "displacement"):
                    with self.target.open(f"{name}_{head}.pfm", mode="wb") as f:
                        write_pfm(f, getattr(maps, head))

        return _process_input

    @property
    def finalize_target(self) -> Callable:
        def _finalize_target():
            logger.info(f"Synthesized {len(self.poses)} poses into '{self.prefix}'")

        return _finalize_target


class RecipeError(Exception):
    """Base class for exceptions in this module."""

    pass
