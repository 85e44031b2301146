"""
The project manifest: template, shape, frame records, output location and one
configuration block per pipeline step.
"""

import dataclasses
import logging
import posixpath
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import fsspec
import numpy as np

from .accel import AccelConfig
from .baking import BakeConfig
from .confidence import ConfidenceConfig
from .decoder import DecoderConfig
from .formats import FormatError, read_json
from .inpaint import InpaintConfig
from .pose_select import SelectionConfig
from .registration import RegistrationParams
from .renderer import RenderConfig
from .skinning import Pose, Shape, SkinnedTemplate, SkinningError, load_template, template_files
from .storage import FSSpecTarget
from .training import TrainConfig
from .utils import config_hash, file_digest, to_jsonable

logger = logging.getLogger(__name__)

BLOCKS = {
    "accel": AccelConfig,
    "registration": RegistrationParams,
    "bake": BakeConfig,
    "confidence": ConfidenceConfig,
    "inpaint": InpaintConfig,
    "selection": SelectionConfig,
    "decoder": DecoderConfig,
    "training": TrainConfig,
    "render": RenderConfig,
}

# blocks that shape a frame's bake
BAKE_BLOCKS = ("accel", "registration", "bake", "confidence", "inpaint")


@dataclass(frozen=True)
class FrameRecord:
    """
    :param id: Unique frame name.
    :param theta: ``(J - 1, 3)`` axis-angle pose of the fitted template.
    :param scan: Path of the scan OBJ, relative to the manifest.
    :param scan_texture: Path of the scan's RGB texture.
    """

    id: str
    theta: np.ndarray
    scan: str
    scan_texture: str
    global_translation: tuple = (0.0, 0.0, 0.0)
    global_rotation: tuple = (0.0, 0.0, 0.0)
    global_scale: float = 1.0

    def pose(self) -> Pose:
        return Pose(
            theta=self.theta,
            global_translation=self.global_translation,
            global_rotation=self.global_rotation,
            global_scale=self.global_scale,
        )


def _block(name, data):
    cls = BLOCKS[name]
    if not isinstance(data, dict):
        raise ManifestError(f"config block '{name}' must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ManifestError(f"unknown keys in config block '{name}': {', '.join(unknown)}")
    try:
        return cls(**data)
    except Exception as e:
        raise ManifestError(f"invalid config block '{name}': {e}") from e


def _frame(data) -> FrameRecord:
    if not isinstance(data, dict):
        raise ManifestError("frame records must be objects")
    known = {f.name for f in dataclasses.fields(FrameRecord)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ManifestError(f"unknown keys in frame record: {', '.join(unknown)}")
    missing = [k for k in ("id", "theta", "scan", "scan_texture") if k not in data]
    if missing:
        raise ManifestError(f"frame record lacks {', '.join(missing)}")
    record = FrameRecord(
        id=str(data["id"]),
        theta=np.asarray(data["theta"], dtype=np.float64),
        scan=data["scan"],
        scan_texture=data["scan_texture"],
        global_translation=tuple(data.get("global_translation", (0.0, 0.0, 0.0))),
        global_rotation=tuple(data.get("global_rotation", (0.0, 0.0, 0.0))),
        global_scale=float(data.get("global_scale", 1.0)),
    )
    try:
        record.pose()
    except Exception as e:
        raise ManifestError(f"frame '{record.id}': {e}") from e
    return record


@dataclass(frozen=True)
class ProjectManifest:
    """A project description, usually loaded from ``project.json``.

    Relative paths are resolved against ``root``, the manifest's directory.
    """

    template: str
    frames: List[FrameRecord]
    beta: tuple = ()
    output_dir: str = "output"
    seed: int = 0
    jobs: int = 1
    root: str = ""
    accel: AccelConfig = field(default_factory=AccelConfig)
    registration: RegistrationParams = field(default_factory=RegistrationParams)
    bake: BakeConfig = field(default_factory=BakeConfig)
    confidence: ConfidenceConfig = field(default_factory=ConfidenceConfig)
    inpaint: InpaintConfig = field(default_factory=InpaintConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    render: RenderConfig = field(default_factory=RenderConfig)

    def __post_init__(self):
        ids = [f.id for f in self.frames]
        duplicates = sorted({i for i in ids if ids.count(i) > 1})
        if duplicates:
            raise ManifestError(f"duplicate frame ids: {', '.join(duplicates)}")
        if self.jobs < 1:
            raise ManifestError("jobs must be at least 1")

    @classmethod
    def from_dict(cls, data: dict, root: str = "") -> "ProjectManifest":
        if not isinstance(data, dict):
            raise ManifestError("a manifest must be a JSON object")
        top = {"template", "frames", "beta", "output_dir", "seed", "jobs"}
        unknown = sorted(set(data) - top - set(BLOCKS))
        if unknown:
            raise ManifestError(f"unknown manifest keys: {', '.join(unknown)}")
        if "template" not in data:
            raise ManifestError("manifest lacks a template")
        blocks = {name: _block(name, data.get(name, {})) for name in BLOCKS}
        manifest = cls(
            template=data["template"],
            frames=[_frame(f) for f in data.get("frames", [])],
            beta=tuple(float(b) for b in data.get("beta", ())),
            output_dir=data.get("output_dir", "output"),
            seed=int(data.get("seed", 0)),
            jobs=int(data.get("jobs", 1)),
            root=root,
            **blocks,
        )
        if "seed" in data:
            manifest = manifest.with_overrides(seed=manifest.seed)
        return manifest

    @classmethod
    def load(cls, path: str) -> "ProjectManifest":
        """Read and validate a manifest; the template file must exist."""
        try:
            data = read_json(path)
        except (FileNotFoundError, FormatError) as e:
            raise ManifestError(f"cannot read manifest '{path}': {e}") from e
        manifest = cls.from_dict(data, root=posixpath.dirname(path))
        fs, template_path = fsspec.core.url_to_fs(manifest.resolve(manifest.template))
        if not fs.exists(template_path):
            raise ManifestError(f"template '{manifest.template}' does not exist")
        logger.info(f"Loaded manifest '{path}' with {len(manifest.frames)} frames")
        return manifest

    def to_dict(self) -> dict:
        data = {
            "template": self.template,
            "frames": [
                {k: v for k, v in to_jsonable(f).items() if v is not None} for f in self.frames
            ],
            "beta": list(self.beta),
            "output_dir": self.output_dir,
            "seed": self.seed,
            "jobs": self.jobs,
        }
        data.update({name: to_jsonable(getattr(self, name)) for name in BLOCKS})
        return data

    def with_overrides(self, jobs: Optional[int] = None, seed: Optional[int] = None):
        """Apply command-line overrides; a seed also reseeds selection and training."""
        changes = {}
        if jobs is not None:
            changes["jobs"] = jobs
        if seed is not None:
            changes["seed"] = seed
            changes["selection"] = dataclasses.replace(self.selection, seed=seed)
            changes["training"] = dataclasses.replace(self.training, seed=seed)
        return dataclasses.replace(self, **changes) if changes else self

    def resolve(self, path: str) -> str:
        if not self.root or "://" in path or posixpath.isabs(path):
            return path
        return posixpath.join(self.root, path)

    def frame(self, frame_id: str) -> FrameRecord:
        for record in self.frames:
            if record.id == frame_id:
                return record
        raise ManifestError(f"no frame '{frame_id}' in manifest")

    def frame_ids(self, frames: Optional[slice] = None) -> List[str]:
        ids = [f.id for f in self.frames]
        return ids[frames] if frames is not None else ids

    def shape(self) -> Shape:
        return Shape(np.asarray(self.beta, dtype=np.float64))

    def load_template(self) -> SkinnedTemplate:
        template = load_template(self.resolve(self.template))
        if len(self.beta) not in (0, template.n_shape):
            raise ManifestError(
                f"beta has {len(self.beta)} values, the template {template.n_shape}"
            )
        return template

    def full_shape(self, template: SkinnedTemplate) -> Shape:
        return self.shape() if self.beta else template.zero_shape()

    def output_target(self) -> FSSpecTarget:
        return FSSpecTarget.from_url(self.resolve(self.output_dir))


def _digest(path: str) -> Optional[str]:
    try:
        return file_digest(path)
    except (FileNotFoundError, OSError):
        return None


def frame_hash(manifest: ProjectManifest, record: FrameRecord) -> str:
    """Hash of everything a frame's bake depends on: the bake-related config
    blocks, shape, frame record and the contents of the scan files, the
    template manifest and every data file the template references."""
    blocks: Dict[str, object] = {name: getattr(manifest, name) for name in BAKE_BLOCKS}
    template_path = manifest.resolve(manifest.template)
    files = {
        "template": _digest(template_path),
        "scan": _digest(manifest.resolve(record.scan)),
        "scan_texture": _digest(manifest.resolve(record.scan_texture)),
    }
    try:
        referenced = template_files(template_path)
    except (FileNotFoundError, FormatError, SkinningError):
        referenced = {}
    files.update({f"template_{role}": _digest(path) for role, path in referenced.items()})
    return config_hash(blocks, list(manifest.beta), record, files)


class ManifestError(Exception):
    """Base class for exceptions in this module."""

    pass
