"""
Training of the decoder with Adam and exponential learning-rate decay.

A training set holds, per frame, the pose and the baked maps resampled to the
decoder's output resolution. It is kept as an xarray Dataset along a ``frame``
dimension so it can be stored in and reopened from Zarr.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import xarray as xr

from .baking import BakeBundle, resample_bundle
from .decoder import (
    DecoderConfig,
    DecoderWeights,
    LossTargets,
    forward,
    init_weights,
    loss_and_gradients,
    masked_loss,
    update_running_stats,
)
from .utils import chunked_iterable

logger = logging.getLogger(__name__)

TRAINING = "training"
VALIDATION = "validation"


@dataclass(frozen=True)
class TrainConfig:
    """
    :param lr: Initial learning rate.
    :param batch_size: Frames per Adam step.
    :param betas: Adam's moment decay rates.
    :param eps: Adam's denominator offset.
    :param lr_decay: Learning-rate factor applied after every epoch.
    :param epochs: Number of passes over the training frames.
    :param seed: Seed of the weight initialization and of the batch shuffling.
    :param divergence_factor: Training aborts when a batch loss exceeds this
      multiple of the first batch loss.
    :param max_steps: Optional cap on the number of Adam steps.
    """

    lr: float = 0.00131
    batch_size: int = 8
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    lr_decay: float = 0.99
    epochs: int = 200
    seed: int = 0
    divergence_factor: float = 10.0
    max_steps: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.eps <= 0:
            raise TrainingError("lr, batch_size, epochs and eps must be positive")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise TrainingError("Adam betas must lie in [0, 1)")
        if not 0 < self.lr_decay <= 1:
            raise TrainingError("lr_decay must lie in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** epoch


@dataclass(frozen=True)
class TrainingSet:
    frame_ids: List[str]
    theta: np.ndarray
    targets: LossTargets

    def __len__(self):
        return len(self.frame_ids)

    def subset(self, index) -> "TrainingSet":
        index = np.asarray(index, dtype=int)
        return TrainingSet(
            frame_ids=[self.frame_ids[i] for i in index],
            theta=self.theta[index],
            targets=LossTargets(*(t[index] for t in self.targets)),
        )


def training_set(bundles: Sequence[BakeBundle], resolution: int) -> TrainingSet:
    """Stack bundles resampled to ``resolution``."""
    if not bundles:
        raise TrainingError("a training set needs at least one frame")
    resampled = [resample_bundle(b, resolution) for b in bundles]
    return TrainingSet(
        frame_ids=[b.frame_id for b in resampled],
        theta=np.stack([b.theta for b in resampled]),
        targets=LossTargets.from_bundles(resampled),
    )


def to_dataset(data: TrainingSet, role: str = TRAINING) -> xr.Dataset:
    t = data.targets
    grid3 = ("frame", "y", "x", "channel")
    grid = ("frame", "y", "x")
    return xr.Dataset(
        {
            "theta": (("frame", "joint", "axis"), data.theta),
            "texture": (grid3, t.texture.astype(np.float32)),
            "displacement": (grid3, t.displacement.astype(np.float32)),
            "confidence": (grid, t.confidence.astype(np.float32)),
            "displacement_weight": (grid, t.displacement_weight.astype(np.float32)),
            "role": (("frame",), np.array([role] * len(data), dtype="U16")),
        },
        coords={"frame": np.array(data.frame_ids, dtype=str)},
    )


def from_dataset(ds: xr.Dataset, role: Optional[str] = None) -> TrainingSet:
    """The frames of ``ds`` with the given role (all frames for ``None``)."""
    if role is not None:
        ds = ds.isel(frame=np.flatnonzero(ds["role"].values.astype(str) == role))
    return TrainingSet(
        frame_ids=[str(f) for f in ds["frame"].values],
        theta=ds["theta"].values.astype(np.float64),
        targets=LossTargets(
            *(
                ds[name].values.astype(np.float64)
                for name in ("texture", "displacement", "confidence", "displacement_weight")
            )
        ),
    )


def open_training_set(mapper) -> Tuple[TrainingSet, TrainingSet]:
    """Training and validation frames of a stored training set."""
    ds = xr.open_zarr(mapper).load()
    return from_dataset(ds, TRAINING), from_dataset(ds, VALIDATION)


@dataclass
class Adam:
    """Adam with bias correction over a dict of float64 arrays, updated in place."""

    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float):
        beta1, beta2 = self.betas
        self.step_count += 1
        c1 = 1.0 - beta1 ** self.step_count
        c2 = 1.0 - beta2 ** self.step_count
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    weights: DecoderWeights
    history: pd.DataFrame


def evaluate(weights: DecoderWeights, data: TrainingSet) -> float:
    """Masked loss of the inference-mode prediction over all frames of ``data``."""
    out = forward(weights, data.theta)
    return masked_loss(
        out.texture, out.displacement, data.targets, weights.config.displacement_max
    )


def train(
    data: TrainingSet,
    decoder_config: DecoderConfig,
    config: TrainConfig = TrainConfig(),
    validation: Optional[TrainingSet] = None,
    weights: Optional[DecoderWeights] = None,
) -> TrainResult:
    """Fit the decoder to ``data``.

    Batches are drawn from a seeded permutation of the frames each epoch; the
    learning rate decays by ``lr_decay`` after every epoch. The history holds
    one row per epoch with the mean training loss of its batches and the
    validation loss of the inference-mode model.

    :raises DivergenceError: when a loss is not finite or exceeds
      ``divergence_factor`` times the first one.
    """
    if not len(data):
        raise TrainingError("a training set needs at least one frame")
    rng = np.random.default_rng(config.seed)
    weights = weights.copy() if weights is not None else init_weights(decoder_config, config.seed)
    adam = Adam(betas=config.betas, eps=config.eps)
    initial = None
    rows = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        total, count = 0.0, 0
        for batch in chunked_iterable(rng.permutation(len(data)), config.batch_size):
            part = data.subset(batch)
            loss, grads, stats = loss_and_gradients(weights, part.theta, part.targets)
            if initial is None:
                initial = loss
            if not np.isfinite(loss) or (
                initial > 0 and loss > config.divergence_factor * initial
            ):
                raise DivergenceError(
                    f"loss {loss:.6g} at step {adam.step_count + 1} diverged "
                    f"from the initial {initial:.6g}"
                )
            adam.step(weights.params, grads, lr)
            update_running_stats(weights, stats)
            total += loss * len(batch)
            count += len(batch)
            if config.max_steps is not None and adam.step_count >= config.max_steps:
                break
        row = {
            "epoch": epoch,
            "step": adam.step_count,
            "lr": lr,
            "train_loss": total / count,
            "validation_loss": evaluate(weights, validation)
            if validation is not None and len(validation)
            else np.nan,
        }
        rows.append(row)
        logger.info(
            f"Epoch {epoch}: train loss {row['train_loss']:.6g}, "
            f"validation loss {row['validation_loss']:.6g}, lr {lr:.6g}"
        )
        if config.max_steps is not None and adam.step_count >= config.max_steps:
            break
    return TrainResult(weights=weights, history=pd.DataFrame(rows))


def write_history(history: pd.DataFrame, path_or_file, config_hash: str = ""):
    """Write the loss curves as CSV; a ``config_hash`` column is added when given."""
    if config_hash:
        history = history.assign(config_hash=config_hash)
    history.to_csv(path_or_file, index=False)


class TrainingError(Exception):
    """Base class for exceptions in this module."""

    pass


class DivergenceError(TrainingError):
    pass
