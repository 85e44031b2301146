"""
Pose-conditioned two-headed decoder for texture and displacement maps.

The encoded pose goes through a one-hidden-layer MLP to a latent vector. The
latent scales the channels of a learned ``latent x fc x fc`` feature cuboid,
which two independent convolution stacks upsample to the output resolution:

    per stage: conv3x3 -> batch norm -> ReLU -> conv3x3 -> batch norm -> ReLU
               -> transposed conv 2x2 / stride 2 (channels halve, side doubles)
    then:      1x1 projection to 3 channels -> tanh

The texture head maps ``tanh`` to ``[0, 1]`` and the displacement head scales
it by ``displacement_max``. Gradients are derived by hand; all math is float64.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .formats import read_weights, write_weights
from .skinning import encode_pose

logger = logging.getLogger(__name__)

HEADS = ("texture", "displacement")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LOSS_EPS = 1e-8

# (fc, latent) configurations of the reference architecture-size table and
# their reported parameter counts
REFERENCE_SIZES = {
    (16, 512): 4_800_000,
    (16, 2048): 73_800_000,
    (32, 1024): 19_500_000,
    (64, 128): 877_000,
    (64, 512): 6_800_000,
    (128, 256): 5_400_000,
}
REFERENCE_RESOLUTION = 1024
REFERENCE_HIDDEN_SIZES = (128, 256, 512)


def reference_configs(hidden_size: int = 256) -> List[Tuple["DecoderConfig", int]]:
    """The reference architecture-size configurations at full output resolution."""
    return [
        (
            DecoderConfig(
                fc_size=fc,
                latent_size=latent,
                hidden_size=hidden_size,
                out_resolution=REFERENCE_RESOLUTION,
            ),
            count,
        )
        for (fc, latent), count in REFERENCE_SIZES.items()
    ]


@dataclass(frozen=True)
class DecoderConfig:
    """
    :param fc_size: Side of the feature cuboid.
    :param latent_size: Latent pose dimension, also the cuboid's channel count.
    :param hidden_size: Width of the MLP's hidden layer.
    :param out_resolution: Side of the produced maps, ``fc_size * 2**k`` with ``k >= 1``.
    :param displacement_max: Largest displacement magnitude per axis, meters.
    :param pose_size: Length of the encoded pose (``2 * 3 * 23`` for 23 joints).
    """

    fc_size: int = 32
    latent_size: int = 1024
    hidden_size: int = 256
    out_resolution: int = 64
    displacement_max: float = 0.05
    pose_size: int = 138

    def __post_init__(self):
        if min(self.fc_size, self.latent_size, self.hidden_size, self.pose_size) < 1:
            raise DecoderError("decoder sizes must be positive")
        ratio, rest = divmod(self.out_resolution, self.fc_size)
        if rest or ratio < 2 or ratio & (ratio - 1):
            raise DecoderError(
                f"out_resolution {self.out_resolution} is not fc_size {self.fc_size} "
                "times a power of two"
            )
        if self.latent_size >> self.n_stages < 1 or self.latent_size % (1 << self.n_stages):
            raise DecoderError(
                f"latent_size {self.latent_size} cannot be halved {self.n_stages} times"
            )
        if self.displacement_max <= 0:
            raise DecoderError("displacement_max must be positive")

    @property
    def n_stages(self) -> int:
        return (self.out_resolution // self.fc_size).bit_length() - 1

    def channels(self, stage: int) -> int:
        return self.latent_size >> stage


def parameter_shapes(cfg: DecoderConfig) -> List[Tuple[str, tuple]]:
    """Learned tensors in their fixed file order."""
    shapes = [
        ("mlp.hidden.weight", (cfg.hidden_size, cfg.pose_size)),
        ("mlp.hidden.bias", (cfg.hidden_size,)),
        ("mlp.latent.weight", (cfg.latent_size, cfg.hidden_size)),
        ("mlp.latent.bias", (cfg.latent_size,)),
        ("cuboid", (cfg.latent_size, cfg.fc_size, cfg.fc_size)),
    ]
    for head in HEADS:
        for s in range(cfg.n_stages):
            c = cfg.channels(s)
            pre = f"{head}.stage{s}"
            for j in (1, 2):
                shapes += [
                    (f"{pre}.conv{j}.weight", (c, c, 3, 3)),
                    (f"{pre}.bn{j}.gamma", (c,)),
                    (f"{pre}.bn{j}.beta", (c,)),
                ]
            shapes += [(f"{pre}.up.weight", (c, c // 2, 2, 2)), (f"{pre}.up.bias", (c // 2,))]
        shapes += [
            (f"{head}.final.weight", (3, cfg.channels(cfg.n_stages))),
            (f"{head}.final.bias", (3,)),
        ]
    return shapes


def buffer_shapes(cfg: DecoderConfig) -> List[Tuple[str, tuple]]:
    """Batch-norm running statistics, after the parameters in the file."""
    shapes = []
    for head in HEADS:
        for s in range(cfg.n_stages):
            for j in (1, 2):
                pre = f"{head}.stage{s}.bn{j}"
                shapes += [
                    (f"{pre}.running_mean", (cfg.channels(s),)),
                    (f"{pre}.running_var", (cfg.channels(s),)),
                ]
    return shapes


def param_report(cfg: DecoderConfig) -> Dict[str, int]:
    """Parameter count per block: ``mlp``, ``cuboid``, ``<head>.stage<s>`` and ``<head>.final``."""
    report: Dict[str, int] = {}
    for name, shape in parameter_shapes(cfg):
        block = "cuboid" if name == "cuboid" else ".".join(name.split(".")[:2])
        if block.startswith("mlp"):
            block = "mlp"
        report[block] = report.get(block, 0) + int(np.prod(shape))
    return report


def param_count(cfg: DecoderConfig) -> int:
    """Number of learned values; running statistics are not counted."""
    return sum(param_report(cfg).values())


@dataclass
class DecoderWeights:
    """Decoder parameters and batch-norm running statistics.

    :param config_hash: Hash of the inputs the weights were trained from; stored
      in the weight file header next to the configuration.
    """

    config: DecoderConfig
    params: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray]
    config_hash: str = ""

    def __post_init__(self):
        for names, store in ((parameter_shapes, self.params), (buffer_shapes, self.buffers)):
            for name, shape in names(self.config):
                if store.get(name) is None:
                    raise DecoderError(f"missing tensor {name!r}")
                if tuple(store[name].shape) != shape:
                    raise DecoderError(
                        f"tensor {name!r} has shape {store[name].shape}, expected {shape}"
                    )

    @classmethod
    def zeros(cls, cfg: DecoderConfig) -> "DecoderWeights":
        return cls(
            config=cfg,
            params={name: np.zeros(shape) for name, shape in parameter_shapes(cfg)},
            buffers={name: np.zeros(shape) for name, shape in buffer_shapes(cfg)},
        )

    @property
    def size(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def copy(self) -> "DecoderWeights":
        return DecoderWeights(
            config=self.config,
            params={k: v.copy() for k, v in self.params.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
            config_hash=self.config_hash,
        )

    def tensors(self) -> List[Tuple[str, np.ndarray]]:
        return [(name, self.params[name]) for name, _ in parameter_shapes(self.config)] + [
            (name, self.buffers[name]) for name, _ in buffer_shapes(self.config)
        ]

    def save(self, path_or_file):
        header = asdict(self.config)
        if self.config_hash:
            header["config_hash"] = self.config_hash
        write_weights(path_or_file, header, self.tensors())

    @classmethod
    def load(cls, path_or_file) -> "DecoderWeights":
        config, tensors = read_weights(path_or_file)
        config = dict(config)
        trained_from = str(config.pop("config_hash", ""))
        try:
            cfg = DecoderConfig(**config)
        except TypeError as e:
            raise DecoderError(f"invalid decoder configuration in weight file: {e}") from e
        as64 = {name: array.astype(np.float64) for name, array in tensors.items()}
        return cls(
            config=cfg,
            params={name: as64.get(name) for name, _ in parameter_shapes(cfg)},
            buffers={name: as64.get(name) for name, _ in buffer_shapes(cfg)},
            config_hash=trained_from,
        )


def init_weights(cfg: DecoderConfig, seed: int = 0) -> DecoderWeights:
    """He-normal convolutions and dense layers, unit batch-norm scales, zero biases."""
    rng = np.random.default_rng(seed)
    weights = DecoderWeights.zeros(cfg)
    for name, shape in parameter_shapes(cfg):
        kind = name.rsplit(".", 1)[-1]
        if kind == "gamma":
            weights.params[name][...] = 1.0
        elif name == "cuboid":
            weights.params[name][...] = rng.standard_normal(shape)
        elif kind == "weight":
            if name.endswith("up.weight"):
                fan_in = shape[0]
            else:
                fan_in = int(np.prod(shape[1:]))
            scale = np.sqrt(2.0 / fan_in)
            if name.endswith("final.weight") or name == "mlp.latent.weight":
                scale = np.sqrt(1.0 / fan_in)
            weights.params[name][...] = rng.standard_normal(shape) * scale
    for name, _ in buffer_shapes(cfg):
        if name.endswith("running_var"):
            weights.buffers[name][...] = 1.0
    return weights


# layers


def _conv3x3(x, w):
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(xp, (3, 3), axis=(2, 3))
    return np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)


def _conv3x3_backward(x, w, dy):
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(xp, (3, 3), axis=(2, 3))
    dw = np.tensordot(dy, windows, axes=([0, 2, 3], [0, 2, 3]))
    dyp = np.pad(dy, ((0, 0), (0, 0), (1, 1), (1, 1)))
    dwindows = sliding_window_view(dyp, (3, 3), axis=(2, 3))
    dx = np.tensordot(dwindows, w[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))
    return dx.transpose(0, 3, 1, 2), dw


def _upsample(x, w, b):
    n, _, h, width = x.shape
    y = np.einsum("nchw,coij->nohiwj", x, w, optimize=True)
    return y.reshape(n, w.shape[1], 2 * h, 2 * width) + b[None, :, None, None]


def _upsample_backward(x, w, dy):
    n, o, h2, w2 = dy.shape
    dy6 = dy.reshape(n, o, h2 // 2, 2, w2 // 2, 2)
    dx = np.einsum("nohiwj,coij->nchw", dy6, w, optimize=True)
    dw = np.einsum("nchw,nohiwj->coij", x, dy6, optimize=True)
    return dx, dw, dy.sum(axis=(0, 2, 3))


def _batch_norm(x, gamma, beta, mean, var):
    std = np.sqrt(var + BN_EPS)
    xhat = (x - mean[None, :, None, None]) / std[None, :, None, None]
    return gamma[None, :, None, None] * xhat + beta[None, :, None, None], xhat, std


def _batch_norm_backward(dy, xhat, std, gamma):
    axes = (0, 2, 3)
    dgamma = np.sum(dy * xhat, axis=axes)
    dbeta = np.sum(dy, axis=axes)
    dxhat = dy * gamma[None, :, None, None]
    dx = (
        dxhat
        - dxhat.mean(axis=axes, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=axes, keepdims=True)
    ) / std[None, :, None, None]
    return dx, dgamma, dbeta


class DecoderOutput(NamedTuple):
    texture: np.ndarray
    displacement: np.ndarray


class ForwardCache(NamedTuple):
    encoded: np.ndarray
    hidden_pre: np.ndarray
    hidden: np.ndarray
    latent: np.ndarray
    activations: dict
    batch_stats: Dict[str, Tuple[np.ndarray, np.ndarray, int]]
    tanh: Dict[str, np.ndarray]


def encode_poses(cfg: DecoderConfig, theta) -> np.ndarray:
    """Encode one pose ``(J, 3)`` or a batch ``(N, J, 3)`` into ``(N, pose_size)``."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim == 2:
        theta = theta[None]
    encoded = np.stack([encode_pose(t, None) for t in theta]) if len(theta) else np.zeros((0, 0))
    if encoded.ndim != 2 or encoded.shape[1] != cfg.pose_size:
        raise DecoderError(
            f"pose of shape {theta.shape[1:]} does not encode to {cfg.pose_size} values"
        )
    return encoded


def _forward(weights: DecoderWeights, encoded, training: bool):
    cfg, p = weights.config, weights.params
    hidden_pre = encoded @ p["mlp.hidden.weight"].T + p["mlp.hidden.bias"]
    hidden = np.maximum(hidden_pre, 0.0)
    latent = hidden @ p["mlp.latent.weight"].T + p["mlp.latent.bias"]
    x0 = p["cuboid"][None] * latent[:, :, None, None]

    activations, stats, tanhs, outputs = {}, {}, {}, {}
    for head in HEADS:
        x = x0
        for s in range(cfg.n_stages):
            pre = f"{head}.stage{s}"
            for j in (1, 2):
                name = f"{pre}.conv{j}"
                y = _conv3x3(x, p[f"{name}.weight"])
                bn = f"{pre}.bn{j}"
                if training:
                    mean, var = y.mean(axis=(0, 2, 3)), y.var(axis=(0, 2, 3))
                    stats[bn] = (mean, var, y.size // y.shape[1])
                else:
                    mean = weights.buffers[f"{bn}.running_mean"]
                    var = weights.buffers[f"{bn}.running_var"]
                z, xhat, std = _batch_norm(y, p[f"{bn}.gamma"], p[f"{bn}.beta"], mean, var)
                activations[name] = (x, xhat, std, z > 0)
                x = np.maximum(z, 0.0)
            activations[f"{pre}.up"] = x
            x = _upsample(x, p[f"{pre}.up.weight"], p[f"{pre}.up.bias"])
        activations[f"{head}.final"] = x
        a = np.einsum("nchw,oc->nohw", x, p[f"{head}.final.weight"], optimize=True)
        t = np.tanh(a + p[f"{head}.final.bias"][None, :, None, None])
        tanhs[head] = t
        outputs[head] = t.transpose(0, 2, 3, 1)

    result = DecoderOutput(
        texture=(outputs["texture"] + 1.0) / 2.0,
        displacement=outputs["displacement"] * cfg.displacement_max,
    )
    cache = ForwardCache(encoded, hidden_pre, hidden, latent, activations, stats, tanhs)
    return result, cache


def forward(weights: DecoderWeights, theta, training: bool = False) -> DecoderOutput:
    """Texture and displacement maps for one pose ``(J, 3)`` or a batch ``(N, J, 3)``.

    Maps are ``(H, W, 3)`` (``(N, H, W, 3)`` for a batch) with row 0 at the
    top. Inference uses the batch-norm running statistics; ``training=True``
    normalizes with the statistics of the batch.
    """
    single = np.ndim(theta) == 2
    out, _ = _forward(weights, encode_poses(weights.config, theta), training)
    if single:
        return DecoderOutput(out.texture[0], out.displacement[0])
    return out


class LossTargets(NamedTuple):
    """Targets and masks of a batch, grids shaped ``(N, H, W[, 3])``."""

    texture: np.ndarray
    displacement: np.ndarray
    confidence: np.ndarray
    displacement_weight: np.ndarray

    @classmethod
    def from_bundles(cls, bundles) -> "LossTargets":
        return cls(
            texture=np.stack([b.texture for b in bundles]),
            displacement=np.stack([b.displacement for b in bundles]),
            confidence=np.stack([b.confidence for b in bundles]),
            displacement_weight=np.stack([b.displacement_weight() for b in bundles]),
        )


def _as_targets(targets) -> LossTargets:
    if isinstance(targets, LossTargets):
        return LossTargets(*(np.asarray(t, dtype=np.float64) for t in targets))
    return LossTargets.from_bundles([targets])


def masked_loss(texture, displacement, targets, displacement_max: float = 0.05) -> float:
    """Confidence-masked texture error plus visibility-masked displacement error.

    ``sum(k * (c' - c)**2) / (3 sum(k) + eps) + sum(w * (d' - d)**2) / (3 sum(w) + eps)``
    with displacements in units of ``displacement_max``. ``targets`` is a
    :class:`LossTargets` or a single bundle at the output resolution.
    """
    t = _as_targets(targets)
    texture = np.asarray(texture, dtype=np.float64)
    displacement = np.asarray(displacement, dtype=np.float64)
    if texture.size != t.texture.size or displacement.size != t.displacement.size:
        raise DecoderError(
            f"prediction of shape {texture.shape} does not match targets {t.texture.shape}"
        )
    texture = texture.reshape(t.texture.shape)
    displacement = displacement.reshape(t.displacement.shape)
    kappa, w = t.confidence[..., None], t.displacement_weight[..., None]
    color = np.sum(kappa * (texture - t.texture) ** 2) / (3.0 * np.sum(t.confidence) + LOSS_EPS)
    dhat = (displacement - t.displacement) / displacement_max
    geometry = np.sum(w * dhat ** 2) / (3.0 * np.sum(t.displacement_weight) + LOSS_EPS)
    return float(color + geometry)


def backward(weights: DecoderWeights, cache: ForwardCache, targets: LossTargets):
    """Loss and gradients of every parameter for a training-mode forward pass.

    :raises NonFiniteGradientError: naming the first layer with a non-finite gradient.
    """
    cfg, p = weights.config, weights.params
    targets = _as_targets(targets)
    grads: Dict[str, np.ndarray] = {}

    def store(name, value):
        if not np.all(np.isfinite(value)):
            raise NonFiniteGradientError(f"non-finite gradient in {name}")
        grads[name] = value

    tex_t = cache.tanh["texture"].transpose(0, 2, 3, 1)
    disp_t = cache.tanh["displacement"].transpose(0, 2, 3, 1)
    kappa = targets.confidence[..., None]
    w = targets.displacement_weight[..., None]
    color_norm = 3.0 * np.sum(targets.confidence) + LOSS_EPS
    disp_norm = 3.0 * np.sum(targets.displacement_weight) + LOSS_EPS
    color_res = (tex_t + 1.0) / 2.0 - targets.texture
    disp_res = disp_t - targets.displacement / cfg.displacement_max
    loss = float(
        np.sum(kappa * color_res ** 2) / color_norm + np.sum(w * disp_res ** 2) / disp_norm
    )
    # d loss / d pre-activation of the final tanh, channels first
    upstream = {
        "texture": (2.0 * kappa * color_res / color_norm * 0.5 * (1.0 - tex_t ** 2)),
        "displacement": (2.0 * w * disp_res / disp_norm * (1.0 - disp_t ** 2)),
    }

    dx0 = np.zeros((cache.latent.shape[0],) + p["cuboid"].shape)
    for head in HEADS:
        da = upstream[head].transpose(0, 3, 1, 2)
        x = cache.activations[f"{head}.final"]
        store(f"{head}.final.bias", da.sum(axis=(0, 2, 3)))
        store(f"{head}.final.weight", np.einsum("nohw,nchw->oc", da, x, optimize=True))
        dx = np.einsum("nohw,oc->nchw", da, p[f"{head}.final.weight"], optimize=True)
        for s in reversed(range(cfg.n_stages)):
            pre = f"{head}.stage{s}"
            up_in = cache.activations[f"{pre}.up"]
            dx, dw, db = _upsample_backward(up_in, p[f"{pre}.up.weight"], dx)
            store(f"{pre}.up.weight", dw)
            store(f"{pre}.up.bias", db)
            for j in (2, 1):
                name = f"{pre}.conv{j}"
                x_in, xhat, std, active = cache.activations[name]
                bn = f"{pre}.bn{j}"
                dy, dgamma, dbeta = _batch_norm_backward(dx * active, xhat, std, p[f"{bn}.gamma"])
                store(f"{bn}.gamma", dgamma)
                store(f"{bn}.beta", dbeta)
                dx, dw = _conv3x3_backward(x_in, p[f"{name}.weight"], dy)
                store(f"{name}.weight", dw)
        dx0 += dx

    latent = cache.latent
    store("cuboid", np.einsum("nchw,nc->chw", dx0, latent))
    dlatent = np.einsum("nchw,chw->nc", dx0, p["cuboid"])
    store("mlp.latent.weight", dlatent.T @ cache.hidden)
    store("mlp.latent.bias", dlatent.sum(axis=0))
    dhidden = (dlatent @ p["mlp.latent.weight"]) * (cache.hidden_pre > 0)
    store("mlp.hidden.weight", dhidden.T @ cache.encoded)
    store("mlp.hidden.bias", dhidden.sum(axis=0))
    return loss, {name: grads[name] for name, _ in parameter_shapes(cfg)}


def loss_and_gradients(weights: DecoderWeights, theta, targets: LossTargets):
    """Training-mode forward and backward over a batch.

    :return: ``(loss, gradients, batch_stats)``; ``batch_stats`` maps each
      batch norm to its ``(mean, biased variance, count)``.
    """
    encoded = encode_poses(weights.config, theta)
    _, cache = _forward(weights, encoded, training=True)
    loss, grads = backward(weights, cache, targets)
    return loss, grads, cache.batch_stats


def update_running_stats(weights: DecoderWeights, batch_stats, momentum: float = BN_MOMENTUM):
    """Blend batch statistics into the running ones in place. Running variances
    are unbiased."""
    for bn, (mean, var, count) in batch_stats.items():
        correction = count / (count - 1) if count > 1 else 1.0
        rm, rv = weights.buffers[f"{bn}.running_mean"], weights.buffers[f"{bn}.running_var"]
        rm *= 1.0 - momentum
        rm += momentum * mean
        rv *= 1.0 - momentum
        rv += momentum * var * correction


def describe(cfg: DecoderConfig, reference: Optional[int] = None) -> str:
    lines = [f"{block:<24s}{count:>12,d}" for block, count in param_report(cfg).items()]
    total = param_count(cfg)
    lines.append(f"{'total':<24s}{total:>12,d}")
    if reference:
        lines.append(f"{'reference':<24s}{reference:>12,d}  (ratio {total / reference:.2f})")
    return "\n".join(lines)


class DecoderError(Exception):
    """Base class for exceptions in this module."""

    pass


class NonFiniteGradientError(DecoderError):
    pass
