"""Three-branch convolutional feature extractor.

A 3x128x64 image is cut into three overlapping 64x64 row windows (top,
middle, bottom). Each window runs through its own conv/pool stack; the
flattened branch outputs are concatenated, passed through a ReLU hidden
layer and a linear output layer, and finally scaled to unit L2 norm.

The same parameter set is applied to both images of a pair, so a Siamese
twin is nothing more than two calls with one ``ExtractorParams``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

BRANCH_NAMES = ("top", "middle", "bottom")
FEATURE_DIM = 64


class DegenerateFeatureError(FloatingPointError):
    """The pre-normalization feature vector was exactly zero."""


@dataclass(frozen=True)
class ConvSpec:
    filters: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class ExtractorConfig:
    input_shape: tuple[int, int, int] = (3, 128, 64)
    windows: tuple[tuple[int, int], ...] = ((0, 64), (32, 96), (64, 128))
    convs: tuple[ConvSpec, ...] = (ConvSpec(32, 5, 1), ConvSpec(32, 5, 1), ConvSpec(32, 3, 1))
    hidden: int = 500
    out_dim: int = FEATURE_DIM
    conv_relu: bool = True
    tied_branches: bool = False

    def __post_init__(self):
        self.validate()

    @classmethod
    def compact(cls, **overrides) -> "ExtractorConfig":
        """Small preset sized for single-core CPU training runs."""
        base = dict(
            convs=(ConvSpec(16, 4, 4), ConvSpec(32, 3, 1), ConvSpec(32, 3, 1)),
            hidden=128,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def patch_shape(self) -> tuple[int, int, int]:
        lo, hi = self.windows[0]
        return (self.input_shape[0], hi - lo, self.input_shape[2])

    def validate(self) -> None:
        c, h, w = self.input_shape
        if len(self.windows) != 3:
            raise ValueError("exactly three patch windows are required")
        covered = np.zeros(h, dtype=bool)
        for lo, hi in self.windows:
            if not (0 <= lo < hi <= h) or hi - lo != 64 or w != 64:
                raise ValueError(f"patch window [{lo}, {hi}) must be a 64x64 window inside {h}x{w}")
            covered[lo:hi] = True
        if not covered.all():
            raise ValueError("patch windows must cover every image row")
        if self.out_dim != FEATURE_DIM:
            raise ValueError(f"output dimension must be {FEATURE_DIM}, got {self.out_dim}")
        if len(self.convs) != 3:
            raise ValueError("each branch has exactly three conv layers")
        self.branch_output_shape()

    def branch_output_shape(self) -> tuple[int, int, int]:
        """Shape after conv-pool-conv-pool-conv, checked layer by layer."""
        c, h, w = self.patch_shape
        for i, spec in enumerate(self.convs):
            if spec.kernel > h or spec.kernel > w:
                raise DimensionError(f"conv{i + 1} kernel {spec.kernel} exceeds input {h}x{w}")
            h = T.conv_output_extent(h, spec.kernel, spec.stride)
            w = T.conv_output_extent(w, spec.kernel, spec.stride)
            c = spec.filters
            if i < 2:
                if h % 2 or w % 2:
                    raise DimensionError(f"pool{i + 1} input {h}x{w} is not even")
                h, w = h // 2, w // 2
        return (c, h, w)

    @property
    def branch_flat_size(self) -> int:
        return int(np.prod(self.branch_output_shape()))


@dataclass
class BranchParams:
    """Conv weights and biases of one branch, layer by layer."""

    weights: list[Tensor]
    biases: list[Tensor]


@dataclass
class ExtractorParams:
    config: ExtractorConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def branch(self, name: str) -> BranchParams:
        prefix = "shared" if self.config.tied_branches else name
        return BranchParams(
            weights=[self.tensors[f"{prefix}.conv{i}.w"] for i in (1, 2, 3)],
            biases=[self.tensors[f"{prefix}.conv{i}.b"] for i in (1, 2, 3)],
        )

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def copy(self) -> "ExtractorParams":
        return ExtractorParams(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.tensors.items()},
        )


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ExtractorConfig, seed: int = 0) -> ExtractorParams:
    """Glorot-uniform weights, zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    prefixes = ("shared",) if config.tied_branches else BRANCH_NAMES
    for prefix in prefixes:
        c = config.input_shape[0]
        for i, spec in enumerate(config.convs, start=1):
            k = spec.kernel
            shape = (spec.filters, c, k, k)
            tensors[f"{prefix}.conv{i}.w"] = _glorot(rng, shape, c * k * k, spec.filters * k * k)
            tensors[f"{prefix}.conv{i}.b"] = np.zeros(spec.filters)
            c = spec.filters
    flat = 3 * config.branch_flat_size
    tensors["fc_hidden.w"] = _glorot(rng, (flat, config.hidden), flat, config.hidden)
    tensors["fc_hidden.b"] = np.zeros(config.hidden)
    tensors["fc_out.w"] = _glorot(rng, (config.hidden, config.out_dim), config.hidden, config.out_dim)
    tensors["fc_out.b"] = np.zeros(config.out_dim)
    return ExtractorParams(
        config, {k: Tensor(v, requires_grad=True, name=k) for k, v in tensors.items()}
    )


def with_tied_branches(config: ExtractorConfig, tied: bool) -> ExtractorConfig:
    return replace(config, tied_branches=tied)


# ---------------------------------------------------------------------------


def _pixels(image) -> np.ndarray:
    arr = getattr(image, "pixels", image)
    if isinstance(arr, Tensor):
        arr = arr.data
    return np.asarray(arr, dtype=np.float64)


def _as_batch(images) -> Tensor:
    if isinstance(images, Tensor):
        return images if images.data.ndim == 4 else T.reshape(images, (1,) + images.shape)
    if isinstance(images, np.ndarray):
        arr = images.astype(np.float64, copy=False)
        return Tensor(arr if arr.ndim == 4 else arr[None])
    return Tensor(np.stack([_pixels(im) for im in images]))


def split_patches(image, config: ExtractorConfig | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Cut an image (or a batch) into its top, middle and bottom windows."""
    config = config or ExtractorConfig()
    x = image if isinstance(image, Tensor) else Tensor(_pixels(image))
    expected = config.input_shape
    if x.shape[-3:] != expected or x.data.ndim not in (3, 4):
        raise DimensionError(f"expected image shape {expected}, got {x.shape}")
    return tuple(T.rows(x, lo, hi, axis=-2) for lo, hi in config.windows)


def _branch_nhwc(h: Tensor, params: BranchParams, config: ExtractorConfig) -> Tensor:
    for i, (spec, w, b) in enumerate(zip(config.convs, params.weights, params.biases)):
        h = T.conv2d_nhwc(h, w, spec.stride, bias=b)
        if config.conv_relu:
            h = T.relu(h)
        if i < 2:
            h = T.maxpool2_nhwc(h)
    if h.data.ndim == 4:
        return T.reshape(h, (h.shape[0], -1))
    return T.reshape(h, (-1,))


def branch_forward(patch: Tensor, params: BranchParams, config: ExtractorConfig | None = None) -> Tensor:
    """conv-pool-conv-pool-conv on one ``C x 64 x 64`` patch (or a batch).

    The output is flattened in channels-last order.
    """
    config = config or ExtractorConfig()
    if patch.shape[-3:] != config.patch_shape:
        raise DimensionError(f"patch must be {config.patch_shape}, got {patch.shape}")
    return _branch_nhwc(T.to_channels_last(patch), params, config)


def _degenerate(rows: np.ndarray) -> DegenerateFeatureError:
    return DegenerateFeatureError(f"zero feature vector before normalization (rows {rows.tolist()})")


def branch_activations(images, params: ExtractorParams) -> list[Tensor]:
    """Per-branch flattened outputs for a batch, before concatenation."""
    cfg = params.config
    x = _as_batch(images)
    if x.shape[1:] != cfg.input_shape:
        raise DimensionError(f"expected images of shape {cfg.input_shape}, got {x.shape[1:]}")
    x = T.to_channels_last(x)
    patches = [T.rows(x, lo, hi, axis=1) for lo, hi in cfg.windows]
    if cfg.tied_branches:
        # one pass over all three windows with the shared stack
        n = x.shape[0]
        out = _branch_nhwc(T.concat(patches, axis=0), params.branch("shared"), cfg)
        return [T.take(out, np.arange(k * n, (k + 1) * n)) for k in range(3)]
    return [_branch_nhwc(p, params.branch(name), cfg) for p, name in zip(patches, BRANCH_NAMES)]


def embed_raw(images, params: ExtractorParams) -> Tensor:
    """Batch forward up to the linear output layer (no normalization)."""
    t = params.tensors
    h = T.concat(branch_activations(images, params), axis=1)
    h = T.relu(T.add(T.matmul(h, t["fc_hidden.w"]), t["fc_hidden.b"]))
    return T.add(T.matmul(h, t["fc_out.w"]), t["fc_out.b"])


def embed(images, params: ExtractorParams) -> Tensor:
    """Unit-norm ``N x 64`` features for a batch, recorded for backprop."""
    return T.l2_normalize(embed_raw(images, params), on_zero=_degenerate)


def extract(image, params: ExtractorParams) -> np.ndarray:
    """Unit-norm 64-d feature of a single image."""
    with T.no_grad():
        return embed(_as_batch(_pixels(image)), params).data[0].copy()


def extract_pair(i1, i2, params: ExtractorParams) -> tuple[np.ndarray, np.ndarray]:
    """Siamese application: both images through the same parameters."""
    return extract(i1, params), extract(i2, params)


def extract_many(images, params: ExtractorParams, batch_size: int = 64) -> np.ndarray:
    """Features for a list of images, computed in chunks without a graph."""
    arr = images if isinstance(images, np.ndarray) else np.stack([_pixels(im) for im in images])
    out = np.empty((arr.shape[0], params.config.out_dim))
    with T.no_grad():
        for lo in range(0, arr.shape[0], batch_size):
            out[lo:lo + batch_size] = embed(arr[lo:lo + batch_size], params).data
    return out
