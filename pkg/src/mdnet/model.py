"""Fully convolutional feature network.

A dilated-convolution backbone produces a raw feature volume; one branch
L2-normalizes it into dense per-pixel descriptors, the other squares it and
applies a 1x1 convolution plus logistic squash to emit one detection heatmap
per keypoint set.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"MDNW"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable or inconsistent weight checkpoint."""


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    channels: int
    dilation: int

    def __post_init__(self):
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError("kernel size must be odd")
        if self.channels < 1 or self.dilation < 1:
            raise ValueError("channels and dilation must be positive")

    @property
    def padding(self) -> int:
        return self.dilation * (self.kernel - 1) // 2


# Default backbone: eight same-padded 3x3 convolutions with growing dilation,
# ReLU between layers, last layer linear. 471,778 parameters with the default
# detector head, inside the half-million budget.
DEFAULT_BACKBONE: Tuple[ConvSpec, ...] = (
    ConvSpec(3, 32, 1),
    ConvSpec(3, 32, 1),
    ConvSpec(3, 64, 1),
    ConvSpec(3, 64, 2),
    ConvSpec(3, 64, 2),
    ConvSpec(3, 128, 4),
    ConvSpec(3, 128, 4),
    ConvSpec(3, 128, 4),
)

# Desk-scale backbone for CPU training runs; same shape of network, smaller.
DESK_BACKBONE: Tuple[ConvSpec, ...] = (
    ConvSpec(3, 16, 1),
    ConvSpec(3, 16, 1),
    ConvSpec(3, 32, 2),
    ConvSpec(3, 32, 2),
    ConvSpec(3, 48, 4),
)


@dataclass(frozen=True)
class ModelConfig:
    descriptor_dim: int = 128
    num_detectors: int = 2
    backbone: Tuple[ConvSpec, ...] = DEFAULT_BACKBONE
    # per-channel spatial normalization between layers; off by default, but
    # unsupervised training from scratch needs it to keep the descriptor
    # sphere from collapsing onto one direction
    normalization: str = "none"

    def __post_init__(self):
        if self.descriptor_dim < 2:
            raise ValueError("descriptor_dim must be >= 2")
        if self.num_detectors < 1:
            raise ValueError("num_detectors must be >= 1")
        if not self.backbone:
            raise ValueError("backbone must have at least one layer")
        if self.backbone[-1].channels != self.descriptor_dim:
            raise ValueError(
                f"last backbone layer emits {self.backbone[-1].channels} channels, "
                f"descriptor_dim is {self.descriptor_dim}")
        if self.normalization not in ("none", "instance"):
            raise ValueError(f"unknown normalization {self.normalization!r}")

    @property
    def min_input_size(self) -> int:
        """Receptive-field extent of the backbone: 1 + sum of d*(k-1)."""
        return 1 + sum(spec.dilation * (spec.kernel - 1) for spec in self.backbone)

    def with_detectors(self, n: int) -> "ModelConfig":
        return ModelConfig(self.descriptor_dim, n, self.backbone, self.normalization)


def desk_config(num_detectors: int = 2) -> ModelConfig:
    return ModelConfig(descriptor_dim=48, num_detectors=num_detectors,
                       backbone=DESK_BACKBONE, normalization="instance")


@dataclass
class ModelWeights:
    """Learnable parameters; conv tensors in layer order plus the detector head."""

    config: ModelConfig
    conv_weights: List[Tensor]
    conv_biases: List[Tensor]
    head_weight: Tensor
    head_bias: Tensor

    def parameters(self) -> List[Tensor]:
        params: List[Tensor] = []
        for w, b in zip(self.conv_weights, self.conv_biases):
            params.extend((w, b))
        params.extend((self.head_weight, self.head_bias))
        return params

    def parameter_names(self) -> List[str]:
        names: List[str] = []
        for i in range(len(self.conv_weights)):
            names.extend((f"conv{i}.weight", f"conv{i}.bias"))
        names.extend(("head.weight", "head.bias"))
        return names

    def backbone_parameters(self) -> List[Tensor]:
        params: List[Tensor] = []
        for w, b in zip(self.conv_weights, self.conv_biases):
            params.extend((w, b))
        return params

    def astype(self, dtype) -> "ModelWeights":
        def cast(t: Tensor) -> Tensor:
            return Tensor(t.data.astype(dtype), requires_grad=True)
        return ModelWeights(
            config=self.config,
            conv_weights=[cast(w) for w in self.conv_weights],
            conv_biases=[cast(b) for b in self.conv_biases],
            head_weight=cast(self.head_weight),
            head_bias=cast(self.head_bias),
        )

    def copy(self) -> "ModelWeights":
        return self.astype(self.conv_weights[0].data.dtype)


def init_weights(config: ModelConfig, seed: int = 0, dtype=np.float64,
                 head_weight_scale: float = 0.01) -> ModelWeights:
    """Kaiming-style init for the backbone; the detector head starts with tiny
    weights and zero bias so initial heatmaps sit near 0.5."""
    rng = np.random.default_rng(seed)
    conv_w, conv_b = [], []
    in_ch = 3
    for spec in config.backbone:
        fan_in = in_ch * spec.kernel * spec.kernel
        std = np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, size=(spec.channels, in_ch, spec.kernel, spec.kernel))
        conv_w.append(Tensor(w.astype(dtype), requires_grad=True))
        conv_b.append(Tensor(np.zeros(spec.channels, dtype=dtype), requires_grad=True))
        in_ch = spec.channels
    head_w = rng.normal(0.0, head_weight_scale,
                        size=(config.num_detectors, config.descriptor_dim, 1, 1))
    head = Tensor(head_w.astype(dtype), requires_grad=True)
    head_b = Tensor(np.zeros(config.num_detectors, dtype=dtype), requires_grad=True)
    return ModelWeights(config, conv_w, conv_b, head, head_b)


def reinit_detector_head(weights: ModelWeights, num_detectors: int, seed: int = 0,
                         head_weight_scale: float = 0.01) -> ModelWeights:
    """New detector head for a different set count; backbone tensors shared."""
    rng = np.random.default_rng(seed)
    config = weights.config.with_detectors(num_detectors)
    dtype = weights.head_weight.data.dtype
    head_w = rng.normal(0.0, head_weight_scale,
                        size=(num_detectors, config.descriptor_dim, 1, 1)).astype(dtype)
    return ModelWeights(
        config=config,
        conv_weights=weights.conv_weights,
        conv_biases=weights.conv_biases,
        head_weight=Tensor(head_w, requires_grad=True),
        head_bias=Tensor(np.zeros(num_detectors, dtype=dtype), requires_grad=True),
    )


class ForwardMaps(NamedTuple):
    features: Tensor     # raw backbone output, (C, H, W)
    descriptors: Tensor  # channelwise L2-normalized features, (C, H, W)
    heatmaps: Tensor     # per-set detection scores in (0, 1), (N, H, W)


def _forward_core(x: Tensor, weights: ModelWeights) -> ForwardMaps:
    config = weights.config
    h, w = x.data.shape[-2:]
    if min(h, w) < config.min_input_size:
        raise ValueError(
            f"input {h}x{w} smaller than receptive field minimum "
            f"{config.min_input_size}")
    last = len(config.backbone) - 1
    for i, spec in enumerate(config.backbone):
        x = T.conv2d(x, weights.conv_weights[i], weights.conv_biases[i],
                     dilation=spec.dilation, padding=spec.padding)
        if i != last:
            if config.normalization == "instance":
                x = T.instance_norm_channels(x)
            x = T.relu(x)
    features = x
    descriptors = T.l2_normalize_channels(features)
    heat_pre = T.conv2d(T.square(features), weights.head_weight, weights.head_bias,
                        dilation=1, padding=0)
    heatmaps = T.sigmoid(heat_pre)
    return ForwardMaps(features, descriptors, heatmaps)


def forward(image: Tensor, weights: ModelWeights) -> ForwardMaps:
    """Run the network on a (3, H, W) image with pixel values in [0, 1]."""
    if image.data.ndim != 3 or image.data.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {image.data.shape}")
    return _forward_core(image, weights)


def forward_batch(images: Tensor, weights: ModelWeights) -> ForwardMaps:
    """Run the network on a (B, 3, H, W) stack; one GEMM per layer serves the
    whole batch, which is what makes CPU training viable."""
    if images.data.ndim != 4 or images.data.shape[1] != 3:
        raise ValueError(f"expected (B, 3, H, W) images, got {images.data.shape}")
    return _forward_core(images, weights)


def count_parameters(weights: ModelWeights) -> int:
    return int(sum(p.data.size for p in weights.parameters()))


# ---------------------------------------------------------------------------
# checkpoint IO: magic, version, config block, raw little-endian parameters
# ---------------------------------------------------------------------------

_DTYPE_CODES = {4: np.float32, 8: np.float64}
_NORM_CODES = {"none": 0, "instance": 1}
_NORM_NAMES = {v: k for k, v in _NORM_CODES.items()}


def save_weights(weights: ModelWeights, path: Path) -> None:
    config = weights.config
    dtype = weights.conv_weights[0].data.dtype
    itemsize = dtype.itemsize
    header = bytearray()
    header += CHECKPOINT_MAGIC
    header += struct.pack("<I", CHECKPOINT_VERSION)
    header += struct.pack("<III", config.descriptor_dim, config.num_detectors,
                          len(config.backbone))
    for spec in config.backbone:
        header += struct.pack("<III", spec.kernel, spec.channels, spec.dilation)
    header += struct.pack("<I", _NORM_CODES[config.normalization])
    header += struct.pack("<I", itemsize)
    blob = bytearray(header)
    for p in weights.parameters():
        blob += np.ascontiguousarray(p.data, dtype=f"<f{itemsize}").tobytes()
    tmp = Path(path).with_suffix(Path(path).suffix + ".tmp")
    tmp.write_bytes(bytes(blob))
    tmp.replace(path)


def load_weights(path: Path) -> ModelWeights:
    raw = Path(path).read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = raw[off:off + n]
        off += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a weight checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    dim, n_det, n_layers = struct.unpack("<III", take(12))
    specs = []
    for _ in range(n_layers):
        k, c, d = struct.unpack("<III", take(12))
        specs.append(ConvSpec(k, c, d))
    (norm_code,) = struct.unpack("<I", take(4))
    if norm_code not in _NORM_NAMES:
        raise CheckpointError(f"{path}: unknown normalization code {norm_code}")
    (itemsize,) = struct.unpack("<I", take(4))
    if itemsize not in _DTYPE_CODES:
        raise CheckpointError(f"{path}: unknown scalar width {itemsize}")
    dtype = _DTYPE_CODES[itemsize]
    config = ModelConfig(descriptor_dim=dim, num_detectors=n_det,
                         backbone=tuple(specs),
                         normalization=_NORM_NAMES[norm_code])

    def read_array(shape) -> Tensor:
        count = int(np.prod(shape))
        data = np.frombuffer(take(count * itemsize), dtype=f"<f{itemsize}")
        return Tensor(data.astype(dtype).reshape(shape).copy(), requires_grad=True)

    conv_w, conv_b = [], []
    in_ch = 3
    for spec in specs:
        conv_w.append(read_array((spec.channels, in_ch, spec.kernel, spec.kernel)))
        conv_b.append(read_array((spec.channels,)))
        in_ch = spec.channels
    head_w = read_array((n_det, dim, 1, 1))
    head_b = read_array((n_det,))
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return ModelWeights(config, conv_w, conv_b, head_w, head_b)
