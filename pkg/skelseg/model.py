"""
Encoder, decoders and patch bookkeeping of the segmentation model.

Every joint of every sequence is an independent C x T stream that runs through
one shared multi-stage temporal convolutional network (dilated residual layers,
dilation doubling per layer). The embedded sequence is cut into
non-overlapping temporal patches for quantization; a mirrored network maps
quantized features back to skeletons, and a small MLP predicts each patch's
relative timestamp.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    stages: int = 2
    layers_per_stage: int = 3
    hidden: int = 64
    latent: int = 32      # D, feature size per joint and frame
    kernel: int = 3
    dropout: float = 0.0

    def validate(self) -> "EncoderConfig":
        if self.stages < 1:
            raise ConfigError(f"encoder.stages must be >= 1, got {self.stages}", "encoder.stages")
        if self.layers_per_stage < 1:
            raise ConfigError(f"encoder.layers_per_stage must be >= 1, got {self.layers_per_stage}",
                              "encoder.layers_per_stage")
        if self.hidden < 1:
            raise ConfigError(f"encoder.hidden must be >= 1, got {self.hidden}", "encoder.hidden")
        if self.latent < 1:
            raise ConfigError(f"encoder.latent must be >= 1, got {self.latent}", "encoder.latent")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"encoder.kernel must be a positive odd number, got {self.kernel}", "encoder.kernel")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"encoder.dropout must be in [0, 1), got {self.dropout}", "encoder.dropout")
        return self


@dataclass
class TemporalDecoderConfig:
    hidden: List[int] = field(default_factory=lambda: [256, 64])

    def validate(self) -> "TemporalDecoderConfig":
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError(f"temporal_decoder.hidden must be non-empty positive sizes, got {self.hidden}",
                              "temporal_decoder.hidden")
        return self


class Module:
    """Parameter container with deterministic, dotted parameter names"""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._children: "OrderedDict[str, Module]" = OrderedDict()

    def add_parameter(self, name: str, data: np.ndarray) -> Tensor:
        tensor = ad.parameter(data, name=name)
        self._params[name] = tensor
        return tensor

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        named: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, tensor in self._params.items():
            named[prefix + name] = tensor
        for child_name, child in self._children.items():
            named.update(child.named_parameters(f"{prefix}{child_name}."))
        return named

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def _uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(dtype)


class DilatedResidualLayer(Module):
    """dilated conv -> relu -> 1x1 conv -> dropout, added back onto the input"""

    def __init__(self, dilation: int, channels: int, kernel: int, dropout: float,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.dilation = dilation
        self.dropout = dropout
        self.conv_dilated = self.add_parameter("conv_dilated.weight",
                                               _uniform(rng, (channels, channels, kernel), channels * kernel, dtype))
        self.conv_dilated_bias = self.add_parameter("conv_dilated.bias", np.zeros(channels, dtype=dtype))
        self.conv_1x1 = self.add_parameter("conv_1x1.weight", _uniform(rng, (channels, channels), channels, dtype))
        self.conv_1x1_bias = self.add_parameter("conv_1x1.bias", np.zeros(channels, dtype=dtype))

    def __call__(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        out = ad.relu(ad.conv1d_dilated(x, self.conv_dilated, self.conv_dilated_bias, self.dilation))
        out = ad.pointwise_conv(out, self.conv_1x1, self.conv_1x1_bias)
        out = ad.dropout(out, self.dropout, rng)
        return x + out


class SingleStage(Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, layers: int, kernel: int, dropout: float,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.in_proj = self.add_parameter("conv_in.weight", _uniform(rng, (hidden, in_dim), in_dim, dtype))
        self.in_bias = self.add_parameter("conv_in.bias", np.zeros(hidden, dtype=dtype))
        self.layers = [
            self.add_module(f"layer{i}", DilatedResidualLayer(2 ** i, hidden, kernel, dropout, rng, dtype))
            for i in range(layers)
        ]
        self.out_proj = self.add_parameter("conv_out.weight", _uniform(rng, (out_dim, hidden), hidden, dtype))
        self.out_bias = self.add_parameter("conv_out.bias", np.zeros(out_dim, dtype=dtype))

    def __call__(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        feature = ad.pointwise_conv(x, self.in_proj, self.in_bias)
        for layer in self.layers:
            feature = layer(feature, rng)
        return ad.pointwise_conv(feature, self.out_proj, self.out_bias)


class MultiStageTCN(Module):
    """
    Stages chained without intermediate activation; stage s maps widths[s] to
    widths[s + 1] channels. Input and output are [B x channels x T].
    """

    def __init__(self, widths: Sequence[int], config: EncoderConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.widths = list(widths)
        self.stages = [
            self.add_module(f"stage{s}", SingleStage(self.widths[s], config.hidden, self.widths[s + 1],
                                                     config.layers_per_stage, config.kernel, config.dropout,
                                                     rng, dtype))
            for s in range(len(self.widths) - 1)
        ]

    def __call__(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        for stage in self.stages:
            x = stage(x, rng)
        return x


class TemporalMLP(Module):
    def __init__(self, in_dim: int, config: TemporalDecoderConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        sizes = [in_dim] + list(config.hidden) + [1]
        self.weights = []
        self.biases = []
        for i in range(len(sizes) - 1):
            self.weights.append(self.add_parameter(f"fc{i}.weight",
                                                   _uniform(rng, (sizes[i + 1], sizes[i]), sizes[i], dtype)))
            self.biases.append(self.add_parameter(f"fc{i}.bias", np.zeros(sizes[i + 1], dtype=dtype)))

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = ad.linear(x, w, b)
            if i < last:
                x = ad.relu(x)
        return x


@dataclass
class PatchGrid:
    """
    Embedded sequence split into temporal patches.

    patches: [N x M x P x V x D]; pad_mask: [N x M x P], True on frames that
    replicate the last real frame to fill the final patch.
    """
    patches: Tensor
    lengths: List[int]
    pad_mask: np.ndarray
    patch_size: int

    @property
    def num_patches(self) -> int:
        return int(self.patches.shape[1])

    @property
    def patch_dim(self) -> int:
        _, _, p, v, d = self.patches.shape
        return p * v * d

    def flat(self) -> Tensor:
        """Patches as rows, [N*M x P*V*D]"""
        n, m = self.patches.shape[:2]
        return ad.reshape(self.patches, (n * m, self.patch_dim))

    def real_frames(self) -> np.ndarray:
        return ~self.pad_mask


def patchify(x: Tensor, patch_size: int) -> PatchGrid:
    """Split [N x T x V x D] into ceil(T / P) patches, padding by edge replication"""
    if patch_size < 1:
        raise ConfigError(f"patch size must be >= 1, got {patch_size}", "patch_size")
    if x.ndim != 4:
        raise ShapeError(f"patchify: expected [N x T x V x D], got {x.shape}")
    n, t, v, d = x.shape
    m = max(1, math.ceil(t / patch_size))
    frame = np.arange(m * patch_size)
    gathered = ad.take(x, np.minimum(frame, t - 1), axis=1)
    patches = ad.reshape(gathered, (n, m, patch_size, v, d))
    pad_mask = np.broadcast_to((frame >= t).reshape(m, patch_size), (n, m, patch_size)).copy()
    return PatchGrid(patches=patches, lengths=[t] * n, pad_mask=pad_mask, patch_size=patch_size)


def depatchify(grid: PatchGrid) -> Tensor:
    """Inverse of patchify on real frames: [N x M x P x V x D] -> [N x T x V x D]"""
    n, m, p, v, d = grid.patches.shape
    t = grid.lengths[0]
    if any(length != t for length in grid.lengths):
        raise ShapeError(f"depatchify: ragged lengths {grid.lengths} in one grid")
    frames = ad.reshape(grid.patches, (n, m * p, v, d))
    if t == m * p:
        return frames
    return ad.take(frames, np.arange(t), axis=1)


class SkeletonModel(Module):
    """
    Per-joint TCN encoder, mirrored spatial decoder and patch timestamp MLP.

    One weight set is shared by all joints and sequences, so nothing crosses
    joints inside the encoder or the spatial decoder.
    """

    def __init__(self, joint_dim: int, num_joints: int, patch_size: int,
                 encoder: Optional[EncoderConfig] = None, temporal: Optional[TemporalDecoderConfig] = None,
                 rng: Optional[np.random.Generator] = None, dtype=np.float64):
        super().__init__()
        self.joint_dim = joint_dim
        self.num_joints = num_joints
        self.patch_size = patch_size
        self.encoder_config = (encoder or EncoderConfig()).validate()
        self.temporal_config = (temporal or TemporalDecoderConfig()).validate()
        self.dtype = np.dtype(dtype)
        self.logger = logging.getLogger(__name__)
        rng = rng if rng is not None else np.random.default_rng(0)

        latent = self.encoder_config.latent
        stages = self.encoder_config.stages
        widths = [joint_dim] + [latent] * stages
        self.encoder = self.add_module("encoder", MultiStageTCN(widths, self.encoder_config, rng, dtype))
        self.spatial_decoder = self.add_module("spatial_decoder",
                                               MultiStageTCN(widths[::-1], self.encoder_config, rng, dtype))
        self.temporal_decoder = self.add_module("temporal_decoder",
                                                TemporalMLP(patch_size * num_joints * latent,
                                                            self.temporal_config, rng, dtype))
        count = sum(p.size for p in self.parameters())
        self.logger.debug(f"Built model with {count} parameters (C={joint_dim}, V={num_joints}, D={latent})")

    @property
    def latent_dim(self) -> int:
        return self.encoder_config.latent

    def encode(self, skeletons: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        """[N x C x T x V] -> X' [N x T x V x D]"""
        if skeletons.ndim != 4 or skeletons.shape[1] != self.joint_dim or skeletons.shape[3] != self.num_joints:
            raise ShapeError(f"encode: expected [N x {self.joint_dim} x T x {self.num_joints}], "
                             f"got {skeletons.shape}")
        n, c, t, v = skeletons.shape
        streams = ad.reshape(ad.transpose(skeletons, (0, 3, 1, 2)), (n * v, c, t))
        features = self.encoder(streams, rng)
        return ad.transpose(ad.reshape(features, (n, v, self.latent_dim, t)), (0, 3, 1, 2))

    def decode_spatial(self, quantized: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        """[N x T x V x D] -> reconstructed skeletons [N x C x T x V]"""
        if quantized.ndim != 4 or quantized.shape[2:] != (self.num_joints, self.latent_dim):
            raise ShapeError(f"decode_spatial: expected [N x T x {self.num_joints} x {self.latent_dim}], "
                             f"got {quantized.shape}")
        n, t, v, d = quantized.shape
        streams = ad.reshape(ad.transpose(quantized, (0, 2, 3, 1)), (n * v, d, t))
        out = self.spatial_decoder(streams, rng)
        return ad.transpose(ad.reshape(out, (n, v, self.joint_dim, t)), (0, 2, 3, 1))

    def decode_temporal(self, patches: Tensor) -> Tensor:
        """[N x M x P x V x D] -> predicted timestamps [N x M]"""
        if patches.ndim != 5:
            raise ShapeError(f"decode_temporal: expected [N x M x P x V x D], got {patches.shape}")
        n, m = patches.shape[:2]
        flat = ad.reshape(patches, (n * m, int(np.prod(patches.shape[2:]))))
        return ad.reshape(self.temporal_decoder(flat), (n, m))

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters().items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]):
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        unexpected = set(arrays) - set(params)
        if missing or unexpected:
            raise ShapeError(f"parameter names disagree: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise ShapeError(f"parameter {name}: stored shape {arrays[name].shape} != model shape {p.shape}")
            p.data = np.array(arrays[name], dtype=p.dtype, copy=True)
