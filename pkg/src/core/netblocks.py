"""
Parameterized differentiable layers: plain and neuromodulated fully-connected
layers, the sigmoid attenuators that modulate them, the convolutional image
encoder, and the CPNP parameter file format.
"""
import hashlib
import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.core.errors import DatasetIOError, ensure

logger = logging.getLogger(__name__)

PARAM_MAGIC = b"CPNP"
PARAM_VERSION = 1

ParamBundle = Dict[str, torch.Tensor]


class LinearLayer(nn.Linear):
    """y = W x + b with W of shape [out x in]"""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        ensure(x.shape[-1] == self.in_features,
               f"linear layer expects width {self.in_features}, got {x.shape[-1]}")
        return F.linear(x, self.weight, self.bias)


class Attenuator(nn.Module):
    """Two-layer network (ReLU hidden, sigmoid output) producing values in (0, 1)
    shaped like the tensor it attenuates."""

    def __init__(self, in_features: int, out_shape: Sequence[int], hidden: int = 16):
        super().__init__()
        self.in_features = in_features
        self.out_shape = tuple(out_shape)
        self.hidden = nn.Linear(in_features, hidden)
        self.output = nn.Linear(hidden, int(np.prod(self.out_shape)))
        self.pinned: Optional[float] = None

    def pin(self, value: float) -> None:
        """Test hook: force every output element to value"""
        self.pinned = float(value)

    def unpin(self) -> None:
        self.pinned = None

    def forward(self, m: torch.Tensor) -> torch.Tensor:
        ensure(m.shape[-1] == self.in_features,
               f"attenuator expects width {self.in_features}, got {m.shape[-1]}")
        batch_shape = m.shape[:-1]
        if self.pinned is not None:
            return torch.full(batch_shape + self.out_shape, self.pinned, dtype=m.dtype, device=m.device)
        out = torch.sigmoid(self.output(F.relu(self.hidden(m))))
        return out.reshape(batch_shape + self.out_shape)


class NeuromodLinearLayer(nn.Module):
    """y = (u_beta(m) * W) x + (v_gamma(m) * b); m defaults to the layer input x"""

    def __init__(self, in_features: int, out_features: int, attenuator_hidden: int = 16,
                 modulation_features: Optional[int] = None):
        super().__init__()
        modulation_features = modulation_features or in_features
        self.base = LinearLayer(in_features, out_features)
        self.weight_attenuator = Attenuator(modulation_features, (out_features, in_features), attenuator_hidden)
        self.bias_attenuator = Attenuator(modulation_features, (out_features,), attenuator_hidden)

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def pin(self, value: float) -> None:
        self.weight_attenuator.pin(value)
        self.bias_attenuator.pin(value)

    def unpin(self) -> None:
        self.weight_attenuator.unpin()
        self.bias_attenuator.unpin()

    def forward(self, x: torch.Tensor, m: Optional[torch.Tensor] = None) -> torch.Tensor:
        ensure(x.shape[-1] == self.in_features,
               f"neuromodulated layer expects width {self.in_features}, got {x.shape[-1]}")
        m = x if m is None else m
        weight = self.weight_attenuator(m) * self.base.weight
        bias = self.bias_attenuator(m) * self.base.bias
        return torch.matmul(weight, x.unsqueeze(-1)).squeeze(-1) + bias


def linear_forward(layer: LinearLayer, x: torch.Tensor) -> torch.Tensor:
    return layer(x)


def neuromod_linear_forward(layer: NeuromodLinearLayer, x: torch.Tensor, m: Optional[torch.Tensor] = None) -> torch.Tensor:
    return layer(x, m)


def attenuator_forward(att: Attenuator, m: torch.Tensor) -> torch.Tensor:
    return att(m)


def make_linear(in_features: int, out_features: int, neuromodulated: bool = False,
                attenuator_hidden: int = 16) -> nn.Module:
    if neuromodulated:
        return NeuromodLinearLayer(in_features, out_features, attenuator_hidden)
    return LinearLayer(in_features, out_features)


@dataclass
class ConvEncoderSpec:
    channels: Tuple[int, ...] = (16, 32, 32, 32)
    kernel_sizes: Tuple[int, ...] = (3, 3, 3, 3)
    strides: Tuple[int, ...] = (2, 2, 2, 2)
    latent_dim: int = 128
    image_size: Tuple[int, int, int] = (84, 84, 3)

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.kernel_sizes = tuple(self.kernel_sizes)
        self.strides = tuple(self.strides)
        self.image_size = tuple(self.image_size)
        ensure(len(self.channels) == len(self.kernel_sizes) == len(self.strides),
               "encoder spec needs one kernel size and stride per layer")
        ensure(self.latent_dim >= 1, "latent width must be positive")
        sizes = self.spatial_sizes()
        ensure(all(b < a for a, b in zip(sizes, sizes[1:])) and sizes[-1] >= 1,
               f"encoder spatial sizes must shrink monotonically, got {sizes}")

    @classmethod
    def from_settings(cls, settings, latent_dim: Optional[int] = None) -> "ConvEncoderSpec":
        channels = tuple(settings.get('model.encoder.channels'))
        kernel = settings.get('model.encoder.kernel_size', 3)
        stride = settings.get('model.encoder.stride', 2)
        return cls(channels=channels,
                   kernel_sizes=(kernel,) * len(channels),
                   strides=(stride,) * len(channels),
                   latent_dim=latent_dim or settings.LATENT_DIM,
                   image_size=settings.IMAGE_SIZE)

    def spatial_sizes(self) -> Tuple[int, ...]:
        size = self.image_size[0]
        sizes = [size]
        for kernel, stride in zip(self.kernel_sizes, self.strides):
            size = (size - kernel) // stride + 1
            sizes.append(size)
        return tuple(sizes)

    @property
    def flat_width(self) -> int:
        return self.channels[-1] * self.spatial_sizes()[-1] ** 2


class ConvEncoder(nn.Module):
    """f_phi: image [H x W x 3] in [0, 1] -> latent [d]"""

    def __init__(self, spec: ConvEncoderSpec):
        super().__init__()
        self.spec = spec
        layers = []
        in_channels = spec.image_size[2]
        for out_channels, kernel, stride in zip(spec.channels, spec.kernel_sizes, spec.strides):
            layers.append(nn.Conv2d(in_channels, out_channels, kernel_size=kernel, stride=stride))
            layers.append(nn.ReLU())
            in_channels = out_channels
        self.conv = nn.Sequential(*layers)
        self.project = nn.Linear(spec.flat_width, spec.latent_dim)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        ensure(tuple(image.shape[-3:]) == self.spec.image_size,
               f"encoder expects images of shape {self.spec.image_size}, got {tuple(image.shape[-3:])}")
        batch_shape = image.shape[:-3]
        x = image.reshape((-1,) + self.spec.image_size).permute(0, 3, 1, 2)
        latent = self.project(self.conv(x).flatten(start_dim=1))
        return latent.reshape(batch_shape + (self.spec.latent_dim,))


def conv_encode(encoder: ConvEncoder, image: torch.Tensor) -> torch.Tensor:
    return encoder(image)


def init_parameters(module: nn.Module, generator: torch.Generator, attenuator_scale: float = 1e-3) -> None:
    """Fan-in uniform initialization drawn from an explicit generator.

    Attenuator output layers start near zero so the initial attenuation is
    about 0.5 everywhere.
    """
    attenuator_outputs = {id(sub.output) for sub in module.modules() if isinstance(sub, Attenuator)}
    with torch.no_grad():
        for sub in module.modules():
            if not isinstance(sub, (nn.Linear, nn.Conv2d)):
                continue
            fan_in = sub.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            if id(sub) in attenuator_outputs:
                sub.weight.uniform_(-attenuator_scale, attenuator_scale, generator=generator)
                sub.bias.zero_()
                continue
            sub.weight.uniform_(-bound, bound, generator=generator)
            if sub.bias is not None:
                sub.bias.uniform_(-bound, bound, generator=generator)


def param_groups(model: nn.Module) -> Dict[str, ParamBundle]:
    """Partition named parameters into phi (encoder), beta/gamma (attenuators), theta (rest)"""
    groups = {"phi": OrderedDict(), "theta": OrderedDict(), "beta": OrderedDict(), "gamma": OrderedDict()}
    for name, param in model.named_parameters():
        if "weight_attenuator" in name:
            groups["beta"][name] = param
        elif "bias_attenuator" in name:
            groups["gamma"][name] = param
        elif name.startswith("encoder."):
            groups["phi"][name] = param
        else:
            groups["theta"][name] = param
    return groups


def parameter_bundle(model: nn.Module) -> ParamBundle:
    return OrderedDict((name, param.detach()) for name, param in model.named_parameters())


def encode_parameters(bundle: Mapping[str, torch.Tensor]) -> bytes:
    """Serialize a bundle: magic, u32 version, u32 manifest length, JSON manifest, LE f32 payload"""
    manifest = OrderedDict()
    payload = []
    offset = 0
    for name, tensor in bundle.items():
        values = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
        manifest[name] = {"shape": list(values.shape), "offset": offset}
        payload.append(values.tobytes())
        offset += values.size
    manifest_bytes = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    header = PARAM_MAGIC + struct.pack("<II", PARAM_VERSION, len(manifest_bytes))
    return header + manifest_bytes + b"".join(payload)


def decode_parameters(data: bytes) -> ParamBundle:
    if len(data) < 12 or data[:4] != PARAM_MAGIC:
        raise DatasetIOError("not a CPNP parameter file (bad magic)")
    version, manifest_length = struct.unpack("<II", data[4:12])
    if version != PARAM_VERSION:
        raise DatasetIOError(f"unsupported CPNP version {version}")
    try:
        manifest = json.loads(data[12:12 + manifest_length].decode("utf-8"), object_pairs_hook=OrderedDict)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetIOError(f"corrupt CPNP manifest: {e}")
    values = np.frombuffer(data[12 + manifest_length:], dtype="<f4")
    bundle = OrderedDict()
    for name, entry in manifest.items():
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        chunk = values[entry["offset"]:entry["offset"] + count]
        if chunk.size != count:
            raise DatasetIOError(f"CPNP payload truncated at {name}")
        bundle[name] = torch.from_numpy(chunk.astype(np.float32).reshape(entry["shape"]))
    return bundle


def save_parameters(bundle: Mapping[str, torch.Tensor], path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_parameters(bundle))
    except OSError as e:
        raise DatasetIOError(f"cannot write parameters to {path}: {e}")
    logger.debug(f"Saved {len(bundle)} parameter tensors to {path}")
    return path


def load_parameters(path: Union[str, Path]) -> ParamBundle:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise DatasetIOError(f"cannot read parameters from {path}: {e}")
    return decode_parameters(data)


def bundle_checksum(bundle: Mapping[str, torch.Tensor]) -> str:
    return hashlib.sha256(encode_parameters(bundle)).hexdigest()


def model_checksum(model: nn.Module) -> str:
    """Bit-exact checksum of the live parameters at their own precision"""
    digest = hashlib.sha256()
    for name, param in model.named_parameters():
        digest.update(name.encode("utf-8"))
        digest.update(param.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def assign_parameters(model: nn.Module, bundle: Mapping[str, torch.Tensor]) -> None:
    """Copy a bundle into the model's parameters, casting to their dtype"""
    params = dict(model.named_parameters())
    missing = set(params) - set(bundle)
    ensure(not missing, f"parameter bundle is missing {sorted(missing)}")
    with torch.no_grad():
        for name, param in params.items():
            ensure(tuple(bundle[name].shape) == tuple(param.shape), f"shape mismatch for {name}")
            param.copy_(bundle[name].to(param.dtype))
