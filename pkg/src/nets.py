# Copyright (c) 2026 Mark Ferrell. MIT License.
"""Network definitions and checkpoint persistence.

A ``Backbone`` is an MLP feature extractor (ReLU between layers, linear last
layer). A ``Head`` is a per-domain linear classifier and an ``Adapter`` a
bias-free ``d×d`` map. ``DomainNet`` pairs one backbone with one head (the
single-domain teachers); ``MultiDomainModel`` shares one backbone across
per-domain heads and adapters.

Checkpoint layout (little-endian)::

    b"URLD" | u32 version | u32 count
    count × (u32 name_len | name utf-8 | u32 rank | rank × u32 dims)
    float64 payloads in manifest order
"""

from __future__ import annotations

import logging
import struct
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import ArrayLike

from src.errors import (
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    DimensionError,
)
from src.tensor import FloatArray, Tensor, add_bias, as_tensor, matmul, relu

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"URLD"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    """Backbone widths: ``input_dim → hidden... → feature_dim``."""

    input_dim: int = 16
    hidden: tuple[int, ...] = (64, 64)
    feature_dim: int = 32

    def __post_init__(self) -> None:
        if min((self.input_dim, self.feature_dim, *self.hidden)) <= 0:
            raise ValueError(f"Layer widths must be positive, got {self.widths}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.feature_dim)


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> FloatArray:
    """Uniform init in ``±sqrt(6 / (fan_in + fan_out))``."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def validate_domain_name(name: str) -> str:
    """Domain names key checkpoint tensors, so they must be non-empty and dot-free."""
    if not name or "." in name or "/" in name:
        raise ValueError(f"Invalid domain name '{name}'")
    return name


@dataclass
class Linear:
    weight: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return add_bias(matmul(x, self.weight), self.bias)


def _param(data: ArrayLike, requires_grad: bool) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


class Backbone:
    """MLP feature extractor ``f_φ``."""

    def __init__(self, layers: list[Linear]) -> None:
        if not layers:
            raise ValueError("Backbone needs at least one layer")
        for prev, nxt in zip(layers, layers[1:], strict=False):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise DimensionError(f"Layer widths do not chain: {prev.weight.shape} -> {nxt.weight.shape}")
        self.layers = layers

    @classmethod
    def init(cls, config: NetConfig, rng: np.random.Generator, requires_grad: bool = True) -> Backbone:
        widths = config.widths
        layers = [
            Linear(
                weight=_param(glorot_uniform(fan_in, fan_out, rng), requires_grad),
                bias=_param(np.zeros(fan_out), requires_grad),
            )
            for fan_in, fan_out in zip(widths, widths[1:], strict=False)
        ]
        return cls(layers)

    @classmethod
    def from_arrays(cls, arrays: Iterable[tuple[ArrayLike, ArrayLike]], requires_grad: bool = True) -> Backbone:
        return cls([Linear(_param(w, requires_grad), _param(b, requires_grad)) for w, b in arrays])

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.layers[0].weight.shape[0], *(layer.weight.shape[1] for layer in self.layers))

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.layers for t in (layer.weight, layer.bias)]

    def named_parameters(self, prefix: str = "backbone") -> list[tuple[str, Tensor]]:
        named: list[tuple[str, Tensor]] = []
        for i, layer in enumerate(self.layers):
            named.append((f"{prefix}.{i}.weight", layer.weight))
            named.append((f"{prefix}.{i}.bias", layer.bias))
        return named

    def copy(self, requires_grad: bool | None = None) -> Backbone:
        return Backbone.from_arrays(
            ((layer.weight.data, layer.bias.data) for layer in self.layers),
            requires_grad=self.layers[0].weight.requires_grad if requires_grad is None else requires_grad,
        )

    def __call__(self, batch: Tensor | ArrayLike) -> Tensor:
        return forward_features(self, batch)


def forward_features(model: Backbone, batch: Tensor | ArrayLike) -> Tensor:
    """Compute ``f_φ(x)`` for a batch ``[n×p]``.

    Raises:
        DimensionError: If the batch width differs from the input width.
    """
    x = as_tensor(batch)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise DimensionError(f"Backbone expects [n×{model.input_dim}] input, got {x.shape}")
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        x = layer(x)
        if i < last:
            x = relu(x)
    return x


class Head:
    """Per-domain linear classifier ``h_ψ``."""

    def __init__(self, weight: Tensor, bias: Tensor) -> None:
        if weight.ndim != 2 or bias.shape != (weight.shape[1],):
            raise DimensionError(f"Head shapes disagree: {weight.shape}, {bias.shape}")
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, feature_dim: int, num_classes: int, rng: np.random.Generator, requires_grad: bool = True) -> Head:
        return cls(
            _param(glorot_uniform(feature_dim, num_classes, rng), requires_grad),
            _param(np.zeros(num_classes), requires_grad),
        )

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def copy(self, requires_grad: bool) -> Head:
        return Head(_param(self.weight.data, requires_grad), _param(self.bias.data, requires_grad))

    def __call__(self, feats: Tensor) -> Tensor:
        return add_bias(matmul(feats, self.weight), self.bias)


class Adapter:
    """Bias-free linear map ``A_θ ∈ R^{d×d}``."""

    def __init__(self, matrix: Tensor) -> None:
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise DimensionError(f"Adapter matrix must be square, got {matrix.shape}")
        self.matrix = matrix

    @classmethod
    def identity(cls, dim: int, requires_grad: bool = True) -> Adapter:
        return cls(_param(np.eye(dim), requires_grad))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.matrix]

    def __call__(self, feats: Tensor) -> Tensor:
        return apply_adapter(self, feats)


def apply_adapter(adapter: Adapter, feats: Tensor | ArrayLike) -> Tensor:
    """Map features through the adapter: ``feats × matrix``.

    Raises:
        DimensionError: If the feature width differs from the adapter size.
    """
    x = as_tensor(feats)
    if x.ndim != 2 or x.shape[1] != adapter.dim:
        raise DimensionError(f"Adapter of size {adapter.dim} cannot map features of shape {x.shape}")
    return matmul(x, adapter.matrix)


@dataclass
class DomainNet:
    """Single-domain network ``h_ψ ∘ f_φ``, used for stage-1 teachers."""

    domain: str
    backbone: Backbone
    head: Head

    def __post_init__(self) -> None:
        validate_domain_name(self.domain)
        if self.head.weight.shape[0] != self.backbone.feature_dim:
            raise DimensionError(
                f"Head input {self.head.weight.shape[0]} != backbone output {self.backbone.feature_dim}"
            )

    def parameters(self) -> list[Tensor]:
        return self.backbone.parameters() + self.head.parameters()

    def logits(self, batch: Tensor | ArrayLike) -> Tensor:
        return self.head(self.backbone(batch))

    def frozen(self) -> DomainNet:
        return DomainNet(self.domain, self.backbone.copy(requires_grad=False), self.head.copy(requires_grad=False))


@dataclass
class MultiDomainModel:
    """Shared backbone ``φ`` with per-domain heads ``ψ_τ`` and adapters ``θ_τ``."""

    backbone: Backbone
    heads: dict[str, Head]
    adapters: dict[str, Adapter]

    def __post_init__(self) -> None:
        if set(self.heads) != set(self.adapters):
            raise ValueError(f"Heads {sorted(self.heads)} and adapters {sorted(self.adapters)} disagree")
        for name in self.heads:
            validate_domain_name(name)

    @classmethod
    def init(
        cls,
        config: NetConfig,
        num_classes: Mapping[str, int],
        backbone_rng: np.random.Generator,
        head_rngs: Mapping[str, np.random.Generator],
    ) -> MultiDomainModel:
        d = config.feature_dim
        return cls(
            backbone=Backbone.init(config, backbone_rng),
            heads={name: Head.init(d, count, head_rngs[name]) for name, count in num_classes.items()},
            adapters={name: Adapter.identity(d) for name in num_classes},
        )

    @property
    def domains(self) -> list[str]:
        return list(self.heads)

    def parameters(self, include_adapters: bool = True) -> list[Tensor]:
        params = self.backbone.parameters()
        for name in self.heads:
            params += self.heads[name].parameters()
            if include_adapters:
                params += self.adapters[name].parameters()
        return params


class TeacherBank:
    """Frozen per-domain teachers ``(φ*_τ, ψ*_τ)``."""

    def __init__(self, teachers: Mapping[str, DomainNet]) -> None:
        self.teachers = {name: net.frozen() for name, net in teachers.items()}
        for name, net in self.teachers.items():
            if net.domain != name:
                raise ValueError(f"Teacher for '{net.domain}' registered under '{name}'")

    def __getitem__(self, domain: str) -> DomainNet:
        return self.teachers[domain]

    def __contains__(self, domain: object) -> bool:
        return domain in self.teachers

    @property
    def domains(self) -> list[str]:
        return list(self.teachers)

    def parameters(self) -> list[Tensor]:
        return [t for net in self.teachers.values() for t in net.parameters()]


Model = DomainNet | MultiDomainModel


def state_dict(model: Model) -> dict[str, FloatArray]:
    """Name every parameter of a model, in a stable order."""
    state = {name: t.data for name, t in model.backbone.named_parameters()}
    if isinstance(model, DomainNet):
        state[f"head.{model.domain}.weight"] = model.head.weight.data
        state[f"head.{model.domain}.bias"] = model.head.bias.data
        return state
    for name in model.heads:
        state[f"heads.{name}.weight"] = model.heads[name].weight.data
        state[f"heads.{name}.bias"] = model.heads[name].bias.data
        state[f"adapters.{name}.matrix"] = model.adapters[name].matrix.data
    return state


def model_from_state(state: Mapping[str, FloatArray]) -> Model:
    """Rebuild a ``DomainNet`` or ``MultiDomainModel`` from named tensors.

    Raises:
        CheckpointFormatError: If the names do not describe a known model.
    """
    layers: dict[int, dict[str, FloatArray]] = {}
    heads: dict[str, dict[str, FloatArray]] = {}
    adapters: dict[str, FloatArray] = {}
    single: dict[str, dict[str, FloatArray]] = {}
    for name, arr in state.items():
        parts = name.split(".")
        if len(parts) != 3:
            raise CheckpointFormatError(f"Unexpected tensor name '{name}'")
        group, key, leaf = parts
        if group == "backbone" and key.isdigit() and leaf in ("weight", "bias"):
            layers.setdefault(int(key), {})[leaf] = arr
        elif group == "heads" and leaf in ("weight", "bias"):
            heads.setdefault(key, {})[leaf] = arr
        elif group == "head" and leaf in ("weight", "bias"):
            single.setdefault(key, {})[leaf] = arr
        elif group == "adapters" and leaf == "matrix":
            adapters[key] = arr
        else:
            raise CheckpointFormatError(f"Unexpected tensor name '{name}'")

    if sorted(layers) != list(range(len(layers))) or not layers:
        raise CheckpointFormatError("Backbone layers are missing or not contiguous")
    try:
        backbone = Backbone.from_arrays((layers[i]["weight"], layers[i]["bias"]) for i in range(len(layers)))
        if single and not heads and not adapters and len(single) == 1:
            domain, arrays = next(iter(single.items()))
            return DomainNet(domain, backbone, Head(_param(arrays["weight"], True), _param(arrays["bias"], True)))
        if heads and not single:
            return MultiDomainModel(
                backbone=backbone,
                heads={k: Head(_param(v["weight"], True), _param(v["bias"], True)) for k, v in heads.items()},
                adapters={k: Adapter(_param(v, True)) for k, v in adapters.items()},
            )
    except (KeyError, ValueError) as e:
        raise CheckpointFormatError(f"Inconsistent checkpoint tensors: {e}") from e
    raise CheckpointFormatError("Checkpoint holds neither a single-domain nor a multi-domain model")


def encode_checkpoint(state: Mapping[str, FloatArray]) -> bytes:
    header = [struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(state))]
    payload = []
    for name, arr in state.items():
        encoded = name.encode("utf-8")
        header.append(struct.pack(f"<I{len(encoded)}sI", len(encoded), encoded, arr.ndim))
        header.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(header + payload)


class _Reader:
    def __init__(self, blob: bytes) -> None:
        self.blob = blob
        self.offset = 0

    def unpack(self, fmt: str) -> tuple[Any, ...]:
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.blob):
            raise CheckpointFormatError(f"Checkpoint header ends early at byte {self.offset}")
        values = struct.unpack_from(fmt, self.blob, self.offset)
        self.offset += size
        return values


def decode_checkpoint(blob: bytes) -> dict[str, FloatArray]:
    """Parse checkpoint bytes into named arrays.

    Raises:
        CheckpointFormatError: Wrong magic or corrupt header.
        CheckpointVersionError: Unsupported format version.
        CheckpointTruncatedError: Payload shorter than the manifest declares.
    """
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"Bad magic bytes {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    reader = _Reader(blob)
    _, version, count = reader.unpack("<4sII")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"Checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")

    manifest: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(int(count)):
        (name_len,) = reader.unpack("<I")
        (raw_name,) = reader.unpack(f"<{name_len}s")
        (rank,) = reader.unpack("<I")
        dims = tuple(int(d) for d in reader.unpack(f"<{rank}I"))
        try:
            name = bytes(raw_name).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointFormatError(f"Tensor name is not UTF-8: {e}") from e
        if any(d <= 0 for d in dims):
            raise CheckpointFormatError(f"Tensor '{name}' has non-positive dimensions {dims}")
        manifest.append((name, dims))

    state: dict[str, FloatArray] = {}
    offset = reader.offset
    for name, dims in manifest:
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        if offset + nbytes > len(blob):
            raise CheckpointTruncatedError(
                f"Payload for '{name}' needs {nbytes} bytes at offset {offset}, file has {len(blob)}"
            )
        payload = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=offset)
        state[name] = payload.astype(np.float64).reshape(dims)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointFormatError(f"{len(blob) - offset} trailing bytes after payload")
    return state


def save_checkpoint(model: Model, path: str | Path) -> Path:
    """Write a model's parameters to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = state_dict(model)
    path.write_bytes(encode_checkpoint(state))
    logger.info("Wrote checkpoint with %d tensors to %s", len(state), path)
    return path


def load_checkpoint(path: str | Path) -> Model:
    """Read a model written by ``save_checkpoint``.

    Raises:
        CheckpointError: Subclass naming the failure (format, version, truncation).
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointFormatError(f"Checkpoint '{path}' does not exist")
    model = model_from_state(decode_checkpoint(path.read_bytes()))
    logger.debug("Loaded %s from %s", type(model).__name__, path)
    return model
