"""Desk-scale local model: backbone, pooling head, classifier and the private
decoupler / corrector / auxiliary head.

Parameters live in small layer objects; ``state()`` / ``load_state()`` move
them in and out as plain ``{name: ndarray}`` dicts, which is the unit the
federation layer broadcasts and aggregates.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractError, ShapeError
from .numerics import functional as F
from .numerics.tensor import Tensor

BN_MOMENTUM = 0.1


class Module:
    training: bool = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def _own_parameters(self) -> dict[str, Tensor]:
        return {}

    def _own_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._own_parameters().items():
            yield prefix + name, p
        for cname, child in self.children():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._own_buffers().items():
            yield prefix + name, b
        for cname, child in self.children():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def param_state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def buffer_state(self) -> dict[str, np.ndarray]:
        return {name: b.copy() for name, b in self.named_buffers()}

    def load_params(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            value = state[name]
            if value.shape != p.shape:
                raise ShapeError(f"{name}: expected {p.shape}, got {value.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def load_buffers(self, state: dict[str, np.ndarray]) -> None:
        for name, _ in self.named_buffers():
            owner, attr = self._locate(name)
            value = state[name]
            if value.shape != getattr(owner, attr).shape:
                raise ShapeError(f"{name}: expected {getattr(owner, attr).shape}, got {value.shape}")
            setattr(owner, attr, value.astype(getattr(owner, attr).dtype, copy=True))

    def _locate(self, dotted: str) -> tuple["Module", str]:
        parts = dotted.split(".")
        node = self
        i = 0
        while i < len(parts) - 1:
            attr = getattr(node, parts[i])
            if isinstance(attr, list):
                node = attr[int(parts[i + 1])]
                i += 2
            else:
                node = attr
                i += 1
        return node, parts[-1]


def _kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 padding: int = 0, bias: bool = True, dtype=np.float64):
        self.padding = padding
        self.weight = Tensor(_kaiming(rng, (cout, cin, kernel, kernel), cin * kernel * kernel, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None

    def _own_parameters(self):
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=np.float64, momentum: float = BN_MOMENTUM, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.weight = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def _own_parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def _own_buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def __call__(self, x: Tensor) -> Tensor:
        out, mu, var = F.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                                    self.training, self.eps)
        if self.training:
            m = self.momentum
            dtype = self.running_mean.dtype
            self.running_mean = ((1 - m) * self.running_mean + m * mu).astype(dtype)
            self.running_var = ((1 - m) * self.running_var + m * var).astype(dtype)
        return out


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float64):
        self.weight = Tensor(_kaiming(rng, (fan_out, fan_in), fan_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)

    def _own_parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class ConvBlock(Module):
    """conv -> BN -> (ReLU) -> (2x average pool)."""

    def __init__(self, cin: int, cout: int, rng, dtype, relu: bool = True, pool: bool = False):
        self.conv = Conv2d(cin, cout, 3, rng, padding=1, bias=False, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)
        self.relu = relu
        self.pool = pool

    def __call__(self, x: Tensor) -> Tensor:
        x = self.bn(self.conv(x))
        if self.relu:
            x = F.relu(x)
        if self.pool:
            x = F.avg_pool2d(x, 2)
        return x


class TwoLayerCNN(Module):
    """Channel- and shape-preserving conv-BN-ReLU-conv-BN; used for both A_D and A_C."""

    def __init__(self, channels: int, rng, dtype):
        self.layers = [ConvBlock(channels, channels, rng, dtype, relu=True),
                       ConvBlock(channels, channels, rng, dtype, relu=False)]

    def __call__(self, f: Tensor) -> Tensor:
        out = f
        for layer in self.layers:
            out = layer(out)
        if out.shape != f.shape:
            raise ShapeError(f"feature-map shape changed from {f.shape} to {out.shape}")
        return out


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 4
    in_channels: int = 3
    image_size: int = 16
    channels: tuple[int, ...] = (16, 32, 32)
    pool_after: tuple[bool, ...] = (True, True, False)
    attach_layers: tuple[int, ...] = (-1,)
    dtype: str = "float64"

    def __post_init__(self):
        if len(self.channels) != len(self.pool_after):
            raise ContractError("channels and pool_after must have equal length")
        if not self.attach_layers:
            raise ContractError("attach_layers must name at least one backbone layer")

    @property
    def feature_channels(self) -> int:
        return self.channels[-1]

    @property
    def feature_size(self) -> int:
        size = self.image_size
        for pool in self.pool_after:
            size //= 2 if pool else 1
        return size

    @property
    def attach_indices(self) -> tuple[int, ...]:
        n = len(self.channels)
        return tuple(sorted({i % n for i in self.attach_layers}))

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


class Backbone(Module):
    def __init__(self, cfg: ModelConfig, rng):
        dtype = cfg.np_dtype
        self.in_channels = cfg.in_channels
        self.image_size = cfg.image_size
        cins = (cfg.in_channels,) + tuple(cfg.channels[:-1])
        self.blocks = [ConvBlock(ci, co, rng, dtype, relu=True, pool=p)
                       for ci, co, p in zip(cins, cfg.channels, cfg.pool_after)]

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1:] != (self.in_channels, self.image_size, self.image_size):
            raise ContractError(
                f"expected images (B, {self.in_channels}, {self.image_size}, {self.image_size}), got {x.shape}")

    def __call__(self, x: Tensor) -> Tensor:
        self.check_input(x)
        for block in self.blocks:
            x = block(x)
        return x


class SharedModel(Module):
    """The aggregated part: backbone Phi and classifier theta."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.backbone = Backbone(cfg, rng)
        self.classifier = Linear(cfg.feature_channels, cfg.num_classes, rng, cfg.np_dtype)

    def children(self):
        yield "backbone", self.backbone
        yield "classifier", self.classifier


class PrivateModule(Module):
    def __init__(self, channels: int, num_classes: int, rng, dtype):
        self.decoupler = TwoLayerCNN(channels, rng, dtype)
        self.corrector = TwoLayerCNN(channels, rng, dtype)
        self.aux = Linear(channels, num_classes, rng, dtype)


class PrivateModel(Module):
    """Client-local decoupler, corrector and auxiliary head, one set per attachment layer."""

    def __init__(self, cfg: ModelConfig, rng):
        self.attach = cfg.attach_indices
        self.units = [PrivateModule(cfg.channels[i], cfg.num_classes, rng, cfg.np_dtype) for i in self.attach]

    def at(self, layer: int) -> PrivateModule:
        return self.units[self.attach.index(layer)]


@dataclass
class ModelBundle:
    shared: SharedModel
    private: PrivateModel
    cfg: ModelConfig = field(repr=False, default=None)

    def parameters(self) -> list[Tensor]:
        return self.shared.parameters() + self.private.parameters()

    def train(self, mode: bool = True) -> None:
        self.shared.train(mode)
        self.private.train(mode)

    def clone(self) -> "ModelBundle":
        return copy.deepcopy(self)


def build_shared(cfg: ModelConfig, rng: np.random.Generator) -> SharedModel:
    return SharedModel(cfg, rng)


def build_private(cfg: ModelConfig, rng: np.random.Generator) -> PrivateModel:
    return PrivateModel(cfg, rng)


def build_bundle(cfg: ModelConfig, rng: np.random.Generator) -> ModelBundle:
    return ModelBundle(build_shared(cfg, rng), build_private(cfg, rng), cfg)


# ------------------------------------------------------------------ forward ops

def backbone_forward(shared: SharedModel, x: Tensor) -> Tensor:
    return shared.backbone(x)


def flatten_forward(f: Tensor) -> Tensor:
    """r^F: global average pooling followed by flattening, (B, C, H, W) -> (B, C)."""
    return F.flatten(F.global_avg_pool2d(f))


def classify(shared: SharedModel, embedding: Tensor) -> Tensor:
    return shared.classifier(embedding)


def decoupler_forward(unit: PrivateModule, f: Tensor) -> Tensor:
    return unit.decoupler(f)


def corrector_forward(unit: PrivateModule, f_neg: Tensor) -> Tensor:
    return unit.corrector(f_neg)


def aux_head(unit: PrivateModule, embedding: Tensor) -> Tensor:
    return unit.aux(embedding)


def plain_forward(shared: SharedModel, x: Tensor) -> Tensor:
    """Backbone -> r^F -> classifier, with no decoupling."""
    return classify(shared, flatten_forward(backbone_forward(shared, x)))


def zero_parameters(module: Module) -> None:
    for p in module.parameters():
        p.data = np.zeros_like(p.data)


def named_shapes(module: Module) -> list[tuple[str, tuple[int, ...]]]:
    return [(n, p.shape) for n, p in module.named_parameters()]


def parameter_names(modules: Sequence[Module]) -> set[str]:
    return {n for m in modules for n, _ in m.named_parameters()}
