"""Synthetic multi-domain image data with domain skew.

Every domain shares the same class prototypes and label distribution; only the
rendering differs (texture overlay, inversion, blur, colour permutation), so
P(y) is identical across clients while P(x | y) is not.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from . import container
from .errors import ConfigError

TRANSFORMS = ("stripes", "invert", "blur", "permute")
CHANNEL_GAINS = (1.0, 0.7, 0.4)
_TRAIN, _TEST, _LABELS = 0, 1, 2


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    transform: str
    params: Mapping[str, float] = field(default_factory=dict)
    noise: float = 0.0

    def __post_init__(self):
        if self.transform not in TRANSFORMS + ("identity",):
            raise ConfigError("transform", f"unknown domain transform {self.transform!r}")
        if self.noise < 0:
            raise ConfigError("noise", "noise level must be nonnegative")


@dataclass
class LabeledSample:
    x: np.ndarray
    y: int
    domain: int


@dataclass
class ClientDataset:
    client_id: int
    domain: int
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class TestSet:
    domain: int
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class ClientAllocation:
    domain: int
    train_count: int
    test_shared: bool = True


@dataclass
class PartitionPlan:
    clients: dict[int, ClientAllocation]
    test_size: int
    num_domains: int
    num_classes: int


@dataclass
class Partition:
    plan: PartitionPlan
    clients: list[ClientDataset]
    tests: list[TestSet]
    domains: list[DomainSpec]


def default_domains(num_domains: int, noise: float = 0.12) -> list[DomainSpec]:
    """Cycle through the four style transforms; repeats get shifted parameters."""
    specs = []
    for q in range(num_domains):
        kind = TRANSFORMS[q % len(TRANSFORMS)]
        rep = q // len(TRANSFORMS)
        params = {
            "stripes": {"amplitude": 0.6, "period": 4.0 + rep, "angle": np.pi / 4 + rep * np.pi / 7},
            "invert": {"floor": 0.1 * rep},
            "blur": {"sigma": 1.3 + 0.4 * rep},
            "permute": {"shift": 1 + rep % 2, "offset": 0.25},
        }[kind]
        specs.append(DomainSpec(q, kind, params, noise))
    return specs


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    coords = np.arange(size) - (size - 1) / 2.0
    return np.meshgrid(coords, coords, indexing="xy")


def class_prototype(c: int, num_classes: int, size: int = 16) -> np.ndarray:
    """Deterministic 3 x size x size pattern: an oriented bar plus an off-centre blob."""
    if not 0 <= c < num_classes:
        raise ConfigError("class", f"class {c} outside 0..{num_classes - 1}")
    u, v = _grid(size)
    scale = size / 16.0
    theta = np.pi * c / num_classes
    along = np.cos(theta) * u + np.sin(theta) * v
    across = -np.sin(theta) * u + np.cos(theta) * v
    bar = np.exp(-across**2 / (2 * (1.1 * scale) ** 2)) * (np.abs(along) <= 5.5 * scale)
    phi = 2 * np.pi * c / num_classes + np.pi / 4
    bu, bv = 4.5 * scale * np.cos(phi), 4.5 * scale * np.sin(phi)
    blob = np.exp(-((u - bu) ** 2 + (v - bv) ** 2) / (2 * (1.4 * scale) ** 2))
    gray = np.clip(bar + 0.8 * blob, 0.0, 1.0)
    return np.stack([g * gray for g in CHANNEL_GAINS])


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(img)
    h, w = img.shape[1:]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[:, yd, xd] = img[:, ys, xs]
    return out


def apply_transform(img: np.ndarray, domain: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    p = domain.params
    if domain.transform == "stripes":
        u, v = _grid(img.shape[-1])
        angle = p.get("angle", np.pi / 4)
        phase = rng.uniform(0, 2 * np.pi)
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * (np.cos(angle) * u + np.sin(angle) * v) / p.get("period", 4.0) + phase)
        return img + p.get("amplitude", 0.5) * wave[None]
    if domain.transform == "invert":
        return 1.0 - img + p.get("floor", 0.0)
    if domain.transform == "blur":
        sigma = p.get("sigma", 1.2)
        return np.stack([gaussian_filter(ch, sigma, mode="constant") for ch in img]) * p.get("gain", 1.8)
    if domain.transform == "permute":
        return np.roll(img, int(p.get("shift", 1)), axis=0) + p.get("offset", 0.0)
    return img


def generate_sample(c: int, domain: DomainSpec, rng: np.random.Generator, num_classes: int,
                    size: int = 16, jitter: bool = True) -> LabeledSample:
    """prototype -> jitter (shift, contrast) -> domain transform -> noise -> clamp to [0, 1]."""
    img = class_prototype(c, num_classes, size)
    if jitter:
        dy, dx = rng.integers(-1, 2, size=2)
        img = _shift(img, int(dy), int(dx)) * rng.uniform(0.85, 1.15)
    img = apply_transform(img, domain, rng)
    if domain.noise > 0:
        img = img + rng.normal(0.0, domain.noise, img.shape)
    return LabeledSample(np.clip(img, 0.0, 1.0), c, domain.domain_id)


def _sample_rng(seed: int, role: int, owner: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, role, owner, index]))


def _balanced_labels(n: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % num_classes)


def _materialize(labels, domain, seed, role, owner, num_classes, size):
    xs = [generate_sample(int(c), domain, _sample_rng(seed, role, owner, i), num_classes, size).x
          for i, c in enumerate(labels)]
    return np.stack(xs)


def build_partition(
    num_clients: int,
    num_domains: int,
    num_classes: int,
    sizes: int | Sequence[int] = 200,
    seed: int = 0,
    test_size: int = 200,
    domains: Sequence[DomainSpec] | None = None,
    assignment: Sequence[int] | None = None,
    image_size: int = 16,
) -> Partition:
    """Materialize label-balanced client datasets and per-domain test sets.

    Clients are assigned to domains round-robin unless ``assignment`` gives
    the domain of each client explicitly.
    """
    if num_clients < num_domains:
        raise ConfigError("num_clients", f"{num_clients} clients cannot cover {num_domains} domains")
    if num_classes < 2:
        raise ConfigError("num_classes", "need at least two classes")
    if isinstance(sizes, int):
        sizes = [sizes] * num_clients
    sizes = [int(s) for s in sizes]
    if len(sizes) != num_clients or any(s < 0 for s in sizes):
        raise ConfigError("sizes", "one nonnegative size per client is required")
    domains = list(domains) if domains is not None else default_domains(num_domains)
    if len(domains) != num_domains:
        raise ConfigError("domains", f"expected {num_domains} domain specs, got {len(domains)}")
    if assignment is None:
        assignment = [k % num_domains for k in range(num_clients)]
    if len(assignment) != num_clients or set(assignment) != set(range(num_domains)):
        raise ConfigError("assignment", "every client needs a domain and every domain a client")

    plan = PartitionPlan({}, test_size, num_domains, num_classes)
    clients = []
    for k, (q, n) in enumerate(zip(assignment, sizes)):
        plan.clients[k] = ClientAllocation(int(q), n)
        labels = _balanced_labels(n, num_classes, _sample_rng(seed, _LABELS, k, 0))
        x = _materialize(labels, domains[q], seed, _TRAIN, k, num_classes, image_size) if n else \
            np.zeros((0, 3, image_size, image_size))
        clients.append(ClientDataset(k, int(q), x, labels.astype(np.int64)))
    tests = []
    for q in range(num_domains):
        labels = _balanced_labels(test_size, num_classes, _sample_rng(seed, _LABELS, 10_000 + q, 0))
        x = _materialize(labels, domains[q], seed, _TEST, q, num_classes, image_size)
        tests.append(TestSet(q, x, labels.astype(np.int64)))
    return Partition(plan, clients, tests, domains)


def export_partition(path, partition: Partition) -> None:
    tensors: dict[str, np.ndarray] = {
        "meta": np.array([partition.plan.num_domains, partition.plan.num_classes, partition.plan.test_size],
                         dtype=np.int64)}
    for c in partition.clients:
        tensors[f"client.{c.client_id}.domain"] = np.array([c.domain], dtype=np.int64)
        tensors[f"client.{c.client_id}.x"] = c.x.astype(np.float64)
        tensors[f"client.{c.client_id}.y"] = c.y.astype(np.int64)
    for t in partition.tests:
        tensors[f"test.{t.domain}.x"] = t.x.astype(np.float64)
        tensors[f"test.{t.domain}.y"] = t.y.astype(np.int64)
    container.save(path, tensors)


def import_partition(path, domains: Sequence[DomainSpec] | None = None) -> Partition:
    raw = container.load(path)
    num_domains, num_classes, test_size = (int(v) for v in raw["meta"])
    ids = sorted({int(k.split(".")[1]) for k in raw if k.startswith("client.")})
    clients = [ClientDataset(k, int(raw[f"client.{k}.domain"][0]), raw[f"client.{k}.x"], raw[f"client.{k}.y"])
               for k in ids]
    tests = [TestSet(q, raw[f"test.{q}.x"], raw[f"test.{q}.y"]) for q in range(num_domains)]
    plan = PartitionPlan({c.client_id: ClientAllocation(c.domain, len(c)) for c in clients},
                         test_size, num_domains, num_classes)
    return Partition(plan, clients, tests, list(domains) if domains else default_domains(num_domains))
