"""Federated protocol: local updating, domain-aware weighting, aggregation, rounds.

The server only ever handles shared state (backbone + classifier parameters
and the backbone's BN running statistics). Each client's decoupler,
corrector and auxiliary head sit in a :class:`PrivateStore` that only the
owning client's training loop can open.
"""
from __future__ import annotations

import time
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dfc import LossWeights, local_forward
from .dfd import DEFAULT_SIGMA, DEFAULT_TAU
from .errors import ConfigError, ContractError, EmptyClientError, RoundError
from .evaluation import RoundReport, collapse_spectrum, evaluate_global
from .model import ModelBundle, ModelConfig, PrivateModel, SharedModel, build_private, build_shared
from .numerics.optim import OptimizerState, sgd_step
from .numerics.tensor import Tensor, backward

State = dict[str, np.ndarray]

DEFAULT_ALPHA = 1.0
DEFAULT_BETA = 0.4
_PRIVATE_INIT = 7_001
_SERVER = 7_002
_GLOBAL_INIT = 7_003


def client_rng(seed: int, client_id: int, round_idx: int) -> np.random.Generator:
    """Counter-based stream keyed by (run seed, client, round)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, client_id, round_idx])))


@dataclass
class LocalHyper:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 64
    sigma: float = DEFAULT_SIGMA
    tau: float = DEFAULT_TAU
    lambda1: float = 0.8
    lambda2: float = 1.0
    dfd_on: bool = True
    dfc_on: bool = True

    def __post_init__(self):
        if self.dfc_on and not self.dfd_on:
            raise ConfigError("dfc_on", "the corrector requires the decoupler")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be at least 1")

    def plain(self) -> "LocalHyper":
        """Same optimizer settings with decoupling and correction switched off."""
        return LocalHyper(self.lr, self.momentum, self.weight_decay, self.batch_size,
                          self.sigma, self.tau, self.lambda1, self.lambda2, False, False)


class PrivateStore:
    """Owner-gated holder of a client's private modules.

    Every ``open`` is counted; opening with anything but the owner key counts
    as a foreign access and is refused.
    """

    def __init__(self, owner_key: object, cfg: ModelConfig, seed: int, client_id: int):
        self._owner_key = owner_key
        self._cfg = cfg
        self._seed = seed
        self._client_id = client_id
        self._module: PrivateModel | None = None
        self.owner_reads = 0
        self.foreign_reads = 0

    def open(self, key: object) -> PrivateModel:
        if key is not self._owner_key:
            self.foreign_reads += 1
            raise PermissionError(f"private modules of client {self._client_id} are not shared")
        self.owner_reads += 1
        if self._module is None:
            rng = np.random.default_rng(np.random.SeedSequence([self._seed, _PRIVATE_INIT, self._client_id]))
            self._module = build_private(self._cfg, rng)
        return self._module

    @property
    def initialized(self) -> bool:
        return self._module is not None


class ClientState:
    def __init__(self, client_id: int, domain: int, x: np.ndarray, y: np.ndarray,
                 cfg: ModelConfig, seed: int = 0):
        if len(x) != len(y):
            raise ContractError("images and labels differ in length")
        self.client_id = client_id
        self.domain = domain
        self.x = x
        self.y = np.asarray(y, dtype=np.int64)
        self.cfg = cfg
        self.seed = seed
        self._key = object()
        self.private = PrivateStore(self._key, cfg, seed, client_id)
        self._shared: SharedModel | None = None

    @property
    def n_samples(self) -> int:
        return len(self.y)

    @property
    def num_classes(self) -> int:
        return self.cfg.num_classes

    def working_model(self) -> SharedModel:
        if self._shared is None:
            self._shared = build_shared(self.cfg, np.random.default_rng(0))
        return self._shared

    def local_bundle(self) -> ModelBundle:
        """Working shared copy plus private modules, for the owner's own evaluation."""
        return ModelBundle(self.working_model(), self.private.open(self._key), self.cfg)


@dataclass
class LocalResult:
    client_id: int
    params: State
    buffers: State
    n_samples: int
    steps: int = 0
    last_loss: float | None = None


def _batches(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start:start + size]


def local_update(global_params: State, global_buffers: State, client: ClientState, epochs: int,
                 hyper: LocalHyper, round_idx: int = 0) -> LocalResult:
    """Train the client's model from the broadcast state; return only shared state."""
    if client.n_samples == 0:
        raise EmptyClientError(f"client {client.client_id} has no data")
    shared = client.working_model()
    shared.load_params(global_params)
    shared.load_buffers(global_buffers)
    if epochs == 0 or hyper.lr == 0:
        return LocalResult(client.client_id, shared.param_state(), shared.buffer_state(), client.n_samples)

    private = client.private.open(client._key) if hyper.dfd_on else None
    bundle = ModelBundle(shared, private, client.cfg)
    params = shared.parameters()
    if private is not None:
        for unit in private.units:
            params += unit.decoupler.parameters() + unit.aux.parameters()
            if hyper.dfc_on:
                params += unit.corrector.parameters()
    shared.train()
    if private is not None:
        private.train()

    rng = client_rng(client.seed, client.client_id, round_idx)
    opt = OptimizerState(hyper.lr, hyper.momentum, hyper.weight_decay)
    weights = LossWeights(hyper.lambda1, hyper.lambda2)
    dtype = client.cfg.np_dtype
    steps, last = 0, None
    for _ in range(epochs):
        for idx in _batches(rng.permutation(client.n_samples), hyper.batch_size):
            x = Tensor(client.x[idx].astype(dtype))
            out = local_forward(bundle, x, client.y[idx], dfd_on=hyper.dfd_on, dfc_on=hyper.dfc_on,
                                sigma=hyper.sigma, tau=hyper.tau, weights=weights, rng=rng)
            grads = backward(out.loss, params)
            sgd_step(params, grads, opt)
            steps += 1
            last = out.loss.item()
    return LocalResult(client.client_id, shared.param_state(), shared.buffer_state(), client.n_samples,
                       steps, last)


# ------------------------------------------------------------------ aggregation

def domain_discrepancy(n_k: int, total: int, num_classes: int, num_domains: int) -> float:
    """Euclidean gap (scaled by 1/sqrt 2) between the client's domain vector and the uniform one."""
    if not 1 <= n_k <= total or num_domains < 1 or num_classes < 1:
        raise ContractError(f"need 1 <= n_k <= N, Q >= 1, C >= 1; got {n_k}, {total}, {num_domains}, {num_classes}")
    local = np.full(num_classes, n_k / total)
    uniform = np.full(num_classes, 1.0 / num_domains)
    return float(np.sqrt(0.5 * np.sum((local - uniform) ** 2)))


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -np.asarray(x, dtype=np.float64)))


def aggregation_weights(sizes: Sequence[int], discrepancies: Sequence[float],
                        alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA) -> np.ndarray:
    n = np.asarray(sizes, dtype=np.float64)
    d = np.asarray(discrepancies, dtype=np.float64)
    if n.shape != d.shape or n.size == 0:
        raise ContractError("one size and one discrepancy per client are required")
    if np.any(n < 1):
        raise ContractError("client sizes must be at least 1")
    score = _sigmoid(alpha * n / n.sum() - beta * d)
    return score / score.sum()


def fedavg_weights(sizes: Sequence[int]) -> np.ndarray:
    n = np.asarray(sizes, dtype=np.float64)
    if n.size == 0 or np.any(n < 0) or n.sum() <= 0:
        raise ContractError("sizes must be nonnegative with a positive total")
    return n / n.sum()


def aggregate(weights: Sequence[float], states: Sequence[State]) -> State:
    """Convex combination of client states, written as ``ref + sum p_k (w_k - ref)``.

    ``ref`` is the first state; algebraically this is ``sum p_k w_k`` since the
    weights sum to one, and it returns ``ref`` bit-exactly when all states agree.
    """
    p = np.asarray(weights, dtype=np.float64)
    if len(states) == 0 or len(p) != len(states):
        raise ContractError("one weight per client state is required")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ContractError(f"weights must sum to 1, got {p.sum()!r}")
    ref = states[0]
    out: State = {}
    for name, base in ref.items():
        acc = np.zeros(base.shape, dtype=np.float64)
        for pk, st in zip(p, states):
            value = st.get(name)
            if value is None or value.shape != base.shape:
                raise ContractError(f"{name}: client states disagree in shape or keys")
            acc += pk * (value.astype(np.float64) - base)
        out[name] = (base + acc).astype(base.dtype)
    return out


# ------------------------------------------------------------------ rounds

@dataclass
class ServerState:
    params: State
    buffers: State
    num_domains: int
    round: int = 0
    weights: np.ndarray | None = None
    total_samples: int = 0


def init_server(cfg: ModelConfig, num_domains: int, seed: int = 0) -> ServerState:
    model = build_shared(cfg, np.random.default_rng(np.random.SeedSequence([seed, _GLOBAL_INIT])))
    return ServerState(model.param_state(), model.buffer_state(), num_domains)


@dataclass
class RoundSettings:
    mode: str = "f2dc"
    epochs: int = 2
    hyper: LocalHyper = field(default_factory=LocalHyper)
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    daa_on: bool = True
    participation: float = 1.0
    seed: int = 0
    spectrum: bool = False

    def __post_init__(self):
        if self.mode not in ("f2dc", "fedavg"):
            raise ConfigError("mode", f"unknown mode {self.mode!r}")
        if not 0 < self.participation <= 1:
            raise ConfigError("participation", f"must lie in (0, 1], got {self.participation}")

    def effective_hyper(self) -> LocalHyper:
        return self.hyper if self.mode == "f2dc" else self.hyper.plain()

    @property
    def domain_aware(self) -> bool:
        return self.mode == "f2dc" and self.daa_on


def select_clients(num_clients: int, participation: float, seed: int, round_idx: int) -> list[int]:
    count = int(round(participation * num_clients))
    if count < 1:
        raise RoundError(f"participation {participation} selects no client out of {num_clients}")
    if count >= num_clients:
        return list(range(num_clients))
    rng = np.random.default_rng(np.random.SeedSequence([seed, _SERVER, round_idx]))
    return sorted(int(k) for k in rng.choice(num_clients, size=count, replace=False))


def round_weights(results: Sequence[LocalResult], num_classes: int, num_domains: int,
                  settings: RoundSettings) -> np.ndarray:
    sizes = [r.n_samples for r in results]
    if not settings.domain_aware:
        return fedavg_weights(sizes)
    total = sum(sizes)
    disc = [domain_discrepancy(n, total, num_classes, num_domains) for n in sizes]
    return aggregation_weights(sizes, disc, settings.alpha, settings.beta)


def run_round(server: ServerState, clients: Sequence[ClientState], settings: RoundSettings, tests,
              eval_model: SharedModel, executor: Executor | None = None) -> tuple[ServerState, RoundReport]:
    """Broadcast -> local updates -> weighting -> aggregation -> evaluation."""
    start = time.perf_counter()
    round_idx = server.round + 1
    selected = select_clients(len(clients), settings.participation, settings.seed, round_idx)
    hyper = settings.effective_hyper()

    def work(k: int):
        try:
            return local_update(server.params, server.buffers, clients[k], settings.epochs, hyper, round_idx)
        except EmptyClientError:
            return None

    if executor is None:
        outcomes = [work(k) for k in selected]
    else:
        outcomes = list(executor.map(work, selected))
    results = [r for r in outcomes if r is not None]
    if not results:
        raise RoundError("no selected client produced an update")

    position = {c.client_id: i for i, c in enumerate(clients)}
    cfg = clients[position[results[0].client_id]].cfg
    p = round_weights(results, cfg.num_classes, server.num_domains, settings)
    new = ServerState(
        params=aggregate(p, [r.params for r in results]),
        buffers=aggregate(p, [r.buffers for r in results]),
        num_domains=server.num_domains,
        round=round_idx,
        weights=p,
        total_samples=sum(r.n_samples for r in results),
    )
    eval_model.load_params(new.params)
    eval_model.load_buffers(new.buffers)
    accs, avg, std = evaluate_global(eval_model, tests)
    full = np.zeros(len(clients))
    for r, pk in zip(results, p):
        full[position[r.client_id]] = pk
    spectrum = collapse_spectrum(eval_model, tests).values.tolist() if settings.spectrum else None
    report = RoundReport(round_idx, accs, avg, std, full.tolist(), time.perf_counter() - start, spectrum,
                         [r.client_id for r in results])
    return new, report
