"""Domain feature decoupler: relaxed Bernoulli masks over feature units, the
robust/related split, wrong-label selection and the decoupling loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, DegenerateInputError, ShapeError
from .numerics import functional as F
from .numerics.tensor import Tensor, make

U_CLAMP = 1e-12
DEFAULT_SIGMA = 0.1
DEFAULT_TAU = 0.06


@dataclass
class MaskMatrix:
    values: Tensor
    sigma: float
    noise_a: np.ndarray
    noise_b: np.ndarray


@dataclass
class DecoupledFeatures:
    robust: Tensor   # f+
    related: Tensor  # f-


def sample_gumbel(shape, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Logistic noise ``log u - log(1 - u)`` with ``u ~ U(0, 1)`` clamped off the endpoints."""
    u = np.clip(rng.random(shape), U_CLAMP, 1.0 - U_CLAMP)
    return gumbel_from_uniform(u).astype(dtype)


def gumbel_from_uniform(u) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), U_CLAMP, 1.0 - U_CLAMP)
    return np.log(u) - np.log1p(-u)


def gumbel_mask(scores: Tensor, sigma: float, noise_a=None, noise_b=None) -> MaskMatrix:
    """Concrete relaxation of a per-unit binary mask.

    Since ``log sigmoid(s) - log(1 - sigmoid(s)) = s``, the ratio of the two
    tempered exponentials reduces to ``sigmoid((s + g_a - g_b) / sigma)``.
    The result is kept strictly inside (0, 1) by one machine epsilon.
    """
    if not sigma > 0:
        raise ConfigError("sigma", f"temperature must be positive, got {sigma}")
    dtype = scores.dtype
    noise_a = np.zeros(scores.shape, dtype) if noise_a is None else np.asarray(noise_a, dtype=dtype)
    noise_b = np.zeros(scores.shape, dtype) if noise_b is None else np.asarray(noise_b, dtype=dtype)
    if noise_a.shape != scores.shape or noise_b.shape != scores.shape:
        raise ShapeError(f"noise shapes {noise_a.shape}/{noise_b.shape} do not match scores {scores.shape}")
    eps = np.finfo(dtype).eps
    z = (scores.data + noise_a - noise_b) / sigma
    m = np.clip(np.exp(-np.logaddexp(0.0, -z)), eps, 1.0 - eps).astype(dtype)
    values = make(m, (scores,), lambda g: (g * m * (1.0 - m) / sigma,))
    return MaskMatrix(values, sigma, noise_a, noise_b)


def decouple(f: Tensor, mask) -> DecoupledFeatures:
    m = mask.values if isinstance(mask, MaskMatrix) else mask
    if not isinstance(m, Tensor):
        m = Tensor(np.asarray(m, dtype=f.dtype))
    if m.shape != f.shape:
        raise ShapeError(f"mask {m.shape} does not match feature map {f.shape}")
    return DecoupledFeatures(F.mul(m, f), F.mul(F.sub(1.0, m), f))


def select_wrong_label(aux_logits, y):
    """Most confident class other than ``y``; ties go to the lowest index.

    Accepts a single logit vector with an int label, or a (B, C) batch with a
    (B,) label array. No gradient flows through the choice.
    """
    logits = np.asarray(aux_logits.data if isinstance(aux_logits, Tensor) else aux_logits, dtype=np.float64)
    if logits.shape[-1] < 2:
        raise DegenerateInputError("wrong-label selection needs at least two classes")
    single = logits.ndim == 1
    logits = np.atleast_2d(logits).copy()
    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    logits[np.arange(len(labels)), labels] = -np.inf
    choice = np.argmax(logits, axis=1)
    return int(choice[0]) if single else choice


def separability(l_pos: Tensor, l_neg: Tensor, tau: float) -> Tensor:
    """Per-sample ``log(exp(s(l+, l-) / tau))``, evaluated as ``s / tau``."""
    return F.mul(F.cosine_similarity(l_pos, l_neg), 1.0 / tau)


def loss_dfd(
    l_pos: Tensor,
    l_neg: Tensor,
    y,
    y_wrong,
    head: Callable[[Tensor], Tensor],
    tau: float = DEFAULT_TAU,
) -> Tensor:
    """Batch-mean of separability minus the discriminability log-likelihoods.

    ``head`` is the auxiliary classifier m; ``y`` picks the true class on the
    robust embedding and ``y_wrong`` the wrong class on the related one.
    """
    if not tau > 0:
        raise ConfigError("tau", f"must be positive, got {tau}")
    sep = separability(l_pos, l_neg, tau)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    y_wrong = np.atleast_1d(np.asarray(y_wrong, dtype=np.int64))
    ll_pos = F.pick(F.log_softmax(head(l_pos)), y)
    ll_neg = F.pick(F.log_softmax(head(l_neg)), y_wrong)
    return F.mean(F.sub(sep, F.add(ll_pos, ll_neg)))
