"""Domain feature corrector, feature fusion, and the combined local objective.

:func:`local_forward` threads a batch through the backbone, applying the
decoupler/corrector pair after every attachment layer and assembling the
total loss. The same routine serves training (noisy masks, losses) and
evaluation (noise-free masks, optional feature protocol).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import dfd
from .errors import ConfigError, ShapeError
from .model import ModelBundle, aux_head, classify, corrector_forward, decoupler_forward, flatten_forward
from .numerics import functional as F
from .numerics.tensor import Tensor, as_tensor

DEFAULT_LAMBDA1 = 0.8
DEFAULT_LAMBDA2 = 1.0
PROTOCOLS = ("plain", "f+", "f-", "f*", "f~")


@dataclass
class CorrectedFeatures:
    rectified: Tensor  # f*
    fused: Tensor      # f~ = f+ + f*


@dataclass
class LossWeights:
    lambda1: float = DEFAULT_LAMBDA1
    lambda2: float = DEFAULT_LAMBDA2

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda", f"loss weights must be nonnegative, got {self.lambda1}, {self.lambda2}")


def correct(f_neg: Tensor, mask, corrector) -> Tensor:
    """``f* = f- + (1 - M) * A_C(f-)``. ``corrector`` is a callable or a precomputed residual."""
    m = mask.values if isinstance(mask, dfd.MaskMatrix) else mask
    if not isinstance(m, Tensor):
        m = Tensor(np.asarray(m, dtype=f_neg.dtype))
    residual = corrector(f_neg) if callable(corrector) else corrector
    if not isinstance(residual, Tensor):
        residual = Tensor(np.asarray(residual, dtype=f_neg.dtype))
    if m.shape != f_neg.shape or residual.shape != f_neg.shape:
        raise ShapeError(f"correct: shapes {f_neg.shape}, {m.shape}, {residual.shape} disagree")
    return F.add(f_neg, F.mul(F.sub(1.0, m), residual))


def fuse(f_pos: Tensor, f_star: Tensor) -> Tensor:
    if f_pos.shape != f_star.shape:
        raise ShapeError(f"fuse: {f_pos.shape} vs {f_star.shape}")
    return F.add(f_pos, f_star)


def loss_dfc(l_star: Tensor, y, head: Callable[[Tensor], Tensor]) -> Tensor:
    return F.cross_entropy(head(l_star), np.atleast_1d(y))


def loss_ce(logits: Tensor, y) -> Tensor:
    return F.cross_entropy(logits, np.atleast_1d(y))


def total_loss(l_ce, layer_losses: Sequence[tuple], lambda1: float = DEFAULT_LAMBDA1,
               lambda2: float = DEFAULT_LAMBDA2) -> Tensor:
    """``L_CE + mean over layers of (lambda1 * L_DFD + lambda2 * L_DFC)``.

    A ``None`` entry in a layer pair stands for a switched-off term.
    """
    if not layer_losses:
        raise ConfigError("attach_layers", "at least one attachment layer is required")
    l_ce = as_tensor(l_ce)
    extra = None
    for l_dfd, l_dfc in layer_losses:
        for weight, term in ((lambda1, l_dfd), (lambda2, l_dfc)):
            if term is None:
                continue
            scaled = F.mul(as_tensor(term, l_ce), weight)
            extra = scaled if extra is None else F.add(extra, scaled)
    if extra is None:
        return l_ce
    return F.add(l_ce, F.mul(extra, 1.0 / len(layer_losses)))


@dataclass
class LayerTrace:
    feature: Tensor
    mask: dfd.MaskMatrix | None = None
    robust: Tensor | None = None
    related: Tensor | None = None
    rectified: Tensor | None = None
    fused: Tensor | None = None
    wrong_labels: np.ndarray | None = None
    l_dfd: Tensor | None = None
    l_dfc: Tensor | None = None


@dataclass
class ForwardResult:
    logits: Tensor
    embedding: Tensor
    loss: Tensor | None = None
    l_ce: Tensor | None = None
    layers: dict[int, LayerTrace] = field(default_factory=dict)


def local_forward(
    bundle: ModelBundle,
    x: Tensor,
    y=None,
    *,
    dfd_on: bool = True,
    dfc_on: bool = True,
    sigma: float = dfd.DEFAULT_SIGMA,
    tau: float = dfd.DEFAULT_TAU,
    weights: LossWeights | None = None,
    rng: np.random.Generator | None = None,
    noise: dict[int, tuple[np.ndarray, np.ndarray]] | None = None,
    wrong_labels: dict[int, np.ndarray] | None = None,
    protocol: str = "f~",
) -> ForwardResult:
    """One pass of the local model.

    With ``dfd_on`` false this is exactly the plain backbone -> r^F -> h path.
    Mask noise comes from ``noise`` when given, else from ``rng``, else is
    zero. ``protocol`` picks which map leaves the last attachment layer:
    ``f+``, ``f-``, ``f*`` or the fused ``f~`` (``plain`` skips decoupling).
    When ``y`` is given, losses are computed.
    """
    if dfc_on and not dfd_on:
        raise ConfigError("dfc_on", "the corrector consumes f-, so it requires the decoupler")
    if protocol not in PROTOCOLS:
        raise ConfigError("protocol", f"unknown feature protocol {protocol!r}")
    weights = weights or LossWeights()
    shared, private = bundle.shared, bundle.private
    decouple_path = dfd_on and protocol != "plain"
    attach = private.attach if decouple_path else ()
    last = attach[-1] if attach else None
    labels = None if y is None else np.atleast_1d(np.asarray(y, dtype=np.int64))

    result_layers: dict[int, LayerTrace] = {}
    shared.backbone.check_input(x)
    h = x
    for idx, block in enumerate(shared.backbone.blocks):
        h = block(h)
        if idx not in attach:
            continue
        unit = private.at(idx)
        trace = LayerTrace(feature=h)
        scores = decoupler_forward(unit, h)
        if noise is not None:
            ga, gb = noise[idx]
        elif rng is not None:
            ga = dfd.sample_gumbel(h.shape, rng, h.dtype)
            gb = dfd.sample_gumbel(h.shape, rng, h.dtype)
        else:
            ga = gb = None
        trace.mask = dfd.gumbel_mask(scores, sigma, ga, gb)
        parts = dfd.decouple(h, trace.mask)
        trace.robust, trace.related = parts.robust, parts.related
        head = lambda e, u=unit: aux_head(u, e)  # noqa: E731
        if labels is not None:
            l_pos, l_neg = flatten_forward(parts.robust), flatten_forward(parts.related)
            if wrong_labels is not None:
                trace.wrong_labels = np.asarray(wrong_labels[idx])
            else:
                trace.wrong_labels = dfd.select_wrong_label(head(l_neg), labels)
            trace.l_dfd = dfd.loss_dfd(l_pos, l_neg, labels, trace.wrong_labels, head, tau)
        if dfc_on:
            trace.rectified = correct(parts.related, trace.mask, lambda f, u=unit: corrector_forward(u, f))
            if labels is not None:
                trace.l_dfc = loss_dfc(flatten_forward(trace.rectified), labels, head)
        else:
            trace.rectified = parts.related
        trace.fused = fuse(parts.robust, trace.rectified)
        result_layers[idx] = trace
        if idx == last:
            h = {"f+": trace.robust, "f-": trace.related, "f*": trace.rectified}.get(protocol, trace.fused)
        else:
            h = trace.fused

    embedding = flatten_forward(h)
    logits = classify(shared, embedding)
    out = ForwardResult(logits=logits, embedding=embedding, layers=result_layers)
    if labels is not None:
        out.l_ce = loss_ce(logits, labels)
        if result_layers:
            pairs = [(t.l_dfd, t.l_dfc) for t in result_layers.values()]
            out.loss = total_loss(out.l_ce, pairs, weights.lambda1, weights.lambda2)
        else:
            out.loss = out.l_ce
    return out
