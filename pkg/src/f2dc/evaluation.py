"""Per-domain accuracy, AVG/STD, feature-protocol accuracy and the collapse spectrum."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dfc import local_forward
from .model import ModelBundle, SharedModel, flatten_forward, plain_forward
from .numerics.spectrum import covariance_spectrum
from .numerics.tensor import Tensor

EVAL_BATCH = 256
NEAR_ZERO_FRACTION = 0.01


@dataclass
class RoundReport:
    round: int
    domain_accuracy: list[float]
    avg: float
    std: float
    weights: list[float]
    seconds: float = 0.0
    spectrum: list[float] | None = None
    selected: list[int] = field(default_factory=list)


def avg_std(accuracies: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation across domains."""
    acc = np.asarray(accuracies, dtype=np.float64)
    return float(acc.mean()), float(acc.std())


def _batches(n: int, size: int = EVAL_BATCH):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def _as_input(x: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(x, dtype=dtype))


def predict(shared: SharedModel, x: np.ndarray) -> np.ndarray:
    """Argmax predictions through the plain path in inference mode."""
    shared.eval()
    dtype = shared.classifier.weight.dtype
    preds = [np.argmax(plain_forward(shared, _as_input(x[s], dtype)).data, axis=1) for s in _batches(len(x))]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(pred: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(y))) if len(y) else 0.0


def evaluate_global(shared: SharedModel, tests) -> tuple[list[float], float, float]:
    """Top-1 accuracy of the global model on each domain's test set, plus AVG and STD."""
    accs = [accuracy(predict(shared, t.x), t.y) for t in tests]
    avg, std = avg_std(accs)
    return accs, avg, std


def embeddings(shared: SharedModel, x: np.ndarray) -> np.ndarray:
    shared.eval()
    dtype = shared.classifier.weight.dtype
    out = [flatten_forward(shared.backbone(_as_input(x[s], dtype))).data for s in _batches(len(x))]
    return np.concatenate(out).astype(np.float64)


@dataclass
class SpectrumReport:
    values: np.ndarray
    near_zero: int


def collapse_spectrum(shared: SharedModel, tests) -> SpectrumReport:
    """Singular values of the embedding covariance over the pooled test sets.

    ``near_zero`` counts values below 1% of the largest one (all of them when
    the spectrum is identically zero).
    """
    x = np.concatenate([t.x for t in tests]) if isinstance(tests, (list, tuple)) else tests.x
    values = covariance_spectrum(embeddings(shared, x))
    top = values[0] if len(values) else 0.0
    near_zero = int(np.sum(values < NEAR_ZERO_FRACTION * top)) if top > 0 else len(values)
    return SpectrumReport(values, near_zero)


def evaluate_feature_protocol(bundle: ModelBundle, x: np.ndarray, y: np.ndarray, protocol: str,
                              sigma: float, dfc_on: bool = True) -> float:
    """Accuracy when the chosen feature map (noise-free mask) feeds r^F and the classifier."""
    bundle.train(False)
    dtype = bundle.shared.classifier.weight.dtype
    preds = []
    for s in _batches(len(x)):
        plain = protocol == "plain"
        out = local_forward(bundle, _as_input(x[s], dtype), dfd_on=not plain, dfc_on=dfc_on and not plain,
                            sigma=sigma, protocol=protocol)
        preds.append(np.argmax(out.logits.data, axis=1))
    return accuracy(np.concatenate(preds), y)
