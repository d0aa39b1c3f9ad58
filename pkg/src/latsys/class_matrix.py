"""Class matrices: accumulate part votes, normalize, and read perceptions off them."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from latsys.core_types import (
    InputDomainError,
    PartPrediction,
    Perception,
    as_probability_vector,
)

TIE_ATOL = 1e-9
HOLISTIC_RESCALE = 100.0


class Scale(str, enum.Enum):
    RAW = "raw"
    NORMALIZED = "normalized_0_100"


@dataclass(frozen=True, eq=False)
class ClassMatrix:
    entries: np.ndarray
    scale: Scale = Scale.RAW

    def __post_init__(self) -> None:
        arr = np.array(self.entries, dtype=np.float64).reshape(-1)
        if arr.size < 1:
            raise InputDomainError("a class matrix needs at least 1 class")
        if not np.all(np.isfinite(arr)):
            raise InputDomainError("class matrix entries must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "entries", arr)
        object.__setattr__(self, "scale", Scale(self.scale))

    @property
    def n_classes(self) -> int:
        return self.entries.size

    def top_k(self, k: int = 2) -> list[tuple[int, float]]:
        return top_k(self.entries, k)

    def __repr__(self) -> str:
        return f"ClassMatrix({np.round(self.entries, 4).tolist()}, {self.scale.value})"


def top_k(values: np.ndarray, k: int = 2) -> list[tuple[int, float]]:
    """Highest ``k`` nonzero entries as ``(label, value)``, ties by index."""
    values = np.asarray(values, dtype=np.float64)
    order = np.lexsort((np.arange(values.size), -values))
    return [(int(i), float(values[i])) for i in order[:k] if values[i] > 0]


def accumulate(predictions: Iterable[PartPrediction], n_classes: int) -> ClassMatrix:
    """Sum each model's probability into the slot of the class it predicted."""
    if n_classes < 1:
        raise InputDomainError(f"n_classes must be >= 1, got {n_classes}")
    entries = np.zeros(n_classes)
    for pred in predictions:
        if not 0 <= pred.label < n_classes:
            raise InputDomainError(
                f"prediction label {pred.label} outside [0, {n_classes})")
        if pred.recognized:
            entries[pred.label] += pred.probability
    return ClassMatrix(entries, Scale.RAW)


def normalize(matrix: ClassMatrix) -> ClassMatrix:
    """Rescale so the largest entry is exactly 100; all-zero stays all-zero."""
    entries = matrix.entries
    if np.any(entries < 0):
        raise InputDomainError("cannot normalize a matrix with negative entries")
    peak = entries.max()
    if peak <= 0:
        return ClassMatrix(entries.copy(), Scale.NORMALIZED)
    # dividing first keeps subnormal peaks from overflowing
    scaled = entries / peak * 100.0
    # rounding must neither move the peak off 100 nor lift a runner-up onto it
    top = entries == peak
    scaled[top] = 100.0
    scaled[~top] = np.minimum(scaled[~top], np.nextafter(100.0, 0.0))
    return ClassMatrix(scaled, Scale.NORMALIZED)


def _perceive(values: np.ndarray) -> Perception:
    if values.size < 1:
        raise InputDomainError("perception needs at least 1 class")
    peak = float(values.max())
    label = int(np.argmax(values))
    n_at_peak = int(np.count_nonzero(np.abs(values - peak) <= TIE_ATOL))
    return Perception(label=label, score=peak, confused=n_at_peak >= 2)


def constituent_perception(matrix: ClassMatrix) -> Perception:
    return _perceive(matrix.entries)


def holistic_perception(probs: Sequence[float] | np.ndarray) -> Perception:
    return _perceive(as_probability_vector(probs))


def combine_final(cm_c: ClassMatrix, cm_a: ClassMatrix,
                  holistic: Sequence[float] | np.ndarray) -> ClassMatrix:
    """Entrywise sum of both normalized matrices and the holistic vector x100."""
    holistic = as_probability_vector(holistic)
    sizes = {cm_c.n_classes, cm_a.n_classes, holistic.size}
    if len(sizes) != 1:
        raise InputDomainError(f"class count mismatch: {sorted(sizes)}")
    for m in (cm_c, cm_a):
        if m.scale is not Scale.NORMALIZED:
            raise InputDomainError("combine_final expects normalized matrices")
    total = cm_c.entries + cm_a.entries + HOLISTIC_RESCALE * holistic
    return ClassMatrix(total, Scale.RAW)


def final_prediction(cm_f: ClassMatrix) -> Perception:
    # argmax is scale invariant, so cm_f is not renormalized first
    return _perceive(cm_f.entries)
