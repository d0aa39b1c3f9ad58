"""Lateralized part-based image classification with a holistic/constituent
two-phase decision engine, SIFT/HOG random forests and gradient-sign attacks."""

from latsys.class_matrix import ClassMatrix, Scale, accumulate, normalize
from latsys.core_types import (
    DecisionTrace,
    InputDomainError,
    PartKind,
    PartPrediction,
    Perception,
    PhaseSignal,
)
from latsys.engine import PredictorBank, decide

__version__ = "0.1.0"

__all__ = [
    "ClassMatrix",
    "DecisionTrace",
    "InputDomainError",
    "PartKind",
    "PartPrediction",
    "Perception",
    "PhaseSignal",
    "PredictorBank",
    "Scale",
    "accumulate",
    "decide",
    "normalize",
]
