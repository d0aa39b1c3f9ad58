"""Shared vocabulary: part kinds, predictions, perceptions, signals and traces.

Class labels are plain 0-based ``int`` values throughout the package. Files
that use 1-based species ids (``class-1`` .. ``class-200``) are converted at
ingest with :func:`label_from_species_id`.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, asdict
from typing import Any, Optional, Sequence

import numpy as np


class InputDomainError(ValueError):
    """An argument lies outside the domain an operation accepts."""


class PartKind(str, enum.Enum):
    BACK = "back"
    BEAK = "beak"
    BELLY = "belly"
    BREAST = "breast"
    CROWN = "crown"
    EYE = "eye"
    FOREHEAD = "forehead"
    NAPE = "nape"
    TAIL = "tail"
    THROAT = "throat"
    WING = "wing"
    FACE = "face"
    WHOLE_IMAGE = "whole_image"


CONSTITUENT_PARTS: tuple[PartKind, ...] = (
    PartKind.BACK,
    PartKind.BEAK,
    PartKind.BELLY,
    PartKind.BREAST,
    PartKind.CROWN,
    PartKind.EYE,
    PartKind.FOREHEAD,
    PartKind.NAPE,
    PartKind.TAIL,
    PartKind.THROAT,
    PartKind.WING,
)
CONFIGURAL_PARTS: tuple[PartKind, ...] = (PartKind.FACE,)
# Parts that feed a constituent class matrix (11 constituents + face).
MATRIX_PARTS: tuple[PartKind, ...] = CONSTITUENT_PARTS + CONFIGURAL_PARTS


class PhaseSignal(str, enum.Enum):
    INHIBIT = "inhibit"
    EXCITE = "excite"


def check_label(label: int, n_classes: int) -> int:
    if n_classes < 1:
        raise InputDomainError(f"n_classes must be >= 1, got {n_classes}")
    if isinstance(label, bool) or not isinstance(label, (int, np.integer)):
        raise InputDomainError(f"class label must be an integer, got {label!r}")
    if not 0 <= label < n_classes:
        raise InputDomainError(f"class label {label} outside [0, {n_classes})")
    return int(label)


def label_from_species_id(species: str | int) -> int:
    """Map ``"class-183"`` or ``183`` (1-based) to the 0-based label 182."""
    if isinstance(species, str):
        text = species.strip()
        if text.lower().startswith("class-"):
            text = text[len("class-"):]
        species = int(text)
    if species < 1:
        raise InputDomainError(f"species ids are 1-based, got {species}")
    return int(species) - 1


def species_name(label: int) -> str:
    return f"class-{label + 1}"


def as_probability_vector(values: Sequence[float] | np.ndarray, *,
                          n_classes: Optional[int] = None,
                          softmax: bool = False,
                          atol: float = 1e-6) -> np.ndarray:
    """Validate and return a read-only float64 probability vector.

    With ``softmax=True`` the entries must also sum to one within ``atol``.
    """
    vec = np.array(values, dtype=np.float64).reshape(-1)
    if n_classes is not None and vec.size != n_classes:
        raise InputDomainError(
            f"probability vector has {vec.size} entries, expected {n_classes}")
    if vec.size < 1:
        raise InputDomainError("probability vector needs at least 1 class")
    if not np.all(np.isfinite(vec)):
        raise InputDomainError("probability vector contains non-finite values")
    if np.any(vec < 0.0) or np.any(vec > 1.0 + atol):
        raise InputDomainError("probability entries must lie in [0, 1]")
    if softmax and abs(vec.sum() - 1.0) > atol:
        raise InputDomainError(
            f"probabilities sum to {vec.sum():.6f}, expected 1")
    vec.setflags(write=False)
    return vec


@dataclass(frozen=True)
class PartPrediction:
    """One model's (class, probability) verdict for one part."""

    part: PartKind
    label: int
    probability: float
    recognized: bool = True

    def __post_init__(self) -> None:
        if not isinstance(self.part, PartKind):
            object.__setattr__(self, "part", PartKind(self.part))
        p = float(self.probability)
        if not (math.isfinite(p) and 0.0 <= p <= 1.0):
            raise InputDomainError(f"probability {p} outside [0, 1]")
        if not self.recognized and p != 0.0:
            raise InputDomainError("unrecognized predictions carry probability 0")
        if isinstance(self.label, bool) or int(self.label) < 0:
            raise InputDomainError(f"invalid class label {self.label!r}")
        object.__setattr__(self, "probability", p)
        object.__setattr__(self, "label", int(self.label))

    @classmethod
    def unrecognized(cls, part: PartKind) -> "PartPrediction":
        return cls(part=part, label=0, probability=0.0, recognized=False)

    @classmethod
    def from_probabilities(cls, part: PartKind,
                           probs: Optional[np.ndarray]) -> "PartPrediction":
        """Top-1 of ``probs``; ``None`` means the model recognized nothing."""
        if probs is None:
            return cls.unrecognized(part)
        label = int(np.argmax(probs))
        return cls(part=part, label=label, probability=float(probs[label]))

    def to_dict(self) -> dict[str, Any]:
        return {"part": self.part.value, "label": self.label,
                "probability": self.probability, "recognized": self.recognized}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PartPrediction":
        return cls(part=PartKind(data["part"]), label=data["label"],
                   probability=data["probability"],
                   recognized=data["recognized"])


@dataclass(frozen=True)
class Perception:
    """A (label, score, confused) verdict: a CLP, HLP or final prediction."""

    label: int
    score: float
    confused: bool

    def __post_init__(self) -> None:
        if float(self.score) < 0 or not math.isfinite(float(self.score)):
            raise InputDomainError(f"perception score must be finite and >= 0")
        object.__setattr__(self, "label", int(self.label))
        object.__setattr__(self, "score", float(self.score))
        object.__setattr__(self, "confused", bool(self.confused))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Perception":
        return cls(label=data["label"], score=data["score"],
                   confused=data["confused"])


TRACE_SCHEMA_VERSION = 1


def _rounded(values: Optional[Sequence[float]]) -> Optional[tuple[float, ...]]:
    if values is None:
        return None
    return tuple(round(float(v), 2) for v in values)


def _perception_or_none(data: Optional[dict]) -> Optional[Perception]:
    return None if data is None else Perception.from_dict(data)


@dataclass(frozen=True)
class DecisionTrace:
    """Everything both phases perceived for one image, plus the verdict.

    Matrices are stored rounded to two decimals; they exist for reading, the
    arithmetic that produced ``final_label`` ran at full precision.
    ``rule`` is one of ``"inhibit"``, ``"majority"`` or ``"fallback"``.
    ``top_scores`` maps a perception name (``context_clp``, ``hlp``,
    ``attention_clp``, ``final``) to its top-k ``(label, score)`` listing.
    """

    image_id: str
    context_clp: Perception
    hlp: Perception
    confident: bool
    signal: PhaseSignal
    final_label: int
    rule: str
    attention_clp: Optional[Perception] = None
    cm_c: Optional[tuple[float, ...]] = None
    cm_a: Optional[tuple[float, ...]] = None
    cm_f: Optional[tuple[float, ...]] = None
    final_confused: bool = False
    top_scores: dict[str, tuple[tuple[int, float], ...]] = field(
        default_factory=dict)
    attention_extractions: int = 0
    scales: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not isinstance(self.signal, PhaseSignal):
            object.__setattr__(self, "signal", PhaseSignal(self.signal))
        for name in ("cm_c", "cm_a", "cm_f"):
            object.__setattr__(self, name, _rounded(getattr(self, name)))
        tops = {k: tuple((int(lbl), round(float(s), 2)) for lbl, s in v)
                for k, v in self.top_scores.items()}
        object.__setattr__(self, "top_scores", tops)
        if self.signal is PhaseSignal.INHIBIT and (
                self.attention_clp is not None or self.cm_a is not None
                or self.cm_f is not None):
            raise InputDomainError(
                "an inhibited trace cannot carry attention-phase results")
        if self.rule not in ("inhibit", "majority", "fallback"):
            raise InputDomainError(f"unknown decision rule {self.rule!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": TRACE_SCHEMA_VERSION,
            "image_id": self.image_id,
            "context_clp": self.context_clp.to_dict(),
            "hlp": self.hlp.to_dict(),
            "confident": self.confident,
            "signal": self.signal.value,
            "attention_clp": (None if self.attention_clp is None
                              else self.attention_clp.to_dict()),
            "cm_c": None if self.cm_c is None else list(self.cm_c),
            "cm_a": None if self.cm_a is None else list(self.cm_a),
            "cm_f": None if self.cm_f is None else list(self.cm_f),
            "final_label": self.final_label,
            "final_confused": self.final_confused,
            "rule": self.rule,
            "top_scores": {k: [list(pair) for pair in v]
                           for k, v in sorted(self.top_scores.items())},
            "attention_extractions": self.attention_extractions,
            "scales": dict(sorted(self.scales.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DecisionTrace":
        version = data.get("schema_version", TRACE_SCHEMA_VERSION)
        if version != TRACE_SCHEMA_VERSION:
            raise InputDomainError(f"unsupported trace schema {version}")
        return cls(
            image_id=data["image_id"],
            context_clp=Perception.from_dict(data["context_clp"]),
            hlp=Perception.from_dict(data["hlp"]),
            confident=data["confident"],
            signal=PhaseSignal(data["signal"]),
            attention_clp=_perception_or_none(data.get("attention_clp")),
            cm_c=data.get("cm_c"),
            cm_a=data.get("cm_a"),
            cm_f=data.get("cm_f"),
            final_label=data["final_label"],
            final_confused=data.get("final_confused", False),
            rule=data["rule"],
            top_scores={k: tuple(tuple(p) for p in v)
                        for k, v in data.get("top_scores", {}).items()},
            attention_extractions=data.get("attention_extractions", 0),
            scales=data.get("scales", {}),
        )

    @classmethod
    def from_json(cls, text: str) -> "DecisionTrace":
        return cls.from_dict(json.loads(text))
