"""Gradient-sign attacks (one-step FGSM and the iterative variant).

Images live on the 0-255 scale and epsilon is measured in the same units.
A model is attackable when it exposes ``loss_gradient(image, label)``; the
gradient is taken of the cross-entropy w.r.t. the pixels.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional, Protocol, Sequence, runtime_checkable

import numpy as np

from latsys.core_types import InputDomainError

PIXEL_MIN, PIXEL_MAX = 0.0, 255.0


class UnsupportedModelError(TypeError):
    """The model cannot supply input gradients."""


class SplitLeakageError(RuntimeError):
    """A test image id also appears in the training split."""


@runtime_checkable
class DifferentiableModel(Protocol):
    def loss(self, image: np.ndarray, label: int) -> float: ...

    def loss_gradient(self, image: np.ndarray, label: int) -> np.ndarray: ...


@dataclass(frozen=True)
class AttackParams:
    kind: str  # "fgsm" or "iterative"
    epsilon: float
    alpha: Optional[float] = None
    iterations: Optional[int] = None
    name: str = ""

    def __post_init__(self) -> None:
        if self.kind not in ("fgsm", "iterative"):
            raise InputDomainError(f"unknown attack kind {self.kind!r}")
        if not self.epsilon > 0:
            raise InputDomainError("epsilon must be > 0")
        if self.kind == "iterative":
            if self.alpha is None or not self.alpha > 0:
                raise InputDomainError("iterative attacks need alpha > 0")
            if self.iterations is None or self.iterations < 1:
                raise InputDomainError("iterative attacks need iterations >= 1")

    @property
    def budget(self) -> float:
        """Largest L-inf perturbation the attack can produce."""
        if self.kind == "fgsm":
            return float(self.epsilon)
        return float(min(self.epsilon, self.alpha * self.iterations))


# Settings used in the reported experiments.
FGSM_M = AttackParams("fgsm", 50, name="FGSM-M")
FGSM_S = AttackParams("fgsm", 150, name="FGSM-S")
ITR_M = AttackParams("iterative", 18, alpha=1, iterations=10, name="Itr-M")
ITR_S = AttackParams("iterative", 50, alpha=1, iterations=10, name="Itr-S")
PRESETS = {p.name: p for p in (FGSM_M, FGSM_S, ITR_M, ITR_S)}


def _gradient(model, x: np.ndarray, y: int) -> np.ndarray:
    if not isinstance(model, DifferentiableModel):
        raise UnsupportedModelError(
            f"{type(model).__name__} does not expose input gradients")
    grad = np.asarray(model.loss_gradient(x, y), dtype=np.float64)
    if grad.shape != x.shape:
        raise UnsupportedModelError("gradient shape does not match the input")
    return grad


def fgsm(x: np.ndarray, y: int, model, epsilon: float) -> np.ndarray:
    """``clip(x + epsilon * sign(grad), 0, 255)``; sign(0) is 0."""
    if not epsilon > 0:
        raise InputDomainError("epsilon must be > 0")
    x = np.asarray(x, dtype=np.float64)
    step = epsilon * np.sign(_gradient(model, x, y))
    return np.clip(x + step, PIXEL_MIN, PIXEL_MAX)


def iterative_attack(x: np.ndarray, y: int, model, epsilon: float, alpha: float,
                     iterations: int) -> np.ndarray:
    """Repeated ``alpha`` sign steps, each projected back into the epsilon
    L-inf ball around ``x`` and the valid pixel range."""
    AttackParams("iterative", epsilon, alpha, iterations)
    x = np.asarray(x, dtype=np.float64)
    lo = np.maximum(x - epsilon, PIXEL_MIN)
    hi = np.minimum(x + epsilon, PIXEL_MAX)
    adv = x.copy()
    for _ in range(iterations):
        adv = adv + alpha * np.sign(_gradient(model, adv, y))
        adv = np.clip(np.clip(adv, PIXEL_MIN, PIXEL_MAX), lo, hi)
    return adv


def attack(x: np.ndarray, y: int, model, params: AttackParams) -> np.ndarray:
    if params.kind == "fgsm":
        return fgsm(x, y, model, params.epsilon)
    return iterative_attack(x, y, model, params.epsilon, params.alpha,
                            params.iterations)


@dataclass
class AttackManifest:
    params: dict
    seed: int
    model_checksum: str
    image_ids: list[str]
    linf: list[float]
    loss_before: list[float]
    loss_after: list[float]
    image_checksums: list[str]

    @property
    def loss_increased(self) -> list[bool]:
        return [a >= b for a, b in zip(self.loss_after, self.loss_before)]

    def to_json(self) -> str:
        data = asdict(self)
        data["loss_increased"] = self.loss_increased
        return json.dumps(data, indent=2, sort_keys=True)


def image_checksum(img: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(img, dtype="<f8").tobytes()).hexdigest()[:16]


def attack_dataset(images: np.ndarray, labels: Sequence[int], ids: Sequence[str],
                   model, params: AttackParams, seed: int = 0,
                   train_ids: Optional[Sequence[str]] = None,
                   model_checksum: str = "") -> tuple[np.ndarray, AttackManifest]:
    """Replace every test image by its adversarial version.

    The attacks are deterministic; ``seed`` is recorded for provenance.
    """
    if train_ids is not None:
        shared = set(ids) & set(train_ids)
        if shared:
            raise SplitLeakageError(
                f"{len(shared)} test ids also in training split, e.g. {sorted(shared)[:3]}")
    images = np.asarray(images, dtype=np.float64)
    out = np.empty_like(images)
    linf, before, after, sums = [], [], [], []
    for i, (img, y) in enumerate(zip(images, labels)):
        adv = attack(img, int(y), model, params)
        out[i] = adv
        linf.append(float(np.max(np.abs(adv - img))) if img.size else 0.0)
        before.append(float(model.loss(img, int(y))))
        after.append(float(model.loss(adv, int(y))))
        sums.append(image_checksum(adv))
    manifest = AttackManifest(params=asdict(params), seed=seed,
                              model_checksum=model_checksum, image_ids=list(ids),
                              linf=linf, loss_before=before, loss_after=after,
                              image_checksums=sums)
    return out, manifest


def write_adversarial_split(out_dir, images: np.ndarray, ids: Sequence[str],
                            manifest: AttackManifest) -> Path:
    """PNG files plus ``manifest.json``. Integer-valued images round-trip."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for image_id, img in zip(ids, images):
        Image.fromarray(np.clip(np.rint(img), 0, 255).astype(np.uint8), mode="L").save(
            out / f"{image_id}.png")
    (out / "manifest.json").write_text(manifest.to_json())
    return out
