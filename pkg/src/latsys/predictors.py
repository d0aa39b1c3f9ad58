"""Probability sources for the engine.

Every predictor answers ``predict_proba(sample, part)`` with a probability
vector, or ``None`` when it cannot recognize the part. Three kinds exist:

* :class:`TablePredictor` replays probabilities stored in a CSV file, e.g.
  outputs of externally trained deep models.
* :class:`NetPredictor` runs a :class:`ToyNet` on the whole image or on one
  part crop. The whole-image variant is differentiable with respect to the
  pixels, which is what the attacks need.
* :class:`ForestPartPredictor` crops a part, extracts SIFT/HOG descriptors and
  asks a random forest.
"""

from __future__ import annotations

import abc
import csv
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from latsys.core_types import (
    InputDomainError,
    PartKind,
    PartPrediction,
    as_probability_vector,
)
from latsys.dataprep import ImageSample, crop
from latsys.features import ExtractionCounter, FeatureSet, resize_bilinear
from latsys.forest import Forest

log = logging.getLogger(__name__)

UNRECOGNIZED = "UNRECOGNIZED"


class Predictor(abc.ABC):
    n_classes: int

    @abc.abstractmethod
    def predict_proba(self, sample: ImageSample,
                      part: PartKind) -> Optional[np.ndarray]:
        """Class probabilities for ``part`` of ``sample``, or ``None``."""

    def predict(self, sample: ImageSample, part: PartKind) -> PartPrediction:
        return PartPrediction.from_probabilities(part,
                                                 self.predict_proba(sample, part))


# --------------------------------------------------------------------------
# file-backed tables

class TablePredictor(Predictor):
    def __init__(self, table: Mapping[tuple[str, PartKind], Optional[np.ndarray]],
                 n_classes: int):
        self.n_classes = n_classes
        self.table = {}
        for key, probs in table.items():
            if probs is not None:
                probs = as_probability_vector(probs, n_classes=n_classes,
                                              softmax=True)
            self.table[(key[0], PartKind(key[1]))] = probs

    def table_lookup(self, image_id: str, part: PartKind) -> PartPrediction:
        return PartPrediction.from_probabilities(
            part, self._lookup(image_id, PartKind(part)))

    def _lookup(self, image_id: str, part: PartKind) -> Optional[np.ndarray]:
        key = (image_id, part)
        if key not in self.table:
            log.info("no table entry for %s/%s; treating as unrecognized",
                     image_id, part.value)
            return None
        return self.table[key]

    def predict_proba(self, sample: ImageSample, part: PartKind):
        return self._lookup(sample.image_id, part)

    def parts(self) -> set[PartKind]:
        return {part for _, part in self.table}

    @classmethod
    def load(cls, path, parts: Optional[Sequence[PartKind]] = None
             ) -> "TablePredictor":
        """Read ``image_id,part,p_0,...,p_{n-1}`` rows; a row whose first
        probability cell reads ``UNRECOGNIZED`` marks an unrecognized part."""
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:2] != ["image_id", "part"]:
                raise InputDomainError(f"{path}: bad header {header[:2]}")
            n_classes = len(header) - 2
            table = {}
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                part = PartKind(row[1])
                if parts is not None and part not in parts:
                    continue
                if row[2] == UNRECOGNIZED:
                    table[(row[0], part)] = None
                    continue
                try:
                    probs = as_probability_vector([float(v) for v in row[2:]],
                                                  n_classes=n_classes, softmax=True)
                except InputDomainError as exc:
                    raise InputDomainError(f"{path}:{lineno}: {exc}") from None
                table[(row[0], part)] = probs
        return cls(table, n_classes)

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image_id", "part"] + [f"p_{i}" for i in range(self.n_classes)])
            for (image_id, part), probs in self.table.items():
                if probs is None:
                    w.writerow([image_id, part.value, UNRECOGNIZED])
                else:
                    w.writerow([image_id, part.value] + [repr(float(p)) for p in probs])


# --------------------------------------------------------------------------
# ToyNet

class TrainingDivergedError(RuntimeError):
    pass


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ToyNet:
    """``softmax(W2 relu(W1 x + b1) + b2)``; with no hidden layer
    (``W1 is None``) it is plain softmax regression ``softmax(W2 x + b2)``."""

    W1: Optional[np.ndarray]
    b1: Optional[np.ndarray]
    W2: np.ndarray
    b2: np.ndarray
    seed: int = 0
    manifest: dict = field(default_factory=dict)

    @classmethod
    def init(cls, d: int, h: int, n: int, seed: int = 0) -> "ToyNet":
        rng = np.random.default_rng(seed)
        if h == 0:
            return cls(None, None, rng.normal(0, np.sqrt(1 / d), (d, n)),
                       np.zeros(n), seed)
        return cls(rng.normal(0, np.sqrt(2 / d), (d, h)), np.zeros(h),
                   rng.normal(0, np.sqrt(2 / h), (h, n)), np.zeros(n), seed)

    @property
    def sizes(self) -> tuple[int, int, int]:
        if self.W1 is None:
            return self.W2.shape[0], 0, self.W2.shape[1]
        return self.W1.shape[0], self.W1.shape[1], self.W2.shape[1]

    @property
    def n_classes(self) -> int:
        return self.W2.shape[1]

    def params(self) -> list[np.ndarray]:
        if self.W1 is None:
            return [self.W2, self.b2]
        return [self.W1, self.b1, self.W2, self.b2]

    def copy(self) -> "ToyNet":
        return ToyNet(*(None if a is None else a.copy()
                        for a in (self.W1, self.b1, self.W2, self.b2)),
                      seed=self.seed, manifest=dict(self.manifest))

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.sizes[0]:
            raise InputDomainError(
                f"input has {X.shape[-1]} features, net expects {self.sizes[0]}")
        return X

    def _hidden(self, X):
        if self.W1 is None:
            return X, None
        z1 = X @ self.W1 + self.b1
        return np.maximum(z1, 0.0), z1

    def logits(self, X: np.ndarray) -> np.ndarray:
        a1, _ = self._hidden(self._check(X))
        return a1 @ self.W2 + self.b2

    def forward(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.logits(X))

    def loss(self, x: np.ndarray, label: int) -> float:
        """Cross-entropy of a single input."""
        z = self.logits(x)
        z = z - z.max()
        return float(np.log(np.exp(z).sum()) - z[label])

    def input_gradient(self, x: np.ndarray, label: int) -> np.ndarray:
        """d(cross-entropy)/dx by backpropagation."""
        x = self._check(x)
        a1, z1 = self._hidden(x)
        dz2 = softmax(a1 @ self.W2 + self.b2)
        dz2[label] -= 1.0
        da1 = self.W2 @ dz2
        if self.W1 is None:
            return da1
        dz1 = da1 * (z1 > 0)
        return self.W1 @ dz1

    def batch_gradients(self, X: np.ndarray, y: np.ndarray,
                        weight_decay: float = 0.0):
        """Mean cross-entropy over the batch and its parameter gradients."""
        X = self._check(X)
        m = X.shape[0]
        a1, z1 = self._hidden(X)
        probs = softmax(a1 @ self.W2 + self.b2)
        loss = float(-np.mean(np.log(np.maximum(probs[np.arange(m), y], 1e-300))))
        dz2 = probs
        dz2[np.arange(m), y] -= 1.0
        dz2 /= m
        gW2 = a1.T @ dz2 + weight_decay * self.W2
        gb2 = dz2.sum(axis=0)
        if self.W1 is None:
            return loss, [gW2, gb2]
        dz1 = (dz2 @ self.W2.T) * (z1 > 0)
        gW1 = X.T @ dz1 + weight_decay * self.W1
        gb1 = dz1.sum(axis=0)
        return loss, [gW1, gb1, gW2, gb2]

    def accuracy(self, X, y) -> float:
        return float(np.mean(np.argmax(self.logits(X), axis=1) == np.asarray(y)))


def toynet_forward(net: ToyNet, x) -> np.ndarray:
    return net.forward(np.asarray(x, dtype=np.float64))


def toynet_input_gradient(net: ToyNet, x, true_label: int) -> np.ndarray:
    return net.input_gradient(np.asarray(x, dtype=np.float64), true_label)


def toynet_train(net: ToyNet, X, y, *, epochs: int, lr: float, seed: int = 0,
                 batch_size: int = 32, weight_decay: float = 0.0,
                 noise: float = 0.0) -> ToyNet:
    """Mini-batch gradient descent on a copy of ``net``.

    ``noise`` adds Gaussian input noise to every batch (a cheap smoothness
    prior); it is drawn from the same seeded generator as the batch order.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    net = net.copy()
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(y), batch_size):
            idx = order[start:start + batch_size]
            xb = X[idx]
            if noise > 0:
                xb = xb + rng.normal(0.0, noise, xb.shape)
            loss, grads = net.batch_gradients(xb, y[idx], weight_decay)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became {loss} at epoch {epoch}, batch {start // batch_size}"
                    f" (lr={lr}, last epoch losses={history[-3:]})")
            for p, g in zip(net.params(), grads):
                p -= lr * g
            total += loss * len(idx)
        history.append(total / len(y))
    net.manifest = {"epochs": epochs, "lr": lr, "seed": seed,
                    "batch_size": batch_size, "weight_decay": weight_decay,
                    "noise": noise, "final_loss": history[-1] if history else None}
    return net


_CHECKPOINT_MAGIC = b"LATSYS-TOYNET\n"
CHECKPOINT_VERSION = 1


def save_toynet(net: ToyNet, path) -> None:
    """Magic, 4-byte header length, JSON header, raw little-endian float64."""
    arrays = net.params()
    header = {"version": CHECKPOINT_VERSION, "sizes": list(net.sizes),
              "seed": net.seed, "manifest": net.manifest,
              "shapes": [list(a.shape) for a in arrays]}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_toynet(path) -> ToyNet:
    data = Path(path).read_bytes()
    if not data.startswith(_CHECKPOINT_MAGIC):
        raise InputDomainError(f"{path} is not a ToyNet checkpoint")
    pos = len(_CHECKPOINT_MAGIC)
    (size,) = struct.unpack_from("<I", data, pos)
    pos += 4
    header = json.loads(data[pos:pos + size])
    pos += size
    if header["version"] != CHECKPOINT_VERSION:
        raise InputDomainError(f"unsupported checkpoint version {header['version']}")
    arrays = []
    for shape in header["shapes"]:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(data, "<f8", count, pos).reshape(shape).copy())
        pos += 8 * count
    if len(arrays) == 2:
        return ToyNet(None, None, *arrays, seed=header["seed"],
                      manifest=header["manifest"])
    return ToyNet(*arrays, seed=header["seed"], manifest=header["manifest"])


# --------------------------------------------------------------------------
# image-level adapters

PIXEL_SCALE = 1.0 / 255.0


class NetPredictor(Predictor):
    """A ToyNet over the whole image (``part`` is WHOLE_IMAGE) or one crop.

    Inputs are resized to ``input_shape`` and multiplied by ``scale`` before
    reaching the net. Whole-image use needs the image already at
    ``input_shape`` so the pixel gradient is exact.
    """

    def __init__(self, net: ToyNet, input_shape: tuple[int, int],
                 part: PartKind = PartKind.WHOLE_IMAGE, scale: float = PIXEL_SCALE):
        if input_shape[0] * input_shape[1] != net.sizes[0]:
            raise InputDomainError("input_shape does not match the net input size")
        self.net = net
        self.input_shape = tuple(input_shape)
        self.part = part
        self.scale = scale
        self.n_classes = net.n_classes

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.shape != self.input_shape:
            pixels = resize_bilinear(pixels, *self.input_shape)
        return pixels.reshape(-1) * self.scale

    def region(self, sample: ImageSample, part: PartKind) -> Optional[np.ndarray]:
        if part is PartKind.WHOLE_IMAGE:
            return np.asarray(sample.pixels, dtype=np.float64)
        box = sample.boxes.get(part)
        return None if box is None else crop(sample.pixels, box)

    def predict_proba(self, sample: ImageSample, part: PartKind):
        pixels = self.region(sample, part)
        if pixels is None:
            return None
        return self.net.forward(self.encode(pixels))

    # differentiable model surface used by the attacks (whole image only)

    def _check_image(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.shape != self.input_shape:
            raise InputDomainError(
                f"attacks need images of shape {self.input_shape}, got {image.shape}")
        return image

    def probabilities(self, image: np.ndarray) -> np.ndarray:
        return self.net.forward(self.encode(self._check_image(image)))

    def loss(self, image: np.ndarray, label: int) -> float:
        return self.net.loss(self.encode(self._check_image(image)), label)

    def loss_gradient(self, image: np.ndarray, label: int) -> np.ndarray:
        image = self._check_image(image)
        grad = self.net.input_gradient(self.encode(image), label)
        return (grad * self.scale).reshape(image.shape)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in self.net.params():
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def train_net_predictor(images: np.ndarray, labels: np.ndarray, n_classes: int, *,
                        hidden: int, epochs: int, lr: float, seed: int,
                        input_shape: Optional[tuple[int, int]] = None,
                        part: PartKind = PartKind.WHOLE_IMAGE,
                        boxes: Optional[Sequence[Mapping[PartKind, object]]] = None,
                        batch_size: int = 32, weight_decay: float = 0.0,
                        noise: float = 0.0) -> NetPredictor:
    """Fit a ToyNet on whole images, or on ``part`` crops when boxes are given."""
    if part is PartKind.WHOLE_IMAGE:
        shape = input_shape or images.shape[1:]
    elif input_shape is None:
        raise InputDomainError("part nets need an explicit input_shape")
    else:
        shape = input_shape
    d = int(shape[0] * shape[1])
    net = ToyNet.init(d, hidden, n_classes, seed)
    proto = NetPredictor(net, shape, part)
    rows, ys = [], []
    for i, (img, label) in enumerate(zip(images, labels)):
        if part is PartKind.WHOLE_IMAGE:
            region = img
        else:
            box = boxes[i].get(part)
            region = None if box is None else crop(img, box)
        if region is None:
            continue
        rows.append(proto.encode(region))
        ys.append(label)
    net = toynet_train(net, np.array(rows), np.array(ys), epochs=epochs, lr=lr,
                       seed=seed, batch_size=batch_size,
                       weight_decay=weight_decay, noise=noise)
    return NetPredictor(net, shape, part)


class ForestPartPredictor(Predictor):
    """Crop, describe with SIFT/HOG, classify with random forest(s).

    With a concatenating feature set there is one forest over all variants;
    otherwise one forest per variant and their probabilities are averaged.
    Each crop that gets described bumps ``counter``.
    """

    def __init__(self, forests: Sequence[Forest], features: FeatureSet,
                 counter: Optional[ExtractionCounter] = None):
        self.forests = list(forests)
        self.features = features
        self.counter = counter if counter is not None else ExtractionCounter()
        self.n_classes = self.forests[0].n_classes
        n_variants = len(features.sift) + len(features.hog)
        expected = 1 if features.concatenate else n_variants
        if len(self.forests) != expected:
            raise InputDomainError(
                f"expected {expected} forest(s) for this feature set, "
                f"got {len(self.forests)}")

    def describe(self, region: np.ndarray) -> list[np.ndarray]:
        self.counter.add(1)
        if self.features.concatenate:
            return [self.features.extract(region)]
        return [fv.values for fv in self.features.extract_variants(region)]

    def predict_proba(self, sample: ImageSample, part: PartKind):
        box = sample.boxes.get(part)
        region = None if box is None else crop(sample.pixels, box)
        if region is None:
            return None
        rows = self.describe(region)
        probs = [f.predict_proba(r[None, :])[0] for f, r in zip(self.forests, rows)]
        return np.mean(probs, axis=0)
