"""Part boxes from keypoints, part crops, and the synthetic multi-part dataset."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np

from latsys.core_types import InputDomainError, PartKind

KEYPOINT_NAMES = (
    "back", "beak", "belly", "breast", "crown", "forehead", "left eye",
    "left leg", "left wing", "nape", "right eye", "right leg", "right wing",
    "tail", "throat",
)

# keypoint name -> part kind; eyes and wings are merged, legs are dropped
_KEYPOINT_PART = {
    "back": PartKind.BACK, "beak": PartKind.BEAK, "belly": PartKind.BELLY,
    "breast": PartKind.BREAST, "crown": PartKind.CROWN,
    "forehead": PartKind.FOREHEAD, "nape": PartKind.NAPE,
    "tail": PartKind.TAIL, "throat": PartKind.THROAT,
}
_PAIRED = {PartKind.EYE: ("left eye", "right eye"),
           PartKind.WING: ("left wing", "right wing")}
_FACE_POINTS = ("left eye", "right eye", "beak", "crown")


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    visible: bool


@dataclass(frozen=True)
class KeypointAnnotation:
    image_id: str
    keypoints: Mapping[str, Keypoint]

    def visible(self) -> dict[str, Keypoint]:
        return {k: v for k, v in self.keypoints.items() if v.visible}


@dataclass(frozen=True)
class PartBox:
    part: PartKind
    x0: float
    y0: float
    x1: float
    y1: float
    source: str = "ground-truth-derived"

    def __post_init__(self) -> None:
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise InputDomainError(f"degenerate box {self}")
        if self.source not in ("ground-truth-derived", "predicted", "synthetic"):
            raise InputDomainError(f"unknown box source {self.source!r}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    def shifted(self, dx: float, dy: float) -> "PartBox":
        return PartBox(self.part, self.x0 + dx, self.y0 + dy, self.x1 + dx,
                       self.y1 + dy, self.source)

    def clipped(self, width: int, height: int) -> Optional["PartBox"]:
        x0, x1 = max(self.x0, 0.0), min(self.x1, float(width))
        y0, y1 = max(self.y0, 0.0), min(self.y1, float(height))
        if x0 >= x1 or y0 >= y1:
            return None
        return PartBox(self.part, x0, y0, x1, y1, self.source)


@dataclass(frozen=True)
class ImageSample:
    """One image as the engine sees it: pixels plus its part boxes."""

    image_id: str
    pixels: np.ndarray
    boxes: Mapping[PartKind, PartBox] = field(default_factory=dict)
    label: Optional[int] = None


DEFAULT_BOX_RATIO = 0.25
FACE_PAD = 0.2


def _square(part: PartKind, cx: float, cy: float, side: float) -> PartBox:
    half = side / 2
    return PartBox(part, cx - half, cy - half, cx + half, cy + half)


def boxes_from_keypoints(annotation: KeypointAnnotation, width: int, height: int,
                         ratios: Optional[Mapping[PartKind, float]] = None,
                         clip: bool = True) -> dict[PartKind, PartBox]:
    """Square part boxes centred on visible keypoints.

    Box side is ``ratio * extent`` where extent is the largest distance between
    two visible keypoints. The face box is the hull of eyes, beak and crown,
    padded by 20% of its size on each side. With fewer than two visible
    keypoints the extent is undefined and no boxes are produced.
    """
    ratios = dict(ratios or {})
    vis = annotation.visible()
    if len(vis) < 2:
        return {}
    pts = np.array([(k.x, k.y) for k in vis.values()])
    extent = max(math.dist(a, b) for a, b in itertools.combinations(pts, 2))
    if extent <= 0:
        return {}

    centres: dict[PartKind, Keypoint] = {}
    for name, part in _KEYPOINT_PART.items():
        if name in vis:
            centres[part] = vis[name]
    for part, (left, right) in _PAIRED.items():
        for name in (left, right):  # left wins when both are visible
            if name in vis:
                centres[part] = vis[name]
                break

    boxes = {}
    for part, kp in centres.items():
        side = ratios.get(part, DEFAULT_BOX_RATIO) * extent
        boxes[part] = _square(part, kp.x, kp.y, side)

    face_pts = np.array([(vis[n].x, vis[n].y) for n in _FACE_POINTS if n in vis])
    if len(face_pts):
        x0, y0 = face_pts.min(axis=0)
        x1, y1 = face_pts.max(axis=0)
        fallback = ratios.get(PartKind.FACE, DEFAULT_BOX_RATIO) * extent
        w = x1 - x0 if x1 > x0 else fallback
        h = y1 - y0 if y1 > y0 else fallback
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        w, h = w * (1 + 2 * FACE_PAD), h * (1 + 2 * FACE_PAD)
        boxes[PartKind.FACE] = PartBox(PartKind.FACE, cx - w / 2, cy - h / 2,
                                       cx + w / 2, cy + h / 2)

    if clip:
        clipped = {p: b.clipped(width, height) for p, b in boxes.items()}
        boxes = {p: b for p, b in clipped.items() if b is not None}
    return boxes


def crop(img: np.ndarray, box: PartBox) -> Optional[np.ndarray]:
    """Pixels covered by ``box`` (clipped to the image); ``None`` when the
    intersection is one pixel wide or less."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    x0 = max(int(math.floor(box.x0)), 0)
    y0 = max(int(math.floor(box.y0)), 0)
    x1 = min(int(math.ceil(box.x1)), w)
    y1 = min(int(math.ceil(box.y1)), h)
    if x1 - x0 <= 1 or y1 - y0 <= 1:
        return None
    return img[y0:y1, x0:x1].copy()


def read_cub_part_locs(path, image_names: Optional[Mapping[str, str]] = None
                       ) -> dict[str, KeypointAnnotation]:
    """Read a CUB-style ``part_locs.txt``: ``image_id part_id x y visible``.

    Part ids are 1-based indices into :data:`KEYPOINT_NAMES`.
    """
    points: dict[str, dict[str, Keypoint]] = {}
    with open(path) as fh:
        for line in fh:
            fields = line.split()
            if not fields:
                continue
            image_id, part_id, x, y, visible = fields[:5]
            image_id = (image_names or {}).get(image_id, image_id)
            name = KEYPOINT_NAMES[int(part_id) - 1]
            points.setdefault(image_id, {})[name] = Keypoint(
                float(x), float(y), bool(int(float(visible))))
    return {i: KeypointAnnotation(i, kps) for i, kps in points.items()}


# --------------------------------------------------------------------------
# synthetic dataset

SYNTHETIC_PARTS = (PartKind.CROWN, PartKind.WING, PartKind.BELLY, PartKind.TAIL)
# quadrant (row, col) holding each part in the 2x2 layout
_QUADRANT = {PartKind.CROWN: (0, 0), PartKind.WING: (0, 1),
             PartKind.BELLY: (1, 0), PartKind.TAIL: (1, 1)}


def _pattern(kind: int, size: int) -> np.ndarray:
    yy, xx = np.indices((size, size))
    c = (size - 1) / 2
    patterns = [
        np.ones((size, size), bool),                                   # block
        (np.minimum.reduce([yy, xx, size - 1 - yy, size - 1 - xx]) < 2),  # ring
        (np.abs(yy - c) < 1.5) | (np.abs(xx - c) < 1.5),               # plus
        (np.abs(yy - xx) < 1.5) | (np.abs(yy + xx - (size - 1)) < 1.5),  # cross
        (yy // 2) % 2 == 0,                                            # h-stripes
        (xx // 2) % 2 == 0,                                            # v-stripes
        ((yy // 2 + xx // 2) % 2) == 0,                                # checker
        (yy - c) ** 2 + (xx - c) ** 2 <= ((size - 2) / 2) ** 2,        # disc
    ]
    return patterns[kind % len(patterns)]


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 8
    image_size: int = 32
    part_size: int = 10
    background: float = 60.0
    foreground: float = 200.0
    noise: float = 12.0
    box_margin: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_classes < 1:
            raise InputDomainError("need at least 1 class")
        if 2 * self.part_size > self.image_size:
            raise InputDomainError("parts must fit in the 2x2 layout")

    def pattern_index(self, label: int, part_slot: int) -> int:
        # each part alone separates the classes; classes share patterns
        # across different parts
        return (label + 3 * part_slot) % self.n_classes


@dataclass
class Dataset:
    ids: list[str]
    images: np.ndarray          # (N, H, W) on the 0-255 scale
    labels: np.ndarray          # (N,) int
    boxes: list[dict[PartKind, PartBox]]
    n_classes: int
    masks: Optional[list[dict[PartKind, np.ndarray]]] = None

    def __len__(self) -> int:
        return len(self.ids)

    def sample(self, i: int, pixels: Optional[np.ndarray] = None) -> ImageSample:
        return ImageSample(self.ids[i],
                           self.images[i] if pixels is None else pixels,
                           self.boxes[i], int(self.labels[i]))

    def subset(self, index: Iterable[int]) -> "Dataset":
        index = list(index)
        return Dataset([self.ids[i] for i in index], self.images[index],
                       self.labels[index], [self.boxes[i] for i in index],
                       self.n_classes,
                       None if self.masks is None else [self.masks[i] for i in index])


def generate_synthetic(spec: SyntheticSpec, n_images: int) -> Dataset:
    """Images whose four parts each carry a class-specific pattern at a
    jittered position. Boxes are exact by construction."""
    rng = np.random.default_rng(spec.seed)
    labels = np.arange(n_images) % spec.n_classes
    labels = labels[rng.permutation(n_images)]
    S, P = spec.image_size, spec.part_size
    half = S // 2
    images = np.empty((n_images, S, S))
    boxes, masks = [], []
    for i, label in enumerate(labels):
        img = np.full((S, S), spec.background)
        img_boxes, img_masks = {}, {}
        for slot, part in enumerate(SYNTHETIC_PARTS):
            qy, qx = _QUADRANT[part]
            oy = qy * half + int(rng.integers(0, half - P + 1))
            ox = qx * half + int(rng.integers(0, half - P + 1))
            shape = _pattern(spec.pattern_index(int(label), slot), P)
            img[oy:oy + P, ox:ox + P][shape] = spec.foreground
            m = spec.box_margin
            img_boxes[part] = PartBox(part, max(ox - m, 0), max(oy - m, 0),
                                      min(ox + P + m, S), min(oy + P + m, S),
                                      "synthetic")
            full = np.zeros((S, S), bool)
            full[oy:oy + P, ox:ox + P] = shape
            img_masks[part] = full
        if spec.noise > 0:
            img = img + rng.normal(0.0, spec.noise, img.shape)
        images[i] = np.clip(np.rint(img), 0, 255)
        boxes.append(img_boxes)
        masks.append(img_masks)
    ids = [f"syn-{spec.seed}-{i:05d}" for i in range(n_images)]
    return Dataset(ids, images, labels.astype(np.int64), boxes, spec.n_classes,
                   masks)


def write_dataset(ds: Dataset, out_dir) -> Path:
    """PNG images plus ``labels.csv`` and ``boxes.csv``."""
    from PIL import Image

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for image_id, img in zip(ds.ids, ds.images):
        Image.fromarray(img.astype(np.uint8), mode="L").save(
            out / "images" / f"{image_id}.png")
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "label"])
        w.writerows(zip(ds.ids, (int(v) for v in ds.labels)))
    with open(out / "boxes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "part", "x0", "y0", "x1", "y1", "source"])
        for image_id, img_boxes in zip(ds.ids, ds.boxes):
            for part, b in img_boxes.items():
                w.writerow([image_id, part.value, b.x0, b.y0, b.x1, b.y1, b.source])
    return out


def read_dataset(in_dir, n_classes: Optional[int] = None) -> Dataset:
    from PIL import Image

    root = Path(in_dir)
    with open(root / "labels.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    ids = [r["image_id"] for r in rows]
    labels = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    boxes: dict[str, dict[PartKind, PartBox]] = {i: {} for i in ids}
    with open(root / "boxes.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            part = PartKind(r["part"])
            boxes[r["image_id"]][part] = PartBox(
                part, float(r["x0"]), float(r["y0"]), float(r["x1"]),
                float(r["y1"]), r["source"])
    images = np.stack([np.asarray(Image.open(root / "images" / f"{i}.png"),
                                  dtype=np.float64) for i in ids])
    return Dataset(ids, images, labels, [boxes[i] for i in ids],
                   int(n_classes or labels.max() + 1))
