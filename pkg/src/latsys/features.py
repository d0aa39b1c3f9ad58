"""Dense SIFT and HOG descriptors for part crops.

Both descriptors take a 2-D float array (a grayscale image). Gain does not
matter: every histogram is L2-normalized before it is emitted.
"""

from __future__ import annotations

import functools
import json
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from latsys.core_types import InputDomainError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class SiftParams:
    patch_size: int = 64
    max_bin_value: float = 0.2
    orientation_bins: int = 8
    spatial_bins: int = 2

    @property
    def patch_dim(self) -> int:
        return self.spatial_bins ** 2 * self.orientation_bins


@dataclass(frozen=True)
class HogParams:
    resize_to: int = 64
    cell_size: int = 32
    orientation_bins: int = 9
    block_cells: int = 2
    clip: float = 0.2


SIFT_VARIANTS = (SiftParams(64), SiftParams(128), SiftParams(256))
HOG_VARIANTS = (HogParams(64, 32), HogParams(126, 64), HogParams(256, 128))


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    provenance: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(arr)):
            raise InputDomainError("feature vector contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return self.values.size


class ExtractionCounter:
    """Thread-safe tally of descriptor extractions, for instrumentation."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._count = 0

    def add(self, n: int = 1) -> None:
        with self._lock:
            self._count += n

    @property
    def count(self) -> int:
        with self._lock:
            return self._count

    def reset(self) -> None:
        with self._lock:
            self._count = 0


def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img[..., :3] @ np.array(LUMA_WEIGHTS)
    if img.ndim != 2:
        raise InputDomainError(f"expected a 2-D or RGB image, got shape {img.shape}")
    return img


def check_image(img: np.ndarray) -> np.ndarray:
    img = to_gray(img)
    if min(img.shape) < 2:
        raise InputDomainError(f"image must be at least 2x2, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise InputDomainError("image contains non-finite pixels")
    return img


@functools.lru_cache(maxsize=64)
def _interp_matrix(src: int, dst: int) -> np.ndarray:
    # row i holds the linear weights of output sample i over the source axis;
    # sample positions use pixel-centre alignment, clamped at the border
    pos = np.clip((np.arange(dst) + 0.5) * (src / dst) - 0.5, 0, src - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    m = np.zeros((dst, src))
    np.add.at(m, (np.arange(dst), lo), 1 - frac)
    np.add.at(m, (np.arange(dst), hi), frac)
    m.setflags(write=False)
    return m


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize to ``height x width``; aspect ratio is not kept."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if (h, w) == (height, width):
        return img.copy()
    return _interp_matrix(h, height) @ img @ _interp_matrix(w, width).T


def gradients(img: np.ndarray, *, signed: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel gradient magnitude and orientation.

    Central differences inside, one-sided differences on the border.
    Orientation lies in [0, 2*pi) when ``signed`` else in [0, pi).
    """
    img = check_image(img)
    gy, gx = np.gradient(img)
    magnitude = np.hypot(gx, gy)
    period = 2 * np.pi if signed else np.pi
    orientation = np.mod(np.arctan2(gy, gx), period)
    # mod can return exactly `period` for tiny negative angles
    orientation[orientation >= period] = 0.0
    return magnitude, orientation


def _l2(v: np.ndarray, axis=-1) -> np.ndarray:
    norm = np.sqrt(np.sum(v * v, axis=axis, keepdims=True))
    return np.divide(v, norm, out=np.zeros_like(v), where=norm > 0)


def _clamp_renormalize(v: np.ndarray, limit: float) -> np.ndarray:
    v = np.minimum(_l2(v), limit)
    # renormalizing can lift a bin back over the limit when few bins are
    # active; the last clamp keeps the bound
    return np.minimum(_l2(v), limit)


def _orientation_split(orientation: np.ndarray, n_bins: int, period: float,
                       offset: float = 0.0):
    pos = orientation * (n_bins / period) - offset
    lo = np.floor(pos)
    frac = pos - lo
    lo = lo.astype(np.int64) % n_bins
    return lo, (lo + 1) % n_bins, frac


def sift_grid_shape(height: int, width: int, patch: int) -> tuple[int, int]:
    return max(1, round(height / patch)), max(1, round(width / patch))


def sift_descriptor(img: np.ndarray, p: SiftParams = SiftParams()) -> np.ndarray:
    """Dense SIFT on a fixed patch grid.

    The image is resized so a whole number of ``patch_size`` patches tiles it
    (small crops are scaled up to a single patch). Each patch yields
    ``spatial_bins**2 * orientation_bins`` values; patches are concatenated
    in row-major order.
    """
    img = check_image(img)
    ny, nx = sift_grid_shape(*img.shape, p.patch_size)
    mag, ori = _resized_gradients(img, ny * p.patch_size, nx * p.patch_size, {})
    return _sift_from_gradients(mag, ori, ny, nx, p)


def _resized_gradients(img: np.ndarray, height: int, width: int, cache: dict):
    # variants that resize to the same shape share one gradient field
    key = (height, width)
    if key not in cache:
        resized = resize_bilinear(img, height, width)
        cache[key] = gradients(resized, signed=True)
    return cache[key]


def _sift_from_gradients(mag: np.ndarray, ori: np.ndarray, ny: int, nx: int,
                         p: SiftParams) -> np.ndarray:
    P = p.patch_size
    S, B = p.spatial_bins, p.orientation_bins
    # continuous spatial-bin coordinate of each pixel centre inside a patch;
    # a pixel feeds the two nearest bins along each axis (weight 0 when the
    # neighbour falls outside the patch)
    coord = (np.arange(P) + 0.5) / (P / S) - 0.5
    c_lo = np.floor(coord).astype(np.int64)
    c_frac = coord - c_lo

    def axis_taps(n_patches):
        # (pixels x spatial bins) pooling weights along one axis
        pos = np.arange(n_patches * P)
        patch, off = pos // P, pos % P
        taps = np.zeros((pos.size, n_patches * S))
        for shift, w in ((0, 1 - c_frac), (1, c_frac)):
            idx = c_lo[off] + shift
            inside = (idx >= 0) & (idx < S)
            taps[pos[inside], (patch * S + idx)[inside]] += w[off][inside]
        return taps

    o_lo, o_hi, o_frac = _orientation_split(ori, B, 2 * np.pi)
    H, W = mag.shape
    # soft orientation votes per pixel, laid out (row, col, bin)
    base = np.arange(H * W).reshape(H, W) * B
    votes = (np.bincount((base + o_lo).ravel(), (mag * (1 - o_frac)).ravel(),
                         minlength=H * W * B)
             + np.bincount((base + o_hi).ravel(), (mag * o_frac).ravel(),
                           minlength=H * W * B))
    pooled = axis_taps(ny).T @ votes.reshape(H, W * B)
    hist = np.einsum("gxb,xh->ghb", pooled.reshape(-1, W, B), axis_taps(nx))
    # (ny, sy, nx, sx, b) -> one row per patch, bins ordered (sy, sx, b)
    hist = hist.reshape(ny, S, nx, S, B).transpose(0, 2, 1, 3, 4)
    hist = hist.reshape(ny * nx, S * S * B)
    hist = _clamp_renormalize(hist, p.max_bin_value)
    return hist.reshape(-1)


def _hog_cells(mag: np.ndarray, ori: np.ndarray, p: HogParams) -> np.ndarray:
    # fold signed orientation onto [0, pi)
    ori = np.where(ori >= np.pi, ori - np.pi, ori)
    size = mag.shape[0]
    cell = min(p.cell_size, size)
    n = size // cell
    nb = p.orientation_bins
    # bins are centred at (b + 0.5) * width, hence the half-bin offset
    lo, hi, frac = _orientation_split(ori, nb, np.pi, offset=0.5)
    used = n * cell
    mag, lo, hi, frac = (a[:used, :used] for a in (mag, lo, hi, frac))
    cell_y, cell_x = np.indices((used, used)) // cell
    base = (cell_y * n + cell_x) * nb
    cells = (np.bincount((base + lo).ravel(), (mag * (1 - frac)).ravel(),
                         minlength=n * n * nb)
             + np.bincount((base + hi).ravel(), (mag * frac).ravel(),
                           minlength=n * n * nb))
    return cells.reshape(n, n, nb)


def hog_descriptor(img: np.ndarray, p: HogParams = HogParams()) -> np.ndarray:
    """HOG with unsigned orientation bins and overlapping L2-Hys blocks.

    A cell larger than the resized image collapses to one cell spanning the
    whole image; blocks shrink to the number of cells available.
    """
    img = check_image(img)
    mag, ori = _resized_gradients(img, p.resize_to, p.resize_to, {})
    return _hog_from_gradients(mag, ori, p)


def _hog_from_gradients(mag: np.ndarray, ori: np.ndarray, p: HogParams) -> np.ndarray:
    cells = _hog_cells(mag, ori, p)
    n = cells.shape[0]
    b = min(p.block_cells, n)
    blocks = []
    for by in range(n - b + 1):
        for bx in range(n - b + 1):
            block = cells[by:by + b, bx:bx + b].reshape(-1)
            block = _l2(block)
            block = _l2(np.minimum(block, p.clip))
            blocks.append(block)
    return np.concatenate(blocks)


def hog_length(p: HogParams) -> int:
    n = p.resize_to // min(p.cell_size, p.resize_to)
    b = min(p.block_cells, n)
    return (n - b + 1) ** 2 * b * b * p.orientation_bins


@dataclass(frozen=True)
class FeatureSet:
    """The descriptor variants computed for one part crop.

    ``concatenate=True`` feeds all variants to one classifier; otherwise
    :meth:`extract_variants` keeps them apart for per-variant classifiers.
    """

    sift: tuple[SiftParams, ...] = SIFT_VARIANTS
    hog: tuple[HogParams, ...] = HOG_VARIANTS
    concatenate: bool = True

    def extract_variants(self, img: np.ndarray) -> list[FeatureVector]:
        img = check_image(img)
        shared: dict = {}
        out = []
        for sp in self.sift:
            ny, nx = sift_grid_shape(*img.shape, sp.patch_size)
            mag, ori = _resized_gradients(img, ny * sp.patch_size,
                                             nx * sp.patch_size, shared)
            out.append(FeatureVector(_sift_from_gradients(mag, ori, ny, nx, sp),
                                     ("sift", f"patch={sp.patch_size}")))
        for hp in self.hog:
            mag, ori = _resized_gradients(img, hp.resize_to, hp.resize_to, shared)
            out.append(FeatureVector(
                _hog_from_gradients(mag, ori, hp),
                ("hog", f"size={hp.resize_to}", f"cell={hp.cell_size}")))
        return out

    def extract(self, img: np.ndarray) -> np.ndarray:
        return np.concatenate([fv.values for fv in self.extract_variants(img)])

    def to_dict(self) -> dict:
        return {
            "sift": [vars_of(s) for s in self.sift],
            "hog": [vars_of(h) for h in self.hog],
            "concatenate": self.concatenate,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureSet":
        return cls(sift=tuple(SiftParams(**s) for s in data.get("sift", [])),
                   hog=tuple(HogParams(**h) for h in data.get("hog", [])),
                   concatenate=data.get("concatenate", True))


def vars_of(params) -> dict:
    return {k: getattr(params, k) for k in params.__dataclass_fields__}


def write_feature_dump(path, rows: np.ndarray, sidecar: dict) -> None:
    """CSV feature dump with a ``.json`` sidecar describing each row."""
    path = Path(path)
    np.savetxt(path, np.asarray(rows, dtype=np.float64), delimiter=",",
               fmt="%.17g")
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True))


def read_feature_dump(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    rows = np.loadtxt(path, delimiter=",", ndmin=2)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return rows, sidecar
