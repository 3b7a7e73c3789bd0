"""Histogram-of-oriented-gradients machinery.

Sobel gradients, magnitude and orientation bins, differentiable soft cell
histograms, the ``m * o`` sort keys with the pixel/patch sort plans built
from them, and a small profiler that summarizes how HOG statistics differ
between degradation families.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ConfigurationError, InputValidationError, Tensor

MAG_EPS = 1e-12
ANGLE_GUARD = 1e-8

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


@dataclass
class GradientField:
    gx: Tensor
    gy: Tensor


@dataclass
class HogMap:
    m: Tensor
    o: np.ndarray
    soft_hist: Tensor
    n_bin: int = 9
    cell: int = 8


@dataclass
class SortPlan:
    """A permutation of flattened spatial positions and its inverse.

    ``gather_axis(x, perm, -1)`` sorts, ``gather_axis(y, inv, -1)`` undoes it.
    """

    perm: np.ndarray
    inv: np.ndarray
    granularity: str
    patch: int | None = None


def _as_nchw(x) -> tuple[Tensor, int]:
    x = T.as_tensor(x)
    if x.ndim == 2:
        return T.reshape(x, (1, 1) + x.shape), 2
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), 3
    if x.ndim == 4:
        return x, 4
    raise ConfigurationError(f"expected an image of 2-4 dims, got shape {x.shape}")


def sobel_gradients(x) -> GradientField:
    """Per-channel Sobel responses with reflective borders.

    Accepts ``C x H x W`` or ``N x C x H x W``; outputs keep the input rank.
    """
    x4, rank = _as_nchw(x)
    H, W = x4.shape[-2:]
    if H < 2 or W < 2:
        raise ConfigurationError(f"sobel_gradients needs H, W >= 2, got {H}x{W}")
    C = x4.shape[1]
    padded = T.pad2d(x4, 1, mode="reflect")
    kx = Tensor(np.broadcast_to(SOBEL_X, (C, 1, 3, 3)).astype(x4.dtype))
    ky = Tensor(np.broadcast_to(SOBEL_Y, (C, 1, 3, 3)).astype(x4.dtype))
    gx = T.conv2d(padded, kx, groups=C)
    gy = T.conv2d(padded, ky, groups=C)
    if rank != 4:
        shape = x4.shape[1:] if rank == 3 else x4.shape[2:]
        gx, gy = T.reshape(gx, shape), T.reshape(gy, shape)
    return GradientField(gx, gy)


def gradient_magnitude(g: GradientField) -> Tensor:
    return T.sqrt(g.gx * g.gx + g.gy * g.gy + MAG_EPS)


def _guarded_angle(gx: np.ndarray, gy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Inside the guard radius the angle is pinned to atan2(0, 0) = 0;
    # roundoff-level gradients would otherwise give arbitrary angles.
    r2 = gx * gx + gy * gy
    safe = r2 >= ANGLE_GUARD**2
    return np.where(safe, np.arctan2(gy, gx), 0.0), safe


def angle_coordinate(g: GradientField, n_bin: int) -> Tensor:
    """Continuous bin coordinate ``(atan2(gy, gx) + pi) / (2 pi) * n_bin``.

    Differentiable except within ``ANGLE_GUARD`` of the origin, where the
    angle is pinned to 0 and carries no gradient.
    """
    gx, gy = g.gx.data, g.gy.data
    scale = n_bin / (2.0 * math.pi)
    angle, safe = _guarded_angle(gx, gy)
    coord = (angle + math.pi) * scale
    r2 = gx * gx + gy * gy
    inv_r2 = np.where(safe, scale / np.where(safe, r2, 1.0), 0.0)

    def backward(grad):
        return -grad * gy * inv_r2, grad * gx * inv_r2

    return T.make_op(coord.astype(gx.dtype), (g.gx, g.gy), backward)


def orientation_bins(coord: np.ndarray, n_bin: int) -> np.ndarray:
    """Integer bins ``floor(coord)`` with the ``n_bin`` boundary wrapped to 0."""
    return T.discrete(lambda: np.floor(coord).astype(np.int64) % n_bin)


def magnitude_orientation(g: GradientField, n_bin: int = 9) -> tuple[Tensor, np.ndarray]:
    if n_bin < 1:
        raise ConfigurationError(f"n_bin must be >= 1, got {n_bin}")
    m = gradient_magnitude(g)
    angle, _ = _guarded_angle(g.gx.data, g.gy.data)
    coord = (angle + math.pi) * (n_bin / (2.0 * math.pi))
    return m, orientation_bins(coord, n_bin)


def soft_cell_histogram(x, cell: int = 8, n_bin: int = 9) -> Tensor:
    """Magnitude-weighted orientation histograms per ``cell x cell`` block.

    Multi-channel input is reduced by channel mean first. Each pixel splits
    its magnitude between the two bins adjacent to its continuous bin
    coordinate (linear interpolation, circular). Returns
    ``(cells_y, cells_x, n_bin)`` for unbatched input and
    ``(N, cells_y, cells_x, n_bin)`` for NCHW input.
    """
    x4, rank = _as_nchw(x)
    N, _, H, W = x4.shape
    if H % cell or W % cell:
        raise ConfigurationError(f"soft_cell_histogram: {H}x{W} is not divisible by cell={cell}")
    gray = T.mean(x4, axis=1, keepdims=True)
    g = sobel_gradients(gray)
    m = T.reshape(gradient_magnitude(g), (N, H, W))
    coord = T.reshape(angle_coordinate(g, n_bin), (N, H, W))
    lower = T.discrete(lambda: np.floor(coord.data))
    # A replayed bin may sit across the circular seam from the current angle.
    seam = np.round((coord.data - lower - 0.5) / n_bin) * n_bin
    frac = coord - Tensor((lower + seam).astype(coord.dtype))
    w_hi = m * frac
    w_lo = m - w_hi
    lo_idx = lower.astype(np.int64) % n_bin
    hi_idx = (lo_idx + 1) % n_bin
    bins = np.arange(n_bin)
    onehot_lo = (lo_idx[..., None] == bins).astype(x4.dtype)
    onehot_hi = (hi_idx[..., None] == bins).astype(x4.dtype)
    votes = T.reshape(w_lo, (N, H, W, 1)) * onehot_lo + T.reshape(w_hi, (N, H, W, 1)) * onehot_hi
    votes = T.reshape(votes, (N, H // cell, cell, W // cell, cell, n_bin))
    hist = T.sum_(votes, axis=(2, 4))
    if rank < 4:
        hist = T.reshape(hist, hist.shape[1:])
    return hist


def sort_keys(m, o) -> Tensor:
    """Elementwise ``m * o`` with the integer bins cast to floating point."""
    m = T.as_tensor(m)
    o = np.asarray(o)
    if m.shape != o.shape:
        raise ConfigurationError(f"sort_keys: shapes {m.shape} and {o.shape} differ")
    return m * o.astype(m.dtype)


def hog_sort_keys(x, n_bin: int = 9) -> np.ndarray:
    """Per-channel ``m * o`` keys of a feature map, as a constant array."""
    with T.no_grad():
        g = sobel_gradients(T.Tensor(T.as_tensor(x).data))
        m, o = magnitude_orientation(g, n_bin)
        return sort_keys(m, o).data


def compute_hog_map(x, n_bin: int = 9, cell: int = 8) -> HogMap:
    g = sobel_gradients(x)
    m, o = magnitude_orientation(g, n_bin)
    return HogMap(m=m, o=o, soft_hist=soft_cell_histogram(x, cell, n_bin), n_bin=n_bin, cell=cell)


def pixel_sort_plan(keys) -> SortPlan:
    """Stable ascending order along the last (flattened spatial) axis."""
    keys = keys.data if isinstance(keys, Tensor) else np.asarray(keys)
    perm = T.argsort_stable(keys, axis=-1)
    return SortPlan(perm=perm, inv=T.invert_permutation(perm, axis=-1), granularity="pixel")


def patch_order(patch_keys: np.ndarray, patch: int, H: int, W: int) -> np.ndarray:
    """Pixel permutation that moves whole patches into the slots given by
    ``argsort(patch_keys)``; ``patch_keys`` has shape ``(..., Py * Px)``."""
    Py, Px = H // patch, W // patch
    order = T.argsort_stable(patch_keys, axis=-1)
    pix = np.arange(H * W).reshape(Py, patch, Px, patch).transpose(0, 2, 1, 3).reshape(Py * Px, patch, patch)
    moved = pix[order]
    lead = order.shape[:-1]
    moved = moved.reshape(*lead, Py, Px, patch, patch)
    nl = len(lead)
    moved = moved.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3)
    return moved.reshape(*lead, H * W)


def patch_sort_plan(keys, patch: int) -> SortPlan:
    """Reorder ``patch x patch`` blocks by their mean key.

    ``keys`` is ``H x W``, ``C x H x W`` or ``N x C x H x W``; channels are
    averaged. The plan acts on the flattened ``H * W`` axis: its ``perm`` has
    shape ``(H*W,)`` or ``(N, 1, H*W)`` so it broadcasts across channels.
    """
    keys = keys.data if isinstance(keys, Tensor) else np.asarray(keys)
    H, W = keys.shape[-2:]
    if H % patch or W % patch:
        raise ConfigurationError(f"patch_sort_plan: {H}x{W} is not divisible by patch={patch}")
    if keys.ndim == 2:
        gray = keys
    else:
        gray = keys.mean(axis=-3)
    lead = gray.shape[:-2]
    pk = gray.reshape(*lead, H // patch, patch, W // patch, patch).mean(axis=(-3, -1))
    pk = pk.reshape(*lead, -1)
    perm = patch_order(pk, patch, H, W)
    if keys.ndim == 4:
        perm = perm[:, None, :]
    return SortPlan(perm=perm, inv=T.invert_permutation(perm, axis=-1), granularity="patch", patch=patch)


# ---------------------------------------------------------------------------
# Degradation profiler
# ---------------------------------------------------------------------------


@dataclass
class DegradationSignature:
    label: str
    centroid: np.ndarray
    dispersion: float
    count: int
    descriptors: np.ndarray = field(repr=False, default=None)


ENERGY_QUANTILES = (10, 50, 90)
ENERGY_WEIGHT = 0.25
ENERGY_FLOOR = 1e-3


def image_descriptor(img, cell: int = 8, n_bin: int = 9, energy: bool = False) -> np.ndarray:
    """HOG signature of one image: the L2-normalized mean over cells of the
    soft cell histograms.

    With ``energy`` three more entries are appended, the 10/50/90th
    percentiles of log cell energy scaled by ENERGY_WEIGHT. The orientation
    shape alone is blind to degradations that only rescale gradient
    magnitudes (haze leaves it exactly unchanged).
    """
    x4, _ = _as_nchw(T.Tensor(T.as_tensor(img).data.astype(np.float64)))
    H, W = x4.shape[-2:]
    ph, pw = (-H) % cell, (-W) % cell
    with T.no_grad():
        if ph or pw:
            x4 = T.pad2d(x4, (0, ph, 0, pw), mode="reflect")
        hist = soft_cell_histogram(x4, cell, n_bin).data.reshape(-1, n_bin)
    shape = hist.mean(axis=0)
    norm = np.linalg.norm(shape)
    shape = shape / norm if norm > 0 else shape
    if not energy:
        return shape
    log_energy = np.log(hist.sum(axis=1) + ENERGY_FLOOR)
    return np.concatenate([shape, ENERGY_WEIGHT * np.percentile(log_energy, ENERGY_QUANTILES)])


def degradation_signature(
    corpus, label: str, cell: int = 8, n_bin: int = 9, energy: bool = False
) -> DegradationSignature:
    corpus = list(corpus)
    if not corpus:
        raise InputValidationError(f"degradation_signature: class {label!r} has no images")
    desc = np.stack([image_descriptor(img, cell, n_bin, energy) for img in corpus])
    centroid = desc.mean(axis=0)
    dispersion = float(np.linalg.norm(desc - centroid, axis=1).mean())
    return DegradationSignature(label, centroid, dispersion, len(corpus), desc)


@dataclass
class ProfileReport:
    labels: list[str]
    distances: np.ndarray
    dispersions: np.ndarray
    confusion: np.ndarray
    signatures: list[DegradationSignature]

    @property
    def accuracy(self) -> float:
        total = self.confusion.sum()
        return float(np.trace(self.confusion) / total) if total else float("nan")

    def separated_pairs(self) -> tuple[int, int]:
        """(pairs whose centroid distance beats both dispersions, total pairs)."""
        k = len(self.labels)
        hits = total = 0
        for i in range(k):
            for j in range(i + 1, k):
                total += 1
                if self.distances[i, j] > max(self.dispersions[i], self.dispersions[j]):
                    hits += 1
        return hits, total

    def to_json(self) -> dict:
        hits, total = self.separated_pairs()
        return {
            "labels": self.labels,
            "signatures": [
                {
                    "label": s.label,
                    "centroid": s.centroid.tolist(),
                    "dispersion": s.dispersion,
                    "count": s.count,
                }
                for s in self.signatures
            ],
            "confusion": self.confusion.tolist(),
            "loo_accuracy": self.accuracy,
            "separated_pairs": hits,
            "total_pairs": total,
        }

    def write(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "distances.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class"] + self.labels)
            for label, row in zip(self.labels, self.distances):
                writer.writerow([label] + [f"{v:.8f}" for v in row])
        with open(os.path.join(out_dir, "profile.json"), "w") as fh:
            json.dump(self.to_json(), fh, indent=2)


def profile_corpora(signatures: list[DegradationSignature]) -> ProfileReport:
    """Inter-class centroid distances and leave-one-out nearest-centroid confusion."""
    k = len(signatures)
    for s in signatures:
        if s.count < 2:
            raise InputValidationError(f"class {s.label!r} needs >= 2 images, has {s.count}")
    centroids = np.stack([s.centroid for s in signatures])
    distances = np.linalg.norm(centroids[:, None] - centroids[None], axis=-1)
    confusion = np.zeros((k, k), dtype=np.int64)
    for i, s in enumerate(signatures):
        for d in s.descriptors:
            cents = centroids.copy()
            cents[i] = (s.centroid * s.count - d) / (s.count - 1)
            pred = int(np.argmin(np.linalg.norm(cents - d, axis=1)))
            confusion[i, pred] += 1
    return ProfileReport(
        labels=[s.label for s in signatures],
        distances=distances,
        dispersions=np.array([s.dispersion for s in signatures]),
        confusion=confusion,
        signatures=signatures,
    )


def profile_samples(labelled, cell: int = 8, n_bin: int = 9, energy: bool = False) -> ProfileReport:
    """Profile an iterable of ``(label, image)`` pairs; classes keep
    first-seen order."""
    groups: dict[str, list] = {}
    for label, img in labelled:
        groups.setdefault(label, []).append(img)
    return profile_corpora([degradation_signature(v, k, cell, n_bin, energy) for k, v in groups.items()])
