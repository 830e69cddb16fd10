"""Image chunking: square grids and SLIC0 superpixels.

Both strategies return a :class:`SegmentMask`, an integer label per pixel with
labels forming the contiguous range ``0..n_segments-1``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from skimage.measure import label as connected_components


class SegmentationError(ValueError):
    pass


@dataclass(frozen=True)
class SegmentMask:
    labels: np.ndarray
    n_segments: int

    @classmethod
    def from_labels(cls, labels) -> "SegmentMask":
        labels = np.asarray(labels)
        return cls(labels=labels, n_segments=int(labels.max()) + 1)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.n_segments)


@dataclass(frozen=True)
class SlicConfig:
    k: int
    S: float
    max_iterations: int = 10
    convergence_threshold: float = 1e-3
    # smallest per-cluster colour normaliser, one 8-bit grey level
    min_color_scale: float = 1.0 / 255.0

    def __post_init__(self):
        if self.k < 1:
            raise SegmentationError(f"k must be >= 1, got {self.k}")
        if self.S < 1:
            raise SegmentationError(f"S must be >= 1, got {self.S}")
        if self.max_iterations < 1:
            raise SegmentationError("max_iterations must be >= 1")

    @classmethod
    def for_spacing(cls, height: int, width: int, S: float, **kwargs) -> "SlicConfig":
        """Config requesting one superpixel per ``S x S`` area."""
        k = max(1, int(round(height * width / (S * S))))
        return cls(k=k, S=S, **kwargs)

    @property
    def min_fragment_size(self) -> float:
        return self.S * self.S / 4.0


def square_grid_segments(height: int, width: int, patch_size: int) -> SegmentMask:
    """Label ``patch_size`` blocks in row-major order."""
    if height != width:
        raise SegmentationError(f"square grid needs height == width, got {height}x{width}")
    if patch_size < 1 or height % patch_size:
        raise SegmentationError(f"height {height} is not a multiple of patch size {patch_size}")
    per_line = height // patch_size
    rows = np.arange(height) // patch_size
    cols = np.arange(width) // patch_size
    labels = (rows[:, None] * per_line + cols[None, :]).astype(np.int64)
    return SegmentMask(labels=labels, n_segments=per_line * per_line)


@dataclass
class SlicTrace:
    """Per-iteration diagnostics collected when ``trace=True``."""

    displacements: list[float] = field(default_factory=list)
    # largest Chebyshev offset between a pixel and its assigned centroid
    max_offsets: list[float] = field(default_factory=list)
    iterations: int = 0
    fragments_merged: int = 0


def _as_channels_first(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3:
        raise SegmentationError(f"expected a (C, H, W) image, got shape {image.shape}")
    return image


def _grid_seeds(height: int, width: int, k: int) -> np.ndarray:
    ny = max(1, int(round(math.sqrt(k * height / width))))
    ny = min(ny, height)
    nx = max(1, min(width, int(round(k / ny))))
    ys = ((np.arange(ny) + 0.5) * height / ny).astype(np.int64)
    xs = ((np.arange(nx) + 0.5) * width / nx).astype(np.int64)
    return np.stack(np.meshgrid(ys, xs, indexing="ij"), axis=-1).reshape(-1, 2)


def _gradient_magnitude(image: np.ndarray) -> np.ndarray:
    padded = np.pad(image, ((0, 0), (1, 1), (1, 1)), mode="edge")
    dx = padded[:, 1:-1, 2:] - padded[:, 1:-1, :-2]
    dy = padded[:, 2:, 1:-1] - padded[:, :-2, 1:-1]
    return (dx * dx).sum(0) + (dy * dy).sum(0)


def _perturb_seeds(seeds: np.ndarray, grad: np.ndarray) -> np.ndarray:
    height, width = grad.shape
    out = seeds.copy()
    for n, (y, x) in enumerate(seeds):
        best = grad[y, x]
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                yy, xx = y + dy, x + dx
                if 0 <= yy < height and 0 <= xx < width and grad[yy, xx] < best:
                    best = grad[yy, xx]
                    out[n] = (yy, xx)
    return out


def _assign(pix_pos, pix_col, centers_pos, centers_col, color_scale, S):
    """Nearest-centroid assignment restricted to a window around each centroid.

    Pixels no centroid reaches within ``S`` retry with ``2S``. Returns labels,
    colour distance and Chebyshev offset to the assigned centroid.
    """
    dy = pix_pos[:, 0:1] - centers_pos[None, :, 0]
    dx = pix_pos[:, 1:2] - centers_pos[None, :, 1]
    cheb = np.maximum(np.abs(dy), np.abs(dx))
    ds2 = dy * dy + dx * dx
    dc2 = ((pix_col * pix_col).sum(1)[:, None] + (centers_col * centers_col).sum(1)[None, :]
           - 2.0 * pix_col @ centers_col.T)
    np.maximum(dc2, 0.0, out=dc2)
    dist = dc2 / (color_scale[None, :] ** 2) + ds2 / (S * S)

    labels = np.full(len(pix_pos), -1, dtype=np.int64)
    pending = np.ones(len(pix_pos), dtype=bool)
    for half in (S, 2 * S):
        masked = np.where(cheb <= half, dist, np.inf)
        best = masked.argmin(1)
        ok = pending & np.isfinite(masked[np.arange(len(best)), best])
        labels[ok] = best[ok]
        pending &= ~ok
        if not pending.any():
            break
    if pending.any():
        # centroids drifted away from these pixels entirely
        labels[pending] = ds2[pending].argmin(1)
    rows = np.arange(len(labels))
    return labels, np.sqrt(dc2[rows, labels]), cheb[rows, labels]


def _border_counts(comp: np.ndarray, n: int) -> np.ndarray:
    counts = np.zeros((n, n), dtype=np.int64)
    for a, b in ((comp[:, :-1], comp[:, 1:]), (comp[:-1, :], comp[1:, :])):
        diff = a != b
        np.add.at(counts, (a[diff], b[diff]), 1)
        np.add.at(counts, (b[diff], a[diff]), 1)
    return counts


def enforce_connectivity(labels: np.ndarray, min_size: float) -> tuple[np.ndarray, int]:
    """Split labels into 4-connected fragments and absorb the small ones.

    A fragment below ``min_size`` pixels joins the neighbouring fragment sharing
    the longest border (ties go to the smaller label). Output labels are
    contiguous, numbered in raster order of first appearance.
    """
    comp = connected_components(labels + 1, background=0, connectivity=1) - 1
    n = int(comp.max()) + 1
    sizes = np.bincount(comp.ravel(), minlength=n)
    borders = _border_counts(comp, n)
    alive = np.ones(n, dtype=bool)
    merged = 0
    while True:
        small = np.flatnonzero(alive & (sizes < min_size) & (borders.sum(1) > 0))
        if small.size == 0:
            break
        src = small[np.argmin(sizes[small])]
        dst = int(np.argmax(borders[src]))
        # fold src into dst
        comp[comp == src] = dst
        sizes[dst] += sizes[src]
        sizes[src] = 0
        borders[dst] += borders[src]
        borders[:, dst] += borders[:, src]
        borders[dst, dst] = 0
        borders[src] = 0
        borders[:, src] = 0
        alive[src] = False
        merged += 1
    _, first = np.unique(comp.ravel(), return_index=True)
    order = np.argsort(first, kind="stable")
    remap = np.empty(n, dtype=np.int64)
    remap[np.unique(comp.ravel())[order]] = np.arange(len(order))
    return remap[comp], merged


def slic0_segments(image, config: SlicConfig, trace: SlicTrace | None = None) -> SegmentMask:
    """SLIC0 superpixels computed on RGB values in [0, 1].

    Each centroid only competes for pixels inside a ``2S`` square around it and
    distances combine colour and position, with the colour term normalised by
    the cluster's own largest colour distance from the previous iteration.
    """
    image = _as_channels_first(image)
    _, height, width = image.shape
    n_pixels = height * width
    if n_pixels == 0:
        raise SegmentationError("empty image")
    if config.k > n_pixels:
        raise SegmentationError(f"k={config.k} exceeds pixel count {n_pixels}")
    S = float(config.S)

    ys, xs = np.mgrid[0:height, 0:width]
    pix_pos = np.stack([ys.ravel(), xs.ravel()], axis=1).astype(np.float64)
    pix_col = image.reshape(image.shape[0], -1).T

    seeds = _perturb_seeds(_grid_seeds(height, width, config.k), _gradient_magnitude(image))
    centers_pos = seeds.astype(np.float64)
    centers_col = image[:, seeds[:, 0], seeds[:, 1]].T.copy()
    n_clusters = len(seeds)
    color_scale = np.ones(n_clusters)

    labels = None
    for it in range(config.max_iterations):
        labels, dcol, offset = _assign(pix_pos, pix_col, centers_pos, centers_col, color_scale, S)

        counts = np.bincount(labels, minlength=n_clusters)
        occupied = counts > 0
        new_pos = centers_pos.copy()
        new_col = centers_col.copy()
        for d in range(2):
            new_pos[occupied, d] = np.bincount(labels, pix_pos[:, d], n_clusters)[occupied] / counts[occupied]
        for c in range(pix_col.shape[1]):
            new_col[occupied, c] = np.bincount(labels, pix_col[:, c], n_clusters)[occupied] / counts[occupied]

        max_dc = np.zeros(n_clusters)
        np.maximum.at(max_dc, labels, dcol)
        shift = np.sqrt(((new_pos - centers_pos) ** 2).sum(1) / (S * S)
                        + ((new_col - centers_col) ** 2).sum(1) / color_scale**2)
        displacement = float(shift.sum())

        color_scale = np.where(occupied, np.maximum(max_dc, config.min_color_scale), color_scale)
        centers_pos, centers_col = new_pos, new_col
        if trace is not None:
            trace.displacements.append(displacement)
            trace.max_offsets.append(float(offset.max()))
            trace.iterations = it + 1
        if displacement < config.convergence_threshold:
            break

    relabeled, merged = enforce_connectivity(labels.reshape(height, width), config.min_fragment_size)
    if trace is not None:
        trace.fragments_merged = merged
    return SegmentMask(labels=relabeled, n_segments=int(relabeled.max()) + 1)


def write_mask(mask: SegmentMask, path) -> None:
    """Flat dump: height, width as u32 LE, then row-major u32 LE labels."""
    height, width = mask.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<II", height, width))
        f.write(np.ascontiguousarray(mask.labels, dtype="<u4").tobytes())


def read_mask(path) -> SegmentMask:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise SegmentationError("truncated mask file")
    height, width = struct.unpack("<II", raw[:8])
    if len(raw) != 8 + 4 * height * width:
        raise SegmentationError("mask file size does not match its header")
    labels = np.frombuffer(raw, dtype="<u4", offset=8).reshape(height, width).astype(np.int64)
    return SegmentMask.from_labels(labels)
