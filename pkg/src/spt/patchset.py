"""Fixed-size superpixel patch structure fed to the encoder.

Every segment gets one slot holding its bounding-box centre, the RGB pixels of
the segment inside a square search box around that centre, and a binary shape
mask marking which box pixels belong to the segment. Unused slots are zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .segmentation import SegmentMask


class PatchError(ValueError):
    pass


@dataclass(frozen=True)
class PatchConfig:
    max_patches: int
    search_patch_size: int
    background_fill: str = "zeros"

    def __post_init__(self):
        if self.max_patches < 1:
            raise PatchError("max_patches must be >= 1")
        if self.search_patch_size < 1:
            raise PatchError("search_patch_size must be >= 1")
        if self.background_fill != "zeros":
            raise PatchError(f"unsupported background fill {self.background_fill!r}")

    @property
    def h_chunk(self) -> int:
        return self.search_patch_size

    @property
    def w_chunk(self) -> int:
        return self.search_patch_size

    @classmethod
    def for_slic(cls, k: int, S: int) -> "PatchConfig":
        return cls(max_patches=2 * k, search_patch_size=3 * S)

    @classmethod
    def for_grid(cls, image_size: int, patch_size: int) -> "PatchConfig":
        return cls(max_patches=(image_size // patch_size) ** 2, search_patch_size=patch_size)


@dataclass(frozen=True)
class SuperpixelPatchSet:
    present: np.ndarray  # (M,) uint8
    centers: np.ndarray  # (M, 2) float64, (y, x) pixel units
    patches: np.ndarray  # (M, 3, h, w) float32
    patch_present: np.ndarray  # (M, 1, h, w) uint8

    @property
    def max_patches(self) -> int:
        return len(self.present)


def search_box_origin(center, size: int, extent: int) -> int:
    """Top/left corner of the ``size``-long search box along one axis.

    The box is centred in continuous coordinates, where pixel ``i`` spans
    ``[i, i + 1)``, then shifted to lie inside ``[0, extent)``. When the box is
    longer than the axis it is shifted to cover the whole axis instead.
    """
    start = np.floor(np.asarray(center, dtype=np.float64) + 0.5 - size / 2.0).astype(np.int64)
    lo, hi = min(0, extent - size), max(0, extent - size)
    return np.clip(start, lo, hi)


def _rgb(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[None]
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    if image.ndim != 3 or image.shape[0] != 3:
        raise PatchError(f"expected a (3, H, W) image, got {image.shape}")
    return image


def get_superpixel_patches(image, segments: SegmentMask, config: PatchConfig) -> SuperpixelPatchSet:
    image = _rgb(image)
    labels = np.asarray(segments.labels)
    if image.shape[1:] != labels.shape:
        raise PatchError(f"image {image.shape[1:]} and segments {labels.shape} disagree")
    if segments.n_segments > config.max_patches:
        raise PatchError(f"{segments.n_segments} segments exceed max_patches={config.max_patches}")
    height, width = labels.shape
    size = config.search_patch_size
    m = config.max_patches

    present = np.zeros(m, dtype=np.uint8)
    centers = np.zeros((m, 2), dtype=np.float64)
    patches = np.zeros((m, 3, size, size), dtype=np.float32)
    patch_present = np.zeros((m, 1, size, size), dtype=np.uint8)
    present[: segments.n_segments] = 1

    for i in range(segments.n_segments):
        ys, xs = np.nonzero(labels == i)
        mins = np.array([ys.min(), xs.min()])
        maxs = np.array([ys.max(), xs.max()])
        centers[i] = mins + (maxs - mins) / 2
        y0 = int(search_box_origin(centers[i, 0], size, height))
        x0 = int(search_box_origin(centers[i, 1], size, width))
        inside = (ys >= y0) & (ys < y0 + size) & (xs >= x0) & (xs < x0 + size)
        ys, xs = ys[inside], xs[inside]
        patches[i, :, ys - y0, xs - x0] = image[:, ys, xs].T
        patch_present[i, 0, ys - y0, xs - x0] = 1
    return SuperpixelPatchSet(present, centers, patches, patch_present)


def segment_centers(labels: np.ndarray, max_patches: int) -> tuple[np.ndarray, np.ndarray]:
    """Bounding-box centres and presence flags for a batch of label maps.

    ``labels`` is ``(B, H, W)``; returns centres ``(B, M, 2)`` and presence
    ``(B, M)`` with absent slots zeroed.
    """
    batch, height, width = labels.shape
    if labels.max(initial=0) >= max_patches:
        raise PatchError(f"segments exceed max_patches={max_patches}")
    slot = (np.arange(batch)[:, None, None] * max_patches + labels).ravel()
    ys = np.broadcast_to(np.arange(height)[None, :, None], labels.shape).ravel()
    xs = np.broadcast_to(np.arange(width)[None, None, :], labels.shape).ravel()
    n = batch * max_patches
    big = np.iinfo(np.int64).max
    mins = np.full((n, 2), big, dtype=np.int64)
    maxs = np.full((n, 2), -1, dtype=np.int64)
    np.minimum.at(mins[:, 0], slot, ys)
    np.minimum.at(mins[:, 1], slot, xs)
    np.maximum.at(maxs[:, 0], slot, ys)
    np.maximum.at(maxs[:, 1], slot, xs)
    present = maxs[:, 0] >= 0
    centers = np.where(present[:, None], mins + (maxs - mins) / 2, 0.0)
    return centers.reshape(batch, max_patches, 2), present.reshape(batch, max_patches)


def batch_patches(images: np.ndarray, labels: np.ndarray, config: PatchConfig):
    """Vectorised patch extraction over ``(B, 3, H, W)`` images.

    Produces the same slots as :func:`get_superpixel_patches` applied image by
    image. Returns ``present, centers, patches, patch_present``.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    batch, _, height, width = images.shape
    m, size = config.max_patches, config.search_patch_size
    centers, present = segment_centers(labels, m)

    offs = np.arange(size)
    rows = search_box_origin(centers[..., 0], size, height)[..., None] + offs  # (B, M, s)
    cols = search_box_origin(centers[..., 1], size, width)[..., None] + offs
    row_ok = (rows >= 0) & (rows < height)
    col_ok = (cols >= 0) & (cols < width)
    rows_c = np.clip(rows, 0, height - 1)
    cols_c = np.clip(cols, 0, width - 1)

    b = np.arange(batch)[:, None, None, None]
    seg = labels[b, rows_c[..., :, None], cols_c[..., None, :]]  # (B, M, s, s)
    member = (seg == np.arange(m)[None, :, None, None])
    member &= row_ok[..., :, None] & col_ok[..., None, :] & present[..., None, None]
    pix = images[b, :, rows_c[..., :, None], cols_c[..., None, :]]  # (B, M, s, s, 3)
    patches = np.where(member[..., None], pix, 0.0).transpose(0, 1, 4, 2, 3)
    return (present.astype(np.uint8), centers, np.ascontiguousarray(patches, dtype=np.float32),
            member[:, :, None].astype(np.uint8))


def write_patchset(ps: SuperpixelPatchSet, path) -> None:
    """Binary dump: M, h, w as u32 LE, then present (u8), centers (f64),
    patches (f32) and patch_present (u8), all little-endian row-major."""
    m, _, h, w = ps.patches.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<III", m, h, w))
        f.write(np.ascontiguousarray(ps.present, dtype="u1").tobytes())
        f.write(np.ascontiguousarray(ps.centers, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(ps.patches, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(ps.patch_present, dtype="u1").tobytes())


def read_patchset(path) -> SuperpixelPatchSet:
    raw = Path(path).read_bytes()
    m, h, w = struct.unpack("<III", raw[:12])
    sizes = [m, m * 2 * 8, m * 3 * h * w * 4, m * h * w]
    if len(raw) != 12 + sum(sizes):
        raise PatchError("patch dump size does not match its header")
    off = 12
    present = np.frombuffer(raw, "u1", m, off).copy()
    off += sizes[0]
    centers = np.frombuffer(raw, "<f8", m * 2, off).reshape(m, 2).copy()
    off += sizes[1]
    patches = np.frombuffer(raw, "<f4", m * 3 * h * w, off).reshape(m, 3, h, w).copy()
    off += sizes[2]
    patch_present = np.frombuffer(raw, "u1", m * h * w, off).reshape(m, 1, h, w).copy()
    return SuperpixelPatchSet(present, centers, patches, patch_present)
