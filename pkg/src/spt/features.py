"""Preprocessing pipeline: segment a dataset once, then assemble mini-batches.

Segment masks are the only cached artefact. Patch tensors and attention
masks are rebuilt per batch from them, since both are cheap, deterministic
functions of (image, mask) and storing them would cost tens of gigabytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .data import to_rgb
from .encoder import PatchBatch
from .graph import batch_attention_mask
from .patchset import PatchConfig, batch_patches
from .segmentation import SlicConfig, slic0_segments, square_grid_segments

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FeatureSpec:
    superpixels: str  # "slic" or "grid"
    graph: str  # "fcg", "knn" or "rag"
    height: int
    width: int
    S: int = 4
    knn_k: int = 15
    rag_connectivity: int = 4
    slic_max_iterations: int = 10
    slic_convergence_threshold: float = 1e-3

    def __post_init__(self):
        if self.superpixels not in ("slic", "grid"):
            raise ValueError(f"unknown superpixel strategy {self.superpixels!r}")
        if self.graph not in ("fcg", "knn", "rag"):
            raise ValueError(f"unknown graph strategy {self.graph!r}")
        if self.superpixels == "grid" and (self.height != self.width or self.height % self.S):
            raise ValueError(f"grid chunking needs a square image divisible by {self.S}")

    def slic_config(self) -> SlicConfig:
        return SlicConfig.for_spacing(self.height, self.width, self.S,
                                      max_iterations=self.slic_max_iterations,
                                      convergence_threshold=self.slic_convergence_threshold)

    def patch_config(self) -> PatchConfig:
        if self.superpixels == "grid":
            return PatchConfig.for_grid(self.height, self.S)
        return PatchConfig.for_slic(self.slic_config().k, self.S)

    def segmentation_key(self) -> str:
        fields = {"superpixels": self.superpixels, "S": self.S, "height": self.height, "width": self.width}
        if self.superpixels == "slic":
            fields.update(asdict(self.slic_config()))
        blob = json.dumps(fields, sort_keys=True).encode()
        return f"{self.superpixels}_S{self.S}_{hashlib.sha1(blob).hexdigest()[:10]}"


def segment_images(images: np.ndarray, spec: FeatureSpec, progress_every: int = 0) -> np.ndarray:
    """Label maps ``(N, H, W)`` as uint8 (uint16 if labels need it)."""
    n = len(images)
    if spec.superpixels == "grid":
        grid = square_grid_segments(spec.height, spec.width, spec.S).labels
        dtype = np.uint8 if grid.max() < 256 else np.uint16
        return np.broadcast_to(grid.astype(dtype), (n, spec.height, spec.width)).copy()
    config = spec.slic_config()
    limit = spec.patch_config().max_patches
    dtype = np.uint8 if limit <= 256 else np.uint16
    out = np.empty((n, spec.height, spec.width), dtype=dtype)
    for i in range(n):
        mask = slic0_segments(to_rgb(images[i:i + 1])[0], config)
        if mask.n_segments > limit:
            raise ValueError(f"image {i}: {mask.n_segments} superpixels exceed max_patches={limit}")
        out[i] = mask.labels
        if progress_every and (i + 1) % progress_every == 0:
            log.info("segmented %d/%d images", i + 1, n)
    return out


def cached_segments(images: np.ndarray, spec: FeatureSpec, cache_dir, tag: str) -> np.ndarray:
    """Segment ``images`` or reuse a finished cache entry.

    Entries are write-once: a file is only ever created by atomic rename.
    """
    if cache_dir is None:
        return segment_images(images, spec)
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"{tag}_{spec.segmentation_key()}_n{len(images)}.npy"
    if path.exists():
        return np.load(path)
    log.info("segmenting %d images for %s", len(images), path.name)
    segments = segment_images(images, spec, progress_every=5000)
    # per-writer name: parallel sweep cells may segment the same split at once
    tmp = path.with_name(f"{path.name}.{os.getpid()}.tmp.npy")
    np.save(tmp, segments)
    tmp.replace(path)
    return segments


class PatchDataset:
    """Images, labels and label maps, served as :class:`PatchBatch` objects."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, segments: np.ndarray, spec: FeatureSpec):
        if not (len(images) == len(labels) == len(segments)):
            raise ValueError("images, labels and segments differ in length")
        self.images = images
        self.labels = np.asarray(labels, dtype=np.int64)
        self.segments = segments
        self.spec = spec
        self.patch_config = spec.patch_config()

    def __len__(self):
        return len(self.labels)

    def batch(self, idx) -> tuple[PatchBatch, torch.Tensor]:
        idx = np.asarray(idx)
        labels = self.segments[idx].astype(np.int64)
        return make_batch(to_rgb(self.images[idx]), labels, self.spec, self.patch_config), \
            torch.from_numpy(self.labels[idx])


def make_batch(images: np.ndarray, labels: np.ndarray, spec: FeatureSpec,
               patch_config: PatchConfig | None = None) -> PatchBatch:
    patch_config = patch_config or spec.patch_config()
    present, centers, patches, patch_present = batch_patches(images, labels, patch_config)
    mask = batch_attention_mask(spec.graph, present, centers, labels, spec.knn_k, spec.rag_connectivity)
    return PatchBatch(
        present=torch.from_numpy(present.astype(bool)),
        centers=torch.from_numpy(centers.astype(np.float32)),
        patches=torch.from_numpy(patches),
        patch_present=torch.from_numpy(patch_present.astype(np.float32)),
        mask=mask,
    )
