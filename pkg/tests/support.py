"""Shared builders for the test-suite."""

import numpy as np
import torch

from spt.encoder import EncoderConfig, PatchBatch, SuperpixelTransformer
from spt.features import FeatureSpec, make_batch
from spt.graph import attention_mask_from_adjacency


def tiny_config(**overrides) -> EncoderConfig:
    base = dict(hidden_dim=8, n_layers=2, n_heads=2, mlp_dim=16, n_classes=3, dropout=0.0,
                h_chunk=2, w_chunk=2, max_patches=5, posenc="sincos_xy")
    base.update(overrides)
    return EncoderConfig(**base)


def synthetic_batch(config: EncoderConfig, batch: int, rng, n_present=None, dtype=torch.float64) -> PatchBatch:
    """Random patch content, a random symmetric graph and a padded tail."""
    m, h, w = config.max_patches, config.h_chunk, config.w_chunk
    present = np.zeros((batch, m), dtype=bool)
    for b in range(batch):
        k = n_present if n_present is not None else int(rng.integers(1, m + 1))
        present[b, :k] = True
    adj = rng.random((batch, m, m)) < 0.4
    adj = adj | adj.transpose(0, 2, 1)
    mask = attention_mask_from_adjacency(adj, present)
    patch_present = (rng.random((batch, m, 1, h, w)) < 0.7) & present[:, :, None, None, None]
    patches = rng.random((batch, m, 3, h, w)) * patch_present
    centers = rng.uniform(0, 28, (batch, m, 2)) * present[..., None]
    return PatchBatch(
        present=torch.from_numpy(present),
        centers=torch.from_numpy(centers).to(dtype),
        patches=torch.from_numpy(patches).to(dtype),
        patch_present=torch.from_numpy(patch_present.astype(np.float64)).to(dtype),
        mask=torch.from_numpy(mask),
    )


def image_batch(spec: FeatureSpec, n: int, seed: int, dtype=torch.float64) -> tuple[np.ndarray, PatchBatch]:
    """Random RGB images run through the real preprocessing pipeline."""
    from spt.features import segment_images

    images = np.random.default_rng(seed).random((n, 3, spec.height, spec.width)).astype(np.float32)
    segments = segment_images(images, spec).astype(np.int64)
    return images, make_batch(images, segments, spec).to(dtype=dtype)


def model_for(config: EncoderConfig, seed: int = 0, dtype=torch.float64) -> SuperpixelTransformer:
    """Fresh model with a random head; the zero-initialised head would make
    every logit 0 and output comparisons vacuous."""
    torch.manual_seed(seed)
    model = SuperpixelTransformer(config)
    with torch.no_grad():
        model.head.weight.normal_(std=0.5)
        model.head.bias.normal_(std=0.5)
    return model.to(dtype)


class TensorDataset:
    """In-memory ``len``/``batch(idx)`` dataset over one big PatchBatch.

    Labels are a learnable function of the content so training has signal.
    """

    def __init__(self, config: EncoderConfig, n: int, seed: int, dtype=torch.float32, nan_items=()):
        rng = np.random.default_rng(seed)
        self.data = synthetic_batch(config, n, rng, dtype=dtype)
        score = self.data.patches.sum(dim=(1, 2, 3, 4))
        self.labels = (score > score.median()).long() % config.n_classes
        for i in nan_items:
            self.data.patches[i, 0, 0, 0, 0] = float("nan")

    def __len__(self):
        return len(self.labels)

    def batch(self, idx):
        idx = torch.as_tensor(np.asarray(idx))
        d = self.data
        return PatchBatch(d.present[idx], d.centers[idx], d.patches[idx], d.patch_present[idx], d.mask[idx]), \
            self.labels[idx]
