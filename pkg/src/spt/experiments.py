"""Single runs and ablation sweeps over (superpixels, posenc, graph, layers)."""

from __future__ import annotations

import csv
import itertools
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import DATASETS, load_dataset
from .encoder import PRESETS, EncoderConfig, SuperpixelTransformer, count_parameters
from .features import FeatureSpec, PatchDataset, cached_segments
from .training import RunMetrics, TrainConfig, train

log = logging.getLogger(__name__)

# command-line vocabulary -> internal positional encoding names
POSENC_NAMES = {"bert": "bert", "linear": "linear_xy", "sincos": "sincos_xy"}
SUMMARY_FIELDS = ["S", "P", "G", "best_valid_acc", "last_valid_acc", "best_epoch", "last_epoch", "layers"]


@dataclass(frozen=True)
class RunConfig:
    dataset: str = "fashionmnist"
    superpixels: str = "slic"
    posenc: str = "sincos"
    graph: str = "rag"
    n_layers: int = 4
    preset: str = "ti"
    hidden_dim: int | None = None
    n_heads: int | None = None
    mlp_dim: int | None = None
    dropout: float = 0.1
    train: TrainConfig = field(default_factory=TrainConfig)
    grad_clip: bool | None = None  # None: dataset default
    out_dir: str = "runs/default"
    data_root: str | None = None
    cache_dir: str | None = None
    knn_k: int = 15
    rag_connectivity: int = 4
    printed_indexing: bool = False
    limit_train: int | None = None
    limit_valid: int | None = None
    limit_test: int | None = None

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if self.posenc not in POSENC_NAMES:
            raise ValueError(f"unknown positional encoding {self.posenc!r}")
        if self.preset != "custom" and self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        # validates the strategy names and grid divisibility
        self.feature_spec()

    @property
    def seed(self) -> int:
        return self.train.seed

    @property
    def cell_name(self) -> str:
        return f"{self.dataset}_{self.superpixels}_{self.posenc}_{self.graph}_L{self.n_layers}"

    def feature_spec(self) -> FeatureSpec:
        spec = DATASETS[self.dataset]
        return FeatureSpec(self.superpixels, self.graph, spec.height, spec.width, spec.S,
                           knn_k=self.knn_k, rag_connectivity=self.rag_connectivity)

    def encoder_config(self) -> EncoderConfig:
        dims = dict(PRESETS.get(self.preset, {}))
        for key in ("hidden_dim", "n_heads", "mlp_dim"):
            if getattr(self, key) is not None:
                dims[key] = getattr(self, key)
        if self.preset == "custom" and len(dims) < 3:
            raise ValueError("custom preset needs hidden_dim, n_heads and mlp_dim")
        patch = self.feature_spec().patch_config()
        return EncoderConfig(
            **dims, n_layers=self.n_layers, n_classes=DATASETS[self.dataset].n_classes,
            dropout=self.dropout, h_chunk=patch.h_chunk, w_chunk=patch.w_chunk,
            max_patches=patch.max_patches, posenc=POSENC_NAMES[self.posenc],
            printed_indexing=self.printed_indexing)

    def effective_train_config(self) -> TrainConfig:
        clip = DATASETS[self.dataset].grad_clip if self.grad_clip is None else self.grad_clip
        if clip:
            norm = self.train.grad_clip_norm if self.train.grad_clip_norm is not None else 1.0
            return replace(self.train, grad_clip_norm=norm)
        return replace(self.train, grad_clip_norm=None)

    def to_text(self) -> str:
        flat = {k: v for k, v in asdict(self).items() if k != "train"}
        flat.update({f"train.{k}": v for k, v in asdict(self.effective_train_config()).items()})
        return "".join(f"{k} = {v}\n" for k, v in flat.items())


def _limit(imageset, n, seed):
    """Seeded random subset of ``n`` items, kept in original order."""
    if n is None or n >= len(imageset):
        return imageset
    idx = np.random.default_rng(seed).choice(len(imageset), size=n, replace=False)
    return imageset.subset(np.sort(idx))


def build_datasets(config: RunConfig):
    splits = load_dataset(config.dataset, config.data_root, seed=config.seed)
    spec = config.feature_spec()
    out = {}
    for name, limit in (("train", config.limit_train), ("valid", config.limit_valid), ("test", config.limit_test)):
        part = _limit(getattr(splits, name), limit, config.seed)
        tag = f"{config.dataset}_seed{config.seed}_{name}" + (f"_sub{limit}" if limit is not None else "")
        segments = cached_segments(part.images, spec, config.cache_dir, tag)
        out[name] = PatchDataset(part.images, part.labels, segments, spec)
    return out


def run_single(config: RunConfig, datasets=None) -> RunMetrics:
    """Preprocess, train and write ``metrics.csv``, ``timing.csv``,
    ``best.ckpt`` and finally ``manifest.txt`` into ``config.out_dir``."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        torch.use_deterministic_algorithms(True)
        datasets = datasets or build_datasets(config)
        torch.manual_seed(config.seed)
        model = SuperpixelTransformer(config.encoder_config())
        metrics = train(model, datasets["train"], datasets["valid"], config.effective_train_config(),
                        out_dir=out, test_set=datasets["test"])
    except Exception as exc:
        (out / "failure.txt").write_text(f"{config.cell_name}: {exc!r}\n\n{traceback.format_exc()}")
        raise RuntimeError(f"run {config.cell_name} failed: {exc}") from exc
    manifest = config.to_text() + (
        f"parameters = {count_parameters(model)}\n"
        f"best_epoch = {metrics.best_epoch}\n"
        f"best_valid_acc = {metrics.best_valid_acc:.6f}\n"
        f"last_valid_acc = {metrics.last.valid_acc:.6f}\n"
        f"test_acc = {metrics.test_acc:.6f}\n"
    )
    (out / "manifest.txt").write_text(manifest)
    failure = out / "failure.txt"
    if failure.exists():
        failure.unlink()
    return metrics


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def sweep_cells(base: RunConfig, superpixels, posencs, graphs, layers, out_root) -> list[RunConfig]:
    cells = []
    for s, p, g, n in itertools.product(superpixels, posencs, graphs, layers):
        cell = replace(base, superpixels=s, posenc=p, graph=g, n_layers=int(n))
        cells.append(replace(cell, out_dir=str(Path(out_root) / cell.cell_name)))
    return cells


def _run_cell(cell: RunConfig):
    try:
        run_single(cell)
        return cell.cell_name, None
    except Exception as exc:  # recorded, the sweep moves on
        return cell.cell_name, repr(exc)


def run_sweep(cells: list[RunConfig], out_root, jobs: int = 1) -> list[dict]:
    """Run every cell not already completed, then write ``summary.csv``."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    names = [c.cell_name for c in cells]
    if len(set(names)) != len(names):
        raise ValueError("duplicate cells in sweep")
    todo = [c for c in cells if not (Path(c.out_dir) / "manifest.txt").exists()]
    log.info("sweep: %d cells, %d already complete", len(cells), len(cells) - len(todo))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, todo))
    else:
        results = [_run_cell(c) for c in todo]
    failures = [(name, err) for name, err in results if err]
    for name, err in failures:
        log.error("cell %s failed: %s", name, err)
    rows = summarize(cells)
    write_summary(rows, out_root / "summary.csv")
    if failures:
        with open(out_root / "failures.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["cell", "error"])
            w.writerows(failures)
    return rows


def summarize(cells: list[RunConfig]) -> list[dict]:
    from .training import read_metrics_csv

    rows = []
    for cell in cells:
        run_dir = Path(cell.out_dir)
        if not (run_dir / "manifest.txt").exists():
            continue
        epochs = read_metrics_csv(run_dir / "metrics.csv")
        best = max(epochs, key=lambda r: r["valid_acc"])  # first maximum wins
        last = epochs[-1]
        rows.append({"S": cell.superpixels, "P": cell.posenc, "G": cell.graph,
                     "best_valid_acc": f"{best['valid_acc']:.6f}", "last_valid_acc": f"{last['valid_acc']:.6f}",
                     "best_epoch": best["epoch"], "last_epoch": last["epoch"], "layers": cell.n_layers})
    return rows


def write_summary(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, SUMMARY_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
