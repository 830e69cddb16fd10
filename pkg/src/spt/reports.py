"""Static SVG learning curves and preprocessing debug dumps."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import numpy as np

from .data import to_rgb
from .graph import build_fcg, build_knn, build_rag, write_edge_list
from .patchset import PatchConfig, get_superpixel_patches, write_patchset
from .segmentation import SlicConfig, slic0_segments, square_grid_segments, write_mask
from .training import read_metrics_csv


class DumpError(ValueError):
    pass


def _run_label(path: Path) -> tuple[str, dict]:
    """Legend label and grouping fields of the run owning ``path``."""
    from .experiments import read_manifest

    manifest = path.parent / "manifest.txt"
    info = read_manifest(manifest) if manifest.exists() else {}
    return path.parent.name or path.stem, info


def _axes_svg(groups: dict, title: str, out_path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "spt"
    matplotlib.rcParams["svg.fonttype"] = "none"  # keep labels as searchable text
    fig, ax = plt.subplots(figsize=(7, 4.5))
    cmap = plt.get_cmap("tab10")
    for i, (group, curves) in enumerate(sorted(groups.items())):
        for j, (label, epochs, acc) in enumerate(curves):
            ax.plot(epochs, acc, color=cmap(i % 10), linestyle=("-", "--", ":", "-.")[j % 4],
                    marker="o", markersize=3, label=f"{group}: {label}", gid=f"curve-{i}-{j}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation accuracy")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot(metrics_paths, out_dir) -> list[Path]:
    """Write ``valid_acc_by_layers.svg`` and ``valid_acc_by_posenc_graph.svg``.

    Every metrics file is parsed before anything is written, so malformed or
    empty input leaves ``out_dir`` untouched.
    """
    paths = [Path(p) for p in metrics_paths]
    if not paths:
        raise ValueError("no metrics files given")
    runs = []
    for p in paths:
        rows = read_metrics_csv(p)
        label, info = _run_label(p)
        runs.append((label, info, [r["epoch"] for r in rows], [r["valid_acc"] for r in rows]))

    by_layers, by_pg = defaultdict(list), defaultdict(list)
    for label, info, epochs, acc in runs:
        by_layers[f"L={info.get('n_layers', '?')}"].append((label, epochs, acc))
        by_pg[f"{info.get('posenc', '?')}+{info.get('graph', '?')}"].append((label, epochs, acc))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [out_dir / "valid_acc_by_layers.svg", out_dir / "valid_acc_by_posenc_graph.svg"]
    _axes_svg(by_layers, "validation accuracy by layer count", written[0])
    _axes_svg(by_pg, "validation accuracy by positional encoding and graph", written[1])
    return written


def read_image(path) -> np.ndarray:
    """RGB float image ``(3, H, W)`` in [0, 1] from a PNG/JPEG or ``.npy`` file."""
    path = Path(path)
    try:
        if path.suffix == ".npy":
            arr = np.load(path)
        else:
            from PIL import Image

            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB")).transpose(2, 0, 1)
    except (OSError, ValueError) as exc:
        raise DumpError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise DumpError(f"{path}: expected (H, W), (1, H, W) or (3, H, W), got {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    return to_rgb(np.asarray(arr, dtype=np.float32)[None])[0]


def label_colors(n: int) -> np.ndarray:
    """Deterministic, well-spread uint8 colours for ``n`` labels."""
    golden = 0.6180339887498949
    hue = (np.arange(n) * golden) % 1.0
    import matplotlib.colors as mcolors

    hsv = np.stack([hue, np.full(n, 0.65), np.full(n, 0.95)], axis=1)
    return (mcolors.hsv_to_rgb(hsv) * 255).round().astype(np.uint8)


def mean_color_image(image: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Replace every pixel by the mean colour of its segment. ``image`` is (3, H, W)."""
    n = int(labels.max()) + 1
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=n).astype(np.float64)
    means = np.stack([np.bincount(flat, weights=c.ravel(), minlength=n) for c in image.astype(np.float64)])
    means /= np.maximum(counts, 1)
    return means[:, labels]


def _save_png(path: Path, rgb_hwc_uint8: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.ascontiguousarray(rgb_hwc_uint8)).save(path)


def dump_preprocessing(image_path, out_dir, superpixels: str = "slic", graph: str = "rag",
                       S: int = 4, knn_k: int = 15, connectivity: int = 4) -> dict:
    """Segment one image and write its label map, mask, patches, edges and mean-colour rendering."""
    image = read_image(image_path)
    _, h, w = image.shape
    if superpixels == "grid":
        mask = square_grid_segments(h, w, S)
        patch_config = PatchConfig.for_grid(h, S)
    elif superpixels == "slic":
        slic = SlicConfig.for_spacing(h, w, S)
        mask = slic0_segments(image, slic)
        patch_config = PatchConfig.for_slic(slic.k, S)
        if mask.n_segments > patch_config.max_patches:
            patch_config = PatchConfig(mask.n_segments, patch_config.search_patch_size)
    else:
        raise DumpError(f"unknown superpixel strategy {superpixels!r}")

    patchset = get_superpixel_patches(image, mask, patch_config)
    present = patchset.present.astype(bool)
    if graph == "fcg":
        g = build_fcg(present)
    elif graph == "knn":
        g = build_knn(patchset.centers, present, knn_k)
    elif graph == "rag":
        g = build_rag(mask, connectivity, n_nodes=patch_config.max_patches)
    else:
        raise DumpError(f"unknown graph strategy {graph!r}")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "labels_png": out / "segments.png",
        "labels_bin": out / "segments.bin",
        "patches": out / "patches.bin",
        "edges": out / "edges.txt",
        "mean_color": out / "mean_color.png",
    }
    _save_png(files["labels_png"], label_colors(mask.n_segments)[mask.labels])
    write_mask(mask, files["labels_bin"])
    write_patchset(patchset, files["patches"])
    write_edge_list(g, files["edges"])
    rendering = mean_color_image(image, mask.labels)
    _save_png(files["mean_color"], (rendering.transpose(1, 2, 0) * 255).round().clip(0, 255).astype(np.uint8))
    return {"mask": mask, "patchset": patchset, "graph": g, "files": files}

