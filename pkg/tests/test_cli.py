import csv
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from spt import experiments
from spt.cli import main, parse_args, read_config_file, sweep_posencs
from spt.data import DATA_ROOT_ENV, data_root, write_idx
from spt.experiments import RunConfig, read_manifest, run_single, run_sweep, sweep_cells
from spt.graph import read_edge_list
from spt.reports import DumpError, dump_preprocessing, mean_color_image, plot, read_image
from spt.segmentation import read_mask
from spt.training import TrainConfig, read_metrics_csv
from test_graph import rag_oracle


@pytest.fixture(scope="module")
def fake_root(tmp_path_factory):
    """A FashionMNIST-shaped data root whose class is a horizontal bright band."""
    root = tmp_path_factory.mktemp("data")
    base = root / "fashionmnist"
    base.mkdir()
    rng = np.random.default_rng(0)
    rows = np.arange(28)
    for prefix, n in (("train", 60_000), ("t10k", 10_000)):
        labels = rng.integers(0, 10, n).astype(np.uint8)
        band = (rows >= 2 * labels[:, None].astype(int)) & (rows < 2 * labels[:, None].astype(int) + 6)
        images = np.repeat((band * 200).astype(np.uint8)[:, :, None], 28, axis=2)
        write_idx(base / f"{prefix}-images-idx3-ubyte", images)
        write_idx(base / f"{prefix}-labels-idx1-ubyte", labels)
    return root


def tiny_run(root, out, **overrides):
    fields = dict(superpixels="slic", posenc="sincos", graph="rag", n_layers=1, preset="custom",
                  hidden_dim=8, n_heads=2, mlp_dim=16, dropout=0.0,
                  train=TrainConfig(n_epochs=2, batch_size=32, eval_batch_size=64, learning_rate=3e-3),
                  out_dir=str(out), data_root=str(root), cache_dir=str(root / "cache"),
                  limit_train=100, limit_valid=40, limit_test=40)
    fields.update(overrides)
    return RunConfig(**fields)


# --- run_single ------------------------------------------------------------

def test_single_run_smoke(fake_root, tmp_path):
    config = tiny_run(fake_root, tmp_path / "run")
    metrics = run_single(config)
    out = tmp_path / "run"
    for name in ("metrics.csv", "timing.csv", "best.ckpt", "manifest.txt"):
        assert (out / name).exists()
    manifest = read_manifest(out / "manifest.txt")
    assert manifest["superpixels"] == "slic" and manifest["graph"] == "rag" and manifest["n_layers"] == "1"
    assert float(manifest["best_valid_acc"]) == pytest.approx(metrics.best_valid_acc, abs=1e-6)
    assert len(read_metrics_csv(out / "metrics.csv")) == 2


def test_single_run_failure_is_recorded(tmp_path):
    config = tiny_run(tmp_path / "nowhere", tmp_path / "run")
    with pytest.raises(RuntimeError, match=config.cell_name):
        run_single(config)
    assert "fashionmnist" in (tmp_path / "run" / "failure.txt").read_text()
    assert not (tmp_path / "run" / "manifest.txt").exists()


def test_run_config_validation(fake_root, tmp_path):
    with pytest.raises(ValueError):
        tiny_run(fake_root, tmp_path, posenc="rope")
    with pytest.raises(ValueError):
        tiny_run(fake_root, tmp_path, graph="star")
    with pytest.raises(ValueError):
        RunConfig(preset="custom", hidden_dim=8).encoder_config()


def test_grid_bert_fcg_uses_vit_shapes():
    config = RunConfig(superpixels="grid", posenc="bert", graph="fcg").encoder_config()
    assert (config.h_chunk, config.w_chunk, config.max_patches) == (4, 4, 49)
    assert config.hidden_dim == 192 and config.n_heads == 3 and config.mlp_dim == 768


# --- sweep -----------------------------------------------------------------

@pytest.fixture(scope="module")
def mini_sweep(fake_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    base = tiny_run(fake_root, out, train=TrainConfig(n_epochs=2, batch_size=32, learning_rate=3e-3),
                    limit_train=64, limit_valid=32, limit_test=32)
    cells = sweep_cells(base, ["slic", "grid"], ["bert", "sincos"], ["fcg", "rag"], [1, 2], out)
    rows = run_sweep(cells, out)
    return out, cells, rows


def test_sweep_has_one_row_per_cell(mini_sweep):
    out, cells, rows = mini_sweep
    assert len(rows) == 16
    keys = {(r["S"], r["P"], r["G"], r["layers"]) for r in rows}
    assert len(keys) == 16
    with open(out / "summary.csv") as f:
        table = list(csv.DictReader(f))
    assert list(table[0]) == ["S", "P", "G", "best_valid_acc", "last_valid_acc", "best_epoch", "last_epoch", "layers"]
    assert len(table) == 16
    assert not (out / "failures.csv").exists()
    for cell in cells:
        run = Path(cell.out_dir)
        assert (run / "manifest.txt").exists() and (run / "best.ckpt").exists()


def test_summary_matches_run_csv_maximum(mini_sweep):
    out, cells, _ = mini_sweep
    with open(out / "summary.csv") as f:
        table = list(csv.DictReader(f))
    for row, cell in zip(table, cells):
        epochs = read_metrics_csv(Path(cell.out_dir) / "metrics.csv")
        accs = [e["valid_acc"] for e in epochs]
        assert float(row["best_valid_acc"]) == pytest.approx(max(accs), abs=5e-7)
        assert int(row["best_epoch"]) == accs.index(max(accs)) + 1
        assert float(row["last_valid_acc"]) == pytest.approx(accs[-1], abs=5e-7)
        assert int(row["last_epoch"]) == len(accs)
    best = max(table, key=lambda r: float(r["best_valid_acc"]))
    cell = next(c for c in cells if (c.superpixels, c.posenc, c.graph, str(c.n_layers))
                == (best["S"], best["P"], best["G"], best["layers"]))
    accs = [e["valid_acc"] for e in read_metrics_csv(Path(cell.out_dir) / "metrics.csv")]
    assert float(best["best_valid_acc"]) == pytest.approx(max(accs), abs=5e-7)


def test_resumed_sweep_trains_nothing(mini_sweep, monkeypatch):
    out, cells, rows = mini_sweep
    before = (out / "summary.csv").read_bytes()

    def no_training(*args, **kwargs):
        raise AssertionError("training step on a completed cell")

    monkeypatch.setattr(experiments, "train", no_training)
    again = run_sweep(cells, out)
    assert again == rows
    assert (out / "summary.csv").read_bytes() == before
    assert not (out / "failures.csv").exists()


def test_sweep_records_failures_and_continues(fake_root, tmp_path):
    good = tiny_run(fake_root, tmp_path / "good", limit_train=32, limit_valid=16, limit_test=16,
                    train=TrainConfig(n_epochs=1, batch_size=16))
    bad = replace(good, n_layers=2, data_root=str(tmp_path / "missing"), out_dir=str(tmp_path / "bad"))
    rows = run_sweep([good, bad], tmp_path)
    assert len(rows) == 1
    with open(tmp_path / "failures.csv") as f:
        failures = list(csv.DictReader(f))
    assert [r["cell"] for r in failures] == [bad.cell_name]
    assert (tmp_path / "bad" / "failure.txt").exists()


def test_sweep_rejects_duplicate_cells(fake_root, tmp_path):
    cell = tiny_run(fake_root, tmp_path / "a")
    with pytest.raises(ValueError, match="duplicate"):
        run_sweep([cell, cell], tmp_path)


def test_parallel_sweep(fake_root, tmp_path):
    base = tiny_run(fake_root, tmp_path, limit_train=32, limit_valid=16, limit_test=16,
                    train=TrainConfig(n_epochs=1, batch_size=16))
    cells = sweep_cells(base, ["grid"], ["bert"], ["fcg"], [1, 2], tmp_path)
    assert len(run_sweep(cells, tmp_path, jobs=2)) == 2


def test_cifar_sweep_drops_linear_by_default():
    assert sweep_posencs("cifar10") == ["bert", "sincos"]
    assert sweep_posencs("cifar10", include_linear=True) == ["bert", "linear", "sincos"]
    assert sweep_posencs("fashionmnist") == ["bert", "linear", "sincos"]
    with pytest.raises(ValueError):
        sweep_posencs("fashionmnist", ["rope"])


# --- plot ------------------------------------------------------------------

def write_run(path: Path, accs, layers=2, posenc="sincos", graph="rag"):
    path.mkdir(parents=True)
    lines = ["epoch,train_loss,valid_acc,lr,skipped_batches"]
    lines += [f"{i},0.5,{a:.6f},0.001,0" for i, a in enumerate(accs, 1)]
    (path / "metrics.csv").write_text("\n".join(lines) + "\n")
    (path / "manifest.txt").write_text(f"n_layers = {layers}\nposenc = {posenc}\ngraph = {graph}\n")
    return path / "metrics.csv"


def curve_ids(svg: Path):
    import re

    return re.findall(r'id="(curve-\d+-\d+)"', svg.read_text())


def test_plot_single_run(tmp_path):
    written = plot([write_run(tmp_path / "run_a", [0.3, 0.5, 0.6])], tmp_path / "plots")
    assert [p.name for p in written] == ["valid_acc_by_layers.svg", "valid_acc_by_posenc_graph.svg"]
    for svg in written:
        assert curve_ids(svg) == ["curve-0-0"]
    assert "L=2: run_a" in written[0].read_text()
    assert "sincos+rag: run_a" in written[1].read_text()


def test_plot_two_identical_runs_are_distinguished(tmp_path):
    paths = [write_run(tmp_path / name, [0.4, 0.7]) for name in ("first", "second")]
    written = plot(paths, tmp_path / "plots")
    text = written[0].read_text()
    assert len(curve_ids(written[0])) == 2
    assert "L=2: first" in text and "L=2: second" in text


def test_plot_groups_by_layers(tmp_path):
    paths = [write_run(tmp_path / "a", [0.4], layers=1), write_run(tmp_path / "b", [0.5], layers=4, graph="knn")]
    by_layers, by_pg = plot(paths, tmp_path / "plots")
    assert sorted(curve_ids(by_layers)) == ["curve-0-0", "curve-1-0"]
    assert "sincos+knn: b" in by_pg.read_text()


def test_plot_is_byte_stable(tmp_path):
    p = write_run(tmp_path / "a", [0.1, 0.2])
    first = plot([p], tmp_path / "p1")[0].read_bytes()
    assert plot([p], tmp_path / "p2")[0].read_bytes() == first


@pytest.mark.parametrize("content", ["", "epoch,train_loss,valid_acc,lr,skipped_batches\n1,x,0.5,0.1,0\n"])
def test_plot_bad_input_writes_nothing(tmp_path, content):
    good = write_run(tmp_path / "good", [0.5])
    bad = tmp_path / "bad.csv"
    bad.write_text(content)
    with pytest.raises(ValueError):
        plot([good, bad], tmp_path / "plots")
    assert not (tmp_path / "plots").exists()
    assert main(["plot", str(bad), "--out", str(tmp_path / "plots")]) == 1
    assert not (tmp_path / "plots").exists()


def test_plot_cli_accepts_directories(tmp_path, capsys):
    write_run(tmp_path / "sweep" / "a", [0.5])
    write_run(tmp_path / "sweep" / "b", [0.6])
    assert main(["plot", str(tmp_path / "sweep"), "--out", str(tmp_path / "plots")]) == 0
    assert len(curve_ids(tmp_path / "plots" / "valid_acc_by_layers.svg")) == 2


# --- dump ------------------------------------------------------------------

def save_png(path, rgb_hwc):
    from PIL import Image

    Image.fromarray(rgb_hwc).save(path)
    return path


@pytest.fixture
def png(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, (28, 28, 3)).astype(np.uint8)
    return save_png(tmp_path / "img.png", rgb)


def test_dump_grid(png, tmp_path):
    result = dump_preprocessing(png, tmp_path / "out", superpixels="grid", graph="rag")
    assert result["mask"].n_segments == 49
    labels = read_mask(result["files"]["labels_bin"]).labels
    assert labels.shape == (28, 28) and len(np.unique(labels)) == 49
    for name in ("labels_png", "patches", "edges", "mean_color"):
        assert result["files"][name].exists()


def test_mean_color_of_grid_is_blockwise_average(png, tmp_path):
    result = dump_preprocessing(png, tmp_path / "out", superpixels="grid")
    image = read_image(png).astype(np.float64)
    blocks = image.reshape(3, 7, 4, 7, 4).mean(axis=(2, 4))
    expected = np.repeat(np.repeat(blocks, 4, axis=1), 4, axis=2)
    np.testing.assert_allclose(mean_color_image(image, result["mask"].labels), expected, rtol=0, atol=1e-12)
    from PIL import Image

    with Image.open(result["files"]["mean_color"]) as im:
        written = np.asarray(im).transpose(2, 0, 1)
    np.testing.assert_array_equal(written, (expected * 255).round().astype(np.uint8))


@pytest.mark.parametrize("superpixels", ["slic", "grid"])
def test_dump_rag_edges_match_oracle(png, tmp_path, superpixels):
    result = dump_preprocessing(png, tmp_path / "out", superpixels=superpixels, graph="rag")
    assert read_edge_list(result["files"]["edges"]) == sorted(rag_oracle(result["mask"].labels))


def test_dump_unreadable_input(tmp_path):
    bogus = tmp_path / "x.png"
    bogus.write_text("not an image")
    with pytest.raises(DumpError):
        dump_preprocessing(bogus, tmp_path / "out")
    assert main(["dump", str(bogus), "--out", str(tmp_path / "out")]) == 1
    assert not (tmp_path / "out").exists()


def test_dump_cli(png, tmp_path, capsys):
    assert main(["dump", str(png), "--superpixels", "grid", "--graph", "knn", "--out", str(tmp_path / "o")]) == 0
    assert len(read_edge_list(tmp_path / "o" / "edges.txt")) > 0
    assert "edges.txt" in capsys.readouterr().out


# --- command line and config files ----------------------------------------

def test_config_file_defaults_and_overrides(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# cell\nsuperpixels = grid\nhidden-dim = 16\nheads=2\nclip = false\nlayers = 3\n")
    assert read_config_file(cfg)["hidden_dim"] == "16"
    args = parse_args(["train", "--config", str(cfg)])
    assert (args.superpixels, args.hidden_dim, args.heads, args.clip, args.layers) == ("grid", 16, 2, False, 3)
    args = parse_args(["train", "--config", str(cfg), "--superpixels", "slic", "--layers", "1"])
    assert (args.superpixels, args.layers, args.hidden_dim) == ("slic", 1, 16)


def test_config_file_for_dump_maps_spacing(tmp_path):
    cfg = tmp_path / "dump.cfg"
    cfg.write_text("S = 7\n")
    assert parse_args(["dump", "img.png", "--config", str(cfg)]).spacing == 7


@pytest.mark.parametrize("text", ["colour = red\n", "graph = star\n", "layers = many\n", "just words\n"])
def test_config_file_errors(tmp_path, text):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(text)
    with pytest.raises((SystemExit, ValueError)):
        parse_args(["train", "--config", str(cfg)])


def test_flag_vocabulary():
    args = parse_args(["sweep", "--superpixels", "slic,grid", "--posenc", "bert,sincos", "--graph", "rag",
                       "--layers", "1,2,4"])
    assert args.superpixels == ["slic", "grid"] and args.posenc == ["bert", "sincos"]
    assert args.layers == [1, 2, 4]
    with pytest.raises(SystemExit):
        parse_args(["train", "--graph", "star"])


def test_data_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv(DATA_ROOT_ENV, str(tmp_path))
    assert data_root() == tmp_path
    assert data_root("elsewhere") == Path("elsewhere")


def test_train_cli_end_to_end(fake_root, tmp_path, capsys):
    code = main(["train", "--data-root", str(fake_root), "--superpixels", "grid", "--posenc", "bert",
                 "--graph", "fcg", "--layers", "1", "--preset", "custom", "--hidden-dim", "8", "--heads", "2",
                 "--mlp-dim", "16", "--epochs", "1", "--batch-size", "32", "--limit-train", "64",
                 "--limit-valid", "32", "--limit-test", "32", "--out", str(tmp_path / "run")])
    assert code == 0
    assert "best valid acc" in capsys.readouterr().out
    assert read_manifest(tmp_path / "run" / "manifest.txt")["posenc"] == "bert"


def test_train_cli_reports_missing_data(tmp_path, capsys):
    code = main(["train", "--data-root", str(tmp_path), "--epochs", "1", "--out", str(tmp_path / "run")])
    assert code == 1
    assert "not found" in capsys.readouterr().err
