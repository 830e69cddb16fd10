"""Command line entry point: ``spt {fetch,preprocess,train,sweep,plot,dump}``.

Every option may also come from a ``key = value`` file passed with
``--config``; command-line flags take precedence. Keys are option names
with dashes or underscores (``hidden-dim = 64``).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .data import DATA_ROOT_ENV, DATASETS, data_root, fetch, load_dataset
from .experiments import POSENC_NAMES, RunConfig, run_single, run_sweep, sweep_cells
from .training import TrainConfig

log = logging.getLogger("spt")


def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _csv_list(kind=str):
    return lambda text: [kind(v) for v in text.split(",") if v]


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file providing option defaults")
    p.add_argument("--dataset", choices=sorted(DATASETS), default="fashionmnist")
    p.add_argument("--data-root", help=f"dataset directory (default ${DATA_ROOT_ENV} or ~/data)")
    p.add_argument("--cache-dir", help="segment cache (default <data-root>/cache)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def _add_run_options(p: argparse.ArgumentParser, sweep: bool) -> None:
    if sweep:
        p.add_argument("--superpixels", type=_csv_list(), default=["slic", "grid"])
        p.add_argument("--posenc", type=_csv_list(), default=None,
                       help="default bert,linear,sincos (linear dropped for cifar10)")
        p.add_argument("--graph", type=_csv_list(), default=["fcg", "knn", "rag"])
        p.add_argument("--layers", type=_csv_list(int), default=[1, 2, 4])
        p.add_argument("--include-linear", type=_bool, nargs="?", const=True, default=False,
                       help="keep the linear encoding in cifar10 sweeps")
        p.add_argument("--jobs", type=int, default=1, help="cells trained in parallel")
    else:
        p.add_argument("--superpixels", choices=["slic", "grid"], default="slic")
        p.add_argument("--posenc", choices=sorted(POSENC_NAMES), default="sincos")
        p.add_argument("--graph", choices=["fcg", "knn", "rag"], default="rag")
        p.add_argument("--layers", type=int, default=4)
    p.add_argument("--preset", choices=["ti", "s", "b", "custom"], default="ti")
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--mlp-dim", type=int)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=32)
    p.add_argument("--batch-size", type=int, default=512)
    p.add_argument("--eval-batch-size", type=int, default=1024)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--plateau-factor", type=float, default=0.1)
    p.add_argument("--clip", type=_bool, nargs="?", const=True, default=None,
                   help="global gradient clipping at --clip-norm (default: per dataset)")
    p.add_argument("--clip-norm", type=float, default=1.0)
    p.add_argument("--knn-k", type=int, default=15)
    p.add_argument("--rag-connectivity", type=int, choices=[4, 8], default=4)
    p.add_argument("--sincos-printed-indexing", type=_bool, nargs="?", const=True, default=False,
                   help="use the literal interleave indices (sin overwrites cos)")
    p.add_argument("--limit-train", type=int)
    p.add_argument("--limit-valid", type=int)
    p.add_argument("--limit-test", type=int)
    p.add_argument("--out", default=None, help="output directory (default runs/<cell> or runs/sweep)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spt", description="Superpixel transformer experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch", help="download a dataset into the data root")
    _add_common(p)

    p = sub.add_parser("preprocess", help="segment all splits into the cache")
    _add_common(p)
    p.add_argument("--superpixels", type=_csv_list(), default=["slic"])
    p.add_argument("--S", type=int, dest="spacing")

    p = sub.add_parser("train", help="train a single configuration")
    _add_common(p)
    _add_run_options(p, sweep=False)

    p = sub.add_parser("sweep", help="train a grid of configurations")
    _add_common(p)
    _add_run_options(p, sweep=True)

    p = sub.add_parser("plot", help="SVG validation-accuracy curves from metrics.csv files")
    p.add_argument("--config")
    p.add_argument("metrics", nargs="+", help="metrics.csv files or run/sweep directories")
    p.add_argument("--out", default="plots")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("dump", help="write preprocessing debug files for one image")
    p.add_argument("--config")
    p.add_argument("image")
    p.add_argument("--out", default="dump")
    p.add_argument("--superpixels", choices=["slic", "grid"], default="slic")
    p.add_argument("--graph", choices=["fcg", "knn", "rag"], default="rag")
    p.add_argument("--S", type=int, dest="spacing", default=4)
    p.add_argument("--knn-k", type=int, default=15)
    p.add_argument("--rag-connectivity", type=int, choices=[4, 8], default=4)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        values = read_config_file(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        actions = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, text in values.items():
            key = {"S": "spacing"}.get(key, key)
            if key not in actions or key in ("config", "help"):
                parser.error(f"{args.config}: unknown option {key!r} for {args.command}")
            action = actions[key]
            try:
                value = action.type(text) if action.type is not None else text
            except (ValueError, argparse.ArgumentTypeError) as exc:
                parser.error(f"{args.config}: bad value for {key}: {exc}")
            if action.choices is not None and value not in action.choices:
                parser.error(f"{args.config}: {key} must be one of {sorted(action.choices)}")
            defaults[key] = value
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def run_config_from_args(args, **overrides) -> RunConfig:
    root = data_root(args.data_root)
    train = TrainConfig(learning_rate=args.lr, weight_decay=args.weight_decay,
                        grad_clip_norm=args.clip_norm, plateau_factor=args.plateau_factor,
                        batch_size=args.batch_size, eval_batch_size=args.eval_batch_size,
                        n_epochs=args.epochs, seed=args.seed)
    fields = dict(
        dataset=args.dataset, preset=args.preset, hidden_dim=args.hidden_dim, n_heads=args.heads,
        mlp_dim=args.mlp_dim, dropout=args.dropout, train=train, grad_clip=args.clip,
        out_dir=args.out or "runs", data_root=str(root), cache_dir=args.cache_dir or str(root / "cache"),
        knn_k=args.knn_k, rag_connectivity=args.rag_connectivity,
        printed_indexing=args.sincos_printed_indexing, limit_train=args.limit_train,
        limit_valid=args.limit_valid, limit_test=args.limit_test)
    fields.update(overrides)
    return RunConfig(**fields)


def sweep_posencs(dataset: str, requested=None, include_linear: bool = False) -> list[str]:
    """The linear encoding diverges on cifar10, so its sweeps skip it unless asked."""
    posencs = list(requested or ["bert", "linear", "sincos"])
    if dataset == "cifar10" and not include_linear:
        posencs = [p for p in posencs if p != "linear"]
    unknown = set(posencs) - set(POSENC_NAMES)
    if unknown:
        raise ValueError(f"unknown positional encoding(s): {', '.join(sorted(unknown))}")
    return posencs


def _metrics_files(items) -> list[Path]:
    out = []
    for item in map(Path, items):
        if item.is_dir():
            found = sorted(item.glob("**/metrics.csv"))
            if not found:
                raise ValueError(f"{item}: no metrics.csv found")
            out.extend(found)
        else:
            out.append(item)
    return out


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command in ("train", "sweep", "preprocess")
                        else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"spt {args.command}: error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    if args.command == "fetch":
        print(fetch(args.dataset, args.data_root))
    elif args.command == "preprocess":
        from .features import FeatureSpec, cached_segments

        root = data_root(args.data_root)
        spec_ds = DATASETS[args.dataset]
        splits = load_dataset(args.dataset, root, seed=args.seed)
        for strategy in args.superpixels:
            spec = FeatureSpec(strategy, "fcg", spec_ds.height, spec_ds.width, args.spacing or spec_ds.S)
            for name in ("train", "valid", "test"):
                part = getattr(splits, name)
                cached_segments(part.images, spec, args.cache_dir or root / "cache",
                                f"{args.dataset}_seed{args.seed}_{name}")
                print(f"{strategy} {name}: {len(part)} images cached")
    elif args.command == "train":
        config = run_config_from_args(args, superpixels=args.superpixels, posenc=args.posenc,
                                      graph=args.graph, n_layers=args.layers)
        if args.out is None:
            config = replace(config, out_dir=str(Path("runs") / config.cell_name))
        metrics = run_single(config)
        print(f"best valid acc {metrics.best_valid_acc:.4f} at epoch {metrics.best_epoch}; "
              f"test acc {metrics.test_acc:.4f}; outputs in {config.out_dir}")
    elif args.command == "sweep":
        posencs = sweep_posencs(args.dataset, args.posenc, args.include_linear)
        out = args.out or "runs/sweep"
        base = run_config_from_args(args)
        cells = sweep_cells(base, args.superpixels, posencs, args.graph, args.layers, out)
        rows = run_sweep(cells, out, jobs=args.jobs)
        print(f"{len(rows)}/{len(cells)} cells complete; summary in {Path(out) / 'summary.csv'}")
    elif args.command == "plot":
        from .reports import plot

        for path in plot(_metrics_files(args.metrics), args.out):
            print(path)
    elif args.command == "dump":
        from .reports import dump_preprocessing

        result = dump_preprocessing(args.image, args.out, args.superpixels, args.graph, args.spacing,
                                    args.knn_k, args.rag_connectivity)
        for path in result["files"].values():
            print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
