"""Command-line harness: train, finalize, evaluate, embed, bench.

Every run writes into a run directory: ``manifest.json`` (full resolved
configuration plus seed and library versions), ``metrics.csv`` (append-only
step/eval rows), ``model.ckpt`` (network plus Adam state), and for the
structure commands ``tree.bin`` / ``report.csv`` / ``embedding.csv`` /
``timing.csv``.  Flags can come from a JSON config file via ``--config``;
explicit flags win over the file, which wins over the per-algorithm
defaults.
"""

from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import NeuralNetClassifier
from .datasets import load_dataset_dir
from .dbs import DifferentiableBoundarySet
from .dbt import DifferentiableBoundaryTree
from .network import embed_batches, load_checkpoint, save_checkpoint
from .tree import BoundaryForestClassifier, BoundaryTreeClassifier

ALGORITHMS = ("dbs", "dbt_v1", "dbt_v2", "nnet_baseline")

# Hyperparameters reproducing the reference experimental protocol.
_DEFAULTS = {
    "dbs": dict(arch="784,400,400,20", n_build=100, n_query=100, sigma=60.0, lr=1e-3),
    "dbt_v1": dict(arch="784,400,400,20", n_build=1000, n_query=1000, sigma=1.0, lr=1e-4),
    "dbt_v2": dict(arch="784,400,400,20", n_build=1000, n_query=1000, sigma=60.0, lr=1e-4),
    "nnet_baseline": dict(arch="784,400,400,20,10", n_build=None, n_query=None, sigma=None, lr=1e-3),
}
_COMMON_DEFAULTS = dict(
    epochs=5000,
    lr_decay_epochs="400,1000,3000",
    eval_every=10,
    patience=20,
    eval_sample=10000,
    batch_size=100,
    max_children=None,
    seed=0,
)


def _parse_int_list(text):
    return [int(part) for part in str(text).split(",") if part != ""]


def _resolve(args, key, algorithm=None):
    """Flag value if given, else config-file value, else default."""
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if args._config and key in args._config:
        return args._config[key]
    if algorithm and key in _DEFAULTS[algorithm]:
        return _DEFAULTS[algorithm][key]
    return _COMMON_DEFAULTS.get(key)


def _load_config(path):
    if path is None:
        return {}
    with open(path) as f:
        config = json.load(f)
    if not isinstance(config, dict):
        raise ValueError("config file must hold a JSON object")
    return config


def _load_splits(args):
    n_classes = args.n_classes or None  # 0 = infer from the labels
    train = load_dataset_dir(args.data_dir, "train", n_classes=n_classes, name=args.dataset)
    test = load_dataset_dir(
        args.data_dir, "test", n_classes=n_classes or train.n_classes, name=args.dataset
    )
    if args.limit_train:
        train.points = train.points[: args.limit_train]
        train.labels = train.labels[: args.limit_train]
    if args.limit_test:
        test.points = test.points[: args.limit_test]
        test.labels = test.labels[: args.limit_test]
    return train, test


def _build_estimator(algorithm, arch, options, metrics_path):
    dims = _parse_int_list(arch)
    if len(dims) < 2:
        raise ValueError(f"architecture needs at least two dims, got {arch!r}")
    common = dict(
        learning_rate=options["lr"],
        lr_decay_epochs=tuple(_parse_int_list(options["lr_decay_epochs"])),
        epochs=options["epochs"],
        eval_every=options["eval_every"],
        patience=options["patience"],
        metrics_path=metrics_path,
        random_state=options["seed"],
        verbose=options["verbose"],
    )
    if algorithm == "nnet_baseline":
        return NeuralNetClassifier(
            hidden_dims=tuple(dims[1:-1]), batch_size=options["batch_size"], **common
        )
    common.update(
        hidden_dims=tuple(dims[1:-1]),
        embed_dim=dims[-1],
        n_build=options["n_build"],
        n_query=options["n_query"],
        sigma=options["sigma"],
        eval_sample_size=options["eval_sample"],
        max_children=options["max_children"],
        build_final=False,
    )
    if algorithm == "dbs":
        return DifferentiableBoundarySet(**common)
    return DifferentiableBoundaryTree(variant=algorithm.removeprefix("dbt_"), **common)


def _write_manifest(out_dir, payload):
    payload = dict(payload)
    payload["versions"] = {
        "boundarylearn": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _train_options(args, algorithm):
    keys = (
        "epochs lr lr_decay_epochs eval_every patience eval_sample batch_size "
        "max_children seed n_build n_query sigma"
    ).split()
    options = {key: _resolve(args, key, algorithm) for key in keys}
    options["verbose"] = args.verbose
    return options


def cmd_train(args):
    algorithm = args.algorithm
    train, test = _load_splits(args)
    arch = _resolve(args, "arch", algorithm)
    dims = _parse_int_list(arch)
    if dims[0] != train.points.shape[1]:
        raise ValueError(
            f"architecture input dim {dims[0]} does not match dataset dim "
            f"{train.points.shape[1]}"
        )
    if algorithm == "nnet_baseline" and dims[-1] != train.n_classes:
        raise ValueError(
            f"baseline architecture must end in {train.n_classes} (one unit per class)"
        )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    options = _train_options(args, algorithm)
    estimator = _build_estimator(algorithm, arch, options, str(out_dir / "metrics.csv"))
    _write_manifest(
        out_dir,
        dict(
            command="train",
            algorithm=algorithm,
            dataset=args.dataset,
            data_dir=str(args.data_dir),
            arch=arch,
            n_train=len(train),
            n_test=len(test),
            **{k: options[k] for k in sorted(options)},
        ),
    )
    t0 = time.perf_counter()
    estimator.fit(train.points, train.labels, eval_set=(test.points, test.labels))
    wall = time.perf_counter() - t0
    save_checkpoint(out_dir / "model.ckpt", estimator.net_, estimator.adam_)
    summary = dict(
        epochs_run=estimator.n_epochs_,
        best_test_error=estimator.best_eval_error_,
        wall_seconds=round(wall, 3),
    )
    with open(out_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    print(
        f"{algorithm}: {estimator.n_epochs_} epochs in {wall:.1f}s, "
        f"best test error {estimator.best_eval_error_}"
    )
    return 0


def _structure_error(structure, net, test):
    emb = embed_batches(net, test.points)
    return float(np.mean(structure.predict(emb) != test.labels))


def cmd_finalize(args):
    net, _ = load_checkpoint(args.checkpoint)
    train, test = _load_splits(args)
    if train.points.shape[1] != net.in_dim:
        raise ValueError(
            f"checkpoint expects {net.in_dim}-dim inputs, dataset has "
            f"{train.points.shape[1]}"
        )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    emb = embed_batches(net, train.points)
    if args.forest > 1:
        structure = BoundaryForestClassifier(
            n_trees=args.forest, max_children=args.max_children, random_state=args.seed
        ).fit(emb, train.labels)
        n_nodes = sum(tree.n_nodes_ for tree in structure.trees_)
        for k, tree in enumerate(structure.trees_):
            tree.save(out_dir / f"tree_{k}.bin")
    else:
        structure = BoundaryTreeClassifier(max_children=args.max_children).fit(
            emb, train.labels
        )
        n_nodes = structure.n_nodes_
        structure.save(out_dir / "tree.bin")
    error = _structure_error(structure, net, test)
    wall = time.perf_counter() - t0
    _write_manifest(
        out_dir,
        dict(
            command="finalize",
            checkpoint=str(args.checkpoint),
            dataset=args.dataset,
            data_dir=str(args.data_dir),
            forest=args.forest,
            max_children=args.max_children,
            seed=args.seed,
        ),
    )
    with open(out_dir / "report.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["model", "dataset", "test_error_percent", "n_nodes", "wall_seconds"])
        writer.writerow(
            [args.model_name, args.dataset, repr(100.0 * error), n_nodes, round(wall, 3)]
        )
    print(f"{args.model_name}: test error {100 * error:.2f}%, {n_nodes} nodes")
    return 0


def cmd_evaluate(args):
    net, _ = load_checkpoint(args.checkpoint)
    tree = BoundaryTreeClassifier.load(args.structure)
    _, test = _load_splits(args)
    error = _structure_error(tree, net, test)
    print(f"test error {100 * error:.4f}% ({tree.n_nodes_} nodes)")
    if args.out:
        with open(args.out, "w") as f:
            json.dump({"test_error": error, "n_nodes": tree.n_nodes_}, f)
            f.write("\n")
    return 0


def cmd_embed(args):
    net, _ = load_checkpoint(args.checkpoint)
    if net.out_dim != 2:
        raise ValueError(
            f"embedding export needs a 2-dim output layer, checkpoint has {net.out_dim}"
        )
    train, test = _load_splits(args)
    data = train if args.split == "train" else test
    rng = np.random.default_rng(args.seed)
    size = min(args.sample_size, len(data))
    subset = np.sort(rng.choice(len(data), size=size, replace=False)) if size else []
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "y", "label"])
        if size:
            emb = embed_batches(net, data.points[subset])
            for row, label in zip(emb, data.labels[subset]):
                writer.writerow([repr(float(row[0])), repr(float(row[1])), int(label)])
    print(f"wrote {size} embeddings to {out_path}")
    return 0


def cmd_bench(args):
    algorithms = [a.strip() for a in args.algorithms.split(",") if a.strip()]
    for algorithm in algorithms:
        if algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {algorithm!r}")
    train, test = _load_splits(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    timing_path = out_dir / "timing.csv"
    with open(timing_path, "w", newline="") as f:
        csv.writer(f).writerow(["algorithm", "epoch", "elapsed_seconds", "test_error"])
    _write_manifest(
        out_dir,
        dict(
            command="bench",
            algorithms=algorithms,
            dataset=args.dataset,
            data_dir=str(args.data_dir),
            epochs=_resolve(args, "epochs"),
            seed=_resolve(args, "seed"),
        ),
    )
    for algorithm in algorithms:
        run_dir = out_dir / algorithm
        run_dir.mkdir(exist_ok=True)
        arch = _resolve(args, "arch", algorithm)
        options = _train_options(args, algorithm)
        estimator = _build_estimator(algorithm, arch, options, str(run_dir / "metrics.csv"))

        def record(epoch, elapsed_s, test_error, _algorithm=algorithm):
            with open(timing_path, "a", newline="") as f:
                csv.writer(f).writerow(
                    [_algorithm, epoch, repr(float(elapsed_s)), repr(float(test_error))]
                )

        estimator.fit(
            train.points, train.labels,
            eval_set=(test.points, test.labels),
            eval_callback=record,
        )
        save_checkpoint(run_dir / "model.ckpt", estimator.net_, estimator.adam_)
        print(f"{algorithm}: done ({estimator.n_epochs_} epochs)")
    return 0


def _add_data_arguments(parser):
    parser.add_argument("--data-dir", required=True, help="directory with the IDX files")
    parser.add_argument("--dataset", default="digit-mnist", help="dataset name for reports")
    parser.add_argument("--n-classes", type=int, default=0,
                        help="class count (0 = infer from the training labels)")
    parser.add_argument("--limit-train", type=int, default=0,
                        help="use only the first N training points (0 = all)")
    parser.add_argument("--limit-test", type=int, default=0,
                        help="use only the first N test points (0 = all)")


def _add_train_arguments(parser):
    parser.add_argument("--config", help="JSON file with default option values")
    parser.add_argument("--arch", help="comma-separated layer dims incl. input/output")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--lr-decay-epochs", help="comma-separated decay breakpoints")
    parser.add_argument("--n-build", type=int)
    parser.add_argument("--n-query", type=int)
    parser.add_argument("--sigma", type=float)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--eval-every", type=int)
    parser.add_argument("--patience", type=int)
    parser.add_argument("--eval-sample", type=int)
    parser.add_argument("--max-children", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="boundarylearn",
        description="Boundary tree/set classifiers and embedding trainers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train an embedding or the MLP baseline")
    p_train.add_argument("--algorithm", choices=ALGORITHMS, required=True)
    _add_data_arguments(p_train)
    _add_train_arguments(p_train)
    p_train.add_argument("--out", required=True, help="run directory")
    p_train.set_defaults(func=cmd_train)

    p_final = sub.add_parser("finalize", help="build the deployment tree/forest")
    p_final.add_argument("--checkpoint", required=True)
    _add_data_arguments(p_final)
    p_final.add_argument("--out", required=True)
    p_final.add_argument("--forest", type=int, default=1, help="number of trees (1 = single)")
    p_final.add_argument("--max-children", type=int, default=None)
    p_final.add_argument("--seed", type=int, default=0)
    p_final.add_argument("--model-name", default="model")
    p_final.set_defaults(func=cmd_finalize)

    p_eval = sub.add_parser("evaluate", help="independent error of a saved tree")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--structure", required=True, help="tree.bin path")
    _add_data_arguments(p_eval)
    p_eval.add_argument("--out", help="optional JSON output path")
    p_eval.set_defaults(func=cmd_evaluate)

    p_embed = sub.add_parser("embed", help="export 2-D embeddings as CSV")
    p_embed.add_argument("--checkpoint", required=True)
    _add_data_arguments(p_embed)
    p_embed.add_argument("--split", choices=("train", "test"), default="train")
    p_embed.add_argument("--sample-size", type=int, default=1000)
    p_embed.add_argument("--seed", type=int, default=0)
    p_embed.add_argument("--out", required=True, help="CSV output path")
    p_embed.set_defaults(func=cmd_embed)

    p_bench = sub.add_parser("bench", help="time-to-error comparison runs")
    p_bench.add_argument("--algorithms", default="dbs,dbt_v1")
    _add_data_arguments(p_bench)
    _add_train_arguments(p_bench)
    p_bench.add_argument("--out", required=True)
    p_bench.set_defaults(func=cmd_bench)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "verbose"):
        args.verbose = False
    try:
        args._config = _load_config(getattr(args, "config", None))
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
