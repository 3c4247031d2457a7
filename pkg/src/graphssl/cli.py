"""Command line entry point: one subcommand per pipeline stage.

Every run writes its outputs plus a ``<output>.manifest.json`` recording the
subcommand, the resolved configuration, seeds, paths, tool version and wall
time. Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import functools
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, batching
from .data import (
    DataError,
    SynthSpec,
    apply_norm,
    drop_labels,
    load_dataset,
    normalize,
    save_dataset,
    split_dataset,
    synth_generate,
    window_features,
)
from .graph import (
    GraphError,
    export_edge_list,
    knn_graph,
    load_graph,
    rbf_affinities,
    save_graph,
    sigma_candidates,
    symmetrize,
)
from .model import Hyperparams, ModelError, forward, load_checkpoint, save_checkpoint
from .partition import (
    PartitionError,
    adjacency,
    balance_ratio,
    edge_cut,
    load_partition,
    partition_balanced,
    save_partition,
)
from .trainer import (
    STRATEGIES,
    TrainConfig,
    TrainingDiverged,
    config_dict,
    evaluate,
    grid_cells,
    sweep,
    train,
)

log = logging.getLogger("graphssl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fmt(prog):
    return argparse.ArgumentDefaultsHelpFormatter(prog, max_help_position=32)


# --- config files ----------------------------------------------------------------------------


def read_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Keys use ``_`` or ``-``."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config(parser: argparse.ArgumentParser, sub: argparse.ArgumentParser, argv, values: dict):
    """Re-parse with config values installed as defaults, so flags still win."""
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(action, argparse.BooleanOptionalAction) or action.nargs == 0:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key!r} expects a boolean")
            defaults[key] = low in ("true", "1", "yes")
        else:
            try:
                defaults[key] = action.type(raw) if action.type else raw
            except (TypeError, ValueError) as exc:
                raise UsageError(f"bad value for config key {key!r}: {exc}") from exc
            if action.choices is not None and defaults[key] not in action.choices:
                raise UsageError(f"config key {key!r} must be one of {list(action.choices)}")
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# --- manifests -------------------------------------------------------------------------------


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (np.integer, np.floating)):
        return v.item()
    if isinstance(v, tuple):
        return list(v)
    return v


def write_manifest(primary_output, command: str, args, inputs: dict, outputs: dict,
                   seeds: dict, extra: dict | None, started: float) -> Path:
    config = {k: _jsonable(v) for k, v in sorted(vars(args).items())
              if k not in ("func", "command", "log_level")}
    manifest = {
        "subcommand": command,
        "config": config,
        "seeds": seeds,
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": {k: str(v) for k, v in outputs.items() if v is not None},
        "tool_version": __version__,
        "wall_time": round(time.perf_counter() - started, 6),
    }
    if extra:
        manifest["results"] = {k: _jsonable(v) for k, v in extra.items()}
    path = Path(f"{primary_output}.manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _hidden(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    try:
        dims = tuple(int(t) for t in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"hidden widths must be comma-separated integers: {text!r}") from exc
    if any(d < 1 for d in dims):
        raise argparse.ArgumentTypeError("hidden widths must be positive")
    return dims


# --- subcommands -----------------------------------------------------------------------------


def cmd_gen_data(args, started):
    if args.n % args.classes:
        raise DataError(f"--n {args.n} is not a multiple of --classes {args.classes}")
    ds = synth_generate(SynthSpec(args.classes, args.n // args.classes, args.spec, args.noise,
                                  seed=args.seed, dim=args.dim))
    test = None
    if args.test_fraction > 0:
        if args.test_output is None:
            raise UsageError("--test-fraction needs --test-output")
        ds, test = split_dataset(ds, args.test_fraction, seed=args.seed)
    if args.normalize:
        ds, stats = normalize(ds)
        if test is not None:
            test = apply_norm(test, stats)
    if args.label_ratio < 1.0:
        ds = drop_labels(ds, args.label_ratio, seed=args.seed)
    save_dataset(ds, args.output)
    outputs = {"dataset": args.output}
    if test is not None:
        save_dataset(test, args.test_output)
        outputs["test"] = args.test_output
    write_manifest(args.output, "gen-data", args, {}, outputs, {"seed": args.seed},
                   {"n": ds.n, "labeled": ds.n_labeled, "test_n": test.n if test else 0}, started)
    print(f"wrote {ds.n} samples ({ds.n_labeled} labeled) to {args.output}")


def cmd_prepare(args, started):
    ds = load_dataset(args.input)
    ds = window_features(ds, args.window)
    extra = {}
    if args.normalize:
        ds, stats = normalize(ds)
        extra = {"mean": stats.mean.tolist(), "std": stats.std.tolist()}
    if args.label_ratio < 1.0:
        ds = drop_labels(ds, args.label_ratio, seed=args.seed)
    save_dataset(ds, args.output)
    write_manifest(args.output, "prepare", args, {"dataset": args.input}, {"dataset": args.output},
                   {"seed": args.seed}, extra, started)
    print(f"wrote {ds.n} samples of dim {ds.dim} ({ds.n_labeled} labeled) to {args.output}")


def cmd_build_graph(args, started):
    ds = load_dataset(args.input)
    if not 1 <= args.sigma_index <= args.k:
        raise GraphError(f"--sigma-index must lie in [1, {args.k}]")
    knn = knn_graph(ds.features, args.k, method=args.method)
    cands = sigma_candidates(knn, min(max(5, args.sigma_index), args.k))
    sigma = args.sigma if args.sigma is not None else cands[args.sigma_index - 1]
    g = rbf_affinities(symmetrize(knn), sigma, args.exponent_mode)
    save_graph(g, args.output)
    outputs = {"graph": args.output}
    if args.edge_list:
        export_edge_list(g, args.edge_list)
        outputs["edge_list"] = args.edge_list
    write_manifest(args.output, "build-graph", args, {"dataset": args.input}, outputs, {},
                   {"sigma": g.sigma, "sigma_candidates": cands, "edges": g.nnz}, started)
    print(f"graph: {g.n} nodes, {g.nnz} directed edge entries, sigma={g.sigma:.6g}")


def cmd_partition(args, started):
    g = load_graph(args.graph)
    p = partition_balanced(g, args.parts, epsilon=args.epsilon, seed=args.seed, weighted=args.weighted)
    save_partition(p, args.output)
    cut, wcut = edge_cut(g.matrix, p)
    res = {"edge_cut": cut, "weighted_cut": wcut, "balance_ratio": balance_ratio(p),
           "max_part": int(p.part_sizes.max())}
    write_manifest(args.output, "partition", args, {"graph": args.graph}, {"partition": args.output},
                   {"seed": args.seed}, res, started)
    print(f"edge cut {cut}, balance {res['balance_ratio']:.4f}")


def cmd_batches(args, started):
    g = load_graph(args.graph)
    adj = adjacency(g)
    labels = load_dataset(args.input).class_ids() if args.input else None
    if labels is not None and len(labels) != g.n:
        raise DataError("dataset and graph sizes differ")
    if args.strategy == "meta":
        if args.partition:
            p = load_partition(args.partition)
            if p.n != g.n:
                raise PartitionError("partition and graph sizes differ")
            blocks = batching.blocks_from_partition(p, args.batch_size / args.blocks_per_batch)
        else:
            blocks = batching.make_mini_blocks(adj, args.batch_size, args.blocks_per_batch,
                                               seed=args.seed, epsilon=args.epsilon)
        batches = [b.nodes for b in batching.assemble_meta_batches(blocks, args.blocks_per_batch, args.seed)]
    elif args.strategy == "graph_partition_only":
        batches = batching.partition_batches(adj, args.batch_size, seed=args.seed, epsilon=args.epsilon)
    else:
        batches = batching.shuffled_batches(g.n, min(args.batch_size, g.n), args.seed)
    mg = batching.build_meta_batch_graph(batches, adj)
    conn = []
    with open(args.output, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["batch_id", "size", "connectivity", "entropy", "neighbor_count"])
        for i, b in enumerate(batches):
            c = batching.connectivity_score(b, adj)
            conn.append(c)
            ent = ""
            if labels is not None:
                known = b[labels[b] >= 0]
                ent = repr(batching.batch_entropy(known, labels)) if known.size else ""
            w.writerow([i, len(b), repr(c), ent, len(mg.neighbors(i))])
    write_manifest(args.output, "batches", args, {"graph": args.graph, "dataset": args.input,
                                                  "partition": args.partition},
                   {"batches": args.output}, {"seed": args.seed},
                   {"batch_count": len(batches), "mean_connectivity": float(np.mean(conn))}, started)
    print(f"{len(batches)} batches, mean connectivity {np.mean(conn):.4f}")


def _seeds(args) -> dict:
    pick = lambda v: args.seed if v is None else v  # noqa: E731
    return {"data_seed": pick(args.data_seed), "batch_seed": pick(args.batch_seed),
            "dropout_seed": pick(args.dropout_seed), "init_seed": pick(args.init_seed)}


def _train_objects(args, ds):
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, blocks_per_batch=args.blocks_per_batch,
                      strategy=args.strategy, stochastic_neighbor_reg=args.sgr, patience=args.patience,
                      holdout_fraction=args.holdout, hidden=args.hidden,
                      partition_epsilon=args.epsilon, **_seeds(args))
    prior = None
    if args.reg_target == "fixed_prior":
        if not args.prior_model:
            raise UsageError("--reg-target fixed_prior needs --prior-model")
        prior_params, _ = load_checkpoint(args.prior_model)
        prior = forward(prior_params, ds.features)
    hp = Hyperparams(gamma=args.gamma, kappa=args.kappa, lam=args.lam, reg_target=args.reg_target,
                     prior=prior, dropout_p=args.dropout, learning_rate=args.lr)
    return cfg, hp


def cmd_train(args, started):
    ds = load_dataset(args.input)
    if args.label_ratio < 1.0:
        ds = drop_labels(ds, args.label_ratio, seed=args.data_seed if args.data_seed is not None else args.seed)
    g = load_graph(args.graph)
    test = load_dataset(args.test, class_count=ds.class_count) if args.test else None
    cfg, hp = _train_objects(args, ds)
    stem = Path(args.output)
    inputs = {"dataset": args.input, "graph": args.graph, "test": args.test, "prior_model": args.prior_model}
    try:
        params, report = train(cfg, ds, g, hp, test=test)
    except TrainingDiverged as exc:
        ckpt = Path(f"{stem}.diverged.model")
        save_checkpoint(ckpt, exc.params, exc.state)
        write_manifest(stem, "train", args, inputs, {"checkpoint": ckpt}, _seeds(args),
                       {"diverged_at_epoch": exc.epoch, "error": str(exc)}, started)
        raise
    report.write(stem)
    save_checkpoint(f"{stem}.model", params)
    outputs = {"report_csv": f"{stem}.csv", "summary": f"{stem}.json", "model": f"{stem}.model"}
    write_manifest(stem, "train", args, inputs, outputs, _seeds(args),
                   {**report.summary(), "train_config": config_dict(cfg)}, started)
    s = report.summary()
    print(f"epochs {s['epochs_run']}, best epoch {s['best_epoch']}, test accuracy {s['test_accuracy']:.4f}")


def cmd_eval(args, started):
    params, _ = load_checkpoint(args.model)
    ds = load_dataset(args.input, class_count=params.class_count)
    cmap = None
    if args.collapse_map:
        cmap = [int(t) for t in Path(args.collapse_map).read_text().split()]
    try:
        acc = evaluate(params, ds, cmap)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    Path(args.output).write_text(json.dumps({"accuracy": acc, "n": int(ds.n_labeled)}, indent=2) + "\n")
    write_manifest(args.output, "eval", args, {"model": args.model, "dataset": args.input,
                                               "collapse_map": args.collapse_map},
                   {"result": args.output}, {}, {"accuracy": acc}, started)
    print(f"accuracy {acc:.4f}")


_SWEEP_KEYS = {"label_ratio", "strategy", "sgr", "gamma", "kappa", "lam", "dropout", "lr", "epochs",
               "batch_size", "blocks_per_batch", "block_size", "patience", "holdout", "hidden", "seed",
               "reg_target", "epsilon"}


def _sweep_cell(cell: dict, base: dict, paths: dict, out_dir: str, index_of) -> dict:
    """Train one grid cell; ``block_size`` (nodes per mini-block) sets blocks_per_batch."""
    opts = dict(base)
    opts.update(cell)
    if "block_size" in opts and opts["block_size"] is not None:
        opts["blocks_per_batch"] = max(1, round(opts["batch_size"] / opts["block_size"]))
    if isinstance(opts["hidden"], (str, int)):
        opts["hidden"] = _hidden(str(opts["hidden"]))
    opts["sgr"] = bool(opts["sgr"])
    ns = argparse.Namespace(**opts)
    ds = load_dataset(paths["input"])
    if ns.label_ratio < 1.0:
        ds = drop_labels(ds, ns.label_ratio, seed=ns.seed)
    g = load_graph(paths["graph"])
    test = load_dataset(paths["test"], class_count=ds.class_count) if paths.get("test") else None
    cfg, hp = _train_objects(ns, ds)
    _, report = train(cfg, ds, g, hp, test=test)
    stem = Path(out_dir) / f"cell_{index_of(cell):04d}_report"
    report.write(stem)
    return {**report.summary(), "report_csv": f"{stem}.csv"}


def _cell_text(v) -> str:
    return json.dumps(v) if isinstance(v, (list, dict)) else str(v)


def _cell_index(cells, cell):
    return cells.index(cell)


def cmd_sweep(args, started):
    grid = json.loads(Path(args.grid).read_text())
    if not isinstance(grid, dict):
        raise DataError("grid file must hold a JSON object")
    unknown = set(grid) - _SWEEP_KEYS
    if unknown:
        raise DataError(f"unknown grid keys: {sorted(unknown)}")
    base = {k: getattr(args, k) for k in ("label_ratio", "strategy", "sgr", "gamma", "kappa", "lam", "dropout",
                                          "lr", "epochs", "batch_size", "blocks_per_batch", "patience",
                                          "holdout", "hidden", "seed", "reg_target", "epsilon", "prior_model")}
    base.update({"data_seed": None, "batch_seed": None, "dropout_seed": None, "init_seed": None})
    paths = {"input": str(args.input), "graph": str(args.graph), "test": str(args.test) if args.test else None}
    cells = grid_cells(grid)
    run = functools.partial(_sweep_cell, base=base, paths=paths, out_dir=str(args.out_dir),
                            index_of=functools.partial(_cell_index, cells))
    results = sweep(grid, run, out_dir=args.out_dir, jobs=args.jobs)
    summary = Path(args.out_dir) / "summary.csv"
    keys = sorted(grid)
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell", *keys, "test_accuracy", "best_holdout_accuracy", "best_epoch", "error"])
        for i, r in enumerate(results):
            w.writerow([i, *[_cell_text(r["cell"].get(k)) for k in keys], r.get("test_accuracy", ""),
                        r.get("best_holdout_accuracy", ""), r.get("best_epoch", ""), r.get("error", "")])
    failed = sum("error" in r for r in results)
    write_manifest(summary, "sweep", args, {"grid": args.grid, **paths}, {"summary": summary},
                   {"seed": args.seed}, {"cells": len(results), "failed": failed}, started)
    print(f"{len(results)} cells ({failed} failed); summary in {summary}")


# --- parser ----------------------------------------------------------------------------------


def _add_train_flags(p):
    p.add_argument("--strategy", choices=STRATEGIES, default="meta", help="batch construction strategy")
    p.add_argument("--sgr", action=argparse.BooleanOptionalAction, default=True,
                   help="sample one neighbouring batch per step and regularize against it")
    p.add_argument("--gamma", type=float, default=0.1, help="graph regularizer weight")
    p.add_argument("--kappa", type=float, default=0.0, help="entropy regularizer weight")
    p.add_argument("--lam", type=float, default=1e-5, help="L2 weight decay")
    p.add_argument("--reg-target", choices=("uniform", "fixed_prior"), default="uniform",
                   help="distribution the entropy term pulls toward")
    p.add_argument("--prior-model", type=Path, default=None,
                   help="checkpoint whose posteriors serve as the fixed prior")
    p.add_argument("--dropout", type=float, default=0.0, help="dropout probability on hidden layers")
    p.add_argument("--lr", type=float, default=0.01, help="AdaGrad learning rate")
    p.add_argument("--epochs", type=int, default=100, help="maximum number of epochs")
    p.add_argument("--batch-size", type=int, default=512, help="nodes per batch (B)")
    p.add_argument("--blocks-per-batch", type=int, default=None,
                   help="mini-blocks per meta-batch; class count when omitted")
    p.add_argument("--patience", type=int, default=10, help="early-stopping patience in epochs")
    p.add_argument("--holdout", type=float, default=0.1, help="fraction of labels held out for early stopping")
    p.add_argument("--hidden", type=_hidden, default=(64,), help="comma-separated hidden layer widths")
    p.add_argument("--epsilon", type=float, default=0.05, help="partition imbalance tolerance")
    p.add_argument("--label-ratio", type=float, default=1.0, help="fraction of labels kept before training")
    p.add_argument("--seed", type=int, default=0, help="default for every seed below")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="graphssl", description="Graph-regularized semi-supervised training toolkit.",
                     formatter_class=_fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="WARNING", help="logging level")
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def sub(name, func, help_text):
        p = subs.add_parser(name, help=help_text, description=help_text, formatter_class=_fmt)
        p.add_argument("--config", type=Path, default=None, help="key = value file; flags override it")
        p.set_defaults(func=func)
        return p

    p = sub("gen-data", cmd_gen_data, "generate a synthetic dataset")
    p.add_argument("--spec", default="concentric-rings",
                   choices=("gaussian-mixture", "concentric-rings", "noisy-chains", "gmm", "rings", "chains"),
                   help="manifold type")
    p.add_argument("--n", type=int, default=1000, help="total sample count")
    p.add_argument("--classes", type=int, default=2, help="class count")
    p.add_argument("--noise", type=float, default=0.1, help="noise level")
    p.add_argument("--dim", type=int, default=2, help="feature dimension")
    p.add_argument("--test-fraction", type=float, default=0.0, help="fraction split off as a test set")
    p.add_argument("--test-output", type=Path, default=None, help="test set path")
    p.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=False,
                   help="zero-mean unit-variance features (test set uses training stats)")
    p.add_argument("--label-ratio", type=float, default=1.0, help="fraction of training labels kept")
    p.add_argument("--seed", type=int, default=0, help="generator, split and label-drop seed")
    p.add_argument("-o", "--output", type=Path, required=True, help="dataset path (.csv or binary)")

    p = sub("prepare", cmd_prepare, "window, normalize and drop labels of an existing dataset")
    p.add_argument("-i", "--input", type=Path, required=True, help="dataset path")
    p.add_argument("--window", type=int, default=0, help="context radius in frames")
    p.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=True,
                   help="zero-mean unit-variance features")
    p.add_argument("--label-ratio", type=float, default=1.0, help="fraction of labels kept")
    p.add_argument("--seed", type=int, default=0, help="label-drop seed")
    p.add_argument("-o", "--output", type=Path, required=True, help="output dataset path")

    p = sub("build-graph", cmd_build_graph, "build the k-NN affinity graph")
    p.add_argument("-i", "--input", type=Path, required=True, help="dataset path")
    p.add_argument("--k", type=int, default=10, help="neighbours per node")
    p.add_argument("--sigma-index", type=int, default=3, help="use sigma = d_i / 3 for this i")
    p.add_argument("--sigma", type=float, default=None, help="explicit kernel width (overrides --sigma-index)")
    p.add_argument("--exponent-mode", choices=("paper_unsquared", "squared"), default="paper_unsquared",
                   help="distance or squared distance in the kernel exponent")
    p.add_argument("--method", choices=("brute", "balltree"), default="brute", help="neighbour search")
    p.add_argument("--edge-list", type=Path, default=None, help="also write an 'i j w' text edge list")
    p.add_argument("-o", "--output", type=Path, required=True, help="graph path")

    p = sub("partition", cmd_partition, "balanced min-cut partition of a graph")
    p.add_argument("-g", "--graph", type=Path, required=True, help="graph path")
    p.add_argument("--parts", type=int, required=True, help="number of parts")
    p.add_argument("--epsilon", type=float, default=0.05, help="imbalance tolerance")
    p.add_argument("--weighted", action=argparse.BooleanOptionalAction, default=False,
                   help="minimize total cut weight instead of cut edge count")
    p.add_argument("--seed", type=int, default=0, help="partitioner seed")
    p.add_argument("-o", "--output", type=Path, required=True, help="partition file (one part id per line)")

    p = sub("batches", cmd_batches, "build one epoch of batches and write per-batch diagnostics")
    p.add_argument("-g", "--graph", type=Path, required=True, help="graph path")
    p.add_argument("-i", "--input", type=Path, default=None, help="dataset whose labels feed the entropy column")
    p.add_argument("--partition", type=Path, default=None, help="precomputed mini-block partition")
    p.add_argument("--strategy", choices=STRATEGIES, default="meta", help="batch construction strategy")
    p.add_argument("--batch-size", type=int, default=512, help="nodes per batch (B)")
    p.add_argument("--blocks-per-batch", type=int, default=2, help="mini-blocks per meta-batch")
    p.add_argument("--epsilon", type=float, default=0.05, help="partition imbalance tolerance")
    p.add_argument("--seed", type=int, default=0, help="partition and grouping seed")
    p.add_argument("-o", "--output", type=Path, required=True, help="CSV path")

    p = sub("train", cmd_train, "train a model")
    p.add_argument("-i", "--input", type=Path, required=True, help="training dataset")
    p.add_argument("-g", "--graph", type=Path, required=True, help="graph over the training samples")
    p.add_argument("--test", type=Path, default=None, help="labeled test dataset")
    _add_train_flags(p)
    for name in ("data", "batch", "dropout", "init"):
        p.add_argument(f"--{name}-seed", type=int, default=None, help=f"{name} seed (falls back to --seed)")
    p.add_argument("-o", "--output", type=Path, required=True, help="output stem for .csv/.json/.model")

    p = sub("eval", cmd_eval, "score a checkpoint on a labeled dataset")
    p.add_argument("-m", "--model", type=Path, required=True, help="checkpoint path")
    p.add_argument("-i", "--input", type=Path, required=True, help="labeled dataset")
    p.add_argument("--collapse-map", type=Path, default=None,
                   help="whitespace-separated scoring class for each model class")
    p.add_argument("-o", "--output", type=Path, required=True, help="JSON result path")

    p = sub("sweep", cmd_sweep, "train every cell of a JSON grid")
    p.add_argument("--grid", type=Path, required=True, help="JSON object; list values are swept")
    p.add_argument("-i", "--input", type=Path, required=True, help="training dataset")
    p.add_argument("-g", "--graph", type=Path, required=True, help="graph over the training samples")
    p.add_argument("--test", type=Path, default=None, help="labeled test dataset")
    _add_train_flags(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--out-dir", type=Path, required=True, help="directory for per-cell results")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    started = time.perf_counter()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config is not None:
            sub = parser._subparsers._group_actions[0].choices[args.command]
            args = _apply_config(parser, sub, argv, read_config(args.config))
        args.func(args, started)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"graphssl {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"graphssl {args.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, GraphError, PartitionError, batching.BatchError, ModelError,
            ValueError, OSError) as exc:
        print(f"graphssl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
