"""Command line entry point: ``python -m mtnn <subcommand> ...``.

Exit codes: 0 on success, 1 on usage errors, 2 on data errors (unreadable
or malformed inputs, inconsistent configurations).  Every subcommand writes
its fully resolved configuration as ``<subcommand>.config.json`` next to
its main output.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ParseError
from .groundtruth import load_table, pairwise_table, save_table
from .mergetree import load_trees, save_trees, trees_from_fields
from .model import ModelConfig
from .pipeline import (
    TrainConfig,
    benchmark,
    checkpoint_config,
    evaluate_pairs,
    export_attention,
    make_pairs,
    mds,
    predicted_matrix,
    save_report,
    split_trees,
    train,
    write_mds,
)
from .scalarfield import EnsembleSpec, generate, load_fields, save_fields

log = logging.getLogger("mtnn")

DEFAULT_TAU = 0.05


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _grid(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}, expected e.g. 32x32 or 64") from None
    return dims


def _range(cast):
    def parse(text: str):
        parts = text.split(",")
        if len(parts) != 2:
            raise argparse.ArgumentTypeError(f"expected lo,hi, got {text!r}")
        try:
            return (cast(parts[0]), cast(parts[1]))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad range {text!r}") from None

    return parse


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("MTNN_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"MTNN_SEED must be an integer, got {env!r}") from None


def _echo(out: Path, name: str, config: dict) -> None:
    """Write the resolved configuration of a run next to its output."""
    directory = out if out.is_dir() else out.parent
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / f"{name}.config.json", "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _load_model(path):
    params, cfg, _ = ad.load_checkpoint(path)
    if not params:
        raise ParseError("checkpoint holds no parameters", path)
    return params, cfg, ModelConfig.from_dict(cfg)


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    spec = EnsembleSpec(
        kind=args.kind,
        count=args.count,
        grid=args.grid,
        seed=args.seed,
        blobs=args.blobs,
        amplitude=args.amplitude,
        width=args.width,
        drift=args.drift,
        run_length=args.run_length,
        well_fraction=args.well_fraction,
        modes=args.modes,
        noise=args.noise,
        prefix=args.prefix,
    )
    fields = generate(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_fields(fields, out)
    _echo(out, "gen-data", {"command": "gen-data", "out": str(out), **vars(spec)})
    log.info("wrote %d fields to %s", len(fields), out)
    return 0


def cmd_build_trees(args) -> int:
    if args.tau < 0:
        raise ConfigError("tau must be non-negative")
    fields = load_fields(args.inp)
    trees = trees_from_fields(fields, args.tau)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_trees(trees, out)
    _echo(out, "build-trees", {"command": "build-trees", "in": args.inp, "out": str(out), "tau": args.tau})
    log.info("wrote %d trees to %s", len(trees), out)
    return 0


def cmd_ground_truth(args) -> int:
    trees = load_trees(args.trees)
    table = pairwise_table(trees, workers=args.workers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_table(table, out)
    _echo(
        out,
        "ground-truth",
        {"command": "ground-truth", "trees": args.trees, "out": str(out), "workers": args.workers},
    )
    log.info("wrote %dx%d distance table to %s", len(table.ids), len(table.ids), out)
    return 0


def cmd_train(args) -> int:
    trees = load_trees(args.trees)
    table = load_table(args.dists)
    model = ModelConfig(encoder=args.encoder, attention=args.attention)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tconfig = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        weight_decay=args.wd,
        seed=args.seed,
        model=model,
        checkpoint_dir=str(out / "checkpoints"),
        checkpoint_every=args.checkpoint_every,
    )
    train_idx, test_idx = split_trees(trees, args.seed)
    ds = make_pairs(trees, table, train_idx, test_idx, max_train_pairs=args.max_pairs, seed=args.seed)
    resolved = {
        "command": "train",
        "trees": args.trees,
        "dists": args.dists,
        "out_dir": str(out),
        "epochs": tconfig.epochs,
        "batch": tconfig.batch_size,
        "lr": tconfig.lr,
        "wd": tconfig.weight_decay,
        "seed": tconfig.seed,
        "max_pairs": args.max_pairs,
        "checkpoint_every": tconfig.checkpoint_every,
        "model": model.to_dict(),
        "target_norm": ds.norm,
        "n_train_pairs": int(len(ds.train_pairs)),
    }
    _echo(out, "train", resolved)

    def progress(epoch, loss, _params):
        log.info("epoch %d/%d loss %.6g", epoch + 1, tconfig.epochs, loss)

    params, losses = train(ds, tconfig, callback=progress)
    extra = {"max_pairs": str(args.max_pairs)} if args.max_pairs is not None else {}
    ad.save_checkpoint(out / "model.ckpt", params, checkpoint_config(tconfig, ds.norm, extra))
    with open(out / "loss.csv", "w", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        for e, v in enumerate(losses, 1):
            fh.write(f"{e},{v!r}\n")
    log.info("final loss %.6g; model written to %s", losses[-1], out / "model.ckpt")
    return 0


def cmd_eval(args) -> int:
    params, raw_cfg, model = _load_model(args.model)
    trees = load_trees(args.trees)
    table = load_table(args.dists)
    norm = float(raw_cfg["target_norm"]) if "target_norm" in raw_cfg else None
    if args.split == "all":
        ds = make_pairs(trees, table, np.arange(len(trees)), norm=norm)
        pairs, targets = ds.train_pairs, ds.train_targets
    else:
        seed = int(raw_cfg.get("seed", args.seed))
        train_idx, test_idx = split_trees(trees, seed)
        ds = make_pairs(trees, table, train_idx, test_idx, norm=norm)
        pairs, targets = (
            (ds.test_pairs, ds.test_targets) if args.split == "test" else (ds.train_pairs, ds.train_targets)
        )
    if len(pairs) == 0:
        raise ConfigError(f"no {args.split} pairs to evaluate")
    echo = {"model": args.model, "trees": args.trees, "dists": args.dists, "split": args.split}
    report = evaluate_pairs(params, model, ds.tree_data, pairs, targets, echo, workers=args.workers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_report(report, out)
    _echo(out, "eval", {"command": "eval", "out": str(out), "workers": args.workers, "target_norm": ds.norm, **echo})
    print(f"mse {report.mse:.6g} (x1e3: {report.mse_scaled:.4g}) over {len(pairs)} pairs")
    return 0


def cmd_bench(args) -> int:
    params, _, model = _load_model(args.model)
    trees = load_trees(args.trees)
    rep = benchmark(params, model, trees, args.pairs, seed=args.seed, workers=args.workers, repeats=args.repeats)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for k, v in rep.as_dict().items():
            fh.write(f"{k} {v!r}\n")
    _echo(
        out,
        "bench",
        {
            "command": "bench",
            "model": args.model,
            "trees": args.trees,
            "pairs": args.pairs,
            "seed": args.seed,
            "workers": args.workers,
            "repeats": args.repeats,
            "out": str(out),
        },
    )
    print(
        f"exact {rep.exact_us_per_pair:.1f} us/pair, model {rep.model_us_per_pair:.1f} us/pair, "
        f"speedup {rep.speedup:.1f}x"
    )
    return 0


def cmd_mds(args) -> int:
    table = load_table(args.dists)
    D = table.normalized
    ids = list(table.ids)
    source = "ground-truth"
    if args.model:
        if not args.trees:
            raise UsageError("--model requires --trees")
        params, _, model = _load_model(args.model)
        trees = load_trees(args.trees)
        by_id = {t.source_id: t for t in trees}
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise ConfigError(f"trees file lacks {len(missing)} table ids, e.g. {missing[0]}")
        D = predicted_matrix(params, model, [by_id[i] for i in ids])
        source = "model"
    coords, mean_dist = mds(D)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_mds(ids, coords, mean_dist, out)
    _echo(
        out,
        "mds",
        {"command": "mds", "dists": args.dists, "model": args.model, "trees": args.trees, "source": source, "out": str(out)},
    )
    return 0


def cmd_attention(args) -> int:
    params, _, model = _load_model(args.model)
    trees = load_trees(args.trees)
    if args.ids:
        wanted = args.ids.split(",")
        by_id = {t.source_id: t for t in trees}
        missing = [i for i in wanted if i not in by_id]
        if missing:
            raise ConfigError(f"unknown tree id {missing[0]!r}")
        trees = [by_id[i] for i in wanted]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_attention(params, model, trees, out)
    _echo(
        out,
        "attention",
        {"command": "attention", "model": args.model, "trees": args.trees, "ids": args.ids, "out": str(out)},
    )
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mtnn", description="Merge tree neural network pipeline.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def seed_arg(s):
        s.add_argument("--seed", type=int, default=None, help="global seed (fallback: $MTNN_SEED, then 0)")

    g = sub.add_parser("gen-data", help="generate a synthetic scalar-field ensemble")
    g.add_argument("--kind", choices=("gauss2d", "rand1d"), default="gauss2d")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--grid", type=_grid, required=True, help="e.g. 32x32 (gauss2d) or 64 (rand1d)")
    g.add_argument("--blobs", type=_range(int), default=EnsembleSpec.blobs, metavar="LO,HI")
    g.add_argument("--amplitude", type=_range(float), default=EnsembleSpec.amplitude, metavar="LO,HI")
    g.add_argument("--width", type=_range(float), default=EnsembleSpec.width, metavar="LO,HI")
    g.add_argument("--drift", type=float, default=EnsembleSpec.drift)
    g.add_argument("--run-length", type=int, default=EnsembleSpec.run_length)
    g.add_argument("--well-fraction", type=float, default=EnsembleSpec.well_fraction)
    g.add_argument("--modes", type=int, default=EnsembleSpec.modes)
    g.add_argument("--noise", type=float, default=EnsembleSpec.noise)
    g.add_argument("--prefix", default="", help="prefix for field ids")
    g.add_argument("--out", required=True)
    seed_arg(g)
    g.set_defaults(func=cmd_gen_data)

    b = sub.add_parser("build-trees", help="build and simplify join trees")
    b.add_argument("--in", dest="inp", required=True)
    b.add_argument("--tau", type=float, default=DEFAULT_TAU)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_trees)

    d = sub.add_parser("ground-truth", help="pairwise labeled interleaving distances")
    d.add_argument("--trees", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--workers", type=int, default=1)
    d.set_defaults(func=cmd_ground_truth)

    t = sub.add_parser("train", help="train a model on an 80/20 split")
    t.add_argument("--trees", required=True)
    t.add_argument("--dists", required=True)
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--batch", type=int, default=128)
    t.add_argument("--lr", type=float, default=0.001)
    t.add_argument("--wd", type=float, default=0.0005)
    t.add_argument("--encoder", choices=("gin", "gcn"), default="gin")
    t.add_argument("--attention", choices=("topological", "plain"), default="topological")
    t.add_argument("--max-pairs", type=int, default=None, help="subsample training pairs")
    t.add_argument("--checkpoint-every", type=int, default=10)
    t.add_argument("--out-dir", required=True)
    seed_arg(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="MSE of a trained model")
    e.add_argument("--model", required=True)
    e.add_argument("--trees", required=True)
    e.add_argument("--dists", required=True)
    e.add_argument(
        "--split",
        choices=("test", "train", "all"),
        default="test",
        help="'all' evaluates every pair (cross-domain use)",
    )
    e.add_argument("--out", required=True)
    e.add_argument("--workers", type=int, default=1)
    seed_arg(e)
    e.set_defaults(func=cmd_eval)

    n = sub.add_parser("bench", help="time exact distances against model inference")
    n.add_argument("--model", required=True)
    n.add_argument("--trees", required=True)
    n.add_argument("--pairs", type=int, default=1000)
    n.add_argument("--out", required=True)
    n.add_argument("--workers", type=int, default=1)
    n.add_argument("--repeats", type=int, default=3, help="timed runs per method; the fastest is kept")
    seed_arg(n)
    n.set_defaults(func=cmd_bench)

    m = sub.add_parser("mds", help="2D classical MDS of a distance matrix")
    m.add_argument("--dists", required=True)
    m.add_argument("--model", help="embed model predictions instead of ground truth")
    m.add_argument("--trees")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mds)

    a = sub.add_parser("attention", help="export per-node attention and topological weights")
    a.add_argument("--model", required=True)
    a.add_argument("--trees", required=True)
    a.add_argument("--ids", help="comma-separated tree ids (default: all)")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attention)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if hasattr(args, "seed"):
            args.seed = _resolve_seed(args)
        if getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be >= 1")
    except UsageError as e:
        print(e, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if not e.code else 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as e:
        print(f"mtnn {args.command}: error: {e}", file=sys.stderr)
        return 1
    except (ParseError, ConfigError, OSError, KeyError) as e:
        print(f"mtnn {args.command}: data error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
