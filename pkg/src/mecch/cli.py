"""Command-line entry point: ``mecch train|eval|bench|export-embeddings|generate``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time

from . import bench
from .context import build_all_contexts, build_khop_store, cache_key, load_store, save_store
from .errors import ConfigError, MecchError, TaskMismatchError, CheckpointMismatchError
from .graph import load_graph, metapaths_by_type
from .io import load_config, load_lp_splits, load_nc_splits, write_history
from .model import forward, init_params, load_checkpoint, save_checkpoint, check_params
from .training import evaluate, primary_metric, train

log = logging.getLogger("mecch")


class UsageError(ConfigError):
    category = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser():
    parser = _Parser(prog="mecch", description="Metapath-context heterogeneous GNN")
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker cap for context construction")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides [train] out_dir)")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="write the metrics summary here as JSON")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("bench", help="verify aggregation counts on typed trees")
    p.add_argument("--n", type=_int_list, default=[2, 3])
    p.add_argument("--K", type=_int_list, default=[1, 2, 3])
    p.add_argument("--out", default="complexity_report.csv")

    p = sub.add_parser("export-embeddings", help="write final node representations as TSV")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--node-type", help="node type to export (default: the task's target type)")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("generate", help="write a planted synthetic dataset with a config")
    p.add_argument("--kind", choices=["nc", "lp"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    return parser


# ------------------------------------------------------------------ pipeline

def prepare(run, threads=1, model_config=None):
    """Load data and build contexts for ``model_config`` (defaults to the run's)."""
    data = run.data
    g = load_graph(data["nodes"], data["edges"], data["schema"])
    if run.data["task"] == "node_classification":
        splits = load_nc_splits(g, data["labels"], data["splits"], data["target_type"], data["num_classes"])
        default_out = splits.num_classes
    else:
        splits = load_lp_splits(g, data)
        default_out = (model_config or run.model).hidden_dim
    cfg = model_config or run.model
    if cfg.output_dim is None:
        cfg = dataclasses.replace(cfg, output_dim=default_out)

    K = cfg.metapath_length
    metapaths = {} if cfg.variant == "KHOP" else metapaths_by_type(g.schema, K, cfg.max_metapaths)
    cache_dir = os.environ.get("MECCH_CACHE_DIR")
    cache_path = None
    if run.cache and cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
        variant = "khop" if cfg.variant == "KHOP" else "metapath"
        cache_path = os.path.join(cache_dir, f"ctx-{cache_key(g, variant, K, metapaths)}.bin")
    store = load_store(cache_path, g) if cache_path else None
    if store is None:
        if cfg.variant == "KHOP":
            store = build_khop_store(g, K)
        else:
            store = build_all_contexts(g, metapaths, workers=threads)
        if cache_path:
            save_store(store, cache_path)
    return g, splits, cfg, metapaths, store


def _metapath_summary(g, store):
    out = {}
    for t in sorted(store.segments):
        out[g.schema.node_type_names[t]] = [
            "khop" if s.metapath is None else s.metapath.label(g.schema) for s in store.segments[t]
        ]
    return out


def cmd_train(args):
    run = load_config(args.config, args.seed)
    out_dir = os.path.abspath(args.out) if args.out else run.out_dir
    os.makedirs(out_dir, exist_ok=True)
    t0 = time.perf_counter()
    g, splits, cfg, _, store = prepare(run, args.threads)
    result = train(g, store, splits, cfg, run.train)
    test = evaluate(g, store, result.params, cfg, splits, "test")
    meta = {"graph_hash": g.structure_hash(), "metapaths": _metapath_summary(g, store)}
    save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), cfg, result.params, meta)
    write_history(result.history, os.path.join(out_dir, "history.csv"))
    summary = {
        "task": splits.task,
        "variant": cfg.variant,
        "seed": cfg.seed,
        "test": test,
        "best_epoch": result.best_epoch,
        "best_valid_" + primary_metric(splits.task): result.best_metric,
        "epochs_run": len(result.history),
        "metapaths": meta["metapaths"],
        "context_store_bytes": store.nbytes,
        "seconds": time.perf_counter() - t0,
    }
    with open(os.path.join(out_dir, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(json.dumps({"test": test, "best_epoch": result.best_epoch, "out_dir": out_dir}, sort_keys=True))
    return 0


def _load_for_checkpoint(args):
    run = load_config(args.config, args.seed)
    cfg, params, meta = load_checkpoint(args.checkpoint)
    if cfg.task != run.data["task"]:
        raise TaskMismatchError(f"checkpoint was trained for {cfg.task!r}, config asks for {run.data['task']!r}")
    g, splits, cfg, _, store = prepare(run, args.threads, cfg)
    if meta.get("graph_hash") and meta["graph_hash"] != g.structure_hash():
        raise CheckpointMismatchError("checkpoint was trained on a different graph")
    check_params(params, init_params(g, store, cfg))
    return g, splits, cfg, store, params


def cmd_eval(args):
    g, splits, cfg, store, params = _load_for_checkpoint(args)
    test = evaluate(g, store, params, cfg, splits, "test")
    summary = {"task": splits.task, "variant": cfg.variant, "test": test}
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    print(text)
    return 0


def cmd_bench(args):
    if any(k < 1 for k in args.K) or any(n < 2 for n in args.n):
        raise UsageError("bench needs n >= 2 and K >= 1")
    rows = bench.verify_complexity(args.n, args.K)
    bench.write_report(rows, args.out)
    for row in rows:
        print(f"n={row['n']} K={row['K']} MN={row['count_MN']} MC={row['count_MC']} "
              f"MI={row['count_MI']} {'pass' if row['pass'] else 'FAIL'}")
    return 0 if all(r["pass"] for r in rows) else 1


def cmd_export(args):
    g, splits, cfg, store, params = _load_for_checkpoint(args)
    if args.node_type:
        if args.node_type not in g.schema.node_type_names:
            raise UsageError(f"unknown node type {args.node_type!r}; "
                             f"expected one of {list(g.schema.node_type_names)}")
        t = g.schema.node_type_id(args.node_type)
    elif splits.task == "node_classification":
        t = splits.target_type
    else:
        t = int(g.node_type[splits.edges["train"][0, 0]])
    h = forward(g, store, params, cfg, training=False)[t].data
    tname = g.schema.node_type_names[t]
    with open(args.out, "w", encoding="utf-8") as fh:
        for v, row in zip(g.nodes_of(t).tolist(), h):
            fh.write(f"{g.ext_ids[v]}\t{tname}\t{','.join(repr(float(x)) for x in row)}\n")
    return 0


def cmd_generate(args):
    if args.kind == "nc":
        ds = bench.make_planted_nc_dataset(seed=args.seed)
    else:
        ds = bench.make_planted_lp_dataset(seed=args.seed)
    print(bench.write_dataset(ds, args.out))
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "export-embeddings": cmd_export,
    "generate": cmd_generate,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except MecchError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {exc.category}: {msg}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
