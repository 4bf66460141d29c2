"""Command-line entry point.

Subcommands: ``similarity``, ``train``, ``cv``, ``coldstart``, ``sweep``, ``stats`` and
``convert-items``.  Option values are layered: command-line flags override a
``--config`` JSON file, which overrides the built-in defaults.  Exit codes: 0 success,
2 usage error, 3 data error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
from . import __version__
from .coupling import (CouplingConfig, build_graph, check_similarity,
                       read_similarity, similarity_header, write_similarity)
from .dataset import (FORMATS, SUPPORT_EDGES, ItemAttributeTable, compute_stats,
                      convert_movielens_items, folds_from_manifest, kfold_split, load_attributes,
                      load_ratings, read_movielens_items)
from .errors import DataError, DivergenceError
from .evaluation import AXES, cross_validate, method_name, sweep
from .factorization import TrainConfig, train

_log = logging.getLogger(__name__)

EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4

DEFAULTS = {
    "ratings": None,
    "format": "movielens-tab",
    "attributes": None,
    "similarity": None,
    "manifest": None,
    "metric": "cos",
    "neighbors": 40,
    "normalize": True,
    "k": 10,
    "beta": 0.1,
    "lambda1": 0.1,
    "lambda2": 0.1,
    "eta": 0.005,
    "epochs": 200,
    "epsilon": 1e-4,
    "shuffle": True,
    "folds": 5,
    "seed": 0,
    "scale_min": 1.0,
    "scale_max": 5.0,
    "jobs": 1,
    "out": None,
    "methods": "rsvd,iemf",
    "axis": "beta",
    "values": None,
}


class UsageError(Exception):
    pass


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _common_parser():
    p = argparse.ArgumentParser(add_help=False)
    S = argparse.SUPPRESS
    g = p.add_argument_group("data")
    g.add_argument("--config", help="JSON file of option values (flags take precedence)")
    g.add_argument("--ratings", default=S, help="ratings TSV (MovieLens u.data accepted)")
    g.add_argument("--format", default=S, choices=FORMATS, help="ratings file layout")
    g.add_argument("--attributes", default=S,
                   help="item attribute TSV with header, or a MovieLens u.item file")
    g.add_argument("--similarity", default=S, help="similarity file (written by `similarity`)")
    g.add_argument("--manifest", default=S, help="fold manifest JSON for exact re-runs")
    g.add_argument("--scale-min", dest="scale_min", type=float, default=S)
    g.add_argument("--scale-max", dest="scale_max", type=float, default=S)
    g = p.add_argument_group("similarity")
    g.add_argument("--metric", default=S, choices=("cos", "sms"))
    g.add_argument("--neighbors", type=int, default=S, help="neighbors kept per item (t)")
    g.add_argument("--normalize", type=_bool, default=S, help="divide COS by D (default true)")
    g = p.add_argument_group("training")
    g.add_argument("--k", type=int, default=S, help="latent dimension K")
    g.add_argument("--beta", type=float, default=S, help="item-relationship weight (0 = RSVD)")
    g.add_argument("--lambda1", type=float, default=S)
    g.add_argument("--lambda2", type=float, default=S)
    g.add_argument("--eta", type=float, default=S, help="learning rate")
    g.add_argument("--epochs", type=int, default=S, help="maximum epochs W")
    g.add_argument("--epsilon", type=float, default=S, help="objective-improvement threshold")
    g.add_argument("--shuffle", type=_bool, default=S, help="shuffle ratings every epoch")
    g.add_argument("--folds", type=int, default=S)
    g.add_argument("--seed", type=int, default=S)
    g = p.add_argument_group("run")
    g.add_argument("--jobs", type=int, default=S, help="parallel fold workers")
    g.add_argument("--out", default=S, help="output directory")
    g.add_argument("-v", "--verbose", action="count", default=0)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="iemf", description="Matrix factorization with coupled item-similarity regularization.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    sub.add_parser("similarity", parents=[common], help="precompute the item neighbor graph")
    sub.add_parser("train", parents=[common], help="train on the full ratings file")
    sub.add_parser("cv", parents=[common], help="k-fold cross-validation")
    cs = sub.add_parser("coldstart", parents=[common], help="per-support-bucket comparison")
    cs.add_argument("--methods", default=argparse.SUPPRESS,
                    help="comma list from rsvd,iemf,cbmf (default rsvd,iemf)")
    sw = sub.add_parser("sweep", parents=[common], help="cross-validate a parameter grid")
    sw.add_argument("--axis", choices=AXES, default=argparse.SUPPRESS)
    sw.add_argument("--values", default=argparse.SUPPRESS, help="comma-separated grid values")
    sub.add_parser("stats", parents=[common], help="dataset statistics")
    cv = sub.add_parser("convert-items", help="MovieLens u.item -> attribute TSV")
    cv.add_argument("source")
    cv.add_argument("dest")
    return parser


def resolve_options(ns: argparse.Namespace) -> tuple[dict, set]:
    """Merge defaults, config file and explicit flags; return (options, explicit keys)."""
    opts = dict(DEFAULTS)
    explicit = set()
    if getattr(ns, "config", None):
        try:
            with open(ns.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read config file {ns.config}: {e}") from e
        for key, value in cfg.items():
            key = key.replace("-", "_")
            if key not in DEFAULTS:
                raise UsageError(f"unknown option {key!r} in {ns.config}")
            opts[key] = value
            explicit.add(key)
    for key, value in vars(ns).items():
        if key in DEFAULTS:
            opts[key] = value
            explicit.add(key)
    return opts, explicit


def _train_config(o) -> TrainConfig:
    return TrainConfig(k=int(o["k"]), lambda1=float(o["lambda1"]), lambda2=float(o["lambda2"]),
                       beta=float(o["beta"]), eta=float(o["eta"]), max_epochs=int(o["epochs"]),
                       epsilon=float(o["epsilon"]), seed=int(o["seed"]), shuffle=_bool(o["shuffle"]))


def _coupling(o, metric=None) -> CouplingConfig:
    return CouplingConfig(metric or o["metric"], int(o["neighbors"]), _bool(o["normalize"]))


def _need(o, key, why):
    if not o.get(key):
        raise UsageError(f"--{key.replace('_', '-')} is required {why}")
    return o[key]


def _ratings(o):
    path = _need(o, "ratings", "for this command")
    return load_ratings(path, o["format"], (float(o["scale_min"]), float(o["scale_max"])))


def _attributes(o) -> ItemAttributeTable:
    path = o["attributes"]
    with open(path, "rb") as fh:
        head = fh.readline()
    if b"|" in head and b"\t" not in head:
        return read_movielens_items(path)
    return load_attributes(path)


def _out_dir(o, command):
    out = o["out"] or os.path.join("runs", command)
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path, data):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _snapshot(o, out, command):
    snap = {k: v for k, v in sorted(o.items()) if k != "out"}
    snap["command"] = command
    _write_json(os.path.join(out, "config.json"), snap)


def _graph_for(o, explicit, ratings, metric, required_why):
    """Load the similarity file for ``metric`` or build the graph from attributes."""
    coupling = _coupling(o, metric)
    if o["similarity"]:
        graph, header = read_similarity(o["similarity"])
        if header.get("metric") == metric:
            table = _attributes(o).align(ratings.item_ids) if o["attributes"] else None
            check_similarity(header, ratings.item_ids, table)
            if "neighbors" in explicit and header.get("neighbors") != str(coupling.neighborhood_size):
                raise DataError(f"similarity file was built with {header.get('neighbors')} "
                                f"neighbors, --neighbors {coupling.neighborhood_size} requested")
            coupling = CouplingConfig(metric, int(header["neighbors"]), header["normalize"] == "true")
            return graph, coupling
        if "metric" in explicit and metric == o["metric"] and not o["attributes"]:
            raise DataError(f"similarity file holds a {header.get('metric')} graph but "
                            f"--metric {metric} was requested")
    if o["attributes"]:
        table = _attributes(o).align(ratings.item_ids)
        return build_graph(table, coupling, jobs=int(o["jobs"])), coupling
    raise UsageError(f"a similarity graph is required {required_why}: run `iemf similarity` "
                     f"first and pass --similarity, or pass --attributes")


def _folds(o, ratings):
    if o["manifest"]:
        return folds_from_manifest(ratings, o["manifest"])
    return kfold_split(ratings, int(o["folds"]), int(o["seed"]))


def cmd_similarity(o, explicit):
    _need(o, "attributes", "to compute similarities")
    table = _attributes(o)
    if o["ratings"]:
        table = table.align(_ratings(o).item_ids)
    coupling = _coupling(o)
    graph = build_graph(table, coupling, jobs=int(o["jobs"]))
    path = o["similarity"] or os.path.join(_out_dir(o, "similarity"), "similarity.tsv")
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        write_similarity(graph, fh, similarity_header(coupling, table))
    print(f"{coupling.metric} similarity: {table.n_items} items, {graph.n_edges} edges -> {path}")
    return 0


def cmd_train(o, explicit):
    ratings = _ratings(o)
    config = _train_config(o)
    graph, coupling = None, _coupling(o)
    if config.beta:
        if not o["similarity"]:
            raise UsageError("--beta > 0 needs a similarity file: run `iemf similarity "
                             "--attributes ... --ratings ...` first and pass --similarity")
        graph, coupling = _graph_for(o, explicit, ratings, o["metric"], "when --beta > 0")
    model, trace = train(ratings, graph, config)
    out = _out_dir(o, "train")
    _snapshot(o, out, "train")
    model.save(os.path.join(out, "model.txt"))
    trace.save(os.path.join(out, "trace.csv"))
    print(f"{method_name(config, coupling)}: {trace.epochs_run} epochs ({trace.stop_reason}), "
          f"objective {trace.objective_per_epoch[-1]:.6f} -> {out}")
    return 0


def _cv_one(o, explicit, ratings, folds, config, metric):
    coupling, graph = _coupling(o, metric), None
    if config.beta:
        graph, coupling = _graph_for(o, explicit, ratings, metric, "when --beta > 0")
    return cross_validate(ratings, coupling=coupling, config=config, graph=graph, folds=folds,
                          jobs=int(o["jobs"]))


def cmd_cv(o, explicit):
    ratings = _ratings(o)
    folds = _folds(o, ratings)
    res = _cv_one(o, explicit, ratings, folds, _train_config(o), o["metric"])
    out = _out_dir(o, "cv")
    _snapshot(o, out, "cv")
    folds.save_manifest(os.path.join(out, "folds.json"))
    _write_json(os.path.join(out, "report.json"), res.to_json())
    with open(os.path.join(out, "folds.csv"), "w", encoding="utf-8", newline="\n") as fh:
        res.write_csv(fh)
    print(f"{res.method}: mean MAE {res.mean.mae:.4f}  RMSE {res.mean.rmse:.4f} "
          f"over {len(res.per_fold)} folds -> {out}")
    return 0


_METHODS = {"rsvd": (0.0, "cos"), "iemf": (None, "cos"), "cbmf": (None, "sms")}


def cmd_coldstart(o, explicit):
    ratings = _ratings(o)
    folds = _folds(o, ratings)
    base = _train_config(o)
    methods = [m.strip().lower() for m in str(o["methods"]).split(",") if m.strip()]
    for m in methods:
        if m not in _METHODS:
            raise UsageError(f"unknown method {m!r}; choose from {', '.join(_METHODS)}")
    report = {"edges": list(SUPPORT_EDGES), "methods": {}}
    for m in methods:
        beta, metric = _METHODS[m]
        config = base.replace(beta=base.beta if beta is None else beta)
        if m != "rsvd" and config.beta == 0:
            raise UsageError(f"method {m} needs --beta > 0")
        res = _cv_one(o, explicit, ratings, folds, config, metric)
        report["methods"][res.method] = {"mean": res.mean.as_dict(),
                                         "buckets": res.coldstart.as_dict()}
        print(f"{res.method}: " + "  ".join(
            f"{label}={r.mae:.4f}" if r.count else f"{label}=n/a"
            for label, r in res.coldstart.buckets.items()))
    if "RSVD" in report["methods"]:
        base_b = report["methods"]["RSVD"]["buckets"]
        improvement = {}
        for name, rep in report["methods"].items():
            if name == "RSVD":
                continue
            improvement[name] = {
                label: (base_b[label]["mae"] - b["mae"]) / base_b[label]["mae"]
                for label, b in rep["buckets"].items() if b["count"] and base_b[label]["count"]}
        report["mae_improvement_over_rsvd"] = improvement
    out = _out_dir(o, "coldstart")
    _snapshot(o, out, "coldstart")
    _write_json(os.path.join(out, "coldstart.json"), report)
    return 0


def cmd_sweep(o, explicit):
    ratings = _ratings(o)
    axis = o["axis"]
    if axis not in AXES:
        raise UsageError(f"--axis must be one of {AXES}")
    raw = _need(o, "values", "for a sweep")
    values = raw if isinstance(raw, list) else [v for v in str(raw).split(",") if v.strip()]
    try:
        values = [int(v) for v in values] if axis != "beta" else [float(v) for v in values]
    except ValueError:
        raise UsageError(f"bad --values {raw!r}") from None
    config = _train_config(o)
    coupling, graph, attributes = _coupling(o), None, None
    if axis == "neighborhood":
        _need(o, "attributes", "for a neighborhood sweep")
        attributes = _attributes(o)
    elif config.beta or axis == "beta":
        graph, coupling = _graph_for(o, explicit, ratings, o["metric"], "for this sweep")
    res = sweep(axis, values, ratings, attributes, coupling, config, int(o["folds"]),
                int(o["seed"]), graph=graph, jobs=int(o["jobs"]))
    out = _out_dir(o, "sweep")
    _snapshot(o, out, "sweep")
    with open(os.path.join(out, "sweep.csv"), "w", encoding="utf-8", newline="\n") as fh:
        res.write_csv(fh)
    best, rep = res.best("mae")
    print(f"best {axis}={best}: mean MAE {rep.mae:.4f} RMSE {rep.rmse:.4f} -> {out}")
    return 0


def cmd_stats(o, explicit):
    stats = compute_stats(_ratings(o))
    print(f"ratings\t{stats.n_ratings}")
    print(f"users\t{stats.n_users}")
    print(f"items\t{stats.n_items}")
    print(f"sparsity\t{stats.sparsity:.4f}")
    print(f"avg_ratings_per_user\t{stats.avg_ratings_per_user:.2f}")
    print(f"avg_ratings_per_item\t{stats.avg_ratings_per_item:.2f}")
    if o["out"]:
        os.makedirs(o["out"], exist_ok=True)
        _write_json(os.path.join(o["out"], "stats.json"), stats.as_dict())
    return 0


def cmd_convert_items(ns):
    with open(ns.source, "rb") as fh:
        text = fh.read().decode("latin-1")
    with open(ns.dest, "w", encoding="utf-8", newline="\n") as out:
        n = convert_movielens_items(io.StringIO(text), out)
    print(f"wrote {n} items to {ns.dest}")
    return 0


COMMANDS = {
    "similarity": cmd_similarity,
    "train": cmd_train,
    "cv": cmd_cv,
    "coldstart": cmd_coldstart,
    "sweep": cmd_sweep,
    "stats": cmd_stats,
}


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    if getattr(ns, "verbose", 0):
        logging.basicConfig(level=logging.INFO if ns.verbose == 1 else logging.DEBUG,
                            format="%(levelname)s %(name)s: %(message)s")
    try:
        if ns.command == "convert-items":
            return cmd_convert_items(ns)
        opts, explicit = resolve_options(ns)
        return COMMANDS[ns.command](opts, explicit)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"iemf: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"iemf: diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, OSError, KeyError) as e:
        print(f"iemf: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"iemf: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
