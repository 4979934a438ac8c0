"""Command-line interface: ``gspn <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data or model error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import baselines
from .graph import Dataset, DatasetError, apply_missing_mask, dataset_to_json, load_dataset, save_dataset
from .model import (GspnConfig, forward_pass, load_checkpoint, save_checkpoint, train_unsupervised,
                    vertex_embeddings)
from .queries import hop_distances, impute, missing_nll, perturbation_query
from .readout import graph_predict, train_supervised

log = logging.getLogger("gspn")

PATH_KEYS = ("data", "eval_data", "out", "model", "metrics")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------------- helpers

def _metrics(name: str, values, **extra) -> dict:
    vals = np.array([v for v in values if v is not None and np.isfinite(v)], dtype=np.float64)
    out = {"metric": name,
           "mean": float(vals.mean()) if len(vals) else None,
           "std": float(vals.std()) if len(vals) else None,
           "per_graph": [None if v is None or not np.isfinite(v) else float(v) for v in values]}
    out.update(extra)
    return out


def _emit(metrics: dict, args) -> None:
    text = json.dumps(metrics, indent=2)
    if args.metrics:
        Path(args.metrics).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _load_config(args) -> GspnConfig:
    raw = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        for key in PATH_KEYS:
            if key in raw and getattr(args, key, None) is None and hasattr(args, key):
                setattr(args, key, raw[key])
    cfg_fields = {f.name for f in fields(GspnConfig)}
    data = {k: v for k, v in raw.items() if k in cfg_fields}
    unknown = set(raw) - cfg_fields - set(PATH_KEYS)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for name in cfg_fields:
        val = getattr(args, name, None)
        if val is not None:
            data[name] = val
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    return GspnConfig.from_dict(data)


def _require(args, *names):
    for n in names:
        if getattr(args, n, None) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required")


def _load_model(args, ds: Dataset = None):
    _require(args, "model")
    params, cfg, readout = load_checkpoint(args.model)
    if ds is not None and ds.schema != params.schema:
        raise DatasetError("dataset schema does not match the checkpoint schema")
    return params, cfg, readout


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _num(v):
    return repr(float(v))


# --------------------------------------------------------------------------- commands

def cmd_train_unsup(args):
    cfg = _load_config(args)
    _require(args, "data", "out")
    ds = load_dataset(args.data)
    params, history = train_unsupervised(ds, cfg)
    save_checkpoint(args.out, params, cfg)
    pll = _map(lambda g: float(forward_pass(g, params).pll.mean()) if g.num_vertices else None,
               ds.graphs, args.workers)
    _emit(_metrics("pll", pll, best_epoch=history.best_epoch, history=history.epochs), args)


def cmd_train_sup(args):
    cfg = _load_config(args)
    _require(args, "data", "out")
    ds = load_dataset(args.data)
    init = None
    if args.mode == "frozen" and args.model:
        init, _, _ = _load_model(args, ds)
        # the frozen GSPN fixes the architecture the readout must match
        cfg = replace(cfg, layers=init.layers, states=init.states, shortcut=init.shortcut)
    params, rp, history = train_supervised(ds, cfg, args.mode, init)
    save_checkpoint(args.out, params, cfg, rp)
    correct = [float(np.argmax(graph_predict(g, params, rp)) == g.label) for g in ds.graphs]
    _emit(_metrics("accuracy", correct, best_epoch=history.best_epoch, history=history.epochs), args)


def cmd_eval_pll(args):
    _load_config(args)
    _require(args, "data")
    ds = load_dataset(args.data)
    params, _, _ = _load_model(args, ds)
    per_vertex = _map(lambda g: forward_pass(g, params).pll, ds.graphs, args.workers)
    if args.csv:
        _write_csv(args.csv, ["graph_id", "vertex_id", "value"],
                   [[gi, v, _num(x)] for gi, pv in enumerate(per_vertex) for v, x in enumerate(pv)])
    _emit(_metrics("pll", [float(pv.mean()) if len(pv) else None for pv in per_vertex]), args)


def cmd_eval_missing_nll(args):
    _load_config(args)
    _require(args, "data")
    ds = load_dataset(args.data)
    params, _, _ = _load_model(args, ds)

    def one(g):
        if not (~g.mask & np.isfinite(g.x)).any():
            return None
        return missing_nll(g, params)
    results = _map(one, ds.graphs, args.workers)
    if all(r is None for r in results):
        raise DatasetError("no masked entries with known values in the dataset")
    if args.csv:
        _write_csv(args.csv, ["graph_id", "vertex_id", "value"],
                   [[gi, v, _num(x)] for gi, r in enumerate(results) if r
                    for v, x in enumerate(r.per_vertex) if np.isfinite(x)])
    per_vertex = np.concatenate([r.per_vertex[np.isfinite(r.per_vertex)] for r in results if r])
    n_entries = sum(r.num_entries for r in results if r)
    total = sum(r.per_attribute * r.num_entries for r in results if r)
    m = _metrics("missing_nll", [None if r is None else r.mean for r in results],
                 per_vertex_mean=float(per_vertex.mean()), per_attribute_mean=total / n_entries,
                 num_vertices=int(len(per_vertex)), num_entries=int(n_entries))
    _emit(m, args)


def cmd_impute(args):
    _load_config(args)
    _require(args, "data", "out")
    ds = load_dataset(args.data)
    params, _, _ = _load_model(args, ds)
    filled = _map(lambda g: impute(g, params), ds.graphs, args.workers)
    rows, counts = [], []
    graphs = []
    for gi, (g, x) in enumerate(zip(ds.graphs, filled)):
        miss = np.argwhere(~g.mask)
        counts.append(float(len(miss)))
        rows.extend((gi, int(v), int(a), _num(x[v, a])) for v, a in miss)
        graphs.append(g.replace(x=x, mask=np.ones_like(g.mask)))
    save_dataset(Dataset(ds.schema, graphs, ds.num_classes), args.out)
    if args.csv:
        _write_csv(args.csv, ["graph_id", "vertex_id", "attribute", "value"], rows)
    _emit(_metrics("imputed_entries", counts), args)


def cmd_embed(args):
    _load_config(args)
    _require(args, "data", "out")
    ds = load_dataset(args.data)
    params, cfg, _ = _load_model(args, ds)
    embs = _map(lambda g: vertex_embeddings(g, params), ds.graphs, args.workers)
    width = (params.layers + 1) * params.states
    header = ["graph_id", "vertex_id"] + [f"h{l}_{i}" for l in range(params.layers + 1)
                                          for i in range(params.states)]
    rows = [[gi, v] + [_num(e) for e in row] for gi, emb in enumerate(embs) for v, row in enumerate(emb)]
    _write_csv(args.out, header, rows)
    _emit(_metrics("num_vertices", [float(len(e)) for e in embs], dim=width), args)


def cmd_query_perturb(args):
    _load_config(args)
    _require(args, "data", "vertex", "attr", "value", "out")
    ds = load_dataset(args.data)
    params, cfg, _ = _load_model(args, ds)
    if not 0 <= args.graph < len(ds):
        raise DatasetError(f"graph index {args.graph} out of range")
    g = ds.graphs[args.graph]
    delta = perturbation_query(g, params, cfg, args.vertex, args.attr, args.value)
    dist = hop_distances(g, args.vertex)
    _write_csv(args.out, ["vertex_id", "hop_distance", "delta_pll"],
               [[v, int(dist[v]), _num(delta[v])] for v in range(g.num_vertices)])
    _emit(_metrics("delta_pll", [float(np.abs(delta).sum())], graph=args.graph, vertex=args.vertex,
                   attribute=args.attr, value=args.value, layers=params.layers,
                   per_vertex=[float(d) for d in delta], hop_distance=[int(d) for d in dist]), args)


def cmd_classify(args):
    _load_config(args)
    _require(args, "data")
    ds = load_dataset(args.data)
    params, _, rp = _load_model(args, ds)
    if rp is None:
        raise DatasetError("checkpoint has no readout; train it with train-sup")
    probs = _map(lambda g: graph_predict(g, params, rp), ds.graphs, args.workers)
    if args.out:
        _write_csv(args.out, ["graph_id", "predicted"] + [f"p{k}" for k in range(rp.num_classes)],
                   [[gi, int(np.argmax(p))] + [_num(x) for x in p] for gi, p in enumerate(probs)])
    if all(g.label is not None for g in ds.graphs):
        _emit(_metrics("accuracy", [float(np.argmax(p) == g.label) for p, g in zip(probs, ds.graphs)]), args)
    else:
        _emit(_metrics("max_probability", [float(p.max()) for p in probs]), args)


def cmd_baseline(args):
    cfg = _load_config(args)
    _require(args, "data")
    ds = load_dataset(args.data)
    if args.kind == "gaussian":
        p = baselines.fit_gaussian(ds)
    else:
        p = baselines.fit_gmm(ds, cfg.states, args.max_iters, args.tol, cfg.seed)
    if args.out:
        Path(args.out).write_text(json.dumps(p.to_json()), encoding="utf-8")
    ev = load_dataset(args.eval_data) if args.eval_data else ds
    if ev.schema != ds.schema:
        raise DatasetError("evaluation dataset schema differs from the training dataset")
    per_graph = []
    for g in ev.graphs:
        heldout = ~g.mask & np.isfinite(g.x)
        if heldout.any():
            per_graph.append(baselines.baseline_missing_nll(p, Dataset(ev.schema, [g])).mean)
        else:
            per_graph.append(None)
    if any(v is not None for v in per_graph):
        r = baselines.baseline_missing_nll(p, Dataset(ev.schema, [g for g in ev.graphs]))
        _emit(_metrics("missing_nll", per_graph, baseline=args.kind, per_vertex_mean=r.mean,
                       per_attribute_mean=r.per_attribute), args)
    else:
        ll = [float(baselines.row_log_likelihood(p, g.x, g.mask).mean()) if g.num_vertices else None
              for g in ev.graphs]
        _emit(_metrics("row_log_likelihood", ll, baseline=args.kind), args)


def cmd_mask(args):
    _require(args, "data", "out")
    ds = load_dataset(args.data)
    seed = 0 if args.seed is None else args.seed
    masked = apply_missing_mask(ds, args.concentration, args.rate, seed)
    save_dataset(masked, args.out)
    _emit(_metrics("masked_fraction", [float((~g.mask).mean()) if g.num_vertices else None
                                       for g in masked.graphs], **masked.stats()), args)


# --------------------------------------------------------------------------- parser

def _common(p, config=True):
    if config:
        p.add_argument("--config", help="JSON config (GspnConfig fields and paths)")
    p.add_argument("--data", help="dataset JSON")
    p.add_argument("--metrics", help="write metrics JSON here instead of stdout")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1, help="threads over graphs (1 = bit-exact)")


def _model_flags(p):
    p.add_argument("--model", help="checkpoint path")


def _hyper_flags(p):
    p.add_argument("--layers", type=int)
    p.add_argument("--states", type=int)
    p.add_argument("--shortcut", action="store_true", default=None)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gspn", description="Graph-induced sum-product networks")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train-unsup", help="train on the pseudo log-likelihood")
    _common(p); _hyper_flags(p)
    p.add_argument("--out", help="checkpoint to write")
    p.set_defaults(func=cmd_train_unsup)

    p = sub.add_parser("train-sup", help="train the supervised graph readout")
    _common(p); _hyper_flags(p); _model_flags(p)
    p.add_argument("--out", help="checkpoint to write")
    p.add_argument("--mode", choices=("joint", "frozen"), default="joint")
    p.add_argument("--readout-states", dest="readout_states", type=int)
    p.add_argument("--pooling", choices=("mean", "sum"))
    p.add_argument("--readout-learning-rate", dest="readout_learning_rate", type=float)
    p.set_defaults(func=cmd_train_sup)

    for name, func, hlp in (("eval-pll", cmd_eval_pll, "mean per-vertex pseudo log-likelihood"),
                            ("eval-missing-nll", cmd_eval_missing_nll, "NLL of held-out attributes")):
        p = sub.add_parser(name, help=hlp)
        _common(p); _model_flags(p)
        p.add_argument("--csv", help="per-vertex values as CSV (graph_id, vertex_id, value)")
        p.set_defaults(func=func)

    p = sub.add_parser("impute", help="conditional-mean imputation")
    _common(p); _model_flags(p)
    p.add_argument("--out", help="imputed dataset JSON")
    p.add_argument("--csv", help="CSV of imputed entries")
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("embed", help="vertex embeddings as CSV")
    _common(p); _model_flags(p)
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("query-perturb", help="per-vertex change in PLL after editing one attribute")
    _common(p); _model_flags(p)
    p.add_argument("--graph", type=int, default=0)
    p.add_argument("--vertex", type=int)
    p.add_argument("--attr", type=int)
    p.add_argument("--value", type=float)
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_query_perturb)

    p = sub.add_parser("classify", help="graph-level predictions from the readout")
    _common(p); _model_flags(p)
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("baseline", help="fit and evaluate a structure-agnostic baseline")
    p.add_argument("kind", choices=("gaussian", "gmm"))
    _common(p)
    p.add_argument("--states", type=int)
    p.add_argument("--eval-data", dest="eval_data")
    p.add_argument("--max-iters", dest="max_iters", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--out", help="fitted parameters JSON")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("mask", help="hide attributes with Gamma-distributed proportions")
    _common(p, config=False)
    p.add_argument("--concentration", type=float, default=1.5)
    p.add_argument("--rate", type=float, default=0.5)
    p.add_argument("--out", help="masked dataset JSON")
    p.set_defaults(func=cmd_mask)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("GSPN_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (DatasetError, ValueError, KeyError, IndexError, OSError) as exc:
        print(f"gspn: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
