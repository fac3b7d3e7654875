"""Command line entry point: convert, pretrain, train, rank, evaluate, inspect.

Exit codes: 0 success, 1 data error, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np

from .autograd import CheckpointError, DimensionError
from .encoder import GTConfig, load_embeddings
from .evaluation import (Bm25Index, bm25_rank, evaluate_run, kfold_split,
                         qrels_from_instances, read_run, write_run)
from .graph import build_graph, graph_stats
from .matcher import MatchConfig, write_attribution_csv
from .model import TableRanker
from .table import (TableError, iter_corpus, load_corpus, load_instances, read_qrels,
                    read_queries, resolve_grid)
from .toy import make_toy_corpus, write_toy
from .training import PretrainingDisabled, TrainingError, TrainConfig, pretrain, train

log = logging.getLogger("tabgraph")


class ConfigError(Exception):
    pass


# name -> (type, default); a flag left unset falls back to --config, then here
OPTIONS = {
    "corpus": (str, None), "queries": (str, None), "qrels": (str, None),
    "embeddings": (str, None), "checkpoint": (str, None), "out": (str, None),
    "objective": (str, "mse"), "epochs": (int, None), "batch_size": (int, None),
    "lr": (float, 1e-4), "warmup": (int, 100), "folds": (int, 1), "seed": (int, 0),
    "workers": (int, 1), "layers": (int, 4), "heads": (int, 4), "dropout": (float, 0.1),
    "negatives": (int, 9), "dtype": (str, "float32"),
}


def read_config(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip().replace("-", "_")
            if not sep or key not in OPTIONS:
                raise ConfigError(f"{path}:{lineno}: unknown setting {line!r}")
            out[key] = value.strip()
    return out


def resolve(args) -> dict:
    cfg = read_config(args.config) if getattr(args, "config", None) else {}
    out = {}
    for key, (typ, default) in OPTIONS.items():
        value = getattr(args, key, None)
        if value is None and key in cfg:
            try:
                value = typ(cfg[key])
            except ValueError:
                raise ConfigError(f"setting {key}={cfg[key]!r} is not a valid {typ.__name__}")
        out[key] = default if value is None else value
    if out["objective"] not in ("mse", "nll"):
        raise ConfigError(f"objective must be mse or nll, got {out['objective']!r}")
    if out["dtype"] not in ("float32", "float64"):
        raise ConfigError("dtype must be float32 or float64")
    if out["workers"] != 1:
        log.info("computation is vectorized in one process; --workers %d has no effect",
                 out["workers"])
    return out


def require(opts, *keys):
    for k in keys:
        if opts[k] is None:
            raise ConfigError(f"--{k.replace('_', '-')} is required")
        if k in ("corpus", "queries", "qrels", "embeddings", "checkpoint", "run") \
                and not Path(opts[k]).exists():
            raise ConfigError(f"--{k} path does not exist: {opts[k]}")


def _safe(name: str) -> str:
    return re.sub(r"[^\w.-]", "_", name)


def build_model(opts, embeddings) -> TableRanker:
    gt = GTConfig(layers=opts["layers"], heads=opts["heads"], hidden=embeddings.dim,
                  dropout=opts["dropout"])
    match = MatchConfig(dropout=opts["dropout"])
    return TableRanker(embeddings, gt, match, seed=opts["seed"], dtype=np.dtype(opts["dtype"]))


def load_corpora(paths) -> dict:
    corpus = {}
    for p in paths.split(","):
        for tid, t in load_corpus(p).items():
            if tid in corpus:
                raise TableError(f"table id {tid!r} appears in more than one corpus")
            corpus[tid] = t
    return corpus


# -- commands ----------------------------------------------------------------------

def cmd_convert(opts) -> int:
    require(opts, "corpus", "out")
    out = Path(opts["out"])
    (out / "graphs").mkdir(parents=True, exist_ok=True)
    stats = {"table_count": 0, "merged_table_count": 0, "cell_nodes": 0, "row_nodes": 0,
             "col_nodes": 0, "edges": 0, "padded_slots": 0}
    failures = []
    for lineno, table, err in iter_corpus(opts["corpus"]):
        if err is None:
            try:
                graph = build_graph(table, resolve_grid(table))
            except TableError as e:
                err = str(e)
        if err is not None:
            failures.append({"line": lineno, "error": err})
            log.error("%s line %d: %s", opts["corpus"], lineno, err)
            continue
        gs = graph_stats(graph)
        stats["table_count"] += 1
        stats["merged_table_count"] += gs.n_merged > 0
        stats["cell_nodes"] += gs.n_cell
        stats["row_nodes"] += gs.n_row
        stats["col_nodes"] += gs.n_col
        stats["edges"] += gs.n_edges
        stats["padded_slots"] += graph.grid.n_padded
        (out / "graphs" / f"{_safe(table.id)}.json").write_text(graph.to_json() + "\n",
                                                                encoding="utf-8")
    stats["failures"] = failures
    stats["seed"] = opts["seed"]
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    print(json.dumps({k: v for k, v in stats.items() if k != "failures"}, sort_keys=True))
    return 1 if failures else 0


def cmd_pretrain(opts) -> int:
    require(opts, "corpus", "embeddings", "out")
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    corpus = load_corpora(opts["corpus"])
    model = build_model(opts, load_embeddings(opts["embeddings"]))
    config = TrainConfig(seed=opts["seed"], pretrain=True,
                         pretrain_epochs=opts["epochs"] if opts["epochs"] is not None else 20,
                         pretrain_batch=opts["batch_size"] or 16, pretrain_lr=opts["lr"])
    try:
        history = pretrain(model, corpus, config, log_path=out / "pretrain_log.jsonl")
    except PretrainingDisabled as e:
        log.error("pre-training disabled: %s", e)
        return 1
    model.save(out / "pretrained.ckpt", {"phase": "pretrain", "train_seed": opts["seed"]})
    print(json.dumps({"epochs": config.pretrain_epochs, "final_loss": history[-1]
                      if history else None}))
    return 0


def _train_config(opts) -> TrainConfig:
    return TrainConfig(objective=opts["objective"], lr=opts["lr"],
                       epochs=opts["epochs"] if opts["epochs"] is not None else 5,
                       batch_size=opts["batch_size"] or 16, warmup_steps=opts["warmup"],
                       dropout=opts["dropout"], seed=opts["seed"], negatives=opts["negatives"])


def _fresh_model(opts, embeddings):
    model = build_model(opts, embeddings)
    if opts["checkpoint"]:
        model.load(opts["checkpoint"], names=model.graph_branch_names(), moments=False)
    return model


def cmd_train(opts) -> int:
    require(opts, "corpus", "queries", "qrels", "embeddings", "out")
    if opts["checkpoint"]:
        require(opts, "checkpoint")
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    corpus = load_corpora(opts["corpus"])
    instances = load_instances(opts["queries"], opts["qrels"], corpus)
    embeddings = load_embeddings(opts["embeddings"])
    config = _train_config(opts)
    tag = f"tabgraph-s{opts['seed']}"

    if opts["folds"] <= 1:
        model = _fresh_model(opts, embeddings)
        (out / "checkpoints").mkdir(exist_ok=True)
        history = train(model, instances, corpus, config, checkpoint_dir=out / "checkpoints",
                        log_path=out / "train_log.jsonl")
        model.save(out / "model.ckpt", {"train_seed": opts["seed"]})
        run = model.rank_instances(instances, corpus)
        write_run(run, out / "run.txt", tag)
        report = evaluate_run(run, qrels_from_instances(instances))
        (out / "train_eval.json").write_text(report.to_json() + "\n")
        print(json.dumps({"epochs": config.epochs, "final_loss": history[-1] if history else None,
                          "train_map": report.mean["map"]}))
        return 0

    by_id = {i.query_id: i for i in instances}
    pooled = {}
    for k, (train_ids, test_ids) in enumerate(kfold_split(sorted(by_id), opts["folds"],
                                                          opts["seed"])):
        fold_dir = out / f"fold{k}"
        fold_dir.mkdir(exist_ok=True)
        model = _fresh_model(opts, embeddings)
        train(model, [by_id[q] for q in sorted(train_ids)], corpus, config,
              log_path=fold_dir / "train_log.jsonl")
        model.save(fold_dir / "model.ckpt", {"fold": k, "train_seed": opts["seed"]})
        pooled.update(model.rank_instances([by_id[q] for q in sorted(test_ids)], corpus))
    write_run(pooled, out / "run.txt", tag)
    report = evaluate_run(pooled, qrels_from_instances(instances))
    (out / "cv_eval.json").write_text(report.to_json() + "\n")
    print(report.to_text())
    return 0


def cmd_rank(opts) -> int:
    require(opts, "corpus", "queries", "out")
    corpus = load_corpora(opts["corpus"])
    if opts["qrels"]:
        instances = load_instances(opts["queries"], opts["qrels"], corpus)
    else:
        from .table import RetrievalInstance
        ids = sorted(corpus)
        instances = [RetrievalInstance(q, text, tuple((t, 0) for t in ids))
                     for q, text in read_queries(opts["queries"]).items()]
    if opts["checkpoint"] is None:
        index = Bm25Index.from_tables(corpus)
        run = {i.query_id: bm25_rank(i.query_text, i.table_ids, index) for i in instances}
        tag = "bm25"
    else:
        require(opts, "embeddings", "checkpoint")
        model = TableRanker.from_checkpoint(opts["checkpoint"],
                                            load_embeddings(opts["embeddings"]))
        run = model.rank_instances(instances, corpus)
        tag = f"tabgraph-s{model.seed}"
    write_run(run, opts["out"], tag)
    print(f"ranked {len(run)} queries -> {opts['out']}")
    return 0


def load_qrels_dict(path) -> dict[str, dict[str, int]]:
    out: dict[str, dict[str, int]] = {}
    for qid, tid, grade, _ in read_qrels(path):
        out.setdefault(qid, {})[tid] = grade
    return out


def cmd_evaluate(opts, run_path) -> int:
    require(opts, "qrels")
    if not Path(run_path).exists():
        raise ConfigError(f"--run path does not exist: {run_path}")
    report = evaluate_run(read_run(run_path), load_qrels_dict(opts["qrels"]))
    print(report.to_text())
    print(f"MAP {report.mean['map']:.4f}")
    if opts["out"]:
        Path(opts["out"]).write_text(report.to_json() + "\n")
    return 0


def cmd_inspect(opts, query, table_id) -> int:
    require(opts, "corpus", "embeddings", "checkpoint", "out")
    corpus = load_corpora(opts["corpus"])
    model = TableRanker.from_checkpoint(opts["checkpoint"], load_embeddings(opts["embeddings"]))
    if query is not None:
        if table_id not in corpus:
            raise TableError(f"unknown table id {table_id!r}")
        pairs = [(None, query, table_id)]
    else:
        require(opts, "queries", "qrels")
        pairs = [(i.query_id, i.query_text, t)
                 for i in load_instances(opts["queries"], opts["qrels"], corpus)
                 for t in i.table_ids if table_id is None or t == table_id]
    out = Path(opts["out"])
    single = len(pairs) == 1 and query is not None
    if not single:
        out.mkdir(parents=True, exist_ok=True)
    for qid, text, tid in pairs:
        graph, freq = model.attribution(text, corpus[tid])
        path = out if single else out / f"{_safe(qid)}__{_safe(tid)}.csv"
        write_attribution_csv(graph, freq, path)
    print(f"wrote attribution for {len(pairs)} pair(s)")
    return 0


def cmd_make_toy(opts, tables, queries, captions) -> int:
    require(opts, "out")
    data = make_toy_corpus(tables, queries, seed=opts["seed"], keyword_captions=captions)
    for name, path in write_toy(data, opts["out"]).items():
        print(f"{name}: {path}")
    return 0


# -- argument parsing ------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="flat key=value settings file")
    p.add_argument("--corpus", help="table JSON-lines file(s), comma separated")
    p.add_argument("--queries")
    p.add_argument("--qrels")
    p.add_argument("--embeddings")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def _model_flags(p):
    p.add_argument("--objective", choices=["mse", "nll"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--negatives", type=int)
    p.add_argument("--dtype", choices=["float32", "float64"])


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tabgraph", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("convert", help="build tabular graphs and corpus statistics")
    _common(p)
    for name in ("pretrain", "train"):
        p = sub.add_parser(name, help=f"{name} a model")
        _common(p)
        _model_flags(p)
    p = sub.add_parser("rank", help="rank candidates (BM25 without --checkpoint)")
    _common(p)
    p = sub.add_parser("evaluate", help="score a TREC run file")
    _common(p)
    p.add_argument("--run", required=True)
    p = sub.add_parser("inspect", help="max-pool attribution CSV")
    _common(p)
    p.add_argument("--query", help="query text (otherwise every judged pair in --qrels)")
    p.add_argument("--table", help="table id")
    p = sub.add_parser("make-toy", help="write a synthetic keyword corpus")
    _common(p)
    p.add_argument("--tables", type=int, default=64)
    p.add_argument("--n-queries", dest="n_queries", type=int, default=32)
    p.add_argument("--keyword-captions", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve(args)
        if args.command == "convert":
            return cmd_convert(opts)
        if args.command == "pretrain":
            return cmd_pretrain(opts)
        if args.command == "train":
            return cmd_train(opts)
        if args.command == "rank":
            return cmd_rank(opts)
        if args.command == "evaluate":
            return cmd_evaluate(opts, args.run)
        if args.command == "make-toy":
            return cmd_make_toy(opts, args.tables, args.n_queries, args.keyword_captions)
        if args.command == "inspect":
            if args.query is not None and args.table is None:
                raise ConfigError("--query needs --table")
            return cmd_inspect(opts, args.query, args.table)
    except (ConfigError, CheckpointError, DimensionError) as e:
        log.error("%s", e)
        return 2
    except (ValueError, OSError, PretrainingDisabled, TrainingError) as e:
        log.error("%s", e)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
